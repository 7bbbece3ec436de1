//! HTTP operator API over a live run.
//!
//! The loop task owns the [`Simulation`] and is its only writer. Handlers read
//! published snapshots and push operator commands into a bounded queue that
//! the loop drains between steps.

use std::convert::Infallible;
use std::io::Write;
use std::sync::{Arc, RwLock};
use std::time::Duration;

use axum::extract::{Query, State};
use axum::http::StatusCode;
use axum::response::sse::{Event, KeepAlive, Sse};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use ofo_core::controller::{ControllerError, ControllerStatus};
use ofo_core::grid::BusId;
use ofo_core::plant::SetpointLevel;
use serde::{Deserialize, Serialize};
use tokio::sync::{broadcast, mpsc, oneshot, watch};
use tokio_stream::wrappers::BroadcastStream;
use tokio_stream::Stream;
use tokio_stream::StreamExt;

use crate::log::{format_timestamp, CsvLogWriter, StepRecord};
use crate::sim::Simulation;

const QUEUE_DEPTH: usize = 64;

/// JSON form of one step as served by the API and the event stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecordView {
    pub step: u64,
    pub time_s: u64,
    pub timestamp: String,
    /// Reported values; `null` where the sensor had nothing to report.
    pub voltages_pu: Vec<Option<f64>>,
    pub p_sub_kw: Option<f64>,
    pub q_sub_kvar: Option<f64>,
    pub stale: Vec<bool>,
    pub true_voltages_pu: Vec<f64>,
    pub true_p_sub_kw: f64,
    pub true_q_sub_kvar: f64,
    pub commands: Vec<i8>,
    pub applied: Vec<i8>,
    pub sigma: Vec<f64>,
    pub inverter_p_kw: Vec<f64>,
    pub inverter_q_kvar: Vec<f64>,
    pub cost: f64,
    pub cumulative_cost: f64,
    pub flags: Vec<String>,
}

impl From<&StepRecord> for RecordView {
    fn from(r: &StepRecord) -> Self {
        let finite = |v: f64| v.is_finite().then_some(v);
        Self {
            step: r.step,
            time_s: r.time_s,
            timestamp: format_timestamp(r.time_s),
            voltages_pu: r.reported.voltages_pu.iter().map(|&v| finite(v)).collect(),
            p_sub_kw: r.reported.p_sub_kw.and_then(finite),
            q_sub_kvar: r.reported.q_sub_kvar.and_then(finite),
            stale: r.reported.stale.clone(),
            true_voltages_pu: r.true_voltages_pu.clone(),
            true_p_sub_kw: r.true_p_sub_kw,
            true_q_sub_kvar: r.true_q_sub_kvar,
            commands: r.decision.commands.iter().map(|l| l.get()).collect(),
            applied: r.applied.iter().map(|l| l.get()).collect(),
            sigma: r.decision.sigma.clone(),
            inverter_p_kw: r.inverter_p_kw.clone(),
            inverter_q_kvar: r.inverter_q_kvar.clone(),
            cost: r.cost,
            cumulative_cost: r.cumulative_cost,
            flags: r.flags.names().into_iter().map(String::from).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateView {
    pub scenario: String,
    pub measurement_buses: Vec<BusId>,
    pub v_min: f64,
    pub v_max: f64,
    pub period_s: u64,
    /// Steps completed so far.
    pub steps_done: u64,
    pub total_steps: u64,
    pub finished: bool,
    pub controller: ControllerStatus,
    pub latest: Option<RecordView>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Action {
    Enable,
    Disable,
    Reset,
}

#[derive(Debug, Clone, PartialEq, Deserialize, Serialize)]
pub struct ControllerRequest {
    pub action: Action,
}

#[derive(Debug, Clone, PartialEq, Deserialize, Serialize)]
pub struct SetpointRequest {
    /// One level for every inverter, or one per inverter.
    pub levels: Vec<serde_json::Value>,
}

enum Command {
    Action(Action),
    Manual(Vec<SetpointLevel>),
}

type Reply = oneshot::Sender<Result<ControllerStatus, ControllerError>>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub error: String,
}

fn error(status: StatusCode, msg: impl Into<String>) -> Response {
    (status, Json(ErrorBody { error: msg.into() })).into_response()
}

#[derive(Clone)]
struct AppState {
    commands: mpsc::Sender<(Command, Reply)>,
    state: watch::Receiver<Arc<StateView>>,
    history: Arc<RwLock<Vec<RecordView>>>,
    events: broadcast::Sender<Arc<str>>,
}

/// How the loop advances.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Pacing {
    /// One step per interval.
    Every(Duration),
    /// Back to back, yielding to the runtime between steps.
    Unpaced,
}

/// Handle to a running loop; dropping it does not stop the loop.
pub struct Service {
    pub router: Router,
    pub task: tokio::task::JoinHandle<()>,
}

/// Starts the loop task and returns the router serving it. `csv` receives
/// each record as it is produced.
pub fn start(sim: Simulation, pacing: Pacing, csv: Option<Box<dyn Write + Send>>) -> Service {
    let (cmd_tx, cmd_rx) = mpsc::channel(QUEUE_DEPTH);
    let (state_tx, state_rx) = watch::channel(Arc::new(state_view(&sim)));
    let (events, _) = broadcast::channel(1024);
    let history = Arc::new(RwLock::new(Vec::new()));
    let app = AppState {
        commands: cmd_tx,
        state: state_rx,
        history: history.clone(),
        events: events.clone(),
    };
    let task = tokio::spawn(run_loop(sim, pacing, cmd_rx, state_tx, history, events, csv));
    Service {
        router: router(app),
        task,
    }
}

fn router(app: AppState) -> Router {
    Router::new()
        .route("/api/state", get(get_state))
        .route("/api/history", get(get_history))
        .route("/api/controller", post(post_controller))
        .route("/api/setpoints", post(post_setpoints))
        .route("/api/stream", get(stream))
        .with_state(app)
}

fn state_view(sim: &Simulation) -> StateView {
    let sc = sim.scenario();
    StateView {
        scenario: sc.name.clone(),
        measurement_buses: sc.grid.measurement_buses.clone(),
        v_min: sc.controller.v_min,
        v_max: sc.controller.v_max,
        period_s: sc.plant.period_s,
        steps_done: sim.next_step(),
        total_steps: sc.steps,
        finished: sim.is_finished(),
        controller: sim.controller_status(),
        latest: sim.log().records().last().map(RecordView::from),
    }
}

fn apply(sim: &mut Simulation, cmd: Command) -> Result<ControllerStatus, ControllerError> {
    match cmd {
        Command::Action(Action::Enable) => sim.enable(),
        Command::Action(Action::Disable) => sim.disable(),
        Command::Action(Action::Reset) => sim.reset(),
        Command::Manual(levels) => sim.set_manual(&levels)?,
    }
    Ok(sim.controller_status())
}

async fn run_loop(
    mut sim: Simulation,
    pacing: Pacing,
    mut commands: mpsc::Receiver<(Command, Reply)>,
    state: watch::Sender<Arc<StateView>>,
    history: Arc<RwLock<Vec<RecordView>>>,
    events: broadcast::Sender<Arc<str>>,
    mut csv: Option<Box<dyn Write + Send>>,
) {
    let mut writer = csv.take().and_then(|w| {
        let sc = sim.scenario();
        CsvLogWriter::new(w, &sc.grid.measurement_buses, sc.plant.inverters.len()).ok()
    });
    let mut ticker = match pacing {
        Pacing::Every(d) => {
            let mut t = tokio::time::interval(d);
            t.set_missed_tick_behavior(tokio::time::MissedTickBehavior::Delay);
            Some(t)
        }
        Pacing::Unpaced => None,
    };
    loop {
        let finished = sim.is_finished();
        tokio::select! {
            biased;
            cmd = commands.recv() => {
                let Some((cmd, reply)) = cmd else { break };
                let _ = reply.send(apply(&mut sim, cmd));
                state.send_replace(Arc::new(state_view(&sim)));
            }
            _ = async {
                match ticker.as_mut() {
                    Some(t) => { t.tick().await; }
                    None => tokio::task::yield_now().await,
                }
            }, if !finished => {
                let record = match sim.step() {
                    Ok(r) => RecordView::from(r),
                    Err(e) => {
                        eprintln!("step {} failed: {e}", sim.next_step());
                        break;
                    }
                };
                if let Some(w) = writer.as_mut() {
                    let ok = w.write_record(sim.log().records().last().expect("stepped")).is_ok() && w.flush().is_ok();
                    if !ok {
                        eprintln!("cannot append to the log file; continuing without it");
                        writer = None;
                    }
                }
                let json: Arc<str> = serde_json::to_string(&record).expect("record serializes").into();
                history.write().expect("history lock").push(record);
                state.send_replace(Arc::new(state_view(&sim)));
                let _ = events.send(json);
            }
        }
    }
}

async fn get_state(State(app): State<AppState>) -> Json<StateView> {
    Json((**app.state.borrow()).clone())
}

#[derive(Debug, Deserialize)]
struct HistoryQuery {
    from: Option<u64>,
    to: Option<u64>,
}

/// Records with `from <= step <= to`; either bound may be omitted.
async fn get_history(State(app): State<AppState>, Query(q): Query<HistoryQuery>) -> Response {
    let from = q.from.unwrap_or(0);
    let to = q.to.unwrap_or(u64::MAX);
    if from > to {
        return error(StatusCode::BAD_REQUEST, format!("from {from} is after to {to}"));
    }
    let h = app.history.read().expect("history lock");
    let lo = (from as usize).min(h.len());
    let hi = to.saturating_add(1).min(h.len() as u64) as usize;
    Json(h[lo..hi.max(lo)].to_vec()).into_response()
}

async fn send(app: &AppState, cmd: Command) -> Response {
    let (tx, rx) = oneshot::channel();
    if app.commands.try_send((cmd, tx)).is_err() {
        return error(StatusCode::SERVICE_UNAVAILABLE, "command queue full or loop stopped");
    }
    match rx.await {
        Ok(Ok(status)) => Json(status).into_response(),
        Ok(Err(e @ ControllerError::ManualWhileEnabled)) => error(StatusCode::CONFLICT, e.to_string()),
        Ok(Err(e)) => error(StatusCode::UNPROCESSABLE_ENTITY, e.to_string()),
        Err(_) => error(StatusCode::SERVICE_UNAVAILABLE, "loop stopped"),
    }
}

async fn post_controller(State(app): State<AppState>, Json(req): Json<ControllerRequest>) -> Response {
    send(&app, Command::Action(req.action)).await
}

async fn post_setpoints(State(app): State<AppState>, Json(req): Json<SetpointRequest>) -> Response {
    let parsed: Vec<Option<SetpointLevel>> = req
        .levels
        .iter()
        .map(|v| {
            v.as_i64()
                .and_then(|l| i8::try_from(l).ok())
                .and_then(|l| SetpointLevel::new(l).ok())
        })
        .collect();
    let bad: Vec<String> = req
        .levels
        .iter()
        .zip(&parsed)
        .filter(|(_, p)| p.is_none())
        .map(|(v, _)| v.to_string())
        .collect();
    if !bad.is_empty() || parsed.is_empty() {
        let what = if bad.is_empty() {
            "no levels given".to_string()
        } else {
            format!("invalid level(s) {}", bad.join(", "))
        };
        return error(
            StatusCode::UNPROCESSABLE_ENTITY,
            format!(
                "{what}; levels must be integers in [{}, {}]",
                SetpointLevel::MIN,
                SetpointLevel::MAX
            ),
        );
    }
    let levels = parsed.into_iter().flatten().collect();
    send(&app, Command::Manual(levels)).await
}

async fn stream(State(app): State<AppState>) -> Sse<impl Stream<Item = Result<Event, Infallible>>> {
    let rx = app.events.subscribe();
    let s = BroadcastStream::new(rx).filter_map(|msg| match msg {
        Ok(json) => Some(Ok(Event::default().event("step").data(&*json))),
        // a slow reader skipped records; the next one carries on
        Err(_) => None,
    });
    Sse::new(s).keep_alive(KeepAlive::default())
}

/// Binds `addr` and serves until the process is stopped.
pub async fn serve(service: Service, listener: tokio::net::TcpListener) -> std::io::Result<()> {
    axum::serve(listener, service.router).await
}
