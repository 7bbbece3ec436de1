//! Per-step records of a closed-loop run and their CSV layout:
//!
//! `step,timestamp,v_<bus>…,q_sub_kvar,p_sub_kw,level_<k>…,sigma_<k>…,cost,flags`
//!
//! Voltages and substation flows are the values reported to the controller,
//! one voltage column per measurement bus. `level_<k>` is the level commanded
//! to inverter k (1-based, scenario order) and `sigma_<k>` its update
//! direction. `cost` is the tariff increment of the step, evaluated on the true
//! substation flow. `flags` is a `|`-separated subset of [`Flags::NAMES`].
//! Numbers use the shortest representation that parses back to the same
//! `f64`; a missing reading is an empty field.

use std::io::{Read, Write};
use std::path::Path;

use ofo_core::controller::ControlDecision;
use ofo_core::grid::BusId;
use ofo_core::plant::{MeasurementFrame, SetpointLevel};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Flags {
    /// The frame due this step did not reach the controller.
    pub measurement_lost: bool,
    /// The commands issued this step did not reach the plant.
    pub command_lost: bool,
    /// Controller forced unity after too long without measurements.
    pub fallback: bool,
    /// Inverters reverted to unity after too long without commands.
    pub plant_fallback: bool,
    pub deferred: bool,
    pub manual: bool,
    pub clipped: bool,
    pub softened: bool,
    pub node_limit: bool,
    pub diverged: bool,
    /// The controller failed; levels were held.
    pub error: bool,
}

impl Flags {
    pub const NAMES: [&'static str; 11] = [
        "meas_lost",
        "cmd_lost",
        "fallback",
        "plant_fallback",
        "deferred",
        "manual",
        "clipped",
        "softened",
        "node_limit",
        "diverged",
        "error",
    ];

    fn values(&self) -> [bool; 11] {
        [
            self.measurement_lost,
            self.command_lost,
            self.fallback,
            self.plant_fallback,
            self.deferred,
            self.manual,
            self.clipped,
            self.softened,
            self.node_limit,
            self.diverged,
            self.error,
        ]
    }

    pub fn names(&self) -> Vec<&'static str> {
        Self::NAMES
            .iter()
            .zip(self.values())
            .filter(|(_, on)| *on)
            .map(|(n, _)| *n)
            .collect()
    }

    pub fn from_names<'a>(names: impl IntoIterator<Item = &'a str>) -> Result<Self, String> {
        let mut f = Self::default();
        for n in names {
            let slot = match n {
                "meas_lost" => &mut f.measurement_lost,
                "cmd_lost" => &mut f.command_lost,
                "fallback" => &mut f.fallback,
                "plant_fallback" => &mut f.plant_fallback,
                "deferred" => &mut f.deferred,
                "manual" => &mut f.manual,
                "clipped" => &mut f.clipped,
                "softened" => &mut f.softened,
                "node_limit" => &mut f.node_limit,
                "diverged" => &mut f.diverged,
                "error" => &mut f.error,
                other => return Err(format!("unknown flag `{other}`")),
            };
            *slot = true;
        }
        Ok(f)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    /// Seconds since midnight of the first day.
    pub time_s: u64,
    /// What the sensors reported at the end of this step.
    pub reported: MeasurementFrame,
    pub true_voltages_pu: Vec<f64>,
    pub true_p_sub_kw: f64,
    pub true_q_sub_kvar: f64,
    /// Levels in force at the inverters during this step.
    pub applied: Vec<SetpointLevel>,
    pub inverter_p_kw: Vec<f64>,
    pub inverter_q_kvar: Vec<f64>,
    pub decision: ControlDecision,
    pub cost: f64,
    pub cumulative_cost: f64,
    pub flags: Flags,
}

/// Append-only run history.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TimeSeriesLog {
    measurement_buses: Vec<BusId>,
    inverters: usize,
    records: Vec<StepRecord>,
}

impl TimeSeriesLog {
    pub fn new(measurement_buses: Vec<BusId>, inverters: usize) -> Self {
        Self {
            measurement_buses,
            inverters,
            records: Vec::new(),
        }
    }

    /// Records must arrive in step order, one per step.
    pub fn push(&mut self, record: StepRecord) {
        debug_assert_eq!(record.step, self.records.len() as u64);
        self.records.push(record);
    }

    pub fn records(&self) -> &[StepRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn measurement_buses(&self) -> &[BusId] {
        &self.measurement_buses
    }

    pub fn inverter_count(&self) -> usize {
        self.inverters
    }

    pub fn total_cost(&self) -> f64 {
        self.records.last().map_or(0.0, |r| r.cumulative_cost)
    }
}

/// `HH:MM:SS`, prefixed with `d<N> ` from the second day on.
pub fn format_timestamp(time_s: u64) -> String {
    let day = time_s / 86_400;
    let s = time_s % 86_400;
    let hms = format!("{:02}:{:02}:{:02}", s / 3600, s / 60 % 60, s % 60);
    if day == 0 {
        hms
    } else {
        format!("d{day} {hms}")
    }
}

fn num(v: f64) -> String {
    if v.is_finite() {
        format!("{v:?}")
    } else {
        String::new()
    }
}

fn opt(v: Option<f64>) -> String {
    v.map_or(String::new(), num)
}

#[derive(Debug, thiserror::Error)]
pub enum CsvLogError {
    #[error("log is empty")]
    Empty,
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error("line {line}: {message}")]
    Parse { line: u64, message: String },
}

/// The CSV view of a log: exactly the fields the file carries.
#[derive(Debug, Clone, PartialEq)]
pub struct CsvLog {
    pub measurement_buses: Vec<BusId>,
    pub inverters: usize,
    pub rows: Vec<CsvRow>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CsvRow {
    pub step: u64,
    pub timestamp: String,
    pub voltages_pu: Vec<Option<f64>>,
    pub q_sub_kvar: Option<f64>,
    pub p_sub_kw: Option<f64>,
    pub levels: Vec<i8>,
    pub sigma: Vec<f64>,
    pub cost: f64,
    pub flags: Flags,
}

impl CsvRow {
    pub fn from_record(r: &StepRecord) -> Self {
        let finite = |v: f64| v.is_finite().then_some(v);
        Self {
            step: r.step,
            timestamp: format_timestamp(r.time_s),
            voltages_pu: r.reported.voltages_pu.iter().map(|&v| finite(v)).collect(),
            q_sub_kvar: r.reported.q_sub_kvar.and_then(finite),
            p_sub_kw: r.reported.p_sub_kw.and_then(finite),
            levels: r.decision.commands.iter().map(|l| l.get()).collect(),
            sigma: r.decision.sigma.clone(),
            cost: r.cost,
            flags: r.flags,
        }
    }

    fn fields(&self) -> Vec<String> {
        let mut f = vec![self.step.to_string(), self.timestamp.clone()];
        f.extend(self.voltages_pu.iter().map(|&v| opt(v)));
        f.push(opt(self.q_sub_kvar));
        f.push(opt(self.p_sub_kw));
        f.extend(self.levels.iter().map(|l| l.to_string()));
        f.extend(self.sigma.iter().map(|&s| num(s)));
        f.push(num(self.cost));
        f.push(self.flags.names().join("|"));
        f
    }
}

pub fn csv_header(measurement_buses: &[BusId], inverters: usize) -> Vec<String> {
    let mut h = vec!["step".to_string(), "timestamp".to_string()];
    h.extend(measurement_buses.iter().map(|b| format!("v_{b}")));
    h.push("q_sub_kvar".into());
    h.push("p_sub_kw".into());
    h.extend((1..=inverters).map(|k| format!("level_{k}")));
    h.extend((1..=inverters).map(|k| format!("sigma_{k}")));
    h.push("cost".into());
    h.push("flags".into());
    h
}

/// Streams rows as they are produced; used both for whole-log export and
/// for append-as-you-go logging of a live run.
pub struct CsvLogWriter<W: Write> {
    inner: csv::Writer<W>,
}

impl<W: Write> CsvLogWriter<W> {
    pub fn new(writer: W, measurement_buses: &[BusId], inverters: usize) -> csv::Result<Self> {
        let mut inner = csv::WriterBuilder::new()
            .terminator(csv::Terminator::Any(b'\n'))
            .from_writer(writer);
        inner.write_record(csv_header(measurement_buses, inverters))?;
        Ok(Self { inner })
    }

    pub fn write_row(&mut self, row: &CsvRow) -> csv::Result<()> {
        self.inner.write_record(row.fields())
    }

    pub fn write_record(&mut self, record: &StepRecord) -> csv::Result<()> {
        self.write_row(&CsvRow::from_record(record))
    }

    pub fn flush(&mut self) -> std::io::Result<()> {
        self.inner.flush()
    }
}

impl CsvLog {
    pub fn from_log(log: &TimeSeriesLog) -> Self {
        Self {
            measurement_buses: log.measurement_buses.clone(),
            inverters: log.inverters,
            rows: log.records.iter().map(CsvRow::from_record).collect(),
        }
    }

    pub fn write(&self, writer: impl Write) -> Result<(), CsvLogError> {
        if self.rows.is_empty() {
            return Err(CsvLogError::Empty);
        }
        let mut w = CsvLogWriter::new(writer, &self.measurement_buses, self.inverters)?;
        for r in &self.rows {
            w.write_row(r)?;
        }
        w.flush().map_err(csv::Error::from)?;
        Ok(())
    }

    pub fn to_csv_string(&self) -> Result<String, CsvLogError> {
        let mut buf = Vec::new();
        self.write(&mut buf)?;
        Ok(String::from_utf8(buf).expect("csv output is ascii"))
    }

    pub fn read(reader: impl Read) -> Result<Self, CsvLogError> {
        let mut rdr = csv::ReaderBuilder::new().from_reader(reader);
        let header: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
        let parse_err = |line: u64, message: String| CsvLogError::Parse { line, message };
        let buses: Vec<BusId> = header
            .iter()
            .filter_map(|h| h.strip_prefix("v_"))
            .map(|b| {
                b.parse()
                    .map_err(|_| parse_err(1, format!("bad voltage column `v_{b}`")))
            })
            .collect::<Result<_, _>>()?;
        let inverters = header.iter().filter(|h| h.starts_with("level_")).count();
        if header != csv_header(&buses, inverters) {
            return Err(parse_err(1, "unexpected header layout".into()));
        }
        let nb = buses.len();
        let mut rows = Vec::new();
        for rec in rdr.records() {
            let rec = rec?;
            let line = rec.position().map_or(0, |p| p.line());
            let f = |i: usize| -> Result<f64, CsvLogError> {
                rec[i]
                    .parse()
                    .map_err(|_| parse_err(line, format!("column {}: `{}` is not a number", header[i], &rec[i])))
            };
            let o = |i: usize| -> Result<Option<f64>, CsvLogError> {
                if rec[i].is_empty() {
                    Ok(None)
                } else {
                    f(i).map(Some)
                }
            };
            let step = rec[0]
                .parse()
                .map_err(|_| parse_err(line, format!("bad step `{}`", &rec[0])))?;
            let mut voltages_pu = Vec::with_capacity(nb);
            for i in 0..nb {
                voltages_pu.push(o(2 + i)?);
            }
            let q_sub_kvar = o(2 + nb)?;
            let p_sub_kw = o(3 + nb)?;
            let lv = 4 + nb;
            let levels = (0..inverters)
                .map(|k| {
                    rec[lv + k]
                        .parse::<i8>()
                        .ok()
                        .filter(|l| SetpointLevel::new(*l).is_ok())
                        .ok_or_else(|| parse_err(line, format!("bad level `{}`", &rec[lv + k])))
                })
                .collect::<Result<_, _>>()?;
            let sigma = (0..inverters)
                .map(|k| f(lv + inverters + k))
                .collect::<Result<_, _>>()?;
            let cost = f(lv + 2 * inverters)?;
            let flag_field = &rec[lv + 2 * inverters + 1];
            let flags = if flag_field.is_empty() {
                Flags::default()
            } else {
                Flags::from_names(flag_field.split('|')).map_err(|m| parse_err(line, m))?
            };
            rows.push(CsvRow {
                step,
                timestamp: rec[1].to_string(),
                voltages_pu,
                q_sub_kvar,
                p_sub_kw,
                levels,
                sigma,
                cost,
                flags,
            });
        }
        Ok(Self {
            measurement_buses: buses,
            inverters,
            rows,
        })
    }
}

pub fn export_csv(log: &TimeSeriesLog, path: &Path) -> Result<(), CsvLogError> {
    if log.is_empty() {
        return Err(CsvLogError::Empty);
    }
    let io = |source| CsvLogError::Io {
        path: path.display().to_string(),
        source,
    };
    let file = std::fs::File::create(path).map_err(io)?;
    CsvLog::from_log(log).write(std::io::BufWriter::new(file))
}

pub fn import_csv(path: &Path) -> Result<CsvLog, CsvLogError> {
    let file = std::fs::File::open(path).map_err(|source| CsvLogError::Io {
        path: path.display().to_string(),
        source,
    })?;
    CsvLog::read(std::io::BufReader::new(file))
}
