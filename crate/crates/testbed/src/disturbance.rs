//! Exogenous load and generation per step, read from `step,bus_id,p_kw,q_kvar`
//! rows. Positive values are injections into the feeder (generation); loads
//! are negative. Steps or buses without a row inject nothing.

use std::collections::BTreeMap;
use std::path::Path;

use ofo_core::grid::{BusId, InjectionVector, Network};

use crate::scenario::{Diagnostic, ScenarioError};

const HEADER: [&str; 4] = ["step", "bus_id", "p_kw", "q_kvar"];

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Disturbance {
    rows: BTreeMap<u64, Vec<(BusId, f64, f64)>>,
}

impl Disturbance {
    /// Parses and checks a disturbance file against `network`: unknown or
    /// slack buses, duplicate (step, bus) pairs and non-finite values are
    /// reported with their line numbers.
    pub fn load(path: &Path, network: &Network) -> Result<Self, ScenarioError> {
        let file = std::fs::File::open(path).map_err(|e| Diagnostic::new(path, format!("cannot read: {e}")))?;
        Self::parse(file, path, network)
    }

    pub fn parse(reader: impl std::io::Read, origin: &Path, network: &Network) -> Result<Self, ScenarioError> {
        let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
        let headers = rdr
            .headers()
            .map_err(|e| Diagnostic::new(origin, e.to_string()).at(1, 1))?
            .clone();
        if headers.iter().collect::<Vec<_>>() != HEADER {
            return Err(
                Diagnostic::new(origin, format!("header must be `{}`", HEADER.join(",")))
                    .at(1, 1)
                    .into(),
            );
        }
        let mut out = Self::default();
        let mut diags = Vec::new();
        for rec in rdr.records() {
            let rec = match rec {
                Ok(r) => r,
                Err(e) => {
                    let line = e.position().map_or(0, |p| p.line() as usize);
                    diags.push(Diagnostic::new(origin, e.to_string()).at(line, 1));
                    continue;
                }
            };
            let line = rec.position().map_or(0, |p| p.line() as usize);
            let bad = |col: usize, msg: String| Diagnostic::new(origin, msg).at(line, col);
            let step = rec[0]
                .parse::<u64>()
                .map_err(|e| bad(1, format!("step `{}`: {e}", &rec[0])));
            let bus = rec[1]
                .parse::<BusId>()
                .map_err(|e| bad(2, format!("bus_id `{}`: {e}", &rec[1])));
            let num = |i: usize| -> Result<f64, Diagnostic> {
                let v = rec[i]
                    .parse::<f64>()
                    .map_err(|e| bad(i + 1, format!("{} `{}`: {e}", HEADER[i], &rec[i])))?;
                if v.is_finite() {
                    Ok(v)
                } else {
                    Err(bad(i + 1, format!("{} must be finite", HEADER[i])))
                }
            };
            match (step, bus, num(2), num(3)) {
                (Ok(step), Ok(bus), Ok(p), Ok(q)) => {
                    match network.injection_position(bus) {
                        Ok(Some(_)) => {}
                        Ok(None) => {
                            diags.push(bad(2, format!("bus {bus} is the slack bus")));
                            continue;
                        }
                        Err(_) => {
                            diags.push(bad(2, format!("unknown bus {bus}")));
                            continue;
                        }
                    }
                    let entries = out.rows.entry(step).or_default();
                    if entries.iter().any(|(b, _, _)| *b == bus) {
                        diags.push(bad(1, format!("second row for step {step}, bus {bus}")));
                        continue;
                    }
                    entries.push((bus, p, q));
                }
                (s, b, p, q) => diags.extend([s.err(), b.err(), p.err(), q.err()].into_iter().flatten()),
            }
        }
        if diags.is_empty() {
            Ok(out)
        } else {
            Err(ScenarioError { diagnostics: diags })
        }
    }

    /// Adds or replaces the injection at `bus` for `step`.
    pub fn set(&mut self, step: u64, bus: BusId, p_kw: f64, q_kvar: f64) {
        let entries = self.rows.entry(step).or_default();
        match entries.iter_mut().find(|(b, _, _)| *b == bus) {
            Some(e) => *e = (bus, p_kw, q_kvar),
            None => entries.push((bus, p_kw, q_kvar)),
        }
    }

    pub fn rows(&self) -> impl Iterator<Item = (u64, BusId, f64, f64)> + '_ {
        self.rows
            .iter()
            .flat_map(|(&s, v)| v.iter().map(move |&(b, p, q)| (s, b, p, q)))
    }

    pub fn injection(&self, step: u64, network: &Network) -> InjectionVector {
        let mut inj = InjectionVector::zeros(network.pq_count());
        for &(bus, p, q) in self.rows.get(&step).map_or(&[][..], |v| v) {
            if let Ok(Some(pos)) = network.injection_position(bus) {
                inj.p_kw[pos] += p;
                inj.q_kvar[pos] += q;
            }
        }
        inj
    }

    /// Writes the rows in the on-disk layout.
    pub fn write(&self, writer: impl std::io::Write) -> csv::Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(HEADER)?;
        for (s, b, p, q) in self.rows() {
            w.write_record([s.to_string(), b.to_string(), p.to_string(), q.to_string()])?;
        }
        w.flush()?;
        Ok(())
    }
}
