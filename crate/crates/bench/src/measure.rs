// SPDX-License-Identifier: Apache-2.0

//! Raw measurements and their CSV form.

use std::collections::BTreeMap;
use std::fmt;
use std::io::{Read, Write};
use std::str::FromStr;
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use crate::timer::Timer;
use crate::BenchError;

/// The CSV header, bit-exact.
pub const CSV_HEADER: &str = "experiment,variant,trial,value,unit";

/// Suffix of the experiment that carries the nanosecond copy of a cycle series.
pub const NS_SUFFIX: &str = "-ns";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Unit {
    #[serde(rename = "cycles")]
    Cycles,
    #[serde(rename = "ns")]
    Nanos,
    /// Requests per second.
    #[serde(rename = "req/s")]
    Rps,
    /// Plain event counts.
    #[serde(rename = "count")]
    Count,
}

impl Unit {
    pub fn as_str(self) -> &'static str {
        match self {
            Unit::Cycles => "cycles",
            Unit::Nanos => "ns",
            Unit::Rps => "req/s",
            Unit::Count => "count",
        }
    }
}

impl fmt::Display for Unit {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Unit {
    type Err = BenchError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "cycles" => Ok(Unit::Cycles),
            "ns" => Ok(Unit::Nanos),
            "req/s" => Ok(Unit::Rps),
            "count" => Ok(Unit::Count),
            other => Err(BenchError::Format(format!("unknown unit {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Measurement {
    pub experiment: String,
    pub variant: String,
    pub trial: usize,
    pub value: f64,
    pub unit: Unit,
    /// Wall-clock nanoseconds since the Unix epoch. Not part of the CSV.
    pub timestamp: u64,
}

#[derive(Serialize, Deserialize)]
struct Row {
    experiment: String,
    variant: String,
    trial: usize,
    value: String,
    unit: Unit,
}

fn now_ns() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map_or(0, |d| d.as_nanos() as u64)
}

/// Collects measurements for one experiment. Cycle samples are recorded
/// twice: as cycles under the experiment name and as nanoseconds under the
/// name with [`NS_SUFFIX`], so no experiment mixes units.
#[derive(Debug)]
pub struct Recorder {
    timer: Timer,
    experiment: String,
    trials: BTreeMap<(String, String), usize>,
    rows: Vec<Measurement>,
}

impl Recorder {
    pub fn new(experiment: impl Into<String>, timer: Timer) -> Self {
        Recorder {
            timer,
            experiment: experiment.into(),
            trials: BTreeMap::new(),
            rows: Vec::new(),
        }
    }

    pub fn timer(&self) -> &Timer {
        &self.timer
    }

    pub fn experiment(&self) -> &str {
        &self.experiment
    }

    /// Records an overhead-corrected cycle count for `variant`.
    pub fn cycles(&mut self, variant: &str, cycles: u64) {
        let ns = self.timer.to_ns(cycles as f64);
        let exp = self.experiment.clone();
        self.push(&exp, variant, cycles as f64, Unit::Cycles);
        self.push(&format!("{exp}{NS_SUFFIX}"), variant, ns, Unit::Nanos);
    }

    /// Records a value in some other unit under `<experiment>-<suffix>`.
    pub fn value(&mut self, suffix: &str, variant: &str, value: f64, unit: Unit) {
        let exp = format!("{}-{suffix}", self.experiment);
        self.push(&exp, variant, value, unit);
    }

    fn push(&mut self, experiment: &str, variant: &str, value: f64, unit: Unit) {
        let trial = self
            .trials
            .entry((experiment.to_owned(), variant.to_owned()))
            .or_default();
        self.rows.push(Measurement {
            experiment: experiment.to_owned(),
            variant: variant.to_owned(),
            trial: *trial,
            value,
            unit,
            timestamp: now_ns(),
        });
        *trial += 1;
    }

    pub fn into_measurements(self) -> Vec<Measurement> {
        self.rows
    }
}

pub fn write_csv(out: impl Write, rows: &[Measurement]) -> Result<(), BenchError> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(out);
    w.write_record(CSV_HEADER.split(','))?;
    for m in rows {
        w.serialize(Row {
            experiment: m.experiment.clone(),
            variant: m.variant.clone(),
            trial: m.trial,
            value: format!("{}", m.value),
            unit: m.unit,
        })?;
    }
    w.flush()?;
    Ok(())
}

/// Parses a CSV written by [`write_csv`]. Timestamps are not stored, so they read back as 0.
pub fn read_csv(input: impl Read) -> Result<Vec<Measurement>, BenchError> {
    let mut r = csv::Reader::from_reader(input);
    let header: Vec<String> = r.headers()?.iter().map(str::to_owned).collect();
    if header.join(",") != CSV_HEADER {
        return Err(BenchError::Format(format!("unexpected header {:?}", header.join(","))));
    }
    let mut rows = Vec::new();
    for row in r.deserialize() {
        let row: Row = row?;
        let value = row
            .value
            .parse()
            .map_err(|_| BenchError::Format(format!("bad value {:?}", row.value)))?;
        rows.push(Measurement {
            experiment: row.experiment,
            variant: row.variant,
            trial: row.trial,
            value,
            unit: row.unit,
            timestamp: 0,
        });
    }
    Ok(rows)
}

/// Experiments in first-seen order, each with the single unit it uses.
pub fn experiments(rows: &[Measurement]) -> Result<Vec<(String, Unit)>, BenchError> {
    let mut seen: Vec<(String, Unit)> = Vec::new();
    for m in rows {
        match seen.iter().find(|(e, _)| *e == m.experiment) {
            Some((_, u)) if *u != m.unit => {
                return Err(BenchError::Format(format!(
                    "experiment {} mixes {} and {}",
                    m.experiment, u, m.unit
                )))
            }
            Some(_) => {}
            None => seen.push((m.experiment.clone(), m.unit)),
        }
    }
    Ok(seen)
}

/// Values of one experiment grouped by variant, variants in first-seen order.
pub fn by_variant(rows: &[Measurement], experiment: &str) -> Vec<(String, Vec<f64>)> {
    let mut out: Vec<(String, Vec<f64>)> = Vec::new();
    for m in rows.iter().filter(|m| m.experiment == experiment) {
        match out.iter_mut().find(|(v, _)| *v == m.variant) {
            Some((_, vals)) => vals.push(m.value),
            None => out.push((m.variant.clone(), vec![m.value])),
        }
    }
    out
}
