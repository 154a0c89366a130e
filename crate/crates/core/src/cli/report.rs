//! Metric records and the end-of-run report.

use std::fmt::Write as _;
use std::time::Duration;

use serde::Serialize;

use crate::parallel::CommRecord;
use crate::profile::{Op, OpTimes};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Validation,
}

/// One line of the metric log.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MetricRecord {
    /// 1-based iteration the record closes.
    pub iteration: usize,
    pub split: Split,
    pub loss: f64,
    pub accuracy: f64,
}

impl MetricRecord {
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("record serializes")
    }

    pub fn to_text(&self) -> String {
        let split = match self.split {
            Split::Train => "train",
            Split::Validation => "val",
        };
        format!(
            "iter {:>6}  {split:<5}  loss {:.6}  accuracy {:.4}",
            self.iteration, self.loss, self.accuracy
        )
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct OperatorTime {
    pub operator: &'static str,
    pub seconds: f64,
    /// Fraction of wall-clock time.
    pub share: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RunReport {
    pub mode: &'static str,
    pub iterations: usize,
    pub samples: usize,
    pub records: Vec<MetricRecord>,
    pub wall_clock_seconds: f64,
    /// Present only with profiling on; sorted by descending time.
    pub operators: Option<Vec<OperatorTime>>,
    pub num_devices: usize,
    /// Total bytes per collective over the run, multi-device runs only.
    pub communication: Option<Vec<(String, u64)>>,
}

impl RunReport {
    pub(crate) fn operator_table(times: &OpTimes, wall: Duration) -> Vec<OperatorTime> {
        let wall = wall.as_secs_f64();
        let mut ops: Vec<OperatorTime> = Op::ALL
            .iter()
            .map(|&op| {
                let seconds = times.get(op).as_secs_f64();
                OperatorTime {
                    operator: op.name(),
                    seconds,
                    share: if wall > 0.0 { seconds / wall } else { 0.0 },
                }
            })
            .collect();
        ops.sort_by(|a, b| b.seconds.total_cmp(&a.seconds).then(a.operator.cmp(b.operator)));
        ops
    }

    pub(crate) fn comm_totals(log: &[CommRecord]) -> Vec<(String, u64)> {
        let mut totals: Vec<(String, u64)> = Vec::new();
        for r in log {
            match totals.iter_mut().find(|(c, _)| c == r.collective) {
                Some((_, b)) => *b += r.bytes,
                None => totals.push((r.collective.to_string(), r.bytes)),
            }
        }
        totals
    }

    pub fn attributed_seconds(&self) -> Option<f64> {
        self.operators
            .as_ref()
            .map(|ops| ops.iter().map(|o| o.seconds).sum())
    }

    /// Attributed time over wall-clock time.
    pub fn attributed_fraction(&self) -> Option<f64> {
        let a = self.attributed_seconds()?;
        Some(if self.wall_clock_seconds > 0.0 {
            a / self.wall_clock_seconds
        } else {
            0.0
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("report serializes")
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{} run: {} iterations, {} samples, {} device(s), {:.3} s wall clock",
            self.mode, self.iterations, self.samples, self.num_devices, self.wall_clock_seconds
        );
        if let Some(ops) = &self.operators {
            let _ = writeln!(out, "{:<18} {:>12} {:>8}", "operator", "seconds", "share");
            for o in ops {
                let _ = writeln!(out, "{:<18} {:>12.6} {:>7.2}%", o.operator, o.seconds, 100.0 * o.share);
            }
            let a = self.attributed_seconds().unwrap_or(0.0);
            let _ = writeln!(
                out,
                "{:<18} {:>12.6} {:>7.2}%",
                "attributed",
                a,
                100.0 * self.attributed_fraction().unwrap_or(0.0)
            );
        }
        if let Some(comm) = &self.communication {
            for (c, b) in comm {
                let _ = writeln!(out, "communication {c}: {b} bytes");
            }
        }
        out
    }
}
