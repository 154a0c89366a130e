//! Per-operator wall-clock accounting for training and benchmark runs.

use std::fmt;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Op {
    DataLoading,
    EmbeddingLookup,
    BottomMlp,
    Interaction,
    TopMlp,
    Loss,
    Optimizer,
    Shuffle,
    Allreduce,
}

impl Op {
    pub const ALL: [Op; 9] = [
        Op::DataLoading,
        Op::EmbeddingLookup,
        Op::BottomMlp,
        Op::Interaction,
        Op::TopMlp,
        Op::Loss,
        Op::Optimizer,
        Op::Shuffle,
        Op::Allreduce,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Op::DataLoading => "data_loading",
            Op::EmbeddingLookup => "embedding_lookup",
            Op::BottomMlp => "bottom_mlp",
            Op::Interaction => "interaction",
            Op::TopMlp => "top_mlp",
            Op::Loss => "loss",
            Op::Optimizer => "optimizer",
            Op::Shuffle => "shuffle",
            Op::Allreduce => "allreduce",
        }
    }

    #[inline]
    fn slot(self) -> usize {
        self as usize
    }
}

impl fmt::Display for Op {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Cumulative time per operator.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct OpTimes {
    totals: [Duration; Op::ALL.len()],
}

impl OpTimes {
    pub fn add(&mut self, op: Op, d: Duration) {
        self.totals[op.slot()] += d;
    }

    pub fn get(&self, op: Op) -> Duration {
        self.totals[op.slot()]
    }

    pub fn total(&self) -> Duration {
        self.totals.iter().sum()
    }

    pub fn time<T>(&mut self, op: Op, f: impl FnOnce() -> T) -> T {
        let start = Instant::now();
        let out = f();
        self.add(op, start.elapsed());
        out
    }
}

/// Timer handle threaded through the training code. When disabled, `time`
/// just runs the closure.
#[derive(Clone, Debug, Default)]
pub struct Profiler {
    enabled: bool,
    times: OpTimes,
}

impl Profiler {
    pub fn new(enabled: bool) -> Self {
        Self {
            enabled,
            times: OpTimes::default(),
        }
    }

    pub fn disabled() -> Self {
        Self::new(false)
    }

    pub fn is_enabled(&self) -> bool {
        self.enabled
    }

    #[inline]
    pub fn time<T>(&mut self, op: Op, f: impl FnOnce() -> T) -> T {
        if self.enabled {
            self.times.time(op, f)
        } else {
            f()
        }
    }

    pub fn add(&mut self, op: Op, d: Duration) {
        if self.enabled {
            self.times.add(op, d);
        }
    }

    /// Splits one concurrent phase's wall time across operators in proportion
    /// to the time each worker spent in them, so totals never exceed the
    /// wall clock.
    pub fn attribute_phase(&mut self, wall: Duration, workers: &[OpTimes]) {
        if !self.enabled {
            return;
        }
        let mut merged = OpTimes::default();
        for w in workers {
            for op in Op::ALL {
                merged.add(op, w.get(op));
            }
        }
        let busy = merged.total().as_secs_f64();
        if busy == 0.0 {
            return;
        }
        for op in Op::ALL {
            let share = merged.get(op).as_secs_f64() / busy;
            self.times.add(op, wall.mul_f64(share));
        }
    }

    pub fn times(&self) -> &OpTimes {
        &self.times
    }
}
