//! Train several variants over several seeds and tabulate their metrics.

use std::time::Instant;

use vseg_core::data::Sample;
use vseg_core::model::{ModelSpec, Variant};
use vseg_core::train::{evaluate, fit, Clock, EpochLog, Metrics, StopReason, TrainConfig};

use crate::error::Result;
use crate::report::Row;

/// Seconds since construction.
#[derive(Debug, Clone, Copy)]
pub struct WallClock(Instant);

impl WallClock {
    pub fn new() -> Self {
        WallClock(Instant::now())
    }
}

impl Default for WallClock {
    fn default() -> Self {
        WallClock::new()
    }
}

impl Clock for WallClock {
    fn now(&mut self) -> f64 {
        self.0.elapsed().as_secs_f64()
    }
}

#[derive(Debug, Clone)]
pub struct CompareConfig {
    pub variants: Vec<Variant>,
    pub seeds: Vec<u64>,
    /// Architecture settings shared by every variant; `variant` is overridden.
    pub spec: ModelSpec,
    /// Training settings; `seed` is overridden per run.
    pub train: TrainConfig,
}

#[derive(Debug, Clone)]
pub struct RunResult {
    pub variant: Variant,
    pub seed: u64,
    pub val: Metrics,
    pub test: Metrics,
    pub best_epoch: Option<usize>,
    pub logs: Vec<EpochLog>,
    pub stop: StopReason,
    pub seconds: f64,
}

#[derive(Debug, Clone)]
pub struct Comparison {
    pub runs: Vec<RunResult>,
}

impl Comparison {
    fn of(&self, v: Variant) -> impl Iterator<Item = &RunResult> {
        self.runs.iter().filter(move |r| r.variant == v)
    }

    /// Mean test soft DSC over the seeds a variant was run with.
    pub fn mean_test_dsc(&self, v: Variant) -> Option<f64> {
        mean(self.of(v).map(|r| r.test.soft_dsc))
    }

    /// Table rows in the order variants were first run.
    pub fn rows(&self) -> Vec<Row> {
        let mut order: Vec<Variant> = Vec::new();
        for r in &self.runs {
            if !order.contains(&r.variant) {
                order.push(r.variant);
            }
        }
        order
            .into_iter()
            .map(|v| Row {
                variant: v,
                val_accuracy: mean(self.of(v).map(|r| r.val.accuracy)).unwrap_or(f64::NAN),
                val_dsc: mean(self.of(v).map(|r| r.val.soft_dsc)).unwrap_or(f64::NAN),
                test_accuracy: mean(self.of(v).map(|r| r.test.accuracy)).unwrap_or(f64::NAN),
                test_dsc: mean(self.of(v).map(|r| r.test.soft_dsc)).unwrap_or(f64::NAN),
            })
            .collect()
    }
}

fn mean(it: impl Iterator<Item = f64>) -> Option<f64> {
    let (mut sum, mut n) = (0.0, 0usize);
    for v in it {
        sum += v;
        n += 1;
    }
    (n > 0).then(|| sum / n as f64)
}

/// Every variant × seed: fit on `train`, early-stop on `val`, score the best
/// parameters on `val` and `test`. A diverged run is scored with its best
/// parameters and reported, not dropped.
pub fn run_comparison(
    train: &[Sample],
    val: &[Sample],
    test: &[Sample],
    cfg: &CompareConfig,
    on_run: &mut dyn FnMut(&RunResult),
) -> Result<Comparison> {
    let mut runs = Vec::new();
    for &variant in &cfg.variants {
        for &seed in &cfg.seeds {
            let spec = ModelSpec { variant, ..cfg.spec };
            let tc = TrainConfig {
                seed,
                ..cfg.train.clone()
            };
            let mut clock = WallClock::new();
            let out = fit::<f32>(&spec, train, val, &tc, &mut clock, &mut |_| {})?;
            let run = RunResult {
                variant,
                seed,
                val: evaluate(&spec, &out.params, val, &tc.focal)?,
                test: evaluate(&spec, &out.params, test, &tc.focal)?,
                best_epoch: out.best_epoch,
                logs: out.logs,
                stop: out.stop,
                seconds: clock.now(),
            };
            on_run(&run);
            runs.push(run);
        }
    }
    Ok(Comparison { runs })
}
