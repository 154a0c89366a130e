//! Training and benchmark loops behind the `dlrm` binary.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use super::args::{DataGeneration, Emit, LabelKind, Mode, RunSpec};
use super::report::{MetricRecord, RunReport, Split};
use crate::checkpoint;
use crate::datagen::{
    adjust_distribution, default_first_touch_threshold, planted_teacher, profile_path, profile_trace, CriteoReader,
    GeneratedBatches, LabelSource, RandomDataSpec, TraceProfile,
};
use crate::dense::RngStream;
use crate::error::{Error, Result};
use crate::model::{Batch, DlrmModel};
use crate::optim::ModelOptimizer;
use crate::parallel::ParallelTrainer;
use crate::profile::{Op, Profiler};
use crate::train::{evaluate_profiled, train_step, StepStats};

// Data and teacher seeds are offset from the model seed so their streams
// never coincide with the initialization streams.
const DATA_SEED_OFFSET: u64 = 0x9e37_79b9_7f4a_7c15;
const VAL_SEED_OFFSET: u64 = 0x6a09_e667_f3bc_c909;
const TEACHER_SEED_OFFSET: u64 = 0xbb67_ae85_84ca_a73b;
const BOOTSTRAP_STREAM_BASE: u64 = 1 << 40;

/// Output-layer scale of the planted teacher.
pub const TEACHER_SHARPNESS: f64 = 16.0;

/// Longest bootstrap trace used to build a synthetic profile.
const BOOTSTRAP_TRACE_CAP: usize = 100_000;

enum Source {
    Generated(Box<GeneratedBatches>),
    Criteo(CriteoReader),
}

impl Source {
    fn next_batch(&mut self, batch_size: usize) -> Result<Option<Batch>> {
        match self {
            Source::Generated(g) => g.next_batch().map(Some),
            Source::Criteo(r) => r.next_batch(batch_size),
        }
    }
}

fn data_seed(spec: &RunSpec) -> u64 {
    spec.config.seed.wrapping_add(DATA_SEED_OFFSET)
}

fn label_source(spec: &RunSpec) -> Result<LabelSource> {
    Ok(match spec.options.labels {
        LabelKind::Random => LabelSource::Random,
        LabelKind::Planted => LabelSource::Teacher(Box::new(planted_teacher(
            &spec.config,
            spec.config.seed.wrapping_add(TEACHER_SEED_OFFSET),
            TEACHER_SHARPNESS,
        )?)),
    })
}

fn data_spec(spec: &RunSpec, seed: u64) -> RandomDataSpec {
    let o = &spec.options;
    let mut d = RandomDataSpec::for_config(&spec.config, o.batch_size, o.indices_per_lookup, o.indices_fixed, seed);
    d.distribution = o.dense_distribution;
    d
}

/// Per-table profiles from `--trace-profile-dir`, or profiles of uniform
/// bootstrap traces when no directory is given. Either way the first-touch
/// probability is raised so the generator reaches every unique early on.
pub fn synthetic_profiles(spec: &RunSpec) -> Result<Vec<TraceProfile>> {
    let o = &spec.options;
    let accesses = o.batch_size * o.indices_per_lookup * o.num_batches.max(1);
    spec.config
        .embedding_sizes
        .iter()
        .enumerate()
        .map(|(t, &rows)| {
            let p = match &o.trace_profile_dir {
                Some(dir) => TraceProfile::load(profile_path(dir, t))?,
                None => {
                    let mut rng = RngStream::with_stream(data_seed(spec), BOOTSTRAP_STREAM_BASE + t as u64);
                    let len = accesses.clamp(1, BOOTSTRAP_TRACE_CAP);
                    let trace: Vec<u64> = (0..len).map(|_| rng.below(rows) as u64).collect();
                    profile_trace(&trace)
                }
            };
            adjust_distribution(&p, default_first_touch_threshold(&p, accesses))
        })
        .collect()
}

fn generated(spec: &RunSpec, seed: u64, profiles: Option<&[TraceProfile]>) -> Result<GeneratedBatches> {
    let d = data_spec(spec, seed);
    match profiles {
        Some(p) => GeneratedBatches::synthetic(d, p, label_source(spec)?),
        None => GeneratedBatches::random(d, label_source(spec)?),
    }
}

fn sources(spec: &RunSpec) -> Result<(Source, Vec<Batch>)> {
    let o = &spec.options;
    let want_val = o.eval_interval > 0 && o.mode == Mode::Train;
    match o.data {
        DataGeneration::Random | DataGeneration::Synthetic => {
            let profiles = match o.data {
                DataGeneration::Synthetic => Some(synthetic_profiles(spec)?),
                _ => None,
            };
            let train = generated(spec, data_seed(spec), profiles.as_deref())?;
            let mut val = Vec::new();
            if want_val {
                let mut g = generated(spec, data_seed(spec).wrapping_add(VAL_SEED_OFFSET), profiles.as_deref())?;
                for _ in 0..o.num_val_batches {
                    val.push(g.next_batch()?);
                }
            }
            Ok((Source::Generated(Box::new(train)), val))
        }
        DataGeneration::Criteo => {
            let path = o.criteo_path.as_ref().expect("checked when parsing");
            let train = CriteoReader::open(path, &o.vocab_sizes)?;
            let mut val = Vec::new();
            if want_val {
                let vpath = o.criteo_val_path.as_ref().ok_or_else(|| {
                    Error::Config("--eval-interval with Criteo data needs --criteo-val-path".into())
                })?;
                let mut r = CriteoReader::open(vpath, &o.vocab_sizes)?;
                while val.len() < o.num_val_batches {
                    match r.next_batch(o.batch_size)? {
                        Some(b) => val.push(b),
                        None => break,
                    }
                }
            }
            Ok((Source::Criteo(train), val))
        }
    }
}

enum Engine {
    Serial(Box<DlrmModel>, Box<ModelOptimizer>),
    Parallel(Box<ParallelTrainer>),
}

impl Engine {
    fn step(&mut self, batch: &Batch, prof: &mut Profiler) -> Result<StepStats> {
        match self {
            Engine::Serial(m, o) => train_step(m, o, batch, prof),
            Engine::Parallel(p) => p.step(batch, prof),
        }
    }

    fn model(&self) -> DlrmModel {
        match self {
            Engine::Serial(m, _) => (**m).clone(),
            Engine::Parallel(p) => p.to_model(),
        }
    }

    fn with_model<T>(&self, f: impl FnOnce(&DlrmModel) -> T) -> T {
        match self {
            Engine::Serial(m, _) => f(m),
            Engine::Parallel(p) => f(&p.to_model()),
        }
    }
}

fn initial_model(spec: &RunSpec) -> Result<DlrmModel> {
    match &spec.options.load_model {
        None => DlrmModel::new(spec.config.clone()),
        Some(path) => {
            let m = checkpoint::load(path)?;
            let (a, b) = (&m.config, &spec.config);
            if a.embedding_sizes != b.embedding_sizes
                || a.sparse_dim != b.sparse_dim
                || a.bottom_mlp != b.bottom_mlp
                || a.top_mlp != b.top_mlp
            {
                return Err(Error::Config(format!(
                    "{} holds a model with a different architecture than the command line",
                    path.display()
                )));
            }
            Ok(m)
        }
    }
}

/// Mean loss and accuracy over a set of batches, weighted by batch size.
fn validate(model: &DlrmModel, batches: &[Batch], prof: &mut Profiler) -> Result<(f64, f64)> {
    let mut loss = 0.0;
    let mut correct = 0;
    let mut samples = 0;
    for b in batches {
        let s = evaluate_profiled(model, b, prof)?;
        loss += s.loss * s.samples as f64;
        correct += s.correct;
        samples += s.samples;
    }
    let n = samples.max(1) as f64;
    Ok((loss / n, correct as f64 / n))
}

struct Sinks<'a> {
    out: &'a mut dyn Write,
    emit: Emit,
    echo: bool,
    file: Option<(PathBuf, BufWriter<File>)>,
}

impl Sinks<'_> {
    fn record(&mut self, r: &MetricRecord) -> Result<()> {
        if self.echo {
            let line = match self.emit {
                Emit::Json => r.to_json(),
                Emit::Text => r.to_text(),
            };
            writeln!(self.out, "{line}").map_err(|e| Error::io("<output>", e))?;
        }
        if let Some((path, f)) = &mut self.file {
            writeln!(f, "{}", r.to_json()).map_err(|e| Error::io(&*path, e))?;
        }
        Ok(())
    }

    fn finish(&mut self) -> Result<()> {
        self.out.flush().map_err(|e| Error::io("<output>", e))?;
        if let Some((path, f)) = &mut self.file {
            f.flush().map_err(|e| Error::io(&*path, e))?;
        }
        Ok(())
    }
}

fn create(path: &Path) -> Result<File> {
    File::create(path).map_err(|e| Error::io(path, e))
}

fn execute(spec: &RunSpec, mode: Mode, out: &mut dyn Write) -> Result<RunReport> {
    let o = &spec.options;
    let model = initial_model(spec)?;
    let (mut source, val) = sources(spec)?;
    let mut engine = if o.num_devices == 1 {
        let opt = ModelOptimizer::new(o.optimizer, &model)?;
        Engine::Serial(Box::new(model), Box::new(opt))
    } else {
        Engine::Parallel(Box::new(ParallelTrainer::new(&model, o.optimizer, o.num_devices, o.schedule)?))
    };
    let mut sinks = Sinks {
        out,
        emit: o.emit,
        echo: mode == Mode::Train,
        file: match &o.metrics_out {
            Some(p) => Some((p.clone(), BufWriter::new(create(p)?))),
            None => None,
        },
    };

    let mut prof = Profiler::new(o.profiling);
    let mut records = Vec::new();
    let (mut window_loss, mut window_correct, mut window_samples, mut window_len) = (0.0, 0, 0, 0);
    let mut iterations = 0;
    let mut samples = 0;
    let start = Instant::now();
    while o.num_batches == 0 || iterations < o.num_batches {
        let Some(batch) = prof.time(Op::DataLoading, || source.next_batch(o.batch_size))? else {
            break;
        };
        let s = engine.step(&batch, &mut prof)?;
        iterations += 1;
        samples += s.samples;
        window_loss += s.loss;
        window_correct += s.correct;
        window_samples += s.samples;
        window_len += 1;
        if window_len == o.print_freq {
            let r = MetricRecord {
                iteration: iterations,
                split: Split::Train,
                loss: window_loss / window_len as f64,
                accuracy: window_correct as f64 / window_samples as f64,
            };
            sinks.record(&r)?;
            records.push(r);
            (window_loss, window_correct, window_samples, window_len) = (0.0, 0, 0, 0);
        }
        if mode == Mode::Train && o.eval_interval > 0 && iterations % o.eval_interval == 0 && !val.is_empty() {
            let (loss, accuracy) = engine.with_model(|m| validate(m, &val, &mut prof))?;
            let r = MetricRecord {
                iteration: iterations,
                split: Split::Validation,
                loss,
                accuracy,
            };
            sinks.record(&r)?;
            records.push(r);
        }
    }
    if window_len > 0 {
        let r = MetricRecord {
            iteration: iterations,
            split: Split::Train,
            loss: window_loss / window_len as f64,
            accuracy: window_correct as f64 / window_samples as f64,
        };
        sinks.record(&r)?;
        records.push(r);
    }
    let wall = start.elapsed();
    sinks.finish()?;

    let comm_log = match &engine {
        Engine::Parallel(p) => Some(p.comm_log().to_vec()),
        Engine::Serial(..) => None,
    };
    if let (Some(path), Some(log)) = (&o.comm_report, &comm_log) {
        std::fs::write(path, crate::parallel::comm_report(log)).map_err(|e| Error::io(path, e))?;
    }
    if let Some(path) = &o.save_model {
        checkpoint::save(&engine.model(), path)?;
    }

    Ok(RunReport {
        mode: match mode {
            Mode::Train => "train",
            Mode::Bench => "bench",
        },
        iterations,
        samples,
        records,
        wall_clock_seconds: wall.as_secs_f64(),
        operators: o
            .profiling
            .then(|| RunReport::operator_table(prof.times(), wall)),
        num_devices: o.num_devices,
        communication: comm_log.as_deref().map(RunReport::comm_totals),
    })
}

/// Trains on the configured data source, logging metrics to `out`.
pub fn run_training(spec: &RunSpec, out: &mut dyn Write) -> Result<RunReport> {
    execute(spec, Mode::Train, out)
}

/// Timed forward/backward/update iterations; nothing is written per step.
pub fn run_benchmark(spec: &RunSpec, out: &mut dyn Write) -> Result<RunReport> {
    execute(spec, Mode::Bench, out)
}

pub fn run(spec: &RunSpec, out: &mut dyn Write) -> Result<RunReport> {
    match spec.options.mode {
        Mode::Train => run_training(spec, out),
        Mode::Bench => run_benchmark(spec, out),
    }
}
