// Acceptance checks. Each criterion prints one PASS/FAIL line; the process
// exits non-zero if any fails. Tolerances and time limits are pinned below.

use std::time::{Duration, Instant};

use dlrm_core::cli::{parse_args, run_benchmark};
use dlrm_core::datagen::{
    adjust_distribution, default_first_touch_threshold, generate_trace, lru_hit_rate, planted_teacher,
    profile_trace, total_variation, AccessId, GeneratedBatches, LabelSource, RandomDataSpec,
};
use dlrm_core::embedding::{lengths_from_offsets, offsets_from_lengths};
use dlrm_core::model::{embedding_param_count, fm_predict, interact, FmParams, FmPath, Interaction};
use dlrm_core::parallel::{ParallelTrainer, Schedule};
use dlrm_core::profile::Profiler;
use dlrm_core::train::{compute_gradients, evaluate, train_step};
use dlrm_core::{Batch, DlrmConfig, DlrmModel, Matrix, ModelOptimizer, Optimizer, RngStream, SparseBatch};

const GRAD_REL_TOL: f64 = 1e-5;
// Below this magnitude a gradient pair is compared absolutely.
const GRAD_ABS_FLOOR: f64 = 1e-7;
const FD_STEP: f64 = 1e-6;
const FM_TOL: f64 = 1e-10;
const PROFILE_TOL: f64 = 1e-12;
const TV_TOL: f64 = 0.05;
const HIT_RATE_TOL: f64 = 0.05;
const LEARN_RATIO: f64 = 0.8;
const ATTRIBUTION_MIN: f64 = 0.9;

const FOOTNOTE: &str = "--arch-embedding-size=1000000-1000000-1000000-1000000-1000000-1000000-1000000-1000000 \
--arch-sparse-feature-size=64 --arch-mlp-bot=512-512-64 --arch-mlp-top=1024-1024-1024-1 \
--data-generation=random --mini-batch-size=2048 --num-batches=1000 --num-indices-per-lookup=100 \
--enable-profiling";

struct Outcome {
    ok: bool,
    detail: String,
}

fn outcome(ok: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        ok,
        detail: detail.into(),
    }
}

fn within(elapsed: Duration, limit: Duration) -> bool {
    elapsed < limit
}

fn argv(s: &str) -> Vec<String> {
    std::iter::once("dlrm".to_string())
        .chain(s.split_whitespace().map(str::to_string))
        .collect()
}

fn offsets_fixture() -> Outcome {
    let start = Instant::now();
    let lookups: Vec<Vec<usize>> = vec![vec![0, 2], vec![0, 1, 5], vec![3]];
    let b = SparseBatch::from_lookups(&lookups);
    let lengths = b.lengths();
    let offsets = offsets_from_lengths(&lengths);
    // Offsets carry the terminal entry; the first three are the footnote's.
    let ok = lengths == [2, 3, 1]
        && b.offsets() == [0, 2, 5, 6]
        && offsets == b.offsets()
        && offsets[..3] == [0, 2, 5]
        && b.indices() == [0, 2, 0, 1, 5, 3]
        && lengths_from_offsets(&offsets) == lengths
        && b.lookups() == lookups
        && SparseBatch::from_lengths(&lengths, b.indices().to_vec()).unwrap() == b;
    let t = start.elapsed();
    outcome(ok && within(t, Duration::from_millis(1)), format!("{t:?}"))
}

fn toy_config(tables: usize) -> DlrmConfig {
    DlrmConfig {
        embedding_sizes: vec![7; tables],
        sparse_dim: 3,
        bottom_mlp: vec![4, 3],
        top_mlp: vec![10, 4, 1],
        interaction: Interaction::Dot,
        seed: 17,
    }
}

fn loss_of(model: &DlrmModel, batch: &Batch) -> f64 {
    evaluate(model, batch).unwrap().loss
}

fn central_difference(model: &mut DlrmModel, batch: &Batch, get: impl Fn(&mut DlrmModel) -> &mut f64) -> f64 {
    let orig = *get(model);
    *get(model) = orig + FD_STEP;
    let up = loss_of(model, batch);
    *get(model) = orig - FD_STEP;
    let down = loss_of(model, batch);
    *get(model) = orig;
    (up - down) / (2.0 * FD_STEP)
}

fn gradient_check() -> Outcome {
    let start = Instant::now();
    let config = toy_config(2);
    let mut model = DlrmModel::new(config.clone()).unwrap();
    let spec = RandomDataSpec::for_config(&config, 5, 3, false, 3);
    let batch = GeneratedBatches::random(spec, LabelSource::Random)
        .unwrap()
        .next_batch()
        .unwrap();
    let (_, grads) = compute_gradients(&model, &batch, &mut Profiler::disabled()).unwrap();

    let mut pairs: Vec<(f64, f64)> = Vec::new();
    for (which, mlp_grads) in [(0, &grads.bottom), (1, &grads.top)] {
        for (l, lg) in mlp_grads.layers.iter().enumerate() {
            for (i, &g) in lg.weight.as_slice().iter().enumerate() {
                let fd = central_difference(&mut model, &batch, |m| {
                    let mlp = if which == 0 { &mut m.bottom } else { &mut m.top };
                    &mut mlp.layers_mut()[l].weight.as_mut_slice()[i]
                });
                pairs.push((g, fd));
            }
            for (i, &g) in lg.bias.iter().enumerate() {
                let fd = central_difference(&mut model, &batch, |m| {
                    let mlp = if which == 0 { &mut m.bottom } else { &mut m.top };
                    &mut mlp.layers_mut()[l].bias[i]
                });
                pairs.push((g, fd));
            }
        }
    }
    for (t, sg) in grads.tables.iter().enumerate() {
        let rows = model.tables[t].num_rows();
        let dense = sg.to_dense(rows);
        for (i, &g) in dense.as_slice().iter().enumerate() {
            let fd = central_difference(&mut model, &batch, |m| &mut m.tables[t].weights_mut().as_mut_slice()[i]);
            pairs.push((g, fd));
        }
    }

    let worst = pairs
        .iter()
        .map(|&(a, f)| {
            let scale = a.abs().max(f.abs());
            if scale < GRAD_ABS_FLOOR {
                0.0
            } else {
                (a - f).abs() / scale
            }
        })
        .fold(0.0, f64::max);
    let covered = pairs.len() == model.param_count();
    let t = start.elapsed();
    outcome(
        covered && worst < GRAD_REL_TOL && within(t, Duration::from_secs(10)),
        format!("{} parameters, worst rel err {worst:.2e}, {t:?}", pairs.len()),
    )
}

fn fm_identity() -> Outcome {
    let start = Instant::now();
    let mut rng = RngStream::new(4);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let n = rng.in_range(1, 32);
        let d = rng.in_range(1, 8);
        let p = FmParams::new(rng.next_normal(), rng.normal(1, n).into_vec(), rng.normal(n, d)).unwrap();
        let x = rng.normal(1, n).into_vec();
        let naive = fm_predict(&p, &x, FmPath::Naive).unwrap();
        let fact = fm_predict(&p, &x, FmPath::Factorized).unwrap();
        worst = worst.max((naive - fact).abs());
    }
    let t = start.elapsed();
    outcome(
        worst < FM_TOL && within(t, Duration::from_secs(1)),
        format!("max |naive - factorized| {worst:.2e}, {t:?}"),
    )
}

fn interaction_width() -> Outcome {
    let criteo = DlrmConfig {
        embedding_sizes: vec![10; 26],
        sparse_dim: 16,
        bottom_mlp: vec![13, 512, 256, 64, 16],
        top_mlp: vec![512, 256, 1],
        interaction: Interaction::Dot,
        seed: 0,
    };
    let mut ok = criteo.interaction_width() == 367 && criteo.top_dims()[0] == 367;
    let d = 5;
    let mut rng = RngStream::new(5);
    for nf in 1..=10usize {
        let expected = d + nf * (nf - 1) / 2;
        let c = DlrmConfig {
            embedding_sizes: vec![4; nf - 1],
            sparse_dim: d,
            bottom_mlp: vec![2, d],
            top_mlp: vec![1],
            interaction: Interaction::Dot,
            seed: 0,
        };
        // Count the columns the interaction actually produces as well.
        let dense = rng.normal(3, d);
        let emb: Vec<Matrix> = (1..nf).map(|_| rng.normal(3, d)).collect();
        let z = interact(&dense, &emb).unwrap();
        ok &= c.interaction_width() == expected && z.cols() == expected;
    }
    outcome(ok, format!("criteo width {}", criteo.interaction_width()))
}

fn parameter_count() -> Outcome {
    let spec = parse_args(argv(FOOTNOTE)).unwrap();
    let n = embedding_param_count(&spec.config);
    outcome(n == 512_000_000, format!("{n} embedding parameters"))
}

fn hand_traces() -> Outcome {
    let (a, b) = (1, 2);
    let close = |x: f64, y: f64| (x - y).abs() < PROFILE_TOL;
    let p = profile_trace(&[a, a, a]);
    let q = profile_trace(&[a, b, a]);
    let ok = p.distribution().len() == 2
        && close(p.probability(0), 1.0 / 3.0)
        && close(p.probability(1), 2.0 / 3.0)
        && q.distribution().len() == 2
        && close(q.probability(0), 2.0 / 3.0)
        && close(q.probability(2), 1.0 / 3.0)
        && p.unique() == [a]
        && q.unique() == [a, b];
    outcome(ok, format!("{:?} / {:?}", p.distribution(), q.distribution()))
}

const CORPUS_SEEDS: [u64; 5] = [1, 2, 3, 4, 5];
const CORPUS_LEN: usize = 10_000;
const CORPUS_IDS: usize = 100;

struct RoundTrip {
    original: Vec<AccessId>,
    synthetic: Vec<AccessId>,
    tv: f64,
}

fn round_trip(seed: u64) -> RoundTrip {
    let mut rng = RngStream::with_stream(seed, 0);
    let original: Vec<AccessId> = (0..CORPUS_LEN).map(|_| rng.below(CORPUS_IDS) as AccessId).collect();
    let profile = profile_trace(&original);
    let adjusted = adjust_distribution(&profile, default_first_touch_threshold(&profile, CORPUS_LEN)).unwrap();
    let synthetic = generate_trace(&adjusted, CORPUS_LEN, RngStream::with_stream(seed, 1)).unwrap();
    let tv = total_variation(&profile, &profile_trace(&synthetic));
    RoundTrip {
        original,
        synthetic,
        tv,
    }
}

fn synthesis_round_trip(runs: &[RoundTrip], t: Duration) -> Outcome {
    let mean = runs.iter().map(|r| r.tv).sum::<f64>() / runs.len() as f64;
    outcome(
        mean < TV_TOL && within(t, Duration::from_secs(5)),
        format!("mean TV {mean:.4} over {} seeds, {t:?}", runs.len()),
    )
}

fn cache_fidelity(runs: &[RoundTrip]) -> Outcome {
    let mut worst = 0.0f64;
    for r in runs {
        for cap in [8, 32, 64] {
            worst = worst.max((lru_hit_rate(&r.original, cap) - lru_hit_rate(&r.synthetic, cap)).abs());
        }
    }
    outcome(worst < HIT_RATE_TOL, format!("largest hit-rate gap {:.2} pp", 100.0 * worst))
}

fn bits(v: &[f64]) -> Vec<u64> {
    v.iter().map(|x| x.to_bits()).collect()
}

fn parallel_equivalence() -> Outcome {
    let start = Instant::now();
    let mut config = toy_config(4);
    config.embedding_sizes = vec![7, 11, 5, 9];
    let spec = RandomDataSpec::for_config(&config, 9, 3, false, 8);
    let batches: Vec<Batch> = {
        let mut g = GeneratedBatches::random(spec, LabelSource::Random).unwrap();
        (0..50).map(|_| g.next_batch().unwrap()).collect()
    };
    let init = DlrmModel::new(config).unwrap();
    let mut ok = true;
    let mut runs = 0;
    for opt in [Optimizer::sgd(0.1), Optimizer::adagrad(0.1)] {
        let mut serial = init.clone();
        let mut serial_opt = ModelOptimizer::new(opt, &serial).unwrap();
        let serial_losses: Vec<u64> = batches
            .iter()
            .map(|b| {
                train_step(&mut serial, &mut serial_opt, b, &mut Profiler::disabled())
                    .unwrap()
                    .loss
                    .to_bits()
            })
            .collect();
        for nd in 1..=4 {
            for schedule in [Schedule::Sequential, Schedule::Concurrent] {
                let mut par = ParallelTrainer::new(&init, opt, nd, schedule).unwrap();
                let losses: Vec<u64> = batches
                    .iter()
                    .map(|b| par.step(b, &mut Profiler::disabled()).unwrap().loss.to_bits())
                    .collect();
                ok &= losses == serial_losses;
                ok &= bits(&par.to_model().flat_params()) == bits(&serial.flat_params());
                runs += 1;
            }
        }
    }
    let t = start.elapsed();
    outcome(
        ok && within(t, Duration::from_secs(30)),
        format!("{runs} runs of 50 steps bit-identical: {ok}, {t:?}"),
    )
}

fn learnability() -> Outcome {
    let config = DlrmConfig {
        embedding_sizes: vec![50; 4],
        sparse_dim: 4,
        bottom_mlp: vec![8, 16, 4],
        top_mlp: vec![16, 1],
        interaction: Interaction::Dot,
        seed: 1,
    };
    let teacher = planted_teacher(&config, 99, 16.0).unwrap();
    let mut ok = true;
    let mut detail = Vec::new();
    for opt in [Optimizer::sgd(0.5), Optimizer::adagrad(0.1)] {
        let spec = RandomDataSpec::for_config(&config, 64, 3, false, 7);
        let mut data = GeneratedBatches::random(spec, LabelSource::Teacher(Box::new(teacher.clone()))).unwrap();
        let untrained = DlrmModel::new(config.clone()).unwrap();
        let mut student = untrained.clone();
        let mut state = ModelOptimizer::new(opt, &student).unwrap();
        let mut initial = 0.0;
        let mut losses = Vec::with_capacity(2000);
        for step in 0..2000 {
            let b = data.next_batch().unwrap();
            // Initial loss: the untrained student on the first ten batches.
            if step < 10 {
                initial += loss_of(&untrained, &b) / 10.0;
            }
            losses.push(train_step(&mut student, &mut state, &b, &mut Profiler::disabled()).unwrap().loss);
        }
        let last = losses[1900..].iter().sum::<f64>() / 100.0;
        let ratio = last / initial;
        ok &= ratio < LEARN_RATIO;
        let name = match opt {
            Optimizer::Sgd { .. } => "sgd",
            Optimizer::Adagrad { .. } => "adagrad",
        };
        detail.push(format!("{name} {initial:.4} -> {last:.4} (x{ratio:.3})"));
    }
    outcome(ok, detail.join(", "))
}

fn cli_fidelity() -> Outcome {
    let parsed = parse_args(argv(FOOTNOTE));
    let Ok(full) = parsed else {
        return outcome(false, format!("footnote rejected: {}", parsed.unwrap_err()));
    };
    let desk = FOOTNOTE
        .replace("1000000", "10000")
        .replace("--num-batches=1000", "--num-batches=50");
    let spec = parse_args(argv(&desk)).unwrap();
    let mut sink = Vec::new();
    let report = run_benchmark(&spec, &mut sink).unwrap();
    let ops = report.operators.clone().unwrap_or_default();
    let present = |name: &str| ops.iter().any(|o| o.operator == name && o.seconds > 0.0);
    let fraction = report.attributed_fraction().unwrap_or(0.0);
    let ok = full.options.profiling
        && spec.options.batch_size == 2048
        && report.iterations == 50
        && fraction >= ATTRIBUTION_MIN
        && ["embedding_lookup", "bottom_mlp", "interaction", "top_mlp", "optimizer"]
            .iter()
            .all(|n| present(n));
    outcome(
        ok,
        format!(
            "attributed {:.1}% of {:.1} s",
            100.0 * fraction,
            report.wall_clock_seconds
        ),
    )
}

fn main() {
    let mut results: Vec<(u32, &str, Outcome)> = Vec::new();
    let mut record = |n, name, o: Outcome| {
        println!("[{}] criterion {n:>2} {name}: {}", if o.ok { "PASS" } else { "FAIL" }, o.detail);
        results.push((n, name, o));
    };
    record(1, "offsets/indices fixture", offsets_fixture());
    record(2, "end-to-end gradients", gradient_check());
    record(3, "FM identity", fm_identity());
    record(4, "interaction width", interaction_width());
    record(5, "parameter count", parameter_count());
    record(6, "hand traces", hand_traces());
    let start = Instant::now();
    let runs: Vec<RoundTrip> = CORPUS_SEEDS.iter().map(|&s| round_trip(s)).collect();
    let t = start.elapsed();
    record(7, "synthesis round trip", synthesis_round_trip(&runs, t));
    record(8, "cache-rate fidelity", cache_fidelity(&runs));
    record(9, "parallel/serial equivalence", parallel_equivalence());
    record(10, "learnability", learnability());
    record(11, "CLI fidelity", cli_fidelity());
    let failed = results.iter().filter(|r| !r.2.ok).count();
    println!("{} passed, {failed} failed", results.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
