//! In-process simulation of hybrid parallel training: embedding tables are
//! placed on virtual devices (model parallel) while the MLPs are replicated
//! and each device trains on a contiguous shard of the mini-batch (data
//! parallel).
//!
//! One step runs
//!
//! 1. full-batch lookups on each table's owner,
//! 2. a butterfly shuffle handing every device its shard of every table,
//! 3. per-shard MLP and interaction forward/backward on the replicas,
//! 4. an ordered reduction of the loss and MLP gradients,
//! 5. the inverse shuffle of pooled-embedding gradients back to owners,
//! 6. optimizer updates on owners and replicas.
//!
//! Reductions visit replicas in ascending device id and continue one running
//! sum per parameter, sample by sample. The result is bit-identical to the
//! single-device step in [`crate::train`], and does not depend on whether the
//! devices run one after another or on separate threads.

use std::fmt::Write as _;
use std::ops::Range;
use std::time::Instant;

use crate::dense::{sigmoid, Matrix};
use crate::embedding::{lookup_backward, EmbeddingTable};
use crate::error::{Error, Result};
use crate::model::{
    bce_term, correct_predictions, interact, interact_backward, Batch, DlrmConfig, DlrmModel, Mlp, MlpCache,
    MlpDeltas, MlpGrads,
};
use crate::optim::{table_state, update_mlp, update_table, AdagradState, MlpState, ModelOptimizer, Optimizer};
use crate::profile::{Op, OpTimes, Profiler};
use crate::train::StepStats;

const F64_BYTES: u64 = std::mem::size_of::<f64>() as u64;

/// Table placement across devices.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DevicePlan {
    pub num_devices: usize,
    /// Owner device of each table.
    pub table_assignment: Vec<usize>,
}

impl DevicePlan {
    pub fn tables_on(&self, device: usize) -> Vec<usize> {
        (0..self.table_assignment.len())
            .filter(|&t| self.table_assignment[t] == device)
            .collect()
    }

    pub fn device_loads(&self, table_sizes: &[usize]) -> Vec<usize> {
        let mut loads = vec![0; self.num_devices];
        for (t, &d) in self.table_assignment.iter().enumerate() {
            loads[d] += table_sizes[t];
        }
        loads
    }

    /// Contiguous sample range of each device.
    pub fn batch_shards(&self, batch_size: usize) -> Vec<Range<usize>> {
        shard_ranges(batch_size, self.num_devices)
    }
}

/// Splits `[0, batch_size)` into `parts` contiguous ranges whose sizes differ
/// by at most one, larger ranges first.
pub fn shard_ranges(batch_size: usize, parts: usize) -> Vec<Range<usize>> {
    let base = batch_size / parts;
    let extra = batch_size % parts;
    let mut start = 0;
    (0..parts)
        .map(|d| {
            let len = base + usize::from(d < extra);
            let r = start..start + len;
            start += len;
            r
        })
        .collect()
}

/// Greedy largest-first placement: each table, biggest first, goes to the
/// currently lightest device; ties go to the lower device id.
pub fn partition_tables(table_sizes: &[usize], num_devices: usize) -> Result<DevicePlan> {
    if num_devices == 0 {
        return Err(Error::InvalidArgument("at least one device is required".into()));
    }
    let mut order: Vec<usize> = (0..table_sizes.len()).collect();
    order.sort_by(|&a, &b| table_sizes[b].cmp(&table_sizes[a]));
    let mut loads = vec![0usize; num_devices];
    let mut table_assignment = vec![0; table_sizes.len()];
    for t in order {
        let d = (0..num_devices).min_by_key(|&d| (loads[d], d)).expect("devices exist");
        loads[d] += table_sizes[t];
        table_assignment[t] = d;
    }
    Ok(DevicePlan {
        num_devices,
        table_assignment,
    })
}

/// One block of embedding rows moved by a shuffle.
#[derive(Clone, Debug, PartialEq)]
pub struct ShuffleSlice {
    pub source: usize,
    pub dest: usize,
    pub table: usize,
    /// Global sample range covered by `data`.
    pub rows: Range<usize>,
    pub data: Matrix,
}

/// Pooled lookups of the tables one device owns, as `(table id, batch × d)`.
pub type OwnerOutputs = Vec<(usize, Matrix)>;

fn check_owner_outputs(outputs: &[OwnerOutputs], plan: &DevicePlan, batch_size: usize) -> Result<()> {
    if outputs.len() != plan.num_devices {
        return Err(Error::LengthMismatch {
            op: "butterfly_shuffle devices",
            left: outputs.len(),
            right: plan.num_devices,
        });
    }
    for (d, out) in outputs.iter().enumerate() {
        let owned: Vec<usize> = out.iter().map(|(t, _)| *t).collect();
        if owned != plan.tables_on(d) {
            return Err(Error::InvalidArgument(format!(
                "device {d} holds tables {owned:?} but the plan assigns {:?}",
                plan.tables_on(d)
            ))
            .on_device(d));
        }
        if let Some((t, m)) = out.iter().find(|(_, m)| m.rows() != batch_size) {
            return Err(Error::InvalidBatch(format!(
                "table {t} output has {} rows for a batch of {batch_size}",
                m.rows()
            ))
            .on_device(d));
        }
    }
    Ok(())
}

/// Personalized all-to-all: device `d` receives, for its own batch shard,
/// the rows of every table, ordered by table id.
pub fn butterfly_shuffle(
    outputs: &[OwnerOutputs],
    plan: &DevicePlan,
    batch_size: usize,
) -> Result<Vec<Vec<ShuffleSlice>>> {
    check_owner_outputs(outputs, plan, batch_size)?;
    let mut owned: Vec<Option<(usize, &Matrix)>> = vec![None; plan.table_assignment.len()];
    for (d, out) in outputs.iter().enumerate() {
        for (t, m) in out {
            owned[*t] = Some((d, m));
        }
    }
    Ok(plan
        .batch_shards(batch_size)
        .into_iter()
        .enumerate()
        .map(|(dest, rows)| {
            owned
                .iter()
                .enumerate()
                .map(|(table, o)| {
                    let (source, m) = o.expect("every table has an owner");
                    ShuffleSlice {
                        source,
                        dest,
                        table,
                        rows: rows.clone(),
                        data: m.slice_rows(rows.clone()),
                    }
                })
                .collect()
        })
        .collect())
}

/// Reverse exchange: `shard_grads[d][t]` holds device `d`'s rows for table
/// `t`; each owner gets its tables back at full batch, shards stacked in
/// ascending device order.
pub fn inverse_shuffle(
    shard_grads: &[Vec<Matrix>],
    plan: &DevicePlan,
    batch_size: usize,
) -> Result<Vec<OwnerOutputs>> {
    if shard_grads.len() != plan.num_devices {
        return Err(Error::LengthMismatch {
            op: "inverse_shuffle devices",
            left: shard_grads.len(),
            right: plan.num_devices,
        });
    }
    let shards = plan.batch_shards(batch_size);
    for (d, g) in shard_grads.iter().enumerate() {
        if g.len() != plan.table_assignment.len() {
            return Err(Error::LengthMismatch {
                op: "inverse_shuffle tables",
                left: g.len(),
                right: plan.table_assignment.len(),
            }
            .on_device(d));
        }
        if let Some(m) = g.iter().find(|m| m.rows() != shards[d].len()) {
            return Err(Error::InvalidBatch(format!(
                "{} gradient rows for a shard of {}",
                m.rows(),
                shards[d].len()
            ))
            .on_device(d));
        }
    }
    (0..plan.num_devices)
        .map(|owner| {
            plan.tables_on(owner)
                .into_iter()
                .map(|t| {
                    let parts: Vec<Matrix> = shard_grads.iter().map(|g| g[t].clone()).collect();
                    Ok((t, Matrix::vstack(&parts)?))
                })
                .collect()
        })
        .collect()
}

/// Elementwise sum in ascending replica order; every replica would receive
/// this same matrix.
pub fn allreduce(per_replica: &[Matrix]) -> Result<Matrix> {
    let (first, rest) = per_replica
        .split_first()
        .ok_or_else(|| Error::InvalidArgument("allreduce needs at least one replica".into()))?;
    let mut acc = first.clone();
    for m in rest {
        if m.shape() != acc.shape() {
            return Err(Error::shape("allreduce", acc.shape(), m.shape()));
        }
        for (a, v) in acc.as_mut_slice().iter_mut().zip(m.as_slice()) {
            *a += v;
        }
    }
    Ok(acc)
}

/// Bytes moved by one collective in one step.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CommRecord {
    pub step: usize,
    pub collective: &'static str,
    pub bytes: u64,
    pub participants: usize,
}

/// `step,collective,bytes,participants` with a header line.
pub fn comm_report(records: &[CommRecord]) -> String {
    let mut out = String::from("step,collective,bytes,participants\n");
    for r in records {
        let _ = writeln!(out, "{},{},{},{}", r.step, r.collective, r.bytes, r.participants);
    }
    out
}

fn cross_device_bytes(slices: &[Vec<ShuffleSlice>]) -> u64 {
    slices
        .iter()
        .flatten()
        .filter(|s| s.source != s.dest)
        .map(|s| (s.data.rows() * s.data.cols()) as u64 * F64_BYTES)
        .sum()
}

/// Whether device phases run one after another or on scoped threads.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Schedule {
    #[default]
    Sequential,
    Concurrent,
}

#[derive(Clone, Debug)]
struct OwnedTable {
    table: EmbeddingTable,
    state: AdagradState,
}

#[derive(Clone, Debug)]
struct Device {
    bottom: Mlp,
    top: Mlp,
    bottom_state: MlpState,
    top_state: MlpState,
    owned: Vec<OwnedTable>,
}

/// Everything a device keeps from its forward/backward pass until the
/// ordered reduction.
struct ShardWork {
    bce_terms: Vec<f64>,
    correct: usize,
    top_cache: MlpCache,
    top_deltas: MlpDeltas,
    bottom_cache: MlpCache,
    bottom_deltas: MlpDeltas,
    grad_emb: Vec<Matrix>,
}

/// Runs `f` once per device, in order or on one thread each. Per-device
/// operator times go to `prof`; concurrent phases are scaled to wall time.
fn run_devices<I, T, F>(
    schedule: Schedule,
    prof: &mut Profiler,
    devices: &mut [Device],
    inputs: Vec<I>,
    f: F,
) -> Result<Vec<T>>
where
    I: Send,
    T: Send,
    F: Fn(usize, &mut Device, I, &mut OpTimes) -> Result<T> + Sync,
{
    match schedule {
        Schedule::Sequential => {
            let mut out = Vec::with_capacity(devices.len());
            for (d, (dev, input)) in devices.iter_mut().zip(inputs).enumerate() {
                let mut times = OpTimes::default();
                let r = f(d, dev, input, &mut times).map_err(|e| e.on_device(d));
                for op in Op::ALL {
                    prof.add(op, times.get(op));
                }
                out.push(r?);
            }
            Ok(out)
        }
        Schedule::Concurrent => {
            let start = Instant::now();
            let results: Vec<(Result<T>, OpTimes)> = std::thread::scope(|s| {
                let handles: Vec<_> = devices
                    .iter_mut()
                    .zip(inputs)
                    .enumerate()
                    .map(|(d, (dev, input))| {
                        let f = &f;
                        s.spawn(move || {
                            let mut times = OpTimes::default();
                            let r = f(d, dev, input, &mut times).map_err(|e| e.on_device(d));
                            (r, times)
                        })
                    })
                    .collect();
                handles
                    .into_iter()
                    .map(|h| h.join().unwrap_or_else(|p| std::panic::resume_unwind(p)))
                    .collect()
            });
            let times: Vec<OpTimes> = results.iter().map(|(_, t)| *t).collect();
            prof.attribute_phase(start.elapsed(), &times);
            results.into_iter().map(|(r, _)| r).collect()
        }
    }
}

fn shard_forward_backward(
    dev: &Device,
    dense: &Matrix,
    embedded: Vec<Matrix>,
    labels: &[f64],
    global_batch: usize,
    times: &mut OpTimes,
) -> Result<ShardWork> {
    let (dense_out, bottom_cache) = times
        .time(Op::BottomMlp, || dev.bottom.forward(dense))
        .map_err(|e| e.at_stage("bottom_mlp"))?;
    let z = times
        .time(Op::Interaction, || interact(&dense_out, &embedded))
        .map_err(|e| e.at_stage("interaction"))?;
    let (logits, top_cache) = times
        .time(Op::TopMlp, || dev.top.forward(&z))
        .map_err(|e| e.at_stage("top_mlp"))?;
    let (bce_terms, correct, grad_logits) = times.time(Op::Loss, || {
        let probs: Vec<f64> = logits.as_slice().iter().map(|&l| sigmoid(l)).collect();
        let terms: Vec<f64> = probs.iter().zip(labels).map(|(&p, &y)| bce_term(p, y)).collect();
        let grad: Vec<f64> = probs
            .iter()
            .zip(labels)
            .map(|(p, y)| (p - y) / global_batch as f64)
            .collect();
        (terms, correct_predictions(&probs, labels), grad)
    });
    let (top_deltas, grad_z) = times
        .time(Op::TopMlp, || {
            dev.top
                .backward_deltas(&top_cache, &Matrix::column_vector(&grad_logits), true)
        })
        .map_err(|e| e.at_stage("top_mlp"))?;
    let grad_z = grad_z.expect("input gradient requested");
    let (grad_dense, grad_emb) = times
        .time(Op::Interaction, || interact_backward(&dense_out, &embedded, &grad_z))
        .map_err(|e| e.at_stage("interaction"))?;
    let (bottom_deltas, _) = times
        .time(Op::BottomMlp, || dev.bottom.backward_deltas(&bottom_cache, &grad_dense, false))
        .map_err(|e| e.at_stage("bottom_mlp"))?;
    Ok(ShardWork {
        bce_terms,
        correct,
        top_cache,
        top_deltas,
        bottom_cache,
        bottom_deltas,
        grad_emb,
    })
}

/// Hybrid-parallel trainer over `num_devices` virtual devices.
#[derive(Clone, Debug)]
pub struct ParallelTrainer {
    config: DlrmConfig,
    optimizer: Optimizer,
    plan: DevicePlan,
    schedule: Schedule,
    devices: Vec<Device>,
    comm: Vec<CommRecord>,
    steps: usize,
}

impl ParallelTrainer {
    /// Places `model` on devices with fresh optimizer state.
    pub fn new(model: &DlrmModel, optimizer: Optimizer, num_devices: usize, schedule: Schedule) -> Result<Self> {
        let state = ModelOptimizer::new(optimizer, model)?;
        Self::with_state(model, &state, num_devices, schedule)
    }

    /// Places `model` and existing optimizer state on devices.
    pub fn with_state(
        model: &DlrmModel,
        state: &ModelOptimizer,
        num_devices: usize,
        schedule: Schedule,
    ) -> Result<Self> {
        model.config.validate()?;
        state.optimizer.validate()?;
        let sizes: Vec<usize> = model.tables.iter().map(|t| t.num_rows() * t.dim()).collect();
        let plan = partition_tables(&sizes, num_devices)?;
        let devices = (0..num_devices)
            .map(|d| Device {
                bottom: model.bottom.clone(),
                top: model.top.clone(),
                bottom_state: state.bottom.clone(),
                top_state: state.top.clone(),
                owned: plan
                    .tables_on(d)
                    .into_iter()
                    .map(|t| OwnedTable {
                        table: model.tables[t].clone(),
                        state: state
                            .tables
                            .get(t)
                            .cloned()
                            .unwrap_or_else(|| table_state(&state.optimizer, &model.tables[t])),
                    })
                    .collect(),
            })
            .collect();
        Ok(Self {
            config: model.config.clone(),
            optimizer: state.optimizer,
            plan,
            schedule,
            devices,
            comm: Vec::new(),
            steps: 0,
        })
    }

    pub fn plan(&self) -> &DevicePlan {
        &self.plan
    }

    pub fn schedule(&self) -> Schedule {
        self.schedule
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn comm_log(&self) -> &[CommRecord] {
        &self.comm
    }

    pub fn comm_report(&self) -> String {
        comm_report(&self.comm)
    }

    /// The model as seen from replica 0 and the table owners.
    pub fn to_model(&self) -> DlrmModel {
        let mut tables: Vec<EmbeddingTable> =
            self.devices.iter().flat_map(|d| d.owned.iter().map(|o| o.table.clone())).collect();
        tables.sort_by_key(|t| t.id());
        DlrmModel {
            config: self.config.clone(),
            bottom: self.devices[0].bottom.clone(),
            top: self.devices[0].top.clone(),
            tables,
        }
    }

    /// Optimizer state gathered the same way as [`Self::to_model`].
    pub fn to_optimizer_state(&self) -> ModelOptimizer {
        let mut tables: Vec<(usize, AdagradState)> = self
            .devices
            .iter()
            .flat_map(|d| d.owned.iter().map(|o| (o.table.id(), o.state.clone())))
            .collect();
        tables.sort_by_key(|(t, _)| *t);
        ModelOptimizer {
            optimizer: self.optimizer,
            bottom: self.devices[0].bottom_state.clone(),
            top: self.devices[0].top_state.clone(),
            tables: tables.into_iter().map(|(_, s)| s).collect(),
        }
    }

    /// Largest absolute parameter difference between any replica and
    /// replica 0.
    pub fn replica_divergence(&self) -> f64 {
        let reference: Vec<f64> = {
            let d = &self.devices[0];
            d.bottom.flat_values().into_iter().chain(d.top.flat_values()).collect()
        };
        self.devices[1..]
            .iter()
            .map(|d| {
                d.bottom
                    .flat_values()
                    .into_iter()
                    .chain(d.top.flat_values())
                    .zip(&reference)
                    .map(|(a, b)| (a - b).abs())
                    .fold(0.0, f64::max)
            })
            .fold(0.0, f64::max)
    }

    fn check_batch(&self, batch: &Batch) -> Result<()> {
        if batch.is_empty() {
            return Err(Error::InvalidArgument("empty mini-batch".into()));
        }
        if batch.labels.len() != batch.len() {
            return Err(Error::LengthMismatch {
                op: "labels",
                left: batch.labels.len(),
                right: batch.len(),
            });
        }
        if batch.sparse.len() != self.config.num_tables() {
            return Err(Error::LengthMismatch {
                op: "sparse batches per table",
                left: batch.sparse.len(),
                right: self.config.num_tables(),
            });
        }
        if let Some((t, s)) = batch.sparse.iter().enumerate().find(|(_, s)| s.num_segments() != batch.len()) {
            return Err(Error::InvalidBatch(format!(
                "table {t} has {} lookups for a batch of {}",
                s.num_segments(),
                batch.len()
            )));
        }
        Ok(())
    }

    pub fn step(&mut self, batch: &Batch, prof: &mut Profiler) -> Result<StepStats> {
        self.check_batch(batch)?;
        let n = batch.len();
        let nd = self.plan.num_devices;
        let shards = self.plan.batch_shards(n);
        let schedule = self.schedule;

        // Owners look up their tables for the whole batch.
        let outputs: Vec<OwnerOutputs> = run_devices(schedule, prof, &mut self.devices, vec![(); nd], |_, dev, (), times| {
            times.time(Op::EmbeddingLookup, || {
                dev.owned
                    .iter()
                    .map(|o| {
                        let t = o.table.id();
                        Ok((t, o.table.lookup(&batch.sparse[t]).map_err(|e| e.at_stage("embedding_lookup"))?))
                    })
                    .collect()
            })
        })?;

        let received = prof.time(Op::Shuffle, || butterfly_shuffle(&outputs, &self.plan, n))?;
        drop(outputs);
        self.comm.push(CommRecord {
            step: self.steps,
            collective: "butterfly_shuffle",
            bytes: cross_device_bytes(&received),
            participants: nd,
        });

        let inputs: Vec<(Range<usize>, Vec<Matrix>)> = shards
            .iter()
            .cloned()
            .zip(received)
            .map(|(r, slices)| (r, slices.into_iter().map(|s| s.data).collect()))
            .collect();
        let work: Vec<Option<ShardWork>> =
            run_devices(schedule, prof, &mut self.devices, inputs, |_, dev, (rows, embedded), times| {
                if rows.is_empty() {
                    return Ok(None);
                }
                let dense = times.time(Op::DataLoading, || batch.dense.slice_rows(rows.clone()));
                shard_forward_backward(dev, &dense, embedded, &batch.labels[rows], n, times).map(Some)
            })?;

        // Ordered reduction: every running sum continues from the previous
        // replica's partial result, samples in global order.
        let mut loss_sum = 0.0;
        let mut correct = 0;
        let mut top = MlpGrads::zeros_like(&self.devices[0].top);
        let mut bottom = MlpGrads::zeros_like(&self.devices[0].bottom);
        for (d, w) in work.iter().enumerate() {
            let Some(w) = w else { continue };
            prof.time(Op::Loss, || {
                for &t in &w.bce_terms {
                    loss_sum += t;
                }
                correct += w.correct;
            });
            let dev = &self.devices[d];
            prof.time(Op::TopMlp, || dev.top.accumulate_grads(&w.top_cache, &w.top_deltas, &mut top))
                .map_err(|e| e.at_stage("top_mlp").on_device(d))?;
            prof.time(Op::BottomMlp, || {
                dev.bottom.accumulate_grads(&w.bottom_cache, &w.bottom_deltas, &mut bottom)
            })
            .map_err(|e| e.at_stage("bottom_mlp").on_device(d))?;
        }
        let grad_bytes = (top.flat_values().len() + bottom.flat_values().len()) as u64 * F64_BYTES;
        // Chain reduce followed by a broadcast of the result.
        let replica_grads: Vec<(MlpGrads, MlpGrads)> = prof.time(Op::Allreduce, || {
            (0..nd).map(|_| (top.clone(), bottom.clone())).collect()
        });
        self.comm.push(CommRecord {
            step: self.steps,
            collective: "allreduce",
            bytes: 2 * (nd as u64 - 1) * grad_bytes,
            participants: nd,
        });

        let dim = self.config.sparse_dim;
        let shard_grads: Vec<Vec<Matrix>> = work
            .into_iter()
            .zip(&shards)
            .map(|(w, r)| match w {
                Some(w) => w.grad_emb,
                None => vec![Matrix::zeros(r.len(), dim); self.plan.table_assignment.len()],
            })
            .collect();
        let returned = prof.time(Op::Shuffle, || inverse_shuffle(&shard_grads, &self.plan, n))?;
        let mut back_bytes = 0;
        for (d, g) in shard_grads.iter().enumerate() {
            for (t, m) in g.iter().enumerate() {
                if self.plan.table_assignment[t] != d {
                    back_bytes += (m.rows() * m.cols()) as u64 * F64_BYTES;
                }
            }
        }
        drop(shard_grads);
        self.comm.push(CommRecord {
            step: self.steps,
            collective: "inverse_shuffle",
            bytes: back_bytes,
            participants: nd,
        });

        let optimizer = self.optimizer;
        let inputs: Vec<(OwnerOutputs, (MlpGrads, MlpGrads))> = returned.into_iter().zip(replica_grads).collect();
        run_devices(schedule, prof, &mut self.devices, inputs, |_, dev, (owned_grads, (top, bottom)), times| {
            for (o, (t, g)) in dev.owned.iter_mut().zip(owned_grads) {
                debug_assert_eq!(o.table.id(), t);
                let sparse = times
                    .time(Op::EmbeddingLookup, || lookup_backward(&o.table, &batch.sparse[t], &g))
                    .map_err(|e| e.at_stage("embedding_backward"))?;
                times.time(Op::Optimizer, || update_table(&optimizer, &mut o.table, &mut o.state, &sparse))?;
            }
            times.time(Op::Optimizer, || {
                update_mlp(&optimizer, &mut dev.bottom, &mut dev.bottom_state, &bottom)?;
                update_mlp(&optimizer, &mut dev.top, &mut dev.top_state, &top)
            })
        })?;

        self.steps += 1;
        Ok(StepStats {
            loss: loss_sum / n as f64,
            correct,
            samples: n,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dense::RngStream;
    use crate::embedding::SparseBatch;
    use crate::model::Interaction;
    use crate::optim::ModelOptimizer;
    use crate::train::train_step;

    #[test]
    fn partition_examples() {
        let p = partition_tables(&[10; 8], 4).unwrap();
        assert_eq!(p.device_loads(&[10; 8]), vec![20; 4]);
        let p = partition_tables(&[3, 1, 4], 1).unwrap();
        assert_eq!(p.table_assignment, vec![0, 0, 0]);
        let sizes = [5, 4, 3, 3];
        let p = partition_tables(&sizes, 2).unwrap();
        assert_eq!(p.device_loads(&sizes), vec![8, 7]);
        assert!(partition_tables(&sizes, 0).is_err());
    }

    #[test]
    fn shard_sizes() {
        let r = shard_ranges(9, 4);
        assert_eq!(r, vec![0..3, 3..5, 5..7, 7..9]);
        assert_eq!(shard_ranges(2, 3), vec![0..1, 1..2, 2..2]);
        assert_eq!(shard_ranges(8, 1), vec![0..8]);
    }

    fn numbered(rows: usize, cols: usize, base: f64) -> Matrix {
        let data = (0..rows * cols).map(|i| base + i as f64).collect();
        Matrix::new(rows, cols, data).unwrap()
    }

    #[test]
    fn shuffle_two_devices() {
        let plan = DevicePlan {
            num_devices: 2,
            table_assignment: vec![0, 1],
        };
        let t0 = numbered(4, 2, 0.0);
        let t1 = numbered(4, 2, 100.0);
        let out = butterfly_shuffle(&[vec![(0, t0.clone())], vec![(1, t1.clone())]], &plan, 4).unwrap();
        let got: Vec<Vec<(usize, usize, Range<usize>)>> = out
            .iter()
            .map(|v| v.iter().map(|s| (s.source, s.table, s.rows.clone())).collect())
            .collect();
        assert_eq!(got, vec![vec![(0, 0, 0..2), (1, 1, 0..2)], vec![(0, 0, 2..4), (1, 1, 2..4)]]);
        assert_eq!(out[0][1].data, t1.slice_rows(0..2));
        assert_eq!(out[1][0].data, t0.slice_rows(2..4));
        assert_eq!(cross_device_bytes(&out), 2 * 2 * 2 * 8);
    }

    #[test]
    fn shuffle_single_device_is_identity() {
        let plan = partition_tables(&[6, 6], 1).unwrap();
        let a = numbered(3, 2, 0.0);
        let b = numbered(3, 2, 50.0);
        let out = butterfly_shuffle(&[vec![(0, a.clone()), (1, b.clone())]], &plan, 3).unwrap();
        assert_eq!(out[0][0].data, a);
        assert_eq!(out[0][1].data, b);
        assert_eq!(cross_device_bytes(&out), 0);
    }

    #[test]
    fn shuffle_conserves_rows_and_inverts() {
        for nd in 1..=4 {
            for batch in [1usize, 4, 9] {
                let sizes = [30, 20, 20, 10, 5];
                let plan = partition_tables(&sizes, nd).unwrap();
                let outputs: Vec<OwnerOutputs> = (0..nd)
                    .map(|d| {
                        plan.tables_on(d)
                            .into_iter()
                            .map(|t| (t, numbered(batch, 3, 1000.0 * t as f64)))
                            .collect()
                    })
                    .collect();
                let shuffled = butterfly_shuffle(&outputs, &plan, batch).unwrap();
                let mut before: Vec<(usize, usize, Vec<u64>)> = outputs
                    .iter()
                    .flatten()
                    .flat_map(|(t, m)| (0..batch).map(move |s| (*t, s, m.row(s).iter().map(|v| v.to_bits()).collect())))
                    .collect();
                let mut after: Vec<(usize, usize, Vec<u64>)> = shuffled
                    .iter()
                    .flatten()
                    .flat_map(|sl| {
                        sl.rows
                            .clone()
                            .enumerate()
                            .map(move |(i, s)| (sl.table, s, sl.data.row(i).iter().map(|v| v.to_bits()).collect()))
                    })
                    .collect();
                before.sort();
                after.sort();
                assert_eq!(before, after);

                let back: Vec<Vec<Matrix>> = shuffled
                    .into_iter()
                    .map(|v| v.into_iter().map(|s| s.data).collect())
                    .collect();
                assert_eq!(inverse_shuffle(&back, &plan, batch).unwrap(), outputs);
            }
        }
    }

    #[test]
    fn shuffle_rejects_inconsistent_outputs() {
        let plan = partition_tables(&[1, 1], 2).unwrap();
        let m = numbered(2, 2, 0.0);
        assert!(butterfly_shuffle(&[vec![(0, m.clone())]], &plan, 2).is_err());
        assert!(butterfly_shuffle(&[vec![(1, m.clone())], vec![(0, m.clone())]], &plan, 2).is_err());
        assert!(butterfly_shuffle(&[vec![(0, m.clone())], vec![(1, m)]], &plan, 3).is_err());
    }

    #[test]
    fn allreduce_examples() {
        let g = numbered(2, 2, -1.5);
        assert_eq!(allreduce(std::slice::from_ref(&g)).unwrap(), g);
        let three = allreduce(&[g.clone(), g.clone(), g.clone()]).unwrap();
        for (a, b) in three.as_slice().iter().zip(g.as_slice()) {
            assert_eq!(*a, 3.0 * b);
        }
        let r = allreduce(&[Matrix::row_vector(&[1.0]), Matrix::row_vector(&[2.0]), Matrix::row_vector(&[3.0])]).unwrap();
        assert_eq!(r.as_slice(), &[6.0]);
        assert!(allreduce(&[Matrix::zeros(1, 2), Matrix::zeros(2, 1)]).is_err());
        assert!(allreduce(&[]).is_err());
    }

    fn toy() -> DlrmConfig {
        DlrmConfig {
            embedding_sizes: vec![7, 5, 9, 6],
            sparse_dim: 3,
            bottom_mlp: vec![4, 5, 3],
            top_mlp: vec![4, 1],
            interaction: Interaction::Dot,
            seed: 21,
        }
    }

    fn batch(config: &DlrmConfig, n: usize, rng: &mut RngStream) -> Batch {
        Batch {
            dense: rng.normal(n, config.dense_dim()),
            sparse: config
                .embedding_sizes
                .iter()
                .map(|&m| {
                    let l: Vec<Vec<usize>> = (0..n)
                        .map(|_| (0..rng.in_range(1, 3)).map(|_| rng.below(m)).collect())
                        .collect();
                    SparseBatch::from_lookups(&l)
                })
                .collect(),
            labels: (0..n).map(|_| rng.below(2) as f64).collect(),
        }
    }

    fn bits(v: &[f64]) -> Vec<u64> {
        v.iter().map(|x| x.to_bits()).collect()
    }

    #[test]
    fn matches_serial_step_bit_for_bit() {
        let config = toy();
        for opt in [Optimizer::sgd(0.3), Optimizer::adagrad(0.2)] {
            for nd in 1..=4 {
                for schedule in [Schedule::Sequential, Schedule::Concurrent] {
                    for n in [4usize, 9] {
                        let mut serial = DlrmModel::new(config.clone()).unwrap();
                        let mut serial_opt = ModelOptimizer::new(opt, &serial).unwrap();
                        let mut par = ParallelTrainer::new(&serial, opt, nd, schedule).unwrap();
                        let mut rng = RngStream::new(n as u64);
                        for _ in 0..5 {
                            let b = batch(&config, n, &mut rng);
                            let s = train_step(&mut serial, &mut serial_opt, &b, &mut Profiler::disabled()).unwrap();
                            let p = par.step(&b, &mut Profiler::disabled()).unwrap();
                            assert_eq!(s.loss.to_bits(), p.loss.to_bits(), "nd={nd} {schedule:?}");
                            assert_eq!(s.correct, p.correct);
                            assert_eq!(par.replica_divergence(), 0.0);
                        }
                        assert_eq!(bits(&par.to_model().flat_params()), bits(&serial.flat_params()));
                        assert_eq!(par.to_optimizer_state(), serial_opt);
                    }
                }
            }
        }
    }

    #[test]
    fn batch_smaller_than_device_count() {
        let config = toy();
        let mut serial = DlrmModel::new(config.clone()).unwrap();
        let mut serial_opt = ModelOptimizer::new(Optimizer::sgd(0.1), &serial).unwrap();
        let mut par = ParallelTrainer::new(&serial, Optimizer::sgd(0.1), 4, Schedule::Concurrent).unwrap();
        let b = batch(&config, 2, &mut RngStream::new(3));
        let s = train_step(&mut serial, &mut serial_opt, &b, &mut Profiler::disabled()).unwrap();
        let p = par.step(&b, &mut Profiler::disabled()).unwrap();
        assert_eq!(s.loss.to_bits(), p.loss.to_bits());
        assert_eq!(bits(&par.to_model().flat_params()), bits(&serial.flat_params()));
    }

    #[test]
    fn errors_carry_device_context() {
        let config = toy();
        let model = DlrmModel::new(config.clone()).unwrap();
        let mut par = ParallelTrainer::new(&model, Optimizer::sgd(0.1), 2, Schedule::Sequential).unwrap();
        let mut b = batch(&config, 4, &mut RngStream::new(1));
        b.sparse[0] = SparseBatch::from_lookups(&[vec![0], vec![1], vec![99], vec![2]]);
        let owner = par.plan().table_assignment[0];
        let err = par.step(&b, &mut Profiler::disabled()).unwrap_err();
        assert!(matches!(err, Error::Device { device, .. } if device == owner), "{err}");
        assert_eq!(par.steps(), 0);
    }

    #[test]
    fn comm_report_format() {
        let config = toy();
        let model = DlrmModel::new(config.clone()).unwrap();
        let mut par = ParallelTrainer::new(&model, Optimizer::sgd(0.1), 2, Schedule::Sequential).unwrap();
        let b = batch(&config, 4, &mut RngStream::new(1));
        par.step(&b, &mut Profiler::disabled()).unwrap();
        let report = par.comm_report();
        let lines: Vec<&str> = report.lines().collect();
        assert_eq!(lines[0], "step,collective,bytes,participants");
        assert_eq!(lines.len(), 4);
        // 4 tables split 2/2; each device sends 2 tables × 2 rows × 3 floats.
        assert_eq!(lines[1], format!("0,butterfly_shuffle,{},2", 2 * 2 * 2 * 3 * 8));
        assert_eq!(lines[3], format!("0,inverse_shuffle,{},2", 2 * 2 * 2 * 3 * 8));
        let mlp_params = (model.bottom.num_params() + model.top.num_params()) as u64;
        assert_eq!(lines[2], format!("0,allreduce,{},2", 2 * mlp_params * 8));
    }

    #[test]
    fn profiling_attributes_time() {
        let config = toy();
        let model = DlrmModel::new(config.clone()).unwrap();
        for schedule in [Schedule::Sequential, Schedule::Concurrent] {
            let mut par = ParallelTrainer::new(&model, Optimizer::adagrad(0.1), 3, schedule).unwrap();
            let b = batch(&config, 9, &mut RngStream::new(1));
            let mut prof = Profiler::new(true);
            par.step(&b, &mut prof).unwrap();
            for op in [Op::EmbeddingLookup, Op::BottomMlp, Op::TopMlp, Op::Shuffle, Op::Optimizer] {
                assert!(prof.times().get(op) > std::time::Duration::ZERO, "{op} {schedule:?}");
            }
        }
    }
}
