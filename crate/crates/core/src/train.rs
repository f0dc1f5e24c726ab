//! Synchronous data-parallel training of the proposal network.

use std::io::Write;
use std::path::PathBuf;
use std::time::Instant;

use crate::collective::{Collective, CollectiveError};
use crate::gateway::{sample_prior_from, GatewayError, InProcessEndpoint};
use crate::optim::{Optimizer, OptimizerConfig, Schedule};
use crate::proposal::{NetError, ProposalNetwork};
use crate::rng::derive_seed;
use crate::store::{plan_minibatches, MinibatchPlan, StoreError, TraceDataset};
use crate::tensor::{Grads, Tensor};
use crate::trace::Trace;

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Collective(#[from] CollectiveError),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error("loss diverged at iteration {iteration}")]
    Diverged {
        iteration: u64,
        checkpoint: Option<PathBuf>,
    },
    #[error("{0}")]
    InvalidArgument(String),
}

/// Supplies each worker's share of the global minibatch stream.
pub trait MinibatchSource {
    /// Traces worker `rank` of `world` trains on at `step`.
    fn local_batch(
        &mut self,
        step: u64,
        rank: usize,
        world: usize,
    ) -> Result<Vec<Trace>, TrainError>;
}

/// Global minibatch `t` is `traces[t*B .. (t+1)*B]`, wrapping around; rank
/// `r` takes the `r`-th of `world` equal slices.
pub struct InMemorySource<'a> {
    pub traces: &'a [Trace],
    pub global_batch: usize,
}

fn local_range(
    global_batch: usize,
    rank: usize,
    world: usize,
) -> Result<std::ops::Range<usize>, TrainError> {
    if world == 0 || global_batch % world != 0 {
        return Err(TrainError::InvalidArgument(format!(
            "global minibatch {global_batch} is not divisible by {world} workers"
        )));
    }
    let b = global_batch / world;
    Ok(rank * b..(rank + 1) * b)
}

impl MinibatchSource for InMemorySource<'_> {
    fn local_batch(
        &mut self,
        step: u64,
        rank: usize,
        world: usize,
    ) -> Result<Vec<Trace>, TrainError> {
        if self.traces.is_empty() {
            return Err(TrainError::InvalidArgument("no training traces".into()));
        }
        let n = self.traces.len();
        let base = step as usize * self.global_batch;
        Ok(local_range(self.global_batch, rank, world)?
            .map(|i| self.traces[(base + i) % n].clone())
            .collect())
    }
}

/// Fresh prior traces from the simulator. Run indices are laid out so that
/// global minibatch `t` is the same whatever the worker count.
pub struct OnlineSource {
    pub endpoint: InProcessEndpoint,
    pub global_batch: usize,
    pub seed: u64,
}

impl MinibatchSource for OnlineSource {
    fn local_batch(
        &mut self,
        step: u64,
        rank: usize,
        world: usize,
    ) -> Result<Vec<Trace>, TrainError> {
        let r = local_range(self.global_batch, rank, world)?;
        let first = step * self.global_batch as u64 + r.start as u64;
        Ok(sample_prior_from(
            &mut self.endpoint,
            r.len(),
            self.seed,
            first,
        )?)
    }
}

/// Offline dataset read through a per-epoch [`MinibatchPlan`]. Each chunk of
/// `local_batch` traces goes to one worker.
pub struct DatasetSource<'a> {
    pub dataset: &'a TraceDataset,
    pub local_batch: usize,
    pub buckets: usize,
    pub seed: u64,
    plan: Option<(u64, MinibatchPlan)>,
    lens: Vec<u32>,
}

impl<'a> DatasetSource<'a> {
    pub fn new(dataset: &'a TraceDataset, local_batch: usize, buckets: usize, seed: u64) -> Self {
        Self {
            dataset,
            local_batch,
            buckets,
            seed,
            plan: None,
            lens: dataset.latent_lens(),
        }
    }
}

impl MinibatchSource for DatasetSource<'_> {
    fn local_batch(
        &mut self,
        step: u64,
        rank: usize,
        world: usize,
    ) -> Result<Vec<Trace>, TrainError> {
        let mut epoch = 0;
        let mut offset = step;
        loop {
            if self.plan.as_ref().map(|p| p.0) != Some(epoch) {
                let plan = plan_minibatches(
                    &self.lens,
                    self.local_batch,
                    world,
                    derive_seed(self.seed, epoch),
                    self.buckets,
                )?;
                if plan.steps() == 0 {
                    return Err(TrainError::InvalidArgument(format!(
                        "dataset of {} traces cannot feed {world} workers",
                        self.dataset.len()
                    )));
                }
                self.plan = Some((epoch, plan));
            }
            let steps = self.plan.as_ref().expect("set above").1.steps() as u64;
            if offset < steps {
                break;
            }
            offset -= steps;
            epoch += 1;
        }
        let plan = &self.plan.as_ref().expect("set above").1;
        let range = plan
            .minibatch(rank, offset as usize)
            .expect("offset below steps");
        Ok(self.dataset.get_many(&range.collect::<Vec<_>>())?)
    }
}

/// Every `1/fraction`-th trace index, counted from the end of each stride.
pub fn validation_indices(n: usize, fraction: f64) -> Vec<usize> {
    if fraction <= 0.0 {
        return Vec::new();
    }
    let stride = (1.0 / fraction).round().max(1.0) as usize;
    (stride - 1..n).step_by(stride).collect()
}

pub const DEFAULT_VALIDATION_FRACTION: f64 = 0.02;

#[derive(Clone, Debug)]
pub struct TrainConfig {
    pub iterations: u64,
    pub optimizer: OptimizerConfig,
    pub schedule: Schedule,
    /// Validation loss cadence in iterations; 0 disables it.
    pub validate_every: u64,
    /// Written at the end of training and when the loss diverges (rank 0 only).
    pub checkpoint: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LogRecord {
    pub iteration: u64,
    pub loss: f64,
    pub lr: f64,
    pub traces_per_sec: f64,
    pub validation_loss: Option<f64>,
}

impl LogRecord {
    pub fn to_line(&self) -> String {
        let mut s = format!(
            "iteration={} loss={:.6} lr={:.6e} traces_per_sec={:.1}",
            self.iteration, self.loss, self.lr, self.traces_per_sec
        );
        if let Some(v) = self.validation_loss {
            s.push_str(&format!(" validation_loss={v:.6}"));
        }
        s
    }
}

/// Concatenates the gradients of present parameters in layout order,
/// zero-filling those missing locally.
pub fn flatten_present(net: &ProposalNetwork, grads: &Grads, present: &[bool]) -> Vec<f64> {
    let mut buf = Vec::new();
    for (id, _) in present.iter().enumerate().filter(|(_, p)| **p) {
        match grads.get(id) {
            Some(g) => buf.extend_from_slice(&g.data),
            None => buf.extend(std::iter::repeat(0.0).take(net.params.get(id).numel())),
        }
    }
    buf
}

pub fn unflatten_present(net: &ProposalNetwork, buf: &[f64], present: &[bool]) -> Grads {
    let mut out = Grads::default();
    let mut pos = 0;
    for (id, _) in present.iter().enumerate().filter(|(_, p)| **p) {
        let shape = net.params.get(id).shape.clone();
        let n: usize = shape.iter().product();
        let t = Tensor::new(shape, buf[pos..pos + n].to_vec()).expect("length from shape");
        out.map.insert(id, t);
        pos += n;
    }
    out
}

/// Averages `local` gradients over the group: presence OR, one concatenated
/// buffer, mean allreduce.
pub fn average_gradients(
    net: &ProposalNetwork,
    local: &Grads,
    group: &mut dyn Collective,
) -> Result<Grads, CollectiveError> {
    let mine: Vec<bool> = (0..net.params.len())
        .map(|id| local.get(id).is_some())
        .collect();
    let present = group.allreduce_presence(&mine)?;
    let mut buf = flatten_present(net, local, &present);
    group.allreduce_mean(&mut buf)?;
    Ok(unflatten_present(net, &buf, &present))
}

/// Copies rank 0's parameters to every rank.
pub fn broadcast_parameters(
    net: &mut ProposalNetwork,
    group: &mut dyn Collective,
) -> Result<(), CollectiveError> {
    let mut flat: Vec<f64> = net
        .params
        .iter()
        .flat_map(|(_, t)| t.data.iter().copied())
        .collect();
    group.broadcast(&mut flat)?;
    let mut pos = 0;
    for id in 0..net.params.len() {
        let t = net.params.get_mut(id);
        let n = t.numel();
        t.data.copy_from_slice(&flat[pos..pos + n]);
        pos += n;
    }
    Ok(())
}

/// Runs `cfg.iterations` synchronous steps. The registry must be complete
/// (and is frozen here) so that every rank shares one parameter layout.
pub fn train(
    net: &mut ProposalNetwork,
    source: &mut dyn MinibatchSource,
    validation: &[Trace],
    cfg: &TrainConfig,
    group: &mut dyn Collective,
    log: &mut dyn FnMut(&LogRecord),
) -> Result<Vec<LogRecord>, TrainError> {
    net.freeze();
    group.check_layout(net.params.layout_hash())?;
    broadcast_parameters(net, group)?;
    let (rank, world) = (group.rank(), group.world_size());
    let mut opt = Optimizer::new(cfg.optimizer);
    let mut records = Vec::with_capacity(cfg.iterations as usize);
    for it in 0..cfg.iterations {
        let start = Instant::now();
        let batch = source.local_batch(it, rank, world)?;
        let (loss, grads, used) = match net.minibatch_loss(&batch) {
            Ok(m) => (m.loss, m.grads, m.used),
            Err(NetError::EmptyMinibatch) => (0.0, Grads::default(), 0),
            Err(e) => return Err(e.into()),
        };
        let grads = average_gradients(net, &grads, group)?;
        let loss = group.allreduce_scalar(loss)?;
        if !loss.is_finite() {
            let checkpoint = match (&cfg.checkpoint, rank) {
                (Some(dir), 0) => {
                    net.save(dir)?;
                    Some(dir.clone())
                }
                _ => None,
            };
            log::error!("loss is {loss} at iteration {it}; stopping");
            return Err(TrainError::Diverged {
                iteration: it,
                checkpoint,
            });
        }
        let lr = cfg.schedule.lr(it);
        opt.step(&mut net.params, &grads, lr);
        net.step += 1;
        let traces = group.allreduce_scalar(used as f64)? * world as f64;
        let validation_loss = if cfg.validate_every > 0
            && (it + 1) % cfg.validate_every == 0
            && !validation.is_empty()
        {
            Some(net.mean_loss(validation)?)
        } else {
            None
        };
        let rec = LogRecord {
            iteration: it,
            loss,
            lr,
            traces_per_sec: traces / start.elapsed().as_secs_f64().max(1e-9),
            validation_loss,
        };
        log(&rec);
        records.push(rec);
    }
    if let (Some(dir), 0) = (&cfg.checkpoint, rank) {
        net.save(dir)?;
    }
    Ok(records)
}

/// Log sink writing one line per record.
pub fn line_logger(mut out: impl Write) -> impl FnMut(&LogRecord) {
    move |r| {
        if let Err(e) = writeln!(out, "{}", r.to_line()) {
            log::warn!("cannot write training log: {e}");
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn validation_split_is_two_percent() {
        let v = validation_indices(1000, DEFAULT_VALIDATION_FRACTION);
        assert_eq!(v.len(), 20);
        assert_eq!(v[0], 49);
        assert!(validation_indices(10, 0.0).is_empty());
    }

    #[test]
    fn local_slices_tile_the_global_batch() {
        assert_eq!(local_range(8, 3, 4).unwrap(), 6..8);
        assert!(local_range(6, 0, 4).is_err());
    }
}
