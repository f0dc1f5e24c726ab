//! The inference-compilation network q(x | y): an observation embedder and an
//! LSTM core shared by all addresses, plus per-address embeddings, sample
//! embedders and proposal heads.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::io;
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::config::{ConfigError, KeyValues};
use crate::distribution::{DistTag, Distribution, Proposal, TruncatedNormalMixture};
use crate::gateway::{ProposalFactory, ProposalSource};
use crate::rng::{derive_seed, seeded};
use crate::tensor::{
    read_archive, write_archive, Grads, ParamId, ParamStore, ShapeError, Tape, Tensor, Var,
};
use crate::trace::{type_hash, Address, Fnv1a, Trace};
use crate::value::Value;

/// Floor added to softplus outputs for proposal standard deviations.
pub const STD_FLOOR: f64 = 1e-4;

#[derive(Debug, thiserror::Error)]
pub enum NetError {
    #[error("no layers for address {0}")]
    UnknownAddress(Address),
    #[error("prior at {address} changed kind since its layers were created")]
    PriorMismatch { address: Address },
    #[error("observation does not fit the embedder: {0}")]
    Observation(String),
    #[error(transparent)]
    Shape(#[from] ShapeError),
    #[error("empty minibatch")]
    EmptyMinibatch,
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CnnLayer {
    Conv {
        out_channels: usize,
        kernel: usize,
        pad: usize,
    },
    MaxPool(usize),
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum ObsEmbedder {
    /// 3D CNN over a [D, H, W] observation followed by one fully connected layer.
    Cnn3d(Vec<CnnLayer>),
    /// One fully connected layer over the flattened observation.
    Mlp,
}

impl ObsEmbedder {
    /// Conv3D(1,64,3)–Conv3D(64,64,3)–MaxPool3D(2)–Conv3D(64,128,3)–
    /// Conv3D(128,128,3)–Conv3D(128,128,3)–MaxPool3D(2), valid convolutions.
    pub fn large_cnn() -> Self {
        let conv = |out| CnnLayer::Conv {
            out_channels: out,
            kernel: 3,
            pad: 0,
        };
        ObsEmbedder::Cnn3d(vec![
            conv(64),
            conv(64),
            CnnLayer::MaxPool(2),
            conv(128),
            conv(128),
            conv(128),
            CnnLayer::MaxPool(2),
        ])
    }

    /// Conv3D(1,4,3) with same padding, then MaxPool3D(2).
    pub fn small_cnn() -> Self {
        ObsEmbedder::Cnn3d(vec![
            CnnLayer::Conv {
                out_channels: 4,
                kernel: 3,
                pad: 1,
            },
            CnnLayer::MaxPool(2),
        ])
    }

    fn name(&self) -> &'static str {
        match self {
            ObsEmbedder::Mlp => "mlp",
            ObsEmbedder::Cnn3d(l) if *l == Self::large_cnn().layers() => "cnn3d_large",
            ObsEmbedder::Cnn3d(l) if *l == Self::small_cnn().layers() => "cnn3d_small",
            ObsEmbedder::Cnn3d(_) => "cnn3d_custom",
        }
    }

    fn layers(&self) -> Vec<CnnLayer> {
        match self {
            ObsEmbedder::Cnn3d(l) => l.clone(),
            ObsEmbedder::Mlp => Vec::new(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NetworkConfig {
    pub lstm_hidden: usize,
    pub obs_embed_dim: usize,
    pub sample_embed_dim: usize,
    pub address_embed_dim: usize,
    pub mixture_components: usize,
    /// Width of the hidden layer in each two-layer proposal head.
    pub head_hidden: usize,
    pub obs_embedder: ObsEmbedder,
    pub seed: u64,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            lstm_hidden: 512,
            obs_embed_dim: 256,
            sample_embed_dim: 4,
            address_embed_dim: 64,
            mixture_components: 10,
            head_hidden: 512,
            obs_embedder: ObsEmbedder::large_cnn(),
            seed: 0,
        }
    }
}

pub const NETWORK_KEYS: [&str; 8] = [
    "lstm_hidden",
    "obs_embed_dim",
    "sample_embed_dim",
    "address_embed_dim",
    "mixture_components",
    "head_hidden",
    "obs_embedder",
    "seed",
];

impl NetworkConfig {
    /// Small sizes for laptop-scale runs.
    pub fn desk() -> Self {
        Self {
            lstm_hidden: 64,
            obs_embed_dim: 32,
            mixture_components: 5,
            head_hidden: 64,
            obs_embedder: ObsEmbedder::small_cnn(),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        let dims = [
            self.lstm_hidden,
            self.obs_embed_dim,
            self.sample_embed_dim,
            self.address_embed_dim,
            self.mixture_components,
            self.head_hidden,
        ];
        if dims.contains(&0) {
            return Err("network dimensions must be at least 1".into());
        }
        Ok(())
    }

    /// Reads the network keys from `kv`, defaulting to [`NetworkConfig::desk`].
    pub fn from_kv(kv: &KeyValues) -> Result<Self, ConfigError> {
        let d = Self::desk();
        let obs_embedder = match kv.raw("obs_embedder").unwrap_or("cnn3d_small") {
            "mlp" => ObsEmbedder::Mlp,
            "cnn3d_small" => ObsEmbedder::small_cnn(),
            "cnn3d_large" => ObsEmbedder::large_cnn(),
            other => {
                return Err(ConfigError::Value {
                    key: "obs_embedder".into(),
                    value: other.into(),
                })
            }
        };
        Ok(Self {
            lstm_hidden: kv.get_or("lstm_hidden", d.lstm_hidden)?,
            obs_embed_dim: kv.get_or("obs_embed_dim", d.obs_embed_dim)?,
            sample_embed_dim: kv.get_or("sample_embed_dim", d.sample_embed_dim)?,
            address_embed_dim: kv.get_or("address_embed_dim", d.address_embed_dim)?,
            mixture_components: kv.get_or("mixture_components", d.mixture_components)?,
            head_hidden: kv.get_or("head_hidden", d.head_hidden)?,
            obs_embedder,
            seed: kv.get_or("seed", d.seed)?,
        })
    }

    pub fn to_kv(&self) -> KeyValues {
        let mut kv = KeyValues::default();
        kv.set("lstm_hidden", self.lstm_hidden);
        kv.set("obs_embed_dim", self.obs_embed_dim);
        kv.set("sample_embed_dim", self.sample_embed_dim);
        kv.set("address_embed_dim", self.address_embed_dim);
        kv.set("mixture_components", self.mixture_components);
        kv.set("head_hidden", self.head_hidden);
        kv.set("obs_embedder", self.obs_embedder.name());
        kv.set("seed", self.seed);
        kv
    }
}

/// What a per-address head emits.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum HeadKind {
    /// Mixture of truncated normals over the prior's support.
    Mixture,
    Categorical(usize),
    /// No learned proposal; the prior is used.
    PriorOnly,
}

#[derive(Clone, Debug)]
pub struct AddressLayers {
    pub address: Address,
    pub tag: DistTag,
    pub kind: HeadKind,
    /// Width of the sample-embedder input.
    pub feature_dim: usize,
    embed: ParamId,
    sample: (ParamId, ParamId),
    head: Option<[ParamId; 4]>,
}

fn head_kind(prior: &Distribution) -> HeadKind {
    match prior {
        Distribution::Categorical { probs } => HeadKind::Categorical(probs.len()),
        d if d.is_continuous_scalar() => HeadKind::Mixture,
        _ => HeadKind::PriorOnly,
    }
}

/// Input vector for the sample embedder.
pub fn sample_features(prior: &Distribution, value: &Value) -> Vec<f64> {
    match prior {
        Distribution::Categorical { probs } => {
            let mut v = vec![0.0; probs.len()];
            if let Some(k) = value.as_i64().filter(|k| (*k as usize) < probs.len()) {
                v[k as usize] = 1.0;
            }
            v
        }
        Distribution::MultivariateNormalDiag { means, stds } => value
            .to_flat()
            .iter()
            .zip(means.iter().zip(stds))
            .map(|(x, (m, s))| (x - m) / s)
            .collect(),
        d => {
            let (loc, scale) = d.loc_scale();
            vec![(value.as_f64().unwrap_or(loc) - loc) / scale]
        }
    }
}

fn feature_dim(prior: &Distribution) -> usize {
    match prior {
        Distribution::Categorical { probs } => probs.len(),
        Distribution::MultivariateNormalDiag { means, .. } => means.len(),
        _ => 1,
    }
}

struct CoreIds {
    cnn: Vec<(CnnLayer, Option<(ParamId, ParamId)>)>,
    obs_fc: (ParamId, ParamId),
    lstm: [ParamId; 3],
}

/// Latents the network proposes, in order: controlled draws outside
/// rejection loops, as (address, prior, value).
pub fn controlled_steps(trace: &Trace) -> impl Iterator<Item = (&Address, &Distribution, &Value)> {
    trace
        .controlled()
        .filter(|e| !e.replace)
        .map(|e| (&e.address, &e.distribution, &e.value))
}

/// Trace type restricted to the steps the network unrolls over.
pub fn step_type(trace: &Trace) -> u64 {
    type_hash(controlled_steps(trace).map(|s| s.0))
}

pub struct ProposalNetwork {
    pub config: NetworkConfig,
    pub params: ParamStore,
    /// Shape of one observation as the embedder sees it.
    pub obs_shape: Vec<usize>,
    core: CoreIds,
    registry: Vec<AddressLayers>,
    index: HashMap<Address, usize>,
    frozen: bool,
    /// Optimizer steps taken.
    pub step: u64,
    skipped: AtomicU64,
}

struct StepOut {
    h: Var,
    c: Var,
}

impl ProposalNetwork {
    /// Core-only network for observations of shape `obs_shape`.
    pub fn new(config: NetworkConfig, obs_shape: &[usize]) -> Result<Self, NetError> {
        config.validate().map_err(NetError::Observation)?;
        let mut params = ParamStore::new();
        let seed = config.seed;
        let add = |params: &mut ParamStore,
                   name: String,
                   shape: &[usize],
                   fan_in: usize,
                   fan_out: usize,
                   scale: f64| {
            init_param(params, seed, name, shape, (fan_in, fan_out), scale)
        };
        let zeros = |params: &mut ParamStore, name: String, shape: &[usize]| {
            params.add(name, Tensor::zeros(shape))
        };

        let mut cnn = Vec::new();
        let flat_dim;
        match &config.obs_embedder {
            ObsEmbedder::Mlp => flat_dim = obs_shape.iter().product(),
            ObsEmbedder::Cnn3d(layers) => {
                if obs_shape.len() != 3 {
                    return Err(NetError::Observation(format!(
                        "3D embedder needs a [D,H,W] observation, got {obs_shape:?}"
                    )));
                }
                let mut dims = [1, obs_shape[0], obs_shape[1], obs_shape[2]];
                for (i, layer) in layers.iter().enumerate() {
                    match *layer {
                        CnnLayer::Conv {
                            out_channels,
                            kernel,
                            pad,
                        } => {
                            let fan_in = dims[0] * kernel.pow(3);
                            let w = add(
                                &mut params,
                                format!("obs/conv{i}/w"),
                                &[out_channels, dims[0], kernel, kernel, kernel],
                                fan_in,
                                out_channels * kernel.pow(3),
                                1.0,
                            )?;
                            let b = zeros(&mut params, format!("obs/conv{i}/b"), &[out_channels])?;
                            for d in &mut dims[1..] {
                                *d = (*d + 2 * pad)
                                    .checked_sub(kernel)
                                    .map(|x| x + 1)
                                    .ok_or_else(|| {
                                        NetError::Observation(format!(
                                            "observation too small for layer {i}"
                                        ))
                                    })?;
                            }
                            dims[0] = out_channels;
                            cnn.push((*layer, Some((w, b))));
                        }
                        CnnLayer::MaxPool(k) => {
                            if dims[1..].iter().any(|d| *d < k) || k == 0 {
                                return Err(NetError::Observation(format!(
                                    "observation too small for layer {i}"
                                )));
                            }
                            dims[1..].iter_mut().for_each(|d| *d /= k);
                            cnn.push((*layer, None));
                        }
                    }
                }
                flat_dim = dims.iter().product();
            }
        }
        let e = config.obs_embed_dim;
        let obs_fc = (
            add(
                &mut params,
                "obs/fc/w".into(),
                &[flat_dim, e],
                flat_dim,
                e,
                1.0,
            )?,
            zeros(&mut params, "obs/fc/b".into(), &[1, e])?,
        );
        let h = config.lstm_hidden;
        let input = e + config.address_embed_dim + config.sample_embed_dim;
        let lstm = [
            add(&mut params, "lstm/w".into(), &[input, 4 * h], input, h, 1.0)?,
            add(&mut params, "lstm/u".into(), &[h, 4 * h], h, h, 1.0)?,
            zeros(&mut params, "lstm/b".into(), &[1, 4 * h])?,
        ];
        Ok(Self {
            config,
            params,
            obs_shape: obs_shape.to_vec(),
            core: CoreIds { cnn, obs_fc, lstm },
            registry: Vec::new(),
            index: HashMap::new(),
            frozen: false,
            step: 0,
            skipped: AtomicU64::new(0),
        })
    }

    pub fn registry(&self) -> &[AddressLayers] {
        &self.registry
    }

    pub fn layers(&self, address: &Address) -> Option<&AddressLayers> {
        self.index.get(address).map(|&i| &self.registry[i])
    }

    pub fn param_count(&self) -> usize {
        self.params.numel()
    }

    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    /// Traces dropped from minibatches because they reached an unknown address.
    pub fn skipped_traces(&self) -> u64 {
        self.skipped.load(Ordering::Relaxed)
    }

    /// Creates layers for `address` the first time it is seen. Returns whether
    /// anything was created.
    pub fn ensure_address(
        &mut self,
        address: &Address,
        prior: &Distribution,
    ) -> Result<bool, NetError> {
        if let Some(l) = self.layers(address) {
            if l.tag != prior.tag()
                || l.kind != head_kind(prior)
                || l.feature_dim != feature_dim(prior)
            {
                return Err(NetError::PriorMismatch {
                    address: address.clone(),
                });
            }
            return Ok(false);
        }
        if self.frozen {
            return Err(NetError::UnknownAddress(address.clone()));
        }
        let idx = self.registry.len();
        let seed = self.config.seed;
        let add = |params: &mut ParamStore,
                   name: String,
                   shape: &[usize],
                   fan_in: usize,
                   fan_out: usize,
                   scale: f64| {
            init_param(params, seed, name, shape, (fan_in, fan_out), scale)
        };
        let p = &mut self.params;
        let a = self.config.address_embed_dim;
        let s = self.config.sample_embed_dim;
        let fd = feature_dim(prior);
        let embed = add(p, format!("addr{idx}/embed"), &[1, a], 1, a, 1.0)?;
        let sample = (
            add(p, format!("addr{idx}/sample/w"), &[fd, s], fd, s, 1.0)?,
            p.add(format!("addr{idx}/sample/b"), Tensor::zeros(&[1, s]))?,
        );
        let kind = head_kind(prior);
        let out = match kind {
            HeadKind::Mixture => 3 * self.config.mixture_components,
            HeadKind::Categorical(k) => k,
            HeadKind::PriorOnly => 0,
        };
        let head = if out > 0 {
            let (h, hh) = (self.config.lstm_hidden, self.config.head_hidden);
            Some([
                add(p, format!("addr{idx}/head/w1"), &[h, hh], h, hh, 1.0)?,
                p.add(format!("addr{idx}/head/b1"), Tensor::zeros(&[1, hh]))?,
                // Small output weights: initial proposals sit near uniform
                // mixture weights and the prior midpoint.
                add(p, format!("addr{idx}/head/w2"), &[hh, out], hh, out, 0.1)?,
                p.add(format!("addr{idx}/head/b2"), Tensor::zeros(&[1, out]))?,
            ])
        } else {
            None
        };
        self.registry.push(AddressLayers {
            address: address.clone(),
            tag: prior.tag(),
            kind,
            feature_dim: fd,
            embed,
            sample,
            head,
        });
        self.index.insert(address.clone(), idx);
        Ok(true)
    }

    /// Creates layers for every controlled address in `traces`.
    pub fn pregenerate<'t>(
        &mut self,
        traces: impl IntoIterator<Item = &'t Trace>,
    ) -> Result<usize, NetError> {
        let mut created = 0;
        for t in traces {
            for (addr, prior, _) in controlled_steps(t) {
                created += usize::from(self.ensure_address(addr, prior)?);
            }
        }
        Ok(created)
    }

    fn observation_batch(&self, obs: &[&Value]) -> Result<Tensor, NetError> {
        let per: usize = self.obs_shape.iter().product();
        let mut data = Vec::with_capacity(per * obs.len());
        for o in obs {
            let flat = o.to_flat();
            if flat.len() != per {
                return Err(NetError::Observation(format!(
                    "observation has {} values, embedder expects {per}",
                    flat.len()
                )));
            }
            data.extend(flat);
        }
        let mut shape = vec![obs.len()];
        match self.config.obs_embedder {
            ObsEmbedder::Mlp => shape.push(per),
            ObsEmbedder::Cnn3d(_) => {
                shape.push(1);
                shape.extend(&self.obs_shape);
            }
        }
        Ok(Tensor::new(shape, data)?)
    }

    /// Observation embeddings, [B, obs_embed_dim].
    fn embed_observations(&self, tape: &mut Tape, obs: &[&Value]) -> Result<Var, NetError> {
        let b = obs.len();
        let mut x = tape.constant(self.observation_batch(obs)?);
        for (layer, ids) in &self.core.cnn {
            x = match (layer, ids) {
                (CnnLayer::Conv { pad, .. }, Some((w, bias))) => {
                    let w = tape.param(&self.params, *w);
                    let bias = tape.param(&self.params, *bias);
                    let y = tape.conv3d(x, w, bias, *pad)?;
                    tape.relu(y)
                }
                (CnnLayer::MaxPool(k), _) => tape.maxpool3d(x, *k)?,
                _ => unreachable!("conv layers always carry parameters"),
            };
        }
        let flat = tape.value(x).numel() / b;
        let x = tape.reshape(x, &[b, flat])?;
        let w = tape.param(&self.params, self.core.obs_fc.0);
        let bias = tape.param(&self.params, self.core.obs_fc.1);
        let y = tape.linear(x, w, bias)?;
        Ok(tape.relu(y))
    }

    fn lstm_step(
        &self,
        tape: &mut Tape,
        obs: Var,
        prev: Var,
        h: Var,
        c: Var,
        layers: &AddressLayers,
    ) -> Result<StepOut, NetError> {
        let b = tape.value(obs).rows();
        let e = tape.param(&self.params, layers.embed);
        let e = tape.broadcast_rows(e, b);
        let x = tape.concat(&[obs, e, prev])?;
        let [w, u, bias] = self.core.lstm.map(|id| tape.param(&self.params, id));
        let (h, c) = tape.lstm_cell(x, h, c, w, u, bias)?;
        Ok(StepOut { h, c })
    }

    fn head_raw(&self, tape: &mut Tape, h: Var, ids: &[ParamId; 4]) -> Result<Var, NetError> {
        let [w1, b1, w2, b2] = ids.map(|id| tape.param(&self.params, id));
        let z = tape.linear(h, w1, b1)?;
        let z = tape.relu(z);
        Ok(tape.linear(z, w2, b2)?)
    }

    /// Mixture parameters (logits, means, stds) for rows whose priors share a tag.
    fn mixture_params(
        &self,
        tape: &mut Tape,
        raw: Var,
        priors: &[&Distribution],
    ) -> Result<(Var, Var, Var), NetError> {
        let k = self.config.mixture_components;
        let b = priors.len();
        let logits = tape.slice(raw, 0, k)?;
        let mr = tape.slice(raw, k, k)?;
        let sr = tape.slice(raw, 2 * k, k)?;
        let mut offset = Vec::with_capacity(b * k);
        let mut scale = Vec::with_capacity(b * k);
        let bounded = priors[0]
            .support()
            .is_some_and(|(l, h)| l.is_finite() && h.is_finite());
        for p in priors {
            let (lo, hi) = p.support().expect("mixture heads only serve scalar priors");
            let (off, sc) = if bounded {
                (lo, hi - lo)
            } else {
                p.loc_scale()
            };
            offset.extend(std::iter::repeat(off).take(k));
            scale.extend(std::iter::repeat(sc).take(k));
        }
        let offset = tape.constant(Tensor::new(vec![b, k], offset)?);
        let scale = tape.constant(Tensor::new(vec![b, k], scale)?);
        let m = if bounded { tape.sigmoid(mr) } else { mr };
        let m = tape.mul(m, scale)?;
        let means = tape.add(m, offset)?;
        let s = tape.softplus(sr);
        let floor = tape.constant(Tensor::new(vec![b, k], vec![STD_FLOOR; b * k])?);
        let s = tape.add(s, floor)?;
        let stds = tape.mul(s, scale)?;
        Ok((logits, means, stds))
    }

    /// Σ log q over one sub-minibatch of traces sharing a step sequence;
    /// returns a scalar on `tape`.
    fn group_log_q(&self, tape: &mut Tape, group: &[&Trace]) -> Result<Option<Var>, NetError> {
        let b = group.len();
        let steps: Vec<Vec<(&Address, &Distribution, &Value)>> = group
            .iter()
            .map(|t| controlled_steps(t).collect())
            .collect();
        let n_steps = steps[0].len();
        if steps
            .iter()
            .any(|s| s.len() != n_steps || s.iter().zip(&steps[0]).any(|(a, b)| a.0 != b.0))
        {
            return Err(NetError::Observation(
                "sub-minibatch mixes trace types".into(),
            ));
        }
        if n_steps == 0 {
            return Ok(None);
        }
        let obs: Vec<&Value> = group.iter().map(|t| &t.observation).collect();
        let obs = self.embed_observations(tape, &obs)?;
        let hd = self.config.lstm_hidden;
        let mut h = tape.constant(Tensor::zeros(&[b, hd]));
        let mut c = tape.constant(Tensor::zeros(&[b, hd]));
        let mut prev = tape.constant(Tensor::zeros(&[b, self.config.sample_embed_dim]));
        let mut terms = Vec::with_capacity(n_steps);
        for t in 0..n_steps {
            let addr = steps[0][t].0;
            let layers = self
                .layers(addr)
                .ok_or_else(|| NetError::UnknownAddress(addr.clone()))?;
            let priors: Vec<&Distribution> = steps.iter().map(|s| s[t].1).collect();
            let values: Vec<&Value> = steps.iter().map(|s| s[t].2).collect();
            if priors
                .iter()
                .any(|p| p.tag() != layers.tag || head_kind(p) != layers.kind)
            {
                return Err(NetError::PriorMismatch {
                    address: addr.clone(),
                });
            }
            let out = self.lstm_step(tape, obs, prev, h, c, layers)?;
            h = out.h;
            c = out.c;
            let term = match (layers.kind, &layers.head) {
                (HeadKind::Mixture, Some(ids)) => {
                    let raw = self.head_raw(tape, h, ids)?;
                    let (lg, mu, sd) = self.mixture_params(tape, raw, &priors)?;
                    let x: Vec<f64> = values
                        .iter()
                        .map(|v| v.as_f64().unwrap_or(f64::NAN))
                        .collect();
                    let (lo, hi): (Vec<f64>, Vec<f64>) = priors
                        .iter()
                        .map(|p| p.support().expect("scalar prior"))
                        .unzip();
                    tape.tn_mixture_log_pdf(lg, mu, sd, &x, &lo, &hi)?
                }
                (HeadKind::Categorical(k), Some(ids)) => {
                    let raw = self.head_raw(tape, h, ids)?;
                    let targets: Vec<usize> = values
                        .iter()
                        .map(|v| {
                            v.as_i64()
                                .map(|i| i as usize)
                                .filter(|i| *i < k)
                                .unwrap_or(usize::MAX)
                        })
                        .collect();
                    if targets.contains(&usize::MAX) {
                        return Err(NetError::PriorMismatch {
                            address: addr.clone(),
                        });
                    }
                    tape.categorical_log_pdf(raw, &targets)?
                }
                _ => {
                    let lp: Vec<f64> = priors
                        .iter()
                        .zip(&values)
                        .map(|(p, v)| p.log_density(v))
                        .collect();
                    tape.constant(Tensor::new(vec![b, 1], lp)?)
                }
            };
            terms.push(tape.sum(term));
            let feats: Vec<f64> = priors
                .iter()
                .zip(&values)
                .flat_map(|(p, v)| sample_features(p, v))
                .collect();
            let feats = tape.constant(Tensor::new(vec![b, layers.feature_dim], feats)?);
            let (sw, sb) = (
                tape.param(&self.params, layers.sample.0),
                tape.param(&self.params, layers.sample.1),
            );
            let e = tape.linear(feats, sw, sb)?;
            prev = tape.relu(e);
        }
        let mut total = terms[0];
        for t in &terms[1..] {
            total = tape.add(total, *t)?;
        }
        Ok(Some(total))
    }

    fn known(&self, trace: &Trace) -> bool {
        controlled_steps(trace).all(|(a, _, _)| self.index.contains_key(a))
    }

    /// Σ_t log q(x_t | y, x_<t) for one trace.
    pub fn trace_log_q(&self, trace: &Trace) -> Result<f64, NetError> {
        let mut tape = Tape::new();
        Ok(match self.group_log_q(&mut tape, &[trace])? {
            Some(v) => tape.value(v).item(),
            None => 0.0,
        })
    }

    /// Mean of −log q over the minibatch with parameter gradients. Traces are
    /// grouped into sub-minibatches by step sequence, each unrolled once.
    /// Traces reaching unknown addresses are skipped and counted.
    pub fn minibatch_loss(&self, traces: &[Trace]) -> Result<MinibatchLoss, NetError> {
        use rayon::prelude::*;
        let mut groups: BTreeMap<u64, Vec<&Trace>> = BTreeMap::new();
        let mut skipped = 0;
        for t in traces {
            if self.known(t) {
                groups.entry(step_type(t)).or_default().push(t);
            } else {
                skipped += 1;
            }
        }
        self.skipped.fetch_add(skipped, Ordering::Relaxed);
        let used: usize = groups.values().map(Vec::len).sum();
        if used == 0 {
            return Err(NetError::EmptyMinibatch);
        }
        let sizes: Vec<usize> = groups.values().map(Vec::len).collect();
        let parts: Vec<(f64, Grads)> = groups
            .into_par_iter()
            .map(|(_, group)| {
                let mut tape = Tape::new();
                match self.group_log_q(&mut tape, &group)? {
                    Some(v) => Ok((tape.value(v).item(), tape.backward(v)?)),
                    None => Ok((0.0, Grads::default())),
                }
            })
            .collect::<Result<_, NetError>>()?;
        let mut log_q = 0.0;
        let mut grads = Grads::default();
        for (lq, g) in parts {
            log_q += lq;
            grads.accumulate(g);
        }
        let inv = 1.0 / used as f64;
        grads.scale(-inv);
        Ok(MinibatchLoss {
            loss: -log_q * inv,
            grads,
            used,
            skipped: skipped as usize,
            sub_minibatch_sizes: sizes,
        })
    }

    /// Loss only, one trace at a time.
    pub fn mean_loss(&self, traces: &[Trace]) -> Result<f64, NetError> {
        let mut total = 0.0;
        let mut n = 0;
        for t in traces.iter().filter(|t| self.known(t)) {
            total -= self.trace_log_q(t)?;
            n += 1;
        }
        if n == 0 {
            return Err(NetError::EmptyMinibatch);
        }
        Ok(total / n as f64)
    }

    /// Writes `params.stna` and `manifest.txt` into directory `dir`.
    pub fn save(&self, dir: &Path) -> Result<(), NetError> {
        fs::create_dir_all(dir)?;
        let f = io::BufWriter::new(fs::File::create(dir.join("params.stna"))?);
        write_archive(f, self.params.iter())?;
        let mut text = self.config.to_kv().to_text();
        text.push_str(&format!("obs_shape = {}\n", join(&self.obs_shape)));
        text.push_str(&format!("step = {}\n", self.step));
        text.push_str(&format!("frozen = {}\n", self.frozen));
        for (i, l) in self.registry.iter().enumerate() {
            text.push_str(&format!(
                "address.{i} = {}|{}|{}|{}|{}\n",
                l.address.full,
                l.address.instance,
                l.tag as u8,
                match l.kind {
                    HeadKind::Mixture => "mixture".to_string(),
                    HeadKind::Categorical(k) => format!("categorical:{k}"),
                    HeadKind::PriorOnly => "prior".to_string(),
                },
                l.feature_dim
            ));
        }
        fs::write(dir.join("manifest.txt"), text)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self, NetError> {
        let kv = KeyValues::parse(&fs::read_to_string(dir.join("manifest.txt"))?)?;
        let config = NetworkConfig::from_kv(&kv)?;
        let bad = |key: &str, value: &str| ConfigError::Value {
            key: key.to_string(),
            value: value.to_string(),
        };
        let obs_shape = kv
            .list::<usize>("obs_shape")?
            .ok_or_else(|| bad("obs_shape", ""))?;
        let mut net = Self::new(config, &obs_shape)?;
        net.step = kv.get_or("step", 0)?;
        let mut i = 0;
        while let Some(line) = kv.raw(&format!("address.{i}")) {
            let key = format!("address.{i}");
            let f: Vec<&str> = line.split('|').collect();
            let [full, inst, tag, kind, fd] = f.as_slice() else {
                return Err(bad(&key, line).into());
            };
            let instance: u32 = inst.parse().map_err(|_| bad(&key, line))?;
            let tag = tag
                .parse::<u8>()
                .ok()
                .and_then(DistTag::from_byte)
                .ok_or_else(|| bad(&key, line))?;
            let fd: usize = fd.parse().map_err(|_| bad(&key, line))?;
            let prior = match *kind {
                "mixture" => Distribution::Uniform {
                    low: 0.0,
                    high: 1.0,
                },
                "prior" if fd == 1 => Distribution::Poisson { rate: 1.0 },
                "prior" => Distribution::MultivariateNormalDiag {
                    means: vec![0.0; fd],
                    stds: vec![1.0; fd],
                },
                k => {
                    let n: usize = k
                        .strip_prefix("categorical:")
                        .and_then(|n| n.parse().ok())
                        .ok_or_else(|| bad(&key, line))?;
                    Distribution::Categorical {
                        probs: vec![1.0 / n as f64; n],
                    }
                }
            };
            let address = Address::new(*full, instance);
            net.ensure_address(&address, &prior)?;
            let l = net.registry.last_mut().expect("just created");
            l.tag = tag;
            i += 1;
        }
        let stored = read_archive(io::BufReader::new(fs::File::open(dir.join("params.stna"))?))?;
        if stored.len() != net.params.len() {
            return Err(NetError::Observation(format!(
                "checkpoint holds {} tensors, manifest implies {}",
                stored.len(),
                net.params.len()
            )));
        }
        for (name, t) in stored {
            let id = net.params.id(&name).ok_or_else(|| bad("params", &name))?;
            if net.params.get(id).shape != t.shape {
                return Err(ShapeError(format!("{name}: stored shape {:?}", t.shape)).into());
            }
            *net.params.get_mut(id) = t;
        }
        if kv.get_or("frozen", false)? {
            net.freeze();
        }
        Ok(net)
    }
}

/// Glorot-uniform tensor seeded from the network seed and the parameter name,
/// so initial values do not depend on registration order.
fn init_param(
    params: &mut ParamStore,
    seed: u64,
    name: String,
    shape: &[usize],
    (fan_in, fan_out): (usize, usize),
    scale: f64,
) -> Result<ParamId, ShapeError> {
    let mut rng = seeded(derive_seed(seed, fnv(&name)));
    let mut t = Tensor::glorot(shape, fan_in, fan_out, &mut rng);
    t.data.iter_mut().for_each(|x| *x *= scale);
    params.add(name, t)
}

fn join(xs: &[usize]) -> String {
    xs.iter()
        .map(|x| x.to_string())
        .collect::<Vec<_>>()
        .join(",")
}

fn fnv(s: &str) -> u64 {
    let mut h = Fnv1a::default();
    h.write(s.as_bytes());
    h.finish()
}

#[derive(Clone, Debug)]
pub struct MinibatchLoss {
    pub loss: f64,
    pub grads: Grads,
    /// Traces that contributed.
    pub used: usize,
    pub skipped: usize,
    pub sub_minibatch_sizes: Vec<usize>,
}

/// Proposal source driving one run at a time from a trained network.
pub struct NetworkSource<'n> {
    net: &'n ProposalNetwork,
    obs: Option<Tensor>,
    /// Observation `obs` was computed from.
    obs_key: Option<Value>,
    h: Tensor,
    c: Tensor,
    prev: Tensor,
    /// Address whose LSTM step ran in `propose` and awaits its value.
    pending: Option<usize>,
}

impl<'n> NetworkSource<'n> {
    pub fn new(net: &'n ProposalNetwork) -> Self {
        let hd = net.config.lstm_hidden;
        Self {
            net,
            obs: None,
            obs_key: None,
            h: Tensor::zeros(&[1, hd]),
            c: Tensor::zeros(&[1, hd]),
            prev: Tensor::zeros(&[1, net.config.sample_embed_dim]),
            pending: None,
        }
    }

    fn step(&mut self, idx: usize, prior: &Distribution) -> Result<Option<Proposal>, NetError> {
        let net = self.net;
        let layers = &net.registry[idx];
        let Some(obs) = &self.obs else {
            return Ok(None);
        };
        let mut tape = Tape::new();
        let o = tape.constant(obs.clone());
        let p = tape.constant(self.prev.clone());
        let h = tape.constant(self.h.clone());
        let c = tape.constant(self.c.clone());
        let out = net.lstm_step(&mut tape, o, p, h, c, layers)?;
        self.h = tape.value(out.h).clone();
        self.c = tape.value(out.c).clone();
        self.pending = Some(idx);
        Ok(match (layers.kind, &layers.head) {
            (HeadKind::Mixture, Some(ids)) => {
                let raw = net.head_raw(&mut tape, out.h, ids)?;
                let (lg, mu, sd) = net.mixture_params(&mut tape, raw, &[prior])?;
                let w = tape.softmax(lg)?;
                let (low, high) = prior.support().expect("scalar prior");
                Some(Proposal::Mixture(TruncatedNormalMixture {
                    weights: tape.value(w).data.clone(),
                    means: tape.value(mu).data.clone(),
                    stds: tape.value(sd).data.clone(),
                    low,
                    high,
                }))
            }
            (HeadKind::Categorical(_), Some(ids)) => {
                let raw = net.head_raw(&mut tape, out.h, ids)?;
                let probs = tape.softmax(raw)?;
                Some(Proposal::Dist(Distribution::Categorical {
                    probs: tape.value(probs).data.clone(),
                }))
            }
            _ => None,
        })
    }
}

impl ProposalSource for NetworkSource<'_> {
    fn begin_run(&mut self, observation: Option<&Value>) {
        let hd = self.net.config.lstm_hidden;
        self.h = Tensor::zeros(&[1, hd]);
        self.c = Tensor::zeros(&[1, hd]);
        self.prev = Tensor::zeros(&[1, self.net.config.sample_embed_dim]);
        self.pending = None;
        let same = match (observation, &self.obs_key) {
            (Some(o), Some(k)) => o.bit_eq(k),
            _ => false,
        };
        if same {
            return;
        }
        self.obs_key = observation.cloned();
        self.obs = observation.and_then(|o| {
            let mut tape = Tape::new();
            match self.net.embed_observations(&mut tape, &[o]) {
                Ok(v) => Some(tape.value(v).clone()),
                Err(e) => {
                    log::warn!("observation not embeddable, proposing from the prior: {e}");
                    None
                }
            }
        });
    }

    fn propose(&mut self, address: &Address, prior: &Distribution) -> Option<Proposal> {
        self.pending = None;
        let idx = *self.net.index.get(address)?;
        let l = &self.net.registry[idx];
        if l.tag != prior.tag() || l.kind != head_kind(prior) || l.feature_dim != feature_dim(prior)
        {
            return None;
        }
        match self.step(idx, prior) {
            Ok(p) => p,
            Err(e) => {
                log::warn!("proposal at {address} failed, using the prior: {e}");
                None
            }
        }
    }

    fn record(&mut self, address: &Address, prior: &Distribution, value: &Value) {
        let Some(idx) = self.pending.take() else {
            return;
        };
        let layers = &self.net.registry[idx];
        if &layers.address != address {
            return;
        }
        let feats = sample_features(prior, value);
        let mut tape = Tape::new();
        let Ok(f) = Tensor::new(vec![1, feats.len()], feats) else {
            return;
        };
        let f = tape.constant(f);
        let w = tape.param(&self.net.params, layers.sample.0);
        let b = tape.param(&self.net.params, layers.sample.1);
        if let Ok(e) = tape.linear(f, w, b) {
            let e = tape.relu(e);
            self.prev = tape.value(e).clone();
        }
    }
}

impl ProposalFactory for ProposalNetwork {
    fn source(&self) -> Box<dyn ProposalSource + '_> {
        Box::new(NetworkSource::new(self))
    }
}
