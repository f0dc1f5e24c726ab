//! Built-in reference simulators. Every draw goes through a [`SimContext`], so
//! they run identically in-process and behind a socket.

use std::sync::Arc;

use crate::distribution::{mvn3_diag_pdf, normal_log_pdf, Distribution};
use crate::sim::{Model, SimContext, SimError};
use crate::trace::Trace;
use crate::value::{TensorValue, Value};

/// x ~ N(prior_mean, prior_std²); y_i ~ N(x, noise_std²) for i in 0..n_obs.
#[derive(Clone, Debug)]
pub struct ConjugateGaussian {
    pub prior_mean: f64,
    pub prior_std: f64,
    pub noise_std: f64,
    pub n_obs: usize,
}

impl Default for ConjugateGaussian {
    fn default() -> Self {
        Self {
            prior_mean: 0.0,
            prior_std: 1.0,
            noise_std: 1.0,
            n_obs: 1,
        }
    }
}

pub const CONJUGATE_LATENT: &str = "conjugate/latent/Normal";

impl ConjugateGaussian {
    /// Analytic posterior (mean, variance) given observations `ys`.
    pub fn posterior(&self, ys: &[f64]) -> (f64, f64) {
        let prec = self.prior_std.powi(-2) + ys.len() as f64 * self.noise_std.powi(-2);
        let mean = (self.prior_mean * self.prior_std.powi(-2)
            + ys.iter().sum::<f64>() * self.noise_std.powi(-2))
            / prec;
        (mean, 1.0 / prec)
    }

    /// Analytic log evidence for a single observation.
    pub fn log_evidence_single(&self, y: f64) -> f64 {
        normal_log_pdf(
            y,
            self.prior_mean,
            (self.prior_std.powi(2) + self.noise_std.powi(2)).sqrt(),
        )
    }

    pub fn observation(&self, ys: &[f64]) -> Value {
        if ys.len() == 1 {
            Value::F64(ys[0])
        } else {
            Value::Tensor(TensorValue::vector(ys.to_vec()))
        }
    }
}

fn split_observation(obs: Option<&Value>, n: usize) -> Result<Vec<Option<Value>>, SimError> {
    match obs {
        None => Ok(vec![None; n]),
        Some(v) => {
            let flat = v.to_flat();
            if flat.len() != n {
                return Err(SimError::Model(format!(
                    "observation has {} values, model observes {n}",
                    flat.len()
                )));
            }
            Ok(flat.into_iter().map(|y| Some(Value::F64(y))).collect())
        }
    }
}

impl Model for ConjugateGaussian {
    fn name(&self) -> &str {
        "conjugate"
    }

    fn run(
        &self,
        ctx: &mut dyn SimContext,
        observation: Option<&Value>,
    ) -> Result<Value, SimError> {
        let ys = split_observation(observation, self.n_obs)?;
        let x = ctx.sample_f64(
            &["conjugate", "latent"],
            Distribution::Normal {
                mean: self.prior_mean,
                std: self.prior_std,
            },
            true,
            false,
        )?;
        for y in ys {
            ctx.observe(
                &["conjugate", "obs"],
                Distribution::Normal {
                    mean: x,
                    std: self.noise_std,
                },
                y,
            )?;
        }
        Ok(Value::F64(x))
    }
}

/// Two binary latents and a three-way categorical observation with a fixed
/// likelihood table; small enough to enumerate exactly.
#[derive(Clone, Debug)]
pub struct DiscreteModel {
    pub prior_a: [f64; 2],
    pub prior_b: [f64; 2],
    /// Observation probabilities indexed by `2 * a + b`.
    pub likelihood: [[f64; 3]; 4],
}

impl Default for DiscreteModel {
    fn default() -> Self {
        Self {
            prior_a: [0.4, 0.6],
            prior_b: [0.7, 0.3],
            likelihood: [
                [0.7, 0.2, 0.1],
                [0.1, 0.6, 0.3],
                [0.2, 0.2, 0.6],
                [0.3, 0.4, 0.3],
            ],
        }
    }
}

pub const DISCRETE_A: &str = "discrete/a/Categorical";
pub const DISCRETE_B: &str = "discrete/b/Categorical";

impl Model for DiscreteModel {
    fn name(&self) -> &str {
        "discrete"
    }

    fn run(
        &self,
        ctx: &mut dyn SimContext,
        observation: Option<&Value>,
    ) -> Result<Value, SimError> {
        let a = ctx.sample_index(
            &["discrete", "a"],
            Distribution::Categorical {
                probs: self.prior_a.to_vec(),
            },
            true,
        )?;
        let b = ctx.sample_index(
            &["discrete", "b"],
            Distribution::Categorical {
                probs: self.prior_b.to_vec(),
            },
            true,
        )?;
        let y = match observation {
            None => None,
            Some(Value::I64(k)) => Some(Value::I64(*k)),
            Some(other) => {
                return Err(SimError::Model(format!(
                    "expected class index, got {other}"
                )))
            }
        };
        ctx.observe(
            &["discrete", "y"],
            Distribution::Categorical {
                probs: self.likelihood[2 * a + b].to_vec(),
            },
            y,
        )?;
        Ok(Value::I64((2 * a + b) as i64))
    }
}

/// Desk-scale particle cascade: a decay channel fixes how many particles are
/// produced and how deep their showers sit; each particle carries an energy and
/// a small transverse jitter drawn by rejection inside the unit disc; a Poisson
/// number of soft photons adds low-energy clutter. The energies are deposited
/// onto a voxel grid through 3D Gaussian shower profiles and observed with
/// per-voxel Gaussian noise.
#[derive(Clone, Debug)]
pub struct CascadeConfig {
    pub channel_probs: Vec<f64>,
    pub channel_particles: Vec<usize>,
    /// Shower depth (z centre, voxel units) per channel.
    pub channel_depth: Vec<f64>,
    /// Uniform energy prior bounds per channel.
    pub energy_bounds: Vec<(f64, f64)>,
    /// (x, y) shower axis of each particle slot, voxel units.
    pub particle_positions: Vec<(f64, f64)>,
    /// Jitter draws are redrawn until they fall within this radius.
    pub rejection_radius: f64,
    pub jitter_scale: f64,
    pub photon_rate: f64,
    pub photon_energy: (f64, f64),
    /// Grid dims (depth, height, width).
    pub grid: [usize; 3],
    /// Shower widths along (x, y, z).
    pub shower_width: [f64; 3],
    pub noise_std: f64,
}

impl Default for CascadeConfig {
    fn default() -> Self {
        Self {
            channel_probs: vec![0.35, 0.25, 0.2, 0.12, 0.08],
            channel_particles: vec![1, 2, 2, 3, 3],
            channel_depth: vec![1.0, 1.0, 2.3, 1.0, 2.3],
            energy_bounds: vec![(1.0, 8.0), (1.0, 8.0), (1.0, 8.0), (1.0, 9.0), (1.0, 9.0)],
            particle_positions: vec![(2.0, 2.0), (5.5, 5.0), (2.0, 5.5)],
            rejection_radius: 1.0,
            jitter_scale: 0.02,
            photon_rate: 0.8,
            photon_energy: (0.01, 0.05),
            grid: [4, 8, 8],
            shower_width: [0.9, 0.9, 0.7],
            noise_std: 0.05,
        }
    }
}

impl CascadeConfig {
    pub fn validate(&self) -> Result<(), String> {
        let n = self.channel_probs.len();
        Distribution::Categorical {
            probs: self.channel_probs.clone(),
        }
        .validate()
        .map_err(|e| e.to_string())?;
        if self.channel_particles.len() != n
            || self.channel_depth.len() != n
            || self.energy_bounds.len() != n
        {
            return Err("per-channel tables must match the channel count".into());
        }
        if self.energy_bounds.iter().any(|(lo, hi)| !(lo < hi))
            || self.photon_energy.0 >= self.photon_energy.1
        {
            return Err("energy bounds must be ordered".into());
        }
        let max_particles = self.channel_particles.iter().copied().max().unwrap_or(0);
        if self.particle_positions.len() < max_particles {
            return Err("not enough particle positions".into());
        }
        if !(self.noise_std > 0.0) || !(self.rejection_radius > 0.0) {
            return Err("noise std and rejection radius must be positive".into());
        }
        Ok(())
    }

    pub fn voxels(&self) -> usize {
        self.grid.iter().product()
    }

    /// Adds `energy` spread over the grid by a normalized 3D Gaussian profile.
    pub fn deposit_into(&self, out: &mut [f64], energy: f64, center: [f64; 3]) {
        let [d, h, w] = self.grid;
        let mut weights = Vec::with_capacity(out.len());
        let mut total = 0.0;
        for z in 0..d {
            for y in 0..h {
                for x in 0..w {
                    let p = mvn3_diag_pdf(
                        [x as f64 + 0.5, y as f64 + 0.5, z as f64 + 0.5],
                        center,
                        self.shower_width,
                    );
                    weights.push(p);
                    total += p;
                }
            }
        }
        if total > 0.0 {
            for (o, p) in out.iter_mut().zip(weights) {
                *o += energy * p / total;
            }
        }
    }
}

pub const CASCADE_CHANNEL: &str = "cascade/decay/channel/Categorical";
pub const CASCADE_ENERGY: &str = "cascade/particle/energy/Uniform";

#[derive(Clone, Debug, Default)]
pub struct CascadeModel {
    pub config: CascadeConfig,
}

impl CascadeModel {
    pub fn new(config: CascadeConfig) -> Result<Self, String> {
        config.validate()?;
        Ok(Self { config })
    }

    /// Recomputes the noise-free deposit from the latents stored in `trace`.
    pub fn deposit_from_trace(&self, trace: &Trace) -> Option<Vec<f64>> {
        let cfg = &self.config;
        let get = |full: &str| -> Vec<f64> {
            trace
                .latents()
                .filter(|e| &*e.address.full == full)
                .filter_map(|e| e.value.as_f64())
                .collect()
        };
        let channel = *get(CASCADE_CHANNEL).first()? as usize;
        let energies = get(CASCADE_ENERGY);
        let jx = get("cascade/particle/jitter_x/Uniform");
        let jy = get("cascade/particle/jitter_y/Uniform");
        let pe = get("cascade/radiation/energy/Uniform");
        let px = get("cascade/radiation/x/Uniform");
        let py = get("cascade/radiation/y/Uniform");
        let mut out = vec![0.0; cfg.voxels()];
        for (k, e) in energies.iter().enumerate() {
            let (x, y) = cfg.particle_positions[k];
            let c = [
                x + cfg.jitter_scale * jx[k],
                y + cfg.jitter_scale * jy[k],
                cfg.channel_depth[channel],
            ];
            cfg.deposit_into(&mut out, *e, c);
        }
        for i in 0..pe.len() {
            cfg.deposit_into(&mut out, pe[i], [px[i], py[i], 0.5]);
        }
        Some(out)
    }
}

impl Model for CascadeModel {
    fn name(&self) -> &str {
        "cascade"
    }

    fn run(
        &self,
        ctx: &mut dyn SimContext,
        observation: Option<&Value>,
    ) -> Result<Value, SimError> {
        let cfg = &self.config;
        let channel = ctx.sample_index(
            &["cascade", "decay", "channel"],
            Distribution::Categorical {
                probs: cfg.channel_probs.clone(),
            },
            true,
        )?;
        let (lo, hi) = cfg.energy_bounds[channel];
        let mut deposit = vec![0.0; cfg.voxels()];
        for k in 0..cfg.channel_particles[channel] {
            let energy = ctx.sample_f64(
                &["cascade", "particle", "energy"],
                Distribution::Uniform { low: lo, high: hi },
                true,
                false,
            )?;
            let r = cfg.rejection_radius;
            let (jx, jy) = loop {
                let jx = ctx.sample_f64(
                    &["cascade", "particle", "jitter_x"],
                    Distribution::Uniform { low: -r, high: r },
                    false,
                    true,
                )?;
                let jy = ctx.sample_f64(
                    &["cascade", "particle", "jitter_y"],
                    Distribution::Uniform { low: -r, high: r },
                    false,
                    true,
                )?;
                if jx * jx + jy * jy <= r * r {
                    break (jx, jy);
                }
            };
            let (x, y) = cfg.particle_positions[k];
            cfg.deposit_into(
                &mut deposit,
                energy,
                [
                    x + cfg.jitter_scale * jx,
                    y + cfg.jitter_scale * jy,
                    cfg.channel_depth[channel],
                ],
            );
        }
        let photons = ctx.sample_index(
            &["cascade", "radiation", "count"],
            Distribution::Poisson {
                rate: cfg.photon_rate,
            },
            false,
        )?;
        let [_, h, w] = cfg.grid;
        for _ in 0..photons {
            let e = ctx.sample_f64(
                &["cascade", "radiation", "energy"],
                Distribution::Uniform {
                    low: cfg.photon_energy.0,
                    high: cfg.photon_energy.1,
                },
                false,
                false,
            )?;
            let x = ctx.sample_f64(
                &["cascade", "radiation", "x"],
                Distribution::Uniform {
                    low: 0.0,
                    high: w as f64,
                },
                false,
                false,
            )?;
            let y = ctx.sample_f64(
                &["cascade", "radiation", "y"],
                Distribution::Uniform {
                    low: 0.0,
                    high: h as f64,
                },
                false,
                false,
            )?;
            cfg.deposit_into(&mut deposit, e, [x, y, 0.5]);
        }
        let observed = match observation {
            None => None,
            Some(Value::Tensor(t)) if t.data.len() == deposit.len() => {
                Some(Value::Tensor(t.clone()))
            }
            Some(other) => {
                return Err(SimError::Model(format!(
                    "expected {}-voxel tensor observation, got {other}",
                    deposit.len()
                )))
            }
        };
        let n = deposit.len();
        ctx.observe(
            &["cascade", "detector"],
            Distribution::MultivariateNormalDiag {
                means: deposit,
                stds: vec![cfg.noise_std; n],
            },
            observed,
        )?;
        Ok(Value::I64(channel as i64))
    }
}

/// Reshapes a flat cascade observation into the grid tensor.
pub fn cascade_observation(cfg: &CascadeConfig, data: Vec<f64>) -> Value {
    Value::Tensor(TensorValue {
        shape: cfg.grid.iter().map(|&d| d as u32).collect(),
        data,
    })
}

/// Looks up a built-in model by name.
pub fn builtin(name: &str) -> Option<Arc<dyn Model>> {
    match name {
        "conjugate" => Some(Arc::new(ConjugateGaussian::default())),
        "discrete" => Some(Arc::new(DiscreteModel::default())),
        "cascade" => Some(Arc::new(CascadeModel::default())),
        _ => None,
    }
}

pub const BUILTIN_MODELS: [&str; 3] = ["conjugate", "discrete", "cascade"];
