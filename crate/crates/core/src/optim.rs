//! Adam, Adam-LARC and learning-rate schedules.

use crate::config::{ConfigError, KeyValues};
use crate::tensor::{Grads, ParamId, ParamStore};

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum OptimizerKind {
    Adam,
    /// Adam whose per-layer step size is clipped by the LARC trust ratio.
    AdamLarc {
        eta: f64,
    },
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            kind: OptimizerKind::Adam,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

pub const DEFAULT_LARC_ETA: f64 = 1e-3;

impl OptimizerConfig {
    pub fn adam_larc() -> Self {
        Self {
            kind: OptimizerKind::AdamLarc {
                eta: DEFAULT_LARC_ETA,
            },
            ..Self::default()
        }
    }

    /// Keys `optimizer` (adam | adam_larc), `larc_eta`, `beta1`, `beta2`, `eps`.
    pub fn from_kv(kv: &KeyValues) -> Result<Self, ConfigError> {
        let d = Self::default();
        let eta = kv.get_or("larc_eta", DEFAULT_LARC_ETA)?;
        let kind = match kv.raw("optimizer").unwrap_or("adam") {
            "adam" => OptimizerKind::Adam,
            "adam_larc" => OptimizerKind::AdamLarc { eta },
            other => {
                return Err(ConfigError::Value {
                    key: "optimizer".into(),
                    value: other.into(),
                })
            }
        };
        Ok(Self {
            kind,
            beta1: kv.get_or("beta1", d.beta1)?,
            beta2: kv.get_or("beta2", d.beta2)?,
            eps: kv.get_or("eps", d.eps)?,
        })
    }
}

pub const OPTIMIZER_KEYS: [&str; 5] = ["optimizer", "larc_eta", "beta1", "beta2", "eps"];

/// LARC step size in clipping mode: the global rate, lowered to
/// `eta * |w| / |g|` when that is smaller. Zero norms leave `lr` unchanged.
pub fn larc_lr(lr: f64, eta: f64, w_norm: f64, g_norm: f64) -> f64 {
    if w_norm == 0.0 || g_norm == 0.0 {
        lr
    } else {
        lr.min(eta * w_norm / g_norm)
    }
}

#[derive(Clone, Debug, Default)]
struct Moments {
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

#[derive(Clone, Debug)]
pub struct Optimizer {
    pub config: OptimizerConfig,
    state: Vec<Moments>,
}

impl Optimizer {
    pub fn new(config: OptimizerConfig) -> Self {
        Self {
            config,
            state: Vec::new(),
        }
    }

    /// Step count of one parameter.
    pub fn steps(&self, id: ParamId) -> u64 {
        self.state.get(id).map_or(0, |m| m.t)
    }

    /// Updates every parameter that has a gradient in `grads`.
    pub fn step(&mut self, params: &mut ParamStore, grads: &Grads, lr: f64) {
        let OptimizerConfig {
            kind,
            beta1,
            beta2,
            eps,
        } = self.config;
        if self.state.len() < params.len() {
            self.state.resize_with(params.len(), Moments::default);
        }
        for (&id, g) in &grads.map {
            let w = params.get_mut(id);
            assert_eq!(w.shape, g.shape, "gradient shape for {id:?}");
            let st = &mut self.state[id];
            if st.m.is_empty() {
                st.m = vec![0.0; g.numel()];
                st.v = vec![0.0; g.numel()];
            }
            st.t += 1;
            let lr = match kind {
                OptimizerKind::Adam => lr,
                OptimizerKind::AdamLarc { eta } => larc_lr(lr, eta, w.norm(), g.norm()),
            };
            let c1 = 1.0 - beta1.powi(st.t as i32);
            let c2 = 1.0 - beta2.powi(st.t as i32);
            for (((x, &gi), m), v) in w.data.iter_mut().zip(&g.data).zip(&mut st.m).zip(&mut st.v) {
                *m = beta1 * *m + (1.0 - beta1) * gi;
                *v = beta2 * *v + (1.0 - beta2) * gi * gi;
                *x -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Schedule {
    Constant(f64),
    /// Multiply by `gamma` at each milestone iteration.
    MultiStep {
        lr0: f64,
        milestones: Vec<u64>,
        gamma: f64,
    },
    /// `lr_final + (lr0 - lr_final) * (1 - t/T)^order`, held at `lr_final` past T.
    Poly {
        order: f64,
        lr0: f64,
        lr_final: f64,
        total: u64,
    },
}

impl Schedule {
    pub fn lr(&self, t: u64) -> f64 {
        match self {
            Schedule::Constant(lr) => *lr,
            Schedule::MultiStep {
                lr0,
                milestones,
                gamma,
            } => lr0 * gamma.powi(milestones.iter().filter(|m| t >= **m).count() as i32),
            Schedule::Poly {
                order,
                lr0,
                lr_final,
                total,
            } => {
                let frac = if *total == 0 {
                    1.0
                } else {
                    (t as f64 / *total as f64).min(1.0)
                };
                lr_final + (lr0 - lr_final) * (1.0 - frac).powf(*order)
            }
        }
    }

    /// Keys `schedule` (constant | multistep | poly), `lr`, `lr_final`,
    /// `poly_order`, `milestones`, `gamma`; `iterations` bounds poly decay.
    pub fn from_kv(kv: &KeyValues) -> Result<Self, ConfigError> {
        let lr = kv.get_or("lr", 1e-3)?;
        Ok(match kv.raw("schedule").unwrap_or("constant") {
            "constant" => Schedule::Constant(lr),
            "multistep" => Schedule::MultiStep {
                lr0: lr,
                milestones: kv.list("milestones")?.unwrap_or_default(),
                gamma: kv.get_or("gamma", 0.1)?,
            },
            "poly" => Schedule::Poly {
                order: kv.get_or("poly_order", 2.0)?,
                lr0: lr,
                lr_final: kv.get_or("lr_final", 0.0)?,
                total: kv.get_or("iterations", 1000)?,
            },
            other => {
                return Err(ConfigError::Value {
                    key: "schedule".into(),
                    value: other.into(),
                })
            }
        })
    }
}

pub const SCHEDULE_KEYS: [&str; 6] = [
    "schedule",
    "lr",
    "lr_final",
    "poly_order",
    "milestones",
    "gamma",
];

pub const DEFAULT_LR_SCALING_EXPONENT: f64 = 0.5;

/// Learning rate for `workers` replicas given the single-worker rate.
pub fn scale_lr(lr1: f64, workers: usize, alpha: f64) -> f64 {
    lr1 * (workers as f64).powf(alpha)
}
