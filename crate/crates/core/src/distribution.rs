//! Parameterized probability distributions shared by the wire format, the
//! trace model and the inference engines.

use rand::Rng;
use rand_distr::{Distribution as _, Poisson as PoissonSampler, StandardNormal};
use statrs::function::erf::{erfc, erfc_inv};
use statrs::function::gamma::ln_gamma;

use crate::value::{TensorValue, Value};

pub const LN_SQRT_2PI: f64 = 0.918_938_533_204_672_7;

/// Tag byte used on the wire and in trace records.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum DistTag {
    Uniform = 1,
    Normal = 2,
    TruncatedNormal = 3,
    Categorical = 4,
    Poisson = 5,
    MultivariateNormalDiag = 6,
}

impl DistTag {
    pub fn from_byte(b: u8) -> Option<Self> {
        Some(match b {
            1 => DistTag::Uniform,
            2 => DistTag::Normal,
            3 => DistTag::TruncatedNormal,
            4 => DistTag::Categorical,
            5 => DistTag::Poisson,
            6 => DistTag::MultivariateNormalDiag,
            _ => return None,
        })
    }

    pub fn name(self) -> &'static str {
        match self {
            DistTag::Uniform => "Uniform",
            DistTag::Normal => "Normal",
            DistTag::TruncatedNormal => "TruncatedNormal",
            DistTag::Categorical => "Categorical",
            DistTag::Poisson => "Poisson",
            DistTag::MultivariateNormalDiag => "MultivariateNormalDiag",
        }
    }
}

#[derive(Clone, Debug, PartialEq, thiserror::Error)]
#[error("invalid distribution parameter: {field}")]
pub struct InvalidDistribution {
    pub field: &'static str,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Distribution {
    Uniform {
        low: f64,
        high: f64,
    },
    Normal {
        mean: f64,
        std: f64,
    },
    TruncatedNormal {
        mean: f64,
        std: f64,
        low: f64,
        high: f64,
    },
    Categorical {
        probs: Vec<f64>,
    },
    Poisson {
        rate: f64,
    },
    MultivariateNormalDiag {
        means: Vec<f64>,
        stds: Vec<f64>,
    },
}

fn check(ok: bool, field: &'static str) -> Result<(), InvalidDistribution> {
    if ok {
        Ok(())
    } else {
        Err(InvalidDistribution { field })
    }
}

impl Distribution {
    pub fn tag(&self) -> DistTag {
        match self {
            Distribution::Uniform { .. } => DistTag::Uniform,
            Distribution::Normal { .. } => DistTag::Normal,
            Distribution::TruncatedNormal { .. } => DistTag::TruncatedNormal,
            Distribution::Categorical { .. } => DistTag::Categorical,
            Distribution::Poisson { .. } => DistTag::Poisson,
            Distribution::MultivariateNormalDiag { .. } => DistTag::MultivariateNormalDiag,
        }
    }

    pub fn validate(&self) -> Result<(), InvalidDistribution> {
        match self {
            Distribution::Uniform { low, high } => {
                check(low.is_finite() && high.is_finite(), "bounds")?;
                check(low < high, "bounds")
            }
            Distribution::Normal { mean, std } => {
                check(mean.is_finite(), "mean")?;
                check(*std > 0.0 && std.is_finite(), "std")
            }
            Distribution::TruncatedNormal {
                mean,
                std,
                low,
                high,
            } => {
                check(mean.is_finite(), "mean")?;
                check(*std > 0.0 && std.is_finite(), "std")?;
                check(!low.is_nan() && !high.is_nan() && low < high, "bounds")
            }
            Distribution::Categorical { probs } => {
                check(!probs.is_empty(), "probabilities")?;
                check(
                    probs.iter().all(|p| p.is_finite() && *p >= 0.0),
                    "probabilities",
                )?;
                let s: f64 = probs.iter().sum();
                check((s - 1.0).abs() <= 1e-9, "probabilities")
            }
            Distribution::Poisson { rate } => check(*rate > 0.0 && rate.is_finite(), "rate"),
            Distribution::MultivariateNormalDiag { means, stds } => {
                check(means.len() == stds.len(), "stds")?;
                check(means.iter().all(|m| m.is_finite()), "means")?;
                check(stds.iter().all(|s| *s > 0.0 && s.is_finite()), "stds")
            }
        }
    }

    /// Flat parameter list in wire order.
    pub fn params(&self) -> Vec<f64> {
        match self {
            Distribution::Uniform { low, high } => vec![*low, *high],
            Distribution::Normal { mean, std } => vec![*mean, *std],
            Distribution::TruncatedNormal {
                mean,
                std,
                low,
                high,
            } => vec![*mean, *std, *low, *high],
            Distribution::Categorical { probs } => probs.clone(),
            Distribution::Poisson { rate } => vec![*rate],
            Distribution::MultivariateNormalDiag { means, stds } => {
                let mut v = means.clone();
                v.extend_from_slice(stds);
                v
            }
        }
    }

    /// Rebuilds a distribution from its tag and flat parameter list. Returns
    /// `None` when the parameter count does not fit the tag.
    pub fn from_params(tag: DistTag, p: &[f64]) -> Option<Self> {
        Some(match tag {
            DistTag::Uniform if p.len() == 2 => Distribution::Uniform {
                low: p[0],
                high: p[1],
            },
            DistTag::Normal if p.len() == 2 => Distribution::Normal {
                mean: p[0],
                std: p[1],
            },
            DistTag::TruncatedNormal if p.len() == 4 => Distribution::TruncatedNormal {
                mean: p[0],
                std: p[1],
                low: p[2],
                high: p[3],
            },
            DistTag::Categorical if !p.is_empty() => {
                Distribution::Categorical { probs: p.to_vec() }
            }
            DistTag::Poisson if p.len() == 1 => Distribution::Poisson { rate: p[0] },
            DistTag::MultivariateNormalDiag if p.len() % 2 == 0 => {
                let k = p.len() / 2;
                Distribution::MultivariateNormalDiag {
                    means: p[..k].to_vec(),
                    stds: p[k..].to_vec(),
                }
            }
            _ => return None,
        })
    }

    pub fn is_continuous_scalar(&self) -> bool {
        matches!(
            self,
            Distribution::Uniform { .. }
                | Distribution::Normal { .. }
                | Distribution::TruncatedNormal { .. }
        )
    }

    /// Support of a scalar continuous distribution.
    pub fn support(&self) -> Option<(f64, f64)> {
        match self {
            Distribution::Uniform { low, high } => Some((*low, *high)),
            Distribution::Normal { .. } => Some((f64::NEG_INFINITY, f64::INFINITY)),
            Distribution::TruncatedNormal { low, high, .. } => Some((*low, *high)),
            _ => None,
        }
    }

    /// Location and scale used to normalize scalar values.
    pub fn loc_scale(&self) -> (f64, f64) {
        match self {
            Distribution::Uniform { low, high } => {
                ((low + high) / 2.0, (high - low) / 12f64.sqrt())
            }
            Distribution::Normal { mean, std } => (*mean, *std),
            Distribution::TruncatedNormal {
                mean,
                std,
                low,
                high,
            } => {
                if low.is_finite() && high.is_finite() {
                    ((low + high) / 2.0, (high - low) / 12f64.sqrt())
                } else {
                    (*mean, *std)
                }
            }
            Distribution::Categorical { probs } => (0.0, probs.len().max(1) as f64),
            Distribution::Poisson { rate } => (*rate, rate.sqrt()),
            Distribution::MultivariateNormalDiag { .. } => (0.0, 1.0),
        }
    }

    /// Prior standard deviation of a scalar distribution.
    pub fn std_dev(&self) -> f64 {
        match self {
            Distribution::Uniform { low, high } => (high - low) / 12f64.sqrt(),
            Distribution::Normal { std, .. } => *std,
            Distribution::TruncatedNormal {
                mean,
                std,
                low,
                high,
            } => truncated_normal_moments(*mean, *std, *low, *high).1.sqrt(),
            Distribution::Categorical { probs } => {
                let m: f64 = probs.iter().enumerate().map(|(k, p)| k as f64 * p).sum();
                let v: f64 = probs
                    .iter()
                    .enumerate()
                    .map(|(k, p)| (k as f64 - m).powi(2) * p)
                    .sum();
                v.sqrt()
            }
            Distribution::Poisson { rate } => rate.sqrt(),
            Distribution::MultivariateNormalDiag { .. } => f64::NAN,
        }
    }

    pub fn log_density(&self, value: &Value) -> f64 {
        match self {
            Distribution::Uniform { low, high } => match value.as_f64() {
                Some(x) if matches!(value, Value::F64(_)) && x >= *low && x <= *high => {
                    -(high - low).ln()
                }
                _ => f64::NEG_INFINITY,
            },
            Distribution::Normal { mean, std } => match value {
                Value::F64(x) => normal_log_pdf(*x, *mean, *std),
                _ => f64::NEG_INFINITY,
            },
            Distribution::TruncatedNormal {
                mean,
                std,
                low,
                high,
            } => match value {
                Value::F64(x) => truncated_normal_log_pdf(*x, *mean, *std, *low, *high),
                _ => f64::NEG_INFINITY,
            },
            Distribution::Categorical { probs } => match value {
                Value::I64(k) if *k >= 0 && (*k as usize) < probs.len() => probs[*k as usize].ln(),
                _ => f64::NEG_INFINITY,
            },
            Distribution::Poisson { rate } => match value {
                Value::I64(k) if *k >= 0 => {
                    let k = *k as f64;
                    k * rate.ln() - rate - ln_gamma(k + 1.0)
                }
                _ => f64::NEG_INFINITY,
            },
            Distribution::MultivariateNormalDiag { means, stds } => match value {
                Value::Tensor(t) if t.data.len() == means.len() => {
                    mvn_diag_log_pdf(&t.data, means, stds)
                }
                _ => f64::NEG_INFINITY,
            },
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Value {
        match self {
            Distribution::Uniform { low, high } => {
                let u: f64 = rng.random();
                Value::F64(low + (high - low) * u)
            }
            Distribution::Normal { mean, std } => {
                let z: f64 = StandardNormal.sample(rng);
                Value::F64(mean + std * z)
            }
            Distribution::TruncatedNormal {
                mean,
                std,
                low,
                high,
            } => Value::F64(sample_truncated_normal(rng, *mean, *std, *low, *high)),
            Distribution::Categorical { probs } => {
                Value::I64(sample_categorical(rng, probs) as i64)
            }
            Distribution::Poisson { rate } => {
                let k: f64 = PoissonSampler::new(*rate)
                    .expect("validated rate")
                    .sample(rng);
                Value::I64(k as i64)
            }
            Distribution::MultivariateNormalDiag { means, stds } => {
                let data = means
                    .iter()
                    .zip(stds)
                    .map(|(m, s)| {
                        let z: f64 = StandardNormal.sample(rng);
                        m + s * z
                    })
                    .collect();
                Value::Tensor(TensorValue::vector(data))
            }
        }
    }
}

/// Mixture of normals truncated to a common support.
#[derive(Clone, Debug, PartialEq)]
pub struct TruncatedNormalMixture {
    pub weights: Vec<f64>,
    pub means: Vec<f64>,
    pub stds: Vec<f64>,
    pub low: f64,
    pub high: f64,
}

impl TruncatedNormalMixture {
    pub fn log_density(&self, x: f64) -> f64 {
        if x < self.low || x > self.high || x.is_nan() {
            return f64::NEG_INFINITY;
        }
        let terms: Vec<f64> = self
            .weights
            .iter()
            .zip(&self.means)
            .zip(&self.stds)
            .map(|((w, m), s)| w.ln() + truncated_normal_log_pdf(x, *m, *s, self.low, self.high))
            .collect();
        log_sum_exp(&terms)
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        let k = sample_categorical(rng, &self.weights);
        sample_truncated_normal(rng, self.means[k], self.stds[k], self.low, self.high)
    }
}

/// Distribution a controller draws from in place of the prior.
#[derive(Clone, Debug, PartialEq)]
pub enum Proposal {
    Dist(Distribution),
    Mixture(TruncatedNormalMixture),
}

impl Proposal {
    pub fn log_density(&self, value: &Value) -> f64 {
        match self {
            Proposal::Dist(d) => d.log_density(value),
            Proposal::Mixture(m) => match value {
                Value::F64(x) => m.log_density(*x),
                _ => f64::NEG_INFINITY,
            },
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Value {
        match self {
            Proposal::Dist(d) => d.sample(rng),
            Proposal::Mixture(m) => Value::F64(m.sample(rng)),
        }
    }
}

pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    if m == f64::INFINITY {
        return m;
    }
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

pub fn normal_log_pdf(x: f64, mean: f64, std: f64) -> f64 {
    let z = (x - mean) / std;
    -0.5 * z * z - std.ln() - LN_SQRT_2PI
}

/// Standard normal CDF.
pub fn std_normal_cdf(z: f64) -> f64 {
    0.5 * erfc(-z / std::f64::consts::SQRT_2)
}

/// Standard normal density.
pub fn std_normal_pdf(z: f64) -> f64 {
    (-0.5 * z * z - LN_SQRT_2PI).exp()
}

/// Inverse of the standard normal CDF.
pub fn std_normal_quantile(p: f64) -> f64 {
    -std::f64::consts::SQRT_2 * erfc_inv(2.0 * p)
}

/// `ln(Φ(b) - Φ(a))` for standardized bounds `a < b`, evaluated in whichever
/// tail keeps the difference well conditioned.
pub fn log_std_normal_mass(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY && b == f64::INFINITY {
        return 0.0;
    }
    if a > 0.0 {
        // Upper tail: Φ(b)-Φ(a) = Q(a)-Q(b)
        let qa = 0.5 * erfc(a / std::f64::consts::SQRT_2);
        let qb = 0.5 * erfc(b / std::f64::consts::SQRT_2);
        (qa - qb).ln()
    } else {
        (std_normal_cdf(b) - std_normal_cdf(a)).ln()
    }
}

pub fn truncated_normal_log_pdf(x: f64, mean: f64, std: f64, low: f64, high: f64) -> f64 {
    if x < low || x > high || x.is_nan() {
        return f64::NEG_INFINITY;
    }
    normal_log_pdf(x, mean, std) - log_std_normal_mass((low - mean) / std, (high - mean) / std)
}

pub fn sample_truncated_normal<R: Rng + ?Sized>(
    rng: &mut R,
    mean: f64,
    std: f64,
    low: f64,
    high: f64,
) -> f64 {
    let a = (low - mean) / std;
    let b = (high - mean) / std;
    // Invert in the lower tail for accuracy; reflect when the interval sits above the mean.
    let (lo, hi, flip) = if a > 0.0 {
        (-b, -a, true)
    } else {
        (a, b, false)
    };
    let plo = std_normal_cdf(lo);
    let phi = std_normal_cdf(hi);
    let u: f64 = rng.random();
    let p = plo + u * (phi - plo);
    let mut z = std_normal_quantile(p.clamp(f64::MIN_POSITIVE, 1.0 - f64::EPSILON / 2.0));
    if !z.is_finite() {
        z = if p <= plo { lo } else { hi };
    }
    z = z.clamp(lo, hi);
    if flip {
        z = -z;
    }
    (mean + std * z).clamp(low, high)
}

/// Mean and variance of a truncated normal.
pub fn truncated_normal_moments(mean: f64, std: f64, low: f64, high: f64) -> (f64, f64) {
    let a = (low - mean) / std;
    let b = (high - mean) / std;
    let z = log_std_normal_mass(a, b).exp();
    let pa = if a.is_finite() {
        std_normal_pdf(a)
    } else {
        0.0
    };
    let pb = if b.is_finite() {
        std_normal_pdf(b)
    } else {
        0.0
    };
    let apa = if a.is_finite() { a * pa } else { 0.0 };
    let bpb = if b.is_finite() { b * pb } else { 0.0 };
    let m = mean + std * (pa - pb) / z;
    let v = std * std * (1.0 + (apa - bpb) / z - ((pa - pb) / z).powi(2));
    (m, v)
}

pub fn sample_categorical<R: Rng + ?Sized>(rng: &mut R, probs: &[f64]) -> usize {
    let total: f64 = probs.iter().sum();
    let u: f64 = rng.random::<f64>() * total;
    let mut acc = 0.0;
    for (k, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return k;
        }
    }
    probs.iter().rposition(|p| *p > 0.0).unwrap_or(0)
}

/// Diagonal multivariate normal log-density, accumulated elementwise.
pub fn mvn_diag_log_pdf(x: &[f64], means: &[f64], stds: &[f64]) -> f64 {
    let mut acc = 0.0;
    for ((xi, m), s) in x.iter().zip(means).zip(stds) {
        let z = (xi - m) / s;
        acc += -0.5 * z * z - s.ln();
    }
    acc - LN_SQRT_2PI * x.len() as f64
}

/// Density of a three-dimensional normal with diagonal covariance, written out
/// in scalar form.
#[inline]
pub fn mvn3_diag_pdf(x: [f64; 3], mean: [f64; 3], std: [f64; 3]) -> f64 {
    let z0 = (x[0] - mean[0]) / std[0];
    let z1 = (x[1] - mean[1]) / std[1];
    let z2 = (x[2] - mean[2]) / std[2];
    let norm = (2.0 * std::f64::consts::PI).powf(1.5) * std[0] * std[1] * std[2];
    (-0.5 * (z0 * z0 + z1 * z1 + z2 * z2)).exp() / norm
}
