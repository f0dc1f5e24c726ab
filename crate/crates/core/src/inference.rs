//! Posterior inference over traces: importance sampling, lightweight
//! Metropolis-Hastings, evidence estimation and MCMC diagnostics.

use std::collections::{BTreeMap, HashSet};
use std::io::{self, Write};
use std::sync::Arc;

use rand::Rng;
use rand_distr::{Distribution as _, Normal};

use crate::distribution::{log_sum_exp, normal_log_pdf, Distribution};
use crate::gateway::{
    execute, Endpoint, GatewayError, InProcessEndpoint, ProposalFactory, ReplayMap, SamplingPolicy,
};
use crate::rng::{derive_seed, seeded};
use crate::trace::{Address, AddressDictionary, Trace, TraceEntry};
use crate::value::Value;

#[derive(Debug, thiserror::Error)]
pub enum InferenceError {
    #[error("all importance weights are degenerate (ESS {0})")]
    DegenerateWeights(f64),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
}

/// ESS at or below this counts as degenerate.
pub const DEGENERATE_ESS: f64 = 1.0 + 1e-9;

pub fn log_mean_exp(xs: &[f64]) -> f64 {
    log_sum_exp(xs) - (xs.len() as f64).ln()
}

#[derive(Clone, Debug, Default)]
pub struct WeightedTraceSet {
    pub traces: Vec<Trace>,
    pub log_weights: Vec<f64>,
}

impl WeightedTraceSet {
    pub fn new(traces: Vec<Trace>, log_weights: Vec<f64>) -> Result<Self, InferenceError> {
        if traces.len() != log_weights.len() {
            return Err(InferenceError::InvalidArgument(format!(
                "{} traces but {} weights",
                traces.len(),
                log_weights.len()
            )));
        }
        Ok(Self {
            traces,
            log_weights,
        })
    }

    pub fn len(&self) -> usize {
        self.traces.len()
    }

    pub fn is_empty(&self) -> bool {
        self.traces.is_empty()
    }

    pub fn normalized_weights(&self) -> Vec<f64> {
        normalize_log_weights(&self.log_weights)
    }

    pub fn ess(&self) -> f64 {
        ess_from_log_weights(&self.log_weights)
    }

    /// Self-normalized estimate of E[f(x)].
    pub fn expectation(&self, f: impl Fn(&Trace) -> f64) -> f64 {
        self.traces
            .iter()
            .zip(self.normalized_weights())
            .filter(|(_, w)| *w > 0.0)
            .map(|(t, w)| w * f(t))
            .sum()
    }

    /// Weighted samples of the value at `address`, over traces that have it.
    pub fn marginal(&self, address: &Address) -> Vec<(f64, f64)> {
        self.traces
            .iter()
            .zip(self.normalized_weights())
            .filter_map(|(t, w)| Some((t.latent(address)?.value.as_f64()?, w)))
            .collect()
    }
}

pub fn normalize_log_weights(lw: &[f64]) -> Vec<f64> {
    let lse = log_sum_exp(lw);
    if !lse.is_finite() {
        return vec![0.0; lw.len()];
    }
    lw.iter().map(|l| (l - lse).exp()).collect()
}

/// Kish effective sample size, (Σw)² / Σw².
pub fn ess_from_log_weights(lw: &[f64]) -> f64 {
    let w = normalize_log_weights(lw);
    let s2: f64 = w.iter().map(|x| x * x).sum();
    if s2 > 0.0 {
        1.0 / s2
    } else {
        0.0
    }
}

/// Log-mean-exp of the weights: the importance estimate of log p(y).
pub fn estimate_log_evidence(ws: &WeightedTraceSet) -> Result<f64, InferenceError> {
    if ws.is_empty() {
        return Err(InferenceError::InvalidArgument("empty trace set".into()));
    }
    Ok(log_mean_exp(&ws.log_weights))
}

fn check_degenerate(ws: WeightedTraceSet) -> Result<WeightedTraceSet, InferenceError> {
    let ess = ws.ess();
    if ws.log_weights.iter().all(|w| *w == f64::NEG_INFINITY)
        || (ws.len() > 1 && ess < DEGENERATE_ESS)
    {
        return Err(InferenceError::DegenerateWeights(ess));
    }
    Ok(ws)
}

fn one_weighted_run(
    endpoint: &mut dyn Endpoint,
    observation: &Value,
    source: Option<&mut dyn crate::gateway::ProposalSource>,
    seed: u64,
    run: u64,
) -> Result<Option<(Trace, f64)>, GatewayError> {
    let mut policy = match source {
        Some(s) => SamplingPolicy::Guided(s),
        None => SamplingPolicy::Prior,
    };
    match execute(endpoint, Some(observation), &mut policy, seed, run) {
        Ok(x) => {
            let lw = x.trace.log_weight.unwrap_or(x.trace.log_likelihood);
            Ok(Some((x.trace, lw)))
        }
        Err(GatewayError::RunAborted(msg)) => {
            log::warn!("run {run} aborted and discarded: {msg}");
            Ok(None)
        }
        Err(e) => Err(e),
    }
}

/// Importance sampling with the prior (`proposal = None`) or a learned proposal.
pub fn importance_sample(
    endpoint: &mut dyn Endpoint,
    observation: &Value,
    n: usize,
    seed: u64,
    proposal: Option<&dyn ProposalFactory>,
) -> Result<WeightedTraceSet, InferenceError> {
    if n == 0 {
        return Err(InferenceError::InvalidArgument(
            "n must be at least 1".into(),
        ));
    }
    let mut source = proposal.map(|p| p.source());
    let mut ws = WeightedTraceSet::default();
    for i in 0..n as u64 {
        let src = source
            .as_mut()
            .map(|s| &mut **s as &mut dyn crate::gateway::ProposalSource);
        if let Some((t, lw)) = one_weighted_run(endpoint, observation, src, seed, i)? {
            ws.traces.push(t);
            ws.log_weights.push(lw);
        }
    }
    check_degenerate(ws)
}

/// [`importance_sample`] fanned out over cloned in-process endpoints. Results
/// are identical to the sequential version for the same seed.
pub fn importance_sample_parallel(
    endpoint: &InProcessEndpoint,
    observation: &Value,
    n: usize,
    seed: u64,
    proposal: Option<&dyn ProposalFactory>,
) -> Result<WeightedTraceSet, InferenceError> {
    use rayon::prelude::*;
    if n == 0 {
        return Err(InferenceError::InvalidArgument(
            "n must be at least 1".into(),
        ));
    }
    let runs: Vec<Option<(Trace, f64)>> = (0..n as u64)
        .into_par_iter()
        .map_init(
            || (endpoint.clone(), proposal.map(|p| p.source())),
            |(ep, src), i| {
                let src = src
                    .as_mut()
                    .map(|s| &mut **s as &mut dyn crate::gateway::ProposalSource);
                one_weighted_run(ep, observation, src, seed, i)
            },
        )
        .collect::<Result<_, _>>()?;
    let mut ws = WeightedTraceSet::default();
    for (t, lw) in runs.into_iter().flatten() {
        ws.traces.push(t);
        ws.log_weights.push(lw);
    }
    check_degenerate(ws)
}

/// Single-site proposal kernel for RMH.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum RmhKernel {
    /// Redraw the site from its prior.
    Prior,
    /// With probability `prior_prob` redraw from the prior, otherwise take a
    /// Gaussian step of `rw_scale` prior standard deviations. Non-scalar sites
    /// always use the prior.
    Mixture { prior_prob: f64, rw_scale: f64 },
    /// Keep the current value.
    Identity,
}

#[derive(Clone, Debug)]
pub struct RmhConfig {
    pub n_iters: usize,
    pub seed: u64,
    pub kernel: RmhKernel,
}

impl RmhConfig {
    pub fn new(n_iters: usize, seed: u64) -> Self {
        Self {
            n_iters,
            seed,
            kernel: RmhKernel::Prior,
        }
    }

    /// Burn-in applied when the caller gives none.
    pub fn default_burn_in(&self) -> usize {
        self.n_iters / 10
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct SiteStats {
    pub proposed: u64,
    pub accepted: u64,
}

#[derive(Clone, Debug, Default)]
pub struct MarkovChain {
    /// State after each iteration; observe entries are dropped.
    pub states: Vec<Arc<Trace>>,
    pub accepted: u64,
    /// Iterations lost to simulator failures.
    pub skipped: u64,
    /// Per full address of the chosen site.
    pub site_stats: BTreeMap<String, SiteStats>,
}

impl MarkovChain {
    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn acceptance_rate(&self) -> f64 {
        let proposed: u64 = self.site_stats.values().map(|s| s.proposed).sum();
        if proposed == 0 {
            return 0.0;
        }
        self.accepted as f64 / proposed as f64
    }

    pub fn after_burn_in(&self, burn_in: usize) -> &[Arc<Trace>] {
        &self.states[burn_in.min(self.states.len())..]
    }

    /// Values at `address` after burn-in, skipping states lacking it.
    pub fn values(&self, address: &Address, burn_in: usize) -> Vec<f64> {
        self.after_burn_in(burn_in)
            .iter()
            .filter_map(|t| t.latent(address)?.value.as_f64())
            .collect()
    }

    /// Unweighted view of the post-burn-in states, for comparison with IS.
    pub fn marginal(&self, address: &Address, burn_in: usize) -> Vec<(f64, f64)> {
        let states = self.after_burn_in(burn_in);
        let w = 1.0 / states.len().max(1) as f64;
        states
            .iter()
            .filter_map(|t| Some((t.latent(address)?.value.as_f64()?, w)))
            .collect()
    }
}

/// Draws the new value for `site` and returns it with the kernel's forward
/// log density. Reverse densities come from [`kernel_log_density`].
fn kernel_propose<R: Rng>(kernel: RmhKernel, site: &TraceEntry, rng: &mut R) -> Value {
    match kernel {
        RmhKernel::Identity => site.value.clone(),
        RmhKernel::Prior => site.distribution.sample(rng),
        RmhKernel::Mixture {
            prior_prob,
            rw_scale,
        } => {
            let x = match site.value {
                Value::F64(x) if site.distribution.is_continuous_scalar() => x,
                _ => return site.distribution.sample(rng),
            };
            if rng.random::<f64>() < prior_prob {
                site.distribution.sample(rng)
            } else {
                let step = Normal::new(0.0, rw_scale * site.distribution.std_dev())
                    .expect("positive prior std");
                Value::F64(x + step.sample(rng))
            }
        }
    }
}

/// log K(to | from) for a site with prior `prior`.
fn kernel_log_density(kernel: RmhKernel, prior: &Distribution, from: &Value, to: &Value) -> f64 {
    match kernel {
        RmhKernel::Identity => 0.0,
        RmhKernel::Prior => prior.log_density(to),
        RmhKernel::Mixture {
            prior_prob,
            rw_scale,
        } => match (from, to) {
            (Value::F64(a), Value::F64(b)) if prior.is_continuous_scalar() => {
                let lp = prior.log_density(to);
                let lw = normal_log_pdf(*b, *a, rw_scale * prior.std_dev());
                log_sum_exp(&[prior_prob.ln() + lp, (1.0 - prior_prob).ln() + lw])
            }
            _ => prior.log_density(to),
        },
    }
}

/// Lightweight single-site Metropolis-Hastings over execution traces.
pub fn rmh_run(
    endpoint: &mut dyn Endpoint,
    observation: &Value,
    config: &RmhConfig,
    init: Option<Trace>,
) -> Result<MarkovChain, InferenceError> {
    if config.n_iters == 0 {
        return Err(InferenceError::InvalidArgument(
            "n_iters must be at least 1".into(),
        ));
    }
    let mut run: u64 = 0;
    let mut attempt = |endpoint: &mut dyn Endpoint, policy: &mut SamplingPolicy<'_>| {
        let mut last = None;
        for _ in 0..2 {
            let r = run;
            run += 1;
            match execute(endpoint, Some(observation), policy, config.seed, r) {
                Ok(x) => return Ok(Ok(x)),
                Err(GatewayError::RunAborted(msg)) => last = Some(msg),
                Err(e) => return Err(e),
            }
        }
        Ok(Err(last.unwrap_or_default()))
    };

    let mut current = match init {
        Some(t) => t,
        None => match attempt(endpoint, &mut SamplingPolicy::Prior)? {
            Ok(x) => x.trace,
            Err(msg) => return Err(GatewayError::RunAborted(msg).into()),
        },
    };
    let mut rng = seeded(derive_seed(config.seed, 0x6b65_726e));
    let mut chain = MarkovChain::default();
    let mut state = Arc::new(current.latent_view());

    for _ in 0..config.n_iters {
        let sites: Vec<&TraceEntry> = current.controlled().collect();
        let mut map = ReplayMap::controlled(&current);
        let mut site_info = None;
        if !sites.is_empty() {
            let site = sites[rng.random_range(0..sites.len())];
            let proposed = kernel_propose(config.kernel, site, &mut rng);
            let fwd = kernel_log_density(config.kernel, &site.distribution, &site.value, &proposed);
            map.set(site.address.clone(), proposed.clone());
            site_info = Some((site.address.clone(), site.value.clone(), proposed, fwd));
        }
        let stats_key = site_info
            .as_ref()
            .map(|s| s.0.full.to_string())
            .unwrap_or_default();
        let mut policy = SamplingPolicy::Replay(map);
        let exec = match attempt(endpoint, &mut policy)? {
            Ok(x) => x,
            Err(msg) => {
                log::warn!("RMH iteration skipped after repeated simulator failure: {msg}");
                chain.skipped += 1;
                chain.states.push(state.clone());
                continue;
            }
        };
        chain
            .site_stats
            .entry(stats_key.clone())
            .or_default()
            .proposed += 1;
        let next = &exec.trace;

        let mut reused: HashSet<&Address> = HashSet::new();
        let mut fresh = 0.0;
        for (e, replayed) in next.entries.iter().zip(&exec.replayed) {
            if e.is_controlled() {
                if *replayed {
                    reused.insert(&e.address);
                } else {
                    fresh += e.log_prob;
                }
            }
        }
        let stale: f64 = current
            .controlled()
            .filter(|e| !reused.contains(&e.address))
            .map(|e| e.log_prob)
            .sum();

        let mut log_alpha = next.log_likelihood + next.log_prior_controlled()
            - current.log_likelihood
            - current.log_prior_controlled()
            + (sites.len() as f64).ln()
            - (next.controlled().count() as f64).ln()
            + stale
            - fresh;
        if let Some((addr, old, new, fwd)) = &site_info {
            match next.latent(addr) {
                Some(e) if reused.contains(addr) => {
                    log_alpha += kernel_log_density(config.kernel, &e.distribution, new, old) - fwd;
                }
                _ => log_alpha = f64::NEG_INFINITY,
            }
        } else {
            log_alpha = next.log_likelihood - current.log_likelihood;
        }

        let accept = log_alpha >= 0.0 || rng.random::<f64>().ln() < log_alpha;
        if accept && !log_alpha.is_nan() {
            chain.accepted += 1;
            chain
                .site_stats
                .get_mut(&stats_key)
                .expect("inserted above")
                .accepted += 1;
            current = exec.trace;
            state = Arc::new(current.latent_view());
        }
        chain.states.push(state.clone());
    }
    Ok(chain)
}

/// Independent chains on cloned endpoints; chain `c` uses seed
/// `derive_seed(config.seed, c)`.
pub fn rmh_chains(
    endpoint: &InProcessEndpoint,
    observation: &Value,
    config: &RmhConfig,
    n_chains: usize,
) -> Result<Vec<MarkovChain>, InferenceError> {
    use rayon::prelude::*;
    (0..n_chains as u64)
        .into_par_iter()
        .map(|c| {
            let mut ep = endpoint.clone();
            let cfg = RmhConfig {
                seed: derive_seed(config.seed, c),
                ..config.clone()
            };
            rmh_run(&mut ep, observation, &cfg, None)
        })
        .collect()
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Normalized autocorrelation for lags `0..=max_lag`. A zero-variance series
/// has ρ_k = 0 for every k ≥ 1.
pub fn autocorrelation(values: &[f64], max_lag: usize) -> Result<Vec<f64>, InferenceError> {
    if values.len() <= max_lag {
        return Err(InferenceError::InvalidArgument(format!(
            "chain length {} must exceed max_lag {max_lag}",
            values.len()
        )));
    }
    let m = mean(values);
    let d: Vec<f64> = values.iter().map(|v| v - m).collect();
    let c0: f64 = d.iter().map(|x| x * x).sum();
    let mut out = vec![1.0];
    for k in 1..=max_lag {
        if c0 == 0.0 {
            out.push(0.0);
            continue;
        }
        let ck: f64 = d[..d.len() - k]
            .iter()
            .zip(&d[k..])
            .map(|(a, b)| a * b)
            .sum();
        out.push(ck / c0);
    }
    Ok(out)
}

/// n / (1 + 2 Σ ρ_k), summing lags until the first negative ρ.
pub fn effective_sample_size(values: &[f64]) -> f64 {
    let n = values.len();
    if n < 2 {
        return n as f64;
    }
    let max_lag = (n - 1).min(n / 2 + 1);
    let acf = autocorrelation(values, max_lag).expect("max_lag < n");
    let tail: f64 = acf[1..].iter().take_while(|r| **r >= 0.0).sum();
    n as f64 / (1.0 + 2.0 * tail)
}

/// Potential scale reduction R̂ over equal-length chains.
pub fn gelman_rubin(chains: &[Vec<f64>]) -> Result<f64, InferenceError> {
    if chains.len() < 2 {
        return Err(InferenceError::InvalidArgument(
            "need at least two chains".into(),
        ));
    }
    let n = chains[0].len();
    if n < 10 || chains.iter().any(|c| c.len() != n) {
        return Err(InferenceError::InvalidArgument(
            "chains must share a length of at least 10".into(),
        ));
    }
    let m = chains.len() as f64;
    let nf = n as f64;
    let means: Vec<f64> = chains.iter().map(|c| mean(c)).collect();
    let w = chains
        .iter()
        .zip(&means)
        .map(|(c, mu)| c.iter().map(|x| (x - mu).powi(2)).sum::<f64>() / (nf - 1.0))
        .sum::<f64>()
        / m;
    let grand = mean(&means);
    let b = nf * means.iter().map(|mu| (mu - grand).powi(2)).sum::<f64>() / (m - 1.0);
    if w == 0.0 {
        return Ok(if b == 0.0 { 1.0 } else { f64::INFINITY });
    }
    Ok((((nf - 1.0) / nf * w + b / nf) / w).sqrt())
}

/// Wasserstein-1 distance between two weighted empirical distributions on the
/// line. Weights are renormalized.
pub fn wasserstein1(a: &[(f64, f64)], b: &[(f64, f64)]) -> f64 {
    let norm = |s: &[(f64, f64)]| {
        let tot: f64 = s.iter().map(|p| p.1).sum();
        let mut v: Vec<(f64, f64)> = s.iter().map(|&(x, w)| (x, w / tot)).collect();
        v.sort_by(|p, q| p.0.total_cmp(&q.0));
        v
    };
    let (a, b) = (norm(a), norm(b));
    let mut events: Vec<(f64, f64)> = a
        .iter()
        .map(|&(x, w)| (x, w))
        .chain(b.iter().map(|&(x, w)| (x, -w)))
        .collect();
    events.sort_by(|p, q| p.0.total_cmp(&q.0));
    let mut cdf_diff = 0.0;
    let mut dist = 0.0;
    for win in events.windows(2) {
        cdf_diff += win[0].1;
        dist += cdf_diff.abs() * (win[1].0 - win[0].0);
    }
    dist
}

/// Weighted histogram with equal-width bins over `[low, high)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Histogram {
    pub low: f64,
    pub high: f64,
    pub mass: Vec<f64>,
}

impl Histogram {
    pub fn new(samples: &[(f64, f64)], bins: usize, low: f64, high: f64) -> Self {
        let mut mass = vec![0.0; bins.max(1)];
        let width = (high - low) / mass.len() as f64;
        for &(x, w) in samples {
            if x >= low && x < high {
                let k = (((x - low) / width) as usize).min(mass.len() - 1);
                mass[k] += w;
            }
        }
        Self { low, high, mass }
    }

    pub fn write_tsv(&self, mut out: impl Write) -> io::Result<()> {
        let width = (self.high - self.low) / self.mass.len() as f64;
        writeln!(out, "bin_low\tbin_high\tmass")?;
        for (k, m) in self.mass.iter().enumerate() {
            let lo = self.low + k as f64 * width;
            writeln!(out, "{lo}\t{}\t{m}", lo + width)?;
        }
        Ok(())
    }
}

/// Writes one row per sample: type_id, the value of every scalar latent keyed
/// by `<shorthand id>#<instance>`, and the log-weight. The address dictionary
/// is written first as `# <id> <address>` comment lines.
pub fn write_results<'t>(
    mut out: impl Write,
    samples: impl IntoIterator<Item = (&'t Trace, f64)>,
) -> io::Result<()> {
    let samples: Vec<(&Trace, f64)> = samples.into_iter().collect();
    let mut dict = AddressDictionary::new();
    let mut columns: Vec<(u32, u32)> = Vec::new();
    let mut seen = HashSet::new();
    for (t, _) in &samples {
        for e in t.latents() {
            let id = dict.get_or_insert(&e.address.full);
            if seen.insert((id, e.address.instance)) {
                columns.push((id, e.address.instance));
            }
        }
    }
    columns.sort_unstable();
    for (id, name) in dict.names().iter().enumerate() {
        writeln!(out, "# {id} {name}")?;
    }
    write!(out, "type_id")?;
    for (id, inst) in &columns {
        write!(out, "\t{id}#{inst}")?;
    }
    writeln!(out, "\tlog_weight")?;
    for (t, lw) in samples {
        write!(out, "{:016x}", t.type_id)?;
        for (id, inst) in &columns {
            let name = dict.name(*id).expect("dictionary id");
            let v = t
                .latent(&Address::new(name.clone(), *inst))
                .and_then(|e| e.value.as_f64());
            match v {
                Some(x) => write!(out, "\t{x}")?,
                None => write!(out, "\t")?,
            }
        }
        writeln!(out, "\t{lw}")?;
    }
    Ok(())
}

/// Sample table read back from [`write_results`] output. Columns are named
/// `<address>#<instance>` with full address strings.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ResultTable {
    pub columns: Vec<String>,
    pub type_ids: Vec<u64>,
    /// Row-major; `None` where a sample lacks the latent.
    pub rows: Vec<Vec<Option<f64>>>,
    pub log_weights: Vec<f64>,
}

impl ResultTable {
    /// Column for `name`, given either as `address#instance` or as a bare
    /// address meaning instance 1.
    pub fn column(&self, name: &str) -> Option<usize> {
        self.columns
            .iter()
            .position(|c| c == name)
            .or_else(|| self.columns.iter().position(|c| *c == format!("{name}#1")))
    }

    /// Present values of column `col` with self-normalized weights.
    pub fn marginal(&self, col: usize) -> Vec<(f64, f64)> {
        let w = normalize_log_weights(&self.log_weights);
        self.rows
            .iter()
            .zip(w)
            .filter_map(|(r, w)| Some((r[col]?, w)))
            .collect()
    }

    /// Present values of column `col` in row order, ignoring weights.
    pub fn values(&self, col: usize) -> Vec<f64> {
        self.rows.iter().filter_map(|r| r[col]).collect()
    }
}

pub fn read_results(text: &str) -> Result<ResultTable, InferenceError> {
    let bad = |line: usize, msg: &str| {
        InferenceError::InvalidArgument(format!("line {}: {msg}", line + 1))
    };
    let mut names: Vec<String> = Vec::new();
    let mut table = ResultTable::default();
    let mut header_seen = false;
    for (ln, line) in text.lines().enumerate() {
        if let Some(rest) = line.strip_prefix("# ") {
            let (id, name) = rest
                .split_once(' ')
                .ok_or_else(|| bad(ln, "dictionary line"))?;
            if id.parse::<usize>().ok() != Some(names.len()) {
                return Err(bad(ln, "dictionary ids out of order"));
            }
            names.push(name.to_string());
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if !header_seen {
            if fields.len() < 2
                || fields[0] != "type_id"
                || fields[fields.len() - 1] != "log_weight"
            {
                return Err(bad(ln, "missing header"));
            }
            for f in &fields[1..fields.len() - 1] {
                let (id, inst) = f.split_once('#').ok_or_else(|| bad(ln, "column name"))?;
                let name = id
                    .parse::<usize>()
                    .ok()
                    .and_then(|i| names.get(i))
                    .ok_or_else(|| bad(ln, "unknown address id"))?;
                table.columns.push(format!("{name}#{inst}"));
            }
            header_seen = true;
            continue;
        }
        if fields.len() != table.columns.len() + 2 {
            return Err(bad(ln, "wrong field count"));
        }
        table
            .type_ids
            .push(u64::from_str_radix(fields[0], 16).map_err(|_| bad(ln, "type id"))?);
        let row = fields[1..fields.len() - 1]
            .iter()
            .map(|f| match *f {
                "" => Ok(None),
                x => x.parse::<f64>().map(Some).map_err(|_| bad(ln, "value")),
            })
            .collect::<Result<Vec<_>, _>>()?;
        table.rows.push(row);
        table.log_weights.push(
            fields[fields.len() - 1]
                .parse()
                .map_err(|_| bad(ln, "log weight"))?,
        );
    }
    if !header_seen {
        return Err(InferenceError::InvalidArgument("empty results file".into()));
    }
    Ok(table)
}
