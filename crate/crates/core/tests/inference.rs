use rand::Rng;
use rand_distr::{Distribution as _, StandardNormal};
use simtrace::gateway::sample_prior;
use simtrace::inference::{
    autocorrelation, effective_sample_size, estimate_log_evidence, gelman_rubin, importance_sample,
    importance_sample_parallel, read_results, rmh_chains, rmh_run, wasserstein1, write_results,
    Histogram, RmhKernel,
};
use simtrace::models::{builtin, ConjugateGaussian, CONJUGATE_LATENT, DISCRETE_A, DISCRETE_B};
use simtrace::rng::seeded;
use simtrace::{Address, InProcessEndpoint, RmhConfig, Value, WeightedTraceSet};

fn endpoint(name: &str) -> InProcessEndpoint {
    InProcessEndpoint::new(builtin(name).unwrap())
}

fn latent() -> Address {
    Address::new(CONJUGATE_LATENT, 1)
}

fn weighted_moments(samples: &[(f64, f64)]) -> (f64, f64) {
    let tot: f64 = samples.iter().map(|s| s.1).sum();
    let m = samples.iter().map(|(x, w)| x * w).sum::<f64>() / tot;
    let v = samples
        .iter()
        .map(|(x, w)| w * (x - m).powi(2))
        .sum::<f64>()
        / tot;
    (m, v)
}

#[test]
fn importance_sampling_recovers_conjugate_posterior() {
    let (mean, var) = ConjugateGaussian::default().posterior(&[1.0]);
    assert_eq!((mean, var), (0.5, 0.5));
    let ws = importance_sample_parallel(&endpoint("conjugate"), &Value::F64(1.0), 10_000, 1, None)
        .unwrap();
    let (m, v) = weighted_moments(&ws.marginal(&latent()));
    assert!((m - mean).abs() < 0.05, "mean {m}");
    assert!((v - var).abs() < 0.05, "variance {v}");
    assert!(ws.ess() > 0.5 * ws.len() as f64);
}

#[test]
fn parallel_importance_sampling_matches_sequential() {
    let obs = Value::F64(0.3);
    let a = importance_sample(&mut endpoint("conjugate"), &obs, 200, 4, None).unwrap();
    let b = importance_sample_parallel(&endpoint("conjugate"), &obs, 200, 4, None).unwrap();
    assert_eq!(a.log_weights, b.log_weights);
}

#[test]
fn evidence_estimate_matches_closed_form() {
    let exact = ConjugateGaussian::default().log_evidence_single(1.0);
    // log N(1; 0, 2)
    assert!((exact - (-0.5 * (4.0 * std::f64::consts::PI).ln() - 0.25)).abs() < 1e-12);
    let ws = importance_sample_parallel(&endpoint("conjugate"), &Value::F64(1.0), 100_000, 2, None)
        .unwrap();
    let est = estimate_log_evidence(&ws).unwrap();
    assert!((est - exact).abs() < 0.01, "{est} vs {exact}");
}

#[test]
fn rmh_recovers_conjugate_posterior() {
    let mut cfg = RmhConfig::new(20_000, 3);
    let chain = rmh_run(&mut endpoint("conjugate"), &Value::F64(1.0), &cfg, None).unwrap();
    let xs = chain.values(&latent(), 2_000);
    let m = xs.iter().sum::<f64>() / xs.len() as f64;
    let v = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / xs.len() as f64;
    assert!(
        (m - 0.5).abs() < 0.05 && (v - 0.5).abs() < 0.05,
        "mean {m} variance {v}"
    );
    // Independence proposals from the prior accept with probability E[min(1, L'/L)].
    assert!(chain.acceptance_rate() > 0.5 && chain.acceptance_rate() < 0.9);

    cfg.kernel = RmhKernel::Mixture {
        prior_prob: 0.2,
        rw_scale: 0.5,
    };
    let chain = rmh_run(&mut endpoint("conjugate"), &Value::F64(1.0), &cfg, None).unwrap();
    let xs = chain.values(&latent(), 2_000);
    let m = xs.iter().sum::<f64>() / xs.len() as f64;
    assert!((m - 0.5).abs() < 0.05, "mixture kernel mean {m}");
}

fn discrete_posterior(y: usize) -> [f64; 4] {
    let prior = [0.4 * 0.7, 0.4 * 0.3, 0.6 * 0.7, 0.6 * 0.3];
    let lik = [
        [0.7, 0.2, 0.1],
        [0.1, 0.6, 0.3],
        [0.2, 0.2, 0.6],
        [0.3, 0.4, 0.3],
    ];
    let joint: Vec<f64> = (0..4).map(|k| prior[k] * lik[k][y]).collect();
    let z: f64 = joint.iter().sum();
    [joint[0] / z, joint[1] / z, joint[2] / z, joint[3] / z]
}

#[test]
fn discrete_importance_sampling_matches_enumeration() {
    for y in 0..3 {
        let ws = importance_sample_parallel(
            &endpoint("discrete"),
            &Value::I64(y as i64),
            50_000,
            5,
            None,
        )
        .unwrap();
        let mut mass = [0.0; 4];
        for (t, w) in ws.traces.iter().zip(ws.normalized_weights()) {
            mass[t.result.as_i64().unwrap() as usize] += w;
        }
        let exact = discrete_posterior(y);
        let tv: f64 = 0.5
            * mass
                .iter()
                .zip(&exact)
                .map(|(a, b)| (a - b).abs())
                .sum::<f64>();
        assert!(tv < 0.02, "y={y}: TV {tv}");
    }
}

#[test]
fn discrete_rmh_visits_every_state() {
    let chain = rmh_run(
        &mut endpoint("discrete"),
        &Value::I64(2),
        &RmhConfig::new(5_000, 6),
        None,
    )
    .unwrap();
    let mut states = std::collections::HashSet::new();
    for t in chain.after_burn_in(500) {
        let get = |full: &str| {
            t.latent(&Address::new(full, 1))
                .unwrap()
                .value
                .as_i64()
                .unwrap()
        };
        states.insert((get(DISCRETE_A), get(DISCRETE_B)));
    }
    assert_eq!(states.len(), 4);
}

#[test]
fn chains_are_reproducible_and_independent() {
    let cfg = RmhConfig::new(500, 7);
    let a = rmh_chains(&endpoint("conjugate"), &Value::F64(1.0), &cfg, 3).unwrap();
    let b = rmh_chains(&endpoint("conjugate"), &Value::F64(1.0), &cfg, 3).unwrap();
    for (x, y) in a.iter().zip(&b) {
        assert_eq!(x.values(&latent(), 0), y.values(&latent(), 0));
    }
    assert_ne!(a[0].values(&latent(), 0), a[1].values(&latent(), 0));
}

#[test]
fn rmh_rejects_zero_iterations() {
    assert!(rmh_run(
        &mut endpoint("conjugate"),
        &Value::F64(1.0),
        &RmhConfig::new(0, 0),
        None
    )
    .is_err());
    assert!(importance_sample(&mut endpoint("conjugate"), &Value::F64(1.0), 0, 0, None).is_err());
}

fn ar1(phi: f64, n: usize, seed: u64) -> Vec<f64> {
    let mut rng = seeded(seed);
    let mut x = 0.0;
    (0..n)
        .map(|_| {
            let e: f64 = StandardNormal.sample(&mut rng);
            x = phi * x + e;
            x
        })
        .collect()
}

#[test]
fn autocorrelation_of_ar1_and_iid_series() {
    let acf = autocorrelation(&ar1(0.9, 100_000, 8), 3).unwrap();
    assert!((acf[1] - 0.9).abs() < 0.01, "rho1 {}", acf[1]);
    assert!((acf[2] - 0.81).abs() < 0.02, "rho2 {}", acf[2]);
    let iid = ar1(0.0, 100_000, 9);
    let acf = autocorrelation(&iid, 1).unwrap();
    assert!(acf[1].abs() < 0.01);
    let ess = effective_sample_size(&iid);
    assert!((ess / iid.len() as f64 - 1.0).abs() < 0.1, "iid ESS {ess}");
    // ESS of AR(1) is n (1 - phi) / (1 + phi).
    let ess = effective_sample_size(&ar1(0.9, 100_000, 10)) / 100_000.0;
    assert!((ess - 0.1 / 1.9).abs() < 0.015, "AR(1) ESS fraction {ess}");
    assert_eq!(autocorrelation(&[1.0; 20], 2).unwrap(), [1.0, 0.0, 0.0]);
    assert!(autocorrelation(&[1.0, 2.0], 2).is_err());
}

fn normal_chain(mean: f64, n: usize, seed: u64) -> Vec<f64> {
    let mut rng = seeded(seed);
    (0..n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(&mut rng);
            mean + z
        })
        .collect()
}

#[test]
fn gelman_rubin_separates_mixed_from_disjoint_chains() {
    let mixed: Vec<Vec<f64>> = (0..4).map(|s| normal_chain(0.0, 5_000, s)).collect();
    let r = gelman_rubin(&mixed).unwrap();
    assert!(r < 1.05, "R-hat {r}");
    let disjoint = vec![normal_chain(0.0, 5_000, 20), normal_chain(10.0, 5_000, 21)];
    let r = gelman_rubin(&disjoint).unwrap();
    assert!(r > 1.5, "R-hat {r}");
    let same = normal_chain(0.0, 1_000, 22);
    let r = gelman_rubin(&[same.clone(), same]).unwrap();
    assert!(r <= 1.0);
    assert_eq!(gelman_rubin(&[vec![3.0; 50], vec![3.0; 50]]).unwrap(), 1.0);
    assert!(gelman_rubin(&[vec![0.0; 50]]).is_err());
}

#[test]
fn wasserstein_distance_oracles() {
    let a = [(0.0, 1.0)];
    let b = [(1.0, 1.0)];
    assert!((wasserstein1(&a, &b) - 1.0).abs() < 1e-15);
    let mut rng = seeded(11);
    let xs: Vec<(f64, f64)> = (0..1000).map(|_| (rng.random::<f64>(), 1.0)).collect();
    let shifted: Vec<(f64, f64)> = xs.iter().map(|&(x, w)| (x + 0.25, 2.0 * w)).collect();
    assert!((wasserstein1(&xs, &shifted) - 0.25).abs() < 1e-12);
    assert_eq!(wasserstein1(&xs, &xs), 0.0);
    // Half the mass moves from 0 to 2.
    let c = [(0.0, 0.5), (2.0, 0.5)];
    assert!((wasserstein1(&a, &c) - 1.0).abs() < 1e-15);
}

#[test]
fn histogram_bins_weighted_samples() {
    let h = Histogram::new(
        &[(0.1, 1.0), (0.9, 2.0), (0.95, 0.5), (1.0, 9.0), (-0.1, 9.0)],
        2,
        0.0,
        1.0,
    );
    assert_eq!(h.mass, [1.0, 2.5]);
    let mut out = Vec::new();
    h.write_tsv(&mut out).unwrap();
    assert_eq!(
        String::from_utf8(out).unwrap(),
        "bin_low\tbin_high\tmass\n0\t0.5\t1\n0.5\t1\t2.5\n"
    );
}

#[test]
fn result_files_roundtrip() {
    let traces = sample_prior(&mut endpoint("cascade"), 30, 12).unwrap();
    let lw: Vec<f64> = (0..30).map(|i| -(i as f64) / 7.0).collect();
    let mut out = Vec::new();
    write_results(&mut out, traces.iter().zip(lw.iter().copied())).unwrap();
    let table = read_results(std::str::from_utf8(&out).unwrap()).unwrap();
    assert_eq!(table.log_weights, lw);
    assert_eq!(
        table.type_ids,
        traces.iter().map(|t| t.type_id).collect::<Vec<_>>()
    );
    let col = table.column("cascade/particle/energy/Uniform").unwrap();
    let expected: Vec<f64> = traces
        .iter()
        .filter_map(|t| t.latent(&Address::new("cascade/particle/energy/Uniform", 1)))
        .map(|e| e.value.as_f64().unwrap())
        .collect();
    assert_eq!(table.values(col), expected);
    let ws = WeightedTraceSet::new(traces.clone(), lw.clone()).unwrap();
    let from_set = ws.marginal(&Address::new("cascade/particle/energy/Uniform", 1));
    let from_file = table.marginal(col);
    assert_eq!(from_set.len(), from_file.len());
    for (a, b) in from_set.iter().zip(&from_file) {
        assert_eq!(a.0, b.0);
        assert!((a.1 - b.1).abs() < 1e-12);
    }
    assert!(read_results("nonsense").is_err());
}
