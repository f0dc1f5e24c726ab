//! End-to-end acceptance checks. Each test prints one `PASS`/`FAIL` line.

mod common;

use std::collections::{BTreeMap, HashMap};
use std::io::{self, Write};
use std::sync::{Arc, OnceLock};
use std::time::{Duration, Instant};

use proptest::test_runner::{Config as ProptestConfig, TestRunner};
use rand::Rng;
use rand_distr::{Distribution as _, StandardNormal};
use simtrace::collective::SingleProcess;
use simtrace::gateway::{sample_prior, sample_prior_from, sample_prior_parallel};
use simtrace::inference::{
    autocorrelation, gelman_rubin, importance_sample, importance_sample_parallel, rmh_chains,
    rmh_run, wasserstein1,
};
use simtrace::models::{
    CascadeModel, ConjugateGaussian, DiscreteModel, CASCADE_CHANNEL, CASCADE_ENERGY,
    CONJUGATE_LATENT,
};
use simtrace::proposal::{NetworkConfig, ObsEmbedder};
use simtrace::rng::seeded;
use simtrace::store::{plan_minibatches, sort_by_type, write_shards, MinibatchPlan};
use simtrace::tensor::ParamStore;
use simtrace::train::{train, InMemorySource, OnlineSource};
use simtrace::wire::{conformance_vectors, decode, encode, to_hex, validate_transcript};
use simtrace::{
    Address, InProcessEndpoint, OptimizerConfig, ProposalNetwork, RmhConfig, Schedule, Tape,
    Tensor, Trace, TrainConfig, Value,
};

const MOMENT_TOL: f64 = 0.05;
const CONJUGATE_BUDGET: Duration = Duration::from_secs(600);
const TV_TOL: f64 = 0.02;
const W1_FRACTION: f64 = 0.05;
/// Addresses below this posterior mass under both engines are not compared.
const W1_MIN_MASS: f64 = 0.01;
const ESS_GAIN: f64 = 5.0;
const NETWORK_FD_TOL: f64 = 1e-4;
const PRIMITIVE_FD_TOL: f64 = 1e-6;
const FD_STEP: f64 = 1e-5;
const PARALLEL_TOL: f64 = 1e-8;
const SORT_GAIN: f64 = 5.0;
const RANDOM_MESSAGES: u32 = 10_000;
const RHAT_MIXED: f64 = 1.05;
const RHAT_DISJOINT: f64 = 1.5;
const ACF_TOL: f64 = 0.01;

/// Writes to the raw stderr handle so the line shows even when output is captured.
fn report(name: &str, ok: bool, details: String) {
    let _ = writeln!(io::stderr(), "{} {name}: {details}", if ok { "PASS" } else { "FAIL" });
    assert!(ok, "{name}: {details}");
}

fn moments(samples: &[(f64, f64)]) -> (f64, f64) {
    let tot: f64 = samples.iter().map(|s| s.1).sum();
    let m = samples.iter().map(|(x, w)| x * w).sum::<f64>() / tot;
    let v = samples
        .iter()
        .map(|(x, w)| w * (x - m).powi(2))
        .sum::<f64>()
        / tot;
    (m, v)
}

fn train_config(iterations: u64, schedule: Schedule) -> TrainConfig {
    TrainConfig {
        iterations,
        optimizer: OptimizerConfig::default(),
        schedule,
        validate_every: 0,
        checkpoint: None,
    }
}

#[test]
fn conjugate_posterior_oracle() {
    let start = Instant::now();
    let model = Arc::new(ConjugateGaussian::default());
    let (mean, var) = model.posterior(&[1.0]);
    let ep = InProcessEndpoint::new(model);
    let obs = Value::F64(1.0);
    let latent = Address::new(CONJUGATE_LATENT, 1);
    let mut results = Vec::new();

    let ws = importance_sample_parallel(&ep, &obs, 10_000, 1, None).unwrap();
    results.push(("IS", moments(&ws.marginal(&latent))));

    let chain = rmh_run(&mut ep.clone(), &obs, &RmhConfig::new(100_000, 3), None).unwrap();
    results.push(("RMH", moments(&chain.marginal(&latent, 10_000))));

    let mut cfg = NetworkConfig::desk();
    cfg.obs_embedder = ObsEmbedder::Mlp;
    let mut net = ProposalNetwork::new(cfg, &[1]).unwrap();
    net.pregenerate(&sample_prior(&mut ep.clone(), 10, 77).unwrap())
        .unwrap();
    let mut source = OnlineSource {
        endpoint: ep.clone(),
        global_batch: 64,
        seed: 1,
    };
    let tc = train_config(1000, Schedule::Constant(1e-3));
    train(
        &mut net,
        &mut source,
        &[],
        &tc,
        &mut SingleProcess,
        &mut |_| {},
    )
    .unwrap();
    let ws = importance_sample(&mut ep.clone(), &obs, 10_000, 3, Some(&net)).unwrap();
    results.push(("IC", moments(&ws.marginal(&latent))));

    let elapsed = start.elapsed();
    let ok = results
        .iter()
        .all(|(_, (m, v))| (m - mean).abs() < MOMENT_TOL && (v - var).abs() < MOMENT_TOL)
        && elapsed < CONJUGATE_BUDGET;
    let details = results
        .iter()
        .map(|(name, (m, v))| format!("{name} mean {m:.3} var {v:.3}"))
        .collect::<Vec<_>>()
        .join(", ");
    report(
        "conjugate posterior",
        ok,
        format!("{details}; {:.1}s", elapsed.as_secs_f64()),
    );
}

#[test]
fn discrete_enumeration_oracle() {
    let model = DiscreteModel::default();
    let y = 2;
    let prior = [0.4 * 0.7, 0.4 * 0.3, 0.6 * 0.7, 0.6 * 0.3];
    let lik = [
        [0.7, 0.2, 0.1],
        [0.1, 0.6, 0.3],
        [0.2, 0.2, 0.6],
        [0.3, 0.4, 0.3],
    ];
    let joint: Vec<f64> = (0..4).map(|k| prior[k] * lik[k][y]).collect();
    let z: f64 = joint.iter().sum();

    let mut ep = InProcessEndpoint::new(Arc::new(model));
    let chain = rmh_run(
        &mut ep,
        &Value::I64(y as i64),
        &RmhConfig::new(100_000, 3),
        None,
    )
    .unwrap();
    let states = chain.after_burn_in(0);
    let mut freq = [0.0; 4];
    for t in states {
        freq[t.result.as_i64().unwrap() as usize] += 1.0 / states.len() as f64;
    }
    let tv: f64 = 0.5
        * freq
            .iter()
            .zip(&joint)
            .map(|(f, j)| (f - j / z).abs())
            .sum::<f64>();
    report(
        "discrete enumeration",
        tv < TV_TOL,
        format!("TV {tv:.4} over {} states", states.len()),
    );
}

struct CascadeSetup {
    endpoint: InProcessEndpoint,
    net: ProposalNetwork,
    held_out: Vec<Trace>,
}

fn cascade_setup() -> &'static CascadeSetup {
    static SETUP: OnceLock<CascadeSetup> = OnceLock::new();
    SETUP.get_or_init(|| {
        let endpoint = InProcessEndpoint::new(Arc::new(CascadeModel::default()));
        let mut net = ProposalNetwork::new(NetworkConfig::desk(), &[4, 8, 8]).unwrap();
        net.pregenerate(&sample_prior(&mut endpoint.clone(), 2000, 77).unwrap())
            .unwrap();
        let mut source = OnlineSource {
            endpoint: endpoint.clone(),
            global_batch: 64,
            seed: 1,
        };
        let schedule = Schedule::Poly {
            order: 2.0,
            lr0: 1e-3,
            lr_final: 5e-5,
            total: 1000,
        };
        train(
            &mut net,
            &mut source,
            &[],
            &train_config(1000, schedule),
            &mut SingleProcess,
            &mut |_| {},
        )
        .unwrap();
        let held_out = sample_prior_from(&mut endpoint.clone(), 10, 999, 0).unwrap();
        CascadeSetup {
            endpoint,
            net,
            held_out,
        }
    })
}

fn weighted_mode(samples: &[(f64, f64)]) -> Option<i64> {
    let mut mass: BTreeMap<i64, f64> = BTreeMap::new();
    for &(x, w) in samples {
        *mass.entry(x as i64).or_default() += w;
    }
    mass.into_iter()
        .max_by(|a, b| a.1.total_cmp(&b.1))
        .map(|(k, _)| k)
}

#[test]
fn rmh_and_ic_posteriors_agree() {
    let setup = cascade_setup();
    let addresses: Vec<Address> = std::iter::once(Address::new(CASCADE_CHANNEL, 1))
        .chain((1..=3).map(|i| Address::new(CASCADE_ENERGY, i)))
        .collect();
    let prior = sample_prior_from(&mut setup.endpoint.clone(), 20_000, 4242, 0).unwrap();
    let prior_std: Vec<f64> = addresses
        .iter()
        .map(|a| {
            let v: Vec<f64> = prior
                .iter()
                .filter_map(|t| t.latent(a)?.value.as_f64())
                .collect();
            let m = v.iter().sum::<f64>() / v.len() as f64;
            (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / v.len() as f64).sqrt()
        })
        .collect();

    let burn_in = 10_000;
    let mut worst: f64 = 0.0;
    let mut problems = Vec::new();
    let mut compared = 0;
    for (k, t) in setup.held_out.iter().take(4).enumerate() {
        let chains = rmh_chains(
            &setup.endpoint,
            &t.observation,
            &RmhConfig::new(100_000, 3),
            2,
        )
        .unwrap();
        let ic = importance_sample_parallel(
            &setup.endpoint,
            &t.observation,
            10_000,
            5,
            Some(&setup.net),
        )
        .unwrap();
        for (a, std) in addresses.iter().zip(&prior_std) {
            let rmh: Vec<(f64, f64)> = chains.iter().flat_map(|c| c.marginal(a, burn_in)).collect();
            let q = ic.marginal(a);
            let rmh_mass = rmh.iter().map(|s| s.1).sum::<f64>() / chains.len() as f64;
            let ic_mass: f64 = q.iter().map(|s| s.1).sum();
            if rmh_mass.max(ic_mass) < W1_MIN_MASS {
                continue;
            }
            if rmh.is_empty() || q.is_empty() {
                problems.push(format!("obs {k} {a}: one engine has no samples"));
                continue;
            }
            compared += 1;
            let rel = wasserstein1(&rmh, &q) / std;
            worst = worst.max(rel);
            if rel >= W1_FRACTION {
                problems.push(format!("obs {k} {a}: W1/std {rel:.4}"));
            }
        }
        let channel = &addresses[0];
        let rmh_mode = weighted_mode(
            &chains
                .iter()
                .flat_map(|c| c.marginal(channel, burn_in))
                .collect::<Vec<_>>(),
        );
        let ic_mode = weighted_mode(&ic.marginal(channel));
        if rmh_mode != ic_mode {
            problems.push(format!("obs {k}: channel mode {rmh_mode:?} vs {ic_mode:?}"));
        }
    }
    let mut details = format!("{compared} marginals, worst W1/std {worst:.4}");
    details.extend(problems.iter().map(|p| format!("; {p}")));
    report(
        "RMH-IC agreement",
        problems.is_empty() && compared > 0,
        details,
    );
}

#[test]
fn amortized_proposals_raise_ess() {
    let setup = cascade_setup();
    let n = 10_000;
    let (mut prior_ess, mut ic_ess) = (0.0, 0.0);
    for t in &setup.held_out {
        let wp = importance_sample_parallel(&setup.endpoint, &t.observation, n, 5, None).unwrap();
        let wq =
            importance_sample_parallel(&setup.endpoint, &t.observation, n, 5, Some(&setup.net))
                .unwrap();
        prior_ess += wp.ess() / n as f64;
        ic_ess += wq.ess() / n as f64;
    }
    let k = setup.held_out.len() as f64;
    let gain = ic_ess / prior_ess;
    report(
        "amortization",
        gain >= ESS_GAIN,
        format!(
            "IC ESS/n {:.4} vs prior {:.5}, gain {gain:.1}x",
            ic_ess / k,
            prior_ess / k
        ),
    );
}

fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-3)
}

/// Largest FD error of `sum(f(params) * w)` over every input element.
fn primitive_error(
    inputs: Vec<Tensor>,
    f: impl Fn(&mut Tape, &[simtrace::tensor::Var]) -> simtrace::tensor::Var,
) -> f64 {
    let mut store = ParamStore::new();
    let ids: Vec<_> = inputs
        .into_iter()
        .enumerate()
        .map(|(i, t)| store.add(format!("p{i}"), t).unwrap())
        .collect();
    let mut weights: Option<Tensor> = None;
    let mut eval = |store: &ParamStore| {
        let mut tape = Tape::new();
        let vars: Vec<_> = ids.iter().map(|&id| tape.param(store, id)).collect();
        let out = f(&mut tape, &vars);
        let shape = tape.value(out).shape.clone();
        let w = weights.get_or_insert_with(|| random(&shape, 99)).clone();
        let w = tape.constant(w);
        let prod = tape.mul(out, w).unwrap();
        let loss = tape.sum(prod);
        (tape.value(loss).item(), tape.backward(loss).unwrap())
    };
    let (_, grads) = eval(&store);
    let mut worst: f64 = 0.0;
    for &id in &ids {
        for j in 0..store.get(id).numel() {
            let x = store.get(id).data[j];
            store.get_mut(id).data[j] = x + FD_STEP;
            let up = eval(&store).0;
            store.get_mut(id).data[j] = x - FD_STEP;
            let down = eval(&store).0;
            store.get_mut(id).data[j] = x;
            let analytic = grads.get(id).map_or(0.0, |g| g.data[j]);
            worst = worst.max(rel_err(analytic, (up - down) / (2.0 * FD_STEP)));
        }
    }
    worst
}

fn random(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = seeded(seed);
    let n = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect(),
    )
    .unwrap()
}

#[test]
fn gradients_match_finite_differences() {
    let endpoint = InProcessEndpoint::new(Arc::new(CascadeModel::default()));
    let traces = sample_prior_parallel(&endpoint, 2, 7).unwrap();
    let cfg = NetworkConfig {
        lstm_hidden: 3,
        obs_embed_dim: 3,
        sample_embed_dim: 2,
        address_embed_dim: 2,
        mixture_components: 2,
        head_hidden: 3,
        obs_embedder: ObsEmbedder::small_cnn(),
        seed: 8,
    };
    let mut net = ProposalNetwork::new(cfg, &[4, 8, 8]).unwrap();
    net.pregenerate(&traces).unwrap();
    let grads = net.minibatch_loss(&traces).unwrap().grads;
    let mut network: f64 = 0.0;
    let mut checked = 0;
    for id in 0..net.params.len() {
        for j in 0..net.params.get(id).numel() {
            let x = net.params.get(id).data[j];
            net.params.get_mut(id).data[j] = x + FD_STEP;
            let up = net.mean_loss(&traces).unwrap();
            net.params.get_mut(id).data[j] = x - FD_STEP;
            let down = net.mean_loss(&traces).unwrap();
            net.params.get_mut(id).data[j] = x;
            let analytic = grads.get(id).map_or(0.0, |g| g.data[j]);
            network = network.max(rel_err(analytic, (up - down) / (2.0 * FD_STEP)));
            checked += 1;
        }
    }

    let conv = primitive_error(
        vec![
            random(&[2, 2, 4, 4, 4], 1),
            random(&[3, 2, 3, 3, 3], 2),
            random(&[3], 3),
        ],
        |t, v| t.conv3d(v[0], v[1], v[2], 1).unwrap(),
    );
    let h = 6;
    let lstm_inputs = vec![
        random(&[2, 5], 4),
        random(&[2, h], 5),
        random(&[2, h], 6),
        random(&[5, 4 * h], 7),
        random(&[h, 4 * h], 8),
        random(&[1, 4 * h], 9),
    ];
    let lstm = primitive_error(lstm_inputs.clone(), |t, v| {
        t.lstm_cell(v[0], v[1], v[2], v[3], v[4], v[5]).unwrap().0
    })
    .max(primitive_error(lstm_inputs, |t, v| {
        t.lstm_cell(v[0], v[1], v[2], v[3], v[4], v[5]).unwrap().1
    }));

    report(
        "gradient correctness",
        network < NETWORK_FD_TOL && conv < PRIMITIVE_FD_TOL && lstm < PRIMITIVE_FD_TOL,
        format!(
            "network {network:.2e} over {checked} parameters, conv3d {conv:.2e}, LSTM {lstm:.2e}"
        ),
    );
}

fn flat_params(net: &ProposalNetwork) -> Vec<f64> {
    net.params
        .iter()
        .flat_map(|(_, t)| t.data.clone())
        .collect()
}

#[test]
fn data_parallel_matches_single_worker() {
    let endpoint = InProcessEndpoint::new(Arc::new(CascadeModel::default()));
    let traces = sample_prior_parallel(&endpoint, 400, 1).unwrap();
    let cfg = NetworkConfig {
        lstm_hidden: 16,
        obs_embed_dim: 8,
        sample_embed_dim: 2,
        address_embed_dim: 4,
        mixture_components: 3,
        head_hidden: 16,
        obs_embedder: ObsEmbedder::Mlp,
        seed: 2,
    };
    let network = || {
        let mut net = ProposalNetwork::new(cfg.clone(), &[4, 8, 8]).unwrap();
        net.pregenerate(&traces).unwrap();
        net
    };
    let tc = train_config(10, Schedule::Constant(1e-3));
    let mut single = network();
    let mut source = InMemorySource {
        traces: &traces,
        global_batch: 32,
    };
    let reference = train(
        &mut single,
        &mut source,
        &[],
        &tc,
        &mut SingleProcess,
        &mut |_| {},
    )
    .unwrap();
    let expected = flat_params(&single);

    let ranks = common::run_group(4, |g| {
        let mut net = network();
        let mut source = InMemorySource {
            traces: &traces,
            global_batch: 32,
        };
        let records = train(&mut net, &mut source, &[], &tc, g, &mut |_| {}).unwrap();
        (records, flat_params(&net))
    });
    let mut worst: f64 = 0.0;
    for (records, params) in &ranks {
        for (a, b) in records.iter().zip(&reference) {
            worst = worst.max((a.loss - b.loss).abs());
        }
        for (a, b) in params.iter().zip(&expected) {
            worst = worst.max((a - b).abs());
        }
    }
    let identical = ranks[1..].iter().all(|(_, p)| {
        p.iter()
            .zip(&ranks[0].1)
            .all(|(a, b)| a.to_bits() == b.to_bits())
    });
    let steps = ranks.iter().all(|(r, _)| r.len() == reference.len()) && reference.len() == 10;
    report(
        "data-parallel equivalence",
        worst < PARALLEL_TOL && identical && steps,
        format!("max deviation {worst:.2e} over 10 steps, ranks bit-identical {identical}"),
    );
}

#[test]
fn five_seed_convergence() {
    let iterations = 300;
    let block = 50;
    let mut finals = Vec::new();
    let mut problems = Vec::new();
    let endpoint = InProcessEndpoint::new(Arc::new(CascadeModel::default()));
    let pregen = sample_prior(&mut endpoint.clone(), 2000, 77).unwrap();
    for seed in 0..5u64 {
        let mut cfg = NetworkConfig::desk();
        cfg.seed = seed;
        let mut net = ProposalNetwork::new(cfg, &[4, 8, 8]).unwrap();
        net.pregenerate(&pregen).unwrap();
        let mut source = OnlineSource {
            endpoint: endpoint.clone(),
            global_batch: 128,
            seed: 100 + seed,
        };
        let schedule = Schedule::Poly {
            order: 2.0,
            lr0: 2e-3,
            lr_final: 1e-4,
            total: iterations,
        };
        let records = train(
            &mut net,
            &mut source,
            &[],
            &train_config(iterations, schedule),
            &mut SingleProcess,
            &mut |_| {},
        )
        .unwrap();
        let means: Vec<f64> = records
            .chunks(block)
            .map(|c| c.iter().map(|r| r.loss).sum::<f64>() / c.len() as f64)
            .collect();
        if !means.windows(2).all(|w| w[1] < w[0]) {
            problems.push(format!("seed {seed} not monotone: {means:.3?}"));
        }
        finals.push(*means.last().unwrap());
    }
    let m = finals.iter().sum::<f64>() / finals.len() as f64;
    let sd =
        (finals.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (finals.len() - 1) as f64).sqrt();
    for (seed, f) in finals.iter().enumerate() {
        if (f - m).abs() > 2.0 * sd {
            problems.push(format!("seed {seed} final {f:.3} outside 2 std"));
        }
    }
    report(
        "convergence stability",
        problems.is_empty(),
        format!(
            "final losses {finals:.3?}, mean {m:.3} std {sd:.3}{}",
            problems
                .iter()
                .map(|p| format!("; {p}"))
                .collect::<String>()
        ),
    );
}

fn mean_sub_minibatches(ids: &[u64], plan: &MinibatchPlan) -> f64 {
    let counts: Vec<usize> = plan
        .chunks
        .iter()
        .map(|r| {
            let mut v = ids[r.clone()].to_vec();
            v.sort_unstable();
            v.dedup();
            v.len()
        })
        .collect();
    counts.iter().sum::<usize>() as f64 / counts.len() as f64
}

fn plan_histogram(ids: &[u64], plan: &MinibatchPlan) -> HashMap<u64, usize> {
    let mut h = HashMap::new();
    for rank in 0..plan.assignment.len() {
        for &c in &plan.assignment[rank] {
            for i in plan.chunks[c].clone() {
                *h.entry(ids[i]).or_default() += 1;
            }
        }
    }
    h
}

#[test]
fn sorting_reduces_sub_minibatches() {
    let dir = tempfile::tempdir().unwrap();
    let endpoint = InProcessEndpoint::new(Arc::new(CascadeModel::default()));
    let raw = write_shards(
        &sample_prior_parallel(&endpoint, 8192, 8).unwrap(),
        1000,
        &dir.path().join("raw"),
    )
    .unwrap();
    let sorted = sort_by_type(&raw, &dir.path().join("sorted"), 4, 1000).unwrap();
    let (b, workers) = (64, 4);
    let mut gain = f64::INFINITY;
    let mut identity = true;
    for (epoch, ds) in [(0u64, &raw), (1, &raw), (0, &sorted), (1, &sorted)] {
        let ids = ds.type_ids();
        let plan = plan_minibatches(&ds.latent_lens(), b, workers, epoch, 1).unwrap();
        let hist: HashMap<u64, usize> = ds.type_histogram().into_iter().collect();
        identity &= plan_histogram(&ids, &plan) == hist;
    }
    for epoch in 0..2 {
        let unsorted = mean_sub_minibatches(
            &raw.type_ids(),
            &plan_minibatches(&raw.latent_lens(), b, workers, epoch, 1).unwrap(),
        );
        let grouped = mean_sub_minibatches(
            &sorted.type_ids(),
            &plan_minibatches(&sorted.latent_lens(), b, workers, epoch, 1).unwrap(),
        );
        gain = gain.min(unsorted / grouped);
    }
    report(
        "sorting benefit",
        gain >= SORT_GAIN && identity,
        format!("sub-minibatch reduction {gain:.1}x, type counts preserved {identity}"),
    );
}

#[test]
fn protocol_conformance() {
    let documented = common::protocol_vectors();
    let ours = conformance_vectors();
    let mut vectors_ok = documented.len() == ours.len();
    for ((name, bytes), (our_name, msg)) in documented.iter().zip(&ours) {
        let encoded = encode(msg).unwrap();
        vectors_ok &= name == our_name
            && to_hex(&encoded) == to_hex(bytes)
            && decode(bytes).ok() == Some((msg.clone(), bytes.len()));
    }

    let mut mutants = 0;
    let mut accepted = 0;
    for model in ["conjugate", "discrete", "cascade"] {
        let t = common::record_session(model, 2, 5);
        vectors_ok &= validate_transcript(&t).is_ok();
        for (_, m) in common::session_mutants(&t) {
            mutants += 1;
            accepted += usize::from(validate_transcript(&m).is_ok());
        }
    }

    let mut runner = TestRunner::new(ProptestConfig {
        cases: RANDOM_MESSAGES,
        failure_persistence: None,
        ..ProptestConfig::default()
    });
    let roundtrip = runner
        .run(&common::message_strategy(), |msg| {
            let bytes = encode(&msg).unwrap();
            let (back, used) = decode(&bytes).unwrap();
            proptest::prop_assert_eq!(used, bytes.len());
            proptest::prop_assert_eq!(&back, &msg);
            Ok(())
        })
        .map_err(|e| e.to_string());

    report(
        "protocol conformance",
        vectors_ok && accepted == 0 && roundtrip.is_ok(),
        format!(
            "{} vectors ok {vectors_ok}, {accepted}/{mutants} mutants accepted, {RANDOM_MESSAGES} random messages {}",
            documented.len(),
            roundtrip.err().unwrap_or_else(|| "ok".into())
        ),
    );
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
fn convergence_diagnostics() {
    let mixed: Vec<Vec<f64>> = (0..4).map(|s| normal_chain(0.0, 5_000, s)).collect();
    let r_mixed = gelman_rubin(&mixed).unwrap();
    let disjoint = vec![normal_chain(0.0, 5_000, 20), normal_chain(10.0, 5_000, 21)];
    let r_disjoint = gelman_rubin(&disjoint).unwrap();

    let mut rng = seeded(8);
    let mut x = 0.0;
    let series: Vec<f64> = (0..100_000)
        .map(|_| {
            let e: f64 = StandardNormal.sample(&mut rng);
            x = 0.9 * x + e;
            x
        })
        .collect();
    let rho1 = autocorrelation(&series, 1).unwrap()[1];
    report(
        "diagnostics",
        r_mixed < RHAT_MIXED && r_disjoint > RHAT_DISJOINT && (rho1 - 0.9).abs() < ACF_TOL,
        format!("R-hat mixed {r_mixed:.4}, disjoint {r_disjoint:.2}, AR(1) rho1 {rho1:.4}"),
    );
}
