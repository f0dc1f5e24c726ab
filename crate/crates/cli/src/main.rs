//! `simtrace`: dataset generation, sorting, training, inference and reports.

use std::fmt::Display;
use std::fs;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Duration;

use clap::{Parser, Subcommand, ValueEnum};
use simtrace::collective::{tcp_group, SingleProcess};
use simtrace::config::KeyValues;
use simtrace::gateway::{
    connect, sample_prior_from, sample_prior_parallel, sample_prior_parallel_from,
};
use simtrace::inference::{
    autocorrelation, effective_sample_size, estimate_log_evidence, gelman_rubin, importance_sample,
    importance_sample_parallel, read_results, rmh_chains, rmh_run, wasserstein1, write_results,
    Histogram, ResultTable,
};
use simtrace::models::{builtin, BUILTIN_MODELS};
use simtrace::optim::{scale_lr, OptimizerConfig, Schedule, OPTIMIZER_KEYS, SCHEDULE_KEYS};
use simtrace::proposal::NETWORK_KEYS;
use simtrace::store::{
    copy_selection, sort_selection, sub_minibatch_counts, DatasetWriter, DEFAULT_SHARD_SIZE,
};
use simtrace::train::{
    line_logger, train, validation_indices, DatasetSource, DEFAULT_VALIDATION_FRACTION,
};
use simtrace::{
    Endpoint, EndpointSpec, InProcessEndpoint, NetworkConfig, ProposalNetwork, RmhConfig,
    TensorValue, TraceDataset, TrainConfig, Value, WeightedTraceSet,
};

#[derive(Parser)]
#[command(
    name = "simtrace",
    about = "Inference over the execution traces of external simulators"
)]
struct Cli {
    /// Seed for every random choice the command makes.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Draw prior traces and write them as a dataset.
    Simulate {
        /// `inproc:<model>`, `spawn:<cmd>`, `tcp:<host>:<port>` or `ipc:<path>`.
        #[arg(long)]
        endpoint: String,
        #[arg(long)]
        n: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = DEFAULT_SHARD_SIZE)]
        shard_size: usize,
    },
    /// Sort or inspect a dataset.
    Dataset {
        #[command(subcommand)]
        action: DatasetAction,
    },
    /// Train a proposal network on a dataset.
    Train {
        #[arg(long)]
        dataset: PathBuf,
        /// Flat `key = value` file with network, optimizer, schedule and training keys.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        rank: usize,
        #[arg(long, default_value_t = 1)]
        world: usize,
        /// `host:port` of rank 0, required when `--world` exceeds 1.
        #[arg(long)]
        rendezvous: Option<String>,
        /// Dataset of validation traces.
        #[arg(long)]
        validation: Option<PathBuf>,
        /// Directory for the trained network.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Training log; standard output when absent.
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Sample the posterior for one observation.
    Infer {
        #[arg(long, value_enum)]
        engine: Engine,
        #[arg(long)]
        endpoint: String,
        /// Observation file: whitespace-separated numbers, optionally preceded by `# shape d1 d2 ...`.
        #[arg(long)]
        observation: PathBuf,
        #[arg(long)]
        n: usize,
        /// Trained network directory, for `ic`.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Independent chains, for `rmh`.
        #[arg(long, default_value_t = 1)]
        chains: usize,
        /// RMH iterations to discard; a tenth of `n` when absent.
        #[arg(long)]
        burn_in: Option<usize>,
        /// Sample table. RMH also writes one `<out>.chain<c>` file per chain.
        #[arg(long)]
        out: PathBuf,
    },
    /// Autocorrelation, effective sample size and Gelman-Rubin for chain files.
    Diagnose {
        #[arg(long, value_delimiter = ',', required = true)]
        chains: Vec<PathBuf>,
        /// `address#instance`, or a bare address for instance 1.
        #[arg(long)]
        address: String,
        #[arg(long, default_value_t = 10)]
        max_lag: usize,
    },
    /// Per-address Wasserstein-1 distances and histograms of two sample tables.
    Compare {
        #[arg(long)]
        a: PathBuf,
        #[arg(long)]
        b: PathBuf,
        #[arg(long, default_value_t = 20)]
        bins: usize,
        /// Directory for per-address histogram CSV files.
        #[arg(long)]
        histograms: Option<PathBuf>,
    },
}

#[derive(Subcommand)]
enum DatasetAction {
    /// Sort traces by type into a new dataset, holding out a validation split.
    Sort {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Receives every 50th trace, which is then left out of `out`.
        #[arg(long)]
        validation: Option<PathBuf>,
        #[arg(long, default_value_t = 4)]
        workers: usize,
        #[arg(long, default_value_t = DEFAULT_SHARD_SIZE)]
        shard_size: usize,
    },
    /// Summarize a dataset, optionally writing one trace's observation to a file.
    Inspect {
        #[arg(long)]
        input: PathBuf,
        /// Minibatch size for the sub-minibatch statistic.
        #[arg(long, default_value_t = 64)]
        minibatch: usize,
        #[arg(long, requires = "observation_out")]
        observation_of: Option<usize>,
        #[arg(long)]
        observation_out: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Engine {
    Prior,
    Is,
    Ic,
    Rmh,
}

enum CliError {
    Usage(String),
    Runtime(String),
}

impl<E: std::error::Error> From<E> for CliError {
    fn from(e: E) -> Self {
        CliError::Runtime(e.to_string())
    }
}

fn usage(msg: impl Display) -> CliError {
    CliError::Usage(msg.to_string())
}

fn runtime(msg: impl Display) -> CliError {
    CliError::Runtime(msg.to_string())
}

type CliResult<T = ()> = Result<T, CliError>;

enum Target {
    InProcess(InProcessEndpoint),
    Remote(Box<dyn Endpoint>),
}

fn open_endpoint(spec: &str) -> CliResult<Target> {
    let spec: EndpointSpec = spec.parse().map_err(usage)?;
    match spec {
        EndpointSpec::InProcess(name) => {
            let model = builtin(&name).ok_or_else(|| {
                usage(format!(
                    "unknown model {name}; expected one of {}",
                    BUILTIN_MODELS.join(", ")
                ))
            })?;
            Ok(Target::InProcess(InProcessEndpoint::new(model)))
        }
        other => Ok(Target::Remote(connect(
            &other,
            Some(Duration::from_secs(60)),
        )?)),
    }
}

fn create(path: &Path) -> CliResult<BufWriter<fs::File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    Ok(BufWriter::new(fs::File::create(path)?))
}

pub fn parse_observation(text: &str) -> Result<Value, String> {
    let mut shape: Option<Vec<u32>> = None;
    let mut data = Vec::new();
    for line in text.lines() {
        let line = line.trim();
        if let Some(rest) = line.strip_prefix('#') {
            if let Some(dims) = rest.trim().strip_prefix("shape") {
                let dims = dims
                    .split_whitespace()
                    .map(|d| {
                        d.parse::<u32>()
                            .map_err(|_| format!("bad shape entry {d:?}"))
                    })
                    .collect::<Result<Vec<_>, _>>()?;
                shape = Some(dims);
            }
            continue;
        }
        for tok in line.split_whitespace() {
            data.push(
                tok.parse::<f64>()
                    .map_err(|_| format!("bad number {tok:?}"))?,
            );
        }
    }
    match shape {
        None if data.len() == 1 => Ok(Value::F64(data[0])),
        None => Ok(Value::Tensor(TensorValue::vector(data))),
        Some(shape) => TensorValue::new(shape, data)
            .map(Value::Tensor)
            .ok_or_else(|| "observation size does not match its shape".to_string()),
    }
}

fn format_observation(v: &Value) -> String {
    let mut s = String::new();
    if let Value::Tensor(t) = v {
        let dims: Vec<String> = t.shape.iter().map(u32::to_string).collect();
        s.push_str(&format!("# shape {}\n", dims.join(" ")));
    }
    for x in v.to_flat() {
        s.push_str(&format!("{x}\n"));
    }
    s
}

fn simulate(seed: u64, endpoint: &str, n: usize, out: &Path, shard_size: usize) -> CliResult {
    if n == 0 {
        return Err(usage("--n must be at least 1"));
    }
    let mut target = open_endpoint(endpoint)?;
    let mut w = DatasetWriter::create(out, shard_size.max(1))?;
    let chunk = shard_size.max(1);
    let mut done = 0;
    while done < n {
        let m = chunk.min(n - done);
        let traces = match &mut target {
            Target::InProcess(ep) => sample_prior_parallel_from(ep, m, seed, done as u64)?,
            Target::Remote(ep) => sample_prior_from(ep.as_mut(), m, seed, done as u64)?,
        };
        for t in &traces {
            w.push(t)?;
        }
        done += m;
        log::info!("{done}/{n} traces");
    }
    let ds = w.finish()?;
    println!("wrote {} traces to {}", ds.len(), out.display());
    Ok(())
}

fn dataset(action: DatasetAction) -> CliResult {
    match action {
        DatasetAction::Sort {
            input,
            out,
            validation,
            workers,
            shard_size,
        } => {
            let ds = TraceDataset::open(&input)?;
            let held: Vec<usize> = match &validation {
                Some(_) => validation_indices(ds.len(), DEFAULT_VALIDATION_FRACTION),
                None => Vec::new(),
            };
            if let Some(dir) = &validation {
                let v = copy_selection(&ds, &held, dir, shard_size.max(1))?;
                println!("validation: {} traces in {}", v.len(), dir.display());
            }
            let mut skip = held.iter().peekable();
            let keep: Vec<usize> = (0..ds.len())
                .filter(|i| {
                    if skip.peek() == Some(&i) {
                        skip.next();
                        false
                    } else {
                        true
                    }
                })
                .collect();
            let sorted = sort_selection(&ds, &keep, &out, workers.max(1), shard_size.max(1))?;
            println!("sorted: {} traces in {}", sorted.len(), out.display());
            Ok(())
        }
        DatasetAction::Inspect {
            input,
            minibatch,
            observation_of,
            observation_out,
        } => {
            let ds = TraceDataset::open(&input)?;
            let types = ds.type_ids();
            let counts = sub_minibatch_counts(&types, minibatch);
            let mean = counts.iter().sum::<usize>() as f64 / counts.len().max(1) as f64;
            let lens = ds.latent_lens();
            let mut out = io::stdout().lock();
            writeln!(out, "traces\t{}", ds.len())?;
            writeln!(out, "sorted\t{}", ds.is_sorted())?;
            writeln!(out, "addresses\t{}", ds.dictionary().len())?;
            writeln!(
                out,
                "mean_latent_len\t{:.3}",
                lens.iter().map(|&l| l as f64).sum::<f64>() / lens.len().max(1) as f64
            )?;
            writeln!(out, "mean_sub_minibatches_per_{minibatch}\t{mean:.3}")?;
            let hist = ds.type_histogram();
            writeln!(out, "trace_types\t{}", hist.len())?;
            for (t, c) in hist {
                writeln!(out, "type\t{t:016x}\t{c}")?;
            }
            if let (Some(i), Some(path)) = (observation_of, observation_out) {
                let t = ds.get(i)?;
                let mut f = create(&path)?;
                f.write_all(format_observation(&t.observation).as_bytes())?;
                f.flush()?;
            }
            Ok(())
        }
    }
}

const TRAIN_KEYS: [&str; 5] = [
    "iterations",
    "minibatch_size",
    "buckets",
    "validate_every",
    "lr_scaling_exponent",
];

#[allow(clippy::too_many_arguments)]
fn train_cmd(
    seed: u64,
    dataset: &Path,
    config: Option<&Path>,
    rank: usize,
    world: usize,
    rendezvous: Option<&str>,
    validation: Option<&Path>,
    checkpoint: Option<PathBuf>,
    log_path: Option<&Path>,
) -> CliResult {
    if world == 0 || rank >= world {
        return Err(usage("--rank must be below --world"));
    }
    let mut kv = match config {
        Some(p) => KeyValues::parse(&fs::read_to_string(p)?).map_err(usage)?,
        None => KeyValues::default(),
    };
    let known: Vec<&str> = NETWORK_KEYS
        .iter()
        .chain(&OPTIMIZER_KEYS)
        .chain(&SCHEDULE_KEYS)
        .chain(&TRAIN_KEYS)
        .copied()
        .collect();
    kv.check_known(&known).map_err(usage)?;
    if kv.raw("seed").is_none() {
        kv.set("seed", seed);
    }
    let iterations: u64 = kv.get_or("iterations", 1000).map_err(usage)?;
    let global: usize = kv.get_or("minibatch_size", 64).map_err(usage)?;
    if global == 0 || global % world != 0 {
        return Err(usage(format!(
            "minibatch_size {global} must be a positive multiple of {world}"
        )));
    }
    let buckets: usize = kv.get_or("buckets", 1).map_err(usage)?;
    let net_cfg = NetworkConfig::from_kv(&kv).map_err(usage)?;
    let optimizer = OptimizerConfig::from_kv(&kv).map_err(usage)?;
    let mut schedule = Schedule::from_kv(&kv).map_err(usage)?;
    if let Some(alpha) = kv.get::<f64>("lr_scaling_exponent").map_err(usage)? {
        let scale = scale_lr(1.0, world, alpha);
        schedule = match schedule {
            Schedule::Constant(lr) => Schedule::Constant(lr * scale),
            Schedule::MultiStep {
                lr0,
                milestones,
                gamma,
            } => Schedule::MultiStep {
                lr0: lr0 * scale,
                milestones,
                gamma,
            },
            Schedule::Poly {
                order,
                lr0,
                lr_final,
                total,
            } => Schedule::Poly {
                order,
                lr0: lr0 * scale,
                lr_final,
                total,
            },
        };
    }
    if kv.raw("iterations").is_none() {
        if let Schedule::Poly { total, .. } = &mut schedule {
            *total = iterations;
        }
    }

    let ds = TraceDataset::open(dataset)?;
    if ds.is_empty() {
        return Err(runtime("dataset is empty"));
    }
    let first = ds.get(0)?;
    let obs_shape: Vec<usize> = match &first.observation {
        Value::Tensor(t) => t.shape.iter().map(|&d| d as usize).collect(),
        other => vec![other.to_flat().len()],
    };
    let mut net = ProposalNetwork::new(net_cfg, &obs_shape).map_err(runtime)?;
    for t in ds.iter() {
        net.pregenerate(std::iter::once(&t?)).map_err(runtime)?;
    }
    let validation: Vec<simtrace::Trace> = match validation {
        Some(p) => TraceDataset::open(p)?.iter().collect::<Result<_, _>>()?,
        None => Vec::new(),
    };
    let cfg = TrainConfig {
        iterations,
        optimizer,
        schedule,
        validate_every: kv.get_or("validate_every", 0).map_err(usage)?,
        checkpoint,
    };
    let sink: Box<dyn Write> = match log_path {
        Some(p) => Box::new(create(p)?),
        None => Box::new(io::stdout()),
    };
    let mut log = line_logger(sink);
    let mut source = DatasetSource::new(&ds, global / world, buckets, seed);
    log::info!(
        "{} parameters, {} addresses",
        net.param_count(),
        net.registry().len()
    );
    if world == 1 {
        train(
            &mut net,
            &mut source,
            &validation,
            &cfg,
            &mut SingleProcess,
            &mut log,
        )?;
    } else {
        let addr =
            rendezvous.ok_or_else(|| usage("--rendezvous is required when --world exceeds 1"))?;
        let mut group = tcp_group(rank, world, addr, Duration::from_secs(120))?;
        train(
            &mut net,
            &mut source,
            &validation,
            &cfg,
            &mut group,
            &mut log,
        )?;
    }
    Ok(())
}

fn summarize(table: &ResultTable, out: &mut dyn Write) -> io::Result<()> {
    writeln!(out, "address\tmean\tstd\tcount")?;
    for (c, name) in table.columns.iter().enumerate() {
        let m = table.marginal(c);
        let mass: f64 = m.iter().map(|p| p.1).sum();
        if mass <= 0.0 {
            continue;
        }
        let mean = m.iter().map(|(x, w)| x * w).sum::<f64>() / mass;
        let var = m.iter().map(|(x, w)| w * (x - mean).powi(2)).sum::<f64>() / mass;
        writeln!(out, "{name}\t{mean:.6}\t{:.6}\t{}", var.sqrt(), m.len())?;
    }
    Ok(())
}

fn write_table(path: &Path, samples: &WeightedTraceSet) -> CliResult {
    let mut f = create(path)?;
    write_results(
        &mut f,
        samples
            .traces
            .iter()
            .zip(samples.log_weights.iter().copied()),
    )?;
    f.flush()?;
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn infer(
    seed: u64,
    engine: Engine,
    endpoint: &str,
    observation: &Path,
    n: usize,
    checkpoint: Option<&Path>,
    chains: usize,
    burn_in: Option<usize>,
    out: &Path,
) -> CliResult {
    if n == 0 {
        return Err(usage("--n must be at least 1"));
    }
    if chains == 0 {
        return Err(usage("--chains must be at least 1"));
    }
    if engine == Engine::Ic && checkpoint.is_none() {
        return Err(usage("--engine ic needs --checkpoint"));
    }
    let obs = parse_observation(&fs::read_to_string(observation)?).map_err(usage)?;
    let mut target = open_endpoint(endpoint)?;
    let mut stdout = io::stdout().lock();
    match engine {
        Engine::Prior | Engine::Is | Engine::Ic => {
            let net = match checkpoint {
                Some(dir) if engine == Engine::Ic => {
                    Some(ProposalNetwork::load(dir).map_err(runtime)?)
                }
                _ => None,
            };
            let factory = net
                .as_ref()
                .map(|n| n as &dyn simtrace::gateway::ProposalFactory);
            let ws = match (engine, &mut target) {
                (Engine::Prior, Target::InProcess(ep)) => {
                    let traces = sample_prior_parallel(ep, n, seed)?;
                    WeightedTraceSet::new(traces, vec![0.0; n])?
                }
                (Engine::Prior, Target::Remote(ep)) => {
                    let traces = sample_prior_from(ep.as_mut(), n, seed, 0)?;
                    WeightedTraceSet::new(traces, vec![0.0; n])?
                }
                (_, Target::InProcess(ep)) => {
                    importance_sample_parallel(ep, &obs, n, seed, factory)?
                }
                (_, Target::Remote(ep)) => importance_sample(ep.as_mut(), &obs, n, seed, factory)?,
            };
            write_table(out, &ws)?;
            writeln!(stdout, "samples\t{}", ws.len())?;
            writeln!(stdout, "ess\t{:.3}", ws.ess())?;
            if engine != Engine::Prior {
                writeln!(stdout, "log_evidence\t{:.6}", estimate_log_evidence(&ws)?)?;
            }
        }
        Engine::Rmh => {
            let cfg = RmhConfig::new(n, seed);
            let burn = burn_in.unwrap_or_else(|| cfg.default_burn_in());
            let result = match &mut target {
                Target::InProcess(ep) => rmh_chains(ep, &obs, &cfg, chains)?,
                Target::Remote(ep) => {
                    let mut v = Vec::with_capacity(chains);
                    for c in 0..chains as u64 {
                        let cfg = RmhConfig {
                            seed: simtrace::rng::derive_seed(seed, c),
                            ..cfg.clone()
                        };
                        v.push(rmh_run(ep.as_mut(), &obs, &cfg, None)?);
                    }
                    v
                }
            };
            let mut pooled = WeightedTraceSet::default();
            for (c, chain) in result.iter().enumerate() {
                let states = chain.after_burn_in(burn);
                let mut f = create(&chain_path(out, c))?;
                write_results(&mut f, states.iter().map(|t| (&**t, 0.0)))?;
                f.flush()?;
                pooled.traces.extend(states.iter().map(|t| (**t).clone()));
                pooled
                    .log_weights
                    .extend(std::iter::repeat(0.0).take(states.len()));
                writeln!(
                    stdout,
                    "chain\t{c}\tacceptance\t{:.4}\tskipped\t{}",
                    chain.acceptance_rate(),
                    chain.skipped
                )?;
            }
            write_table(out, &pooled)?;
            writeln!(stdout, "samples\t{}", pooled.len())?;
        }
    }
    let table = read_results(&fs::read_to_string(out)?)?;
    summarize(&table, &mut stdout)?;
    Ok(())
}

fn chain_path(out: &Path, c: usize) -> PathBuf {
    let mut s = out.as_os_str().to_owned();
    s.push(format!(".chain{c}"));
    PathBuf::from(s)
}

fn diagnose(chains: &[PathBuf], address: &str, max_lag: usize) -> CliResult {
    let mut series = Vec::new();
    for p in chains {
        let table = read_results(&fs::read_to_string(p)?)?;
        let col = table
            .column(address)
            .ok_or_else(|| usage(format!("{} has no column {address}", p.display())))?;
        series.push(table.values(col));
    }
    let mut out = io::stdout().lock();
    for (p, s) in chains.iter().zip(&series) {
        writeln!(
            out,
            "chain\t{}\tlength\t{}\tess\t{:.2}",
            p.display(),
            s.len(),
            effective_sample_size(s)
        )?;
        let lags = max_lag.min(s.len().saturating_sub(1));
        let acf = autocorrelation(s, lags)?;
        let text: Vec<String> = acf.iter().map(|r| format!("{r:.4}")).collect();
        writeln!(out, "acf\t{}", text.join("\t"))?;
    }
    if series.len() >= 2 {
        let len = series.iter().map(Vec::len).min().unwrap_or(0);
        let trimmed: Vec<Vec<f64>> = series.iter().map(|s| s[..len].to_vec()).collect();
        writeln!(out, "gelman_rubin\t{:.4}", gelman_rubin(&trimmed)?)?;
    }
    Ok(())
}

fn compare(a: &Path, b: &Path, bins: usize, histograms: Option<&Path>) -> CliResult {
    let ta = read_results(&fs::read_to_string(a)?)?;
    let tb = read_results(&fs::read_to_string(b)?)?;
    let mut out = io::stdout().lock();
    writeln!(out, "address\tw1")?;
    if let Some(dir) = histograms {
        fs::create_dir_all(dir)?;
    }
    for (ca, name) in ta.columns.iter().enumerate() {
        let Some(cb) = tb.column(name) else { continue };
        let (ma, mb) = (ta.marginal(ca), tb.marginal(cb));
        if ma.is_empty() || mb.is_empty() {
            writeln!(out, "{name}\tNA")?;
            continue;
        }
        writeln!(out, "{name}\t{:.6}", wasserstein1(&ma, &mb))?;
        if let Some(dir) = histograms {
            let (lo, hi) = ma
                .iter()
                .chain(&mb)
                .fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), p| {
                    (l.min(p.0), h.max(p.0))
                });
            let hi = if hi > lo {
                hi + (hi - lo) * 1e-9
            } else {
                lo + 1.0
            };
            let (ha, hb) = (
                Histogram::new(&ma, bins, lo, hi),
                Histogram::new(&mb, bins, lo, hi),
            );
            let file: String = name
                .chars()
                .map(|c| if c.is_alphanumeric() { c } else { '_' })
                .collect();
            let mut f = create(&dir.join(format!("{file}.csv")))?;
            writeln!(f, "bin_low,bin_high,mass_a,mass_b")?;
            let width = (hi - lo) / ha.mass.len() as f64;
            for (k, (x, y)) in ha.mass.iter().zip(&hb.mass).enumerate() {
                let l = lo + k as f64 * width;
                writeln!(f, "{l},{},{x},{y}", l + width)?;
            }
            f.flush()?;
        }
    }
    Ok(())
}

fn run(cli: Cli) -> CliResult {
    let seed = cli.seed;
    match cli.command {
        Command::Simulate {
            endpoint,
            n,
            out,
            shard_size,
        } => simulate(seed, &endpoint, n, &out, shard_size),
        Command::Dataset { action } => dataset(action),
        Command::Train {
            dataset,
            config,
            rank,
            world,
            rendezvous,
            validation,
            checkpoint,
            log,
        } => train_cmd(
            seed,
            &dataset,
            config.as_deref(),
            rank,
            world,
            rendezvous.as_deref(),
            validation.as_deref(),
            checkpoint,
            log.as_deref(),
        ),
        Command::Infer {
            engine,
            endpoint,
            observation,
            n,
            checkpoint,
            chains,
            burn_in,
            out,
        } => infer(
            seed,
            engine,
            &endpoint,
            &observation,
            n,
            checkpoint.as_deref(),
            chains,
            burn_in,
            &out,
        ),
        Command::Diagnose {
            chains,
            address,
            max_lag,
        } => diagnose(&chains, &address, max_lag),
        Command::Compare {
            a,
            b,
            bins,
            histograms,
        } => compare(&a, &b, bins, histograms.as_deref()),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(2)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Usage(msg)) => {
            eprintln!("simtrace: usage error: {msg}");
            ExitCode::from(2)
        }
        Err(CliError::Runtime(msg)) => {
            eprintln!("simtrace: {msg}");
            ExitCode::from(3)
        }
    }
}
