//! Controller side of a simulator session: services sample and observe
//! requests according to a sampling policy and assembles traces.

use std::collections::{HashMap, VecDeque};
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::net::TcpStream;
use std::process::{Child, ChildStdin, ChildStdout, Command, Stdio};
use std::sync::Arc;
use std::time::Duration;

use crate::distribution::{Distribution, Proposal};
use crate::rng::RunRng;
use crate::sim::{LoopbackContext, Model};
use crate::trace::{Address, AddressCache, EntryKind, Trace, TraceEntry};
use crate::value::{TensorValue, Value};
use crate::wire::{
    self, session_step, DecodeError, EncodeError, SessionError, SessionState, WireMessage,
    PROTOCOL_VERSION,
};

#[derive(Debug, thiserror::Error)]
pub enum GatewayError {
    #[error("simulator run timed out")]
    RunTimeout,
    #[error(transparent)]
    Session(#[from] SessionError),
    #[error("simulator run aborted: {0}")]
    RunAborted(String),
    #[error("protocol violation: {0}")]
    Protocol(String),
    #[error(transparent)]
    Encode(#[from] EncodeError),
    #[error("invalid endpoint spec `{0}`")]
    InvalidSpec(String),
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
}

impl From<DecodeError> for GatewayError {
    fn from(e: DecodeError) -> Self {
        GatewayError::Protocol(e.to_string())
    }
}

/// Supplies proposal distributions for controlled draws, in trace order.
pub trait ProposalSource {
    fn begin_run(&mut self, observation: Option<&Value>);
    /// Proposal for the draw at `address`; `None` draws from the prior.
    fn propose(&mut self, address: &Address, prior: &Distribution) -> Option<Proposal>;
    /// Informs the source of the value finally used at `address`.
    fn record(&mut self, address: &Address, prior: &Distribution, value: &Value);
}

/// Hands out independent proposal sources, one per concurrent run stream.
pub trait ProposalFactory: Sync {
    fn source(&self) -> Box<dyn ProposalSource + '_>;
}

/// Values to reuse, consumed per address in order.
#[derive(Clone, Debug, Default)]
pub struct ReplayMap {
    values: HashMap<Address, VecDeque<Value>>,
    /// Also replay draws flagged `control = false`.
    pub include_uncontrolled: bool,
}

impl ReplayMap {
    pub fn new() -> Self {
        Self::default()
    }

    /// Every draw of `trace` including replaced and uncontrolled ones, so that a
    /// deterministic simulator reproduces it exactly.
    pub fn exact(trace: &Trace) -> Self {
        let mut m = Self {
            include_uncontrolled: true,
            ..Self::default()
        };
        for e in trace
            .entries
            .iter()
            .filter(|e| e.kind != EntryKind::Observed)
        {
            m.push(e.address.clone(), e.value.clone());
        }
        m
    }

    /// Final values of the controlled latents of `trace`.
    pub fn controlled(trace: &Trace) -> Self {
        let mut m = Self::default();
        for e in trace.controlled() {
            m.push(e.address.clone(), e.value.clone());
        }
        m
    }

    pub fn push(&mut self, address: Address, value: Value) {
        self.values.entry(address).or_default().push_back(value);
    }

    pub fn set(&mut self, address: Address, value: Value) {
        self.values.insert(address, VecDeque::from([value]));
    }

    fn take(&mut self, address: &Address) -> Option<Value> {
        self.values.get_mut(address).and_then(VecDeque::pop_front)
    }
}

pub enum SamplingPolicy<'a> {
    Prior,
    /// Reuse stored values; missing addresses fall back to the prior.
    Replay(ReplayMap),
    /// Draw controlled latents from a proposal and accumulate importance weights.
    Guided(&'a mut dyn ProposalSource),
}

/// Outcome of one run.
#[derive(Clone, Debug)]
pub struct Execution {
    pub trace: Trace,
    /// Per entry: value taken from a replay map rather than freshly drawn.
    pub replayed: Vec<bool>,
    /// Per entry: log density under the distribution the value was drawn from.
    pub log_q: Vec<f64>,
}

/// Services the simulator's messages for a single run.
pub struct RunController<'p, 'a> {
    policy: &'p mut SamplingPolicy<'a>,
    rng: RunRng,
    draw: u64,
    entries: Vec<TraceEntry>,
    replayed: Vec<bool>,
    log_q: Vec<f64>,
    counters: HashMap<Arc<str>, u32>,
    /// Index of the latest replace-draw per full address within the current
    /// uninterrupted stretch of replace-draws.
    open_replace: HashMap<Arc<str>, usize>,
    observation: Option<Value>,
    state: SessionState,
}

impl<'p, 'a> RunController<'p, 'a> {
    pub fn new(
        policy: &'p mut SamplingPolicy<'a>,
        seed: u64,
        run_index: u64,
        observation: Option<Value>,
    ) -> Self {
        if let SamplingPolicy::Guided(src) = policy {
            src.begin_run(observation.as_ref());
        }
        Self {
            policy,
            rng: RunRng::new(seed, run_index),
            draw: 0,
            entries: Vec::new(),
            replayed: Vec::new(),
            log_q: Vec::new(),
            counters: HashMap::new(),
            open_replace: HashMap::new(),
            observation,
            state: SessionState::AwaitingRun,
        }
    }

    pub fn observation(&self) -> Option<&Value> {
        self.observation.as_ref()
    }

    /// The Run message opening this run.
    pub fn run_message(&mut self) -> Result<WireMessage, GatewayError> {
        let m = WireMessage::Run {
            observation: self.observation.clone(),
        };
        self.state = session_step(self.state, &m)?;
        Ok(m)
    }

    fn next_instance(&mut self, full: &Arc<str>, replace: bool) -> u32 {
        if replace {
            if let Some(&idx) = self.open_replace.get(full) {
                self.entries[idx].kind = EntryKind::Replaced;
                return self.entries[idx].address.instance;
            }
        } else {
            self.open_replace.clear();
        }
        let c = self.counters.entry(full.clone()).or_insert(0);
        *c += 1;
        *c
    }

    /// Handles one simulator message. Returns the reply, or `None` once the run
    /// has finished with `RunResult`.
    pub fn handle(&mut self, msg: WireMessage) -> Result<Option<WireMessage>, GatewayError> {
        self.state = session_step(self.state, &msg)?;
        let reply = match msg {
            WireMessage::SampleRequest {
                address,
                distribution,
                control,
                replace,
                ..
            } => {
                let full: Arc<str> = address.into();
                let instance = self.next_instance(&full, replace);
                let addr = Address::new(full.clone(), instance);
                let value = self.choose(&addr, &distribution, control, replace)?;
                let entry = TraceEntry::new(
                    addr,
                    distribution,
                    value.clone(),
                    EntryKind::Latent,
                    control,
                    replace,
                );
                if replace {
                    self.open_replace.insert(full, self.entries.len());
                }
                self.entries.push(entry);
                WireMessage::SampleReply { value }
            }
            WireMessage::ObserveNotify {
                address,
                distribution,
                observed_value,
            } => {
                let full: Arc<str> = address.into();
                let instance = self.next_instance(&full, false);
                let value = if observed_value.is_empty_marker() {
                    let rng = self.rng.draw(self.draw);
                    self.draw += 1;
                    distribution.sample(rng)
                } else {
                    observed_value
                };
                self.entries.push(TraceEntry::new(
                    Address::new(full, instance),
                    distribution,
                    value,
                    EntryKind::Observed,
                    false,
                    false,
                ));
                self.replayed.push(false);
                self.log_q.push(0.0);
                WireMessage::ObserveAck
            }
            WireMessage::RunResult { .. } => return Ok(None),
            other => {
                return Err(GatewayError::Protocol(format!(
                    "controller cannot accept {:?}",
                    other.kind()
                )))
            }
        };
        self.state = session_step(self.state, &reply)?;
        Ok(Some(reply))
    }

    fn choose(
        &mut self,
        addr: &Address,
        prior: &Distribution,
        control: bool,
        replace: bool,
    ) -> Result<Value, GatewayError> {
        let draw = self.draw;
        self.draw += 1;
        let (value, replayed, log_q) = match &mut *self.policy {
            SamplingPolicy::Prior => {
                let v = prior.sample(self.rng.draw(draw));
                let lq = prior.log_density(&v);
                (v, false, lq)
            }
            SamplingPolicy::Replay(map) => {
                let stored = if control || map.include_uncontrolled {
                    map.take(addr)
                } else {
                    None
                };
                match stored {
                    Some(v) => {
                        let lq = prior.log_density(&v);
                        (v, true, lq)
                    }
                    None => {
                        let v = prior.sample(self.rng.draw(draw));
                        let lq = prior.log_density(&v);
                        (v, false, lq)
                    }
                }
            }
            SamplingPolicy::Guided(src) => {
                let proposal = if control && !replace {
                    src.propose(addr, prior)
                } else {
                    None
                };
                let (v, lq) = match proposal {
                    Some(q) => {
                        let v = q.sample(self.rng.draw(draw));
                        let lq = q.log_density(&v);
                        (v, lq)
                    }
                    None => {
                        let v = prior.sample(self.rng.draw(draw));
                        let lq = prior.log_density(&v);
                        (v, lq)
                    }
                };
                if control && !replace {
                    src.record(addr, prior, &v);
                }
                (v, false, lq)
            }
        };
        self.replayed.push(replayed);
        self.log_q.push(log_q);
        Ok(value)
    }

    /// Closes the run and assembles the trace.
    pub fn finish(self, result: Value) -> Execution {
        let observation = match self.observation {
            Some(o) => o,
            None => {
                let observed: Vec<&TraceEntry> = self
                    .entries
                    .iter()
                    .filter(|e| e.kind == EntryKind::Observed)
                    .collect();
                match observed.as_slice() {
                    [] => Value::empty(),
                    [one] => one.value.clone(),
                    many => Value::Tensor(TensorValue::vector(
                        many.iter().flat_map(|e| e.value.to_flat()).collect(),
                    )),
                }
            }
        };
        let guided = matches!(self.policy, SamplingPolicy::Guided(_));
        let mut trace = Trace::new(self.entries, observation, result);
        if guided {
            let log_q: f64 = trace
                .entries
                .iter()
                .zip(&self.log_q)
                .filter(|(e, _)| e.is_latent())
                .map(|(_, q)| q)
                .sum();
            trace.log_weight = Some(trace.log_joint() - log_q);
        }
        Execution {
            trace,
            replayed: self.replayed,
            log_q: self.log_q,
        }
    }
}

/// A connection able to carry simulator runs.
pub trait Endpoint: Send {
    fn model_name(&self) -> &str;
    /// Performs one run, feeding every simulator message to `ctl`; returns the
    /// run's result value.
    fn execute_run(&mut self, ctl: &mut RunController<'_, '_>) -> Result<Value, GatewayError>;
}

/// Runs a model in the controller's own process, passing every message through
/// the wire codec.
#[derive(Clone)]
pub struct InProcessEndpoint {
    model: Arc<dyn Model>,
    cache: Arc<AddressCache>,
}

impl InProcessEndpoint {
    pub fn new(model: Arc<dyn Model>) -> Self {
        Self {
            model,
            cache: Arc::new(AddressCache::new()),
        }
    }

    pub fn model(&self) -> &Arc<dyn Model> {
        &self.model
    }
}

impl Endpoint for InProcessEndpoint {
    fn model_name(&self) -> &str {
        self.model.name()
    }

    fn execute_run(&mut self, ctl: &mut RunController<'_, '_>) -> Result<Value, GatewayError> {
        let run = roundtrip(&ctl.run_message()?)?;
        let observation = match run {
            WireMessage::Run { observation } => observation,
            _ => unreachable!(),
        };
        let mut ctx = LoopbackContext::new(ctl, self.cache.clone());
        let result = self
            .model
            .run(&mut ctx, observation.as_ref())
            .map_err(|e| match ctx.take_error() {
                Some(inner) => inner,
                None => GatewayError::RunAborted(e.to_string()),
            })?;
        let done = roundtrip(&WireMessage::RunResult { result })?;
        ctx.finish(done)
    }
}

/// Encodes and decodes a message, as if it crossed a socket.
pub(crate) fn roundtrip(m: &WireMessage) -> Result<WireMessage, GatewayError> {
    let bytes = wire::encode(m)?;
    Ok(wire::decode(&bytes)?.0)
}

/// Frame transport over any byte stream pair.
pub struct FramedStream<R: Read, W: Write> {
    reader: BufReader<R>,
    writer: BufWriter<W>,
}

impl<R: Read, W: Write> FramedStream<R, W> {
    pub fn new(reader: R, writer: W) -> Self {
        Self {
            reader: BufReader::new(reader),
            writer: BufWriter::new(writer),
        }
    }

    pub fn send(&mut self, m: &WireMessage) -> Result<(), GatewayError> {
        let bytes = wire::encode(m)?;
        self.writer.write_all(&bytes).map_err(map_io)?;
        self.writer.flush().map_err(map_io)?;
        Ok(())
    }

    /// Next frame; `Ok(None)` on a clean end of stream at a frame boundary.
    pub fn recv(&mut self) -> Result<Option<WireMessage>, GatewayError> {
        let mut header = [0u8; 4];
        match read_full(&mut self.reader, &mut header) {
            Ok(0) => return Ok(None),
            Ok(4) => {}
            Ok(_) => return Err(GatewayError::RunAborted("stream closed mid-frame".into())),
            Err(e) => return Err(map_io(e)),
        }
        let len = u32::from_le_bytes(header) as usize;
        if len > wire::MAX_PAYLOAD_LEN {
            return Err(GatewayError::Protocol(format!(
                "frame length {len} exceeds limit"
            )));
        }
        let mut payload = vec![0u8; len];
        match read_full(&mut self.reader, &mut payload) {
            Ok(n) if n == len => {}
            Ok(_) => return Err(GatewayError::RunAborted("stream closed mid-frame".into())),
            Err(e) => return Err(map_io(e)),
        }
        Ok(Some(wire::decode_payload(&payload)?))
    }
}

fn read_full(r: &mut impl Read, buf: &mut [u8]) -> io::Result<usize> {
    let mut got = 0;
    while got < buf.len() {
        match r.read(&mut buf[got..]) {
            Ok(0) => break,
            Ok(n) => got += n,
            Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
            Err(e) => return Err(e),
        }
    }
    Ok(got)
}

fn map_io(e: io::Error) -> GatewayError {
    match e.kind() {
        io::ErrorKind::WouldBlock | io::ErrorKind::TimedOut => GatewayError::RunTimeout,
        io::ErrorKind::BrokenPipe
        | io::ErrorKind::ConnectionReset
        | io::ErrorKind::ConnectionAborted
        | io::ErrorKind::UnexpectedEof => GatewayError::RunAborted(e.to_string()),
        _ => GatewayError::Io(e),
    }
}

/// Controller end of a stream connection to an out-of-process simulator.
pub struct StreamEndpoint<R: Read + Send, W: Write + Send> {
    stream: FramedStream<R, W>,
    model_name: String,
    child: Option<Child>,
}

impl<R: Read + Send, W: Write + Send> StreamEndpoint<R, W> {
    /// Performs the handshake on a fresh connection.
    pub fn handshake(reader: R, writer: W) -> Result<Self, GatewayError> {
        let mut stream = FramedStream::new(reader, writer);
        let hello = WireMessage::Handshake {
            version: PROTOCOL_VERSION,
            system_name: concat!("simtrace ", env!("CARGO_PKG_VERSION")).to_string(),
        };
        let state = session_step(SessionState::AwaitingHandshake, &hello)?;
        stream.send(&hello)?;
        let reply = stream
            .recv()?
            .ok_or_else(|| GatewayError::RunAborted("simulator closed during handshake".into()))?;
        session_step(state, &reply)?;
        let model_name = match reply {
            WireMessage::HandshakeResult {
                version,
                model_name,
            } => {
                if version != PROTOCOL_VERSION {
                    return Err(GatewayError::Protocol(format!(
                        "simulator speaks protocol version {version}"
                    )));
                }
                model_name
            }
            _ => unreachable!("checked by session_step"),
        };
        Ok(Self {
            stream,
            model_name,
            child: None,
        })
    }
}

impl<R: Read + Send, W: Write + Send> Endpoint for StreamEndpoint<R, W> {
    fn model_name(&self) -> &str {
        &self.model_name
    }

    fn execute_run(&mut self, ctl: &mut RunController<'_, '_>) -> Result<Value, GatewayError> {
        let run = ctl.run_message()?;
        self.stream.send(&run)?;
        loop {
            let msg = self
                .stream
                .recv()?
                .ok_or_else(|| GatewayError::RunAborted("simulator closed mid-run".into()))?;
            let result = match &msg {
                WireMessage::RunResult { result } => Some(result.clone()),
                _ => None,
            };
            match ctl.handle(msg)? {
                Some(reply) => self.stream.send(&reply)?,
                None => return Ok(result.expect("run finished on RunResult")),
            }
        }
    }
}

impl<R: Read + Send, W: Write + Send> Drop for StreamEndpoint<R, W> {
    fn drop(&mut self) {
        if let Some(child) = &mut self.child {
            let _ = child.kill();
            let _ = child.wait();
        }
    }
}

pub type TcpEndpoint = StreamEndpoint<TcpStream, TcpStream>;
pub type SpawnEndpoint = StreamEndpoint<ChildStdout, ChildStdin>;

pub fn connect_tcp(addr: &str, timeout: Option<Duration>) -> Result<TcpEndpoint, GatewayError> {
    let s = TcpStream::connect(addr)?;
    s.set_nodelay(true)?;
    s.set_read_timeout(timeout)?;
    let w = s.try_clone()?;
    TcpEndpoint::handshake(s, w)
}

#[cfg(unix)]
pub fn connect_ipc(
    path: &str,
    timeout: Option<Duration>,
) -> Result<
    StreamEndpoint<std::os::unix::net::UnixStream, std::os::unix::net::UnixStream>,
    GatewayError,
> {
    let s = std::os::unix::net::UnixStream::connect(path)?;
    s.set_read_timeout(timeout)?;
    let w = s.try_clone()?;
    StreamEndpoint::handshake(s, w)
}

/// Launches `cmd` through the shell and speaks the protocol over its stdio.
pub fn spawn(cmd: &str) -> Result<SpawnEndpoint, GatewayError> {
    let mut child = Command::new("sh")
        .arg("-c")
        .arg(cmd)
        .stdin(Stdio::piped())
        .stdout(Stdio::piped())
        .stderr(Stdio::inherit())
        .spawn()?;
    let stdin = child.stdin.take().expect("piped stdin");
    let stdout = child.stdout.take().expect("piped stdout");
    let mut ep = match SpawnEndpoint::handshake(stdout, stdin) {
        Ok(ep) => ep,
        Err(e) => {
            let _ = child.kill();
            let _ = child.wait();
            return Err(e);
        }
    };
    ep.child = Some(child);
    Ok(ep)
}

/// Parsed endpoint string.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum EndpointSpec {
    Spawn(String),
    Tcp(String),
    Ipc(String),
    /// A built-in model run inside the controller process.
    InProcess(String),
}

impl std::str::FromStr for EndpointSpec {
    type Err = GatewayError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (scheme, rest) = s
            .split_once(':')
            .ok_or_else(|| GatewayError::InvalidSpec(s.to_string()))?;
        if rest.is_empty() {
            return Err(GatewayError::InvalidSpec(s.to_string()));
        }
        match scheme {
            "spawn" => Ok(EndpointSpec::Spawn(rest.to_string())),
            "tcp"
                if rest
                    .rsplit_once(':')
                    .is_some_and(|(h, p)| !h.is_empty() && p.parse::<u16>().is_ok()) =>
            {
                Ok(EndpointSpec::Tcp(rest.to_string()))
            }
            "ipc" => Ok(EndpointSpec::Ipc(rest.to_string())),
            "inproc" => Ok(EndpointSpec::InProcess(rest.to_string())),
            _ => Err(GatewayError::InvalidSpec(s.to_string())),
        }
    }
}

/// Connects to an out-of-process endpoint; in-process specs are resolved by
/// the caller, which owns the model registry.
pub fn connect(
    spec: &EndpointSpec,
    timeout: Option<Duration>,
) -> Result<Box<dyn Endpoint>, GatewayError> {
    match spec {
        EndpointSpec::Spawn(cmd) => Ok(Box::new(spawn(cmd)?)),
        EndpointSpec::Tcp(addr) => Ok(Box::new(connect_tcp(addr, timeout)?)),
        #[cfg(unix)]
        EndpointSpec::Ipc(path) => Ok(Box::new(connect_ipc(path, timeout)?)),
        #[cfg(not(unix))]
        EndpointSpec::Ipc(path) => Err(GatewayError::InvalidSpec(format!("ipc:{path}"))),
        EndpointSpec::InProcess(name) => Err(GatewayError::InvalidSpec(format!("inproc:{name}"))),
    }
}

/// Runs the simulator once under `policy`.
pub fn execute(
    endpoint: &mut dyn Endpoint,
    observation: Option<&Value>,
    policy: &mut SamplingPolicy<'_>,
    seed: u64,
    run_index: u64,
) -> Result<Execution, GatewayError> {
    let mut ctl = RunController::new(policy, seed, run_index, observation.cloned());
    let result = endpoint.execute_run(&mut ctl)?;
    Ok(ctl.finish(result))
}

/// Draws `n` traces from the joint prior; run `i` uses run index `first_run + i`.
pub fn sample_prior(
    endpoint: &mut dyn Endpoint,
    n: usize,
    seed: u64,
) -> Result<Vec<Trace>, GatewayError> {
    sample_prior_from(endpoint, n, seed, 0)
}

pub fn sample_prior_from(
    endpoint: &mut dyn Endpoint,
    n: usize,
    seed: u64,
    first_run: u64,
) -> Result<Vec<Trace>, GatewayError> {
    let mut out = Vec::with_capacity(n);
    for i in 0..n as u64 {
        let mut policy = SamplingPolicy::Prior;
        out.push(execute(endpoint, None, &mut policy, seed, first_run + i)?.trace);
    }
    Ok(out)
}

/// Prior sampling fanned out over cloned in-process endpoints.
pub fn sample_prior_parallel(
    endpoint: &InProcessEndpoint,
    n: usize,
    seed: u64,
) -> Result<Vec<Trace>, GatewayError> {
    sample_prior_parallel_from(endpoint, n, seed, 0)
}

/// Parallel [`sample_prior_from`]; the output does not depend on thread count.
pub fn sample_prior_parallel_from(
    endpoint: &InProcessEndpoint,
    n: usize,
    seed: u64,
    first_run: u64,
) -> Result<Vec<Trace>, GatewayError> {
    use rayon::prelude::*;
    (first_run..first_run + n as u64)
        .into_par_iter()
        .map_init(
            || endpoint.clone(),
            |ep, i| {
                let mut policy = SamplingPolicy::Prior;
                execute(ep, None, &mut policy, seed, i).map(|x| x.trace)
            },
        )
        .collect()
}
