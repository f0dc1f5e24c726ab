//! Simulator side of the protocol: the model interface and the loops that
//! serve a model over a stream or in-process.

use std::io::{Read, Write};
use std::sync::Arc;

use crate::distribution::Distribution;
use crate::gateway::{roundtrip, FramedStream, GatewayError, RunController};
use crate::trace::{resolve_address, AddressCache};
use crate::value::Value;
use crate::wire::{session_step, SessionState, WireMessage, PROTOCOL_VERSION};

#[derive(Debug, thiserror::Error)]
pub enum SimError {
    #[error("transport: {0}")]
    Transport(String),
    #[error("protocol: {0}")]
    Protocol(String),
    #[error("model: {0}")]
    Model(String),
}

/// What a model may do while running: draw and condition.
pub trait SimContext {
    fn sample(
        &mut self,
        frames: &[&str],
        name: &str,
        dist: Distribution,
        control: bool,
        replace: bool,
    ) -> Result<Value, SimError>;

    /// `value = None` lets the controller supply the observed value.
    fn observe(
        &mut self,
        frames: &[&str],
        dist: Distribution,
        value: Option<Value>,
    ) -> Result<(), SimError>;
}

impl dyn SimContext + '_ {
    pub fn sample_f64(
        &mut self,
        frames: &[&str],
        dist: Distribution,
        control: bool,
        replace: bool,
    ) -> Result<f64, SimError> {
        match self.sample(frames, "", dist, control, replace)? {
            Value::F64(x) => Ok(x),
            other => Err(SimError::Protocol(format!(
                "expected F64 draw, got {other}"
            ))),
        }
    }

    pub fn sample_index(
        &mut self,
        frames: &[&str],
        dist: Distribution,
        control: bool,
    ) -> Result<usize, SimError> {
        match self.sample(frames, "", dist, control, false)? {
            Value::I64(k) if k >= 0 => Ok(k as usize),
            other => Err(SimError::Protocol(format!(
                "expected index draw, got {other}"
            ))),
        }
    }
}

/// A stochastic simulator whose every random draw goes through a [`SimContext`].
pub trait Model: Send + Sync {
    fn name(&self) -> &str;
    fn run(&self, ctx: &mut dyn SimContext, observation: Option<&Value>)
        -> Result<Value, SimError>;
}

/// Context that hands each encoded message straight to a controller in the
/// same process.
pub struct LoopbackContext<'c, 'p, 'a> {
    ctl: &'c mut RunController<'p, 'a>,
    cache: Arc<AddressCache>,
    state: SessionState,
    error: Option<GatewayError>,
}

impl<'c, 'p, 'a> LoopbackContext<'c, 'p, 'a> {
    pub fn new(ctl: &'c mut RunController<'p, 'a>, cache: Arc<AddressCache>) -> Self {
        Self {
            ctl,
            cache,
            state: SessionState::InRun,
            error: None,
        }
    }

    /// Controller-side failure that interrupted the model, if any.
    pub fn take_error(&mut self) -> Option<GatewayError> {
        self.error.take()
    }

    fn exchange(&mut self, msg: WireMessage) -> Result<WireMessage, SimError> {
        let r = (|| {
            self.state = session_step(self.state, &msg)?;
            let reply = self
                .ctl
                .handle(roundtrip(&msg)?)?
                .ok_or_else(|| GatewayError::Protocol("controller ended the run".into()))?;
            let reply = roundtrip(&reply)?;
            self.state = session_step(self.state, &reply)?;
            Ok::<_, GatewayError>(reply)
        })();
        r.map_err(|e| {
            let text = e.to_string();
            self.error = Some(e);
            SimError::Transport(text)
        })
    }

    pub(crate) fn finish(mut self, done: WireMessage) -> Result<Value, GatewayError> {
        self.state = session_step(self.state, &done)?;
        let result = match &done {
            WireMessage::RunResult { result } => result.clone(),
            _ => unreachable!(),
        };
        match self.ctl.handle(done)? {
            None => Ok(result),
            Some(_) => Err(GatewayError::Protocol(
                "controller replied to RunResult".into(),
            )),
        }
    }
}

impl SimContext for LoopbackContext<'_, '_, '_> {
    fn sample(
        &mut self,
        frames: &[&str],
        name: &str,
        dist: Distribution,
        control: bool,
        replace: bool,
    ) -> Result<Value, SimError> {
        let address = resolve_address(frames, dist.tag(), &self.cache).to_string();
        match self.exchange(WireMessage::SampleRequest {
            address,
            name: name.to_string(),
            distribution: dist,
            control,
            replace,
        })? {
            WireMessage::SampleReply { value } => Ok(value),
            other => Err(SimError::Protocol(format!("unexpected {:?}", other.kind()))),
        }
    }

    fn observe(
        &mut self,
        frames: &[&str],
        dist: Distribution,
        value: Option<Value>,
    ) -> Result<(), SimError> {
        let address = resolve_address(frames, dist.tag(), &self.cache).to_string();
        self.exchange(WireMessage::ObserveNotify {
            address,
            distribution: dist,
            observed_value: value.unwrap_or_else(Value::empty),
        })?;
        Ok(())
    }
}

/// Context bound to a stream connected to a controller.
pub struct StreamContext<'s, R: Read, W: Write> {
    stream: &'s mut FramedStream<R, W>,
    cache: &'s AddressCache,
    state: SessionState,
}

impl<R: Read, W: Write> StreamContext<'_, R, W> {
    fn exchange(&mut self, msg: WireMessage) -> Result<WireMessage, SimError> {
        self.state =
            session_step(self.state, &msg).map_err(|e| SimError::Protocol(e.to_string()))?;
        self.stream
            .send(&msg)
            .map_err(|e| SimError::Transport(e.to_string()))?;
        let reply = self
            .stream
            .recv()
            .map_err(|e| SimError::Protocol(e.to_string()))?
            .ok_or_else(|| SimError::Transport("controller closed the connection".into()))?;
        self.state =
            session_step(self.state, &reply).map_err(|e| SimError::Protocol(e.to_string()))?;
        Ok(reply)
    }
}

impl<R: Read, W: Write> SimContext for StreamContext<'_, R, W> {
    fn sample(
        &mut self,
        frames: &[&str],
        name: &str,
        dist: Distribution,
        control: bool,
        replace: bool,
    ) -> Result<Value, SimError> {
        let address = resolve_address(frames, dist.tag(), self.cache).to_string();
        match self.exchange(WireMessage::SampleRequest {
            address,
            name: name.to_string(),
            distribution: dist,
            control,
            replace,
        })? {
            WireMessage::SampleReply { value } => Ok(value),
            other => Err(SimError::Protocol(format!("unexpected {:?}", other.kind()))),
        }
    }

    fn observe(
        &mut self,
        frames: &[&str],
        dist: Distribution,
        value: Option<Value>,
    ) -> Result<(), SimError> {
        let address = resolve_address(frames, dist.tag(), self.cache).to_string();
        self.exchange(WireMessage::ObserveNotify {
            address,
            distribution: dist,
            observed_value: value.unwrap_or_else(Value::empty),
        })?;
        Ok(())
    }
}

/// Serves `model` on one connection until the controller disconnects.
/// Returns the number of completed runs.
pub fn serve<R: Read, W: Write>(model: &dyn Model, reader: R, writer: W) -> Result<u64, SimError> {
    let mut stream = FramedStream::new(reader, writer);
    let cache = AddressCache::new();
    let proto = |e: GatewayError| SimError::Protocol(e.to_string());
    let hello = stream
        .recv()
        .map_err(proto)?
        .ok_or_else(|| SimError::Transport("controller closed before handshake".into()))?;
    let mut state = session_step(SessionState::AwaitingHandshake, &hello)
        .map_err(|e| SimError::Protocol(e.to_string()))?;
    let reply = WireMessage::HandshakeResult {
        version: PROTOCOL_VERSION,
        model_name: model.name().to_string(),
    };
    state = session_step(state, &reply).map_err(|e| SimError::Protocol(e.to_string()))?;
    stream.send(&reply).map_err(proto)?;
    let mut runs = 0;
    loop {
        let msg = match stream.recv().map_err(proto)? {
            Some(m) => m,
            None => return Ok(runs),
        };
        state = session_step(state, &msg).map_err(|e| SimError::Protocol(e.to_string()))?;
        let observation = match msg {
            WireMessage::Run { observation } => observation,
            _ => unreachable!("session_step admits only Run here"),
        };
        let result = {
            let mut ctx = StreamContext {
                stream: &mut stream,
                cache: &cache,
                state,
            };
            model.run(&mut ctx, observation.as_ref())?
        };
        let done = WireMessage::RunResult { result };
        state = session_step(SessionState::InRun, &done)
            .map_err(|e| SimError::Protocol(e.to_string()))?;
        stream.send(&done).map_err(proto)?;
        runs += 1;
    }
}
