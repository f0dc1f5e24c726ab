//! Helpers shared by the integration test targets.
#![allow(dead_code)]

use std::io::{self, Read, Write};
use std::net::{TcpListener, TcpStream};
use std::sync::{Arc, Mutex};

use proptest::prelude::*;
use simtrace::gateway::{sample_prior, StreamEndpoint};
use simtrace::models::builtin;
use simtrace::sim::serve;
use simtrace::wire::{from_hex, FrameDecoder};
use simtrace::{Distribution, TensorValue, Value, WireMessage};

pub const PROTOCOL_MD: &str = include_str!("../../../../PROTOCOL.md");

/// Lines of the fenced block tagged `tag` in PROTOCOL.md.
pub fn fenced_block(tag: &str) -> Vec<&'static str> {
    let open = format!("```{tag}");
    let mut lines = PROTOCOL_MD.lines().skip_while(|l| l.trim() != open);
    assert!(lines.next().is_some(), "PROTOCOL.md has no {tag} block");
    lines.take_while(|l| l.trim() != "```").collect()
}

/// `(name, frame bytes)` from the conformance vector block.
pub fn protocol_vectors() -> Vec<(String, Vec<u8>)> {
    fenced_block("vectors")
        .into_iter()
        .map(|l| {
            let (name, hex) = l.split_once(':').expect("name: hex");
            (name.trim().to_string(), from_hex(hex).expect("valid hex"))
        })
        .collect()
}

pub fn protocol_record_vector() -> Vec<u8> {
    from_hex(&fenced_block("record").join(" ")).expect("valid hex")
}

#[derive(Clone)]
struct Tee<S> {
    inner: S,
    log: Arc<Mutex<Vec<u8>>>,
}

impl<S: Read> Read for Tee<S> {
    fn read(&mut self, buf: &mut [u8]) -> io::Result<usize> {
        let n = self.inner.read(buf)?;
        self.log.lock().unwrap().extend_from_slice(&buf[..n]);
        Ok(n)
    }
}

impl<S: Write> Write for Tee<S> {
    fn write(&mut self, buf: &[u8]) -> io::Result<usize> {
        let n = self.inner.write(buf)?;
        self.log.lock().unwrap().extend_from_slice(&buf[..n]);
        Ok(n)
    }
    fn flush(&mut self) -> io::Result<()> {
        self.inner.flush()
    }
}

/// Every message of a TCP session in which a controller runs `model` `runs`
/// times under the prior, in wire order.
pub fn record_session(model: &str, runs: u64, seed: u64) -> Vec<WireMessage> {
    let model = builtin(model).expect("built-in model");
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap();
    let server = std::thread::spawn(move || {
        let (conn, _) = listener.accept().unwrap();
        let reader = conn.try_clone().unwrap();
        serve(&*model, reader, conn).unwrap()
    });
    let log = Arc::new(Mutex::new(Vec::new()));
    {
        let conn = TcpStream::connect(addr).unwrap();
        let reader = Tee {
            inner: conn.try_clone().unwrap(),
            log: log.clone(),
        };
        let writer = Tee {
            inner: conn,
            log: log.clone(),
        };
        let mut ep = StreamEndpoint::handshake(reader, writer).unwrap();
        sample_prior(&mut ep, runs as usize, seed).unwrap();
    }
    assert_eq!(server.join().unwrap(), runs);
    let mut dec = FrameDecoder::new();
    dec.extend(&log.lock().unwrap());
    let mut msgs = Vec::new();
    while let Some(m) = dec.next_message().unwrap() {
        msgs.push(m);
    }
    assert_eq!(dec.buffered(), 0);
    msgs
}

/// Every single deletion, duplication, and swap of two messages of
/// different kinds.
pub fn session_mutants(t: &[WireMessage]) -> Vec<(String, Vec<WireMessage>)> {
    let mut out = Vec::new();
    for i in 0..t.len() {
        let mut d = t.to_vec();
        d.remove(i);
        out.push((format!("delete {i}"), d));
        let mut d = t.to_vec();
        d.insert(i, t[i].clone());
        out.push((format!("duplicate {i}"), d));
        for j in i + 1..t.len() {
            if t[i].kind() != t[j].kind() {
                let mut d = t.to_vec();
                d.swap(i, j);
                out.push((format!("swap {i} {j}"), d));
            }
        }
    }
    out
}

fn finite() -> impl Strategy<Value = f64> {
    prop_oneof![-1e6..1e6f64, Just(0.0), Just(-0.0), prop::num::f64::NORMAL]
}

pub fn value_strategy() -> impl Strategy<Value = Value> {
    let tensor = prop::collection::vec(0u32..4, 0..4).prop_flat_map(|shape| {
        let n = shape.iter().product::<u32>() as usize;
        let data = prop::collection::vec(
            prop::num::f64::NORMAL
                | prop::num::f64::ZERO
                | prop::num::f64::INFINITE
                | prop::num::f64::SUBNORMAL,
            n,
        );
        (Just(shape), data).prop_map(|(shape, data)| Value::Tensor(TensorValue { shape, data }))
    });
    prop_oneof![
        (prop::num::f64::NORMAL | prop::num::f64::ZERO | prop::num::f64::INFINITE)
            .prop_map(Value::F64),
        any::<i64>().prop_map(Value::I64),
        any::<bool>().prop_map(Value::Bool),
        "\\PC{0,12}".prop_map(Value::Str),
        tensor,
    ]
}

pub fn distribution_strategy() -> impl Strategy<Value = Distribution> {
    let std = 1e-6..1e3f64;
    prop_oneof![
        (-1e3..1e3f64, 1e-3..1e3f64)
            .prop_map(|(low, w)| Distribution::Uniform { low, high: low + w }),
        (finite(), std.clone()).prop_map(|(mean, std)| Distribution::Normal { mean, std }),
        (finite(), std.clone(), -1e3..1e3f64, 1e-3..1e3f64, 0u8..3).prop_map(
            |(mean, std, low, w, open)| {
                let (low, high) = match open {
                    0 => (low, low + w),
                    1 => (f64::NEG_INFINITY, low),
                    _ => (low, f64::INFINITY),
                };
                Distribution::TruncatedNormal {
                    mean,
                    std,
                    low,
                    high,
                }
            }
        ),
        prop::collection::vec(1e-3..1.0f64, 1..6).prop_map(|w| {
            let s: f64 = w.iter().sum();
            Distribution::Categorical {
                probs: w.iter().map(|x| x / s).collect(),
            }
        }),
        (1e-3..1e3f64).prop_map(|rate| Distribution::Poisson { rate }),
        (1usize..4).prop_flat_map(move |d| {
            (
                prop::collection::vec(finite(), d),
                prop::collection::vec(std.clone(), d),
            )
                .prop_map(|(means, stds)| Distribution::MultivariateNormalDiag { means, stds })
        }),
    ]
}

pub fn message_strategy() -> impl Strategy<Value = WireMessage> {
    let addr = "[a-z]{1,6}(/[a-zA-Z0-9_]{1,8}){0,3}";
    prop_oneof![
        (any::<u8>(), "\\PC{0,16}").prop_map(|(version, system_name)| WireMessage::Handshake {
            version,
            system_name
        }),
        (any::<u8>(), "\\PC{0,16}").prop_map(|(version, model_name)| {
            WireMessage::HandshakeResult {
                version,
                model_name,
            }
        }),
        prop::option::of(value_strategy()).prop_map(|observation| WireMessage::Run { observation }),
        value_strategy().prop_map(|result| WireMessage::RunResult { result }),
        (
            addr,
            "\\PC{0,8}",
            distribution_strategy(),
            any::<bool>(),
            any::<bool>()
        )
            .prop_map(|(address, name, distribution, control, replace)| {
                WireMessage::SampleRequest {
                    address,
                    name,
                    distribution,
                    control,
                    replace,
                }
            }),
        value_strategy().prop_map(|value| WireMessage::SampleReply { value }),
        (addr, distribution_strategy(), value_strategy()).prop_map(
            |(address, distribution, observed_value)| {
                WireMessage::ObserveNotify {
                    address,
                    distribution,
                    observed_value,
                }
            }
        ),
        Just(WireMessage::ObserveAck),
    ]
}

/// Two-sided Kolmogorov-Smirnov statistic of `xs` against `cdf`.
pub fn ks_statistic(xs: &[f64], cdf: impl Fn(f64) -> f64) -> f64 {
    let mut xs = xs.to_vec();
    xs.sort_by(f64::total_cmp);
    let n = xs.len() as f64;
    xs.iter()
        .enumerate()
        .map(|(i, &x)| {
            let f = cdf(x);
            (f - i as f64 / n).max((i + 1) as f64 / n - f)
        })
        .fold(0.0, f64::max)
}

/// Asymptotic KS critical value at level 0.01.
pub fn ks_critical_01(n: usize) -> f64 {
    1.627_6 / (n as f64).sqrt()
}

/// Chi-square goodness-of-fit p-value of `counts` against `probs`.
pub fn chi_square_p(counts: &[usize], probs: &[f64]) -> f64 {
    use statrs::distribution::{ChiSquared, ContinuousCDF};
    let n: usize = counts.iter().sum();
    let stat: f64 = counts
        .iter()
        .zip(probs)
        .map(|(&c, &p)| {
            let e = p * n as f64;
            (c as f64 - e).powi(2) / e
        })
        .sum();
    ChiSquared::new((counts.len() - 1) as f64).unwrap().sf(stat)
}

/// Runs `f` on every rank of an in-process ring, one thread per rank.
pub fn run_group<T, F>(world: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(&mut dyn simtrace::Collective) -> T + Sync,
{
    let group = simtrace::collective::channel_group(world);
    std::thread::scope(|s| {
        let handles: Vec<_> = group
            .into_iter()
            .map(|mut ring| {
                let f = &f;
                s.spawn(move || f(&mut ring))
            })
            .collect();
        handles.into_iter().map(|h| h.join().unwrap()).collect()
    })
}
