//! Values exchanged with simulators and stored in traces.

use std::fmt;

/// Dense row-major tensor of `f64` as carried on the wire.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct TensorValue {
    pub shape: Vec<u32>,
    pub data: Vec<f64>,
}

impl TensorValue {
    pub fn new(shape: Vec<u32>, data: Vec<f64>) -> Option<Self> {
        let n: usize = shape.iter().map(|&d| d as usize).product();
        (n == data.len()).then_some(Self { shape, data })
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Self {
            shape: vec![data.len() as u32],
            data,
        }
    }

    pub fn is_valid(&self) -> bool {
        self.shape.iter().map(|&d| d as usize).product::<usize>() == self.data.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }
}

/// A value produced by a draw, supplied as an observation, or returned by a run.
#[derive(Clone, Debug, PartialEq)]
pub enum Value {
    F64(f64),
    I64(i64),
    Bool(bool),
    Str(String),
    Tensor(TensorValue),
}

impl Value {
    /// Marker sent by a simulator that has no data for an observe statement.
    pub fn empty() -> Self {
        Value::Tensor(TensorValue {
            shape: vec![0],
            data: Vec::new(),
        })
    }

    pub fn is_empty_marker(&self) -> bool {
        matches!(self, Value::Tensor(t) if t.data.is_empty())
    }

    pub fn as_f64(&self) -> Option<f64> {
        match self {
            Value::F64(x) => Some(*x),
            Value::I64(k) => Some(*k as f64),
            Value::Bool(b) => Some(f64::from(u8::from(*b))),
            _ => None,
        }
    }

    pub fn as_i64(&self) -> Option<i64> {
        match self {
            Value::I64(k) => Some(*k),
            _ => None,
        }
    }

    pub fn as_tensor(&self) -> Option<&TensorValue> {
        match self {
            Value::Tensor(t) => Some(t),
            _ => None,
        }
    }

    /// Flattened numeric view; strings yield nothing.
    pub fn to_flat(&self) -> Vec<f64> {
        match self {
            Value::Tensor(t) => t.data.clone(),
            Value::Str(_) => Vec::new(),
            other => vec![other.as_f64().unwrap_or(f64::NAN)],
        }
    }

    /// Bitwise equality, treating NaN payloads as equal when their bits match.
    pub fn bit_eq(&self, other: &Value) -> bool {
        match (self, other) {
            (Value::F64(a), Value::F64(b)) => a.to_bits() == b.to_bits(),
            (Value::Tensor(a), Value::Tensor(b)) => {
                a.shape == b.shape
                    && a.data.len() == b.data.len()
                    && a.data
                        .iter()
                        .zip(&b.data)
                        .all(|(x, y)| x.to_bits() == y.to_bits())
            }
            (a, b) => a == b,
        }
    }
}

impl fmt::Display for Value {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Value::F64(x) => write!(f, "{x}"),
            Value::I64(k) => write!(f, "{k}"),
            Value::Bool(b) => write!(f, "{b}"),
            Value::Str(s) => write!(f, "{s:?}"),
            Value::Tensor(t) => write!(f, "tensor{:?}", t.shape),
        }
    }
}

impl From<f64> for Value {
    fn from(x: f64) -> Self {
        Value::F64(x)
    }
}

impl From<i64> for Value {
    fn from(k: i64) -> Self {
        Value::I64(k)
    }
}
