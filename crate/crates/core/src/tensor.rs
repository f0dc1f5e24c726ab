//! Dense f64 tensors with tape-based reverse-mode differentiation, covering
//! what the proposal network needs and nothing more.

use std::collections::{BTreeMap, HashMap};
use std::io::{self, Read, Write};
use std::sync::Arc;

use rand::Rng;

use crate::distribution::{log_std_normal_mass, std_normal_pdf};
use crate::trace::Fnv1a;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
#[error("shape error: {0}")]
pub struct ShapeError(pub String);

/// Row-major dense tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self, ShapeError> {
        if shape.iter().product::<usize>() != data.len() {
            return Err(ShapeError(format!(
                "shape {shape:?} does not hold {} values",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn scalar(x: f64) -> Self {
        Self {
            shape: vec![1],
            data: vec![x],
        }
    }

    pub fn row(data: Vec<f64>) -> Self {
        Self {
            shape: vec![1, data.len()],
            data,
        }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self, ShapeError> {
        Self::new(vec![rows, cols], data)
    }

    /// Uniform in ±sqrt(6 / (fan_in + fan_out)).
    pub fn glorot<R: Rng + ?Sized>(
        shape: &[usize],
        fan_in: usize,
        fan_out: usize,
        rng: &mut R,
    ) -> Self {
        let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
        Self {
            shape: shape.to_vec(),
            data: (0..shape.iter().product::<usize>())
                .map(|_| rng.random_range(-a..a))
                .collect(),
        }
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    pub fn cols(&self) -> usize {
        self.numel() / self.shape[0].max(1)
    }

    pub fn item(&self) -> f64 {
        self.data[0]
    }

    pub fn norm(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum::<f64>().sqrt()
    }
}

/// `c += op(a) · op(b)` for row-major operands; `op` transposes when the flag is set.
#[allow(clippy::too_many_arguments)]
fn gemm(m: usize, k: usize, n: usize, a: &[f64], a_t: bool, b: &[f64], b_t: bool, c: &mut [f64]) {
    let (rsa, csa) = if a_t {
        (1, m as isize)
    } else {
        (k as isize, 1)
    };
    let (rsb, csb) = if b_t {
        (1, k as isize)
    } else {
        (n as isize, 1)
    };
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    // SAFETY: the asserts above bound every index the strides can reach.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            1.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

pub type ParamId = usize;

/// Named parameters in a fixed, insertion-defined order.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Arc<Tensor>>,
    index: HashMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> Result<ParamId, ShapeError> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(ShapeError(format!("parameter {name} already exists")));
        }
        let id = self.values.len();
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.values.push(Arc::new(value));
        Ok(id)
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.values[id]
    }

    pub fn shared(&self, id: ParamId) -> Arc<Tensor> {
        self.values[id].clone()
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        Arc::make_mut(&mut self.values[id])
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Total scalar count.
    pub fn numel(&self) -> usize {
        self.values.iter().map(|t| t.numel()).sum()
    }

    /// Hash of names and shapes in order; equal on every replica with the same layout.
    pub fn layout_hash(&self) -> u64 {
        let mut h = Fnv1a::default();
        for (name, t) in self.names.iter().zip(&self.values) {
            h.write(name.as_bytes());
            h.write(&[0xff]);
            for d in &t.shape {
                h.write(&(*d as u64).to_le_bytes());
            }
        }
        h.finish()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names
            .iter()
            .map(String::as_str)
            .zip(self.values.iter().map(|t| &**t))
    }
}

/// Parameter gradients produced by one backward pass. Parameters that did not
/// take part in the computation are absent.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Grads {
    pub map: BTreeMap<ParamId, Tensor>,
}

impl Grads {
    pub fn get(&self, id: ParamId) -> Option<&Tensor> {
        self.map.get(&id)
    }

    /// Adds `other` into `self`, creating entries as needed.
    pub fn accumulate(&mut self, other: Grads) {
        for (id, g) in other.map {
            match self.map.get_mut(&id) {
                Some(acc) => acc.data.iter_mut().zip(&g.data).for_each(|(a, b)| *a += b),
                None => {
                    self.map.insert(id, g);
                }
            }
        }
    }

    pub fn scale(&mut self, s: f64) {
        for g in self.map.values_mut() {
            g.data.iter_mut().for_each(|x| *x *= s);
        }
    }
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Tanh(Var),
    Sigmoid(Var),
    Relu(Var),
    Softplus(Var),
    Exp(Var),
    LogSoftmax(Var),
    LogSumExp(Var),
    Concat(Vec<Var>),
    Slice(Var, usize),
    BroadcastRows(Var),
    Reshape(Var),
    Sum(Var),
    Conv3d {
        x: Var,
        w: Var,
        b: Var,
        pad: usize,
    },
    MaxPool3d {
        x: Var,
        argmax: Vec<usize>,
    },
    TnMixture {
        logits: Var,
        means: Var,
        stds: Var,
        /// Per row: d/d(logit), d/d(mean), d/d(std) for each component.
        partials: Vec<[f64; 3]>,
    },
    Categorical {
        logits: Var,
        targets: Vec<usize>,
    },
}

struct Node {
    value: Arc<Tensor>,
    op: Op,
    needs_grad: bool,
}

/// Records operations for one forward pass; single-owner.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
    leaf_params: HashMap<usize, ParamId>,
}

fn conv_out(len: usize, k: usize, pad: usize) -> Result<usize, ShapeError> {
    (len + 2 * pad)
        .checked_sub(k)
        .map(|d| d + 1)
        .ok_or_else(|| ShapeError(format!("kernel {k} larger than padded input {len}+2·{pad}")))
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node {
            value: Arc::new(value),
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// A constant: never receives gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node {
            value: Arc::new(t),
            op: Op::Leaf,
            needs_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// The trainable leaf for parameter `id`; repeated calls return the same leaf.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(v) = self.params.get(&id) {
            return *v;
        }
        self.nodes.push(Node {
            value: store.shared(id),
            op: Op::Leaf,
            needs_grad: true,
        });
        let v = Var(self.nodes.len() - 1);
        self.params.insert(id, v);
        self.leaf_params.insert(v.0, id);
        v
    }

    /// Copy of `v` cut off from the graph.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.nodes[v.0].value.clone();
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].value.shape
    }

    fn dims2(&self, v: Var) -> Result<(usize, usize), ShapeError> {
        match self.shape(v) {
            [r, c] => Ok((*r, *c)),
            s => Err(ShapeError(format!("expected a matrix, got shape {s:?}"))),
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, ShapeError> {
        let (m, k) = self.dims2(a)?;
        let (k2, n) = self.dims2(b)?;
        if k != k2 {
            return Err(ShapeError(format!("matmul [{m},{k}]·[{k2},{n}]")));
        }
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            &self.value(a).data,
            false,
            &self.value(b).data,
            false,
            &mut out,
        );
        Ok(self.push(
            Tensor {
                shape: vec![m, n],
                data: out,
            },
            Op::MatMul(a, b),
            &[a, b],
        ))
    }

    fn zip(
        &mut self,
        a: Var,
        b: Var,
        op: Op,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Var, ShapeError> {
        if self.shape(a) != self.shape(b) {
            return Err(ShapeError(format!(
                "elementwise {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta
            .data
            .iter()
            .zip(&tb.data)
            .map(|(x, y)| f(*x, *y))
            .collect();
        let shape = ta.shape.clone();
        Ok(self.push(Tensor { shape, data }, op, &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, ShapeError> {
        self.zip(a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, ShapeError> {
        self.zip(a, b, Op::Mul(a, b), |x, y| x * y)
    }

    /// `a[m,n] + row[1,n]` with the row repeated down every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var, ShapeError> {
        let (m, n) = self.dims2(a)?;
        if self.value(row).numel() != n {
            return Err(ShapeError(format!(
                "row of {} for {n} columns",
                self.value(row).numel()
            )));
        }
        let r = &self.value(row).data;
        let mut data = self.value(a).data.clone();
        for i in 0..m {
            data[i * n..(i + 1) * n]
                .iter_mut()
                .zip(r)
                .for_each(|(x, y)| *x += y);
        }
        Ok(self.push(
            Tensor {
                shape: vec![m, n],
                data,
            },
            Op::AddRow(a, row),
            &[a, row],
        ))
    }

    fn map(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let t = self.value(a);
        let out = Tensor {
            shape: t.shape.clone(),
            data: t.data.iter().map(|x| f(*x)).collect(),
        };
        self.push(out, op, &[a])
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        self.map(a, Op::Scale(a, s), |x| x * s)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.map(a, Op::Tanh(a), f64::tanh)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.map(a, Op::Sigmoid(a), sigmoid)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.map(a, Op::Relu(a), |x| x.max(0.0))
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        self.map(a, Op::Softplus(a), softplus)
    }

    pub fn log_softmax(&mut self, a: Var) -> Result<Var, ShapeError> {
        let (m, n) = self.dims2(a)?;
        let mut data = self.value(a).data.clone();
        for row in data.chunks_mut(n) {
            let lse = lse(row);
            row.iter_mut().for_each(|x| *x -= lse);
        }
        Ok(self.push(
            Tensor {
                shape: vec![m, n],
                data,
            },
            Op::LogSoftmax(a),
            &[a],
        ))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.map(a, Op::Exp(a), f64::exp)
    }

    pub fn softmax(&mut self, a: Var) -> Result<Var, ShapeError> {
        let ls = self.log_softmax(a)?;
        Ok(self.exp(ls))
    }

    /// Row-wise log Σ exp → [m, 1].
    pub fn logsumexp(&mut self, a: Var) -> Result<Var, ShapeError> {
        let (m, n) = self.dims2(a)?;
        let data = self.value(a).data.chunks(n).map(lse).collect();
        Ok(self.push(
            Tensor {
                shape: vec![m, 1],
                data,
            },
            Op::LogSumExp(a),
            &[a],
        ))
    }

    /// Column-wise concatenation of matrices with equal row counts.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var, ShapeError> {
        let m = self.dims2(parts[0])?.0;
        let mut widths = Vec::with_capacity(parts.len());
        for p in parts {
            let (r, c) = self.dims2(*p)?;
            if r != m {
                return Err(ShapeError(format!("concat rows {r} vs {m}")));
            }
            widths.push(c);
        }
        let n: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(m * n);
        for i in 0..m {
            for (p, w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.value(*p).data[i * w..(i + 1) * w]);
            }
        }
        Ok(self.push(
            Tensor {
                shape: vec![m, n],
                data,
            },
            Op::Concat(parts.to_vec()),
            parts,
        ))
    }

    /// Columns `start..start + len`.
    pub fn slice(&mut self, a: Var, start: usize, len: usize) -> Result<Var, ShapeError> {
        let (m, n) = self.dims2(a)?;
        if start + len > n {
            return Err(ShapeError(format!("slice {start}+{len} of {n} columns")));
        }
        let src = &self.value(a).data;
        let data = (0..m)
            .flat_map(|i| src[i * n + start..i * n + start + len].iter().copied())
            .collect();
        Ok(self.push(
            Tensor {
                shape: vec![m, len],
                data,
            },
            Op::Slice(a, start),
            &[a],
        ))
    }

    /// Repeats a single row `m` times.
    pub fn broadcast_rows(&mut self, a: Var, m: usize) -> Var {
        let t = self.value(a);
        let n = t.numel();
        let data = (0..m).flat_map(|_| t.data.iter().copied()).collect();
        self.push(
            Tensor {
                shape: vec![m, n],
                data,
            },
            Op::BroadcastRows(a),
            &[a],
        )
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var, ShapeError> {
        let t = self.value(a);
        if shape.iter().product::<usize>() != t.numel() {
            return Err(ShapeError(format!("reshape {:?} to {shape:?}", t.shape)));
        }
        let out = Tensor {
            shape: shape.to_vec(),
            data: t.data.clone(),
        };
        Ok(self.push(out, Op::Reshape(a), &[a]))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data.iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).numel() as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// `x · w + b` with `w` laid out [in, out].
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var, ShapeError> {
        let y = self.matmul(x, w)?;
        self.add_row(y, b)
    }

    /// Stride-1 cross-correlation. x: [N,C,D,H,W], w: [O,C,KD,KH,KW], b: [O].
    pub fn conv3d(&mut self, x: Var, w: Var, b: Var, pad: usize) -> Result<Var, ShapeError> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if xs.len() != 5 || ws.len() != 5 || ws[1] != xs[1] || self.value(b).numel() != ws[0] {
            return Err(ShapeError(format!("conv3d input {xs:?} kernel {ws:?}")));
        }
        let (n, c, d, h, wd) = (xs[0], xs[1], xs[2], xs[3], xs[4]);
        let (o, kd, kh, kw) = (ws[0], ws[2], ws[3], ws[4]);
        let (od, oh, ow) = (
            conv_out(d, kd, pad)?,
            conv_out(h, kh, pad)?,
            conv_out(wd, kw, pad)?,
        );
        let xv = &self.value(x).data;
        let wv = &self.value(w).data;
        let bv = &self.value(b).data;
        let mut out = vec![0.0; n * o * od * oh * ow];
        let p = pad as isize;
        for ni in 0..n {
            for oi in 0..o {
                for z in 0..od {
                    for y in 0..oh {
                        for xx in 0..ow {
                            let mut acc = bv[oi];
                            for ci in 0..c {
                                for a in 0..kd {
                                    let iz = z as isize + a as isize - p;
                                    if iz < 0 || iz >= d as isize {
                                        continue;
                                    }
                                    for bb in 0..kh {
                                        let iy = y as isize + bb as isize - p;
                                        if iy < 0 || iy >= h as isize {
                                            continue;
                                        }
                                        for cc in 0..kw {
                                            let ix = xx as isize + cc as isize - p;
                                            if ix < 0 || ix >= wd as isize {
                                                continue;
                                            }
                                            let xi = (((ni * c + ci) * d + iz as usize) * h
                                                + iy as usize)
                                                * wd
                                                + ix as usize;
                                            let wi = (((oi * c + ci) * kd + a) * kh + bb) * kw + cc;
                                            acc += xv[xi] * wv[wi];
                                        }
                                    }
                                }
                            }
                            out[(((ni * o + oi) * od + z) * oh + y) * ow + xx] = acc;
                        }
                    }
                }
            }
        }
        let t = Tensor {
            shape: vec![n, o, od, oh, ow],
            data: out,
        };
        Ok(self.push(t, Op::Conv3d { x, w, b, pad }, &[x, w, b]))
    }

    /// Non-overlapping max pooling with cubic window `k`; trailing remainders are dropped.
    pub fn maxpool3d(&mut self, x: Var, k: usize) -> Result<Var, ShapeError> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 5 || k == 0 || xs[2] < k || xs[3] < k || xs[4] < k {
            return Err(ShapeError(format!("maxpool3d window {k} on {xs:?}")));
        }
        let (n, c, d, h, w) = (xs[0], xs[1], xs[2], xs[3], xs[4]);
        let (od, oh, ow) = (d / k, h / k, w / k);
        let xv = &self.value(x).data;
        let mut out = Vec::with_capacity(n * c * od * oh * ow);
        let mut argmax = Vec::with_capacity(out.capacity());
        for nc in 0..n * c {
            for z in 0..od {
                for y in 0..oh {
                    for xx in 0..ow {
                        let mut best = f64::NEG_INFINITY;
                        let mut at = 0;
                        for a in 0..k {
                            for b in 0..k {
                                for cc in 0..k {
                                    let i =
                                        ((nc * d + z * k + a) * h + y * k + b) * w + xx * k + cc;
                                    if xv[i] > best {
                                        best = xv[i];
                                        at = i;
                                    }
                                }
                            }
                        }
                        out.push(best);
                        argmax.push(at);
                    }
                }
            }
        }
        let t = Tensor {
            shape: vec![n, c, od, oh, ow],
            data: out,
        };
        Ok(self.push(t, Op::MaxPool3d { x, argmax }, &[x]))
    }

    /// One LSTM step with gate order (i, f, g, o). x: [B,in], h, c: [B,H],
    /// w: [in,4H], u: [H,4H], b: [1,4H].
    pub fn lstm_cell(
        &mut self,
        x: Var,
        h: Var,
        c: Var,
        w: Var,
        u: Var,
        b: Var,
    ) -> Result<(Var, Var), ShapeError> {
        let hidden = self.dims2(h)?.1;
        let xw = self.matmul(x, w)?;
        let hu = self.matmul(h, u)?;
        let pre = self.add(xw, hu)?;
        let gates = self.add_row(pre, b)?;
        let i = self.slice(gates, 0, hidden)?;
        let f = self.slice(gates, hidden, hidden)?;
        let g = self.slice(gates, 2 * hidden, hidden)?;
        let o = self.slice(gates, 3 * hidden, hidden)?;
        let (i, f, g, o) = (
            self.sigmoid(i),
            self.sigmoid(f),
            self.tanh(g),
            self.sigmoid(o),
        );
        let fc = self.mul(f, c)?;
        let ig = self.mul(i, g)?;
        let c2 = self.add(fc, ig)?;
        let tc = self.tanh(c2);
        let h2 = self.mul(o, tc)?;
        Ok((h2, c2))
    }

    /// Row-wise log density of `x[r]` under a mixture of truncated normals on
    /// `[low[r], high[r]]` with weights softmax(logits). Returns [m, 1].
    pub fn tn_mixture_log_pdf(
        &mut self,
        logits: Var,
        means: Var,
        stds: Var,
        x: &[f64],
        low: &[f64],
        high: &[f64],
    ) -> Result<Var, ShapeError> {
        let (m, k) = self.dims2(logits)?;
        if self.dims2(means)? != (m, k)
            || self.dims2(stds)? != (m, k)
            || x.len() != m
            || low.len() != m
            || high.len() != m
        {
            return Err(ShapeError("mixture parameter shapes disagree".into()));
        }
        let lg = &self.value(logits).data;
        let mu = &self.value(means).data;
        let sd = &self.value(stds).data;
        let mut out = Vec::with_capacity(m);
        let mut partials = vec![[0.0; 3]; m * k];
        let mut comp = vec![0.0; k];
        let mut dmu = vec![0.0; k];
        let mut dsd = vec![0.0; k];
        for r in 0..m {
            let row = r * k..(r + 1) * k;
            let lw_norm = lse(&lg[row.clone()]);
            for j in 0..k {
                let (mj, sj) = (mu[r * k + j], sd[r * k + j]);
                let z = (x[r] - mj) / sj;
                let a = (low[r] - mj) / sj;
                let b = (high[r] - mj) / sj;
                let log_mass = log_std_normal_mass(a, b);
                comp[j] = lg[r * k + j]
                    - lw_norm
                    - 0.5 * z * z
                    - 0.5 * (2.0 * std::f64::consts::PI).ln()
                    - sj.ln()
                    - log_mass;
                // Derivatives of log Z; boundary terms vanish at infinite bounds.
                let ra = if a.is_finite() {
                    std_normal_pdf(a)
                } else {
                    0.0
                };
                let rb = if b.is_finite() {
                    std_normal_pdf(b)
                } else {
                    0.0
                };
                let inv_mass = (-log_mass).exp();
                let dlogz_dmu = (ra - rb) * inv_mass / sj;
                let aa = if a.is_finite() { a * ra } else { 0.0 };
                let bb = if b.is_finite() { b * rb } else { 0.0 };
                let dlogz_dsd = (aa - bb) * inv_mass / sj;
                dmu[j] = z / sj - dlogz_dmu;
                dsd[j] = z * z / sj - 1.0 / sj - dlogz_dsd;
            }
            let total = lse(&comp);
            out.push(total);
            let inside = x[r] >= low[r] && x[r] <= high[r];
            for j in 0..k {
                let resp = if total.is_finite() {
                    (comp[j] - total).exp()
                } else {
                    0.0
                };
                let w = (lg[r * k + j] - lw_norm).exp();
                partials[r * k + j] = if inside {
                    [resp - w, resp * dmu[j], resp * dsd[j]]
                } else {
                    [0.0; 3]
                };
            }
            if !inside {
                *out.last_mut().unwrap() = f64::NEG_INFINITY;
            }
        }
        let t = Tensor {
            shape: vec![m, 1],
            data: out,
        };
        Ok(self.push(
            t,
            Op::TnMixture {
                logits,
                means,
                stds,
                partials,
            },
            &[logits, means, stds],
        ))
    }

    /// Row-wise `log softmax(logits)[target]` → [m, 1].
    pub fn categorical_log_pdf(
        &mut self,
        logits: Var,
        targets: &[usize],
    ) -> Result<Var, ShapeError> {
        let (m, k) = self.dims2(logits)?;
        if targets.len() != m || targets.iter().any(|t| *t >= k) {
            return Err(ShapeError(format!("categorical targets for [{m},{k}]")));
        }
        let lg = &self.value(logits).data;
        let data = (0..m)
            .map(|r| lg[r * k + targets[r]] - lse(&lg[r * k..(r + 1) * k]))
            .collect();
        let t = Tensor {
            shape: vec![m, 1],
            data,
        };
        Ok(self.push(
            t,
            Op::Categorical {
                logits,
                targets: targets.to_vec(),
            },
            &[logits],
        ))
    }

    /// Reverse pass from a scalar `loss`; returns gradients of every parameter
    /// leaf on the tape.
    pub fn backward(&self, loss: Var) -> Result<Grads, ShapeError> {
        if self.value(loss).numel() != 1 {
            return Err(ShapeError(format!(
                "loss must be scalar, got shape {:?}",
                self.value(loss).shape
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                grads[idx] = Some(g);
                continue;
            }
            self.propagate(idx, &g, &mut grads);
        }
        let mut out = Grads::default();
        for (&leaf, &id) in &self.leaf_params {
            if leaf > loss.0 {
                continue;
            }
            let g = grads[leaf]
                .take()
                .unwrap_or_else(|| vec![0.0; self.nodes[leaf].value.numel()]);
            out.map.insert(
                id,
                Tensor {
                    shape: self.nodes[leaf].value.shape.clone(),
                    data: g,
                },
            );
        }
        Ok(out)
    }

    fn propagate(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[idx];
        let out = &node.value.data;
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if !self.nodes[v.0].needs_grad {
                return;
            }
            let slot = grads[v.0].get_or_insert_with(|| vec![0.0; self.nodes[v.0].value.numel()]);
            f(slot);
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = (self.value(*a).shape[0], self.value(*a).shape[1]);
                let n = self.value(*b).shape[1];
                let (av, bv) = (&self.value(*a).data, &self.value(*b).data);
                acc(*a, &mut |s| gemm(m, n, k, g, false, bv, true, s));
                acc(*b, &mut |s| gemm(k, m, n, av, true, g, false, s));
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    acc(v, &mut |s| s.iter_mut().zip(g).for_each(|(x, y)| *x += y));
                }
            }
            Op::AddRow(a, row) => {
                acc(*a, &mut |s| s.iter_mut().zip(g).for_each(|(x, y)| *x += y));
                let n = self.value(*row).numel();
                acc(*row, &mut |s| {
                    for chunk in g.chunks(n) {
                        s.iter_mut().zip(chunk).for_each(|(x, y)| *x += y);
                    }
                });
            }
            Op::Mul(a, b) => {
                let (av, bv) = (&self.value(*a).data, &self.value(*b).data);
                acc(*a, &mut |s| {
                    for i in 0..s.len() {
                        s[i] += g[i] * bv[i];
                    }
                });
                acc(*b, &mut |s| {
                    for i in 0..s.len() {
                        s[i] += g[i] * av[i];
                    }
                });
            }
            Op::Scale(a, k) => acc(*a, &mut |s| {
                s.iter_mut().zip(g).for_each(|(x, y)| *x += k * y)
            }),
            Op::Tanh(a) => acc(*a, &mut |s| {
                for i in 0..s.len() {
                    s[i] += g[i] * (1.0 - out[i] * out[i]);
                }
            }),
            Op::Exp(a) => acc(*a, &mut |s| {
                for i in 0..s.len() {
                    s[i] += g[i] * out[i];
                }
            }),
            Op::Sigmoid(a) => acc(*a, &mut |s| {
                for i in 0..s.len() {
                    s[i] += g[i] * out[i] * (1.0 - out[i]);
                }
            }),
            Op::Relu(a) => {
                let av = &self.value(*a).data;
                acc(*a, &mut |s| {
                    for i in 0..s.len() {
                        if av[i] > 0.0 {
                            s[i] += g[i];
                        }
                    }
                })
            }
            Op::Softplus(a) => {
                let av = &self.value(*a).data;
                acc(*a, &mut |s| {
                    for i in 0..s.len() {
                        s[i] += g[i] * sigmoid(av[i]);
                    }
                })
            }
            Op::LogSoftmax(a) => {
                let n = node.value.shape[1];
                acc(*a, &mut |s| {
                    for (r, row) in out.chunks(n).enumerate() {
                        let gs: f64 = g[r * n..(r + 1) * n].iter().sum();
                        for j in 0..n {
                            s[r * n + j] += g[r * n + j] - row[j].exp() * gs;
                        }
                    }
                })
            }
            Op::LogSumExp(a) => {
                let av = &self.value(*a).data;
                let n = self.value(*a).shape[1];
                acc(*a, &mut |s| {
                    for (r, lse) in out.iter().enumerate() {
                        for j in 0..n {
                            s[r * n + j] += g[r] * (av[r * n + j] - lse).exp();
                        }
                    }
                })
            }
            Op::Concat(parts) => {
                let m = node.value.shape[0];
                let n = node.value.shape[1];
                let mut off = 0;
                for p in parts {
                    let w = self.value(*p).shape[1];
                    acc(*p, &mut |s| {
                        for i in 0..m {
                            for j in 0..w {
                                s[i * w + j] += g[i * n + off + j];
                            }
                        }
                    });
                    off += w;
                }
            }
            Op::Slice(a, start) => {
                let n = self.value(*a).shape[1];
                let w = node.value.shape[1];
                acc(*a, &mut |s| {
                    for (i, chunk) in g.chunks(w).enumerate() {
                        for j in 0..w {
                            s[i * n + start + j] += chunk[j];
                        }
                    }
                })
            }
            Op::BroadcastRows(a) => {
                let n = self.value(*a).numel();
                acc(*a, &mut |s| {
                    for chunk in g.chunks(n) {
                        s.iter_mut().zip(chunk).for_each(|(x, y)| *x += y);
                    }
                })
            }
            Op::Reshape(a) => acc(*a, &mut |s| s.iter_mut().zip(g).for_each(|(x, y)| *x += y)),
            Op::Sum(a) => acc(*a, &mut |s| s.iter_mut().for_each(|x| *x += g[0])),
            Op::Conv3d { x, w, b, pad } => {
                self.conv3d_backward(*x, *w, *b, *pad, g, &node.value.shape, grads)
            }
            Op::MaxPool3d { x, argmax } => acc(*x, &mut |s| {
                for (o, &i) in argmax.iter().enumerate() {
                    s[i] += g[o];
                }
            }),
            Op::TnMixture {
                logits,
                means,
                stds,
                partials,
            } => {
                let k = self.value(*logits).shape[1];
                for (slot, v) in [*logits, *means, *stds].into_iter().enumerate() {
                    acc(v, &mut |s| {
                        for (i, p) in partials.iter().enumerate() {
                            s[i] += g[i / k] * p[slot];
                        }
                    });
                }
            }
            Op::Categorical { logits, targets } => {
                let lg = &self.value(*logits).data;
                let k = self.value(*logits).shape[1];
                acc(*logits, &mut |s| {
                    for (r, t) in targets.iter().enumerate() {
                        let row = &lg[r * k..(r + 1) * k];
                        let l = lse(row);
                        for j in 0..k {
                            let onehot = if j == *t { 1.0 } else { 0.0 };
                            s[r * k + j] += g[r] * (onehot - (row[j] - l).exp());
                        }
                    }
                })
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn conv3d_backward(
        &self,
        x: Var,
        w: Var,
        b: Var,
        pad: usize,
        g: &[f64],
        out_shape: &[usize],
        grads: &mut [Option<Vec<f64>>],
    ) {
        let xs = &self.value(x).shape;
        let ws = &self.value(w).shape;
        let (n, c, d, h, wd) = (xs[0], xs[1], xs[2], xs[3], xs[4]);
        let (o, kd, kh, kw) = (ws[0], ws[2], ws[3], ws[4]);
        let (od, oh, ow) = (out_shape[2], out_shape[3], out_shape[4]);
        let xv = &self.value(x).data;
        let wv = &self.value(w).data;
        let mut gx = self.nodes[x.0].needs_grad.then(|| vec![0.0; xv.len()]);
        let mut gw = self.nodes[w.0].needs_grad.then(|| vec![0.0; wv.len()]);
        let mut gb = self.nodes[b.0].needs_grad.then(|| vec![0.0; o]);
        let p = pad as isize;
        for ni in 0..n {
            for oi in 0..o {
                for z in 0..od {
                    for y in 0..oh {
                        for xx in 0..ow {
                            let go = g[(((ni * o + oi) * od + z) * oh + y) * ow + xx];
                            if let Some(gb) = gb.as_mut() {
                                gb[oi] += go;
                            }
                            for ci in 0..c {
                                for a in 0..kd {
                                    let iz = z as isize + a as isize - p;
                                    if iz < 0 || iz >= d as isize {
                                        continue;
                                    }
                                    for bb in 0..kh {
                                        let iy = y as isize + bb as isize - p;
                                        if iy < 0 || iy >= h as isize {
                                            continue;
                                        }
                                        for cc in 0..kw {
                                            let ix = xx as isize + cc as isize - p;
                                            if ix < 0 || ix >= wd as isize {
                                                continue;
                                            }
                                            let xi = (((ni * c + ci) * d + iz as usize) * h
                                                + iy as usize)
                                                * wd
                                                + ix as usize;
                                            let wi = (((oi * c + ci) * kd + a) * kh + bb) * kw + cc;
                                            if let Some(gx) = gx.as_mut() {
                                                gx[xi] += go * wv[wi];
                                            }
                                            if let Some(gw) = gw.as_mut() {
                                                gw[wi] += go * xv[xi];
                                            }
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
        for (v, part) in [(x, gx), (w, gw), (b, gb)] {
            if let Some(part) = part {
                let slot = grads[v.0].get_or_insert_with(|| vec![0.0; part.len()]);
                slot.iter_mut().zip(&part).for_each(|(s, p)| *s += p);
            }
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn lse(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

const ARCHIVE_MAGIC: &[u8; 4] = b"STNA";
pub const ARCHIVE_VERSION: u16 = 1;

/// Writes a named-tensor archive: magic `STNA`, u16 version, u32 count, then
/// per tensor u32 name length, UTF-8 name, u32 rank, u32 dims, f64 data, all
/// little-endian.
pub fn write_archive<'a>(
    mut out: impl Write,
    tensors: impl IntoIterator<Item = (&'a str, &'a Tensor)>,
) -> io::Result<()> {
    let tensors: Vec<_> = tensors.into_iter().collect();
    out.write_all(ARCHIVE_MAGIC)?;
    out.write_all(&ARCHIVE_VERSION.to_le_bytes())?;
    out.write_all(&(tensors.len() as u32).to_le_bytes())?;
    for (name, t) in tensors {
        out.write_all(&(name.len() as u32).to_le_bytes())?;
        out.write_all(name.as_bytes())?;
        out.write_all(&(t.shape.len() as u32).to_le_bytes())?;
        for d in &t.shape {
            out.write_all(&(*d as u32).to_le_bytes())?;
        }
        for x in &t.data {
            out.write_all(&x.to_le_bytes())?;
        }
    }
    Ok(())
}

fn invalid(msg: impl Into<String>) -> io::Error {
    io::Error::new(io::ErrorKind::InvalidData, msg.into())
}

fn read_u32(r: &mut impl Read) -> io::Result<u32> {
    let mut b = [0; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

pub fn read_archive(mut r: impl Read) -> io::Result<Vec<(String, Tensor)>> {
    let mut magic = [0; 4];
    r.read_exact(&mut magic)?;
    if &magic != ARCHIVE_MAGIC {
        return Err(invalid("not a tensor archive"));
    }
    let mut v = [0; 2];
    r.read_exact(&mut v)?;
    if u16::from_le_bytes(v) != ARCHIVE_VERSION {
        return Err(invalid(format!(
            "unsupported archive version {}",
            u16::from_le_bytes(v)
        )));
    }
    let count = read_u32(&mut r)?;
    let mut out = Vec::new();
    for _ in 0..count {
        let len = read_u32(&mut r)? as usize;
        let mut name = vec![0; len];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name).map_err(|_| invalid("tensor name is not UTF-8"))?;
        let rank = read_u32(&mut r)? as usize;
        let shape = (0..rank)
            .map(|_| read_u32(&mut r).map(|d| d as usize))
            .collect::<io::Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let mut data = Vec::with_capacity(n);
        let mut b = [0; 8];
        for _ in 0..n {
            r.read_exact(&mut b)?;
            data.push(f64::from_le_bytes(b));
        }
        out.push((name, Tensor { shape, data }));
    }
    Ok(out)
}
