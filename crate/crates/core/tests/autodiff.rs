use rand::Rng;
use simtrace::rng::seeded;
use simtrace::tensor::{Grads, ParamId, ParamStore, Var};
use simtrace::{Tape, Tensor};

const H: f64 = 1e-5;
const PRIMITIVE_TOL: f64 = 1e-6;

fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-3)
}

fn random(shape: &[usize], rng: &mut impl Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect(),
    )
    .unwrap()
}

/// Builds `sum(f(params) ⊙ R)` for a fixed random `R` so that every output
/// element carries a distinct weight.
struct Check<F> {
    store: ParamStore,
    ids: Vec<ParamId>,
    weights: Option<Tensor>,
    f: F,
}

impl<F> Check<F>
where
    F: Fn(&mut Tape, &[Var]) -> Var,
{
    fn new(inputs: Vec<Tensor>, f: F) -> Self {
        let mut store = ParamStore::new();
        let ids = inputs
            .into_iter()
            .enumerate()
            .map(|(i, t)| store.add(format!("p{i}"), t).unwrap())
            .collect();
        Self {
            store,
            ids,
            weights: None,
            f,
        }
    }

    fn loss(&mut self) -> (f64, Grads) {
        let mut tape = Tape::new();
        let vars: Vec<Var> = self
            .ids
            .iter()
            .map(|&id| tape.param(&self.store, id))
            .collect();
        let out = (self.f)(&mut tape, &vars);
        let shape = tape.value(out).shape.clone();
        let w = self
            .weights
            .get_or_insert_with(|| random(&shape, &mut seeded(99)))
            .clone();
        let w = tape.constant(w);
        let prod = tape.mul(out, w).unwrap();
        let loss = tape.sum(prod);
        (tape.value(loss).item(), tape.backward(loss).unwrap())
    }

    /// Largest relative error over every input element.
    fn max_error(mut self) -> f64 {
        let (_, grads) = self.loss();
        let mut worst: f64 = 0.0;
        for k in 0..self.ids.len() {
            let id = self.ids[k];
            for j in 0..self.store.get(id).numel() {
                let x = self.store.get(id).data[j];
                self.store.get_mut(id).data[j] = x + H;
                let up = self.loss().0;
                self.store.get_mut(id).data[j] = x - H;
                let down = self.loss().0;
                self.store.get_mut(id).data[j] = x;
                let numeric = (up - down) / (2.0 * H);
                let analytic = grads.get(id).map_or(0.0, |g| g.data[j]);
                worst = worst.max(rel_err(analytic, numeric));
            }
        }
        worst
    }
}

fn check(name: &str, inputs: Vec<Tensor>, f: impl Fn(&mut Tape, &[Var]) -> Var) {
    let err = Check::new(inputs, f).max_error();
    assert!(err < PRIMITIVE_TOL, "{name}: max relative error {err:e}");
}

#[test]
fn elementwise_and_matrix_primitives() {
    let mut rng = seeded(1);
    let a = random(&[3, 4], &mut rng);
    let b = random(&[3, 4], &mut rng);
    let m = random(&[4, 2], &mut rng);
    let row = random(&[1, 4], &mut rng);
    check("matmul", vec![a.clone(), m.clone()], |t, v| {
        t.matmul(v[0], v[1]).unwrap()
    });
    check("add", vec![a.clone(), b.clone()], |t, v| {
        t.add(v[0], v[1]).unwrap()
    });
    check("mul", vec![a.clone(), b.clone()], |t, v| {
        t.mul(v[0], v[1]).unwrap()
    });
    check("add_row", vec![a.clone(), row.clone()], |t, v| {
        t.add_row(v[0], v[1]).unwrap()
    });
    check("scale", vec![a.clone()], |t, v| t.scale(v[0], -2.5));
    check("tanh", vec![a.clone()], |t, v| t.tanh(v[0]));
    check("sigmoid", vec![a.clone()], |t, v| t.sigmoid(v[0]));
    check("softplus", vec![a.clone()], |t, v| t.softplus(v[0]));
    check("exp", vec![a.clone()], |t, v| t.exp(v[0]));
    check("relu", vec![a.clone()], |t, v| t.relu(v[0]));
    check(
        "linear",
        vec![a.clone(), m.clone(), random(&[1, 2], &mut rng)],
        |t, v| t.linear(v[0], v[1], v[2]).unwrap(),
    );
}

#[test]
fn reductions_and_reshaping() {
    let mut rng = seeded(2);
    let a = random(&[3, 5], &mut rng);
    let b = random(&[3, 2], &mut rng);
    check("log_softmax", vec![a.clone()], |t, v| {
        t.log_softmax(v[0]).unwrap()
    });
    check("softmax", vec![a.clone()], |t, v| t.softmax(v[0]).unwrap());
    check("logsumexp", vec![a.clone()], |t, v| {
        t.logsumexp(v[0]).unwrap()
    });
    check("concat", vec![a.clone(), b.clone()], |t, v| {
        t.concat(&[v[0], v[1]]).unwrap()
    });
    check("slice", vec![a.clone()], |t, v| {
        t.slice(v[0], 1, 3).unwrap()
    });
    check("broadcast_rows", vec![random(&[1, 4], &mut rng)], |t, v| {
        t.broadcast_rows(v[0], 3)
    });
    check("reshape", vec![a.clone()], |t, v| {
        t.reshape(v[0], &[5, 3]).unwrap()
    });
    check("sum", vec![a.clone()], |t, v| t.sum(v[0]));
    check("mean", vec![a.clone()], |t, v| t.mean(v[0]));
}

#[test]
fn conv3d_and_maxpool_gradients() {
    let mut rng = seeded(3);
    let x = random(&[2, 2, 4, 4, 4], &mut rng);
    let w = random(&[3, 2, 3, 3, 3], &mut rng);
    let b = random(&[3], &mut rng);
    check(
        "conv3d valid",
        vec![x.clone(), w.clone(), b.clone()],
        |t, v| t.conv3d(v[0], v[1], v[2], 0).unwrap(),
    );
    check("conv3d padded", vec![x.clone(), w, b], |t, v| {
        t.conv3d(v[0], v[1], v[2], 1).unwrap()
    });
    check("maxpool3d", vec![x], |t, v| t.maxpool3d(v[0], 2).unwrap());
}

#[test]
fn lstm_cell_gradients() {
    let mut rng = seeded(4);
    let hidden = 8;
    let inputs = vec![
        random(&[2, 5], &mut rng),
        random(&[2, hidden], &mut rng),
        random(&[2, hidden], &mut rng),
        random(&[5, 4 * hidden], &mut rng),
        random(&[hidden, 4 * hidden], &mut rng),
        random(&[1, 4 * hidden], &mut rng),
    ];
    check("lstm h", inputs.clone(), |t, v| {
        t.lstm_cell(v[0], v[1], v[2], v[3], v[4], v[5]).unwrap().0
    });
    check("lstm c", inputs, |t, v| {
        t.lstm_cell(v[0], v[1], v[2], v[3], v[4], v[5]).unwrap().1
    });
}

#[test]
fn proposal_density_gradients() {
    let mut rng = seeded(5);
    let logits = random(&[3, 4], &mut rng);
    let means = random(&[3, 4], &mut rng);
    let stds = Tensor::new(
        vec![3, 4],
        (0..12).map(|_| rng.random_range(0.3..1.5)).collect(),
    )
    .unwrap();
    check(
        "truncated normal mixture",
        vec![logits.clone(), means, stds],
        |t, v| {
            t.tn_mixture_log_pdf(
                v[0],
                v[1],
                v[2],
                &[0.2, -0.7, 1.4],
                &[-1.0, -2.0, 0.0],
                &[1.0, 0.5, 3.0],
            )
            .unwrap()
        },
    );
    check("categorical", vec![logits], |t, v| {
        t.categorical_log_pdf(v[0], &[0, 3, 1]).unwrap()
    });
}

/// Direct six-loop cross-correlation over one input and output channel.
fn naive_conv(x: &[f64], n: usize, k: &[f64], kn: usize) -> Vec<f64> {
    let m = n - kn + 1;
    let mut out = vec![0.0; m * m * m];
    for d in 0..m {
        for h in 0..m {
            for w in 0..m {
                let mut s = 0.0;
                for a in 0..kn {
                    for b in 0..kn {
                        for c in 0..kn {
                            s += x[((d + a) * n + h + b) * n + w + c] * k[(a * kn + b) * kn + c];
                        }
                    }
                }
                out[(d * m + h) * m + w] = s;
            }
        }
    }
    out
}

#[test]
fn conv3d_matches_direct_loops() {
    let mut rng = seeded(6);
    let x = random(&[1, 1, 4, 4, 4], &mut rng);
    let w = random(&[1, 1, 3, 3, 3], &mut rng);
    let expected = naive_conv(&x.data, 4, &w.data, 3);
    let mut tape = Tape::new();
    let (xv, wv, bv) = (
        tape.constant(x),
        tape.constant(w),
        tape.constant(Tensor::zeros(&[1])),
    );
    let y = tape.conv3d(xv, wv, bv, 0).unwrap();
    assert_eq!(tape.value(y).shape, vec![1, 1, 2, 2, 2]);
    for (a, b) in tape.value(y).data.iter().zip(&expected) {
        assert!((a - b).abs() < 1e-12, "{a} vs {b}");
    }
}

#[test]
fn centered_unit_kernel_with_same_padding_is_identity() {
    let mut rng = seeded(7);
    let x = random(&[1, 1, 3, 4, 5], &mut rng);
    let mut k = Tensor::zeros(&[1, 1, 3, 3, 3]);
    k.data[13] = 1.0;
    let mut tape = Tape::new();
    let (xv, kv, bv) = (
        tape.constant(x.clone()),
        tape.constant(k),
        tape.constant(Tensor::zeros(&[1])),
    );
    let y = tape.conv3d(xv, kv, bv, 1).unwrap();
    assert_eq!(tape.value(y), &x);
}

#[test]
fn saturated_forget_gate_keeps_cell_state() {
    let hidden = 3;
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::new(vec![1, 2], vec![0.3, -0.2]).unwrap());
    let h = tape.constant(Tensor::new(vec![1, hidden], vec![0.1, 0.5, -0.4]).unwrap());
    let c_data = vec![0.7, -1.2, 0.25];
    let c = tape.constant(Tensor::new(vec![1, hidden], c_data.clone()).unwrap());
    let w = tape.constant(Tensor::zeros(&[2, 4 * hidden]));
    let u = tape.constant(Tensor::zeros(&[hidden, 4 * hidden]));
    // Input gate closed, forget gate open.
    let mut bias = vec![0.0; 4 * hidden];
    bias[..hidden].fill(-800.0);
    bias[hidden..2 * hidden].fill(800.0);
    let b = tape.constant(Tensor::new(vec![1, 4 * hidden], bias).unwrap());
    let (_, c2) = tape.lstm_cell(x, h, c, w, u, b).unwrap();
    assert_eq!(tape.value(c2).data, c_data);
}

#[test]
fn backward_is_deterministic() {
    let mut rng = seeded(8);
    let inputs = vec![
        random(&[1, 1, 4, 4, 4], &mut rng),
        random(&[2, 1, 3, 3, 3], &mut rng),
        random(&[2], &mut rng),
    ];
    let run = || {
        let mut c = Check::new(inputs.clone(), |t: &mut Tape, v: &[Var]| {
            let y = t.conv3d(v[0], v[1], v[2], 1).unwrap();
            t.tanh(y)
        });
        let grads = c.loss().1;
        c.ids
            .iter()
            .map(|&id| grads.get(id).unwrap().data.clone())
            .collect::<Vec<_>>()
    };
    let (a, b) = (run(), run());
    for (x, y) in a.iter().flatten().zip(b.iter().flatten()) {
        assert_eq!(x.to_bits(), y.to_bits());
    }
}
