//! Central finite differences against the tape's adjoints for every
//! primitive: 100 random trials each, tensors of at most 32 elements,
//! step 1e-5, relative error at most 1e-3.

use ldspn::nn::{Forward, MultiHeadAttention};
use ldspn::params::ParamStore;
use ldspn::tape::{Tape, Var};
use ldspn::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const STEP: f64 = 1e-5;
const TOL: f64 = 1e-3;
const TRIALS: u64 = 100;

type Build<'a> = dyn Fn(&mut Tape, &[Var]) -> Var + 'a;

/// Builds `sum(w ⊙ op(inputs))` with fixed random weights `w` so that every
/// output element contributes a distinct cotangent.
fn scalarize(t: &mut Tape, out: Var, weights: &[f64]) -> Var {
    let shape = t.shape(out).to_vec();
    if shape.iter().product::<usize>() == 1 {
        return out;
    }
    let w = Tensor::new(shape, weights[..t.value(out).len()].to_vec()).unwrap();
    let weighted = t.mul_const(out, &w).unwrap();
    t.sum(weighted)
}

fn evaluate(inputs: &[Tensor], weights: &[f64], build: &Build<'_>) -> f64 {
    let mut t = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|x| t.constant(x.clone())).collect();
    let out = build(&mut t, &vars);
    let loss = scalarize(&mut t, out, weights);
    t.value(loss).data()[0]
}

fn check(name: &str, gen: impl Fn(&mut ChaCha8Rng) -> Vec<Tensor>, build: &Build<'_>) {
    let mut worst = 0.0f64;
    for trial in 0..TRIALS {
        let mut rng = ChaCha8Rng::seed_from_u64(trial);
        let inputs = gen(&mut rng);
        for x in &inputs {
            assert!(x.len() <= 32, "{name}: tensor too large");
        }
        let weights: Vec<f64> = (0..64).map(|_| rng.gen_range(-1.0..1.0)).collect();

        let mut t = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|x| t.variable(x.clone())).collect();
        let out = build(&mut t, &vars);
        let loss = scalarize(&mut t, out, &weights);
        let grads = t.backward(loss).unwrap();

        for (k, x) in inputs.iter().enumerate() {
            let analytic = grads
                .get(vars[k])
                .map(<[f64]>::to_vec)
                .unwrap_or(vec![0.0; x.len()]);
            for i in 0..x.len() {
                let mut shifted = inputs.clone();
                shifted[k].data_mut()[i] += STEP;
                let up = evaluate(&shifted, &weights, build);
                shifted[k].data_mut()[i] -= 2.0 * STEP;
                let down = evaluate(&shifted, &weights, build);
                let numeric = (up - down) / (2.0 * STEP);
                let rel =
                    (analytic[i] - numeric).abs() / analytic[i].abs().max(numeric.abs()).max(1e-5);
                worst = worst.max(rel);
                assert!(
                    rel <= TOL,
                    "{name}: trial {trial}, input {k}[{i}]: analytic {} vs numeric {numeric}",
                    analytic[i]
                );
            }
        }
    }
    eprintln!("{name}: worst relative error {worst:.2e}");
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| rng.gen_range(lo..hi)).collect(),
    )
    .unwrap()
}

/// Values bounded away from zero, for kinked activations.
fn off_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let v: f64 = rng.gen_range(0.1..2.0);
            if rng.gen_bool(0.5) {
                v
            } else {
                -v
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

fn dims(rng: &mut ChaCha8Rng) -> (usize, usize) {
    (rng.gen_range(1..=4), rng.gen_range(1..=6))
}

fn pair(rng: &mut ChaCha8Rng) -> Vec<Tensor> {
    let (r, c) = dims(rng);
    vec![
        uniform(rng, &[r, c], -2.0, 2.0),
        uniform(rng, &[r, c], -2.0, 2.0),
    ]
}

#[test]
fn elementwise_binary() {
    check("add", pair, &|t, v| t.add(v[0], v[1]).unwrap());
    check("sub", pair, &|t, v| t.sub(v[0], v[1]).unwrap());
    check("mul", pair, &|t, v| t.mul(v[0], v[1]).unwrap());
}

#[test]
fn scaling_and_constants() {
    let one = |rng: &mut ChaCha8Rng| {
        let (r, c) = dims(rng);
        vec![uniform(rng, &[r, c], -2.0, 2.0)]
    };
    check("scale", one, &|t, v| t.scale(v[0], -1.7));
    check("add_const", one, &|t, v| {
        let c = Tensor::full(t.shape(v[0]), 0.3);
        t.add_const(v[0], &c).unwrap()
    });
    check("mul_const", one, &|t, v| {
        let n = t.value(v[0]).len();
        let c = Tensor::new(
            t.shape(v[0]).to_vec(),
            (0..n).map(|i| i as f64 - 1.5).collect(),
        )
        .unwrap();
        t.mul_const(v[0], &c).unwrap()
    });
}

#[test]
fn broadcasting() {
    check(
        "broadcast_rows",
        |rng| {
            let n = rng.gen_range(1..=6);
            vec![uniform(rng, &[n], -1.0, 1.0)]
        },
        &|t, v| t.broadcast_rows(v[0], 3).unwrap(),
    );
    check(
        "add_row",
        |rng| {
            let (r, c) = dims(rng);
            vec![
                uniform(rng, &[r, c], -1.0, 1.0),
                uniform(rng, &[c], -1.0, 1.0),
            ]
        },
        &|t, v| t.add_row(v[0], v[1]).unwrap(),
    );
}

#[test]
fn products() {
    let mm = |rng: &mut ChaCha8Rng| {
        let (a, b, c) = (
            rng.gen_range(1..=4),
            rng.gen_range(1..=4),
            rng.gen_range(1..=4),
        );
        vec![
            uniform(rng, &[a, b], -1.0, 1.0),
            uniform(rng, &[b, c], -1.0, 1.0),
        ]
    };
    check("matmul", mm, &|t, v| t.matmul(v[0], v[1]).unwrap());
    let mbt = |rng: &mut ChaCha8Rng| {
        let (a, b, c) = (
            rng.gen_range(1..=4),
            rng.gen_range(1..=4),
            rng.gen_range(1..=4),
        );
        vec![
            uniform(rng, &[a, b], -1.0, 1.0),
            uniform(rng, &[c, b], -1.0, 1.0),
        ]
    };
    check("matmul_bt", mbt, &|t, v| t.matmul_bt(v[0], v[1]).unwrap());
    check(
        "transpose",
        |rng| {
            let (r, c) = dims(rng);
            vec![uniform(rng, &[r, c], -1.0, 1.0)]
        },
        &|t, v| t.transpose(v[0]).unwrap(),
    );
}

#[test]
fn activations() {
    let kinked = |rng: &mut ChaCha8Rng| {
        let (r, c) = dims(rng);
        vec![off_zero(rng, &[r, c])]
    };
    check("relu", kinked, &|t, v| t.relu(v[0]));
    check("leaky_relu", kinked, &|t, v| t.leaky_relu(v[0], 0.2));
    let smooth = |rng: &mut ChaCha8Rng| {
        let (r, c) = dims(rng);
        vec![uniform(rng, &[r, c], -3.0, 3.0)]
    };
    check("gelu", smooth, &|t, v| t.gelu(v[0]));
    check("sigmoid", smooth, &|t, v| t.sigmoid(v[0]));
    let positive = |rng: &mut ChaCha8Rng| {
        let (r, c) = dims(rng);
        vec![uniform(rng, &[r, c], 0.2, 3.0)]
    };
    check("log", positive, &|t, v| t.log(v[0]));
    check("sqrt", positive, &|t, v| t.sqrt(v[0]));
    check("clamp_min", kinked, &|t, v| t.clamp_min(v[0], 0.05));
}

#[test]
fn normalizers() {
    let rows = |rng: &mut ChaCha8Rng| {
        let (r, c) = dims(rng);
        vec![uniform(rng, &[r, c.max(2)], -2.0, 2.0)]
    };
    check("softmax", rows, &|t, v| t.softmax(v[0]).unwrap());
    check(
        "layer_norm",
        |rng| {
            let (r, c) = dims(rng);
            let c = c.max(2);
            vec![
                uniform(rng, &[r, c], -2.0, 2.0),
                uniform(rng, &[c], 0.5, 1.5),
                uniform(rng, &[c], -0.5, 0.5),
            ]
        },
        &|t, v| t.layer_norm(v[0], v[1], v[2]).unwrap(),
    );
}

#[test]
fn indexing() {
    check(
        "embedding",
        |rng| vec![uniform(rng, &[5, 4], -1.0, 1.0)],
        // Repeated indices exercise the scatter-add adjoint.
        &|t, v| t.embedding(v[0], &[3, 0, 3, 4, 3]).unwrap(),
    );
    check(
        "gather",
        |rng| vec![uniform(rng, &[3, 4], -1.0, 1.0)],
        &|t, v| t.gather(v[0], &[11, 0, 5, 5, 7]).unwrap(),
    );
    check(
        "slice_cols",
        |rng| vec![uniform(rng, &[3, 6], -1.0, 1.0)],
        &|t, v| t.slice_cols(v[0], 2, 3).unwrap(),
    );
    check(
        "slice_rows",
        |rng| vec![uniform(rng, &[4, 3], -1.0, 1.0)],
        &|t, v| t.slice_rows(v[0], 1, 2).unwrap(),
    );
    check(
        "concat_cols",
        |rng| {
            let r = rng.gen_range(1..=4);
            vec![
                uniform(rng, &[r, 2], -1.0, 1.0),
                uniform(rng, &[r, 3], -1.0, 1.0),
            ]
        },
        &|t, v| t.concat_cols(&[v[0], v[1], v[0]]).unwrap(),
    );
}

#[test]
fn reductions_and_losses() {
    let one = |rng: &mut ChaCha8Rng| {
        let (r, c) = dims(rng);
        vec![uniform(rng, &[r, c], -2.0, 2.0)]
    };
    check("sum", one, &|t, v| t.sum(v[0]));
    check("mean", one, &|t, v| t.mean(v[0]));
    check(
        "bce_with_logits",
        |rng| vec![uniform(rng, &[1, 6], -4.0, 4.0)],
        &|t, v| {
            t.bce_with_logits(v[0], &[1.0, 0.0, 0.0, 1.0, 1.0, 0.0])
                .unwrap()
        },
    );
    check(
        "softmax cross-entropy",
        |rng| vec![uniform(rng, &[3, 5], -2.0, 2.0)],
        &|t, v| {
            let p = t.softmax(v[0]).unwrap();
            let picked = t.gather(p, &[1, 5, 14]).unwrap();
            let logs = t.log(picked);
            let s = t.sum(logs);
            t.scale(s, -1.0)
        },
    );
}

#[test]
fn attention_composition() {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let mha = MultiHeadAttention::new(&mut store, "attn", 4, 2, &mut rng).unwrap();
    let gen = |rng: &mut ChaCha8Rng| {
        vec![
            uniform(rng, &[3, 4], -1.0, 1.0),
            uniform(rng, &[5, 4], -1.0, 1.0),
        ]
    };
    let mask = [true, true, false, true, false];
    let build = |t: &mut Tape, v: &[Var]| {
        // The layer records onto `t`, lent to a forward pass for the call.
        let mut f = Forward::eval(&store);
        std::mem::swap(&mut f.tape, t);
        let out = mha.forward(&mut f, v[0], v[1], Some(&mask)).unwrap();
        std::mem::swap(&mut f.tape, t);
        out
    };
    check("multi-head attention", gen, &build);
}
