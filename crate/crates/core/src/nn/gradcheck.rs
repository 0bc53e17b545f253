//! Finite-difference checks of every op's backward pass.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Graph, ParamStore, Tensor, Var};

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let len = shape.iter().product();
    Tensor::new(shape, (0..len).map(|_| rng.gen_range(-1.0..1.0)).collect())
}

/// Checks `d(Σ r ⊙ f(inputs)) / d inputs` against central differences.
fn check(inputs: &[Tensor], f: impl Fn(&mut Graph, &[Var]) -> Var) {
    check_with(inputs, 1e-3, true, f)
}

fn check_with(inputs: &[Tensor], eps: f32, training: bool, f: impl Fn(&mut Graph, &[Var]) -> Var) {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let eval = |ins: &[Tensor]| -> (Tensor, Graph, Vec<Var>) {
        let mut g = Graph::new(training);
        let vars: Vec<Var> = ins.iter().map(|t| g.leaf(t.clone())).collect();
        let y = f(&mut g, &vars);
        (g.value(y).clone(), g, vars)
    };
    let (y0, _, _) = eval(inputs);
    let weights = random(y0.shape(), &mut rng);
    let loss_of = |y: &Tensor| -> f64 {
        y.data().iter().zip(weights.data()).map(|(a, b)| (*a as f64) * (*b as f64)).sum()
    };

    let mut g = Graph::new(training);
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
    let y = f(&mut g, &vars);
    let w = g.input(weights.clone());
    let prod = g.mul(y, w);
    let loss = g.sum_all(prod);
    let grads = g.backward(loss);

    for (k, input) in inputs.iter().enumerate() {
        let analytic = grads.get(vars[k]).cloned().unwrap_or_else(|| Tensor::zeros(input.shape()));
        for i in 0..input.len() {
            let mut plus = inputs.to_vec();
            plus[k].data_mut()[i] += eps;
            let mut minus = inputs.to_vec();
            minus[k].data_mut()[i] -= eps;
            let num = (loss_of(&eval(&plus).0) - loss_of(&eval(&minus).0)) / (2.0 * eps as f64);
            let a = analytic.data()[i] as f64;
            let tol = 1e-2 * (1.0 + a.abs().max(num.abs()));
            assert!(
                (a - num).abs() <= tol,
                "input {k} element {i}: analytic {a} vs numeric {num}"
            );
        }
    }
}

fn rng() -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(7)
}

#[test]
fn elementwise_and_broadcast() {
    let mut r = rng();
    let a = random(&[2, 3, 4], &mut r);
    let b = random(&[1, 3, 1], &mut r);
    check(&[a.clone(), b.clone()], |g, v| g.add(v[0], v[1]));
    check(&[a.clone(), b.clone()], |g, v| g.sub(v[0], v[1]));
    check(&[a.clone(), b.clone()], |g, v| g.mul(v[0], v[1]));
    check(&[a.clone(), a.map(|x| x * 0.5)], |g, v| g.mul(v[0], v[1]));
    check(std::slice::from_ref(&a), |g, v| g.scale(v[0], -1.7));
}

#[test]
fn activations() {
    let mut r = rng();
    let a = random(&[3, 5], &mut r);
    check(std::slice::from_ref(&a), |g, v| g.relu(v[0]));
    check(std::slice::from_ref(&a), |g, v| g.gelu(v[0]));
    check(std::slice::from_ref(&a), |g, v| g.sigmoid(v[0]));
    check(std::slice::from_ref(&a), |g, v| g.tanh(v[0]));
    check(std::slice::from_ref(&a), |g, v| g.selu(v[0]));
    check(std::slice::from_ref(&a), |g, v| g.abs(v[0]));
    // keep the two halves apart so no pair sits on the max kink
    let mut m = random(&[2, 4, 3, 3], &mut r);
    for o in 0..2 {
        for i in 0..18 {
            let lo = m.data()[o * 36 + i];
            m.data_mut()[o * 36 + 18 + i] = lo + if i % 2 == 0 { 0.3 } else { -0.3 };
        }
    }
    check(&[m], |g, v| g.mfm(v[0]));
}

#[test]
fn convolutions() {
    let mut r = rng();
    let x = random(&[2, 3, 6, 5], &mut r);
    let w = random(&[4, 3, 3, 3], &mut r);
    let b = random(&[4], &mut r);
    check(&[x.clone(), w.clone(), b.clone()], |g, v| g.conv2d(v[0], v[1], Some(v[2]), 1, 1));
    check(&[x.clone(), w.clone()], |g, v| g.conv2d(v[0], v[1], None, 2, 1));
    let w1 = random(&[4, 3, 1, 1], &mut r);
    check(&[x.clone(), w1], |g, v| g.conv2d(v[0], v[1], None, 1, 0));
    let dw = random(&[3, 1, 3, 3], &mut r);
    let db = random(&[3], &mut r);
    check(&[x.clone(), dw, db], |g, v| g.dwconv2d(v[0], v[1], v[2], 1));
}

#[test]
fn spatial_resampling() {
    let mut r = rng();
    let x = random(&[2, 5, 4, 6], &mut r);
    check(std::slice::from_ref(&x), |g, v| g.maxpool(v[0], 2, 2, 0));
    check(std::slice::from_ref(&x), |g, v| g.maxpool(v[0], 3, 2, 1));
    check(std::slice::from_ref(&x), |g, v| g.upsample2(v[0]));
    check(std::slice::from_ref(&x), |g, v| g.shift(v[0], 2, 5));
    check(std::slice::from_ref(&x), |g, v| g.shift(v[0], 3, 5));
}

#[test]
fn shape_ops() {
    let mut r = rng();
    let x = random(&[2, 3, 4], &mut r);
    let y = random(&[2, 2, 4], &mut r);
    check(std::slice::from_ref(&x), |g, v| g.permute(v[0], &[2, 0, 1]));
    check(std::slice::from_ref(&x), |g, v| g.reshape(v[0], &[6, 4]));
    check(&[x.clone(), y.clone()], |g, v| g.concat(&[v[0], v[1]], 1));
    check(std::slice::from_ref(&x), |g, v| g.slice(v[0], 2, 1, 2));
    check(std::slice::from_ref(&x), |g, v| g.gather_rows(v[0], vec![2, 0, 1, 1], 2));
    check(std::slice::from_ref(&x), |g, v| g.mean_axis(v[0], 1));
    check(std::slice::from_ref(&x), |g, v| g.max_axis(v[0], 2));
    check(std::slice::from_ref(&x), |g, v| g.pairwise_mul(v[0]));
}

#[test]
fn matmul_variants() {
    let mut r = rng();
    for &(ta, tb) in &[(false, false), (true, false), (false, true), (true, true)] {
        let a = if ta { random(&[2, 4, 3], &mut r) } else { random(&[2, 3, 4], &mut r) };
        let b = if tb { random(&[2, 5, 4], &mut r) } else { random(&[2, 4, 5], &mut r) };
        check(&[a, b], move |g, v| g.matmul(v[0], v[1], ta, tb));
    }
    // broadcast batch on the left operand
    let q = random(&[1, 3, 4], &mut r);
    let k = random(&[2, 6, 4], &mut r);
    check(&[q, k], |g, v| g.matmul(v[0], v[1], false, true));
    let x = random(&[2, 3, 4], &mut r);
    let w = random(&[5, 4], &mut r);
    let b = random(&[5], &mut r);
    check(&[x, w, b], |g, v| g.linear(v[0], v[1], Some(v[2])));
}

#[test]
fn normalization() {
    let mut r = rng();
    let x = random(&[3, 6], &mut r);
    let gam = random(&[6], &mut r);
    let bet = random(&[6], &mut r);
    check(std::slice::from_ref(&x), |g, v| g.softmax_last(v[0]));
    check(&[x.clone(), gam.clone(), bet.clone()], |g, v| g.layer_norm(v[0], v[1], v[2]));
    let img = random(&[3, 2, 3, 3], &mut r);
    check(std::slice::from_ref(&img), |g, v| g.instance_norm(v[0]));

    let mut store = ParamStore::new();
    let rm = store.buffer("rm", Tensor::zeros(&[2]));
    let rv = store.buffer("rv", Tensor::full(&[2], 1.0));
    let gb = random(&[2], &mut r);
    let bb = random(&[2], &mut r);
    for training in [true, false] {
        check_with(&[img.clone(), gb.clone(), bb.clone()], 1e-3, training, |g, v| {
            g.batch_norm(v[0], v[1], v[2], (rm, store.get(rm)), (rv, store.get(rv)))
        });
    }
}

#[test]
fn losses() {
    let mut r = rng();
    let logits = random(&[4, 2], &mut r);
    check(std::slice::from_ref(&logits), |g, v| g.cross_entropy(v[0], &[0, 1, 1, 0], &[1.0, 2.0, 0.5, 1.0]));
    let a = random(&[3, 2, 2, 2], &mut r);
    let b = random(&[3, 2, 2, 2], &mut r);
    check(&[a, b], |g, v| g.mse_per_sample(v[0], v[1]));
}

#[test]
fn soft_quantization() {
    let mut r = rng();
    let logits = random(&[2, 4, 3, 3], &mut r);
    let palette = random(&[2, 4, 3], &mut r).map(|v| 0.5 + 0.4 * v);
    check(&[logits, palette], |g, v| g.quantize_soft(v[0], v[1], 0.5));
}
