//! Central-difference checks of every tape op in double precision.

use attractor::tensor::{Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Builds `f(inputs)` on a fresh tape, contracts it with fixed random weights
/// to a scalar, and compares the tape gradient of every input with central
/// differences.
fn check(inputs: &[Tensor<f64>], f: impl Fn(&mut Tape<f64>, &[Var]) -> Var, tol: f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let eval = |xs: &[Tensor<f64>], with_grad: bool| {
        let mut tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|x| tape.leaf(x.clone(), with_grad)).collect();
        let out = f(&mut tape, &vars);
        (tape, vars, out)
    };
    let (tape, vars, out) = eval(inputs, true);
    let w = rand_tensor(&mut rng, tape.shape(out));
    let grads = tape.backward_from(out, &w).unwrap();
    let objective = |xs: &[Tensor<f64>]| {
        let (t, _, o) = eval(xs, false);
        t.value(o).dot(&w)
    };
    let h = 1e-5;
    for (i, x) in inputs.iter().enumerate() {
        let g = grads.get_or_zeros(vars[i], x.shape());
        for j in 0..x.numel() {
            let mut xp = inputs.to_vec();
            xp[i].data_mut()[j] += h;
            let mut xm = inputs.to_vec();
            xm[i].data_mut()[j] -= h;
            let fd = (objective(&xp) - objective(&xm)) / (2.0 * h);
            let an = g.data()[j];
            assert!(
                (fd - an).abs() <= tol * (1.0 + fd.abs()),
                "input {i} element {j}: finite difference {fd} vs tape {an}"
            );
        }
    }
}

fn rng() -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(42)
}

#[test]
fn matmul_grads() {
    let mut r = rng();
    check(&[rand_tensor(&mut r, &[2, 3, 4]), rand_tensor(&mut r, &[4, 5])], |t, v| t.matmul(v[0], v[1]).unwrap(), 1e-7);
    check(&[rand_tensor(&mut r, &[3, 4]), rand_tensor(&mut r, &[6, 4])], |t, v| t.matmul_nt(v[0], v[1]).unwrap(), 1e-7);
}

#[test]
fn elementwise_grads() {
    let mut r = rng();
    let a = rand_tensor(&mut r, &[3, 4]);
    let b = rand_tensor(&mut r, &[3, 4]);
    check(&[a.clone(), b.clone()], |t, v| t.add(v[0], v[1]).unwrap(), 1e-7);
    check(&[a.clone(), b.clone()], |t, v| t.sub(v[0], v[1]).unwrap(), 1e-7);
    check(&[a.clone(), b.clone()], |t, v| t.mul(v[0], v[1]).unwrap(), 1e-7);
    check(std::slice::from_ref(&a), |t, v| t.mul(v[0], v[0]).unwrap(), 1e-7);
    check(&[a.clone(), rand_tensor(&mut r, &[4])], |t, v| t.add_bias(v[0], v[1]).unwrap(), 1e-7);
    check(std::slice::from_ref(&a), |t, v| t.scale(v[0], -1.7), 1e-7);
    check(&[a.clone(), rand_tensor(&mut r, &[1])], |t, v| t.scale_by(v[0], v[1]).unwrap(), 1e-7);
    check(std::slice::from_ref(&a), |t, v| t.relu_sq(v[0]), 1e-6);
    check(&[a], |t, v| t.sum_all(v[0]), 1e-7);
}

#[test]
fn rms_norm_grads() {
    let mut r = rng();
    let x = rand_tensor(&mut r, &[2, 3, 4]);
    check(std::slice::from_ref(&x), |t, v| t.rms_norm(v[0], None, 1e-5).unwrap(), 1e-6);
    check(&[x.clone(), rand_tensor(&mut r, &[4])], |t, v| t.rms_norm(v[0], Some(v[1]), 1e-5).unwrap(), 1e-6);
    // per-head gain tiled over the leading axes
    check(&[x, rand_tensor(&mut r, &[3, 4])], |t, v| t.rms_norm(v[0], Some(v[1]), 1e-5).unwrap(), 1e-6);
}

#[test]
fn softmax_grads_each_axis() {
    let mut r = rng();
    let x = rand_tensor(&mut r, &[2, 3, 4]);
    for axis in 0..3 {
        check(std::slice::from_ref(&x), |t, v| t.softmax(v[0], axis).unwrap(), 1e-6);
    }
}

#[test]
fn embedding_and_cross_entropy_grads() {
    let mut r = rng();
    let table = rand_tensor(&mut r, &[5, 3]);
    check(&[table], |t, v| t.embedding(v[0], &[1, 4, 1, 0], &[2, 2]).unwrap(), 1e-7);
    let logits = rand_tensor(&mut r, &[4, 6]);
    check(std::slice::from_ref(&logits), |t, v| t.cross_entropy(v[0], &[0, usize::MAX, 5, 2], usize::MAX).unwrap(), 1e-6);
    check(&[logits], |t, v| t.cross_entropy(v[0], &[usize::MAX; 4], usize::MAX).unwrap(), 1e-9);
}

#[test]
fn rope_and_attention_grads() {
    let mut r = rng();
    let x = rand_tensor(&mut r, &[2, 5, 2, 4]);
    check(std::slice::from_ref(&x), |t, v| t.rope(v[0], 10000.0).unwrap(), 1e-7);
    let q = rand_tensor(&mut r, &[2, 5, 2, 4]);
    let k = rand_tensor(&mut r, &[2, 5, 2, 4]);
    for causal in [true, false] {
        check(&[q.clone(), k.clone(), x.clone()], |t, v| t.attention(v[0], v[1], v[2], causal).unwrap(), 1e-6);
    }
    check(&[x], |t, v| t.attention(v[0], v[0], v[0], true).unwrap(), 1e-6);
}

#[test]
fn structural_grads() {
    let mut r = rng();
    let a = rand_tensor(&mut r, &[2, 3]);
    let b = rand_tensor(&mut r, &[2, 2]);
    check(&[a.clone(), b.clone()], |t, v| t.concat_last(v[0], v[1]).unwrap(), 1e-7);
    let c = rand_tensor(&mut r, &[1, 3]);
    check(&[a.clone(), c], |t, v| t.concat0(v[0], v[1]).unwrap(), 1e-7);
    check(std::slice::from_ref(&a), |t, v| t.narrow0(v[0], 1, 1).unwrap(), 1e-7);
    check(&[a], |t, v| t.reshape(v[0], &[3, 2]).unwrap(), 1e-7);
}

#[test]
fn composite_block_like_graph() {
    let mut r = rng();
    let x = rand_tensor(&mut r, &[1, 4, 8]);
    let wq = rand_tensor(&mut r, &[8, 8]);
    let g = rand_tensor(&mut r, &[8]);
    check(
        &[x, wq, g],
        |t, v| {
            let n = t.rms_norm(v[0], Some(v[2]), 1e-5).unwrap();
            let q = t.matmul(n, v[1]).unwrap();
            let q = t.reshape(q, &[1, 4, 2, 4]).unwrap();
            let q = t.rope(q, 10000.0).unwrap();
            let a = t.attention(q, q, q, true).unwrap();
            let a = t.reshape(a, &[1, 4, 8]).unwrap();
            let h = t.add(v[0], a).unwrap();
            t.relu_sq(h)
        },
        1e-6,
    );
}

#[test]
fn backward_requires_scalar_loss() {
    let mut tape = Tape::<f64>::new();
    let x = tape.leaf(Tensor::ones(&[2]), true);
    assert!(tape.backward(x).is_err());
    let s = tape.sum_all(x);
    let g = tape.backward(s).unwrap();
    assert_eq!(g.get(x).unwrap().data(), &[1.0, 1.0]);
}

#[test]
fn repeated_sweeps_on_one_tape_agree() {
    let mut r = rng();
    let mut tape = Tape::<f64>::new();
    let x = tape.leaf(rand_tensor(&mut r, &[3, 4]), true);
    let w = tape.leaf(rand_tensor(&mut r, &[4, 4]), true);
    let y = tape.matmul(x, w).unwrap();
    let seed = rand_tensor(&mut r, &[3, 4]);
    let g1 = tape.backward_from(y, &seed).unwrap();
    let g2 = tape.backward_from(y, &seed).unwrap();
    assert_eq!(g1.get(x), g2.get(x));
    assert_eq!(g1.get(w), g2.get(w));
}

#[test]
fn index_and_shape_errors() {
    let mut tape = Tape::<f64>::new();
    let e = tape.leaf(Tensor::zeros(&[4, 2]), true);
    assert!(tape.embedding(e, &[4], &[1]).is_err());
    let a = tape.leaf(Tensor::zeros(&[2, 3]), false);
    let b = tape.leaf(Tensor::zeros(&[2, 3]), false);
    assert!(tape.matmul(a, b).is_err());
    let nan = tape.leaf(Tensor::full(&[3], f64::NAN), false);
    assert!(tape.softmax(nan, 0).is_err());
}
