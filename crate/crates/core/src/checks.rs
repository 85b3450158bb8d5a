//! Invariant and oracle checks that run in seconds: finite-difference
//! gradients, dense-solve references for the implicit backward pass, solver
//! rate bounds and activation accounting. Shared by `attractor check` and the
//! test suites.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::implicit::{backward_full_ift, backward_onestep, backward_phantom, AffineMap, BackwardMode, ImplicitGrads};
use crate::models::{masked_loss, CellMap, Family, Model, ModelSpec};
use crate::nn::{BlockConfig, Cell, Injection, RMS_EPS};
use crate::solver::{gauss_solve, picard_solve, root_find, solve, FixedPointMap, SolverConfig};
use crate::tasks::{gen_copy, IGNORE};
use crate::tensor::{ParamId, ParamStore, Tape, Tensor, Var};

type OpFn = Box<dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var>>;

fn op(f: impl Fn(&mut Tape<f64>, &[Var]) -> Result<Var> + 'static) -> OpFn {
    Box::new(f)
}

#[derive(Clone, Debug, PartialEq)]
pub struct CheckOutcome {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl CheckOutcome {
    fn new(name: &str, passed: bool, detail: String) -> Self {
        CheckOutcome {
            name: name.to_string(),
            passed,
            detail,
        }
    }
}

impl std::fmt::Display for CheckOutcome {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{} {}: {}", if self.passed { "PASS" } else { "FAIL" }, self.name, self.detail)
    }
}

/// Denominator floor of the elementwise relative error.
pub const REL_FLOOR: f64 = 1e-5;

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(REL_FLOOR)
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).expect("shape")
}

/// Worst elementwise relative error between tape gradients of `f` (contracted
/// with fixed random weights) and central differences, over every input.
pub fn op_fd_error(inputs: &[Tensor<f64>], f: &dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var>) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let run = |xs: &[Tensor<f64>], grad: bool| -> Result<(Tape<f64>, Vec<Var>, Var)> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|x| tape.leaf(x.clone(), grad)).collect();
        let out = f(&mut tape, &vars)?;
        Ok((tape, vars, out))
    };
    let (tape, vars, out) = run(inputs, true)?;
    let w = uniform(&mut rng, tape.shape(out));
    let g = tape.backward_from(out, &w)?;
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for (i, x) in inputs.iter().enumerate() {
        let an = g.get_or_zeros(vars[i], x.shape());
        for j in 0..x.numel() {
            let mut xp = inputs.to_vec();
            xp[i].data_mut()[j] += h;
            let mut xm = inputs.to_vec();
            xm[i].data_mut()[j] -= h;
            let (tp, _, op) = run(&xp, false)?;
            let (tm, _, om) = run(&xm, false)?;
            let fd = (tp.value(op).dot(&w) - tm.value(om).dot(&w)) / (2.0 * h);
            worst = worst.max(rel_err(fd, an.data()[j]));
        }
    }
    Ok(worst)
}

type OpCase = (&'static str, Vec<Tensor<f64>>, OpFn);

/// Every differentiable tape op on small random inputs.
pub fn op_cases() -> Vec<OpCase> {
    let mut r = ChaCha8Rng::seed_from_u64(3);
    let mut u = |s: &[usize]| uniform(&mut r, s);
    vec![
        ("matmul", vec![u(&[2, 3, 4]), u(&[4, 5])], op(|t, v| t.matmul(v[0], v[1]))),
        ("matmul_nt", vec![u(&[3, 4]), u(&[6, 4])], op(|t, v| t.matmul_nt(v[0], v[1]))),
        ("add", vec![u(&[3, 4]), u(&[3, 4])], op(|t, v| t.add(v[0], v[1]))),
        ("sub", vec![u(&[3, 4]), u(&[3, 4])], op(|t, v| t.sub(v[0], v[1]))),
        ("mul", vec![u(&[3, 4]), u(&[3, 4])], op(|t, v| t.mul(v[0], v[1]))),
        ("add_bias", vec![u(&[3, 4]), u(&[4])], op(|t, v| t.add_bias(v[0], v[1]))),
        ("scale", vec![u(&[3, 4])], op(|t, v| Ok(t.scale(v[0], -1.3)))),
        ("scale_by", vec![u(&[3, 4]), u(&[1])], op(|t, v| t.scale_by(v[0], v[1]))),
        ("relu_sq", vec![u(&[3, 4])], op(|t, v| Ok(t.relu_sq(v[0])))),
        ("rms_norm", vec![u(&[2, 3, 4]), u(&[4])], op(|t, v| t.rms_norm(v[0], Some(v[1]), RMS_EPS))),
        ("softmax", vec![u(&[2, 3, 4])], op(|t, v| t.softmax(v[0], 1))),
        (
            "embedding",
            vec![u(&[5, 3])],
            op(|t, v| t.embedding(v[0], &[0, 4, 4, 2, 1, 0], &[2, 3])),
        ),
        ("rope", vec![u(&[1, 3, 2, 4])], op(|t, v| t.rope(v[0], 100.0))),
        (
            "attention",
            vec![u(&[1, 4, 2, 2]), u(&[1, 4, 2, 2]), u(&[1, 4, 2, 2])],
            op(|t, v| t.attention(v[0], v[1], v[2], true)),
        ),
        (
            "attention_full",
            vec![u(&[1, 3, 1, 2]), u(&[1, 3, 1, 2]), u(&[1, 3, 1, 2])],
            op(|t, v| t.attention(v[0], v[1], v[2], false)),
        ),
        ("concat_last", vec![u(&[2, 3]), u(&[2, 2])], op(|t, v| t.concat_last(v[0], v[1]))),
        ("concat0", vec![u(&[2, 3]), u(&[1, 3])], op(|t, v| t.concat0(v[0], v[1]))),
        ("narrow0", vec![u(&[4, 3])], op(|t, v| t.narrow0(v[0], 1, 2))),
        ("reshape", vec![u(&[2, 6])], op(|t, v| t.reshape(v[0], &[3, 4]))),
        ("sum_all", vec![u(&[2, 3])], op(|t, v| Ok(t.sum_all(v[0])))),
        (
            "cross_entropy",
            vec![u(&[2, 3, 5])],
            op(|t, v| t.cross_entropy(v[0], &[0, 4, IGNORE, 2, 1, 3], IGNORE)),
        ),
    ]
}

/// Finite-difference check of every tape op.
pub fn check_op_gradients(tol: f64) -> Result<CheckOutcome> {
    let mut worst = (0.0, "");
    for (name, inputs, f) in op_cases() {
        let e = op_fd_error(&inputs, f.as_ref())?;
        if e > worst.0 {
            worst = (e, name);
        }
    }
    Ok(CheckOutcome::new(
        "op gradients",
        worst.0 < tol,
        format!("worst relative error {:.2e} ({}), tolerance {tol:.0e}", worst.0, worst.1),
    ))
}

/// Small double-precision spec for gradient checks: d=16, two layers, rows of
/// length 8. Equilibrium families solve to 1e-13 and use the exact adjoint so
/// the training gradient is the true gradient of the evaluated loss.
pub fn gradcheck_spec(family: Family) -> ModelSpec {
    let tight = SolverConfig {
        tol: 1e-13,
        t_max: 400,
        t_min: 0,
        ..SolverConfig::default()
    };
    ModelSpec {
        family,
        d: 16,
        d_ff: 32,
        heads: 2,
        vocab: 8,
        max_len: 8,
        n_backbone: 2,
        n_cell: 2,
        looped_t: 3,
        solver: tight,
        backward: BackwardMode::FullIft(tight),
        seed: 5,
        ..ModelSpec::default()
    }
}

/// Worst relative error between a family's training gradient and central
/// differences of its evaluated loss, over `per_param` random coordinates
/// of every parameter tensor.
pub fn family_fd_error(family: Family, per_param: usize) -> Result<f64> {
    let model: Model<f64> = Model::new(gradcheck_spec(family))?;
    let batch = gen_copy(2, 8, 7, 9)?;
    let out = model.loss_and_grads(&batch)?;
    let mut grads: Vec<Tensor<f64>> = model.params.iter().map(|p| Tensor::zeros(p.value.shape())).collect();
    for (id, g) in &out.grads {
        grads[id.index()] = grads[id.index()].add(g)?;
    }
    let loss_at = |m: &Model<f64>| -> Result<f64> {
        let o = m.forward(&batch.inputs, batch.batch, None, false)?;
        masked_loss(&o.logits, &batch)
    };
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for i in 0..model.params.len() {
        let id = ParamId(i);
        let n = model.params.value(id).numel();
        for _ in 0..per_param.min(n) {
            let j = rng.random_range(0..n);
            let mut mp = model.clone();
            mp.params.value_mut(id).data_mut()[j] += h;
            let mut mm = model.clone();
            mm.params.value_mut(id).data_mut()[j] -= h;
            let fd = (loss_at(&mp)? - loss_at(&mm)?) / (2.0 * h);
            worst = worst.max(rel_err(fd, grads[i].data()[j]));
        }
    }
    Ok(worst)
}

pub fn check_family_gradients(tol: f64) -> Result<CheckOutcome> {
    let mut parts = Vec::new();
    let mut ok = true;
    for f in [Family::Plain, Family::Looped, Family::Attractor, Family::Deq] {
        let e = family_fd_error(f, 4)?;
        ok &= e < tol;
        parts.push(format!("{f:?} {e:.2e}"));
    }
    Ok(CheckOutcome::new(
        "model gradients",
        ok,
        format!("{} (tolerance {tol:.0e})", parts.join(", ")),
    ))
}

/// Random orthonormal `n×n` matrix (Gram-Schmidt on a Gaussian draw).
fn orthonormal(rng: &mut ChaCha8Rng, n: usize) -> Vec<Vec<f64>> {
    let mut q: Vec<Vec<f64>> = Vec::with_capacity(n);
    while q.len() < n {
        let mut v: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        for u in &q {
            let s: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
            v.iter_mut().zip(u).for_each(|(a, b)| *a -= s * b);
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-6 {
            q.push(v.into_iter().map(|x| x / norm).collect());
        }
    }
    q
}

/// `A = U·diag(s)·Vᵀ` with singular values in `[lo, hi]` and the largest
/// exactly `hi`, so `‖A‖₂ = hi`.
pub fn random_contraction(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Tensor<f64> {
    let u = orthonormal(rng, n);
    let v = orthonormal(rng, n);
    let s: Vec<f64> = (0..n).map(|i| if i == 0 { hi } else { rng.random_range(lo..=hi) }).collect();
    let mut a = vec![0.0; n * n];
    for r in 0..n {
        for c in 0..n {
            a[r * n + c] = (0..n).map(|k| u[k][r] * s[k] * v[k][c]).sum();
        }
    }
    Tensor::new(vec![n, n], a).expect("square")
}

/// Gaussian matrix rescaled so that `‖A‖₂ = norm` (power iteration on `AᵀA`).
pub fn gaussian_contraction(rng: &mut ChaCha8Rng, n: usize, norm: f64) -> Tensor<f64> {
    let g: Vec<f64> = crate::nn::normal_tensor::<f64>(rng, &[n * n], 1.0).into_data();
    let mut x = vec![1.0; n];
    let mut sigma = 0.0;
    for _ in 0..500 {
        let ax: Vec<f64> = (0..n).map(|r| (0..n).map(|k| g[r * n + k] * x[k]).sum()).collect();
        let atax: Vec<f64> = (0..n).map(|k| (0..n).map(|r| g[r * n + k] * ax[r]).sum()).collect();
        let len = atax.iter().map(|v| v * v).sum::<f64>().sqrt();
        sigma = len.sqrt();
        x = atax.into_iter().map(|v| v / len).collect();
    }
    Tensor::new(vec![n, n], g.into_iter().map(|v| v * norm / sigma).collect()).expect("square")
}

fn row(t: &Tensor<f64>, r: usize) -> &[f64] {
    let n = t.shape()[1];
    &t.data()[r * n..(r + 1) * n]
}

/// Solves `M x = b` densely.
fn dense_solve(m: impl Fn(usize, usize) -> f64, b: &[f64]) -> Vec<f64> {
    let n = b.len();
    let aug: Vec<Vec<f64>> = (0..n)
        .map(|r| (0..n).map(|c| m(r, c)).chain(std::iter::once(b[r])).collect())
        .collect();
    gauss_solve(aug).expect("nonsingular system")
}

/// Affine test problem: cell, proposal, equilibrium and loss seed.
pub struct AffineCase {
    pub map: AffineMap<f64>,
    pub c: Tensor<f64>,
    pub y_star: Tensor<f64>,
    pub v: Tensor<f64>,
    /// Dense reference `(I − Aᵀ)⁻¹ v`.
    pub u: Vec<f64>,
}

pub fn affine_case(rng: &mut ChaCha8Rng, a: Tensor<f64>) -> AffineCase {
    let n = a.shape()[0];
    let c = uniform(rng, &[1, n]);
    let v = uniform(rng, &[1, n]);
    let ys = dense_solve(|r, k| (r == k) as u8 as f64 - row(&a, r)[k], c.data());
    let u = dense_solve(|r, k| (r == k) as u8 as f64 - row(&a, k)[r], v.data());
    AffineCase {
        map: AffineMap::new(a).expect("square"),
        c,
        y_star: Tensor::new(vec![1, n], ys).expect("vector"),
        v,
        u,
    }
}

fn grad_vector(g: &ImplicitGrads<f64>, n: usize) -> Vec<f64> {
    let mut a = vec![0.0; n * n];
    for (_, t) in &g.params {
        a.iter_mut().zip(t.data()).for_each(|(x, y)| *x += y);
    }
    a.extend_from_slice(g.d_y0.data());
    a
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

pub fn tight_adjoint() -> SolverConfig {
    SolverConfig {
        tol: 1e-13,
        t_max: 2000,
        t_min: 0,
        ..SolverConfig::default()
    }
}

/// Full-IFT gradients against the dense oracle and against backprop through a
/// 50-step Picard unroll.
pub fn check_ift_oracle(trials: usize) -> Result<CheckOutcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let (mut worst_dense, mut worst_bptt): (f64, f64) = (0.0, 0.0);
    for _ in 0..trials {
        let n = rng.random_range(4..=16);
        let hi = rng.random_range(0.3..=0.9);
        let a = gaussian_contraction(&mut rng, n, hi);
        let case = affine_case(&mut rng, a);
        let g = backward_full_ift(&case.map, &case.v, &case.y_star, &case.c, &tight_adjoint())?;
        let mut oracle = vec![0.0; n * n];
        for r in 0..n {
            for k in 0..n {
                oracle[r * n + k] = case.u[r] * case.y_star.data()[k];
            }
        }
        oracle.extend_from_slice(&case.u);
        let ift = grad_vector(&g, n);
        worst_dense = worst_dense.max(max_abs_diff(&ift, &oracle));

        let mut tape = Tape::new();
        let c = tape.leaf(case.c.clone(), true);
        let mut y = tape.constant(Tensor::zeros(&[1, n]));
        for _ in 0..50 {
            y = case.map.record(&mut tape, y, c)?;
        }
        let gr = tape.backward_from(y, &case.v)?;
        let mut bptt = vec![0.0; n * n];
        for (_, t) in tape.param_grads(&gr) {
            bptt.iter_mut().zip(t.data()).for_each(|(x, y)| *x += y);
        }
        bptt.extend_from_slice(gr.get_or_zeros(c, &[1, n]).data());
        worst_bptt = worst_bptt.max(max_abs_diff(&ift, &bptt));
    }
    Ok(CheckOutcome::new(
        "implicit gradient oracle",
        worst_dense < 1e-6 && worst_bptt < 1e-4,
        format!("{trials} affine cells: max |IFT − dense| {worst_dense:.2e} (< 1e-6), max |IFT − 50-step BPTT| {worst_bptt:.2e} (< 1e-4)"),
    ))
}


/// Phantom(1, 1) against one-step bit for bit, and phantom error against the
/// exact gradient shrinking in `k`.
pub fn check_backward_hierarchy(trials: usize) -> Result<CheckOutcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(33);
    let mut bitwise = true;
    let mut monotone = 0;
    let ks = [1, 2, 4, 8];
    let mut example = Vec::new();
    for t in 0..trials {
        let n = rng.random_range(2..=16);
        let hi = rng.random_range(0.3..=0.9);
        let a = gaussian_contraction(&mut rng, n, hi);
        let case = affine_case(&mut rng, a);
        let one = backward_onestep(&case.map, &case.v, &case.y_star, &case.c)?;
        let ph = backward_phantom(&case.map, &case.v, &case.y_star, &case.c, 1, 1.0)?;
        bitwise &= one.d_y0.data() == ph.d_y0.data()
            && one.params.len() == ph.params.len()
            && one.params.iter().zip(&ph.params).all(|(a, b)| a.0 == b.0 && a.1.data() == b.1.data());
        let exact = grad_vector(&backward_full_ift(&case.map, &case.v, &case.y_star, &case.c, &tight_adjoint())?, n);
        let scale = exact.iter().map(|x| x * x).sum::<f64>().sqrt();
        let errs: Vec<f64> = ks
            .iter()
            .map(|&k| {
                let g = backward_phantom(&case.map, &case.v, &case.y_star, &case.c, k, 0.5)?;
                let p = grad_vector(&g, n);
                Ok(p.iter().zip(&exact).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt() / scale)
            })
            .collect::<Result<_>>()?;
        if errs.windows(2).all(|w| w[1] < w[0]) {
            monotone += 1;
        }
        if t == 0 {
            example = errs;
        }
    }
    // The transformer cell must also satisfy the bitwise identity.
    let model: Model<f64> = Model::new(gradcheck_spec(Family::Attractor))?;
    let map = model.cell_map().expect("attractor has a cell");
    let mut r = ChaCha8Rng::seed_from_u64(4);
    let y = uniform(&mut r, &[1, 8, 16]);
    let y0 = uniform(&mut r, &[1, 8, 16]);
    let v = uniform(&mut r, &[1, 8, 16]);
    let one = backward_onestep(&map, &v, &y, &y0)?;
    let ph = backward_phantom(&map, &v, &y, &y0, 1, 1.0)?;
    bitwise &= one.d_y0.data() == ph.d_y0.data()
        && one.params.iter().zip(&ph.params).all(|(a, b)| a.0 == b.0 && a.1.data() == b.1.data());
    Ok(CheckOutcome::new(
        "backward-mode hierarchy",
        bitwise && monotone == trials,
        format!(
            "phantom(1,1) == one-step bitwise: {bitwise}; error strictly decreasing over k=1,2,4,8 on {monotone}/{trials} cells (first: {})",
            example.iter().map(|e| format!("{e:.2e}")).collect::<Vec<_>>().join(" > ")
        ),
    ))
}

/// `‖y_k − y*‖ ≤ (L + 1e-6)^k ‖y_0 − y*‖` for Picard on affine contractions.
pub fn check_picard_rate(trials: usize) -> Result<CheckOutcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(44);
    let mut failures = 0;
    for _ in 0..trials {
        let n = rng.random_range(2..=16);
        let l = rng.random_range(0.8..0.95);
        let a = random_contraction(&mut rng, n, 0.0, l);
        let case = affine_case(&mut rng, a);
        let cfg = SolverConfig {
            t_min: 50,
            ..SolverConfig::picard(1e-300, 50)
        };
        let y0 = uniform(&mut rng, &[1, n]);
        let res = picard_solve(
            |y: &Tensor<f64>| case.map.eval(y, &case.c).map(|r| r.0),
            &y0,
            &cfg,
            true,
        )?;
        let traj = res.trajectory.expect("trajectory requested");
        let e0 = traj[0].dist(&case.y_star);
        for (k, yk) in traj.iter().take(51).enumerate() {
            if yk.dist(&case.y_star) > (l + 1e-6).powi(k as i32) * e0 {
                failures += 1;
                break;
            }
        }
    }
    Ok(CheckOutcome::new(
        "Picard rate bound",
        failures == 0,
        format!("{} of {trials} random contractions respect the bound for k <= 50", trials - failures),
    ))
}

/// Anderson(m=5, β=1) needs no more iterations than Picard to reach 1e-8.
pub fn check_anderson_dominance(trials: usize) -> Result<CheckOutcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(55);
    let mut wins = 0;
    let (mut it_a, mut it_p) = (0, 0);
    for _ in 0..trials {
        let n = rng.random_range(2..=16);
        let hi = rng.random_range(0.5..0.95);
        let a = random_contraction(&mut rng, n, 0.0, hi);
        let case = affine_case(&mut rng, a);
        let f = |y: &Tensor<f64>| case.map.eval(y, &case.c).map(|r| r.0);
        let y0 = Tensor::zeros(&[1, n]);
        let mut a = SolverConfig::anderson(1e-8, 5000);
        a.window = 5;
        a.damping = 1.0;
        let ra = solve(f, &y0, &a, false)?;
        let rp = solve(f, &y0, &SolverConfig::picard(1e-8, 5000), false)?;
        if ra.converged && ra.iterations <= rp.iterations {
            wins += 1;
        }
        it_a += ra.iterations;
        it_p += rp.iterations;
    }
    Ok(CheckOutcome::new(
        "Anderson dominance",
        wins * 100 >= 95 * trials,
        format!(
            "Anderson <= Picard on {wins}/{trials} (mean iterations {:.1} vs {:.1})",
            it_a as f64 / trials as f64,
            it_p as f64 / trials as f64
        ),
    ))
}

fn memory_spec(family: Family) -> ModelSpec {
    ModelSpec {
        family,
        d: 16,
        d_ff: 32,
        heads: 2,
        vocab: 8,
        max_len: 8,
        n_backbone: 1,
        n_cell: 1,
        backward: BackwardMode::OneStep,
        seed: 2,
        ..ModelSpec::default()
    }
}

/// Peak stored activations of one training step.
pub fn train_step_activations(spec: ModelSpec) -> Result<usize> {
    let model: Model<f32> = Model::new(spec)?;
    let batch = gen_copy(2, 8, 7, 1)?;
    Ok(model.loss_and_grads(&batch)?.stats.act_peak)
}

/// Least-squares fit `y ≈ a + b·x`; returns `(a, b, relative residual)`.
pub fn affine_fit(xs: &[f64], ys: &[f64]) -> (f64, f64, f64) {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    let b = sxy / sxx;
    let a = my - b * mx;
    let res = xs.iter().zip(ys).map(|(x, y)| (y - a - b * x).powi(2)).sum::<f64>().sqrt();
    let norm = ys.iter().map(|y| y * y).sum::<f64>().sqrt();
    (a, b, res / norm)
}

/// Attractor(OneStep) activations independent of `t_max`; looped activations
/// affine in the unroll length.
pub fn check_memory_law() -> Result<CheckOutcome> {
    let attractor: Vec<usize> = [4, 16, 64]
        .iter()
        .map(|&t| {
            let mut s = memory_spec(Family::Attractor);
            s.solver.t_max = t;
            s.solver.t_min = s.solver.t_min.min(t);
            s.solver.tol = 1e-12;
            train_step_activations(s)
        })
        .collect::<Result<_>>()?;
    let ts = [2usize, 4, 8, 16];
    let looped: Vec<f64> = ts
        .iter()
        .map(|&t| {
            train_step_activations(ModelSpec {
                looped_t: t,
                ..memory_spec(Family::Looped)
            })
            .map(|c| c as f64)
        })
        .collect::<Result<_>>()?;
    let xs: Vec<f64> = ts.iter().map(|&t| t as f64).collect();
    let (_, slope, resid) = affine_fit(&xs, &looped);
    let flat = attractor.windows(2).all(|w| w[0] == w[1]);
    Ok(CheckOutcome::new(
        "memory law",
        flat && slope > 0.0 && resid < 0.01,
        format!(
            "attractor one-step at t_max 4/16/64: {attractor:?}; looped at T 2/4/8/16: {looped:?} (slope {slope:.1}, relative residual {resid:.2e})"
        ),
    ))
}

/// Solves one cell from two proposals and reports `‖y*₁ − y*₂‖` relative to
/// the mean proposal norm, plus whether both solves converged.
pub fn proposal_sensitivity(injection: Injection, tol: f64) -> Result<(f64, bool)> {
    let cfg = BlockConfig {
        d: 16,
        d_ff: 32,
        heads: 2,
        max_len: 8,
        causal: true,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut store = ParamStore::<f64>::new();
    let cell = Cell::init(&mut store, "cell", &cfg, 1, injection, &mut rng, 1e-4);
    // Output gain below sqrt(eps): near zero the final norm is linear with
    // slope gain/sqrt(eps) = 0.5, which makes the whole map a contraction.
    *store.value_mut(cell.stack.final_gain) = Tensor::full(&[cfg.d], 0.5 * RMS_EPS.sqrt());
    let map = CellMap {
        cell: &cell,
        store: &store,
        cfg,
    };
    let mut proposal = || {
        let t = crate::nn::normal_tensor::<f64>(&mut rng, &[1, 8, 16], 1.0);
        let n = t.norm();
        t.scale((128f64).sqrt() / n)
    };
    let (p1, p2) = (proposal(), proposal());
    let solver = SolverConfig {
        t_min: 0,
        ..SolverConfig::anderson(tol, 500)
    };
    let r1 = root_find(&map, &p1, &p1, &solver, false)?;
    let r2 = root_find(&map, &p2, &p2, &solver, false)?;
    let scale = 0.5 * (p1.norm() + p2.norm());
    Ok((r1.y_star.dist(&r2.y_star) / scale, r1.converged && r2.converged))
}

/// Initial-only injection forgets the proposal; additive injection keeps it.
pub fn check_proposal_independence() -> Result<CheckOutcome> {
    let eps = 1e-6;
    let (d_init, c_init) = proposal_sensitivity(Injection::InitialOnly, eps)?;
    let (d_add, c_add) = proposal_sensitivity(Injection::Additive, eps)?;
    Ok(CheckOutcome::new(
        "proposal independence",
        c_init && c_add && d_init <= 10.0 * eps && d_add > 100.0 * eps,
        format!("equilibrium distance for distinct proposals: initial-only {d_init:.2e} (<= {:.0e}), additive {d_add:.2e} (> {:.0e})", 10.0 * eps, 100.0 * eps),
    ))
}

/// A deliberately wrong gradient must be caught by the comparison used in
/// the finite-difference checks.
pub fn check_mutation_detected() -> Result<CheckOutcome> {
    let mut r = ChaCha8Rng::seed_from_u64(99);
    let x = uniform(&mut r, &[3, 4]);
    let honest = op_fd_error(std::slice::from_ref(&x), &|t, v| Ok(t.relu_sq(v[0])))?;
    // relu_sq with its derivative scaled by 1.01: y = relu(x)^2 recorded as
    // relu(x)^2 plus a term whose value is zero but whose gradient is 0.01·2x.
    let mutated = op_fd_error(&[x], &|t, v| {
        let y = t.relu_sq(v[0]);
        let z = t.scale(y, 0.01);
        let zv = t.value(z).clone();
        let frozen = t.constant(zv);
        let bump = t.sub(z, frozen)?;
        t.add(y, bump)
    })?;
    Ok(CheckOutcome::new(
        "mutation detection",
        honest < 1e-4 && mutated > 1e-4,
        format!("honest relu_sq error {honest:.2e}; perturbed backward error {mutated:.2e}"),
    ))
}

/// The fast suite behind `attractor check`.
pub fn run_all() -> Vec<Result<CheckOutcome>> {
    vec![
        check_op_gradients(1e-4),
        check_family_gradients(1e-4),
        check_mutation_detected(),
        check_ift_oracle(20),
        check_backward_hierarchy(20),
        check_picard_rate(100),
        check_anderson_dominance(100),
        check_memory_law(),
        check_proposal_independence(),
    ]
}
