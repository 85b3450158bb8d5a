//! Fixed-point iteration for `y = F(y)`: plain Picard steps and Anderson
//! mixing over a short window of past iterates.
//!
//! Step `k` evaluates `f_k = F(x_k)` and records the relative residual of
//! `x_k`. The returned equilibrium is `f_k` for the accepting step, or for the
//! best-residual step when the budget runs out.

use crate::error::{Error, Result};
use crate::tensor::{Real, Tape, Tensor, Var};

pub const RESIDUAL_FLOOR: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SolverMethod {
    Picard,
    Anderson,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SolverConfig {
    pub method: SolverMethod,
    pub tol: f64,
    pub t_max: usize,
    pub t_min: usize,
    pub window: usize,
    pub damping: f64,
    pub ridge: f64,
    /// Ignore `tol` and always run `t_max` steps.
    pub budget_only: bool,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig {
            method: SolverMethod::Anderson,
            tol: 3e-4,
            t_max: 64,
            t_min: 6,
            window: 5,
            damping: 1.0,
            ridge: 1e-8,
            budget_only: false,
        }
    }
}

impl SolverConfig {
    pub fn picard(tol: f64, t_max: usize) -> Self {
        SolverConfig {
            method: SolverMethod::Picard,
            tol,
            t_max,
            t_min: 0,
            ..Default::default()
        }
    }

    pub fn anderson(tol: f64, t_max: usize) -> Self {
        SolverConfig {
            method: SolverMethod::Anderson,
            tol,
            t_max,
            t_min: 0,
            ..Default::default()
        }
    }

    /// Fixed-budget variant used for iteration sweeps.
    pub fn with_budget(mut self, t: usize) -> Self {
        self.t_max = t;
        self.t_min = self.t_min.min(t);
        self.budget_only = true;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, msg: &str| Err(Error::config(format!("solver.{key}"), msg));
        if !(self.tol > 0.0) {
            return bad("tol", "must be > 0");
        }
        if self.t_max == 0 {
            return bad("t_max", "must be >= 1");
        }
        if self.t_min > self.t_max {
            return bad("t_min", "must not exceed t_max");
        }
        if self.window == 0 {
            return bad("window", "must be >= 1");
        }
        if !(self.damping > 0.0 && self.damping <= 1.0) {
            return bad("damping", "must lie in (0, 1]");
        }
        if !(self.ridge > 0.0) {
            return bad("ridge", "must be > 0");
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SolverResult<T> {
    pub y_star: Tensor<T>,
    pub iterations: usize,
    pub residuals: Vec<f64>,
    pub converged: bool,
    /// `x_0 .. x_K` followed by `y_star`, when requested.
    pub trajectory: Option<Vec<Tensor<T>>>,
    /// Floating-point work spent on mixing, outside of `F`.
    pub mix_flops: u64,
    /// Floating-point work inside `F`, when evaluated through [`root_find`].
    pub map_flops: u64,
}

impl<T> SolverResult<T> {
    pub fn final_residual(&self) -> f64 {
        self.residuals.last().copied().unwrap_or(f64::INFINITY)
    }
}

/// `‖fy − y‖_F / max(‖y‖_F, 1e-8)` over the whole tensor.
pub fn relative_residual<T: Real>(y: &Tensor<T>, fy: &Tensor<T>) -> f64 {
    fy.dist(y) / y.norm().max(RESIDUAL_FLOOR)
}

pub fn picard_solve<T: Real>(
    f: impl FnMut(&Tensor<T>) -> Result<Tensor<T>>,
    y_init: &Tensor<T>,
    cfg: &SolverConfig,
    keep_trajectory: bool,
) -> Result<SolverResult<T>> {
    let cfg = SolverConfig {
        method: SolverMethod::Picard,
        ..*cfg
    };
    solve(f, y_init, &cfg, keep_trajectory)
}

pub fn anderson_solve<T: Real>(
    f: impl FnMut(&Tensor<T>) -> Result<Tensor<T>>,
    y_init: &Tensor<T>,
    cfg: &SolverConfig,
    keep_trajectory: bool,
) -> Result<SolverResult<T>> {
    let cfg = SolverConfig {
        method: SolverMethod::Anderson,
        ..*cfg
    };
    solve(f, y_init, &cfg, keep_trajectory)
}

/// Dispatches on `cfg.method`.
pub fn solve<T: Real>(
    mut f: impl FnMut(&Tensor<T>) -> Result<Tensor<T>>,
    y_init: &Tensor<T>,
    cfg: &SolverConfig,
    keep_trajectory: bool,
) -> Result<SolverResult<T>> {
    let anderson = cfg.method == SolverMethod::Anderson;
    let numel = y_init.numel() as u64;
    let mut x = y_init.clone();
    let mut residuals = Vec::with_capacity(cfg.t_max);
    let mut trajectory = keep_trajectory.then(Vec::new);
    let mut xs: Vec<Tensor<T>> = Vec::new();
    let mut fs: Vec<Tensor<T>> = Vec::new();
    let mut best: Option<(f64, Tensor<T>)> = None;
    let mut mix_flops = 0u64;
    let mut converged = false;
    let mut last_f = None;

    for k in 0..cfg.t_max {
        if let Some(t) = trajectory.as_mut() {
            t.push(x.clone());
        }
        let fx = f(&x)?;
        if !fx.is_finite() {
            return Err(Error::NonFiniteIterate { step: k });
        }
        let r = relative_residual(&x, &fx);
        residuals.push(r);
        mix_flops += 3 * numel;
        if k + 1 >= cfg.t_min && r < cfg.tol && !cfg.budget_only {
            converged = true;
            last_f = Some(fx);
            break;
        }
        if best.as_ref().is_none_or(|(b, _)| r < *b) {
            best = Some((r, fx.clone()));
        }
        if k + 1 == cfg.t_max {
            last_f = Some(fx);
            break;
        }
        if !anderson {
            x = fx;
            continue;
        }
        xs.push(x);
        fs.push(fx);
        if xs.len() > cfg.window {
            xs.remove(0);
            fs.remove(0);
        }
        let (next, flops) = anderson_mix(&xs, &fs, cfg);
        mix_flops += flops;
        x = next;
    }

    let y_star = match (converged, cfg.budget_only) {
        (true, _) | (false, true) => last_f.expect("at least one step"),
        (false, false) => best.map(|(_, t)| t).or(last_f).expect("at least one step"),
    };
    if let Some(t) = trajectory.as_mut() {
        t.push(y_star.clone());
    }
    Ok(SolverResult {
        iterations: residuals.len(),
        residuals,
        converged,
        trajectory,
        y_star,
        mix_flops,
        map_flops: 0,
    })
}

/// A map `T(y, y0)` that can be recorded on a tape.
pub trait FixedPointMap<T: Real> {
    fn record(&self, tape: &mut Tape<T>, y: Var, y0: Var) -> Result<Var>;

    /// Evaluates `T(y, y0)` on a throwaway tape; returns value and FLOPs.
    fn eval(&self, y: &Tensor<T>, y0: &Tensor<T>) -> Result<(Tensor<T>, u64)> {
        let mut tape = Tape::new();
        let yv = tape.constant(y.clone());
        let y0v = tape.constant(y0.clone());
        let out = self.record(&mut tape, yv, y0v)?;
        Ok((tape.value(out).clone(), tape.flops()))
    }
}

/// Solves `y = T(y, y0)` for fixed `y0` starting at `y_init`. No evaluation
/// leaves a tape behind; the result carries no gradient.
pub fn root_find<T: Real, M: FixedPointMap<T> + ?Sized>(
    map: &M,
    y0: &Tensor<T>,
    y_init: &Tensor<T>,
    cfg: &SolverConfig,
    diagnostics: bool,
) -> Result<SolverResult<T>> {
    if y0.shape() != y_init.shape() {
        return Err(Error::Shape {
            op: "root_find",
            lhs: y0.shape().to_vec(),
            rhs: y_init.shape().to_vec(),
        });
    }
    let mut flops = 0u64;
    let mut res = solve(
        |y: &Tensor<T>| {
            let (v, f) = map.eval(y, y0)?;
            flops += f;
            Ok(v)
        },
        y_init,
        cfg,
        diagnostics,
    )?;
    res.map_flops = flops;
    Ok(res)
}

/// Next Anderson iterate from the window; falls back to the latest Picard
/// step when the constrained least-squares system is singular.
fn anderson_mix<T: Real>(xs: &[Tensor<T>], fs: &[Tensor<T>], cfg: &SolverConfig) -> (Tensor<T>, u64) {
    let n = xs.len();
    let numel = xs[0].numel();
    let picard = || fs[n - 1].clone();
    let g: Vec<Vec<f64>> = xs
        .iter()
        .zip(fs)
        .map(|(x, f)| f.data().iter().zip(x.data()).map(|(a, b)| a.f64() - b.f64()).collect())
        .collect();
    let mut h = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in 0..=i {
            let v: f64 = g[i].iter().zip(&g[j]).map(|(a, b)| a * b).sum();
            h[i][j] = v;
            h[j][i] = v;
        }
    }
    let scale = (0..n).map(|i| h[i][i]).fold(0.0, f64::max);
    let mut flops = (n * (n + 1) * numel) as u64 + (4 * n * numel) as u64;
    let alpha = if n == 1 {
        Some(vec![1.0])
    } else if scale > 0.0 && scale.is_finite() {
        // Bordered system [[0, 1ᵀ], [1, H + λI]] [ν; α] = [1; 0].
        let m = n + 1;
        let mut a = vec![vec![0.0; m + 1]; m];
        a[0][m] = 1.0;
        for i in 0..n {
            a[0][i + 1] = 1.0;
            a[i + 1][0] = 1.0;
            for j in 0..n {
                a[i + 1][j + 1] = h[i][j] + if i == j { cfg.ridge * scale } else { 0.0 };
            }
        }
        gauss_solve(a).map(|sol| sol[1..].to_vec())
    } else {
        None
    };
    let Some(alpha) = alpha.filter(|a| a.iter().all(|v| v.is_finite())) else {
        return (picard(), flops);
    };
    let beta = cfg.damping;
    let mut out = vec![0.0f64; numel];
    for i in 0..n {
        let (wf, wx) = (alpha[i] * beta, alpha[i] * (1.0 - beta));
        for (j, o) in out.iter_mut().enumerate() {
            *o += wf * fs[i].data()[j].f64();
            if beta != 1.0 {
                *o += wx * xs[i].data()[j].f64();
            }
        }
    }
    flops += (2 * n * numel) as u64;
    let data = out.into_iter().map(T::of).collect();
    (Tensor::new(xs[0].shape().to_vec(), data).expect("same shape"), flops)
}

/// Gaussian elimination with partial pivoting on an augmented matrix.
/// Returns `None` when a pivot vanishes.
pub(crate) fn gauss_solve(mut a: Vec<Vec<f64>>) -> Option<Vec<f64>> {
    let n = a.len();
    let norm = a.iter().flat_map(|r| r[..n].iter()).fold(0.0f64, |m, v| m.max(v.abs()));
    for c in 0..n {
        let p = (c..n).max_by(|&i, &j| a[i][c].abs().total_cmp(&a[j][c].abs()))?;
        if a[p][c].abs() <= 1e-14 * norm.max(f64::MIN_POSITIVE) {
            return None;
        }
        a.swap(c, p);
        for r in c + 1..n {
            let f = a[r][c] / a[c][c];
            if f != 0.0 {
                for k in c..=n {
                    a[r][k] -= f * a[c][k];
                }
            }
        }
    }
    let mut x = vec![0.0; n];
    for r in (0..n).rev() {
        let s: f64 = (r + 1..n).map(|k| a[r][k] * x[k]).sum();
        x[r] = (a[r][n] - s) / a[r][r];
    }
    Some(x)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(&[v.len()], v).unwrap()
    }

    fn affine(y: &Tensor<f64>) -> Result<Tensor<f64>> {
        Ok(y.map(|v| 0.5 * v + 1.0))
    }

    #[test]
    fn residual_examples() {
        assert_eq!(relative_residual(&t(&[1.0, 2.0]), &t(&[1.0, 2.0])), 0.0);
        assert_eq!(relative_residual(&t(&[1.0, 0.0]), &t(&[1.0, 1.0])), 1.0);
        let r = relative_residual(&t(&[0.0, 0.0]), &t(&[3.0, 4.0]));
        assert!(r.is_finite());
        assert_eq!(r, 5.0 / 1e-8);
    }

    #[test]
    fn picard_affine_contraction() {
        let res = picard_solve(affine, &t(&[0.0, 0.0]), &SolverConfig::picard(1e-10, 200), true).unwrap();
        assert!(res.converged);
        assert!(res.y_star.dist(&t(&[2.0, 2.0])) < 1e-9);
        // x_k = 2 - 2^{1-k}: residual of x_k is 2^{-k}·2/‖x_k‖
        for (k, r) in res.residuals.iter().enumerate().skip(1) {
            let xk = 2.0 - 2.0f64.powi(1 - k as i32);
            let expect = 2.0f64.powi(-(k as i32)) * 2.0f64.sqrt() / (xk * 2.0f64.sqrt());
            assert!((r - expect).abs() < 1e-12 * expect.max(1.0), "step {k}: {r} vs {expect}");
        }
        assert_eq!(res.trajectory.as_ref().unwrap().len(), res.iterations + 1);
    }

    #[test]
    fn identity_map_stops_at_t_min() {
        let cfg = SolverConfig {
            t_min: 4,
            ..SolverConfig::picard(1e-6, 50)
        };
        let y = t(&[0.3, -1.0]);
        let res = picard_solve(|y: &Tensor<f64>| Ok(y.clone()), &y, &cfg, false).unwrap();
        assert!(res.converged);
        assert_eq!(res.iterations, 4);
        assert_eq!(res.y_star, y);
    }

    #[test]
    fn expanding_map_fails_at_budget() {
        let res = picard_solve(|y: &Tensor<f64>| Ok(y.map(|v| 2.0 * v + 1.0)), &t(&[1.0]), &SolverConfig::picard(1e-6, 20), false).unwrap();
        assert!(!res.converged);
        assert_eq!(res.iterations, 20);
        // residuals 2^{k+1}/(2^{k+1}-1) shrink, so the best step is the last
        assert_eq!(res.y_star, t(&[2.0f64.powi(21) - 1.0]));
    }

    #[test]
    fn non_finite_iterate_reports_step() {
        let mut calls = 0;
        let err = picard_solve(
            |y: &Tensor<f64>| {
                calls += 1;
                Ok(if calls == 3 { y.map(|_| f64::NAN) } else { y.map(|v| v + 1.0) })
            },
            &t(&[1.0]),
            &SolverConfig::picard(1e-30, 10),
            false,
        )
        .unwrap_err();
        assert!(matches!(err, Error::NonFiniteIterate { step: 2 }));
    }

    #[test]
    fn anderson_window_one_is_picard() {
        let cfg = SolverConfig {
            window: 1,
            ..SolverConfig::anderson(1e-12, 60)
        };
        let f = |y: &Tensor<f64>| Ok(y.map(|v| (0.7 * v).sin() + 0.2));
        let a = anderson_solve(f, &t(&[0.1, 2.0, -1.0]), &cfg, true).unwrap();
        let p = picard_solve(f, &t(&[0.1, 2.0, -1.0]), &cfg, true).unwrap();
        assert_eq!(a.trajectory, p.trajectory);
        assert_eq!(a.residuals, p.residuals);
        assert_eq!(a.y_star, p.y_star);
    }

    #[test]
    fn anderson_not_slower_on_affine() {
        let a = anderson_solve(affine, &t(&[0.0, 0.0]), &SolverConfig::anderson(1e-10, 200), false).unwrap();
        let p = picard_solve(affine, &t(&[0.0, 0.0]), &SolverConfig::picard(1e-10, 200), false).unwrap();
        assert!(a.converged && p.converged);
        assert!(a.iterations <= p.iterations);
        assert!(a.y_star.dist(&t(&[2.0, 2.0])) < 1e-9);
    }

    #[test]
    fn budget_only_runs_full_budget() {
        let cfg = SolverConfig::picard(1e-3, 7).with_budget(5);
        let res = picard_solve(affine, &t(&[0.0]), &cfg, false).unwrap();
        assert_eq!(res.iterations, 5);
        assert!(!res.converged);
        // five Picard steps from 0: 2 - 2^{-4}
        assert_eq!(res.y_star, t(&[2.0 - 2.0f64.powi(-4)]));
    }

    #[test]
    fn gauss_solve_small_system() {
        let x = gauss_solve(vec![vec![0.0, 2.0, 4.0], vec![1.0, 1.0, 3.0]]).unwrap();
        assert_eq!(x, vec![1.0, 2.0]);
        assert!(gauss_solve(vec![vec![1.0, 1.0, 1.0], vec![1.0, 1.0, 2.0]]).is_none());
    }

    #[test]
    fn config_validation_names_key() {
        let cfg = SolverConfig {
            tol: -1.0,
            ..Default::default()
        };
        match cfg.validate() {
            Err(Error::Config { key, .. }) => assert_eq!(key, "solver.tol"),
            other => panic!("unexpected {other:?}"),
        }
    }
}
