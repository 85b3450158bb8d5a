//! Gradients through an equilibrium `y* = T(y*, y0)`.
//!
//! Given `v = ∂L/∂y*`, every mode produces parameter gradients of the map and
//! the gradient reaching `y0`. The forward solve itself is never taped.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nn::normal_tensor;
use crate::solver::{solve, FixedPointMap, SolverConfig};
use crate::tensor::{ParamId, ParamStore, Real, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum BackwardMode {
    /// Adjoint approximated by `u = v`.
    OneStep,
    /// Backprop through `k` damped applications started at `y*`.
    Phantom { k: usize, damping: f64 },
    /// Adjoint `u = Jᵀu + v` solved to tolerance.
    FullIft(SolverConfig),
}

impl Default for BackwardMode {
    fn default() -> Self {
        BackwardMode::Phantom { k: 3, damping: 0.5 }
    }
}

/// Vector-Jacobian products of one map application.
#[derive(Clone, Debug)]
pub struct Vjp<T> {
    pub d_y: Tensor<T>,
    pub d_y0: Tensor<T>,
    pub params: Vec<(ParamId, Tensor<T>)>,
}

#[derive(Clone, Debug)]
pub struct ImplicitGrads<T> {
    pub params: Vec<(ParamId, Tensor<T>)>,
    pub d_y0: Tensor<T>,
    /// Adjoint solver iterations (zero for the approximate modes).
    pub iterations: usize,
    pub converged: bool,
    /// Activation elements held by the backward tape.
    pub activations: usize,
    /// FLOPs of the backward pass (recorded applications plus their VJPs).
    pub flops: u64,
}

/// One recorded application `out = T(y, y0)` with both inputs differentiable,
/// reusable for any number of VJP sweeps.
pub struct RecordedMap<T> {
    tape: Tape<T>,
    y: Var,
    y0: Var,
    out: Var,
}

impl<T: Real> RecordedMap<T> {
    pub fn new<M: FixedPointMap<T> + ?Sized>(map: &M, y: &Tensor<T>, y0: &Tensor<T>) -> Result<Self> {
        if y.shape() != y0.shape() {
            return Err(Error::contract(format!(
                "state {:?} and proposal {:?} differ in shape",
                y.shape(),
                y0.shape()
            )));
        }
        let mut tape = Tape::new();
        let yv = tape.leaf(y.clone(), true);
        let y0v = tape.leaf(y0.clone(), true);
        let out = map.record(&mut tape, yv, y0v)?;
        Ok(RecordedMap {
            tape,
            y: yv,
            y0: y0v,
            out,
        })
    }

    pub fn output(&self) -> &Tensor<T> {
        self.tape.value(self.out)
    }

    pub fn vjp(&self, w: &Tensor<T>) -> Result<Vjp<T>> {
        let g = self.tape.backward_from(self.out, w)?;
        let shape = self.tape.shape(self.y).to_vec();
        Ok(Vjp {
            d_y: g.get_or_zeros(self.y, &shape),
            d_y0: g.get_or_zeros(self.y0, &shape),
            params: self.tape.param_grads(&g),
        })
    }

    pub fn activations(&self) -> usize {
        self.tape.activation_count()
    }

    pub fn flops(&self) -> u64 {
        self.tape.flops()
    }
}

/// `(wᵀJ_y, wᵀJ_y0, wᵀJ_θ)` from a single sweep over one fresh application.
pub fn vjp_cell<T: Real, M: FixedPointMap<T> + ?Sized>(map: &M, y: &Tensor<T>, y0: &Tensor<T>, w: &Tensor<T>) -> Result<Vjp<T>> {
    RecordedMap::new(map, y, y0)?.vjp(w)
}

/// Dispatches on `mode`.
pub fn implicit_backward<T: Real, M: FixedPointMap<T> + ?Sized>(
    map: &M,
    mode: &BackwardMode,
    v: &Tensor<T>,
    y_star: &Tensor<T>,
    y0: &Tensor<T>,
) -> Result<ImplicitGrads<T>> {
    match *mode {
        BackwardMode::OneStep => backward_onestep(map, v, y_star, y0),
        BackwardMode::Phantom { k, damping } => backward_phantom(map, v, y_star, y0, k, damping),
        BackwardMode::FullIft(ref cfg) => backward_full_ift(map, v, y_star, y0, cfg),
    }
}

pub fn backward_onestep<T: Real, M: FixedPointMap<T> + ?Sized>(
    map: &M,
    v: &Tensor<T>,
    y_star: &Tensor<T>,
    y0: &Tensor<T>,
) -> Result<ImplicitGrads<T>> {
    backward_phantom(map, v, y_star, y0, 1, 1.0)
}

pub fn backward_phantom<T: Real, M: FixedPointMap<T> + ?Sized>(
    map: &M,
    v: &Tensor<T>,
    y_star: &Tensor<T>,
    y0: &Tensor<T>,
    k: usize,
    damping: f64,
) -> Result<ImplicitGrads<T>> {
    if k == 0 {
        return Err(Error::contract("phantom gradient needs k >= 1"));
    }
    if v.shape() != y_star.shape() || y0.shape() != y_star.shape() {
        return Err(Error::contract("phantom gradient operands differ in shape"));
    }
    let mut tape = Tape::new();
    let mut y = tape.constant(y_star.clone());
    let y0v = tape.leaf(y0.clone(), true);
    for _ in 0..k {
        let t = map.record(&mut tape, y, y0v)?;
        y = if damping == 1.0 {
            t
        } else {
            let keep = tape.scale(y, 1.0 - damping);
            let step = tape.scale(t, damping);
            tape.add(keep, step)?
        };
    }
    let g = tape.backward_from(y, v)?;
    Ok(ImplicitGrads {
        params: tape.param_grads(&g),
        d_y0: g.get_or_zeros(y0v, y0.shape()),
        iterations: 0,
        converged: true,
        activations: tape.activation_count(),
        flops: 3 * tape.flops(),
    })
}

pub fn backward_full_ift<T: Real, M: FixedPointMap<T> + ?Sized>(
    map: &M,
    v: &Tensor<T>,
    y_star: &Tensor<T>,
    y0: &Tensor<T>,
    cfg: &SolverConfig,
) -> Result<ImplicitGrads<T>> {
    let rec = RecordedMap::new(map, y_star, y0)?;
    if v.shape() != y_star.shape() {
        return Err(Error::contract("adjoint seed differs in shape from the equilibrium"));
    }
    let adj = solve(
        |u: &Tensor<T>| {
            let j = rec.vjp(u)?.d_y;
            j.add(v)
        },
        v,
        cfg,
        false,
    )?;
    if !adj.converged {
        log::warn!(
            "adjoint solve did not converge in {} steps (residual {:.3e})",
            adj.iterations,
            adj.final_residual()
        );
    }
    let last = rec.vjp(&adj.y_star)?;
    Ok(ImplicitGrads {
        params: last.params,
        d_y0: last.d_y0,
        iterations: adj.iterations,
        converged: adj.converged,
        activations: rec.activations(),
        // one recorded application, then a VJP (about twice its cost) per
        // adjoint iteration plus the final one
        flops: rec.flops() + 2 * rec.flops() * (adj.iterations as u64 + 1),
    })
}

/// Growth rate of power iteration with `Jᵀ` at the equilibrium: the
/// geometric mean of per-step norm ratios over the second half of the run.
/// Collapsed iterates restart from a fresh random direction (at most three
/// times); persistent collapse reports zero.
pub fn spectral_radius_estimate<T: Real, M: FixedPointMap<T> + ?Sized>(
    map: &M,
    y_star: &Tensor<T>,
    y0: &Tensor<T>,
    iters: usize,
    seed: u64,
) -> Result<f64> {
    let rec = RecordedMap::new(map, y_star, y0)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let fresh = |rng: &mut ChaCha8Rng| {
        let w: Tensor<T> = normal_tensor(rng, y_star.shape(), 1.0);
        let n = w.norm();
        w.scale(T::of(1.0 / n))
    };
    let iters = iters.max(1);
    'restart: for _ in 0..=3 {
        let mut w = fresh(&mut rng);
        let mut logs = Vec::with_capacity(iters);
        for _ in 0..iters {
            let next = rec.vjp(&w)?.d_y;
            let s = next.norm();
            if !(s > 1e-300) || !s.is_finite() {
                continue 'restart;
            }
            logs.push(s.ln());
            w = next.scale(T::of(1.0 / s));
        }
        let tail = &logs[logs.len() / 2..];
        return Ok((tail.iter().sum::<f64>() / tail.len() as f64).exp());
    }
    Ok(0.0)
}

/// `T(y, c) = A·y + c` over vectors, with `A` a trainable square matrix.
#[derive(Clone, Debug)]
pub struct AffineMap<T> {
    pub store: ParamStore<T>,
    pub a: ParamId,
}

impl<T: Real> AffineMap<T> {
    pub fn new(a: Tensor<T>) -> Result<Self> {
        if a.rank() != 2 || a.shape()[0] != a.shape()[1] {
            return Err(Error::contract(format!("affine map needs a square matrix, got {:?}", a.shape())));
        }
        let mut store = ParamStore::new();
        let a = store.add("a", a);
        Ok(AffineMap { store, a })
    }

    pub fn matrix(&self) -> &Tensor<T> {
        self.store.value(self.a)
    }
}

impl<T: Real> FixedPointMap<T> for AffineMap<T> {
    fn record(&self, tape: &mut Tape<T>, y: Var, y0: Var) -> Result<Var> {
        let a = tape.param(&self.store, self.a);
        let ay = tape.matmul_nt(y, a)?;
        tape.add(ay, y0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_map(theta: f64) -> AffineMap<f64> {
        AffineMap::new(Tensor::from_f64(&[1, 1], &[theta]).unwrap()).unwrap()
    }

    fn s(x: f64) -> Tensor<f64> {
        Tensor::from_f64(&[1, 1], &[x]).unwrap()
    }

    fn theta_grad(g: &[(ParamId, Tensor<f64>)]) -> f64 {
        g[0].1.data()[0]
    }

    #[test]
    fn scalar_vjp() {
        let m = scalar_map(0.5);
        let r = vjp_cell(&m, &s(2.0), &s(1.0), &s(1.0)).unwrap();
        assert_eq!(r.d_y.data(), &[0.5]);
        assert_eq!(r.d_y0.data(), &[1.0]);
        assert_eq!(theta_grad(&r.params), 2.0);
        let z = vjp_cell(&m, &s(2.0), &s(1.0), &s(0.0)).unwrap();
        assert_eq!((z.d_y.data()[0], z.d_y0.data()[0], theta_grad(&z.params)), (0.0, 0.0, 0.0));
    }

    #[test]
    fn scalar_modes_against_closed_form() {
        let m = scalar_map(0.5);
        let (y, c, v) = (s(2.0), s(1.0), s(1.0));
        let one = backward_onestep(&m, &v, &y, &c).unwrap();
        assert_eq!(theta_grad(&one.params), 2.0);
        let ph = backward_phantom(&m, &v, &y, &c, 2, 1.0).unwrap();
        assert_eq!(theta_grad(&ph.params), 3.0);
        let full = backward_full_ift(&m, &v, &y, &c, &SolverConfig::picard(1e-12, 200)).unwrap();
        assert!((theta_grad(&full.params) - 4.0).abs() < 1e-10);
        assert!((full.d_y0.data()[0] - 2.0).abs() < 1e-10);
        assert!(full.converged);
    }

    #[test]
    fn phantom_approaches_exact_geometrically() {
        let m = scalar_map(0.5);
        let mut prev = f64::INFINITY;
        for k in 1..=20 {
            let g = backward_phantom(&m, &s(1.0), &s(2.0), &s(1.0), k, 1.0).unwrap();
            let err = (theta_grad(&g.params) - 4.0).abs();
            // remaining Neumann tail is 2·θ^k·2 = 4·2^{-k}
            assert!((err - 4.0 * 0.5f64.powi(k as i32)).abs() < 1e-12);
            assert!(err < prev);
            prev = err;
        }
    }

    #[test]
    fn phantom_one_undamped_is_onestep() {
        let m = AffineMap::<f64>::new(Tensor::from_f64(&[2, 2], &[0.3, -0.2, 0.1, 0.4]).unwrap()).unwrap();
        let y = Tensor::from_f64(&[2], &[0.5, -1.0]).unwrap();
        let c = Tensor::from_f64(&[2], &[1.0, 2.0]).unwrap();
        let v = Tensor::from_f64(&[2], &[0.7, 0.1]).unwrap();
        let a = backward_onestep(&m, &v, &y, &c).unwrap();
        let b = backward_phantom(&m, &v, &y, &c, 1, 1.0).unwrap();
        assert_eq!(a.params[0].1, b.params[0].1);
        assert_eq!(a.d_y0, b.d_y0);
        assert!(backward_phantom(&m, &v, &y, &c, 0, 1.0).is_err());
    }

    #[test]
    fn zero_jacobian_makes_onestep_exact() {
        let m = scalar_map(0.0);
        let one = backward_onestep(&m, &s(1.0), &s(1.0), &s(1.0)).unwrap();
        let full = backward_full_ift(&m, &s(1.0), &s(1.0), &s(1.0), &SolverConfig::picard(1e-12, 50)).unwrap();
        assert_eq!(one.params[0].1, full.params[0].1);
        assert_eq!(one.d_y0, full.d_y0);
    }

    #[test]
    fn spectral_estimates_on_normal_matrices() {
        let m = AffineMap::<f64>::new(Tensor::from_f64(&[3, 3], &[0.7, 0.0, 0.0, 0.0, 0.7, 0.0, 0.0, 0.0, 0.7]).unwrap()).unwrap();
        let y = Tensor::from_f64(&[3], &[1.0, 2.0, 3.0]).unwrap();
        let rho = spectral_radius_estimate(&m, &y, &y, 30, 0).unwrap();
        assert!((rho - 0.7).abs() < 1e-3);
        let m = AffineMap::<f64>::new(Tensor::from_f64(&[2, 2], &[0.9, 0.0, 0.0, 0.1]).unwrap()).unwrap();
        let y = Tensor::from_f64(&[2], &[1.0, 1.0]).unwrap();
        let rho = spectral_radius_estimate(&m, &y, &y, 40, 1).unwrap();
        assert!((rho - 0.9).abs() < 1e-3, "{rho}");
        let zero = scalar_map(0.0);
        assert_eq!(spectral_radius_estimate(&zero, &s(1.0), &s(1.0), 5, 0).unwrap(), 0.0);
    }

    #[test]
    fn nonconverged_adjoint_still_returns_gradients() {
        let m = scalar_map(1.5);
        let g = backward_full_ift(&m, &s(1.0), &s(1.0), &s(1.0), &SolverConfig::picard(1e-12, 10)).unwrap();
        assert!(!g.converged);
        assert!(g.params[0].1.is_finite());
    }
}
