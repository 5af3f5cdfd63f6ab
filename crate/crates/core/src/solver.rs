//! Conjugate gradient on the normal equations `A*A x = A*y`.

use crate::ct::Sinogram;
use crate::error::{Error, Result};
use crate::grid::Volume;

/// Minimal vector-space surface needed by CG.
pub trait VectorSpace: Clone {
    fn dot(&self, other: &Self) -> f64;
    /// `self += alpha * other`
    fn axpy(&mut self, alpha: f64, other: &Self);
    fn scale(&mut self, alpha: f64);
    fn all_finite(&self) -> bool;
}

impl VectorSpace for Volume {
    fn dot(&self, other: &Self) -> f64 {
        Volume::dot(self, other)
    }
    fn axpy(&mut self, alpha: f64, other: &Self) {
        Volume::axpy(self, alpha, other)
    }
    fn scale(&mut self, alpha: f64) {
        Volume::scale(self, alpha)
    }
    fn all_finite(&self) -> bool {
        self.is_finite()
    }
}

impl VectorSpace for Sinogram {
    fn dot(&self, other: &Self) -> f64 {
        Sinogram::dot(self, other)
    }
    fn axpy(&mut self, alpha: f64, other: &Self) {
        for (a, b) in self.data_mut().iter_mut().zip(other.data()) {
            *a += alpha * b;
        }
    }
    fn scale(&mut self, alpha: f64) {
        self.data_mut().iter_mut().for_each(|v| *v *= alpha);
    }
    fn all_finite(&self) -> bool {
        self.is_finite()
    }
}

impl VectorSpace for Vec<f64> {
    fn dot(&self, other: &Self) -> f64 {
        self.iter().zip(other).map(|(a, b)| a * b).sum()
    }
    fn axpy(&mut self, alpha: f64, other: &Self) {
        for (a, b) in self.iter_mut().zip(other) {
            *a += alpha * b;
        }
    }
    fn scale(&mut self, alpha: f64) {
        self.iter_mut().for_each(|v| *v *= alpha);
    }
    fn all_finite(&self) -> bool {
        self.iter().all(|v| v.is_finite())
    }
}

/// Iterate, normal-equation residual, search direction, and history.
#[derive(Debug, Clone)]
pub struct CgState<X> {
    pub x: X,
    /// `A*(y - A x)`
    pub r: X,
    pub p: X,
    pub iterations: usize,
    /// ‖A*(y - A x_m)‖ for m = 0..=iterations
    pub residual_norms: Vec<f64>,
}

/// Runs at most `iters` CG steps from `x_init`. Stops early once the
/// normal-equation residual drops to `tol · ‖A*y‖`.
pub fn cg_normal<X, Y, FA, FT>(apply_a: FA, apply_at: FT, y: &Y, x_init: &X, iters: usize, tol: f64) -> Result<X>
where
    X: VectorSpace,
    Y: VectorSpace,
    FA: Fn(&X) -> Result<Y>,
    FT: Fn(&Y) -> Result<X>,
{
    Ok(cg_normal_state(apply_a, apply_at, y, x_init, iters, tol)?.x)
}

/// [`cg_normal`] returning the full solver state.
pub fn cg_normal_state<X, Y, FA, FT>(
    apply_a: FA,
    apply_at: FT,
    y: &Y,
    x_init: &X,
    iters: usize,
    tol: f64,
) -> Result<CgState<X>>
where
    X: VectorSpace,
    Y: VectorSpace,
    FA: Fn(&X) -> Result<Y>,
    FT: Fn(&Y) -> Result<X>,
{
    let x = x_init.clone();
    if iters == 0 {
        let r = x.clone();
        return Ok(CgState { p: r.clone(), r, x, iterations: 0, residual_norms: Vec::new() });
    }
    // CGLS recurrences: same iterates as CG on A*A, without forming A*A.
    let mut data_res = y.clone();
    data_res.axpy(-1.0, &apply_a(&x)?);
    let r = apply_at(&data_res)?;
    let rhs_norm = if tol > 0.0 {
        let aty = apply_at(y)?;
        aty.dot(&aty).sqrt()
    } else {
        0.0
    };
    let mut gamma = r.dot(&r);
    let mut state = CgState { p: r.clone(), r, x, iterations: 0, residual_norms: vec![gamma.sqrt()] };

    while state.iterations < iters {
        if gamma.sqrt() <= tol * rhs_norm || gamma == 0.0 {
            break;
        }
        let q = apply_a(&state.p)?;
        let qq = q.dot(&q);
        if qq == 0.0 {
            break;
        }
        let alpha = gamma / qq;
        state.x.axpy(alpha, &state.p);
        data_res.axpy(-alpha, &q);
        state.r = apply_at(&data_res)?;
        let gamma_next = state.r.dot(&state.r);
        if !gamma_next.is_finite() || !state.x.all_finite() {
            return Err(Error::NonFinite(format!("CG diverged at iteration {}", state.iterations + 1)));
        }
        let beta = gamma_next / gamma;
        let mut p = state.r.clone();
        p.axpy(beta, &state.p);
        state.p = p;
        gamma = gamma_next;
        state.iterations += 1;
        state.residual_norms.push(gamma.sqrt());
    }
    Ok(state)
}
