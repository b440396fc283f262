//! Descent minimizer shared by keypoint refinement and body registration.
//!
//! Directions come from limited-memory BFGS (falling back to the negative
//! gradient whenever the quasi-Newton direction is not a descent direction);
//! every step is accepted only under the Armijo sufficient-decrease rule, so
//! the objective is monotonically non-increasing across accepted steps.

use std::collections::VecDeque;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OptimError {
    #[error("objective is not finite at the initial point")]
    NonFiniteStart,
    #[error("gradient contains non-finite entries at iteration {0}")]
    NonFiniteGradient(usize),
}

/// A differentiable scalar function of `dim()` variables.
pub trait Objective {
    fn dim(&self) -> usize;

    fn value(&self, x: &[f64]) -> f64;

    /// Writes the gradient into `grad` and returns the value.
    fn value_and_gradient(&self, x: &[f64], grad: &mut [f64]) -> f64;
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MinimizeConfig {
    pub max_iterations: usize,
    /// Stop once an accepted step decreases the objective by less than this
    /// fraction of its current value.
    pub relative_tolerance: f64,
    /// Stop once the objective drops below this value.
    pub absolute_tolerance: f64,
    pub gradient_tolerance: f64,
    pub memory: usize,
    pub armijo_c1: f64,
    pub max_backtracks: usize,
    /// Length of the first (steepest-descent) trial step.
    pub initial_step: f64,
}

impl Default for MinimizeConfig {
    fn default() -> Self {
        Self {
            max_iterations: 500,
            relative_tolerance: 1e-8,
            absolute_tolerance: 0.0,
            gradient_tolerance: 1e-12,
            memory: 10,
            armijo_c1: 1e-4,
            max_backtracks: 60,
            initial_step: 1e-2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopReason {
    /// Objective already at or below the absolute tolerance.
    AbsoluteTolerance,
    RelativeTolerance,
    SmallGradient,
    /// No step along the descent direction decreased the objective.
    LineSearchExhausted,
    IterationLimit,
}

#[derive(Debug, Clone)]
pub struct MinimizeReport {
    pub x: Vec<f64>,
    pub value: f64,
    pub initial_value: f64,
    pub iterations: usize,
    pub reason: StopReason,
}

impl MinimizeReport {
    pub fn converged(&self) -> bool {
        self.reason != StopReason::IterationLimit
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn minimize<O: Objective + ?Sized>(obj: &O, x0: &[f64], cfg: &MinimizeConfig) -> Result<MinimizeReport, OptimError> {
    let n = obj.dim();
    assert_eq!(x0.len(), n, "start point has wrong dimension");
    let mut x = x0.to_vec();
    let mut g = vec![0.0; n];
    let mut f = obj.value_and_gradient(&x, &mut g);
    if !f.is_finite() {
        return Err(OptimError::NonFiniteStart);
    }
    let initial_value = f;
    let report = |x: Vec<f64>, value, iterations, reason| MinimizeReport { x, value, initial_value, iterations, reason };

    if f <= cfg.absolute_tolerance {
        return Ok(report(x, f, 0, StopReason::AbsoluteTolerance));
    }

    let mut history: VecDeque<(Vec<f64>, Vec<f64>, f64)> = VecDeque::with_capacity(cfg.memory);
    let mut x_new = vec![0.0; n];
    let mut g_new = vec![0.0; n];
    let mut dir = vec![0.0; n];
    let mut alpha_buf = vec![0.0; cfg.memory];

    for iter in 0..cfg.max_iterations {
        if !g.iter().all(|v| v.is_finite()) {
            return Err(OptimError::NonFiniteGradient(iter));
        }
        let gnorm = dot(&g, &g).sqrt();
        if gnorm <= cfg.gradient_tolerance {
            return Ok(report(x, f, iter, StopReason::SmallGradient));
        }

        // two-loop recursion
        dir.iter_mut().zip(&g).for_each(|(d, gi)| *d = -gi);
        for (k, (s, y, rho)) in history.iter().enumerate().rev() {
            let a = rho * dot(s, &dir);
            alpha_buf[k] = a;
            dir.iter_mut().zip(y).for_each(|(d, yi)| *d -= a * yi);
        }
        if let Some((s, y, _)) = history.back() {
            let gamma = dot(s, y) / dot(y, y);
            dir.iter_mut().for_each(|d| *d *= gamma);
        }
        for (k, (s, y, rho)) in history.iter().enumerate() {
            let b = rho * dot(y, &dir);
            let a = alpha_buf[k];
            dir.iter_mut().zip(s).for_each(|(d, si)| *d += (a - b) * si);
        }
        let mut slope = dot(&g, &dir);
        let mut step = 1.0;
        if history.is_empty() || !(slope < 0.0) {
            history.clear();
            dir.iter_mut().zip(&g).for_each(|(d, gi)| *d = -gi);
            slope = -gnorm * gnorm;
            step = (cfg.initial_step / gnorm).min(1.0);
        }

        let mut accepted = false;
        let mut f_new;
        for _ in 0..cfg.max_backtracks {
            x_new.iter_mut().zip(x.iter().zip(&dir)).for_each(|(xn, (xi, di))| *xn = xi + step * di);
            f_new = obj.value(&x_new);
            if f_new.is_finite() && f_new <= f + cfg.armijo_c1 * step * slope {
                accepted = true;
                break;
            }
            step *= 0.5;
        }
        if !accepted {
            if history.is_empty() {
                return Ok(report(x, f, iter, StopReason::LineSearchExhausted));
            }
            // stale curvature information; retry from steepest descent
            history.clear();
            continue;
        }

        f_new = obj.value_and_gradient(&x_new, &mut g_new);
        let s: Vec<f64> = x_new.iter().zip(&x).map(|(a, b)| a - b).collect();
        let y: Vec<f64> = g_new.iter().zip(&g).map(|(a, b)| a - b).collect();
        let sy = dot(&s, &y);
        if sy > 1e-12 * dot(&s, &s).sqrt() * dot(&y, &y).sqrt() && sy > 0.0 {
            if history.len() == cfg.memory {
                history.pop_front();
            }
            history.push_back((s, y, 1.0 / sy));
        }

        let decrease = f - f_new;
        std::mem::swap(&mut x, &mut x_new);
        std::mem::swap(&mut g, &mut g_new);
        f = f_new;
        if f <= cfg.absolute_tolerance {
            return Ok(report(x, f, iter + 1, StopReason::AbsoluteTolerance));
        }
        if decrease <= cfg.relative_tolerance * f.abs() {
            return Ok(report(x, f, iter + 1, StopReason::RelativeTolerance));
        }
    }
    Ok(report(x, f, cfg.max_iterations, StopReason::IterationLimit))
}

/// Central-difference gradient of `f` at `x`.
pub fn central_difference<F: Fn(&[f64]) -> f64>(f: F, x: &[f64], h: f64) -> Vec<f64> {
    let mut xp = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = xp[i];
            xp[i] = orig + h;
            let fp = f(&xp);
            xp[i] = orig - h;
            let fm = f(&xp);
            xp[i] = orig;
            (fp - fm) / (2.0 * h)
        })
        .collect()
}

/// Restricts an objective to a subset of its variables; the rest stay fixed.
pub struct Masked<'a, O: Objective + ?Sized> {
    pub inner: &'a O,
    pub base: Vec<f64>,
    pub free: Vec<usize>,
}

impl<'a, O: Objective + ?Sized> Masked<'a, O> {
    pub fn new(inner: &'a O, base: &[f64], free: Vec<usize>) -> Self {
        Self { inner, base: base.to_vec(), free }
    }

    pub fn expand(&self, sub: &[f64]) -> Vec<f64> {
        let mut full = self.base.clone();
        for (&i, &v) in self.free.iter().zip(sub) {
            full[i] = v;
        }
        full
    }

    pub fn restrict(&self, full: &[f64]) -> Vec<f64> {
        self.free.iter().map(|&i| full[i]).collect()
    }
}

impl<O: Objective + ?Sized> Objective for Masked<'_, O> {
    fn dim(&self) -> usize {
        self.free.len()
    }

    fn value(&self, x: &[f64]) -> f64 {
        self.inner.value(&self.expand(x))
    }

    fn value_and_gradient(&self, x: &[f64], grad: &mut [f64]) -> f64 {
        let full = self.expand(x);
        let mut g = vec![0.0; full.len()];
        let f = self.inner.value_and_gradient(&full, &mut g);
        for (out, &i) in grad.iter_mut().zip(&self.free) {
            *out = g[i];
        }
        f
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Rosenbrock;

    impl Objective for Rosenbrock {
        fn dim(&self) -> usize {
            2
        }
        fn value(&self, x: &[f64]) -> f64 {
            (1.0 - x[0]).powi(2) + 100.0 * (x[1] - x[0] * x[0]).powi(2)
        }
        fn value_and_gradient(&self, x: &[f64], g: &mut [f64]) -> f64 {
            g[0] = -2.0 * (1.0 - x[0]) - 400.0 * x[0] * (x[1] - x[0] * x[0]);
            g[1] = 200.0 * (x[1] - x[0] * x[0]);
            self.value(x)
        }
    }

    #[test]
    fn solves_rosenbrock() {
        let cfg = MinimizeConfig { max_iterations: 2000, relative_tolerance: 0.0, gradient_tolerance: 1e-10, ..Default::default() };
        let r = minimize(&Rosenbrock, &[-1.2, 1.0], &cfg).unwrap();
        assert!((r.x[0] - 1.0).abs() < 1e-6 && (r.x[1] - 1.0).abs() < 1e-6, "{:?}", r);
        assert!(r.value <= r.initial_value);
    }

    #[test]
    fn zero_iterations_at_optimum() {
        let cfg = MinimizeConfig { absolute_tolerance: 1e-12, ..Default::default() };
        let r = minimize(&Rosenbrock, &[1.0, 1.0], &cfg).unwrap();
        assert_eq!(r.iterations, 0);
        assert_eq!(r.reason, StopReason::AbsoluteTolerance);
    }

    #[test]
    fn masked_keeps_fixed_coordinates() {
        let cfg = MinimizeConfig { relative_tolerance: 0.0, gradient_tolerance: 1e-10, ..Default::default() };
        let m = Masked::new(&Rosenbrock, &[0.5, 2.0], vec![1]);
        let r = minimize(&m, &[2.0], &cfg).unwrap();
        assert!((r.x[0] - 0.25).abs() < 1e-8);
        assert_eq!(m.expand(&r.x)[0], 0.5);
    }

    #[test]
    fn central_difference_of_quadratic_is_exact() {
        let g = central_difference(|x| 3.0 * x[0] * x[0] - x[1], &[2.0, 7.0], 1e-3);
        assert!((g[0] - 12.0).abs() < 1e-9 && (g[1] + 1.0).abs() < 1e-9);
    }
}
