//! Deterministic ODE integration and quadrature: classical fixed-step RK4
//! trajectory solves, backward log-density with divergence accumulation, the
//! augmented score sensitivity system, the score-transport characteristic
//! solver, and trapezoidal time integrals.
//!
//! All augmented quantities share the same RK4 stages as the trajectory (one
//! combined state vector), so every accumulated integral sees exactly the
//! same discretization.

use crate::autodiff::{batch_derivs, BatchDerivs, DerivScratch, VelocityField};
use crate::error::{Error, Result};
use crate::paths::{std_normal_logpdf, TimeGrid};

/// Fixed-step RK4 configuration. `steps` is the step count for a unit-length
/// interval; solves over shorter intervals scale the count proportionally so
/// the step size stays near `1/steps`.
#[derive(Clone, Copy, Debug)]
pub struct IvpConfig {
    pub steps: usize,
}

impl Default for IvpConfig {
    fn default() -> Self {
        IvpConfig { steps: 200 }
    }
}

impl IvpConfig {
    pub fn new(steps: usize) -> Result<Self> {
        if steps == 0 {
            return Err(Error::Argument("IvpConfig requires steps >= 1".into()));
        }
        Ok(IvpConfig { steps })
    }

    fn steps_for(&self, interval: f64) -> usize {
        ((self.steps as f64 * interval.abs()).ceil() as usize).max(1)
    }
}

/// Result of a backward log-density solve.
#[derive(Clone, Debug)]
pub struct LogDensityResult {
    /// `log q_t(x) = log p0(x0) + ell`.
    pub log_q: f64,
    /// Trajectory endpoint at time 0.
    pub x0: Vec<f64>,
    /// Accumulated divergence integral.
    pub ell: f64,
}

/// Result of an augmented backward score solve.
#[derive(Clone, Debug)]
pub struct ScoreResult {
    pub log_q: f64,
    /// `grad_x log q_t` at the queried terminal point.
    pub score: Vec<f64>,
    pub x0: Vec<f64>,
    /// Trajectory sensitivity `J(0) = dx0/dx`, row-major d x d.
    pub j0: Vec<f64>,
}

/// Generic fixed-step RK4 over a flat state vector. `deriv(state, s, out)`
/// writes the derivative; `steps` uniform steps from `t_from` to `t_to`.
fn rk4_flat(
    state: &mut [f64],
    t_from: f64,
    t_to: f64,
    steps: usize,
    mut deriv: impl FnMut(&[f64], f64, &mut [f64]),
    finite_probe: usize,
) -> Result<()> {
    let h = (t_to - t_from) / steps as f64;
    let n = state.len();
    let mut k1 = vec![0.0; n];
    let mut k2 = vec![0.0; n];
    let mut k3 = vec![0.0; n];
    let mut k4 = vec![0.0; n];
    let mut tmp = vec![0.0; n];
    for step in 0..steps {
        let s = t_from + h * step as f64;
        deriv(state, s, &mut k1);
        for i in 0..n {
            tmp[i] = state[i] + 0.5 * h * k1[i];
        }
        deriv(&tmp, s + 0.5 * h, &mut k2);
        for i in 0..n {
            tmp[i] = state[i] + 0.5 * h * k2[i];
        }
        deriv(&tmp, s + 0.5 * h, &mut k3);
        for i in 0..n {
            tmp[i] = state[i] + h * k3[i];
        }
        deriv(&tmp, s + h, &mut k4);
        for i in 0..n {
            state[i] += h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
        }
        for &v in state.iter().take(finite_probe) {
            if !v.is_finite() {
                return Err(Error::Numeric {
                    step,
                    msg: "non-finite state during RK4 integration".into(),
                });
            }
        }
    }
    Ok(())
}

/// Integrate `dx/ds = f(x, s)` from `t_from` to `t_to` with exactly
/// `cfg.steps` uniform RK4 steps (sign handled by the step direction).
pub fn rk4_solve<F: VelocityField>(
    f: &F,
    x: &[f64],
    t_from: f64,
    t_to: f64,
    cfg: &IvpConfig,
) -> Result<Vec<f64>> {
    let d = f.dim();
    let mut state = x.to_vec();
    if t_from == t_to {
        return Ok(state);
    }
    let mut out = vec![0.0; d];
    rk4_flat(
        &mut state,
        t_from,
        t_to,
        cfg.steps,
        |s, time, ds| {
            f.eval_batch(s, time, &mut out);
            ds.copy_from_slice(&out);
        },
        d,
    )?;
    Ok(state)
}

/// Backward log-density solves for a batch of terminal points sharing one
/// time. State per sample: trajectory x and the divergence accumulator; the
/// accumulator integrates `div f` backward so that at s = 0 it equals
/// `ell = -int_0^t div f(x_s, s) ds` and `log q_t(x) = log p0(x0) + ell`.
pub fn backward_logdensity_batch<F: VelocityField>(
    f: &F,
    xs: &[f64],
    t: f64,
    cfg: &IvpConfig,
) -> Result<Vec<LogDensityResult>> {
    let d = f.dim();
    let n = xs.len() / d;
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::Domain(format!("time {t} outside [0,1]")));
    }
    if t == 0.0 {
        // Zero-length integration: q_0 = p_0 directly.
        return Ok((0..n)
            .map(|i| {
                let x0 = xs[i * d..(i + 1) * d].to_vec();
                LogDensityResult { log_q: std_normal_logpdf(&x0), x0, ell: 0.0 }
            })
            .collect());
    }

    // Flat layout: [x (n*d) | e (n)]
    let mut state = vec![0.0; n * d + n];
    state[..n * d].copy_from_slice(xs);
    let mut derivs = BatchDerivs::new(d, n, false);
    let mut scratch = DerivScratch::new();

    rk4_flat(
        &mut state,
        t,
        0.0,
        cfg.steps_for(t),
        |s, time, ds| {
            batch_derivs(f, &s[..n * d], time, false, &mut scratch, &mut derivs);
            ds[..n * d].copy_from_slice(&derivs.value);
            ds[n * d..].copy_from_slice(&derivs.div);
        },
        n * d,
    )?;

    Ok((0..n)
        .map(|i| {
            let x0 = state[i * d..(i + 1) * d].to_vec();
            let ell = state[n * d + i];
            LogDensityResult { log_q: std_normal_logpdf(&x0) + ell, x0, ell }
        })
        .collect())
}

/// Single-point backward log-density solve.
pub fn backward_logdensity<F: VelocityField>(
    f: &F,
    x: &[f64],
    t: f64,
    cfg: &IvpConfig,
) -> Result<LogDensityResult> {
    Ok(backward_logdensity_batch(f, x, t, cfg)?.pop().unwrap())
}

/// Augmented backward solves producing the score of `log q_t` with respect to
/// the terminal point, for a batch of points sharing one time.
///
/// The combined state per sample is `(x, J, e, g)` with
/// `dJ/ds = grad f(x_s, s) J` (J(t) = I) and `dg/ds = J^T grad(div f)`;
/// integrating from t down to 0 yields
/// `score = J(0)^T (-x0) - int_0^t J^T grad(div f) ds = J(0)^T (-x0) + g(0)`.
pub fn backward_score_batch<F: VelocityField>(
    f: &F,
    xs: &[f64],
    t: f64,
    cfg: &IvpConfig,
) -> Result<Vec<ScoreResult>> {
    let d = f.dim();
    let n = xs.len() / d;
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::Domain(format!("time {t} outside [0,1]")));
    }
    if t == 0.0 {
        return Ok((0..n)
            .map(|i| {
                let x0 = xs[i * d..(i + 1) * d].to_vec();
                let mut j0 = vec![0.0; d * d];
                for k in 0..d {
                    j0[k * d + k] = 1.0;
                }
                ScoreResult {
                    log_q: std_normal_logpdf(&x0),
                    score: x0.iter().map(|&v| -v).collect(),
                    x0,
                    j0,
                }
            })
            .collect());
    }

    // Flat layout: [x (n*d) | J (n*d*d) | e (n) | g (n*d)]
    let xn = n * d;
    let jn = n * d * d;
    let mut state = vec![0.0; xn + jn + n + xn];
    state[..xn].copy_from_slice(xs);
    for i in 0..n {
        for k in 0..d {
            state[xn + i * d * d + k * d + k] = 1.0;
        }
    }
    let mut derivs = BatchDerivs::new(d, n, true);
    let mut scratch = DerivScratch::new();

    rk4_flat(
        &mut state,
        t,
        0.0,
        cfg.steps_for(t),
        |s, time, ds| {
            batch_derivs(f, &s[..xn], time, true, &mut scratch, &mut derivs);
            ds[..xn].copy_from_slice(&derivs.value);
            for i in 0..n {
                let jac = &derivs.jac[i * d * d..(i + 1) * d * d];
                let j = &s[xn + i * d * d..xn + (i + 1) * d * d];
                let dj = &mut ds[xn + i * d * d..xn + (i + 1) * d * d];
                for r in 0..d {
                    for c in 0..d {
                        let mut acc = 0.0;
                        for m in 0..d {
                            acc += jac[r * d + m] * j[m * d + c];
                        }
                        dj[r * d + c] = acc;
                    }
                }
            }
            ds[xn + jn..xn + jn + n].copy_from_slice(&derivs.div);
            for i in 0..n {
                let j = &s[xn + i * d * d..xn + (i + 1) * d * d];
                let gd = &derivs.grad_div[i * d..(i + 1) * d];
                let dg = &mut ds[xn + jn + n + i * d..xn + jn + n + (i + 1) * d];
                for c in 0..d {
                    let mut acc = 0.0;
                    for r in 0..d {
                        acc += j[r * d + c] * gd[r];
                    }
                    dg[c] = acc;
                }
            }
        },
        xn,
    )?;

    Ok((0..n)
        .map(|i| {
            let x0 = state[i * d..(i + 1) * d].to_vec();
            let j0 = state[xn + i * d * d..xn + (i + 1) * d * d].to_vec();
            let ell = state[xn + jn + i];
            let g = &state[xn + jn + n + i * d..xn + jn + n + (i + 1) * d];
            let mut score = vec![0.0; d];
            for c in 0..d {
                let mut acc = 0.0;
                for r in 0..d {
                    acc += j0[r * d + c] * (-x0[r]);
                }
                score[c] = acc + g[c];
            }
            ScoreResult { log_q: std_normal_logpdf(&x0) + ell, score, x0, j0 }
        })
        .collect())
}

/// Single-point augmented backward score solve.
pub fn backward_score<F: VelocityField>(
    f: &F,
    x: &[f64],
    t: f64,
    cfg: &IvpConfig,
) -> Result<ScoreResult> {
    Ok(backward_score_batch(f, x, t, cfg)?.pop().unwrap())
}

/// Independent score method via the score PDE along characteristics:
/// solve backward for x0, then integrate
/// `Ds/Dt = -(grad v)^T s - grad(div v)` forward from `s(0) = -x0`.
pub fn score_transport_oracle<F: VelocityField>(
    f: &F,
    x: &[f64],
    t: f64,
    cfg: &IvpConfig,
) -> Result<Vec<f64>> {
    let d = f.dim();
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::Domain(format!("time {t} outside [0,1]")));
    }
    if t == 0.0 {
        return Ok(x.iter().map(|&v| -v).collect());
    }
    let x0 = rk4_solve(f, x, t, 0.0, &IvpConfig { steps: cfg.steps_for(t) })?;

    // Flat layout: [x (d) | s (d)]
    let mut state = vec![0.0; 2 * d];
    state[..d].copy_from_slice(&x0);
    for c in 0..d {
        state[d + c] = -x0[c];
    }
    let mut derivs = BatchDerivs::new(d, 1, true);
    let mut scratch = DerivScratch::new();

    rk4_flat(
        &mut state,
        0.0,
        t,
        cfg.steps_for(t),
        |s, time, ds| {
            batch_derivs(f, &s[..d], time, true, &mut scratch, &mut derivs);
            ds[..d].copy_from_slice(&derivs.value);
            for c in 0..d {
                let mut acc = 0.0;
                for r in 0..d {
                    acc += derivs.jac[r * d + c] * s[d + r];
                }
                ds[d + c] = -acc - derivs.grad_div[c];
            }
        },
        2 * d,
    )?;
    Ok(state[d..].to_vec())
}

/// Trapezoidal quadrature over the grid.
pub fn trapezoid(values: &[f64], grid: &TimeGrid) -> Result<f64> {
    if values.len() != grid.len() {
        return Err(Error::Argument(format!(
            "trapezoid: {} values for a {}-point grid",
            values.len(),
            grid.len()
        )));
    }
    let pts = grid.points();
    let mut acc = 0.0;
    for i in 1..values.len() {
        acc += 0.5 * (pts[i] - pts[i - 1]) * (values[i] + values[i - 1]);
    }
    Ok(acc)
}

/// Running trapezoidal integral: entry k is the integral up to grid point k.
pub fn cumulative_trapezoid(values: &[f64], grid: &TimeGrid) -> Result<Vec<f64>> {
    if values.len() != grid.len() {
        return Err(Error::Argument(format!(
            "cumulative_trapezoid: {} values for a {}-point grid",
            values.len(),
            grid.len()
        )));
    }
    let pts = grid.points();
    let mut out = vec![0.0; values.len()];
    for i in 1..values.len() {
        out[i] = out[i - 1] + 0.5 * (pts[i] - pts[i - 1]) * (values[i] + values[i - 1]);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Scalar;
    use crate::paths::{gaussian_logpdf, Schedule};
    use std::f64::consts::PI;

    struct ZeroField;
    impl VelocityField for ZeroField {
        fn dim(&self) -> usize {
            2
        }
        fn eval_batch<S: Scalar>(&self, xs: &[S], _t: f64, out: &mut [S]) {
            for (o, _) in out.iter_mut().zip(xs) {
                *o = S::from_real(0.0);
            }
        }
    }

    /// Smooth nonlinear C^2 field used as a stand-in for a trained network.
    struct WavyField;
    impl VelocityField for WavyField {
        fn dim(&self) -> usize {
            2
        }
        fn eval_batch<S: Scalar>(&self, xs: &[S], t: f64, out: &mut [S]) {
            for s in 0..xs.len() / 2 {
                let (x1, x2) = (xs[2 * s], xs[2 * s + 1]);
                out[2 * s] = (x1.mul_real(0.4)).tanh().mul_real(0.5 + 0.3 * t)
                    + (x2.mul_real(0.7)).sin().mul_real(0.2);
                out[2 * s + 1] = (x1 * x2).mul_real(0.1).cos().mul_real(0.3)
                    + x2.mul_real(-0.2 * t);
            }
        }
    }

    #[test]
    fn zero_field_endpoint_is_exact() {
        let x = [0.4, -0.9];
        let cfg = IvpConfig::default();
        let y = rk4_solve(&ZeroField, &x, 0.0, 1.0, &cfg).unwrap();
        assert_eq!(y, x.to_vec());
    }

    #[test]
    fn linear_a3_endpoint_matches_closed_form() {
        let f = Schedule::A3.field(2);
        let cfg = IvpConfig::default();
        let y = rk4_solve(&f, &[1.0, 0.0], 0.0, 1.0, &cfg).unwrap();
        // sigma_p(1) = 1 for a3.
        assert!((y[0] - 1.0).abs() < 1e-8);
        assert!(y[1].abs() < 1e-12);
    }

    #[test]
    fn roundtrip_is_the_identity() {
        let f = Schedule::A1.field(2);
        let cfg = IvpConfig::default();
        let x = [0.7, -1.3];
        let fwd = rk4_solve(&f, &x, 1.0, 0.0, &cfg).unwrap();
        let back = rk4_solve(&f, &fwd, 0.0, 1.0, &cfg).unwrap();
        assert!((back[0] - x[0]).abs() < 1e-8);
        assert!((back[1] - x[1]).abs() < 1e-8);
    }

    #[test]
    fn rk4_order_exponent_is_four() {
        let f = Schedule::A1.field(2);
        let exact = Schedule::A1.sigma(1.0).unwrap();
        let err = |steps: usize| {
            let y = rk4_solve(&f, &[1.0, 0.0], 0.0, 1.0, &IvpConfig { steps }).unwrap();
            (y[0] - exact).abs()
        };
        let e1 = err(25);
        let e2 = err(50);
        let p = (e1 / e2).log2();
        assert!((3.5..=4.5).contains(&p), "order exponent {p}");
    }

    #[test]
    fn backward_logdensity_matches_gaussian_closed_form() {
        let f = Schedule::A1.field(2);
        let cfg = IvpConfig::default();
        let sigma = Schedule::A1.sigma(1.0).unwrap();
        for x in [[0.3, -0.8], [2.0, 1.0], [0.0, 0.0]] {
            let r = backward_logdensity(&f, &x, 1.0, &cfg).unwrap();
            let expect = gaussian_logpdf(&x, sigma);
            assert!((r.log_q - expect).abs() < 1e-4, "{} vs {}", r.log_q, expect);
        }
    }

    #[test]
    fn backward_logdensity_zero_field_is_p0() {
        let cfg = IvpConfig::default();
        let x = [1.1, -0.2];
        for t in [0.0, 0.4, 1.0] {
            let r = backward_logdensity(&ZeroField, &x, t, &cfg).unwrap();
            assert!((r.log_q - std_normal_logpdf(&x)).abs() < 1e-12);
            assert!(r.ell.abs() < 1e-12);
        }
    }

    #[test]
    fn backward_score_zero_field() {
        let cfg = IvpConfig::default();
        let x = [0.9, -1.7];
        let r = backward_score(&ZeroField, &x, 0.7, &cfg).unwrap();
        assert!((r.score[0] + x[0]).abs() < 1e-12);
        assert!((r.score[1] + x[1]).abs() < 1e-12);
    }

    #[test]
    fn backward_score_linear_field_closed_form() {
        let cfg = IvpConfig::default();
        for s in [Schedule::A1, Schedule::A2, Schedule::A3] {
            let f = s.field(2);
            let t = 0.8;
            let sigma = s.sigma(t).unwrap();
            let x = [1.2, -0.4];
            let r = backward_score(&f, &x, t, &cfg).unwrap();
            for c in 0..2 {
                let expect = -x[c] / (sigma * sigma);
                assert!((r.score[c] - expect).abs() < 1e-4, "{s:?}");
            }
        }
    }

    #[test]
    fn backward_score_matches_fd_of_logdensity() {
        let cfg = IvpConfig { steps: 100 };
        let t = 0.9;
        let x = [0.6, -0.3];
        let r = backward_score(&WavyField, &x, t, &cfg).unwrap();
        for c in 0..2 {
            let h = 1e-5;
            let mut xp = x;
            let mut xm = x;
            xp[c] += h;
            xm[c] -= h;
            let lp = backward_logdensity(&WavyField, &xp, t, &cfg).unwrap().log_q;
            let lm = backward_logdensity(&WavyField, &xm, t, &cfg).unwrap().log_q;
            let fd = (lp - lm) / (2.0 * h);
            assert!((r.score[c] - fd).abs() < 1e-4, "score {} fd {}", r.score[c], fd);
        }
    }

    #[test]
    fn sensitivity_matches_fd_of_endpoint() {
        let cfg = IvpConfig { steps: 100 };
        let t = 0.8;
        let x = [0.5, 0.2];
        let r = backward_score(&WavyField, &x, t, &cfg).unwrap();
        for c in 0..2 {
            let h = 1e-6;
            let mut xp = x;
            let mut xm = x;
            xp[c] += h;
            xm[c] -= h;
            let p0 = backward_logdensity(&WavyField, &xp, t, &cfg).unwrap().x0;
            let m0 = backward_logdensity(&WavyField, &xm, t, &cfg).unwrap().x0;
            for rr in 0..2 {
                let fd = (p0[rr] - m0[rr]) / (2.0 * h);
                assert!((r.j0[rr * 2 + c] - fd).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn score_transport_matches_backward_score_on_nonlinear_field() {
        let cfg = IvpConfig { steps: 100 };
        for (i, x) in [[0.4, -0.6], [1.5, 0.9], [-0.2, 0.1]].iter().enumerate() {
            let t = 0.3 + 0.3 * i as f64;
            let a = backward_score(&WavyField, x, t, &cfg).unwrap();
            let b = score_transport_oracle(&WavyField, x, t, &cfg).unwrap();
            for c in 0..2 {
                assert!((a.score[c] - b[c]).abs() < 1e-6, "{} vs {}", a.score[c], b[c]);
            }
        }
    }

    #[test]
    fn score_transport_linear_field_closed_form() {
        let cfg = IvpConfig::default();
        let f = Schedule::A2.field(2);
        let t = 1.0;
        let sigma = Schedule::A2.sigma(t).unwrap();
        let x = [0.8, -1.1];
        let s = score_transport_oracle(&f, &x, t, &cfg).unwrap();
        for c in 0..2 {
            assert!((s[c] + x[c] / (sigma * sigma)).abs() < 1e-4);
        }
    }

    #[test]
    fn trapezoid_examples() {
        let grid = TimeGrid::uniform(201).unwrap();
        let ones = vec![1.0; 201];
        assert!((trapezoid(&ones, &grid).unwrap() - 1.0).abs() < 1e-14);
        let linear: Vec<f64> = grid.points().to_vec();
        assert!((trapezoid(&linear, &grid).unwrap() - 0.5).abs() < 1e-14);
        let sins: Vec<f64> = grid.points().iter().map(|&t| (PI * t).sin()).collect();
        assert!((trapezoid(&sins, &grid).unwrap() - 2.0 / PI).abs() < 1e-4);
        assert!(trapezoid(&[1.0; 5], &grid).is_err());
    }

    #[test]
    fn cumulative_trapezoid_agrees_with_total() {
        let grid = TimeGrid::uniform(101).unwrap();
        let vals: Vec<f64> = grid.points().iter().map(|&t| t * t).collect();
        let cum = cumulative_trapezoid(&vals, &grid).unwrap();
        assert_eq!(cum[0], 0.0);
        let total = trapezoid(&vals, &grid).unwrap();
        assert!((cum[100] - total).abs() < 1e-14);
    }

    #[test]
    fn terminal_density_normalizes() {
        // exp(log q) for the a2 field at t=1 integrates to 1.
        let f = Schedule::A2.field(2);
        let cfg = IvpConfig { steps: 60 };
        let sigma = Schedule::A2.sigma(1.0).unwrap();
        let half = 8.0 * sigma;
        let m = 81usize;
        let h = 2.0 * half / (m - 1) as f64;
        let mut total = 0.0;
        let mut row = vec![0.0; 2 * m];
        for i in 0..m {
            let x1 = -half + i as f64 * h;
            for j in 0..m {
                row[2 * j] = x1;
                row[2 * j + 1] = -half + j as f64 * h;
            }
            let res = backward_logdensity_batch(&f, &row, 1.0, &cfg).unwrap();
            let wi = if i == 0 || i == m - 1 { 0.5 } else { 1.0 };
            for (j, r) in res.iter().enumerate() {
                let wj = if j == 0 || j == m - 1 { 0.5 } else { 1.0 };
                total += wi * wj * r.log_q.exp();
            }
        }
        total *= h * h;
        assert!((total - 1.0).abs() < 1e-3, "mass {total}");
    }
}
