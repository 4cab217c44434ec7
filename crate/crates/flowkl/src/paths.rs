//! Closed-form machinery for isotropic Gaussian probability paths induced by
//! linear velocity fields `u(x,t) = a(t) x`: schedules, exact KL, scores,
//! sampling, and the analytic identity curves.

use std::f64::consts::PI;

use crate::autodiff::{Scalar, VelocityField};
use crate::error::{Error, Result};
use crate::rng::RngStream;

/// Tolerance for accepting times negligibly outside [0,1] from accumulated
/// floating-point drift in ODE stage times.
const TIME_SLACK: f64 = 1e-12;

fn check_time(t: f64) -> Result<f64> {
    if t >= -TIME_SLACK && t <= 1.0 + TIME_SLACK {
        Ok(t.clamp(0.0, 1.0))
    } else {
        Err(Error::Domain(format!("time {t} outside [0,1]")))
    }
}

/// Named identifier for a rate schedule.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ScheduleId {
    A1,
    A2,
    A3,
    Custom,
}

impl ScheduleId {
    pub fn as_str(&self) -> &'static str {
        match self {
            ScheduleId::A1 => "a1",
            ScheduleId::A2 => "a2",
            ScheduleId::A3 => "a3",
            ScheduleId::Custom => "custom",
        }
    }
}

/// A scalar rate function `a(t)` on [0,1] together with its antiderivative
/// (zero at t = 0). The named schedules carry closed forms; custom schedules
/// are tabulated `(t, a(t))` pairs, linearly interpolated, integrated by
/// adaptive Simpson quadrature to absolute tolerance 1e-10.
#[derive(Clone, Debug, PartialEq)]
pub enum Schedule {
    /// a1(t) = sin(pi t)
    A1,
    /// a2(t) = 0.3 sin(2 pi t) + 0.2
    A2,
    /// a3(t) = t - 1/2
    A3,
    Custom(CustomSchedule),
}

#[derive(Clone, Debug, PartialEq)]
pub struct CustomSchedule {
    /// Strictly increasing knots covering [0,1].
    knots: Vec<(f64, f64)>,
}

impl CustomSchedule {
    pub fn new(knots: Vec<(f64, f64)>) -> Result<Self> {
        if knots.len() < 2 {
            return Err(Error::Argument("custom schedule needs at least 2 knots".into()));
        }
        if (knots[0].0 - 0.0).abs() > TIME_SLACK || (knots[knots.len() - 1].0 - 1.0).abs() > TIME_SLACK
        {
            return Err(Error::Argument("custom schedule knots must cover [0,1]".into()));
        }
        for w in knots.windows(2) {
            if w[1].0 <= w[0].0 {
                return Err(Error::Argument("custom schedule knots must be strictly increasing".into()));
            }
        }
        Ok(CustomSchedule { knots })
    }

    /// Parse tabulated `t,a` lines (header lines and blanks are skipped).
    pub fn from_csv(text: &str) -> Result<Self> {
        let mut knots = Vec::new();
        for line in text.lines() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let mut parts = line.split(',').map(str::trim);
            let (a, b) = (parts.next(), parts.next());
            match (a.and_then(|v| v.parse::<f64>().ok()), b.and_then(|v| v.parse::<f64>().ok())) {
                (Some(t), Some(rate)) => knots.push((t, rate)),
                _ if knots.is_empty() => continue, // header
                _ => return Err(Error::Format(format!("bad schedule row: {line}"))),
            }
        }
        CustomSchedule::new(knots)
    }

    fn rate(&self, t: f64) -> f64 {
        let k = &self.knots;
        if t <= k[0].0 {
            return k[0].1;
        }
        if t >= k[k.len() - 1].0 {
            return k[k.len() - 1].1;
        }
        let idx = k.partition_point(|&(kt, _)| kt <= t) - 1;
        let (t0, a0) = k[idx];
        let (t1, a1) = k[idx + 1];
        a0 + (a1 - a0) * (t - t0) / (t1 - t0)
    }
}

impl Schedule {
    pub fn id(&self) -> ScheduleId {
        match self {
            Schedule::A1 => ScheduleId::A1,
            Schedule::A2 => ScheduleId::A2,
            Schedule::A3 => ScheduleId::A3,
            Schedule::Custom(_) => ScheduleId::Custom,
        }
    }

    /// Look up a named schedule by its string id.
    pub fn from_name(name: &str) -> Result<Schedule> {
        match name {
            "a1" => Ok(Schedule::A1),
            "a2" => Ok(Schedule::A2),
            "a3" => Ok(Schedule::A3),
            other => Err(Error::Argument(format!("unknown schedule id '{other}'"))),
        }
    }

    /// A custom schedule that is identically `value`.
    pub fn constant(value: f64) -> Schedule {
        Schedule::Custom(CustomSchedule::new(vec![(0.0, value), (1.0, value)]).unwrap())
    }

    #[inline]
    pub(crate) fn rate_unchecked(&self, t: f64) -> f64 {
        match self {
            Schedule::A1 => (PI * t).sin(),
            Schedule::A2 => 0.3 * (2.0 * PI * t).sin() + 0.2,
            Schedule::A3 => t - 0.5,
            Schedule::Custom(c) => c.rate(t),
        }
    }

    /// `a(t)`, with a domain check on `t`.
    pub fn rate(&self, t: f64) -> Result<f64> {
        Ok(self.rate_unchecked(check_time(t)?))
    }

    /// Antiderivative of the rate with value 0 at t = 0.
    pub fn rate_integral(&self, t: f64) -> Result<f64> {
        let t = check_time(t)?;
        Ok(match self {
            Schedule::A1 => (1.0 - (PI * t).cos()) / PI,
            Schedule::A2 => 0.2 * t + 0.3 * (1.0 - (2.0 * PI * t).cos()) / (2.0 * PI),
            Schedule::A3 => 0.5 * t * t - 0.5 * t,
            Schedule::Custom(c) => adaptive_simpson(&|s| c.rate(s), 0.0, t, 1e-10),
        })
    }

    /// `sigma_p(t) = exp(int_0^t a(s) ds)`.
    pub fn sigma(&self, t: f64) -> Result<f64> {
        Ok(self.rate_integral(t)?.exp())
    }

    /// The linear field `u(x,t) = a(t) x` this schedule induces.
    pub fn field(&self, dim: usize) -> LinearField {
        LinearField { schedule: self.clone(), offset: 0.0, dim }
    }
}

/// `a(t)` for a named schedule, with domain checking. Thin named wrapper
/// mirroring the public operation surface.
pub fn schedule_eval(s: &Schedule, t: f64) -> Result<f64> {
    s.rate(t)
}

/// `sigma_p(t)` for a schedule.
pub fn sigma_p(s: &Schedule, t: f64) -> Result<f64> {
    s.sigma(t)
}

/// State of an isotropic Gaussian path at one time.
#[derive(Clone, Copy, Debug)]
pub struct GaussianPathState {
    pub t: f64,
    pub sigma: f64,
    pub dim: usize,
}

impl GaussianPathState {
    pub fn at(s: &Schedule, t: f64, dim: usize) -> Result<Self> {
        Ok(GaussianPathState { t, sigma: s.sigma(t)?, dim })
    }
}

/// A uniform partition of [0,1].
#[derive(Clone, Debug, PartialEq)]
pub struct TimeGrid {
    points: Vec<f64>,
}

impl TimeGrid {
    pub fn uniform(count: usize) -> Result<Self> {
        if count < 2 {
            return Err(Error::Argument("time grid needs at least 2 points".into()));
        }
        let h = 1.0 / (count - 1) as f64;
        let mut points: Vec<f64> = (0..count).map(|k| k as f64 * h).collect();
        points[count - 1] = 1.0;
        Ok(TimeGrid { points })
    }

    pub fn points(&self) -> &[f64] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn spacing(&self) -> f64 {
        1.0 / (self.points.len() - 1) as f64
    }
}

/// KL(N(0, sigma_p^2 I_d) || N(0, sigma_q^2 I_d)) in closed form:
/// `d (ln(sq/sp) + sp^2/(2 sq^2) - 1/2)`.
pub fn gaussian_kl(sigma_p: f64, sigma_q: f64, dim: usize) -> Result<f64> {
    if sigma_p <= 0.0 || sigma_q <= 0.0 {
        return Err(Error::Domain(format!(
            "gaussian_kl requires positive scales, got ({sigma_p}, {sigma_q})"
        )));
    }
    let r = sigma_p / sigma_q;
    Ok(dim as f64 * ((1.0 / r).ln() + 0.5 * r * r - 0.5))
}

/// Stein score of the path at `x`: `-x / sigma^2`.
pub fn analytic_score(state: &GaussianPathState, x: &[f64]) -> Vec<f64> {
    let inv = 1.0 / (state.sigma * state.sigma);
    x.iter().map(|&v| -v * inv).collect()
}

/// Log-density of N(0, sigma^2 I) at `x`.
pub fn gaussian_logpdf(x: &[f64], sigma: f64) -> f64 {
    let d = x.len() as f64;
    let sq: f64 = x.iter().map(|&v| v * v).sum();
    -0.5 * d * (2.0 * PI).ln() - d * sigma.ln() - 0.5 * sq / (sigma * sigma)
}

/// Log-density of the standard normal at `x`.
pub fn std_normal_logpdf(x: &[f64]) -> f64 {
    gaussian_logpdf(x, 1.0)
}

/// Draw `n` samples from `p_t = N(0, sigma_p(t)^2 I_dim)` as `sigma * z`.
/// Deterministic in `(seed, t, n)`; identical seeds give identical samples.
pub fn sample_pt(s: &Schedule, t: f64, n: usize, dim: usize, seed: u64) -> Result<Vec<f64>> {
    if n < 1 {
        return Err(Error::Argument("sample_pt requires n >= 1".into()));
    }
    let sigma = s.sigma(t)?;
    let stream = RngStream::new(seed, "sample-pt");
    let mut out = vec![0.0; n * dim];
    stream.fill_normal(0, &mut out);
    for v in &mut out {
        *v *= sigma;
    }
    Ok(out)
}

/// The linear velocity field `v(x,t) = (a(t) + offset) x`. With zero offset
/// this is the schedule's own field; a constant offset `beta` produces the
/// controlled perturbation whose induced path has scale
/// `sigma_q(t) = sigma_p(t) e^(beta t)`.
#[derive(Clone, Debug)]
pub struct LinearField {
    pub schedule: Schedule,
    pub offset: f64,
    pub dim: usize,
}

impl LinearField {
    pub fn rate(&self, t: f64) -> f64 {
        self.schedule.rate_unchecked(t) + self.offset
    }

    /// Scale of the Gaussian path this field transports N(0, I) into.
    pub fn sigma(&self, t: f64) -> Result<f64> {
        Ok(self.schedule.sigma(t)? * (self.offset * t).exp())
    }
}

impl VelocityField for LinearField {
    fn dim(&self) -> usize {
        self.dim
    }

    fn eval_batch<S: Scalar>(&self, xs: &[S], t: f64, out: &mut [S]) {
        let a = self.rate(t);
        for (o, &x) in out.iter_mut().zip(xs) {
            *o = x.mul_real(a);
        }
    }
}

/// Constant-offset perturbation of a schedule's field.
pub fn perturbed_field(s: &Schedule, beta: f64, dim: usize) -> LinearField {
    LinearField { schedule: s.clone(), offset: beta, dim }
}

/// One point of the closed-form identity curves.
#[derive(Clone, Copy, Debug)]
pub struct IdentityPoint {
    pub t: f64,
    /// KL(p_t || q_t) in closed form.
    pub kl: f64,
    /// Integrand g(t) = (a_p - a_q)(1/sq^2 - 1/sp^2) d sp^2.
    pub integrand: f64,
}

/// Analytic realization of both sides of the KL evolution identity for a pair
/// of linear fields: the exact KL curve and the exact integrand whose
/// cumulative integral must reproduce it.
pub fn closed_form_identity_curves(
    p: &LinearField,
    q: &LinearField,
    grid: &TimeGrid,
) -> Result<Vec<IdentityPoint>> {
    if p.dim != q.dim {
        return Err(Error::Argument("dimension mismatch between fields".into()));
    }
    let d = p.dim as f64;
    grid.points()
        .iter()
        .map(|&t| {
            let sp = p.sigma(t)?;
            let sq = q.sigma(t)?;
            let kl = gaussian_kl(sp, sq, p.dim)?;
            let integrand =
                (p.rate(t) - q.rate(t)) * (1.0 / (sq * sq) - 1.0 / (sp * sp)) * d * sp * sp;
            Ok(IdentityPoint { t, kl, integrand })
        })
        .collect()
}

/// Adaptive Simpson quadrature with absolute tolerance `tol`.
pub fn adaptive_simpson(f: &dyn Fn(f64) -> f64, a: f64, b: f64, tol: f64) -> f64 {
    fn simpson(fa: f64, fm: f64, fb: f64, h: f64) -> f64 {
        h / 6.0 * (fa + 4.0 * fm + fb)
    }
    #[allow(clippy::too_many_arguments)]
    fn recurse(
        f: &dyn Fn(f64) -> f64,
        a: f64,
        b: f64,
        fa: f64,
        fm: f64,
        fb: f64,
        whole: f64,
        tol: f64,
        depth: u32,
    ) -> f64 {
        let m = 0.5 * (a + b);
        let lm = 0.5 * (a + m);
        let rm = 0.5 * (m + b);
        let flm = f(lm);
        let frm = f(rm);
        let left = simpson(fa, flm, fm, m - a);
        let right = simpson(fm, frm, fb, b - m);
        let delta = left + right - whole;
        if depth == 0 || delta.abs() <= 15.0 * tol {
            left + right + delta / 15.0
        } else {
            recurse(f, a, m, fa, flm, fm, left, 0.5 * tol, depth - 1)
                + recurse(f, m, b, fm, frm, fb, right, 0.5 * tol, depth - 1)
        }
    }
    if a == b {
        return 0.0;
    }
    let fa = f(a);
    let m = 0.5 * (a + b);
    let fm = f(m);
    let fb = f(b);
    recurse(f, a, b, fa, fm, fb, simpson(fa, fm, fb, b - a), tol, 48)
}

#[cfg(test)]
mod tests {
    use super::*;

    const SCHEDULES: [Schedule; 3] = [Schedule::A1, Schedule::A2, Schedule::A3];

    #[test]
    fn named_schedule_values() {
        assert!(schedule_eval(&Schedule::A3, 0.5).unwrap().abs() < 1e-15);
        assert!((schedule_eval(&Schedule::A1, 0.5).unwrap() - 1.0).abs() < 1e-15);
        assert!((schedule_eval(&Schedule::A2, 0.0).unwrap() - 0.2).abs() < 1e-15);
    }

    #[test]
    fn time_domain_is_enforced() {
        assert!(schedule_eval(&Schedule::A1, -0.1).is_err());
        assert!(schedule_eval(&Schedule::A1, 1.1).is_err());
        assert!(sigma_p(&Schedule::A1, 2.0).is_err());
    }

    #[test]
    fn sigma_boundary_values() {
        for s in &SCHEDULES {
            assert!((s.sigma(0.0).unwrap() - 1.0).abs() < 1e-15);
        }
        assert!((Schedule::A3.sigma(1.0).unwrap() - 1.0).abs() < 1e-12);
        let expect = (2.0 / PI).exp();
        assert!((Schedule::A1.sigma(1.0).unwrap() - expect).abs() < 1e-12);
    }

    #[test]
    fn closed_form_antiderivative_matches_quadrature() {
        let grid = TimeGrid::uniform(41).unwrap();
        for s in &SCHEDULES {
            for &t in grid.points() {
                let closed = s.rate_integral(t).unwrap();
                let quad = adaptive_simpson(&|u| s.rate_unchecked(u), 0.0, t, 1e-12);
                assert!((closed - quad).abs() < 1e-10, "{s:?} t={t}");
            }
        }
    }

    #[test]
    fn log_sigma_derivative_is_the_rate() {
        let grid = TimeGrid::uniform(201).unwrap();
        let h = 1e-5;
        for s in &SCHEDULES {
            for &t in &grid.points()[1..grid.len() - 1] {
                let fd =
                    (s.sigma(t + h).unwrap().ln() - s.sigma(t - h).unwrap().ln()) / (2.0 * h);
                assert!((fd - s.rate(t).unwrap()).abs() < 1e-6, "{s:?} t={t}");
            }
        }
    }

    #[test]
    fn gaussian_kl_examples() {
        assert_eq!(gaussian_kl(1.3, 1.3, 5).unwrap(), 0.0);
        let sp = (2.0 / PI).exp();
        let terminal = gaussian_kl(sp, 1.0, 2).unwrap();
        assert!((terminal - 1.29908).abs() < 1e-3, "terminal={terminal}");
        let kl = gaussian_kl(1.0, 0.2f64.exp(), 2).unwrap();
        let expect = 2.0 * (0.2 + 0.5 * (-0.4f64).exp() - 0.5);
        assert!((kl - expect).abs() < 1e-12);
        assert!((kl - 0.07032).abs() < 1e-4);
        assert!(gaussian_kl(0.0, 1.0, 2).is_err());
        assert!(gaussian_kl(1.0, -1.0, 2).is_err());
    }

    #[test]
    fn analytic_score_examples() {
        let state = GaussianPathState { t: 0.0, sigma: 1.0, dim: 2 };
        assert_eq!(analytic_score(&state, &[0.0, 0.0]), vec![0.0, 0.0]);
        let state = GaussianPathState { t: 0.0, sigma: 2.0, dim: 2 };
        assert_eq!(analytic_score(&state, &[4.0, 0.0]), vec![-1.0, 0.0]);
        let sigma = (2.0 / PI).exp();
        let state = GaussianPathState { t: 1.0, sigma, dim: 2 };
        let s = analytic_score(&state, &[1.0, 1.0]);
        let expect = -1.0 / (sigma * sigma);
        assert!((s[0] - expect).abs() < 1e-12 && (s[1] - expect).abs() < 1e-12);
        assert!((s[0] + 0.27992).abs() < 1e-4);
    }

    #[test]
    fn analytic_score_is_gradient_of_logpdf() {
        let sigma = 1.7;
        let state = GaussianPathState { t: 0.3, sigma, dim: 2 };
        let x = [0.8, -1.4];
        let score = analytic_score(&state, &x);
        for j in 0..2 {
            let h = 1e-5 * (1.0 + x[j].abs());
            let mut xp = x;
            let mut xm = x;
            xp[j] += h;
            xm[j] -= h;
            let fd = (gaussian_logpdf(&xp, sigma) - gaussian_logpdf(&xm, sigma)) / (2.0 * h);
            assert!((fd - score[j]).abs() < 1e-7);
        }
    }

    #[test]
    fn sampling_is_deterministic_and_has_the_right_variance() {
        let a = sample_pt(&Schedule::A1, 1.0, 100, 2, 9).unwrap();
        let b = sample_pt(&Schedule::A1, 1.0, 100, 2, 9).unwrap();
        assert_eq!(a, b);

        let n = 100_000;
        for (s, t, var_expect) in [
            (Schedule::A3, 0.0, 1.0),
            (Schedule::A1, 1.0, (4.0 / PI).exp()),
        ] {
            let xs = sample_pt(&s, t, n, 2, 123).unwrap();
            for c in 0..2 {
                let vals: Vec<f64> = xs.iter().skip(c).step_by(2).copied().collect();
                let mean: f64 = vals.iter().sum::<f64>() / n as f64;
                let var: f64 =
                    vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64;
                // stderr of the variance estimator of a normal: var * sqrt(2/(n-1))
                let se = var_expect * (2.0 / (n as f64 - 1.0)).sqrt();
                assert!((var - var_expect).abs() < 5.0 * se, "var={var} expect={var_expect}");
            }
        }
    }

    #[test]
    fn perturbed_field_reduces_to_schedule_at_zero_beta() {
        let base = Schedule::A2.field(2);
        let pert = perturbed_field(&Schedule::A2, 0.0, 2);
        for &(x, t) in &[([0.5, -1.0], 0.3), ([2.0, 0.1], 0.9)] {
            let a = base.eval(&x, t);
            let b = pert.eval(&x, t);
            assert_eq!(a, b);
        }
    }

    #[test]
    fn perturbed_field_closed_forms() {
        let pert = perturbed_field(&Schedule::A3, 0.1, 2);
        // sigma_q(1) = sigma_p(1) e^0.1 with sigma_p(1) = 1 for a3
        assert!((pert.sigma(1.0).unwrap() - 0.1f64.exp()).abs() < 1e-12);
        // E||beta x||^2 = beta^2 d sigma_p^2 = 0.02 at t=1, d=2
        let sp = Schedule::A3.sigma(1.0).unwrap();
        let eps_sq = 0.1f64.powi(2) * 2.0 * sp * sp;
        assert!((eps_sq - 0.02).abs() < 1e-12);
        // score gap at t=1: d sigma_p^2 (1/sp^2 - 1/sq^2)^2
        let sq = pert.sigma(1.0).unwrap();
        let gap = 2.0 * sp * sp * (1.0 / (sp * sp) - 1.0 / (sq * sq)).powi(2);
        assert!((gap - 0.06572).abs() < 1e-4, "gap={gap}");
    }

    #[test]
    fn closed_form_identity_holds_on_the_grid() {
        let grid = TimeGrid::uniform(201).unwrap();
        let p = Schedule::A1.field(2);
        let q = Schedule::A3.field(2);
        let pts = closed_form_identity_curves(&p, &q, &grid).unwrap();
        assert_eq!(pts[0].kl, 0.0);
        assert_eq!(pts[0].integrand, 0.0);
        assert!((pts[pts.len() - 1].kl - 1.29908).abs() < 1e-3);

        // Trapezoid of the integrand tracks the KL curve at every grid point.
        let h = grid.spacing();
        let mut cum = 0.0;
        for w in pts.windows(2) {
            cum += 0.5 * h * (w[0].integrand + w[1].integrand);
            assert!((cum - w[1].kl).abs() < 1e-4, "t={} cum={} kl={}", w[1].t, cum, w[1].kl);
        }
    }

    #[test]
    fn custom_schedule_interpolates_and_integrates() {
        // Tabulated a(t) = t matches a3 + 1/2.
        let c = CustomSchedule::from_csv("t,a\n0,0\n0.5,0.5\n1,1\n").unwrap();
        let s = Schedule::Custom(c);
        assert!((s.rate(0.25).unwrap() - 0.25).abs() < 1e-12);
        assert!((s.rate_integral(1.0).unwrap() - 0.5).abs() < 1e-10);
        assert!((s.sigma(1.0).unwrap() - 0.5f64.exp()).abs() < 1e-9);
    }

    #[test]
    fn custom_schedule_rejects_bad_tables() {
        assert!(CustomSchedule::from_csv("0,0\n").is_err());
        assert!(CustomSchedule::from_csv("0,0\n0.5,1\n0.5,2\n1,0\n").is_err());
        assert!(CustomSchedule::from_csv("0.2,0\n1,0\n").is_err());
        assert!(CustomSchedule::from_csv("0,0\nnot,numbers\n1,0\n").is_err());
    }

    #[test]
    fn time_grid_invariants() {
        let g = TimeGrid::uniform(201).unwrap();
        assert_eq!(g.points()[0], 0.0);
        assert_eq!(g.points()[200], 1.0);
        let h = g.spacing();
        for w in g.points().windows(2) {
            assert!((w[1] - w[0] - h).abs() < 1e-12);
        }
        assert!(TimeGrid::uniform(1).is_err());
    }
}
