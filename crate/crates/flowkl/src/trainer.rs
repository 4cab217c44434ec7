//! Flow-matching training loops: direct regression against a known schedule
//! field and the affine conditional flow-matching objective, both optimized
//! with a from-scratch Adam and a warmup + cosine-decay learning rate.
//! Emits a checkpoint the first time each validation-MSE ladder rung is
//! crossed.

use crate::autodiff::VelocityField;
use crate::error::{Error, Result};
use crate::mlp::{Checkpoint, MlpVelocity};
use crate::output::{csv_table, write_atomic};
use crate::paths::{Schedule, TimeGrid};
use crate::rng::{mean_stderr, RngStream};
use serde::Serialize;
use std::f64::consts::PI;
use std::path::Path;

#[derive(Clone, Debug, Serialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub max_steps: usize,
    pub lr_peak: f64,
    pub warmup_steps: usize,
    /// Final learning rate as a fraction of the peak.
    pub lr_final_frac: f64,
    pub seed: u64,
    /// Validation probe: `val_grid` times, `val_n` samples per time.
    pub val_grid: usize,
    pub val_n: usize,
    pub val_every: usize,
    /// Descending validation-MSE thresholds; one checkpoint per rung.
    pub ladder: Vec<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 256,
            max_steps: 20_000,
            lr_peak: 1e-3,
            warmup_steps: 500,
            lr_final_frac: 0.01,
            seed: 0,
            val_grid: 21,
            val_n: 2048,
            val_every: 250,
            ladder: vec![0.5, 0.2, 0.1, 0.05, 0.02, 0.01],
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.max_steps == 0 || self.val_every == 0 {
            return Err(Error::Argument("batch_size, max_steps, val_every must be >= 1".into()));
        }
        if !(self.lr_peak > 0.0) || !(self.lr_final_frac > 0.0 && self.lr_final_frac <= 1.0) {
            return Err(Error::Argument("learning rates must be positive".into()));
        }
        if self.val_grid < 2 || self.val_n < 2 {
            return Err(Error::Argument("validation probe needs val_grid, val_n >= 2".into()));
        }
        if self.ladder.is_empty() || self.ladder.iter().any(|&l| !(l > 0.0)) {
            return Err(Error::Argument("ladder must be nonempty and positive".into()));
        }
        if self.ladder.windows(2).any(|w| w[1] >= w[0]) {
            return Err(Error::Argument("ladder must be strictly decreasing".into()));
        }
        Ok(())
    }
}

/// Warmup then cosine decay from `lr_peak` to `lr_peak * lr_final_frac`.
pub fn cosine_lr(cfg: &TrainConfig, step: usize) -> f64 {
    if step < cfg.warmup_steps {
        return cfg.lr_peak * (step + 1) as f64 / cfg.warmup_steps as f64;
    }
    let span = (cfg.max_steps.saturating_sub(cfg.warmup_steps)).max(1) as f64;
    let progress = ((step - cfg.warmup_steps) as f64 / span).min(1.0);
    let lr_final = cfg.lr_peak * cfg.lr_final_frac;
    lr_final + 0.5 * (cfg.lr_peak - lr_final) * (1.0 + (PI * progress).cos())
}

/// Adam with bias correction; produces the additive parameter update.
pub struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: usize,
    beta1: f64,
    beta2: f64,
    eps: f64,
}

impl Adam {
    pub fn new(n: usize) -> Self {
        Adam { m: vec![0.0; n], v: vec![0.0; n], t: 0, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }

    pub fn step(&mut self, grad: &[f64], lr: f64, delta: &mut [f64]) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for i in 0..grad.len() {
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * grad[i];
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * grad[i] * grad[i];
            let mhat = self.m[i] / bc1;
            let vhat = self.v[i] / bc2;
            delta[i] = -lr * mhat / (vhat.sqrt() + self.eps);
        }
    }
}

/// Affine conditional path coefficients and their time derivatives.
#[derive(Clone, Copy)]
pub struct AffineSchedule {
    pub mu: fn(f64) -> f64,
    pub mu_dot: fn(f64) -> f64,
    pub sigma: fn(f64) -> f64,
    pub sigma_dot: fn(f64) -> f64,
}

impl AffineSchedule {
    pub fn new(
        mu: fn(f64) -> f64,
        mu_dot: fn(f64) -> f64,
        sigma: fn(f64) -> f64,
        sigma_dot: fn(f64) -> f64,
    ) -> Result<Self> {
        let s = AffineSchedule { mu, mu_dot, sigma, sigma_dot };
        for (v, expect, what) in [
            ((s.mu)(0.0), 0.0, "mu(0)"),
            ((s.mu)(1.0), 1.0, "mu(1)"),
            ((s.sigma)(0.0), 1.0, "sigma(0)"),
            ((s.sigma)(1.0), 0.0, "sigma(1)"),
        ] {
            if (v - expect).abs() > 1e-12 {
                return Err(Error::Argument(format!(
                    "affine schedule boundary violated: {what} = {v}, expected {expect}"
                )));
            }
        }
        Ok(s)
    }
}

/// The straight-line path mu_t = t, sigma_t = 1 - t.
pub fn linear_affine() -> AffineSchedule {
    AffineSchedule {
        mu: |t| t,
        mu_dot: |_| 1.0,
        sigma: |t| 1.0 - t,
        sigma_dot: |_| -1.0,
    }
}

/// Time window the CFM sampler draws from, clipped away from the endpoint
/// singularity.
#[derive(Clone, Copy, Debug)]
pub struct ClipWindow {
    pub t0: f64,
    pub t1: f64,
}

impl ClipWindow {
    pub fn new(t0: f64, t1: f64) -> Result<Self> {
        if !(0.0 <= t0 && t0 < t1 && t1 <= 1.0) {
            return Err(Error::Argument(format!("clip window needs 0 <= {t0} < {t1} <= 1")));
        }
        Ok(ClipWindow { t0, t1 })
    }

    /// Default window for affine CFM.
    pub fn cfm_default() -> Self {
        ClipWindow { t0: 0.001, t1: 0.999 }
    }

    /// Full interval; safe for the direct mode.
    pub fn full() -> Self {
        ClipWindow { t0: 0.0, t1: 1.0 }
    }
}

/// Interpolated sample `x_t = mu_t x1 + sigma_t x0` and its conditional
/// velocity target `mu_dot_t x1 + sigma_dot_t x0`.
pub fn cfm_target(
    affine: &AffineSchedule,
    x1: &[f64],
    x0: &[f64],
    t: f64,
) -> (Vec<f64>, Vec<f64>) {
    let (mu, mud) = ((affine.mu)(t), (affine.mu_dot)(t));
    let (sg, sgd) = ((affine.sigma)(t), (affine.sigma_dot)(t));
    let xt = x1.iter().zip(x0).map(|(&a, &b)| mu * a + sg * b).collect();
    let target = x1.iter().zip(x0).map(|(&a, &b)| mud * a + sgd * b).collect();
    (xt, target)
}

/// Monte-Carlo validation MSE `mean_t E_{x~p_t} |v(x,t) - a(t) x|^2` over a
/// time grid with common random numbers across grid points.
pub fn validation_mse<F: VelocityField>(
    field: &F,
    s: &Schedule,
    grid: &TimeGrid,
    n: usize,
    seed: u64,
) -> Result<f64> {
    let d = field.dim();
    let stream = RngStream::new(seed, "val-probe");
    let mut z = vec![0.0; n * d];
    stream.fill_normal(0, &mut z);
    let mut xs = vec![0.0; n * d];
    let mut vs = vec![0.0; n * d];
    let mut per_t = Vec::with_capacity(grid.len());
    for &t in grid.points() {
        let sigma = s.sigma(t)?;
        let a = s.rate(t)?;
        for (x, &zi) in xs.iter_mut().zip(&z) {
            *x = sigma * zi;
        }
        field.eval_batch(&xs, t, &mut vs);
        let mut acc = 0.0;
        for i in 0..n * d {
            let r = vs[i] - a * xs[i];
            acc += r * r;
        }
        per_t.push(acc / n as f64);
    }
    Ok(per_t.iter().sum::<f64>() / per_t.len() as f64)
}

#[derive(Clone, Debug)]
pub struct LogRow {
    pub step: usize,
    pub train_loss: f64,
    pub val_mse: f64,
    pub lr: f64,
}

#[derive(Debug)]
pub struct TrainRun {
    pub net: MlpVelocity,
    pub checkpoints: Vec<Checkpoint>,
    pub final_val_mse: f64,
    pub log: Vec<LogRow>,
}

#[derive(Serialize)]
struct Manifest<'a> {
    mode: &'a str,
    schedule_id: &'a str,
    seed: u64,
    widths: Vec<usize>,
    config: &'a TrainConfig,
    checkpoints: Vec<(usize, f64)>,
}

/// Shared optimization loop. `sample_batch(step, xs, ts, ys)` fills the
/// training batch; `validate(net)` scores the fixed probe set. Stops early
/// once the last ladder rung is crossed.
fn run_training(
    mut net: MlpVelocity,
    cfg: &TrainConfig,
    mode: &str,
    schedule_id: &str,
    run_dir: Option<&Path>,
    mut sample_batch: impl FnMut(usize, &mut [f64], &mut [f64], &mut [f64]),
    mut validate: impl FnMut(&MlpVelocity) -> Result<f64>,
) -> Result<TrainRun> {
    cfg.validate()?;
    let d = net.dim();
    let b = cfg.batch_size;
    let mut xs = vec![0.0; b * d];
    let mut ts = vec![0.0; b];
    let mut ys = vec![0.0; b * d];
    let mut grad = vec![0.0; net.param_count()];
    let mut delta = vec![0.0; net.param_count()];
    let mut adam = Adam::new(net.param_count());

    let mut checkpoints: Vec<Checkpoint> = Vec::new();
    let mut log = Vec::new();
    let mut next_rung = 0usize;
    let mut last_val = f64::INFINITY;
    let mut last_step = 0usize;

    for step in 0..cfg.max_steps {
        last_step = step;
        let lr = cosine_lr(cfg, step);
        sample_batch(step, &mut xs, &mut ts, &mut ys);
        let loss = net.loss_grad(&xs, &ts, &ys, &mut grad);
        if !loss.is_finite() {
            return Err(Error::Training(step));
        }
        adam.step(&grad, lr, &mut delta);
        net.apply_update(&delta);

        if (step + 1) % cfg.val_every == 0 || step + 1 == cfg.max_steps {
            let val = validate(&net)?;
            last_val = val;
            log.push(LogRow { step: step + 1, train_loss: loss, val_mse: val, lr });
            if next_rung < cfg.ladder.len() && val < cfg.ladder[next_rung] {
                while next_rung < cfg.ladder.len() && val < cfg.ladder[next_rung] {
                    next_rung += 1;
                }
                checkpoints.push(Checkpoint::new(&net, step + 1, val, schedule_id, cfg.seed));
            }
            if next_rung == cfg.ladder.len() {
                break;
            }
        }
    }

    if !last_val.is_finite() {
        last_val = validate(&net)?;
        log.push(LogRow {
            step: last_step + 1,
            train_loss: f64::NAN,
            val_mse: last_val,
            lr: cosine_lr(cfg, last_step),
        });
    }
    // A terminal snapshot, unless the last rung checkpoint already is one and
    // emitting another would break the strictly-decreasing val_mse order.
    let improves = checkpoints.last().map_or(true, |c| last_val < c.val_mse);
    if improves {
        checkpoints.push(Checkpoint::new(&net, last_step + 1, last_val, schedule_id, cfg.seed));
    }
    if last_val > cfg.ladder[0] {
        return Err(Error::Verification(format!(
            "final validation MSE {last_val} above the first ladder rung {}",
            cfg.ladder[0]
        )));
    }

    if let Some(dir) = run_dir {
        std::fs::create_dir_all(dir)?;
        for c in &checkpoints {
            c.save(&dir.join(format!("ckpt_{}.json", c.step)))?;
        }
        let manifest = Manifest {
            mode,
            schedule_id,
            seed: cfg.seed,
            widths: net.widths().to_vec(),
            config: cfg,
            checkpoints: checkpoints.iter().map(|c| (c.step, c.val_mse)).collect(),
        };
        let json = serde_json::to_string_pretty(&manifest)
            .map_err(|e| Error::Format(e.to_string()))?;
        write_atomic(&dir.join("manifest.json"), json.as_bytes())?;
        let rows: Vec<Vec<f64>> = log
            .iter()
            .map(|r| vec![r.step as f64, r.train_loss, r.val_mse, r.lr])
            .collect();
        let csv = csv_table(&["step", "train_loss", "val_mse", "lr"], &rows)?;
        write_atomic(&dir.join("train_log.csv"), csv.as_bytes())?;
    }

    Ok(TrainRun { net, checkpoints, final_val_mse: last_val, log })
}

/// Direct flow matching: regress `v(x, t)` onto the known target `a(t) x`
/// with `t ~ U(0,1)` and `x ~ p_t`.
pub fn train_direct_fm(
    s: &Schedule,
    net: MlpVelocity,
    cfg: &TrainConfig,
    run_dir: Option<&Path>,
) -> Result<TrainRun> {
    let d = net.dim();
    let t_stream = RngStream::new(cfg.seed, "train-t");
    let x_stream = RngStream::new(cfg.seed, "train-x");
    let grid = TimeGrid::uniform(cfg.val_grid)?;
    let schedule_id = s.id().as_str().to_string();
    let sched = s.clone();
    let val_sched = s.clone();
    let (val_n, val_seed) = (cfg.val_n, cfg.seed);

    run_training(
        net,
        cfg,
        "direct-fm",
        &schedule_id,
        run_dir,
        move |step, xs, ts, ys| {
            let b = ts.len();
            for i in 0..b {
                let idx = (step * b + i) as u64;
                let t = t_stream.uniform(idx);
                ts[i] = t;
                let sigma = sched.sigma(t).expect("t in (0,1)");
                let a = sched.rate(t).expect("t in (0,1)");
                for c in 0..d {
                    let z = x_stream.normal(idx * d as u64 + c as u64);
                    xs[i * d + c] = sigma * z;
                    ys[i * d + c] = a * xs[i * d + c];
                }
            }
        },
        move |net| validation_mse(net, &val_sched, &grid, val_n, val_seed),
    )
}

/// Empirical-loss probe for the CFM mode: a fixed set of (data index, t, x0)
/// draws scored by the conditional objective.
fn cfm_probe_loss(
    net: &MlpVelocity,
    data: &[f64],
    affine: &AffineSchedule,
    clip: &ClipWindow,
    n: usize,
    seed: u64,
) -> f64 {
    let d = net.dim();
    let points = data.len() / d;
    let stream = RngStream::new(seed, "cfm-val");
    let mut acc = 0.0;
    let mut out = vec![0.0; d];
    for i in 0..n {
        let idx = stream.index(3 * i as u64, points);
        let t = stream.uniform_in(3 * i as u64 + 1, clip.t0, clip.t1);
        let mut x0 = vec![0.0; d];
        stream.substream(1).fill_normal((i * d) as u64, &mut x0);
        let x1 = &data[idx * d..(idx + 1) * d];
        let (xt, target) = cfm_target(affine, x1, &x0, t);
        net.eval_batch(&xt, t, &mut out);
        for c in 0..d {
            let r = out[c] - target[c];
            acc += r * r;
        }
    }
    acc / n as f64
}

/// Conditional flow matching over an empirical dataset along an affine path.
/// Validation uses a fixed probe of the same conditional objective.
pub fn train_affine_cfm(
    data: &[f64],
    affine: &AffineSchedule,
    clip: &ClipWindow,
    net: MlpVelocity,
    cfg: &TrainConfig,
    run_dir: Option<&Path>,
) -> Result<TrainRun> {
    let d = net.dim();
    if data.is_empty() || data.len() % d != 0 {
        return Err(Error::Argument(format!(
            "data length {} is not a nonempty multiple of dim {d}",
            data.len()
        )));
    }
    let points = data.len() / d;
    let stream = RngStream::new(cfg.seed, "cfm-train");
    let z_stream = RngStream::new(cfg.seed, "cfm-x0");
    let data_train = data.to_vec();
    let data_val = data.to_vec();
    let (affine_t, affine_v) = (*affine, *affine);
    let (clip_t, clip_v) = (*clip, *clip);
    let (val_n, val_seed) = (cfg.val_n, cfg.seed);

    run_training(
        net,
        cfg,
        "affine-cfm",
        "cfm",
        run_dir,
        move |step, xs, ts, ys| {
            let b = ts.len();
            let mut x0 = vec![0.0; d];
            for i in 0..b {
                let idx = (step * b + i) as u64;
                let pick = stream.index(2 * idx, points);
                let t = stream.uniform_in(2 * idx + 1, clip_t.t0, clip_t.t1);
                ts[i] = t;
                z_stream.fill_normal(idx * d as u64, &mut x0);
                let x1 = &data_train[pick * d..(pick + 1) * d];
                let (xt, target) = cfm_target(&affine_t, x1, &x0, t);
                xs[i * d..(i + 1) * d].copy_from_slice(&xt);
                ys[i * d..(i + 1) * d].copy_from_slice(&target);
            }
        },
        move |net| Ok(cfm_probe_loss(net, &data_val, &affine_v, &clip_v, val_n, val_seed)),
    )
}

/// Mean and spread of `|v(x,t) - a(t) x|^2` at one time; used by reporting.
pub fn field_gap_at<F: VelocityField>(
    field: &F,
    s: &Schedule,
    t: f64,
    n: usize,
    seed: u64,
) -> Result<(f64, f64)> {
    let d = field.dim();
    let stream = RngStream::new(seed, "gap");
    let sigma = s.sigma(t)?;
    let a = s.rate(t)?;
    let mut xs = vec![0.0; n * d];
    stream.fill_normal(0, &mut xs);
    xs.iter_mut().for_each(|x| *x *= sigma);
    let mut vs = vec![0.0; n * d];
    field.eval_batch(&xs, t, &mut vs);
    let per: Vec<f64> = (0..n)
        .map(|i| {
            (0..d)
                .map(|c| {
                    let r = vs[i * d + c] - a * xs[i * d + c];
                    r * r
                })
                .sum()
        })
        .collect();
    Ok(mean_stderr(&per))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::paths::LinearField;
    use tempfile::tempdir;

    fn small_cfg(seed: u64) -> TrainConfig {
        TrainConfig {
            batch_size: 64,
            max_steps: 2000,
            warmup_steps: 100,
            val_grid: 11,
            val_n: 256,
            val_every: 100,
            ladder: vec![0.5, 0.2],
            seed,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn config_validation_rejects_bad_ladders() {
        let mut cfg = TrainConfig::default();
        cfg.validate().unwrap();
        cfg.ladder = vec![0.1, 0.2];
        assert!(cfg.validate().is_err());
        cfg.ladder = vec![0.1, -0.2];
        assert!(cfg.validate().is_err());
        cfg.ladder.clear();
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn lr_schedule_shape() {
        let cfg = TrainConfig::default();
        assert!(cosine_lr(&cfg, 0) < 1e-5 + 1e-12);
        assert!((cosine_lr(&cfg, cfg.warmup_steps) - cfg.lr_peak).abs() < 1e-5);
        let last = cosine_lr(&cfg, cfg.max_steps - 1);
        assert!((last - 1e-5).abs() < 1e-6, "final lr {last}");
        // Monotone decay after warmup.
        let mut prev = cosine_lr(&cfg, cfg.warmup_steps);
        for s in (cfg.warmup_steps..cfg.max_steps).step_by(500) {
            let lr = cosine_lr(&cfg, s);
            assert!(lr <= prev + 1e-15);
            prev = lr;
        }
    }

    #[test]
    fn adam_with_zero_lr_leaves_parameters_unchanged() {
        let mut net = MlpVelocity::init(&[3, 8, 2], 5).unwrap();
        let before = net.params_flat();
        let mut adam = Adam::new(net.param_count());
        let grad: Vec<f64> = (0..net.param_count()).map(|i| (i as f64).sin()).collect();
        let mut delta = vec![0.0; net.param_count()];
        adam.step(&grad, 0.0, &mut delta);
        net.apply_update(&delta);
        for (a, b) in net.params_flat().iter().zip(&before) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn cfm_target_boundaries_and_linear_example() {
        let aff = linear_affine();
        let x1 = [2.0, 0.0];
        let x0 = [-1.0, 3.0];
        let (xt, _) = cfm_target(&aff, &x1, &x0, 0.0);
        assert_eq!(xt, x0.to_vec());
        let (xt, _) = cfm_target(&aff, &x1, &x0, 1.0);
        assert_eq!(xt, x1.to_vec());
        let (xt, target) = cfm_target(&aff, &x1, &[0.0, 0.0], 0.25);
        assert_eq!(xt, vec![0.5, 0.0]);
        assert_eq!(target, vec![2.0, 0.0]);
    }

    #[test]
    fn affine_schedule_boundaries_are_enforced() {
        assert!(AffineSchedule::new(|t| t, |_| 1.0, |t| 1.0 - t, |_| -1.0).is_ok());
        assert!(AffineSchedule::new(|t| t + 0.1, |_| 1.0, |t| 1.0 - t, |_| -1.0).is_err());
    }

    #[test]
    fn clip_window_ordering() {
        assert!(ClipWindow::new(0.0, 1.0).is_ok());
        assert!(ClipWindow::new(0.5, 0.5).is_err());
        assert!(ClipWindow::new(-0.1, 0.5).is_err());
    }

    #[test]
    fn validation_mse_of_the_exact_field_is_zero() {
        let s = Schedule::A1;
        let field: LinearField = s.field(2);
        let grid = TimeGrid::uniform(11).unwrap();
        let v = validation_mse(&field, &s, &grid, 128, 3).unwrap();
        assert!(v < 1e-24, "val {v}");
    }

    #[test]
    fn validation_mse_of_zero_net_matches_closed_form() {
        let s = Schedule::A1;
        let net = MlpVelocity::zeros(&[3, 8, 2]).unwrap();
        let grid = TimeGrid::uniform(21).unwrap();
        let n = 20_000;
        let v = validation_mse(&net, &s, &grid, n, 7).unwrap();
        // E|a(t) x|^2 = a(t)^2 d sigma^2 averaged over the grid.
        let expect: f64 = grid
            .points()
            .iter()
            .map(|&t| {
                let a = s.rate(t).unwrap();
                let sg = s.sigma(t).unwrap();
                a * a * 2.0 * sg * sg
            })
            .sum::<f64>()
            / grid.len() as f64;
        assert!((v - expect).abs() / expect < 0.05, "{v} vs {expect}");
    }

    #[test]
    fn zero_target_completes_ladder_immediately() {
        let s = Schedule::constant(0.0);
        let net = MlpVelocity::zeros(&[3, 8, 2]).unwrap();
        let run = train_direct_fm(&s, net, &small_cfg(1), None).unwrap();
        assert!(run.final_val_mse < 1e-3);
        assert_eq!(run.checkpoints.last().unwrap().val_mse, run.final_val_mse);
        // Ladder rungs all crossed at the first validation -> early stop.
        assert!(run.log.len() <= 2);
    }

    #[test]
    fn direct_fm_learns_a1_and_is_deterministic() {
        let s = Schedule::A1;
        let mut cfg = small_cfg(11);
        cfg.max_steps = 4000;
        cfg.lr_peak = 3e-3;
        let net = MlpVelocity::init(&[3, 32, 2], cfg.seed).unwrap();
        let run = train_direct_fm(&s, net.clone(), &cfg, None).unwrap();
        assert!(run.final_val_mse <= 0.2, "val {}", run.final_val_mse);
        let vals: Vec<f64> = run.checkpoints.iter().map(|c| c.val_mse).collect();
        assert!(vals.windows(2).all(|w| w[1] < w[0]), "ladder {vals:?}");

        let rerun = train_direct_fm(&s, net, &cfg, None).unwrap();
        assert_eq!(run.net.params_flat(), rerun.net.params_flat());
        assert_eq!(run.checkpoints.len(), rerun.checkpoints.len());
    }

    #[test]
    fn run_directory_artifacts_are_written() {
        let dir = tempdir().unwrap();
        let s = Schedule::constant(0.0);
        let net = MlpVelocity::zeros(&[3, 8, 2]).unwrap();
        train_direct_fm(&s, net, &small_cfg(2), Some(dir.path())).unwrap();
        let manifest = std::fs::read_to_string(dir.path().join("manifest.json")).unwrap();
        assert!(manifest.contains("\"mode\": \"direct-fm\""));
        let log = std::fs::read_to_string(dir.path().join("train_log.csv")).unwrap();
        assert!(log.starts_with("step,train_loss,val_mse,lr"));
        let ckpts: Vec<_> = std::fs::read_dir(dir.path())
            .unwrap()
            .filter_map(|e| e.ok())
            .filter(|e| e.file_name().to_string_lossy().starts_with("ckpt_"))
            .collect();
        assert!(!ckpts.is_empty());
    }

    #[test]
    fn affine_cfm_on_a_point_mass_recovers_the_conditional_field() {
        // Single data point at the origin: the optimal field is -x/(1-t).
        let data = [0.0, 0.0];
        let aff = linear_affine();
        // Clip tighter than the default: with a point mass the target grows
        // like 1/(1-t) and the t ~ 1 region would dominate the objective.
        let clip = ClipWindow::new(0.001, 0.9).unwrap();
        let mut cfg = small_cfg(3);
        cfg.max_steps = 8000;
        cfg.lr_peak = 3e-3;
        cfg.ladder = vec![0.5, 0.01];
        let net = MlpVelocity::init(&[3, 48, 48, 2], cfg.seed).unwrap();
        let run = train_affine_cfm(&data, &aff, &clip, net, &cfg, None).unwrap();

        let probe = RngStream::new(99, "cfm-probe");
        let mut rel_err = Vec::new();
        for i in 0..200u64 {
            let t = probe.uniform_in(3 * i, 0.05, 0.8);
            let z = [probe.normal(3 * i + 1), probe.normal(3 * i + 2)];
            let x = [(1.0 - t) * z[0], (1.0 - t) * z[1]];
            let v = run.net.eval(&x, t);
            let expect = [-z[0], -z[1]];
            let num = ((v[0] - expect[0]).powi(2) + (v[1] - expect[1]).powi(2)).sqrt();
            let den = (expect[0].powi(2) + expect[1].powi(2)).sqrt().max(0.3);
            rel_err.push(num / den);
        }
        let mean: f64 = rel_err.iter().sum::<f64>() / rel_err.len() as f64;
        assert!(mean <= 0.1, "mean relative error {mean}");
    }

    #[test]
    fn divergent_training_reports_the_step() {
        let s = Schedule::A1;
        let mut cfg = small_cfg(4);
        // Large enough that the affine output layer overflows to inf.
        cfg.lr_peak = 1e200;
        cfg.warmup_steps = 1;
        let net = MlpVelocity::init(&[3, 8, 2], 0).unwrap();
        match train_direct_fm(&s, net, &cfg, None) {
            Err(Error::Training(_)) => {}
            other => panic!("expected divergence, got {other:?}"),
        }
    }
}
