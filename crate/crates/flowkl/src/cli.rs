//! Experiment runner: four subcommands producing deterministic CSV/JSON
//! artifacts plus minimal SVG line charts in an output directory.
//!
//! Value precedence is CLI flag, then `--config` key=value file, then the
//! built-in default; the resolved configuration is always written next to the
//! artifacts. The process exits 0 iff every satisfied/tracking flag is true.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::error::{Error, Result};
use crate::estimators::{bound_check, bound_csv, identity_curves, identity_csv, McConfig};
use crate::mlp::{Checkpoint, MlpVelocity};
use crate::ode::IvpConfig;
use crate::output::{fnv1a_hex, svg_chart, write_atomic, ChartSpec, Series};
use crate::paths::{closed_form_identity_curves, Schedule, TimeGrid};
use crate::trainer::{train_direct_fm, TrainConfig};

#[derive(Parser, Debug)]
#[command(name = "flowkl", version, about = "KL identity and bound verification for continuity flows")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Verify that KL(p_t || q_t) tracks the time integral of the identity
    /// integrand, with analytic or learned q-fields.
    VerifyIdentity(IdentityArgs),
    /// Verify KL(p_1 || q_1) <= eps * sqrt(S) over a synthetic perturbation
    /// sweep or a trained checkpoint ladder.
    VerifyBound(BoundArgs),
    /// Train a velocity network and emit its checkpoint ladder.
    Train(TrainArgs),
    /// Build and verify the weak-solution counterexample.
    Counterexample(CounterArgs),
}

#[derive(Args, Debug)]
pub struct CommonArgs {
    /// Monte-Carlo samples per grid point.
    #[arg(long)]
    pub n: Option<usize>,
    /// Uniform time-grid size on [0, 1].
    #[arg(long)]
    pub grid: Option<usize>,
    /// RK4 steps for a unit time interval.
    #[arg(long = "ode-steps")]
    pub ode_steps: Option<usize>,
    /// RNG seed; falls back to FLOWKL_SEED, then 0.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory for artifacts.
    #[arg(long)]
    pub out: PathBuf,
    /// key=value file supplying defaults for any long flag.
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct IdentityArgs {
    /// analytic | learned
    #[arg(long)]
    pub mode: Option<String>,
    /// Data-path schedule (analytic mode).
    #[arg(long = "schedule-p")]
    pub schedule_p: Option<String>,
    /// Model-path schedule (analytic mode).
    #[arg(long = "schedule-q")]
    pub schedule_q: Option<String>,
    /// Training schedule (learned mode).
    #[arg(long)]
    pub schedule: Option<String>,
    /// Directory holding ckpt_*.json files (learned mode).
    #[arg(long = "run-dir")]
    pub run_dir: Option<PathBuf>,
    /// Train a fresh network when no checkpoints are present.
    #[arg(long)]
    pub train: bool,
    /// Comma-separated descending validation-MSE thresholds.
    #[arg(long)]
    pub ladder: Option<String>,
    #[command(flatten)]
    pub common: CommonArgs,
}

#[derive(Args, Debug)]
pub struct BoundArgs {
    /// synthetic | checkpoints
    #[arg(long)]
    pub mode: Option<String>,
    /// Data-path schedule.
    #[arg(long)]
    pub schedule: Option<String>,
    /// Perturbation sweep as start:end:step (synthetic mode).
    #[arg(long)]
    pub betas: Option<String>,
    /// Directory holding ckpt_*.json files (checkpoints mode).
    #[arg(long = "run-dir")]
    pub run_dir: Option<PathBuf>,
    /// Train a fresh ladder when no checkpoints are present.
    #[arg(long)]
    pub train: bool,
    /// Comma-separated descending validation-MSE thresholds.
    #[arg(long)]
    pub ladder: Option<String>,
    #[command(flatten)]
    pub common: CommonArgs,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// Training schedule.
    #[arg(long)]
    pub schedule: Option<String>,
    /// Comma-separated descending validation-MSE thresholds.
    #[arg(long)]
    pub ladder: Option<String>,
    /// Optimization step budget.
    #[arg(long = "max-steps")]
    pub max_steps: Option<usize>,
    #[command(flatten)]
    pub common: CommonArgs,
}

#[derive(Args, Debug)]
pub struct CounterArgs {
    /// KL lower bound forced by the construction.
    #[arg(long = "M")]
    pub m: Option<f64>,
    /// Flow-matching loss of the construction.
    #[arg(long)]
    pub eps: Option<f64>,
    /// Jump time in (0, 1).
    #[arg(long)]
    pub tau: Option<f64>,
    /// Tilt direction as comma-separated components.
    #[arg(long)]
    pub b: Option<String>,
    #[command(flatten)]
    pub common: CommonArgs,
}

/// key=value lines; '#' starts a comment, blank lines ignored.
fn parse_config_file(path: &Path) -> Result<BTreeMap<String, String>> {
    let text = std::fs::read_to_string(path)?;
    let mut map = BTreeMap::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| {
            Error::Usage(format!("config line {}: expected key=value, got {raw:?}", lineno + 1))
        })?;
        map.insert(k.trim().to_string(), v.trim().to_string());
    }
    Ok(map)
}

/// Flag > config file > default, recording the winner for the effective
/// config dump.
struct Resolver {
    file: BTreeMap<String, String>,
    effective: BTreeMap<String, String>,
}

impl Resolver {
    fn new(config: Option<&Path>) -> Result<Self> {
        let file = match config {
            Some(p) => parse_config_file(p)?,
            None => BTreeMap::new(),
        };
        Ok(Resolver { file, effective: BTreeMap::new() })
    }

    fn get<T: Clone + ToString, E: std::fmt::Display>(
        &mut self,
        key: &str,
        flag: Option<T>,
        parse: impl Fn(&str) -> std::result::Result<T, E>,
        default: T,
    ) -> Result<T> {
        let v = match flag {
            Some(v) => v,
            None => match self.file.get(key) {
                Some(raw) => parse(raw)
                    .map_err(|e| Error::Usage(format!("config key {key}={raw:?}: {e}")))?,
                None => default,
            },
        };
        self.effective.insert(key.to_string(), v.to_string());
        Ok(v)
    }

    fn note(&mut self, key: &str, value: impl ToString) {
        self.effective.insert(key.to_string(), value.to_string());
    }

    fn dump(&self) -> String {
        let mut out = String::new();
        for (k, v) in &self.effective {
            let _ = writeln!(out, "{k}={v}");
        }
        out
    }
}

fn seed_default() -> u64 {
    std::env::var("FLOWKL_SEED").ok().and_then(|s| s.parse().ok()).unwrap_or(0)
}

struct ResolvedCommon {
    n: usize,
    grid: usize,
    ode_steps: usize,
    seed: u64,
    out: PathBuf,
}

fn resolve_common(r: &mut Resolver, c: &CommonArgs, default_n: usize) -> Result<ResolvedCommon> {
    let n = r.get("n", c.n, str::parse, default_n)?;
    let grid = r.get("grid", c.grid, str::parse, 201)?;
    let ode_steps = r.get("ode-steps", c.ode_steps, str::parse, 200)?;
    let seed = r.get("seed", c.seed, str::parse, seed_default())?;
    r.note("out", c.out.display());
    Ok(ResolvedCommon { n, grid, ode_steps, seed, out: c.out.clone() })
}

fn mc_config(c: &ResolvedCommon) -> Result<McConfig> {
    let mut cfg = McConfig::new(c.n, c.seed)?;
    cfg.grid = TimeGrid::uniform(c.grid)?;
    cfg.ode = IvpConfig { steps: c.ode_steps };
    Ok(cfg)
}

fn parse_ladder(raw: &str) -> Result<Vec<f64>> {
    raw.split(',')
        .map(|s| {
            s.trim()
                .parse::<f64>()
                .map_err(|e| Error::Usage(format!("ladder entry {s:?}: {e}")))
        })
        .collect()
}

fn parse_betas(raw: &str) -> Result<Vec<f64>> {
    let parts: Vec<&str> = raw.split(':').collect();
    if parts.len() != 3 {
        return Err(Error::Usage(format!("betas {raw:?}: expected start:end:step")));
    }
    let num = |s: &str| {
        s.trim().parse::<f64>().map_err(|e| Error::Usage(format!("betas entry {s:?}: {e}")))
    };
    let (start, end, step) = (num(parts[0])?, num(parts[1])?, num(parts[2])?);
    if !(step > 0.0) || end < start {
        return Err(Error::Usage(format!("betas {raw:?}: need step > 0 and end >= start")));
    }
    let count = ((end - start) / step).round() as usize;
    Ok((0..=count).map(|i| start + i as f64 * step).collect())
}

fn parse_vector(raw: &str) -> Result<Vec<f64>> {
    raw.split(',')
        .map(|s| {
            s.trim().parse::<f64>().map_err(|e| Error::Usage(format!("b entry {s:?}: {e}")))
        })
        .collect()
}

fn finish(r: &Resolver, out: &Path, satisfied: bool) -> Result<bool> {
    write_atomic(&out.join("config.txt"), r.dump().as_bytes())?;
    Ok(satisfied)
}

/// Checkpoints in a run directory, ordered by descending validation MSE.
fn load_ladder(dir: &Path) -> Result<Vec<Checkpoint>> {
    let mut ladder = Vec::new();
    if dir.is_dir() {
        for entry in std::fs::read_dir(dir)? {
            let path = entry?.path();
            let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("");
            if name.starts_with("ckpt_") && name.ends_with(".json") {
                ladder.push(Checkpoint::load(&path)?);
            }
        }
    }
    ladder.sort_by(|a, b| b.val_mse.total_cmp(&a.val_mse));
    Ok(ladder)
}

/// A run directory's ladder, training one in place when absent and allowed.
fn ladder_or_train(
    run_dir: &Path,
    train: bool,
    schedule: &Schedule,
    cfg: &TrainConfig,
) -> Result<Vec<Checkpoint>> {
    let ladder = load_ladder(run_dir)?;
    if !ladder.is_empty() {
        return Ok(ladder);
    }
    if !train {
        return Err(Error::Usage(format!(
            "no checkpoints under {}; pass --train to create them",
            run_dir.display()
        )));
    }
    let run = train_direct_fm(schedule, MlpVelocity::init(&MlpVelocity::default_widths(), cfg.seed)?, cfg, Some(run_dir))?;
    Ok(run.checkpoints)
}

fn write_chart(path: &Path, spec: &ChartSpec, series: &[Series]) -> Result<()> {
    write_atomic(path, svg_chart(spec, series).as_bytes())
}

pub fn run_verify_identity(args: &IdentityArgs) -> Result<bool> {
    let mut r = Resolver::new(args.common.config.as_deref())?;
    let mode = r.get("mode", args.mode.clone(), |s| Ok::<_, Error>(s.to_string()), "analytic".into())?;
    r.note("command", "verify-identity");
    let common = resolve_common(&mut r, &args.common, 50_000)?;
    let cfg = mc_config(&common)?;
    std::fs::create_dir_all(&common.out)?;

    let (report, closed) = match mode.as_str() {
        "analytic" => {
            let sp = r.get("schedule-p", args.schedule_p.clone(), |s| Ok::<_, Error>(s.to_string()), "a1".into())?;
            let sq = r.get("schedule-q", args.schedule_q.clone(), |s| Ok::<_, Error>(s.to_string()), "a3".into())?;
            let p = Schedule::from_name(&sp)?;
            let q = Schedule::from_name(&sq)?;
            let q_field = q.field(2);
            let closed = closed_form_identity_curves(&p.field(2), &q_field, &cfg.grid)?;
            let report = identity_curves(&p, &q_field, &cfg)?;
            (report, Some(closed))
        }
        "learned" => {
            let sid = r.get("schedule", args.schedule.clone(), |s| Ok::<_, Error>(s.to_string()), "a2".into())?;
            let schedule = Schedule::from_name(&sid)?;
            let mut tcfg = TrainConfig { seed: common.seed, ..TrainConfig::default() };
            let ladder_raw =
                r.get("ladder", args.ladder.clone(), |s| Ok::<_, Error>(s.to_string()), String::new())?;
            if !ladder_raw.is_empty() {
                tcfg.ladder = parse_ladder(&ladder_raw)?;
            }
            let run_dir = args.run_dir.clone().unwrap_or_else(|| common.out.join("train"));
            r.note("run-dir", run_dir.display());
            let ladder = ladder_or_train(&run_dir, args.train, &schedule, &tcfg)?;
            let best = ladder.last().expect("nonempty ladder");
            if best.val_mse > 0.05 {
                return Err(Error::Verification(format!(
                    "best checkpoint val_mse {} above 0.05",
                    best.val_mse
                )));
            }
            let net = best.network()?;
            let report = identity_curves(&schedule, &net, &cfg)?;
            (report, None)
        }
        other => return Err(Error::Usage(format!("verify-identity mode {other:?}: expected analytic or learned"))),
    };

    let csv = match &closed {
        Some(pts) => {
            let rows: Vec<Vec<f64>> = report
                .rows
                .iter()
                .zip(pts)
                .map(|(row, c)| {
                    vec![row.t, row.kl_hat, row.kl_se, row.g_hat, row.g_se, row.cum_integral, c.kl, c.integrand]
                })
                .collect();
            crate::output::csv_table(
                &["t", "kl_hat", "kl_se", "g_hat", "g_se", "cum_integral", "kl_closed", "g_closed"],
                &rows,
            )?
        }
        None => identity_csv(&report)?,
    };
    write_atomic(&common.out.join("identity.csv"), csv.as_bytes())?;

    let mut series = vec![
        Series {
            label: "kl_hat",
            points: report.rows.iter().map(|x| (x.t, x.kl_hat)).collect(),
            color: "#1f77b4",
        },
        Series {
            label: "cum_integral",
            points: report.rows.iter().map(|x| (x.t, x.cum_integral)).collect(),
            color: "#d62728",
        },
    ];
    if let Some(pts) = &closed {
        series.push(Series {
            label: "kl_closed",
            points: pts.iter().map(|c| (c.t, c.kl)).collect(),
            color: "#2ca02c",
        });
    }
    write_chart(
        &common.out.join("identity.svg"),
        &ChartSpec {
            title: "KL(p_t || q_t) vs cumulative identity integral",
            x_label: "t",
            y_label: "nats",
            log_x: false,
            log_y: false,
            csv_checksum: Some(fnv1a_hex(csv.as_bytes())),
        },
        &series,
    )?;
    finish(&r, &common.out, report.satisfied)
}

pub fn run_verify_bound(args: &BoundArgs) -> Result<bool> {
    let mut r = Resolver::new(args.common.config.as_deref())?;
    let mode = r.get("mode", args.mode.clone(), |s| Ok::<_, Error>(s.to_string()), "synthetic".into())?;
    r.note("command", "verify-bound");
    let common = resolve_common(&mut r, &args.common, 20_000)?;
    let cfg = mc_config(&common)?;
    std::fs::create_dir_all(&common.out)?;

    let mut rows: Vec<(String, crate::estimators::EstimatorReport)> = Vec::new();
    match mode.as_str() {
        "synthetic" => {
            let sid = r.get("schedule", args.schedule.clone(), |s| Ok::<_, Error>(s.to_string()), "a3".into())?;
            let schedule = Schedule::from_name(&sid)?;
            let betas_raw =
                r.get("betas", args.betas.clone(), |s| Ok::<_, Error>(s.to_string()), "0:0.2:0.025".into())?;
            for beta in parse_betas(&betas_raw)? {
                let field = crate::paths::perturbed_field(&schedule, beta, 2);
                let report = bound_check(&schedule, &field, &cfg)?;
                rows.push((format!("beta={beta:.3}"), report));
            }
        }
        "checkpoints" => {
            let sid = r.get("schedule", args.schedule.clone(), |s| Ok::<_, Error>(s.to_string()), "a1".into())?;
            let schedule = Schedule::from_name(&sid)?;
            let mut tcfg = TrainConfig { seed: common.seed, ..TrainConfig::default() };
            let ladder_raw =
                r.get("ladder", args.ladder.clone(), |s| Ok::<_, Error>(s.to_string()), String::new())?;
            if !ladder_raw.is_empty() {
                tcfg.ladder = parse_ladder(&ladder_raw)?;
            }
            let run_dir = args.run_dir.clone().unwrap_or_else(|| common.out.join("train"));
            r.note("run-dir", run_dir.display());
            let ladder = ladder_or_train(&run_dir, args.train, &schedule, &tcfg)?;
            for ckpt in &ladder {
                let net = ckpt.network()?;
                let report = bound_check(&schedule, &net, &cfg)?;
                rows.push((format!("step={}", ckpt.step), report));
            }
            rows.sort_by(|a, b| a.1.eps_total.total_cmp(&b.1.eps_total));
        }
        other => return Err(Error::Usage(format!("verify-bound mode {other:?}: expected synthetic or checkpoints"))),
    }

    let csv = bound_csv(&rows);
    write_atomic(&common.out.join("bound.csv"), csv.as_bytes())?;
    let series = vec![
        Series {
            label: "kl_terminal",
            points: rows.iter().map(|(_, x)| (x.eps_total, x.kl_terminal)).collect(),
            color: "#1f77b4",
        },
        Series {
            label: "bound_rhs",
            points: rows.iter().map(|(_, x)| (x.eps_total, x.bound_rhs)).collect(),
            color: "#d62728",
        },
    ];
    write_chart(
        &common.out.join("bound.svg"),
        &ChartSpec {
            title: "terminal KL vs eps * sqrt(S)",
            x_label: "eps_total",
            y_label: "nats",
            log_x: true,
            log_y: true,
            csv_checksum: Some(fnv1a_hex(csv.as_bytes())),
        },
        &series,
    )?;
    let satisfied = rows.iter().all(|(_, x)| x.satisfied);
    finish(&r, &common.out, satisfied)
}

pub fn run_train(args: &TrainArgs) -> Result<bool> {
    let mut r = Resolver::new(args.common.config.as_deref())?;
    r.note("command", "train");
    let common = resolve_common(&mut r, &args.common, 2)?;
    let sid = r.get("schedule", args.schedule.clone(), |s| Ok::<_, Error>(s.to_string()), "a2".into())?;
    let schedule = Schedule::from_name(&sid)?;
    let mut tcfg = TrainConfig { seed: common.seed, ..TrainConfig::default() };
    let ladder_raw =
        r.get("ladder", args.ladder.clone(), |s| Ok::<_, Error>(s.to_string()), String::new())?;
    if !ladder_raw.is_empty() {
        tcfg.ladder = parse_ladder(&ladder_raw)?;
    }
    tcfg.max_steps = r.get("max-steps", args.max_steps, str::parse, tcfg.max_steps)?;
    std::fs::create_dir_all(&common.out)?;
    let net = MlpVelocity::init(&MlpVelocity::default_widths(), common.seed)?;
    let run = train_direct_fm(&schedule, net, &tcfg, Some(&common.out))?;
    finish(&r, &common.out, run.final_val_mse <= tcfg.ladder[0])
}

pub fn run_counterexample(args: &CounterArgs) -> Result<bool> {
    let mut r = Resolver::new(args.common.config.as_deref())?;
    r.note("command", "counterexample");
    let common = resolve_common(&mut r, &args.common, 50_000)?;
    let m = r.get("M", args.m, str::parse, 1.0)?;
    let eps = r.get("eps", args.eps, str::parse, 0.01)?;
    let tau = r.get("tau", args.tau, str::parse, 0.5)?;
    let b_raw = r.get("b", args.b.clone(), |s| Ok::<_, Error>(s.to_string()), "1,0".into())?;
    let b = parse_vector(&b_raw)?;
    let spec = crate::counterexample::CounterexampleSpec::new(m, eps, b, tau)
        .map_err(|e| Error::Usage(e.to_string()))?;
    std::fs::create_dir_all(&common.out)?;
    let report = crate::counterexample::verify_counterexample(spec, common.n, common.seed)?;
    let json = serde_json::to_string_pretty(&report).map_err(|e| Error::Format(e.to_string()))?;
    write_atomic(&common.out.join("counterexample.json"), json.as_bytes())?;
    finish(&r, &common.out, true)
}

/// Run a parsed command; `Ok(true)` maps to exit 0, `Ok(false)` and every
/// error to nonzero.
pub fn run(cli: &Cli) -> Result<bool> {
    match &cli.command {
        Command::VerifyIdentity(a) => run_verify_identity(a),
        Command::VerifyBound(a) => run_verify_bound(a),
        Command::Train(a) => run_train(a),
        Command::Counterexample(a) => run_counterexample(a),
    }
}
