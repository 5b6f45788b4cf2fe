//! Command-line front end: `pretrain`, `rl`, `verify`, `sample` and `report`.
//!
//! Exit codes: 0 ok, 1 usage, 2 config, 3 runtime, 4 verification failed.

mod chart;

use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand};
use serde_json::json;

use awmlab::config::{parse_config, ResolvedConfig, Task, TaskKind};
use awmlab::metrics::{format_value, MetricRecord, MetricTable, MetricWriter};
use awmlab::net::{self as checkpoint, VelocityNet};
use awmlab::pretrain::pretrain_run;
use awmlab::rl::{rl_train_with, RL_COLUMNS};
use awmlab::sampler::{builtin_step_rules, rollout_batch, step_rule, TimeGrid, DEFAULT_T_MIN, DEFAULT_T_START};
use awmlab::varlab::{run_verification_suite, write_reports_csv};

pub const EXIT_USAGE: u8 = 1;
pub const EXIT_CONFIG: u8 = 2;
pub const EXIT_RUNTIME: u8 = 3;
pub const EXIT_VERIFY: u8 = 4;

pub const METRICS_FILE: &str = "metrics.csv";
pub const CONFIG_FILE: &str = "config.toml";
pub const MODEL_FILE: &str = "model.ckpt";
pub const SUMMARY_FILE: &str = "summary.json";
pub const REPORT_FILE: &str = "report.csv";

#[derive(Debug, Parser)]
#[command(name = "awmlab", version, about = "Flow-matching pretraining, RL post-training and Monte-Carlo checks on Gaussian mixtures")]
pub struct Cli {
    /// Root for run directories when neither -o nor the config names one.
    #[arg(long, env = "AWMLAB_OUT", global = true, default_value = "runs")]
    out_root: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct RunArgs {
    /// Experiment config (TOML); built-in defaults when omitted.
    #[arg(short, long)]
    config: Option<PathBuf>,
    /// Run directory.
    #[arg(short, long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Pretrain a velocity net on a mixture preset.
    Pretrain(RunArgs),
    /// RL post-training from a pretrained checkpoint.
    Rl {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Run the Monte-Carlo verification suite.
    Verify(RunArgs),
    /// Draw samples from a checkpoint as CSV.
    Sample {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(short, default_value_t = 1000)]
        n: usize,
        #[arg(long, default_value = "ode", value_parser = step_rule_names)]
        mode: String,
        #[arg(long, default_value_t = 20)]
        steps: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 0)]
        class: usize,
        /// Output file; stdout when omitted.
        #[arg(short, long)]
        out: Option<PathBuf>,
    },
    /// Overlay metric curves of several runs and tabulate final values.
    Report {
        #[arg(short, long = "input", value_delimiter = ',', required = true)]
        inputs: Vec<PathBuf>,
        #[arg(short, long)]
        out: PathBuf,
    },
}

fn step_rule_names(name: &str) -> Result<String, String> {
    let rules = builtin_step_rules();
    if rules.contains(name) {
        Ok(name.to_string())
    } else {
        Err(format!("expected one of: {}", rules.names().join(", ")))
    }
}

/// A failed command together with its exit code.
#[derive(Debug)]
pub enum Failure {
    Usage(anyhow::Error),
    Config(anyhow::Error),
    Runtime(anyhow::Error),
    Verification { failed: usize, total: usize },
}

impl Failure {
    pub fn code(&self) -> u8 {
        match self {
            Self::Usage(_) => EXIT_USAGE,
            Self::Config(_) => EXIT_CONFIG,
            Self::Runtime(_) => EXIT_RUNTIME,
            Self::Verification { .. } => EXIT_VERIFY,
        }
    }

    /// Library config errors raised mid-run still count as config failures.
    fn runtime(e: impl Into<anyhow::Error>) -> Self {
        let e = e.into();
        let is_config = e.chain().any(|c| {
            matches!(
                c.downcast_ref::<awmlab::Error>(),
                Some(awmlab::Error::Config(_) | awmlab::Error::UnknownStrategy { .. })
            )
        });
        if is_config {
            Self::Config(e)
        } else {
            Self::Runtime(e)
        }
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Usage(e) | Self::Config(e) | Self::Runtime(e) => {
                // Library messages often embed their source already; skip repeats.
                let mut shown = String::new();
                for cause in e.chain() {
                    let msg = cause.to_string();
                    if shown.contains(&msg) {
                        continue;
                    }
                    if !shown.is_empty() {
                        shown.push_str(": ");
                    }
                    shown.push_str(&msg);
                }
                f.write_str(&shown)
            }
            Self::Verification { failed, total } => {
                write!(f, "verification failed: {failed} of {total} checks did not pass")
            }
        }
    }
}

type CmdResult = Result<(), Failure>;

trait OrRuntime<T> {
    fn runtime(self) -> Result<T, Failure>;
}

impl<T, E: Into<anyhow::Error>> OrRuntime<T> for Result<T, E> {
    fn runtime(self) -> Result<T, Failure> {
        self.map_err(Failure::runtime)
    }
}

pub fn run(cli: Cli) -> CmdResult {
    match cli.command {
        Command::Pretrain(a) => cmd_pretrain(&a, &cli.out_root),
        Command::Rl { run, checkpoint } => cmd_rl(&run, checkpoint.as_deref(), &cli.out_root),
        Command::Verify(a) => cmd_verify(&a, &cli.out_root),
        Command::Sample {
            checkpoint,
            n,
            mode,
            steps,
            seed,
            class,
            out,
        } => cmd_sample(&checkpoint, n, &mode, steps, seed, class, out.as_deref()),
        Command::Report { inputs, out } => cmd_report(&inputs, &out),
    }
}

fn load_config(args: &RunArgs, kind: TaskKind) -> Result<ResolvedConfig, Failure> {
    let cfg = match &args.config {
        Some(p) => parse_config(p)
            .with_context(|| format!("loading {}", p.display()))
            .map_err(Failure::Config)?,
        None => ResolvedConfig::default_for(kind.clone()),
    };
    if cfg.task.kind() != kind {
        return Err(Failure::Config(anyhow!(
            "config describes a [{}] run but the command is '{}'",
            cfg.task.kind().section(),
            kind.section()
        )));
    }
    Ok(cfg)
}

/// `-o` beats the config's `output`, which beats `<out_root>/<name>`.
fn prepare_run_dir(args: &RunArgs, cfg: &ResolvedConfig, out_root: &Path) -> Result<PathBuf, Failure> {
    let dir = args
        .out
        .clone()
        .or_else(|| cfg.output.clone())
        .unwrap_or_else(|| out_root.join(&cfg.name));
    fs::create_dir_all(&dir)
        .with_context(|| format!("creating {}", dir.display()))
        .runtime()?;
    let text = cfg.to_toml().runtime()?;
    fs::write(dir.join(CONFIG_FILE), text)
        .with_context(|| format!("writing {}", dir.join(CONFIG_FILE).display()))
        .runtime()?;
    Ok(dir)
}

fn write_summary(dir: &Path, value: &serde_json::Value) -> CmdResult {
    let text = serde_json::to_string_pretty(value).runtime()?;
    fs::write(dir.join(SUMMARY_FILE), text + "\n").runtime()
}

fn json_f64(v: f64) -> serde_json::Value {
    if v.is_finite() {
        json!(v)
    } else {
        serde_json::Value::Null
    }
}

fn cmd_pretrain(args: &RunArgs, out_root: &Path) -> CmdResult {
    let cfg = load_config(args, TaskKind::Pretrain)?;
    let Task::Pretrain(p) = &cfg.task else { unreachable!("kind checked") };
    let dir = prepare_run_dir(args, &cfg, out_root)?;
    let outcome = pretrain_run(p).runtime()?;
    let mut w = MetricWriter::create(
        &dir.join(METRICS_FILE),
        "pretrain-metrics",
        "step",
        &["loss", "oracle_mse", "wall_ms"],
    )
    .runtime()?;
    for r in &outcome.records {
        w.append(&MetricRecord {
            step: r.step,
            values: vec![r.loss, r.oracle_mse, r.wall_ms],
        })
        .runtime()?;
    }
    w.flush().runtime()?;
    checkpoint::save(&outcome.net, &dir.join(MODEL_FILE)).runtime()?;
    write_summary(
        &dir,
        &json!({
            "name": cfg.name,
            "task": "pretrain",
            "seed": p.seed,
            "target": p.target,
            "steps_run": outcome.records.len(),
            "final_oracle_mse": json_f64(outcome.final_oracle_mse),
            "final_sliced_w1": outcome.final_w1.map(json_f64),
            "param_count": outcome.net.param_count(),
        }),
    )?;
    eprintln!(
        "pretrain '{}': {} steps, oracle mse {:.4} -> {}",
        cfg.name,
        outcome.records.len(),
        outcome.final_oracle_mse,
        dir.display()
    );
    Ok(())
}

fn cmd_rl(args: &RunArgs, ckpt: Option<&Path>, out_root: &Path) -> CmdResult {
    let ckpt = ckpt.ok_or_else(|| Failure::Usage(anyhow!("checkpoint required: pass --checkpoint <path>")))?;
    let cfg = load_config(args, TaskKind::Rl)?;
    let Task::Rl(rl) = &cfg.task else { unreachable!("kind checked") };
    let net = checkpoint::load(ckpt)
        .with_context(|| format!("loading checkpoint {}", ckpt.display()))
        .runtime()?;
    let dir = prepare_run_dir(args, &cfg, out_root)?;
    let ckpt_dir = dir.join("checkpoints");
    let mut w = MetricWriter::create(&dir.join(METRICS_FILE), "rl-metrics", "iter", &RL_COLUMNS).runtime()?;
    let mut observer = |rec: &awmlab::rl::RlRecord, net: &VelocityNet, save: bool| -> awmlab::Result<()> {
        w.append(&MetricRecord {
            step: rec.iter,
            values: rec.values(),
        })?;
        w.flush()?;
        if save {
            fs::create_dir_all(&ckpt_dir).map_err(|e| awmlab::Error::Io {
                path: ckpt_dir.clone(),
                source: e,
            })?;
            checkpoint::save(net, &ckpt_dir.join(format!("iter_{:05}.ckpt", rec.iter)))?;
        }
        Ok(())
    };
    let outcome = rl_train_with(rl, net, &mut observer).runtime()?;
    checkpoint::save(&outcome.net, &dir.join(MODEL_FILE)).runtime()?;
    let last = outcome.records.last();
    write_summary(
        &dir,
        &json!({
            "name": cfg.name,
            "task": "rl",
            "algorithm": rl.algorithm,
            "seed": rl.seed,
            "iterations_run": outcome.records.len(),
            "final_mean_reward": last.map(|r| json_f64(r.mean_reward)),
            "final_mean_kl": last.map(|r| json_f64(r.mean_kl)),
            "first_iter_reward_0.8": outcome.first_iter_reaching(0.8),
            "first_iter_reward_0.9": outcome.first_iter_reaching(0.9),
        }),
    )?;
    eprintln!(
        "rl '{}' ({}): {} iterations, final mean reward {:.3} -> {}",
        cfg.name,
        rl.algorithm,
        outcome.records.len(),
        last.map_or(f64::NAN, |r| r.mean_reward),
        dir.display()
    );
    Ok(())
}

fn cmd_verify(args: &RunArgs, out_root: &Path) -> CmdResult {
    let cfg = load_config(args, TaskKind::Verify)?;
    let Task::Verify(v) = &cfg.task else { unreachable!("kind checked") };
    let dir = prepare_run_dir(args, &cfg, out_root)?;
    let outcome = run_verification_suite(v).runtime()?;
    write_reports_csv(&dir.join(REPORT_FILE), &outcome.reports).runtime()?;
    let failed: Vec<&str> = outcome.failures().map(|r| r.quantity.as_str()).collect();
    write_summary(
        &dir,
        &json!({
            "name": cfg.name,
            "task": "verify",
            "seed": v.seed,
            "checks": outcome.reports.len(),
            "failed": failed,
        }),
    )?;
    for r in outcome.failures() {
        eprintln!(
            "FAIL {}: estimate {} vs {} (stderr {}, tol {})",
            r.quantity, r.estimate, r.analytic, r.stderr, r.tol
        );
    }
    eprintln!(
        "verify '{}': {}/{} checks passed -> {}",
        cfg.name,
        outcome.reports.len() - failed.len(),
        outcome.reports.len(),
        dir.display()
    );
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Failure::Verification {
            failed: failed.len(),
            total: outcome.reports.len(),
        })
    }
}

fn cmd_sample(
    ckpt: &Path,
    n: usize,
    mode: &str,
    steps: usize,
    seed: u64,
    class: usize,
    out: Option<&Path>,
) -> CmdResult {
    if n == 0 || steps == 0 {
        return Err(Failure::Usage(anyhow!("-n and --steps must be positive")));
    }
    let net = checkpoint::load(ckpt)
        .with_context(|| format!("loading checkpoint {}", ckpt.display()))
        .runtime()?;
    if class >= net.arch().num_classes {
        return Err(Failure::Usage(anyhow!(
            "--class {class} exceeds the net's {} classes",
            net.arch().num_classes
        )));
    }
    let rule = step_rule(mode).runtime()?;
    let grid = TimeGrid::uniform(steps, DEFAULT_T_START, DEFAULT_T_MIN).runtime()?;
    let trajs = rollout_batch(&net, &grid, rule.as_ref(), &vec![class; n], seed, 0).runtime()?;
    let d = net.arch().dim;
    let mut text = String::from("# schema: samples v1\nindex,class");
    for j in 0..d {
        text.push_str(&format!(",x{j}"));
    }
    text.push('\n');
    for tr in &trajs {
        text.push_str(&format!("{},{}", tr.index, tr.class));
        for v in &tr.sample {
            text.push(',');
            text.push_str(&format_value(*v));
        }
        text.push('\n');
    }
    match out {
        Some(p) => fs::write(p, text)
            .with_context(|| format!("writing {}", p.display()))
            .runtime(),
        None => std::io::stdout().write_all(text.as_bytes()).runtime(),
    }
}

/// Label of a run directory: the config name when present, else the directory name.
fn run_label(dir: &Path) -> String {
    parse_config(&dir.join(CONFIG_FILE))
        .map(|c| c.name)
        .unwrap_or_else(|_| {
            dir.file_name()
                .map_or_else(|| dir.display().to_string(), |n| n.to_string_lossy().into_owned())
        })
}

fn cmd_report(inputs: &[PathBuf], out: &Path) -> CmdResult {
    let mut runs = Vec::new();
    for dir in inputs {
        let table = MetricTable::read(&dir.join(METRICS_FILE))
            .with_context(|| format!("reading metrics of {}", dir.display()))
            .runtime()?;
        runs.push((run_label(dir), table));
    }
    fs::create_dir_all(out)
        .with_context(|| format!("creating {}", out.display()))
        .runtime()?;
    let charts = chart::write_charts(&runs, out).runtime()?;
    let summary = chart::summary_rows(&runs);
    let mut csv = String::from("run,schema,metric,last_step,final,min,max\n");
    let mut md = String::from("| run | metric | last step | final | min | max |\n|---|---|---|---|---|---|\n");
    for r in &summary {
        csv.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            r.run,
            r.schema,
            r.metric,
            r.last_step,
            format_value(r.last),
            format_value(r.min),
            format_value(r.max)
        ));
        md.push_str(&format!(
            "| {} | {} | {} | {} | {} | {} |\n",
            r.run,
            r.metric,
            r.last_step,
            chart::fmt_short(r.last),
            chart::fmt_short(r.min),
            chart::fmt_short(r.max)
        ));
    }
    md.push_str("\nCharts:\n\n");
    for c in &charts {
        md.push_str(&format!("- [{c}]({c})\n"));
    }
    fs::write(out.join("summary.csv"), csv).runtime()?;
    fs::write(out.join("summary.md"), md).runtime()?;
    eprintln!("report: {} runs, {} charts -> {}", runs.len(), charts.len(), out.display());
    Ok(())
}
