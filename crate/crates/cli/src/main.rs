use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use cdp_core::bench::{bench_cache, bench_csv, BenchConfig};
use cdp_core::checkpoint::Checkpoint;
use cdp_core::config::RunConfig;
use cdp_core::dataset::{read_jsonl, write_jsonl, Normalizer};
use cdp_core::envs::{gen_demos, DegradeSpec, Task};
use cdp_core::rollout::{evaluate, write_timing_csv, EvalPolicy, EvalSummary};
use cdp_core::training::{train, write_metrics_csv, TrainState};
use cdp_core::verify::{run_all, VerifyOptions};
use clap::{Parser, Subcommand, ValueEnum};
use serde_json::json;

#[derive(Parser)]
#[command(name = "cdp", version, about = "Causal action-diffusion policy toolkit")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Roll out the scripted expert and write successful episodes as JSON lines.
    GenDemos {
        #[arg(long)]
        task: Task,
        #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
        n: u64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Per-episode step cap; the task default when absent.
        #[arg(long)]
        max_steps: Option<usize>,
    },
    /// Train a policy on a demo file.
    Train {
        /// Run config JSON; built-in defaults when absent.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        demos: PathBuf,
        /// Checkpoint to write.
        #[arg(long)]
        out: PathBuf,
        /// Per-epoch metrics CSV.
        #[arg(long)]
        metrics: Option<PathBuf>,
        /// Continue from this checkpoint's weights, optimizer and step.
        #[arg(long)]
        resume: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        sigma: Option<f64>,
        #[arg(long)]
        batch_size: Option<usize>,
    },
    /// Closed-loop evaluation at one or more observation-noise levels.
    Eval {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = PolicyKind::Model)]
        policy: PolicyKind,
        /// Required for the expert policy when no checkpoint is given.
        #[arg(long)]
        task: Option<Task>,
        /// Observation noise scale; repeat for several rows.
        #[arg(long = "noise")]
        noise: Vec<f64>,
        #[arg(long)]
        dropout: Option<f64>,
        #[arg(long)]
        episodes: Option<usize>,
        #[arg(long)]
        max_steps: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        /// Recompute the full window at every denoising step.
        #[arg(long)]
        no_cache: bool,
        /// Results JSON.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Per-AR-step timing CSV over every episode.
        #[arg(long)]
        timing: Option<PathBuf>,
    },
    /// Per-AR-step latency with and without the history cache.
    BenchCache {
        #[arg(long, conflicts_with = "random_weights", required_unless_present = "random_weights")]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        random_weights: bool,
        /// History lengths to sweep.
        #[arg(long, value_delimiter = ',', default_values_t = [8usize, 16, 32, 64])]
        lens: Vec<usize>,
        #[arg(long, default_value_t = 50)]
        ar_steps: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        d_model: Option<usize>,
        #[arg(long)]
        n_blocks: Option<usize>,
        #[arg(long)]
        num_steps: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the built-in property suite.
    Verify {
        #[arg(long, hide = true)]
        corrupt_mask_fixture: bool,
    },
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum PolicyKind {
    Model,
    Expert,
}

/// Bad input (config, missing file) exits 2; everything else exits 1.
enum Failure {
    Input(anyhow::Error),
    Run(anyhow::Error),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Run(e)
    }
}

impl From<cdp_core::CdpError> for Failure {
    fn from(e: cdp_core::CdpError) -> Self {
        Failure::Run(e.into())
    }
}

fn input<T, E: Into<anyhow::Error>>(r: Result<T, E>) -> Result<T, Failure> {
    r.map_err(|e| Failure::Input(e.into()))
}

fn require_file(path: &Path, what: &str) -> Result<(), Failure> {
    if path.is_file() {
        Ok(())
    } else {
        Err(Failure::Input(anyhow!("{what} {} does not exist", path.display())))
    }
}

fn echo(label: &str, v: serde_json::Value) {
    println!("{label} {v}");
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let r = match cli.cmd {
        Cmd::GenDemos {
            task,
            n,
            seed,
            out,
            max_steps,
        } => cmd_gen_demos(task, n as usize, seed, &out, max_steps),
        Cmd::Train {
            config,
            demos,
            out,
            metrics,
            resume,
            epochs,
            seed,
            lr,
            sigma,
            batch_size,
        } => {
            let o = TrainOverrides {
                epochs,
                seed,
                lr,
                sigma,
                batch_size,
            };
            cmd_train(config.as_deref(), &demos, &out, metrics.as_deref(), resume.as_deref(), &o)
        }
        Cmd::Eval {
            checkpoint,
            policy,
            task,
            noise,
            dropout,
            episodes,
            max_steps,
            seed,
            no_cache,
            out,
            timing,
        } => cmd_eval(EvalArgs {
            checkpoint,
            policy,
            task,
            noise,
            dropout,
            episodes,
            max_steps,
            seed,
            no_cache,
            out,
            timing,
        }),
        Cmd::BenchCache {
            checkpoint,
            random_weights: _,
            lens,
            ar_steps,
            seed,
            d_model,
            n_blocks,
            num_steps,
            out,
        } => {
            let mut cfg = BenchConfig {
                history_lens: lens,
                ar_steps,
                seed,
                ..BenchConfig::default()
            };
            if let Some(d) = d_model {
                cfg.d_model = d;
                cfg.d_ff = 4 * d;
            }
            cfg.n_blocks = n_blocks.unwrap_or(cfg.n_blocks);
            cfg.num_steps = num_steps.unwrap_or(cfg.num_steps);
            cmd_bench(cfg, checkpoint.as_deref(), out.as_deref())
        }
        Cmd::Verify {
            corrupt_mask_fixture,
        } => cmd_verify(corrupt_mask_fixture),
    };
    match r {
        Ok(code) => code,
        Err(Failure::Input(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
        Err(Failure::Run(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

fn cmd_gen_demos(task: Task, n: usize, seed: u64, out: &Path, max_steps: Option<usize>) -> Result<ExitCode, Failure> {
    let max_steps = max_steps.unwrap_or(task.default_max_steps());
    echo(
        "config",
        json!({"command": "gen-demos", "task": task, "n": n, "seed": seed, "max_steps": max_steps, "out": out}),
    );
    let eps = gen_demos(task, n, seed, max_steps)?;
    write_jsonl(out, &eps).with_context(|| format!("writing {}", out.display()))?;
    let mean = eps.iter().map(|e| e.len()).sum::<usize>() as f64 / eps.len() as f64;
    println!("wrote {} episodes (mean length {mean:.1}) to {}", eps.len(), out.display());
    Ok(ExitCode::SUCCESS)
}

struct TrainOverrides {
    epochs: Option<usize>,
    seed: Option<u64>,
    lr: Option<f64>,
    sigma: Option<f64>,
    batch_size: Option<usize>,
}

fn cmd_train(
    config: Option<&Path>,
    demos: &Path,
    out: &Path,
    metrics: Option<&Path>,
    resume: Option<&Path>,
    o: &TrainOverrides,
) -> Result<ExitCode, Failure> {
    let mut cfg = match config {
        Some(p) => {
            require_file(p, "config")?;
            input(RunConfig::load(p))?
        }
        None => RunConfig::default(),
    };
    let t = &mut cfg.train;
    t.epochs = o.epochs.unwrap_or(t.epochs);
    t.seed = o.seed.unwrap_or(t.seed);
    t.learning_rate = o.lr.unwrap_or(t.learning_rate);
    t.sigma = o.sigma.unwrap_or(t.sigma);
    t.batch_size = o.batch_size.unwrap_or(t.batch_size);
    input(cfg.validate())?;
    echo("config", serde_json::from_str(&cfg.canonical_json()).expect("canonical JSON parses"));

    require_file(demos, "demo file")?;
    let episodes = input(read_jsonl(demos))?;
    let model_cfg = cfg.model_config()?;
    for (i, e) in episodes.iter().enumerate() {
        input(e.validate(model_cfg.obs_dim, model_cfg.action_dim).with_context(|| format!("demo {i}")))?;
    }

    let state = match resume {
        Some(p) => {
            require_file(p, "checkpoint")?;
            let ck = input(Checkpoint::load(p))?;
            input(ck.check_config(&cfg))?;
            let st = ck.train_state()?;
            println!("resuming from step {}", st.step);
            st
        }
        None => {
            let norm = input(Normalizer::fit(&episodes, model_cfg.action_dim))?;
            TrainState::fresh(model_cfg, norm, cfg.train.seed)?
        }
    };
    let (state, rows) = train(&episodes, &cfg.train, state, |m| {
        println!("epoch {} loss {:.6} val_loss {:.6}", m.epoch, m.loss, m.val_loss);
    })?;
    Checkpoint::from_state(&cfg, &state, true)
        .save(out)
        .with_context(|| format!("writing {}", out.display()))?;
    if let Some(p) = metrics {
        write_metrics_csv(p, &rows)?;
    }
    println!("saved checkpoint at step {} to {}", state.step, out.display());
    Ok(ExitCode::SUCCESS)
}

struct EvalArgs {
    checkpoint: Option<PathBuf>,
    policy: PolicyKind,
    task: Option<Task>,
    noise: Vec<f64>,
    dropout: Option<f64>,
    episodes: Option<usize>,
    max_steps: Option<usize>,
    seed: Option<u64>,
    no_cache: bool,
    out: Option<PathBuf>,
    timing: Option<PathBuf>,
}

fn cmd_eval(a: EvalArgs) -> Result<ExitCode, Failure> {
    let ck = match &a.checkpoint {
        Some(p) => {
            require_file(p, "checkpoint")?;
            Some(input(Checkpoint::load(p))?)
        }
        None if a.policy == PolicyKind::Model => {
            return Err(Failure::Input(anyhow!("--checkpoint is required for the model policy")));
        }
        None => None,
    };
    let mut cfg = ck.as_ref().map_or_else(RunConfig::default, |c| c.config.clone());
    if let Some(t) = a.task {
        if ck.is_some() && t != cfg.task {
            return Err(Failure::Input(anyhow!("--task {t:?} does not match checkpoint task {:?}", cfg.task)));
        }
        if ck.is_none() {
            cfg.task = t;
            cfg.eval.max_steps = t.default_max_steps();
        }
    } else if ck.is_none() {
        return Err(Failure::Input(anyhow!("--task is required without a checkpoint")));
    }
    let e = &mut cfg.eval;
    e.episodes = a.episodes.unwrap_or(e.episodes);
    e.max_steps = a.max_steps.unwrap_or(e.max_steps);
    e.seed = a.seed.unwrap_or(e.seed);
    e.dropout_prob = a.dropout.unwrap_or(e.dropout_prob);
    e.use_cache = e.use_cache && !a.no_cache;
    let noises = if a.noise.is_empty() { vec![e.noise_scale] } else { a.noise.clone() };
    for &n in &noises {
        let mut c = cfg.clone();
        c.eval.noise_scale = n;
        input(c.validate())?;
    }
    echo(
        "config",
        json!({
            "command": "eval",
            "policy": match a.policy { PolicyKind::Model => "model", PolicyKind::Expert => "expert" },
            "run": serde_json::from_str::<serde_json::Value>(&cfg.canonical_json()).expect("canonical JSON parses"),
            "noise": noises,
        }),
    );

    let model = ck.as_ref().map(|c| c.model()).transpose()?;
    let mut rows: Vec<EvalSummary> = Vec::new();
    let mut timings = Vec::new();
    for &n in &noises {
        let degrade = DegradeSpec {
            noise_scale: n,
            dropout_prob: cfg.eval.dropout_prob,
        };
        let policy = match (&a.policy, &model, &ck) {
            (PolicyKind::Model, Some(m), Some(c)) => EvalPolicy::Model {
                model: m,
                normalizer: &c.normalizer,
                use_cache: cfg.eval.use_cache,
            },
            _ => EvalPolicy::Expert,
        };
        let (summary, results) = evaluate(cfg.task, policy, cfg.eval.episodes, cfg.eval.seed, cfg.eval.max_steps, &degrade)?;
        println!("{}", serde_json::to_string(&summary).expect("summary serializes"));
        rows.push(summary);
        timings.extend(results.into_iter().flat_map(|r| r.timings));
    }
    if let Some(p) = &a.out {
        std::fs::write(p, serde_json::to_string_pretty(&rows).expect("rows serialize"))
            .with_context(|| format!("writing {}", p.display()))?;
    }
    if let Some(p) = &a.timing {
        write_timing_csv(p, &timings)?;
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_bench(cfg: BenchConfig, checkpoint: Option<&Path>, out: Option<&Path>) -> Result<ExitCode, Failure> {
    let model = match checkpoint {
        Some(p) => {
            require_file(p, "checkpoint")?;
            Some(input(Checkpoint::load(p))?.model()?)
        }
        None => None,
    };
    echo(
        "config",
        json!({"command": "bench-cache", "bench": cfg, "checkpoint": checkpoint}),
    );
    let rows = bench_cache(&cfg, model.as_ref())?;
    let csv = bench_csv(&rows);
    print!("{csv}");
    for r in &rows {
        if r.first_step_diff > 1e-4 {
            return Err(Failure::Run(anyhow!(
                "cached and uncached actions disagree at L={} (max diff {:e})",
                r.history_len,
                r.first_step_diff
            )));
        }
    }
    if let Some(p) = out {
        std::fs::write(p, csv).with_context(|| format!("writing {}", p.display()))?;
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_verify(corrupt_mask: bool) -> Result<ExitCode, Failure> {
    echo("config", json!({"command": "verify", "corrupt_mask_fixture": corrupt_mask}));
    let checks = run_all(&VerifyOptions { corrupt_mask });
    for c in &checks {
        println!("{}", c.line());
    }
    let failed = checks.iter().filter(|c| !c.passed).count();
    println!("{} properties, {failed} failed", checks.len());
    Ok(if failed == 0 { ExitCode::SUCCESS } else { ExitCode::from(1) })
}
