//! `lightnl` command-line driver.
//!
//! Every subcommand prints one JSON document `{"status": "ok"|"fail",
//! "command": .., "payload": ..}` (or the payload's CSV form under
//! `--format csv`) and exits with 1 when anything failed. Files under `--out`
//! are written atomically.

mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use serde_json::{json, Value};

use lightnl::cost::{table1_ladder, ShapeSpec};
use lightnl::search::{ArchDescription, ArchMeta};
use lightnl::supernet::Network;
use lightnl::tensor::gradcheck::DEFAULT_TOLERANCE;
use lightnl::train::{evaluate, search, train, History};
use lightnl::verify::{grad_suite, nl_equiv};
use lightnl::write_atomic;

use config::{RunConfig, Task};

#[derive(Debug, Parser)]
#[command(
    name = "lightnl",
    version,
    about = "Lightweight non-local blocks: checks, cost reports, search and training"
)]
struct Cli {
    /// Seed for every random choice; overrides the config file.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// JSON run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Directory for output files.
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    #[arg(long, global = true, value_enum, default_value_t = Format::Json)]
    format: Format,

    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Format {
    Json,
    Csv,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Finite-difference check of every differentiable op.
    GradCheck {
        #[arg(long, default_value_t = DEFAULT_TOLERANCE)]
        tolerance: f64,
        /// Corrupt the backward pass of the named case.
        #[arg(long, hide = true)]
        inject_fault: Option<String>,
    },
    /// Associativity, reduction and reuse equivalences of the non-local forms.
    NlEquiv,
    /// Cost ladder of the non-local variants, or the cost of one architecture.
    FlopsReport {
        /// Site shapes JSON; defaults to the bundled MobileNetV2-1.0 shapes.
        #[arg(long, conflicts_with = "arch")]
        shapes: Option<PathBuf>,
        /// Architecture JSON.
        #[arg(long)]
        arch: Option<PathBuf>,
    },
    /// Trains a supernet and derives an architecture.
    Search {
        /// `longrange`, `mnist` or an MNIST directory.
        #[arg(long)]
        data: String,
        #[arg(long)]
        lambda: Option<f64>,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Derives an architecture from a saved supernet.
    Derive {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Task whose backbone the supernet was built on.
        #[arg(long)]
        data: String,
        /// Search steps to record in the architecture's metadata.
        #[arg(long, default_value_t = 0)]
        steps: u64,
    },
    /// Trains a plain, manual-LightNL or derived architecture.
    Train {
        /// `plain`, `manual` or an architecture JSON file.
        #[arg(long)]
        arch: String,
        #[arg(long)]
        data: String,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Evaluates an architecture on the test split.
    Eval {
        #[arg(long)]
        arch: String,
        #[arg(long)]
        data: String,
        /// Trained weights; fresh initialization when absent.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::GradCheck { .. } => "grad-check",
            Command::NlEquiv => "nl-equiv",
            Command::FlopsReport { .. } => "flops-report",
            Command::Search { .. } => "search",
            Command::Derive { .. } => "derive",
            Command::Train { .. } => "train",
            Command::Eval { .. } => "eval",
        }
    }
}

/// Result of one command before rendering.
struct Outcome {
    ok: bool,
    payload: Value,
    csv: Option<String>,
}

impl Outcome {
    fn ok(payload: Value) -> Self {
        Outcome {
            ok: true,
            payload,
            csv: None,
        }
    }

    fn with_csv(mut self, csv: String) -> Self {
        self.csv = Some(csv);
        self
    }
}

struct Ctx {
    cfg: RunConfig,
    out: Option<PathBuf>,
}

impl Ctx {
    fn write(&self, name: &str, bytes: &[u8]) -> Result<()> {
        if let Some(dir) = &self.out {
            write_atomic(&dir.join(name), bytes)?;
        }
        Ok(())
    }

    fn seed(&self) -> u64 {
        self.cfg.train.seed
    }
}

fn load_arch(arg: &str, task: &Task, preset: Option<&str>) -> Result<ArchDescription> {
    Ok(match arg {
        "plain" => ArchDescription::plain(&task.network(preset)?),
        "manual" => ArchDescription::manual(&task.network(preset)?)?,
        path => {
            let text = std::fs::read_to_string(path).with_context(|| format!("reading {path}"))?;
            ArchDescription::from_json(&text)?
        }
    })
}

fn history_payload(h: &History) -> Value {
    json!({ "epochs": h.rows })
}

fn run(cmd: &Command, ctx: &Ctx) -> Result<Outcome> {
    let cfg = &ctx.cfg;
    match cmd {
        Command::GradCheck {
            tolerance,
            inject_fault,
        } => {
            let suite = grad_suite(ctx.seed(), *tolerance, inject_fault.as_deref())?;
            let entries: Vec<Value> = suite
                .entries
                .iter()
                .map(|e| json!({ "name": e.name, "max_rel_error": e.max_rel_error(), "passed": e.passed() }))
                .collect();
            let mut csv = String::from("name,max_rel_error,passed\n");
            for e in &suite.entries {
                csv.push_str(&format!(
                    "{},{:e},{}\n",
                    e.name,
                    e.max_rel_error(),
                    e.passed()
                ));
            }
            let payload = json!({
                "tolerance": suite.tolerance,
                "max_rel_error": suite.max_rel_error(),
                "entries": entries,
            });
            ctx.write(
                "grad_check.json",
                serde_json::to_string_pretty(&payload)?.as_bytes(),
            )?;
            Ok(Outcome {
                ok: suite.passed(),
                payload,
                csv: Some(csv),
            })
        }
        Command::NlEquiv => {
            let report = nl_equiv(ctx.seed())?;
            let mut csv = String::from("suite,trials,max_deviation,tolerance,failures\n");
            for s in &report.suites {
                csv.push_str(&format!(
                    "{},{},{:e},{:e},{}\n",
                    s.name, s.trials, s.max_deviation, s.tolerance, s.failures
                ));
            }
            let payload = serde_json::to_value(&report)?;
            ctx.write(
                "nl_equiv.json",
                serde_json::to_string_pretty(&payload)?.as_bytes(),
            )?;
            Ok(Outcome {
                ok: report.passed(),
                payload,
                csv: Some(csv),
            })
        }
        Command::FlopsReport { shapes, arch } => {
            if let Some(path) = arch {
                let text = std::fs::read_to_string(path)
                    .with_context(|| format!("reading {}", path.display()))?;
                let arch = ArchDescription::from_json(&text)?;
                let report = arch.backbone.flops_report(&arch.site_configs())?;
                let backbone = arch.backbone.backbone_flops()?;
                let csv = report.to_csv();
                ctx.write("flops.csv", csv.as_bytes())?;
                let payload = json!({
                    "total": report.total,
                    "backbone": backbone,
                    "inserted": report.total - backbone,
                    "entries": report.entries,
                });
                return Ok(Outcome::ok(payload).with_csv(csv));
            }
            let spec = match shapes {
                Some(path) => {
                    let text = std::fs::read_to_string(path)
                        .with_context(|| format!("reading {}", path.display()))?;
                    ShapeSpec::from_json(&text)?
                }
                None => ShapeSpec::mobilenetv2_224(),
            };
            let ladder = table1_ladder(&spec)?;
            let csv = ladder.to_csv();
            ctx.write("ladder.csv", csv.as_bytes())?;
            Ok(Outcome::ok(serde_json::to_value(&ladder)?).with_csv(csv))
        }
        Command::Search {
            data,
            lambda,
            epochs,
        } => {
            let task = Task::parse(data, &cfg.data);
            let spec = task.network(cfg.network.as_deref())?;
            let mut tc = cfg.train.clone();
            if let Some(l) = lambda {
                tc.search.lambda = *l;
            }
            if let Some(e) = epochs {
                tc.epochs = *e;
            }
            let (train_set, _) = task.load(&cfg.data, tc.seed)?;
            let outcome = search(spec, &train_set, None, &tc)?;
            let arch_json = outcome.arch.to_json()?;
            ctx.write("arch.json", arch_json.as_bytes())?;
            ctx.write("history.csv", outcome.history.to_csv().as_bytes())?;
            ctx.write(
                "cost_trajectory.csv",
                outcome.history.steps_csv().as_bytes(),
            )?;
            if let Some(dir) = &ctx.out {
                outcome.supernet.save(&dir.join("supernet.ckpt"))?;
            }
            let payload = json!({
                "inserts": outcome.arch.inserts(),
                "madds": outcome.arch.madds()?,
                "arch": outcome.arch,
                "history": history_payload(&outcome.history),
            });
            Ok(Outcome::ok(payload).with_csv(outcome.history.steps_csv()))
        }
        Command::Derive {
            checkpoint,
            data,
            steps,
        } => {
            let task = Task::parse(data, &cfg.data);
            let spec = task.network(cfg.network.as_deref())?;
            let s = &cfg.train.search;
            let mut net = Network::supernet(spec, s.clone(), s.wd_init_std, ctx.seed())?;
            net.load(checkpoint)?;
            let arch = net.derive(ArchMeta {
                seed: ctx.seed(),
                lambda: s.lambda,
                steps: *steps,
            })?;
            ctx.write("arch.json", arch.to_json()?.as_bytes())?;
            Ok(Outcome::ok(json!({
                "inserts": arch.inserts(),
                "madds": arch.madds()?,
                "arch": arch,
            })))
        }
        Command::Train { arch, data, epochs } => {
            let task = Task::parse(data, &cfg.data);
            let arch = load_arch(arch, &task, cfg.network.as_deref())?;
            let mut tc = cfg.train.clone();
            if let Some(e) = epochs {
                tc.epochs = *e;
            }
            let (train_set, test_set) = task.load(&cfg.data, tc.seed)?;
            let mut net = Network::realize(&arch, 0.0, tc.seed)?;
            let history = train(&mut net, &train_set, Some(&test_set), &tc)?;
            let csv = history.to_csv();
            ctx.write("metrics.csv", csv.as_bytes())?;
            ctx.write("arch.json", arch.to_json()?.as_bytes())?;
            if let Some(dir) = &ctx.out {
                net.save(&dir.join("model.ckpt"))?;
            }
            let test = history.last(&test_set.split).map(|r| r.top1);
            Ok(Outcome::ok(json!({
                "inserts": arch.inserts(),
                "madds": arch.madds()?,
                "test_top1": test,
                "history": history_payload(&history),
            }))
            .with_csv(csv))
        }
        Command::Eval {
            arch,
            data,
            checkpoint,
        } => {
            let task = Task::parse(data, &cfg.data);
            let arch = load_arch(arch, &task, cfg.network.as_deref())?;
            let (_, test_set) = task.load(&cfg.data, ctx.seed())?;
            let mut net = Network::realize(&arch, 0.0, ctx.seed())?;
            if let Some(path) = checkpoint {
                net.load(path)?;
            }
            let m = evaluate(&net, &test_set, cfg.train.batch_size)?;
            let csv = format!(
                "split,loss,top1\n{},{},{}\n",
                test_set.split, m.loss, m.top1
            );
            ctx.write("eval.csv", csv.as_bytes())?;
            Ok(Outcome::ok(json!({
                "split": test_set.split,
                "count": test_set.len(),
                "top1": m.top1,
                "loss": m.loss,
                "madds": arch.madds()?,
            }))
            .with_csv(csv))
        }
    }
}

fn execute(cli: &Cli) -> Result<Outcome> {
    let mut cfg = RunConfig::load(cli.config.as_deref())?;
    if let Some(seed) = cli.seed {
        cfg.train.seed = seed;
    }
    if let Some(dir) = &cli.out {
        if dir.exists() && !dir.is_dir() {
            bail!("--out {} is not a directory", dir.display());
        }
    }
    let ctx = Ctx {
        cfg,
        out: cli.out.clone(),
    };
    run(&cli.command, &ctx)
}

fn render(cli: &Cli, outcome: &Outcome) -> String {
    match (&outcome.csv, cli.format) {
        (Some(csv), Format::Csv) if outcome.ok => csv.clone(),
        _ => {
            let doc = json!({
                "status": if outcome.ok { "ok" } else { "fail" },
                "command": cli.command.name(),
                "payload": outcome.payload,
            });
            let mut s = serde_json::to_string_pretty(&doc).expect("JSON values serialize");
            s.push('\n');
            s
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = execute(&cli).unwrap_or_else(|e| Outcome {
        ok: false,
        payload: json!({ "error": format!("{e:#}") }),
        csv: None,
    });
    print!("{}", render(&cli, &outcome));
    if outcome.ok {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
