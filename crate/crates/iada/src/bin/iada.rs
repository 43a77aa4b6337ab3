//! Command-line entry points for the aggregation laboratory.
//!
//! Exit codes: 0 success, 1 usage error, 2 configuration error,
//! 3 numerical failure.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use iada::agg::param_count;
use iada::backbone::{AdapterConfig, Model};
use iada::checkpoint;
use iada::config::ExperimentConfig;
use iada::harness::{self, Condition, HarnessError};
use iada::params::ParamGroup;
use iada::report;
use iada::tasks::{dump_example, generate, TaskKind};
use iada::{gradcheck, tasks};

#[derive(Parser)]
#[command(name = "iada", version, about = "cross-depth aggregation laboratory")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Full-parameter pretraining on the surface/composition mixture.
    Pretrain {
        /// Config file path or preset name (e.g. `toy`, `iada_r16`).
        #[arg(long, default_value = "toy")]
        config: String,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value = "out")]
        out: PathBuf,
        /// Numeric precision, 32 or 64.
        #[arg(long)]
        precision: Option<u32>,
    },
    /// Fine-tune a pretrained checkpoint under one condition.
    Finetune {
        #[arg(long, default_value = "toy")]
        config: String,
        /// Pretrained checkpoint produced by `pretrain`.
        #[arg(long)]
        from: PathBuf,
        #[arg(long)]
        condition: Condition,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value = "out")]
        out: PathBuf,
        #[arg(long)]
        precision: Option<u32>,
    },
    /// Evaluate a checkpoint on the fixed evaluation sets.
    Eval {
        #[arg(long, default_value = "toy")]
        config: String,
        #[arg(long)]
        from: PathBuf,
        /// Condition the checkpoint was trained under (fixes its shape).
        #[arg(long, default_value = "A")]
        condition: Condition,
        #[arg(long)]
        precision: Option<u32>,
    },
    /// The full A/B/C/D reasoning-tax protocol over one or more seeds.
    Tax {
        #[arg(long, default_value = "toy")]
        config: String,
        /// One or more seeds, comma-separated or repeated.
        #[arg(long, value_delimiter = ',', num_args = 1.., default_value = "1,2,3")]
        seed: Vec<u64>,
        #[arg(long, default_value = "out")]
        out: PathBuf,
        #[arg(long)]
        precision: Option<u32>,
    },
    /// Run (or count) one configuration per value of one config axis.
    Sweep {
        #[arg(long, default_value = "toy")]
        config: String,
        /// Axis as `section.key`, e.g. `aggregator.bottleneck`.
        #[arg(long)]
        axis: String,
        #[arg(long, value_delimiter = ',', num_args = 1..)]
        values: Vec<String>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value = "out")]
        out: PathBuf,
        /// Report parameter counts only; no training.
        #[arg(long)]
        count_only: bool,
        /// Hidden width override for count-only accounting.
        #[arg(long)]
        d: Option<usize>,
    },
    /// Finite-difference gradient suite over a pairwise-covering config set.
    Gradcheck {
        #[arg(long)]
        seed: Option<u64>,
        /// Only 64 is accepted: the oracle needs double precision.
        #[arg(long, default_value = "64")]
        precision: u32,
        #[arg(long, default_value = "1e-5")]
        tolerance: f64,
    },
    /// Closed-form and inventory parameter counts for a config.
    Params {
        #[arg(long, default_value = "toy")]
        config: String,
        /// Hidden width for closed-form accounting without building a model.
        #[arg(long)]
        d: Option<usize>,
    },
    /// Dump a dataset in the line-oriented text format.
    GenData {
        #[arg(long, default_value = "toy")]
        config: String,
        #[arg(long)]
        task: TaskKind,
        #[arg(long, default_value = "100")]
        count: usize,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
}

enum CliError {
    Usage(String),
    Config(String),
    Numeric(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Config(_) => 2,
            CliError::Numeric(_) => 3,
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Usage(m) | CliError::Config(m) | CliError::Numeric(m) => m,
        }
    }
}

impl From<iada::config::ConfigError> for CliError {
    fn from(e: iada::config::ConfigError) -> Self {
        CliError::Config(e.to_string())
    }
}

impl From<HarnessError> for CliError {
    fn from(e: HarnessError) -> Self {
        match e {
            HarnessError::Invalid(m) => CliError::Usage(m),
            other => CliError::Numeric(other.to_string()),
        }
    }
}

impl From<checkpoint::CheckpointError> for CliError {
    fn from(e: checkpoint::CheckpointError) -> Self {
        CliError::Config(e.to_string())
    }
}

fn write_artifact(path: &Path, contents: &str) -> Result<(), CliError> {
    report::write_atomic(path, contents).map_err(CliError::Config)
}

fn load_config(
    spec: &str,
    seed: Option<u64>,
    precision: Option<u32>,
) -> Result<ExperimentConfig, CliError> {
    let mut cfg = ExperimentConfig::load(spec)?;
    if let Some(s) = seed {
        cfg.train.seed = s;
    }
    if let Some(p) = precision {
        cfg.train.precision = p;
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Every artifact directory carries the fully resolved config for provenance.
fn echo_config(out: &Path, cfg: &ExperimentConfig) -> Result<(), CliError> {
    write_artifact(&out.join("config.txt"), &cfg.serialize())
}

fn short_millions(n: usize) -> String {
    let m = n as f64 / 1e6;
    let s = format!("{m:.2}");
    let trimmed = s.trim_end_matches('0').trim_end_matches('.');
    format!("{}M", if trimmed.is_empty() { "0" } else { trimmed })
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.cmd {
        Cmd::Pretrain {
            config,
            seed,
            out,
            precision,
        } => {
            let cfg = load_config(&config, seed, precision)?;
            echo_config(&out, &cfg)?;
            let seed = cfg.train.seed;
            let (model, curve) = harness::pretrain(&cfg, seed)?;
            checkpoint::save(&model.store, &out.join(format!("pretrain-s{seed}.ckpt")))?;
            write_artifact(
                &out.join(format!("pretrain-s{seed}-loss.txt")),
                &report::plot_data(&curve),
            )?;
            let m = harness::evaluate(&model, &cfg)?;
            println!(
                "pretrain seed {seed}: surface {:.4} composition {:.4} overall {:.4}",
                m.surface_acc, m.composition_acc, m.overall
            );
            Ok(())
        }
        Cmd::Finetune {
            config,
            from,
            condition,
            seed,
            out,
            precision,
        } => {
            let cfg = load_config(&config, seed, precision)?;
            echo_config(&out, &cfg)?;
            let seed = cfg.train.seed;
            let mut pre = Model::new(
                cfg.backbone.clone(),
                AdapterConfig {
                    rank: 0,
                    alpha: 0.0,
                },
                None,
                seed,
            );
            checkpoint::load(&mut pre.store, &from)?;
            let (model, curve) = harness::finetune(&pre, condition, &cfg, seed)?;
            checkpoint::save(
                &model.store,
                &out.join(format!("finetune-{condition}-s{seed}.ckpt")),
            )?;
            write_artifact(
                &out.join(format!("finetune-{condition}-s{seed}-loss.txt")),
                &report::plot_data(&curve),
            )?;
            let m = harness::evaluate(&model, &cfg)?;
            println!(
                "finetune {condition} seed {seed}: surface {:.4} composition {:.4} overall {:.4}",
                m.surface_acc, m.composition_acc, m.overall
            );
            Ok(())
        }
        Cmd::Eval {
            config,
            from,
            condition,
            precision,
        } => {
            let cfg = load_config(&config, None, precision)?;
            let model = match condition {
                Condition::A => {
                    let mut m = Model::new(
                        cfg.backbone.clone(),
                        AdapterConfig {
                            rank: 0,
                            alpha: 0.0,
                        },
                        None,
                        0,
                    );
                    checkpoint::load(&mut m.store, &from)?;
                    m
                }
                cond => {
                    let agg = match cond {
                        Condition::B => None,
                        Condition::C => Some(iada::agg::AggregatorConfig {
                            gate_init: cfg.aggregator.gate_init,
                            ..iada::agg::AggregatorConfig::fixed_baseline()
                        }),
                        _ => Some(cfg.aggregator.clone()),
                    };
                    let mut m = Model::new(cfg.backbone.clone(), cfg.adapter, agg, 0);
                    checkpoint::load(&mut m.store, &from)?;
                    m
                }
            };
            let m = harness::evaluate(&model, &cfg)?;
            println!(
                "surface {:.4}\ncomposition {:.4}\noverall {:.4}",
                m.surface_acc, m.composition_acc, m.overall
            );
            Ok(())
        }
        Cmd::Tax {
            config,
            seed,
            out,
            precision,
        } => {
            let cfg = load_config(&config, None, precision)?;
            echo_config(&out, &cfg)?;
            let mut runs = Vec::new();
            let mut records = Vec::new();
            for &s in &seed {
                let run = harness::tax_run(&cfg, s)?;
                records.extend(harness::tax_records(&run, "tax", &cfg));
                runs.push(run);
            }
            let table = harness::tax_table(&runs);
            print!("{table}");
            write_artifact(&out.join("tax-metrics.jsonl"), &report::to_jsonl(&records))?;
            let mut full = table;
            full.push_str("\nresolved config:\n");
            full.push_str(&cfg.serialize());
            write_artifact(&out.join("tax-report.txt"), &full)?;
            Ok(())
        }
        Cmd::Sweep {
            config,
            axis,
            values,
            seed,
            out,
            count_only,
            d,
        } => {
            if values.is_empty() {
                return Err(CliError::Usage(
                    "sweep needs at least one --values entry".into(),
                ));
            }
            let cfg = load_config(&config, seed, None)?;
            let table = harness::sweep(&cfg, &axis, &values, cfg.train.seed, count_only, d)?;
            print!("{table}");
            echo_config(&out, &cfg)?;
            write_artifact(&out.join("sweep.txt"), &table)?;
            Ok(())
        }
        Cmd::Gradcheck {
            seed,
            precision,
            tolerance,
        } => {
            if precision != 64 {
                return Err(CliError::Usage(
                    "gradcheck runs at 64-bit only; finite differences drown at 32".into(),
                ));
            }
            let _ = seed; // the covering set fixes its own seeds for reproducibility
            let rep = gradcheck::run(tolerance);
            for r in &rep.results {
                println!(
                    "checked {:4} elements, worst rel err {:.3e} at {} ({:?} query, {:?} conditioning)",
                    r.elements, r.worst, r.worst_param, r.config.query_mode, r.config.conditioning
                );
            }
            println!(
                "configs: {}  max relative error: {:.3e}",
                rep.results.len(),
                rep.worst()
            );
            if rep.passed() {
                Ok(())
            } else {
                Err(CliError::Numeric(format!(
                    "gradient check failed: {:.3e} exceeds {:.1e}",
                    rep.worst(),
                    tolerance
                )))
            }
        }
        Cmd::Params { config, d } => {
            let cfg = load_config(&config, None, None)?;
            let d_eff = d.unwrap_or(cfg.backbone.hidden);
            let k = cfg.backbone.blocks;
            let c = param_count(&cfg.aggregator, d_eff, k);
            println!("aggregator parameters at d={d_eff}, K={k}:");
            println!("  streams:     {}", c.streams);
            println!("  attention:   {}", c.attention);
            println!("  gates:       {}", c.gate);
            println!("  total:       {}", c.total);
            println!(
                "  excl gates:  {} (≈{})",
                c.excl_gates,
                short_millions(c.excl_gates)
            );
            println!("adapters (rank {}): {}", cfg.adapter.rank, {
                let mut b = cfg.backbone.clone();
                b.hidden = d_eff;
                b.adapter_param_count(cfg.adapter.rank)
            });
            if d.is_none() {
                // cross-check the closed form against an actual allocation
                let model = Model::new(
                    cfg.backbone.clone(),
                    cfg.adapter,
                    Some(cfg.aggregator.clone()),
                    0,
                );
                let inv = model.store.total_elements(Some(ParamGroup::Aggregator));
                println!("  inventory:   {inv}");
                if inv != c.total {
                    return Err(CliError::Numeric(format!(
                        "closed form {} disagrees with inventory {inv}",
                        c.total
                    )));
                }
            }
            Ok(())
        }
        Cmd::GenData {
            config,
            task,
            count,
            seed,
            out,
        } => {
            let cfg = load_config(&config, seed, None)?;
            let spec = match task {
                TaskKind::Surface => harness::surface_spec(&cfg),
                TaskKind::Composition => harness::composition_spec(&cfg),
            };
            let mut lines = String::new();
            for i in 0..count {
                let ex = generate(&spec, cfg.train.seed.wrapping_add(i as u64))
                    .map_err(CliError::Config)?;
                // belt and braces: labels recheck against the oracles
                let ok = match task {
                    TaskKind::Surface => tasks::recount_surface(&spec, &ex) == Some(ex.answer),
                    TaskKind::Composition => {
                        tasks::resolve_composition(&spec, &ex) == Some(ex.answer)
                    }
                };
                if !ok {
                    return Err(CliError::Numeric(format!(
                        "label oracle mismatch at index {i}"
                    )));
                }
                lines.push_str(&dump_example(&ex));
                lines.push('\n');
            }
            echo_config(&out, &cfg)?;
            write_artifact(&out.join(format!("{task}.txt")), &lines)?;
            println!("wrote {count} {task} examples");
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            // clap handles --help/--version as "errors" with success status
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message());
            ExitCode::from(e.code())
        }
    }
}
