use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use spectralmoe::commands::{self, Invocation};
use spectralmoe::config::{RunConfig, Variant};
use spectralmoe::{Error, Result};

#[derive(Parser)]
#[command(name = "spectralmoe", version, about = "Dual-gated mixture-of-experts adapter on a synthetic spectral segmentation benchmark")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Global {
    /// Run configuration (key=value lines).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the root seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overwrite or recompute existing outputs.
    #[arg(long, global = true)]
    force: bool,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads (defaults to all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Overrides one config key, e.g. `--set epochs=5`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the source and target splits.
    Gen,
    /// Train one variant and evaluate it on both splits.
    Train {
        /// Architecture variant to train.
        #[arg(long)]
        variant: Option<Variant>,
    },
    /// Train all variants over the seed list and tabulate.
    Ablate,
    /// Train the full variant for each expert count in `ne_list`.
    SweepExperts,
    /// Compare analytic and finite-difference gradients on a tiny model.
    Gradcheck {
        /// Check the model from --config instead of the built-in tiny one.
        #[arg(long)]
        use_config_model: bool,
        /// Scales one group's analytic gradient (negative control).
        #[arg(long, hide = true, value_name = "GROUP=FACTOR")]
        corrupt: Option<String>,
    },
    /// Expert occupancy of a trained checkpoint over the target split.
    RouteStats,
}

fn load_config(g: &Global) -> Result<RunConfig> {
    let mut cfg = match &g.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    let cwd = PathBuf::from(".");
    for kv in &g.overrides {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override `{kv}` is not KEY=VALUE")))?;
        cfg.set(k.trim(), v.trim(), &cwd)?;
    }
    if let Some(s) = g.seed {
        cfg.seed = s;
    }
    cfg.check()?;
    Ok(cfg)
}

fn parse_corrupt(raw: &str) -> Result<(String, f64)> {
    let bad = || Error::Config(format!("`--corrupt {raw}` is not GROUP=FACTOR"));
    let (g, f) = raw.split_once('=').ok_or_else(bad)?;
    Ok((g.to_string(), f.parse().map_err(|_| bad())?))
}

fn run(cli: Cli) -> Result<()> {
    let g = &cli.global;
    if let Some(n) = g.threads {
        spectralmoe::par::configure_threads(n)?;
    }
    let mut inv = Invocation::new(load_config(g)?);
    inv.force = g.force;
    inv.out = g.out.clone();
    match cli.command {
        Command::Gen => {
            let s = commands::cmd_gen(&inv)?;
            println!("wrote {} source and {} target samples to {}", s.n_source, s.n_target, s.dir.display());
        }
        Command::Train { variant } => {
            if let Some(v) = variant {
                inv.config.model.variant = v;
            }
            let r = commands::cmd_train(&inv)?;
            println!(
                "{} seed {}: loss {:.4} -> {:.4}, source mIoU {:.4}, target mIoU {:.4}",
                r.variant, r.seed, r.first_loss, r.final_loss, r.source.miou, r.target.miou
            );
        }
        Command::Ablate => {
            let t = commands::cmd_ablate(&inv)?;
            println!("variant            source_mIoU  target_mIoU  delta_vs_full");
            for s in &t.summary {
                println!(
                    "{:<18} {:>11.4}  {:>11.4}  {:>+13.4}",
                    s.variant.name(),
                    s.median_source_miou,
                    s.median_target_miou,
                    s.delta_target_miou
                );
            }
        }
        Command::SweepExperts => {
            println!("N_e  target_mIoU  params");
            for r in commands::cmd_sweep_experts(&inv)? {
                println!("{:>3}  {:>11.4}  {:>6}", r.n_experts, r.median_target_miou, r.param_count);
            }
        }
        Command::Gradcheck { use_config_model, corrupt } => {
            let corrupt = corrupt.as_deref().map(parse_corrupt).transpose()?;
            let report = commands::cmd_gradcheck(&inv, use_config_model, corrupt)?;
            for grp in &report.groups {
                println!(
                    "{:<32} {:>4} checked {:>3} skipped  max rel {:.2e}  {}",
                    grp.group,
                    grp.checked,
                    grp.excluded,
                    grp.max_rel_error,
                    if grp.passed { "ok" } else { "FAIL" }
                );
            }
            commands::gradcheck_verdict(&report)?;
        }
        Command::RouteStats => {
            for r in commands::cmd_route_stats(&inv)? {
                let occ: Vec<String> = r.occupancy.iter().map(|o| format!("{o:.3}")).collect();
                println!("layer {} {:<6} max/min {:.3}  [{}]", r.layer, r.modality, r.max_min_ratio, occ.join(" "));
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
