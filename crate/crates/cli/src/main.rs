use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, CommandFactory, FromArgMatches, Parser, Subcommand};
use mbe_core::backbone::dump::write_dump;
use mbe_core::backbone::{ForwardCounter, Probe};
use mbe_core::cfs::{CfsConfig, CfsDetector};
use mbe_core::config::{RunConfig, CONFIG_KEYS};
use mbe_core::harness::dataset::{make_dataset, Role};
use mbe_core::harness::diagnostics::{emit_diagnostics, run_diagnostics};
use mbe_core::harness::method::MethodConfig;
use mbe_core::harness::replay::{record_run, replay_config};
use mbe_core::harness::report::{emit_report, Formats};
use mbe_core::harness::{run_benchmark, BenchmarkReport, WORKERS_ENV};
use mbe_core::Error;

const DEFAULT_CONFIG: &str = include_str!("../configs/default.toml");

#[derive(Parser)]
#[command(
    name = "mbe",
    version,
    about = "Backbone-equated OOD benchmark with canonical feature snapshots"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Run configuration (TOML); see `mbe help-config` for every key.
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Output directory, overriding `output_dir`.
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Comma-separated evaluation seeds, overriding `seeds`.
    #[arg(long, value_name = "LIST", value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    /// Comma-separated method labels to keep.
    #[arg(long, value_name = "LIST", value_delimiter = ',')]
    methods: Option<Vec<String>>,
    /// Artifacts to write: csv, svg or all.
    #[arg(long, default_value = "all")]
    format: String,
}

#[derive(Subcommand)]
enum Command {
    /// Run the benchmark and write pairs.csv, summary.json and plots.
    Bench(Common),
    /// Print admissible hooks with proxy values and the CFS selections.
    Hooks(Common),
    /// Run the theory diagnostics (needs `[diagnostics] enabled = true`).
    Diag(Common),
    /// Record a feature dump of the CFS methods and write its replay config.
    Dump(Common),
    /// Print every accepted configuration key.
    HelpConfig,
}

struct Loaded {
    config: RunConfig,
    out: PathBuf,
    formats: Formats,
}

fn load(common: &Common) -> anyhow::Result<Loaded> {
    let mut config = match &common.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::parse(DEFAULT_CONFIG)?,
    };
    if let Some(seeds) = &common.seeds {
        if seeds.is_empty() {
            bail!("--seeds must list at least one seed");
        }
        config.seeds = seeds.clone();
    }
    if let Some(methods) = &common.methods {
        config.restrict_methods(methods)?;
    }
    let out = common.out.clone().unwrap_or_else(|| PathBuf::from(&config.output_dir));
    config.output_dir = out.display().to_string();
    Ok(Loaded {
        config,
        out,
        formats: Formats::parse(&common.format)?,
    })
}

fn print_aggregates(report: &BenchmarkReport) {
    println!(
        "{:<22} {:<12} {:>9} {:>9} {:>9} {:>8} {:>4} {:>4}",
        "method", "backbone", "AvgAUROC", "±std", "AvgWorst", "FPR95", "#F", "#J"
    );
    for a in &report.aggregates {
        println!(
            "{:<22} {:<12} {:>9.4} {:>9.4} {:>9.4} {:>8.4} {:>4} {:>4}",
            a.method, a.backbone, a.avg_auroc, a.avg_auroc_std, a.avg_worst_auroc, a.avg_fpr95, a.forwards, a.jacobians
        );
    }
}

fn cmd_bench(common: &Common) -> anyhow::Result<()> {
    let l = load(common)?;
    let report = run_benchmark(&l.config)?;
    let files = emit_report(&report, &l.out, l.formats)?;
    print_aggregates(&report);
    for f in files {
        println!("wrote {}", f.display());
    }
    Ok(())
}

fn cmd_hooks(common: &Common) -> anyhow::Result<()> {
    let l = load(common)?;
    let config = &l.config;
    let seed = config.seeds[0];
    let id_spec = config
        .datasets
        .iter()
        .find(|d| d.role == Role::Id)
        .context("the configuration has no id dataset to probe hooks on")?;
    let id = make_dataset(id_spec, config.data_seed)?;
    let mut cfs: Vec<CfsConfig> = config
        .methods
        .iter()
        .filter_map(|m| match m {
            MethodConfig::Cfs(c) => Some(c.clone()),
            _ => None,
        })
        .collect();
    if cfs.is_empty() {
        cfs.push(CfsConfig::default());
    }
    for bb_cfg in &config.backbones {
        let bb = bb_cfg.build()?;
        for c in &cfs {
            let counter = ForwardCounter::new();
            let probe = Probe::new(bb.as_ref(), &counter);
            let (det, sel) = CfsDetector::plan(&probe, c, &id.fit, seed)?;
            println!(
                "# backbone {} · {} · levels {:?} · probe {} on {} images × {} repeats",
                bb.name(),
                c.label(),
                det.grid().lambdas(),
                id.name,
                c.probe_images.min(id.fit.len()),
                c.proxy_repeats
            );
            let mut rows: Vec<_> = sel.table.iter().collect();
            rows.sort_by(|a, b| b.proxy.total_cmp(&a.proxy));
            let mut header = format!("{:>4}  {:<22} {:<14} {:>12}", "rank", "hook", "shape", "proxy");
            for r in &sel.regions {
                header.push_str(&format!(" {:>8}", r.as_str()));
            }
            println!("{header}");
            for (rank, row) in rows.iter().enumerate() {
                let mut line = format!(
                    "{:>4}  {:<22} {:<14} {:>12.4e}",
                    rank + 1,
                    row.hook.name,
                    format!("{:?}", row.shape),
                    row.proxy
                );
                for r in &sel.regions {
                    let mark = if row.hook.region != *r {
                        ""
                    } else if row.selected {
                        "*"
                    } else if row.shortlisted {
                        "s"
                    } else {
                        "."
                    };
                    line.push_str(&format!(" {mark:>8}"));
                }
                println!("{line}");
            }
            println!(
                "selected: {}",
                sel.hooks.iter().map(|h| h.name.as_str()).collect::<Vec<_>>().join(", ")
            );
            println!();
        }
    }
    Ok(())
}

fn cmd_diag(common: &Common) -> anyhow::Result<()> {
    let l = load(common)?;
    let seed = l.config.seeds[0];
    let report = run_diagnostics(&l.config, seed)?;
    let dir = l.out.join("diagnostics");
    let files = emit_diagnostics(&report, &dir, l.formats.svg)?;
    println!("{} probes on {}", report.probes.len(), report.backbone);
    println!("spearman(kappa_hat/d, AUROC) = {:.4}", report.spearman_kappa);
    println!("spearman(R_hat, AUROC)       = {:.4}", report.spearman_ratio);
    if let (Some(hook), Some(slope)) = (&report.low_noise_hook, report.low_noise_slope) {
        println!("low-noise {hook}: log-log slope {slope:.4}");
        for r in &report.low_noise {
            match r.exact {
                Some(e) => println!("  λ={:>6.3} b²={:.4e} var={:.4e} ratio={:.4}", r.lambda, r.b_squared, r.variance, r.variance / e),
                None => println!("  λ={:>6.3} b²={:.4e} var={:.4e}", r.lambda, r.b_squared, r.variance),
            }
        }
    }
    if let Some(notice) = &report.mismatch_notice {
        println!("{notice}");
    }
    for r in &report.mismatch {
        println!(
            "mismatch |Δλ|={:.4} drift={:.4} ΔAUROC={:+.4}",
            r.mismatch, r.drift, r.auroc_delta
        );
    }
    for f in files {
        println!("wrote {}", f.display());
    }
    Ok(())
}

fn cmd_dump(common: &Common) -> anyhow::Result<()> {
    let l = load(common)?;
    let (live, report, records) = record_run(&l.config)?;
    std::fs::create_dir_all(&l.out).with_context(|| format!("creating {}", l.out.display()))?;
    let dump_path = absolute(&l.out.join("features.cfsd"))?;
    write_dump(&dump_path, &records)?;
    let live_dir = l.out.join("live");
    emit_report(&report, &live_dir, l.formats)?;
    let mut replay = replay_config(&live, &dump_path)?;
    replay.output_dir = l.out.join("replay").display().to_string();
    let replay_path = l.out.join("replay.toml");
    std::fs::write(&replay_path, replay.to_toml())
        .with_context(|| format!("writing {}", replay_path.display()))?;
    println!("wrote {} ({} records)", dump_path.display(), records.len());
    println!("wrote {} (live report)", live_dir.display());
    println!("wrote {}", replay_path.display());
    println!("replay with: mbe bench --config {}", replay_path.display());
    Ok(())
}

fn absolute(path: &Path) -> anyhow::Result<PathBuf> {
    Ok(if path.is_absolute() {
        path.to_path_buf()
    } else {
        std::env::current_dir()?.join(path)
    })
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<Error>() {
        Some(Error::Protocol(_)) => 3,
        Some(Error::Config(_)) => 2,
        _ => 1,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let help = format!(
        "Without --config the bundled default benchmark is used.\n\n\
         ENVIRONMENT\n  {WORKERS_ENV}          worker threads (default: available parallelism)\n\n{CONFIG_KEYS}"
    );
    let matches = Cli::command().after_help(help).get_matches();
    let cli = match Cli::from_arg_matches(&matches) {
        Ok(cli) => cli,
        Err(e) => e.exit(),
    };
    let result = match &cli.command {
        Command::Bench(c) => cmd_bench(c),
        Command::Hooks(c) => cmd_hooks(c),
        Command::Diag(c) => cmd_diag(c),
        Command::Dump(c) => cmd_dump(c),
        Command::HelpConfig => {
            print!("{CONFIG_KEYS}");
            println!("\n  environment: {WORKERS_ENV} = worker threads");
            Ok(())
        }
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
