//! `treefed` command line: federated runs, leave-one-domain-out evaluation,
//! ablation sweeps, dataset export and tree dumps.
//!
//! Exit status is 0 on success, 2 for usage or configuration errors and 1
//! for failures while running. Verbosity follows `TREEFED_LOG`.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use treefed::fusion::FusionMode;
use treefed::inference::SelectionStrategy;
use treefed::orchestrator::{
    csv_table, generate_dataset, leave_one_out_multi, train_federation, ConfigError, Dataset,
    ExperimentConfig, LooReport, RunOptions, Topology,
};
use treefed::sim::pgm::{export_dataset, import_dataset, write_mask};

#[derive(Parser)]
#[command(name = "treefed", version, about = "Tree-structured federated domain generalization simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one federation on every configured domain.
    Run(Common),
    /// Leave-one-domain-out evaluation.
    Loo(Common),
    /// Sweep one ablation axis with leave-one-domain-out evaluation.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum)]
        axis: Axis,
    },
    /// Write the configured synthetic domains as PGM files plus a manifest.
    ExportData(Common),
    /// Train on every domain and print the final node tree.
    DumpTree(Common),
}

#[derive(Args, Clone)]
struct Common {
    /// Config file (TOML with dotted keys). Defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the seed from the config.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, default_value = "treefed-out")]
    out: PathBuf,
    /// Also write tree dumps.
    #[arg(long)]
    dump_tree: bool,
    /// Write per-image model selection decisions.
    #[arg(long)]
    explain: bool,
    /// Write per-round style pairing and mixing counts.
    #[arg(long)]
    log_style: bool,
    /// Write per-round parameter checkpoints under this directory.
    #[arg(long)]
    checkpoint_dir: Option<PathBuf>,
    /// Load domains from an exported dataset instead of generating them.
    #[arg(long)]
    data_dir: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Axis {
    Topology,
    Fedstyle,
    Fusion,
    Selection,
}

fn load_config(common: &Common) -> Result<ExperimentConfig, ConfigError> {
    let mut cfg = match &common.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn load_data(common: &Common, cfg: &ExperimentConfig) -> Result<Dataset> {
    match &common.data_dir {
        Some(dir) => import_dataset(dir).with_context(|| format!("loading dataset from {}", dir.display())),
        None => Ok(generate_dataset(cfg)),
    }
}

fn write(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
    }
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn options(common: &Common) -> RunOptions {
    RunOptions {
        explain: common.explain,
        checkpoint_dir: common.checkpoint_dir.clone(),
    }
}

fn style_lines(round_logs: &str) -> String {
    round_logs
        .lines()
        .filter(|l| l.contains(" partner="))
        .map(|l| format!("{l}\n"))
        .collect()
}

fn cmd_run(common: &Common, cfg: &ExperimentConfig, dump_to_stdout: bool) -> Result<()> {
    let data = load_data(common, cfg)?;
    let fed = train_federation(cfg, &data, &options(common))?;
    let tree = fed.tree().context("no round completed")?;
    let logs: String = fed.logs().iter().map(|l| l.format()).collect();
    if dump_to_stdout {
        print!("{}", tree.dump());
        return Ok(());
    }
    write(&common.out.join("config.toml"), &cfg.to_toml())?;
    write(&common.out.join("rounds.log"), &logs)?;
    if common.dump_tree {
        write(&common.out.join("tree.txt"), &tree.dump())?;
    }
    if common.log_style {
        write(&common.out.join("style.log"), &style_lines(&logs))?;
    }
    for (id, loss) in &fed.logs().last().expect("rounds >= 1").losses {
        println!("client={id} final_loss={loss:.6}");
    }
    println!("tree_checksum={}", tree.checksum());
    Ok(())
}

fn write_loo(common: &Common, dir: &Path, report: &LooReport) -> Result<()> {
    write(&dir.join("report.txt"), &report.format())?;
    write(&dir.join("report.csv"), &csv_table(std::slice::from_ref(report)))?;
    let rounds: String = report.folds.iter().map(|f| format!("fold={}\n{}", f.held_out, f.round_logs)).collect();
    write(&dir.join("rounds.log"), &rounds)?;
    if common.explain {
        let text: String = report
            .folds
            .iter()
            .flat_map(|f| f.explain.lines().map(move |l| format!("fold={} {l}\n", f.held_out)))
            .collect();
        write(&dir.join("explain.txt"), &text)?;
    }
    if common.log_style {
        write(&dir.join("style.log"), &style_lines(&rounds))?;
    }
    for f in &report.folds {
        if common.dump_tree {
            write(&dir.join("trees").join(format!("{}.txt", f.held_out)), &f.tree_dump)?;
        }
        let mask_dir = dir.join("masks").join(&f.held_out);
        fs::create_dir_all(&mask_dir).with_context(|| format!("creating {}", mask_dir.display()))?;
        for (i, m) in f.predictions.iter().enumerate() {
            write_mask(&mask_dir.join(format!("pred_{i:03}.pgm")), m)?;
        }
    }
    Ok(())
}

fn summary(report: &LooReport) {
    println!(
        "method={} dice_mean={:.6} dice_std={:.6} hd95_mean={:.6}",
        report.method,
        report.mean_dice(),
        report.dice_std(),
        report.mean_hd95()
    );
}

fn cmd_loo(common: &Common, cfg: &ExperimentConfig) -> Result<()> {
    let data = load_data(common, cfg)?;
    let mut reports = leave_one_out_multi(cfg, &data, &[cfg.inference.selection], &options(common))?;
    let report = reports.remove(0);
    write(&common.out.join("config.toml"), &cfg.to_toml())?;
    write_loo(common, &common.out, &report)?;
    summary(&report);
    Ok(())
}

fn cmd_ablate(common: &Common, cfg: &ExperimentConfig, axis: Axis) -> Result<()> {
    let data = load_data(common, cfg)?;
    let opts = options(common);
    let reports: Vec<LooReport> = match axis {
        Axis::Selection => leave_one_out_multi(cfg, &data, &SelectionStrategy::ALL, &opts)?,
        _ => {
            let variants: Vec<ExperimentConfig> = match axis {
                Axis::Topology => [Topology::Tree, Topology::Star]
                    .into_iter()
                    .map(|t| ExperimentConfig {
                        topology: t,
                        ..cfg.clone()
                    })
                    .collect(),
                Axis::Fedstyle => [true, false]
                    .into_iter()
                    .map(|on| {
                        let mut c = cfg.clone();
                        c.style.enabled = on;
                        c
                    })
                    .collect(),
                Axis::Fusion => FusionMode::ALL
                    .into_iter()
                    .map(|m| {
                        let mut c = cfg.clone();
                        c.fusion.mode = m;
                        c
                    })
                    .collect(),
                Axis::Selection => unreachable!(),
            };
            let mut out = Vec::new();
            for v in &variants {
                out.extend(leave_one_out_multi(v, &data, &[v.inference.selection], &opts)?);
            }
            out
        }
    };
    write(&common.out.join("config.toml"), &cfg.to_toml())?;
    for r in &reports {
        write_loo(common, &common.out.join(&r.method), r)?;
        summary(r);
    }
    write(&common.out.join("summary.csv"), &csv_table(&reports))?;
    Ok(())
}

fn cmd_export(common: &Common, cfg: &ExperimentConfig) -> Result<()> {
    let data = generate_dataset(cfg);
    export_dataset(&common.out, &data).with_context(|| format!("exporting to {}", common.out.display()))?;
    println!("exported {} domains to {}", data.len(), common.out.display());
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("TREEFED_LOG", "warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    let common = match &cli.command {
        Command::Run(c) | Command::Loo(c) | Command::ExportData(c) | Command::DumpTree(c) => c,
        Command::Ablate { common, .. } => common,
    };
    let cfg = match load_config(common) {
        Ok(cfg) => cfg,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    };
    let result = match &cli.command {
        Command::Run(c) => cmd_run(c, &cfg, false),
        Command::DumpTree(c) => cmd_run(c, &cfg, true),
        Command::Loo(c) => cmd_loo(c, &cfg),
        Command::Ablate { common, axis } => cmd_ablate(common, &cfg, *axis),
        Command::ExportData(c) => cmd_export(c, &cfg),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
