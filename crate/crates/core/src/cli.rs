//! The `cpcm` command line: scene generation, training, evaluation, masked
//! evaluation and multi-seed baseline comparison.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};

use crate::checkpoint::{load_params, save_params};
use crate::config::{Entry, RunConfig};
use crate::eval::{evaluate, masked_evaluation, EvalReport, EvalScene};
use crate::experiment::{run_all, summarize, PreparedData, RunSpec};
use crate::synth::{generate_dataset, write_dataset, CLASS_NAMES};
use crate::trainer::{train, TrainMode};

pub const METRICS_HEADER: &str = "step,epoch,lr,l_seg,l_consis,l_mask,total";
pub const MASK_EVAL_HEADER: &str = "ratio,miou_mean,miou_sd";
pub const SUMMARY_HEADER: &str = "mode,budget,miou_mean,miou_sd";
pub const SWEEP_HEADER: &str = "param,value,budget,miou_mean,miou_sd";
pub const RUNS_HEADER: &str = "mode,budget,param,value,replicate,miou,final_l_seg";
pub const EVAL_HEADER: &str = "class,iou";

pub const CHECKPOINT_FILE: &str = "checkpoint.txt";
pub const METRICS_FILE: &str = "metrics.csv";
pub const SUMMARY_FILE: &str = "summary.csv";
pub const SWEEP_FILE: &str = "sweep.csv";
pub const RUNS_FILE: &str = "runs.csv";

#[derive(Parser, Debug)]
#[command(name = "cpcm", version, about = "Weakly-supervised point cloud segmentation with masked consistency training")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate synthetic indoor scenes and a manifest.
    Generate(GenerateArgs),
    /// Train one model and write a checkpoint and per-step metrics.
    Train(TrainArgs),
    /// Score a checkpoint: per-class IoU and mIoU.
    Eval(EvalArgs),
    /// Score a checkpoint under region masks of increasing ratio.
    MaskEval(MaskEvalArgs),
    /// Train ce_only, consis_baseline and cpcm over budgets and seeds.
    Compare(CompareArgs),
}

#[derive(Args, Debug, Clone, Default)]
pub struct ConfigArgs {
    /// Run configuration file of `key = value` lines.
    #[arg(long, short)]
    pub config: Option<PathBuf>,
    /// Override a configuration key, e.g. `--set train.epochs=5`; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Args, Debug)]
pub struct GenerateArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    /// Output directory for scene files and manifest.txt.
    #[arg(long)]
    pub out: PathBuf,
    /// Total number of scenes (train plus eval).
    #[arg(long)]
    pub scenes: Option<usize>,
    /// Scenes held out for evaluation, at most `scenes - 1`; defaults to
    /// the configured train:eval proportion.
    #[arg(long)]
    pub eval_scenes: Option<usize>,
    /// Data seed.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Args, Debug)]
pub struct DataArgs {
    /// Dataset manifest; without one the dataset is generated from `data.*`.
    #[arg(long)]
    pub data: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    #[command(flatten)]
    pub data: DataArgs,
    /// Output directory for checkpoint.txt and metrics.csv.
    #[arg(long)]
    pub out: PathBuf,
    /// Training mode: ce_only, consis_baseline, cpcm or no_cmt.
    #[arg(long)]
    pub mode: Option<TrainMode>,
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Label budget as a fraction of points per scene.
    #[arg(long)]
    pub budget: Option<f64>,
    /// Replaces the train, mask, init and label seeds with ones derived
    /// from this value.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Score the training split instead of the eval split.
    #[arg(long)]
    pub train_split: bool,
    /// CSV of per-class IoU followed by an `miou` row.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct MaskEvalArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub train_split: bool,
    /// Comma-separated mask ratios; defaults to `eval.ratios`.
    #[arg(long)]
    pub ratios: Option<String>,
    /// Comma-separated mask seeds; defaults to `eval.seeds`.
    #[arg(long)]
    pub seeds: Option<String>,
    #[arg(long)]
    pub region_size: Option<usize>,
    /// Output CSV with columns ratio,miou_mean,miou_sd.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct CompareArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    #[command(flatten)]
    pub data: DataArgs,
    /// Output directory for summary.csv, runs.csv and sweep.csv.
    #[arg(long)]
    pub out: PathBuf,
    /// Comma-separated label budgets; defaults to `data.budget`.
    #[arg(long)]
    pub budgets: Option<String>,
    /// Number of seed replicates per cell.
    #[arg(long, default_value_t = 3)]
    pub seeds: u64,
    /// Comma-separated training modes.
    #[arg(long, default_value = "ce_only,consis_baseline,cpcm")]
    pub modes: String,
    /// Extra cpcm sweep over one key, e.g. `mask_ratio=0.15,0.45,0.75,0.9`.
    #[arg(long, value_name = "KEY=V1,V2,...")]
    pub sweep: Option<String>,
}

/// Parses `args` (including the program name), runs the command and maps
/// the outcome to an exit code: 0 on success, 2 on usage errors, 1 on
/// failure.
pub fn main_from<I, T>(args: I) -> ExitCode
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(e.exit_code().clamp(0, 255) as u8);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

pub fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Generate(a) => cmd_generate(&a),
        Command::Train(a) => cmd_train(&a),
        Command::Eval(a) => cmd_eval(&a),
        Command::MaskEval(a) => cmd_mask_eval(&a),
        Command::Compare(a) => cmd_compare(&a),
    }
}

fn load_config(args: &ConfigArgs, mut flags: Vec<Entry>) -> anyhow::Result<(RunConfig, Vec<Entry>)> {
    let mut entries = match &args.config {
        Some(path) => {
            let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
            crate::config::parse_entries(&text, path)?
        }
        None => Vec::new(),
    };
    for o in &args.overrides {
        entries.push(Entry::parse_override(o)?);
    }
    entries.append(&mut flags);
    let config = RunConfig::from_entries(&entries)?;
    Ok((config, entries))
}

fn load_data(config: &RunConfig, data: &DataArgs) -> anyhow::Result<PreparedData> {
    match data.data.as_ref().or(config.manifest.as_ref()) {
        Some(manifest) => PreparedData::from_manifest(manifest, config.data.voxel_size)
            .with_context(|| format!("loading dataset {}", manifest.display())),
        None => Ok(PreparedData::generate(&config.data)?),
    }
}

fn write_csv(path: &Path, header: &str, rows: &[String]) -> anyhow::Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    let mut text = String::with_capacity(64 * (rows.len() + 1));
    text.push_str(header);
    text.push('\n');
    for r in rows {
        text.push_str(r);
        text.push('\n');
    }
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn parse_list<T: std::str::FromStr>(s: &str, what: &str) -> anyhow::Result<Vec<T>>
where
    T::Err: std::fmt::Display,
{
    s.split(',')
        .map(str::trim)
        .filter(|x| !x.is_empty())
        .map(|x| x.parse::<T>().map_err(|e| anyhow::anyhow!("invalid {what} {x:?}: {e}")))
        .collect()
}

fn class_name(c: usize) -> String {
    CLASS_NAMES.get(c).map_or_else(|| format!("class{c}"), |n| n.to_string())
}

fn cmd_generate(a: &GenerateArgs) -> anyhow::Result<()> {
    let mut flags = Vec::new();
    if let Some(s) = a.seed {
        flags.push(Entry::flag("--seed", "seeds.data", s));
    }
    let (config, _) = load_config(&a.config, flags)?;
    let total = a.scenes.unwrap_or(config.data.train_scenes + config.data.eval_scenes);
    if total == 0 {
        bail!("--scenes must be positive");
    }
    let eval = match (a.eval_scenes, a.scenes) {
        (Some(e), _) => e,
        // Keep the configured train:eval proportion.
        (None, Some(_)) => {
            let share = config.data.eval_scenes as f64 / (config.data.train_scenes + config.data.eval_scenes) as f64;
            (share * total as f64).round() as usize
        }
        (None, None) => config.data.eval_scenes,
    }
    .min(total - 1);
    let scenes = generate_dataset(total, &config.data.scene, config.data.data_seed)?;
    let (train, held) = scenes.split_at(total - eval);
    let manifest = write_dataset(&a.out, train, held)?;
    let points: usize = scenes.iter().map(|s| s.cloud.len()).sum();
    println!(
        "wrote {} train + {} eval scenes ({points} points, {} classes) to {}",
        train.len(),
        held.len(),
        config.data.scene.num_classes,
        manifest.display()
    );
    Ok(())
}

fn cmd_train(a: &TrainArgs) -> anyhow::Result<()> {
    let mut flags = Vec::new();
    if let Some(m) = a.mode {
        flags.push(Entry::flag("--mode", "train.mode", m));
    }
    if let Some(e) = a.epochs {
        flags.push(Entry::flag("--epochs", "train.epochs", e));
    }
    if let Some(b) = a.budget {
        flags.push(Entry::flag("--budget", "data.budget", b));
    }
    let (config, _) = load_config(&a.config, flags)?;
    let spec = match a.seed {
        Some(s) => config.run_spec(config.train.mode.as_str()).replicate(s),
        None => config.run_spec(config.train.mode.as_str()),
    };
    let data = load_data(&config, &a.data)?;
    let scenes = data.weak_train(spec.budget, spec.label_seed)?;
    let labeled: usize = scenes.iter().map(|s| s.labels().labeled().len()).sum();
    let model = crate::model::ModelConfig {
        num_classes: data.num_classes,
        ..spec.model.clone()
    };
    eprintln!(
        "training {} on {} scenes ({} points, {labeled} labeled) for {} epochs",
        spec.train.mode,
        scenes.len(),
        data.total_train_points(),
        spec.train.epochs
    );
    let out = train(&scenes, &spec.train, &model, None)?;

    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    save_params(&out.params, a.out.join(CHECKPOINT_FILE))?;
    let rows: Vec<String> = out
        .history
        .iter()
        .map(|r| {
            format!(
                "{},{},{},{},{},{},{}",
                r.step, r.epoch, r.lr, r.loss.seg, r.loss.consis, r.loss.mask, r.loss.total
            )
        })
        .collect();
    write_csv(&a.out.join(METRICS_FILE), METRICS_HEADER, &rows)?;
    if let Some(last) = out.epochs.last() {
        println!(
            "epoch {}: l_seg {:.4} l_consis {:.5} l_mask {:.5} total {:.4}",
            last.epoch, last.mean_loss.seg, last.mean_loss.consis, last.mean_loss.mask, last.mean_loss.total
        );
    }
    if !data.eval.is_empty() {
        println!("eval mIoU {:.4}", evaluate(&out.params, &data.eval)?.miou);
    }
    println!("wrote {}", a.out.display());
    Ok(())
}

fn eval_scenes(data: &PreparedData, train_split: bool) -> anyhow::Result<Vec<EvalScene>> {
    let scenes = if train_split { data.train_as_eval()? } else { data.eval.clone() };
    if scenes.is_empty() {
        bail!("the selected split has no scenes");
    }
    Ok(scenes)
}

fn format_report(report: &EvalReport) -> String {
    let mut s = String::new();
    for (c, iou) in report.per_class.iter().enumerate() {
        let v = iou.map_or_else(|| "absent".to_string(), |v| format!("{:.4}", v));
        let _ = writeln!(s, "{:<10} {v}", class_name(c));
    }
    let _ = writeln!(s, "{:<10} {:.4}", "mIoU", report.miou);
    s
}

fn cmd_eval(a: &EvalArgs) -> anyhow::Result<()> {
    let (config, _) = load_config(&a.config, Vec::new())?;
    let params = load_params(&a.checkpoint).with_context(|| format!("loading checkpoint {}", a.checkpoint.display()))?;
    let data = load_data(&config, &a.data)?;
    let scenes = eval_scenes(&data, a.train_split)?;
    let report = evaluate(&params, &scenes)?;
    print!("{}", format_report(&report));
    if let Some(out) = &a.out {
        let mut rows: Vec<String> = report
            .per_class
            .iter()
            .enumerate()
            .map(|(c, iou)| format!("{},{}", class_name(c), iou.map_or_else(String::new, |v| v.to_string())))
            .collect();
        rows.push(format!("miou,{}", report.miou));
        write_csv(out, EVAL_HEADER, &rows)?;
    }
    Ok(())
}

fn cmd_mask_eval(a: &MaskEvalArgs) -> anyhow::Result<()> {
    let (config, _) = load_config(&a.config, Vec::new())?;
    let ratios = match &a.ratios {
        Some(r) => parse_list::<f64>(r, "ratio")?,
        None => config.eval.ratios.clone(),
    };
    let seeds = match &a.seeds {
        Some(s) => parse_list::<u64>(s, "seed")?,
        None => config.eval.seeds.clone(),
    };
    let region_size = a.region_size.unwrap_or(config.eval.region_size);
    let params = load_params(&a.checkpoint).with_context(|| format!("loading checkpoint {}", a.checkpoint.display()))?;
    let data = load_data(&config, &a.data)?;
    let scenes = eval_scenes(&data, a.train_split)?;
    let table = masked_evaluation(&params, &scenes, &ratios, region_size, &seeds)?;
    let rows: Vec<String> = table
        .iter()
        .map(|r| format!("{},{},{}", r.ratio, r.miou_mean, r.miou_sd))
        .collect();
    for r in &table {
        println!("ratio {:.2}  mIoU {:.4} ± {:.4}", r.ratio, r.miou_mean, r.miou_sd);
    }
    write_csv(&a.out, MASK_EVAL_HEADER, &rows)
}

/// Maps sweep shorthands onto configuration keys.
fn sweep_key(name: &str) -> &str {
    match name {
        "mask_ratio" => "mask.ratio",
        "region_size" => "mask.region_size",
        "alpha" => "train.alpha",
        "beta" => "train.beta",
        other => other,
    }
}

struct Cell {
    mode: TrainMode,
    budget: f64,
    sweep: Option<(String, String)>,
}

fn cmd_compare(a: &CompareArgs) -> anyhow::Result<()> {
    let (base, entries) = load_config(&a.config, Vec::new())?;
    let budgets = match &a.budgets {
        Some(b) => parse_list::<f64>(b, "budget")?,
        None => vec![base
            .budget_ratio()
            .context("compare needs ratio budgets; set data.budget or --budgets")?],
    };
    let modes = parse_list::<TrainMode>(&a.modes, "mode")?;
    if budgets.is_empty() || modes.is_empty() || a.seeds == 0 {
        bail!("compare needs at least one budget, one mode and one seed");
    }
    let sweep = match &a.sweep {
        Some(s) => {
            let (k, v) = s.split_once('=').context("--sweep expects KEY=V1,V2,...")?;
            let values: Vec<String> = v.split(',').map(|x| x.trim().to_string()).filter(|x| !x.is_empty()).collect();
            if values.is_empty() {
                bail!("--sweep has no values");
            }
            Some((sweep_key(k.trim()).to_string(), values))
        }
        None => None,
    };

    let mut cells = Vec::new();
    for &budget in &budgets {
        for &mode in &modes {
            cells.push(Cell { mode, budget, sweep: None });
        }
        if let Some((key, values)) = &sweep {
            for v in values {
                cells.push(Cell {
                    mode: TrainMode::Cpcm,
                    budget,
                    sweep: Some((key.clone(), v.clone())),
                });
            }
        }
    }

    let mut specs: Vec<RunSpec> = Vec::new();
    for (i, cell) in cells.iter().enumerate() {
        let mut e = entries.clone();
        e.push(Entry::flag("--budgets", "data.budget", cell.budget));
        e.push(Entry::flag("--modes", "train.mode", cell.mode));
        if let Some((k, v)) = &cell.sweep {
            e.push(Entry::flag("--sweep", k, v));
        }
        let config = RunConfig::from_entries(&e)?;
        let spec = config.run_spec(i.to_string());
        for s in 0..a.seeds {
            specs.push(spec.replicate(s));
        }
    }

    let data = load_data(&base, &a.data)?;
    eprintln!(
        "compare: {} cells x {} seeds on {} train / {} eval scenes",
        cells.len(),
        a.seeds,
        data.train.len(),
        data.eval.len()
    );
    let results = run_all(&data, &specs)?;
    let summaries = summarize(&results);

    // Results keep the order of `specs`: each cell's replicates are contiguous.
    let runs: Vec<String> = results
        .iter()
        .enumerate()
        .map(|(i, r)| {
            let cell = &cells[i / a.seeds as usize];
            let (k, v) = cell.sweep.clone().unwrap_or_default();
            format!(
                "{},{},{k},{v},{},{},{}",
                cell.mode,
                cell.budget,
                i as u64 % a.seeds,
                r.miou,
                r.final_seg_loss
            )
        })
        .collect();

    let mut summary_rows = Vec::new();
    let mut sweep_rows = Vec::new();
    println!("{:<16} {:>8} {:>16}", "mode", "budget", "mIoU");
    for s in &summaries {
        let cell = &cells[s.label.parse::<usize>().expect("cell index label")];
        match &cell.sweep {
            None => {
                summary_rows.push(format!("{},{},{},{}", cell.mode, cell.budget, s.miou_mean, s.miou_sd));
                println!(
                    "{:<16} {:>8} {:>8.4} ± {:.4}",
                    cell.mode.as_str(),
                    cell.budget,
                    s.miou_mean,
                    s.miou_sd
                );
            }
            Some((k, v)) => {
                sweep_rows.push(format!("{k},{v},{},{},{}", cell.budget, s.miou_mean, s.miou_sd));
            }
        }
    }
    if !sweep_rows.is_empty() {
        println!("sweep (cpcm):");
        for s in &summaries {
            let cell = &cells[s.label.parse::<usize>().expect("cell index label")];
            if let Some((k, v)) = &cell.sweep {
                println!("  {k}={v:<6} budget {:<8} {:.4} ± {:.4}", cell.budget, s.miou_mean, s.miou_sd);
            }
        }
    }

    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    write_csv(&a.out.join(SUMMARY_FILE), SUMMARY_HEADER, &summary_rows)?;
    write_csv(&a.out.join(RUNS_FILE), RUNS_HEADER, &runs)?;
    if !sweep_rows.is_empty() {
        write_csv(&a.out.join(SWEEP_FILE), SWEEP_HEADER, &sweep_rows)?;
    }
    Ok(())
}
