//! Command-line front end: `gen`, `train`, `eval`, `ablate` and `inspect`.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use clap::builder::PossibleValuesParser;
use clap::{Args, Parser, Subcommand};
use serde_json::{json, Value};
use thiserror::Error;

use crate::config::{parse_value, resolve, ConfigError, RunConfig};
use crate::dpatr::Structure;
use crate::evaluation::{evaluate, Scores};
use crate::geometry::ProximityMetric;
use crate::model::{GroupingSource, ModelError, SpdpModel};
use crate::relation::{PpeMode, RelationMode};
use crate::synthdata::{generate_dataset, read_dataset, write_dataset, DataError, Dataset, Split, DATASET_FORMAT};
use crate::tensor::checkpoint::{Checkpoint, CheckpointError};
use crate::tensor::TensorError;
use crate::training::{train, TrainError};

pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;

pub const TRAIN_FILE: &str = "train.jsonl";
pub const VAL_FILE: &str = "val.jsonl";
pub const CONFIG_FILE: &str = "config.json";
pub const LOG_FILE: &str = "log.jsonl";
pub const BEST_CKPT: &str = "best.ckpt";
pub const LAST_CKPT: &str = "last.ckpt";
pub const SCORES_CSV: &str = "scores.csv";
pub const SCORES_JSON: &str = "scores.json";
pub const ABLATION_CSV: &str = "ablation.csv";

const GRID_AXES: [&str; 4] = ["ppe", "proximity", "relation", "structure"];

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Train(#[from] TrainError),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        let tensor_code = |e: &TensorError| match e {
            TensorError::NonFinite { .. } => EXIT_NUMERIC,
            _ => EXIT_DATA,
        };
        let model_code = |e: &ModelError| match e {
            ModelError::Tensor(t) => tensor_code(t),
            _ => EXIT_DATA,
        };
        match self {
            Self::Usage(_) | Self::Config(_) => EXIT_USAGE,
            Self::Data(_) | Self::Checkpoint(_) | Self::Io { .. } => EXIT_DATA,
            Self::Model(e) => model_code(e),
            Self::Train(e) => match e {
                TrainError::NonFinite { .. } => EXIT_NUMERIC,
                TrainError::Config(_) => EXIT_USAGE,
                TrainError::Model(m) => model_code(m),
                TrainError::Empty | TrainError::Callback(_) => EXIT_DATA,
            },
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::Io {
        path: path.display().to_string(),
        source,
    }
}

#[derive(Debug, Parser)]
#[command(name = "spdp", version, about = "Panoramic activity recognition on synthetic scenes")]
#[command(after_help = switch_help())]
pub struct Cli {
    #[command(flatten)]
    pub common: Common,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Default, Args)]
pub struct Common {
    /// JSON config file; nested objects or dotted keys.
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Seed for model, data and shuffling.
    #[arg(long, global = true, value_name = "N")]
    pub seed: Option<u64>,
    #[arg(long, global = true, value_parser = PossibleValuesParser::new(PpeMode::ALL.iter().map(|m| m.name())))]
    pub ppe: Option<String>,
    #[arg(long, global = true, value_parser = PossibleValuesParser::new(ProximityMetric::ALL.map(|m| m.name())))]
    pub proximity: Option<String>,
    #[arg(long, global = true, value_parser = PossibleValuesParser::new(RelationMode::ALL.iter().map(|m| m.name())))]
    pub relation: Option<String>,
    #[arg(long, global = true, value_parser = PossibleValuesParser::new(Structure::ALL.map(|m| m.name())))]
    pub structure: Option<String>,
    #[arg(long, global = true, value_parser = PossibleValuesParser::new(GroupingSource::ALL.map(|m| m.name())))]
    pub grouping: Option<String>,
    /// Output directory.
    #[arg(long, global = true, value_name = "DIR")]
    pub out: Option<PathBuf>,
    /// Any other setting as a dotted key, e.g. `--set train.epochs=5`.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate train and validation datasets into the output directory.
    Gen,
    /// Train a model and write its run directory.
    Train {
        /// Directory with train.jsonl and val.jsonl.
        #[arg(long, value_name = "DIR")]
        data: Option<PathBuf>,
        /// Continue from last.ckpt in the output directory.
        #[arg(long)]
        resume: bool,
    },
    /// Score a checkpoint on the validation set.
    Eval {
        #[arg(long, value_name = "PATH")]
        checkpoint: PathBuf,
        #[arg(long, value_name = "DIR")]
        data: Option<PathBuf>,
    },
    /// Train and score every cell of a switch grid.
    Ablate {
        /// Axis and values, e.g. `proximity=giou_s,tgiou`; repeat for more axes.
        #[arg(long, value_name = "AXIS=V1,V2")]
        grid: Vec<String>,
        #[arg(long, value_name = "DIR")]
        data: Option<PathBuf>,
    },
    /// Summarize a dataset or checkpoint file.
    Inspect { path: PathBuf },
}

fn switch_help() -> String {
    let list = |names: Vec<&str>| names.join(", ");
    format!(
        "Ablation switches:\n  ppe:       {}\n  proximity: {}\n  relation:  {}\n  structure: {}\n  grouping:  {}",
        list(PpeMode::ALL.iter().map(|m| m.name()).collect()),
        list(ProximityMetric::ALL.map(|m| m.name()).to_vec()),
        list(RelationMode::ALL.iter().map(|m| m.name()).collect()),
        list(Structure::ALL.map(|m| m.name()).to_vec()),
        list(GroupingSource::ALL.map(|m| m.name()).to_vec()),
    )
}

impl Common {
    /// Flag values as dotted-key overrides, in increasing precedence.
    pub fn overrides(&self) -> Result<Vec<(String, Value)>, CliError> {
        let mut out = Vec::new();
        for item in &self.set {
            let (key, raw) = item
                .split_once('=')
                .ok_or_else(|| CliError::Usage(format!("--set expects KEY=VALUE, got `{item}`")))?;
            out.push((key.trim().to_string(), parse_value(raw.trim())));
        }
        if let Some(seed) = self.seed {
            for key in ["seed", "data.seed", "train.seed"] {
                out.push((key.to_string(), json!(seed)));
            }
        }
        let switches = [
            ("model.ppe", &self.ppe),
            ("model.proximity", &self.proximity),
            ("model.relation", &self.relation),
            ("model.structure", &self.structure),
            ("grouping", &self.grouping),
        ];
        for (key, value) in switches {
            if let Some(v) = value {
                out.push((key.to_string(), json!(v)));
            }
        }
        if let Some(dir) = &self.out {
            out.push(("out".to_string(), json!(dir)));
        }
        Ok(out)
    }

    pub fn resolve(&self) -> Result<RunConfig, CliError> {
        Ok(resolve(self.config.as_deref(), &self.overrides()?)?)
    }
}

/// Parses `args` (including the program name), runs the command and returns
/// the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = e.print();
            if code != 0 {
                eprintln!("\n{}", switch_help());
            }
            return code;
        }
    };
    match execute(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn execute(cli: &Cli) -> Result<(), CliError> {
    let cfg = cli.common.resolve()?;
    match &cli.command {
        Command::Gen => cmd_gen(&cfg),
        Command::Train { data, resume } => {
            let dir = data.clone().unwrap_or_else(|| cfg.data_dir.clone());
            let (train_set, val_set) = load_splits(&dir)?;
            let scores = cmd_train(&cfg, &train_set, &val_set, *resume)?;
            println!("{}", Scores::csv_header());
            println!("{}", scores.csv_row());
            Ok(())
        }
        Command::Eval { checkpoint, data } => {
            let dir = data.clone().unwrap_or_else(|| cfg.data_dir.clone());
            let (train_set, val_set) = load_splits(&dir)?;
            let scores = cmd_eval(&cfg, checkpoint, eval_split(&train_set, &val_set))?;
            println!("{}", Scores::csv_header());
            println!("{}", scores.csv_row());
            Ok(())
        }
        Command::Ablate { grid, data } => {
            let dir = data.clone().unwrap_or_else(|| cfg.data_dir.clone());
            let cells = parse_grid(grid)?;
            let (train_set, val_set) = load_splits(&dir)?;
            let table = cmd_ablate(&cfg, &cells, &train_set, &val_set)?;
            print!("{table}");
            Ok(())
        }
        Command::Inspect { path } => {
            println!("{}", inspect(path)?);
            Ok(())
        }
    }
}

fn write_file(path: &Path, text: &str) -> Result<(), CliError> {
    fs::write(path, text).map_err(io_err(path))
}

fn ensure_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(io_err(dir))
}

fn echo_config(cfg: &RunConfig) -> Result<(), CliError> {
    ensure_dir(&cfg.out)?;
    write_file(&cfg.out.join(CONFIG_FILE), &(cfg.to_json() + "\n"))
}

/// Writes `train.jsonl` and `val.jsonl` (plus blobs) into `cfg.out`.
pub fn cmd_gen(cfg: &RunConfig) -> Result<(), CliError> {
    echo_config(cfg)?;
    let train_set = generate_dataset(&cfg.data, Split::Train)?;
    let val_spec = crate::synthdata::DatasetSpec {
        scenes: cfg.val_scenes,
        ..cfg.data.clone()
    };
    let val_set = generate_dataset(&val_spec, Split::Val)?;
    write_dataset(&train_set, &cfg.out.join(TRAIN_FILE))?;
    write_dataset(&val_set, &cfg.out.join(VAL_FILE))?;
    eprintln!(
        "wrote {} train and {} val scenes to {}",
        train_set.samples.len(),
        val_set.samples.len(),
        cfg.out.display()
    );
    Ok(())
}

pub fn load_splits(dir: &Path) -> Result<(Dataset, Dataset), CliError> {
    Ok((read_dataset(&dir.join(TRAIN_FILE))?, read_dataset(&dir.join(VAL_FILE))?))
}

fn eval_split<'a>(train_set: &'a Dataset, val_set: &'a Dataset) -> &'a Dataset {
    if val_set.samples.is_empty() {
        train_set
    } else {
        val_set
    }
}

fn check_dims(cfg: &RunConfig, ds: &Dataset) -> Result<(), CliError> {
    let m = &cfg.model;
    let s = &ds.spec;
    let pairs = [
        ("d", m.d, s.d),
        ("frames", m.frames, s.frames),
        ("crop_h", m.crop_h, s.crop_h),
        ("crop_w", m.crop_w, s.crop_w),
        ("grid_h", m.grid_h, s.grid_h),
        ("grid_w", m.grid_w, s.grid_w),
    ];
    for (name, model, data) in pairs {
        if model != data {
            return Err(ModelError::DimMismatch(format!("model.{name} = {model} but the dataset has {data}")).into());
        }
    }
    Ok(())
}

fn write_scores(dir: &Path, scores: &Scores) -> Result<(), CliError> {
    write_file(
        &dir.join(SCORES_CSV),
        &format!("{}\n{}\n", Scores::csv_header(), scores.csv_row()),
    )?;
    let json = serde_json::to_string_pretty(scores).expect("scores serialize");
    write_file(&dir.join(SCORES_JSON), &(json + "\n"))
}

/// Trains into `cfg.out`, then scores `best.ckpt` with `cfg.grouping`.
pub fn cmd_train(cfg: &RunConfig, train_set: &Dataset, val_set: &Dataset, resume: bool) -> Result<Scores, CliError> {
    check_dims(cfg, train_set)?;
    check_dims(cfg, val_set)?;
    echo_config(cfg)?;
    let out = &cfg.out;
    let log_path = out.join(LOG_FILE);

    let (model, adam, start_epoch, mut best) = if resume {
        let ck = Checkpoint::load(&out.join(LAST_CKPT))?;
        let (model, adam) = SpdpModel::from_checkpoint(&ck)?;
        if model.config != cfg.model {
            return Err(CliError::Usage(format!(
                "{} was trained with a different model config",
                out.join(LAST_CKPT).display()
            )));
        }
        let epoch = ck.meta["extra"]["epoch"]
            .as_u64()
            .ok_or_else(|| ModelError::Checkpoint("missing extra.epoch".into()))?;
        let best = ck.meta["extra"]["best_f_a"].as_f64().unwrap_or(f64::NEG_INFINITY);
        truncate_log(&log_path, epoch as usize)?;
        (model, adam, epoch as usize + 1, best)
    } else {
        write_file(&log_path, "")?;
        (SpdpModel::new(cfg.model.clone(), cfg.seed)?, None, 0, f64::NEG_INFINITY)
    };

    let mut log = fs::OpenOptions::new()
        .append(true)
        .open(&log_path)
        .map_err(io_err(&log_path))?;
    let callback = |e: CliError| TrainError::Callback(e.to_string());
    let outcome = train(
        model,
        adam,
        start_epoch,
        &train_set.samples,
        &val_set.samples,
        &cfg.train,
        &cfg.loss,
        |report| {
            let line = serde_json::to_string(report.log).expect("log serializes");
            writeln!(log, "{line}").map_err(|e| callback(io_err(&log_path)(e)))?;
            let improved = report.log.f_a > best;
            if improved {
                best = report.log.f_a;
            }
            let extra = json!({"epoch": report.log.epoch, "best_f_a": best});
            if improved {
                report
                    .model
                    .to_checkpoint(None, extra.clone())
                    .save(&out.join(BEST_CKPT))
                    .map_err(|e| callback(e.into()))?;
            }
            report
                .model
                .to_checkpoint(Some(report.adam), extra)
                .save(&out.join(LAST_CKPT))
                .map_err(|e| callback(e.into()))?;
            eprintln!(
                "epoch {:>3}  step {:>5}  loss {:.4}  F_a {:.4}  Mat.IoU {:.4}",
                report.log.epoch, report.log.step, report.log.loss.total, report.log.f_a, report.log.mat_iou
            );
            Ok(())
        },
    )?;
    if !out.join(BEST_CKPT).exists() {
        // Zero epochs to run: the initial model is the best one.
        outcome
            .model
            .to_checkpoint(None, json!({"epoch": null, "best_f_a": null}))
            .save(&out.join(BEST_CKPT))?;
    }
    cmd_eval(cfg, &out.join(BEST_CKPT), eval_split(train_set, val_set))
}

/// Keeps the log lines for epochs up to and including `last_epoch`.
fn truncate_log(path: &Path, last_epoch: usize) -> Result<(), CliError> {
    let file = fs::File::open(path).map_err(io_err(path))?;
    let mut kept = String::new();
    for line in BufReader::new(file).lines() {
        let line = line.map_err(io_err(path))?;
        let epoch = serde_json::from_str::<Value>(&line)
            .ok()
            .and_then(|v| v["epoch"].as_u64());
        if matches!(epoch, Some(e) if e as usize <= last_epoch) {
            kept.push_str(&line);
            kept.push('\n');
        }
    }
    write_file(path, &kept)
}

/// Scores a checkpoint on `data` with `cfg.grouping`; writes the score files
/// into `cfg.out`.
pub fn cmd_eval(cfg: &RunConfig, checkpoint: &Path, data: &Dataset) -> Result<Scores, CliError> {
    let ck = Checkpoint::load(checkpoint)?;
    let (model, _) = SpdpModel::from_checkpoint(&ck)?;
    let cfg_for_check = RunConfig {
        model: model.config.clone(),
        ..cfg.clone()
    };
    check_dims(&cfg_for_check, data)?;
    let scores = evaluate(&model, &data.samples, cfg.grouping)?;
    ensure_dir(&cfg.out)?;
    write_scores(&cfg.out, &scores)?;
    Ok(scores)
}

/// One ablation cell: a name and its `model.<axis>` overrides.
#[derive(Clone, Debug, PartialEq)]
pub struct Cell {
    pub name: String,
    pub settings: Vec<(String, String)>,
}

/// Expands `axis=v1,v2` items into the cartesian product of cells.
pub fn parse_grid(items: &[String]) -> Result<Vec<Cell>, CliError> {
    let mut axes: Vec<(String, Vec<String>)> = Vec::new();
    for item in items {
        let (axis, values) = item
            .split_once('=')
            .ok_or_else(|| CliError::Usage(format!("--grid expects AXIS=V1,V2, got `{item}`")))?;
        let axis = axis.trim();
        if !GRID_AXES.contains(&axis) {
            return Err(CliError::Usage(format!(
                "unknown grid axis `{axis}` (expected one of {})\n{}",
                GRID_AXES.join(", "),
                switch_help()
            )));
        }
        if axes.iter().any(|(a, _)| a == axis) {
            return Err(CliError::Usage(format!("grid axis `{axis}` given twice")));
        }
        let values: Vec<String> = values.split(',').map(|v| v.trim().to_string()).collect();
        for v in &values {
            let ok = match axis {
                "ppe" => v.parse::<PpeMode>().is_ok(),
                "proximity" => v.parse::<ProximityMetric>().is_ok(),
                "relation" => v.parse::<RelationMode>().is_ok(),
                _ => v.parse::<Structure>().is_ok(),
            };
            if !ok {
                return Err(CliError::Usage(format!(
                    "invalid cell value `{axis}={v}`\n{}",
                    switch_help()
                )));
            }
        }
        axes.push((axis.to_string(), values));
    }
    let mut cells = vec![Cell {
        name: String::new(),
        settings: Vec::new(),
    }];
    for (axis, values) in &axes {
        cells = cells
            .into_iter()
            .flat_map(|c| {
                values.iter().map(move |v| {
                    let mut settings = c.settings.clone();
                    settings.push((axis.clone(), v.clone()));
                    Cell {
                        name: String::new(),
                        settings,
                    }
                })
            })
            .collect();
    }
    for c in &mut cells {
        c.name = if c.settings.is_empty() {
            "base".to_string()
        } else {
            c.settings
                .iter()
                .map(|(a, v)| format!("{a}-{v}"))
                .collect::<Vec<_>>()
                .join("_")
        };
    }
    Ok(cells)
}

/// Trains and scores every cell in `cfg.out/<cell>`; returns and writes the
/// CSV table.
pub fn cmd_ablate(cfg: &RunConfig, cells: &[Cell], train_set: &Dataset, val_set: &Dataset) -> Result<String, CliError> {
    ensure_dir(&cfg.out)?;
    let mut table = format!("cell,{}\n", Scores::csv_header());
    for cell in cells {
        let mut base = serde_json::to_value(cfg).expect("config serializes");
        for (axis, value) in &cell.settings {
            base["model"][axis.as_str()] = json!(value);
        }
        base["out"] = json!(cfg.out.join(&cell.name));
        let cell_cfg: RunConfig =
            serde_json::from_value(base).map_err(|e| CliError::Usage(format!("cell {}: {e}", cell.name)))?;
        eprintln!("cell {}", cell.name);
        let scores = cmd_train(&cell_cfg, train_set, val_set, false)?;
        table.push_str(&format!("{},{}\n", cell.name, scores.csv_row()));
    }
    write_file(&cfg.out.join(ABLATION_CSV), &table)?;
    Ok(table)
}

/// Human-readable summary of a dataset or checkpoint file.
pub fn inspect(path: &Path) -> Result<String, CliError> {
    let file = fs::File::open(path).map_err(io_err(path))?;
    let mut first = String::new();
    BufReader::new(file).read_line(&mut first).map_err(io_err(path))?;
    let format = serde_json::from_str::<Value>(&first)
        .ok()
        .and_then(|v| v["format"].as_str().map(str::to_string));
    match format.as_deref() {
        Some(DATASET_FORMAT) => Ok(inspect_dataset(&read_dataset(path)?)),
        Some(_) => Ok(inspect_checkpoint(&Checkpoint::load(path)?)),
        None => Err(DataError::Parse {
            path: path.display().to_string(),
            line: 1,
            detail: "not a dataset or checkpoint manifest".into(),
        }
        .into()),
    }
}

fn inspect_dataset(ds: &Dataset) -> String {
    let n = ds.samples.len();
    let individuals: Vec<usize> = ds.samples.iter().map(|s| s.individuals()).collect();
    let groups: Vec<usize> = ds.samples.iter().map(|s| s.groups.num_groups()).collect();
    let mean = |v: &[usize]| {
        if v.is_empty() {
            0.0
        } else {
            v.iter().sum::<usize>() as f64 / v.len() as f64
        }
    };
    let range = |v: &[usize]| match (v.iter().min(), v.iter().max()) {
        (Some(a), Some(b)) => format!("{a}..={b}"),
        _ => "-".into(),
    };
    let flavor = ds.samples.first().map(|s| s.features.flavor().to_string());
    let mut out = format!("dataset: {n} scenes\n");
    out.push_str(&format!(
        "flavor: {}\n",
        flavor.unwrap_or_else(|| ds.spec.flavor.to_string())
    ));
    out.push_str(&format!(
        "individuals per scene: {} (mean {:.2})\n",
        range(&individuals),
        mean(&individuals)
    ));
    out.push_str(&format!(
        "groups per scene: {} (mean {:.2})\n",
        range(&groups),
        mean(&groups)
    ));
    out.push_str(&format!(
        "distractors: {}\n",
        ds.samples.iter().map(|s| s.distractors.len()).sum::<usize>()
    ));
    out.push_str(&format!(
        "spec: {}",
        serde_json::to_string(&ds.spec).expect("spec serializes")
    ));
    out
}

fn inspect_checkpoint(ck: &Checkpoint) -> String {
    let (adam, params): (Vec<_>, Vec<_>) = ck.tensors.iter().partition(|(n, _)| n.starts_with("adam."));
    let count: usize = params.iter().map(|(_, t)| t.numel()).sum();
    let mut out = format!("checkpoint: {} parameter tensors, {count} values\n", params.len());
    out.push_str(&format!("optimizer moments: {}\n", adam.len()));
    if let Some(step) = ck.meta["adam"]["step"].as_u64() {
        out.push_str(&format!("optimizer step: {step}\n"));
    }
    out.push_str(&format!("model: {}\n", ck.meta["model"]));
    out.push_str(&format!("extra: {}", ck.meta["extra"]));
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cli(args: &[&str]) -> Cli {
        Cli::try_parse_from(std::iter::once("spdp").chain(args.iter().copied())).unwrap()
    }

    #[test]
    fn flags_become_overrides() {
        let c = cli(&[
            "train",
            "--seed",
            "7",
            "--ppe",
            "off",
            "--set",
            "train.epochs=2",
            "--out",
            "x",
        ]);
        let cfg = c.common.resolve().unwrap();
        assert_eq!((cfg.seed, cfg.data.seed, cfg.train.seed), (7, 7, 7));
        assert_eq!(cfg.model.ppe, PpeMode::Off);
        assert_eq!(cfg.train.epochs, 2);
        assert_eq!(cfg.out, PathBuf::from("x"));
    }

    #[test]
    fn bad_switch_value_is_rejected_by_the_parser() {
        let err = Cli::try_parse_from(["spdp", "train", "--relation", "sometimes"]).unwrap_err();
        assert!(err.use_stderr());
        assert!(err.to_string().contains("rs_only"));
    }

    #[test]
    fn grid_is_a_cartesian_product() {
        let cells = parse_grid(&["proximity=giou_s,tgiou".into(), "relation=rs_only,rp_only,both".into()]).unwrap();
        assert_eq!(cells.len(), 6);
        assert_eq!(cells[0].name, "proximity-giou_s_relation-rs_only");
        assert_eq!(cells[5].name, "proximity-tgiou_relation-both");
        assert_eq!(parse_grid(&[]).unwrap()[0].name, "base");
    }

    #[test]
    fn invalid_cells_are_usage_errors() {
        for bad in ["depth=1,2", "ppe=sideways", "relation"] {
            let err = parse_grid(&[bad.to_string()]).unwrap_err();
            assert_eq!(err.exit_code(), EXIT_USAGE, "{bad}");
        }
    }

    #[test]
    fn exit_codes() {
        let nf = CliError::Train(TrainError::NonFinite {
            epoch: 0,
            step: 0,
            detail: String::new(),
        });
        assert_eq!(nf.exit_code(), EXIT_NUMERIC);
        let dim = CliError::Model(ModelError::DimMismatch(String::new()));
        assert_eq!(dim.exit_code(), EXIT_DATA);
        assert_eq!(CliError::Usage(String::new()).exit_code(), EXIT_USAGE);
    }
}
