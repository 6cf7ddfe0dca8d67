use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use xai_kit::data::SplitPart;
use xai_kit::xai::Method;
use xai_kit::ClassWeights;

#[derive(Parser, Debug)]
#[command(name = "xai-kit", version, about = "Train, evaluate and explain MRI tumor classifiers")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Train a CNN on a `no/` + `yes/` image directory.
    Train(TrainArgs),
    /// Compute metrics and the ROC curve of a checkpoint on one split part.
    Evaluate(EvaluateArgs),
    /// Explain a single prediction with one or all methods.
    Explain(ExplainArgs),
    /// Summarize metrics JSON files as one CSV.
    Report(ReportArgs),
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[arg(long)]
    pub data_dir: PathBuf,
    /// Checkpoint path.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 35)]
    pub epochs: usize,
    #[arg(long, default_value_t = 50)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 2e-5)]
    pub lr: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Force the class-weighted loss.
    #[arg(long, conflicts_with = "standard")]
    pub cost_sensitive: bool,
    /// Force the plain loss even on imbalanced data.
    #[arg(long)]
    pub standard: bool,
    /// Class weights `w0,w1` for no-tumor and tumor; implies --cost-sensitive.
    #[arg(long, value_parser = parse_weights, conflicts_with = "standard")]
    pub weights: Option<ClassWeights>,
    /// Training report; JSON if the name ends in `.json`, CSV otherwise.
    #[arg(long)]
    pub report: Option<PathBuf>,
    /// Replay a split written by an earlier run instead of regenerating it.
    #[arg(long)]
    pub split_manifest: Option<PathBuf>,
    #[arg(long, default_value_t = 224)]
    pub image_size: usize,
    #[arg(long, default_value_t = 3)]
    pub channels: usize,
    #[arg(long, value_delimiter = ',', default_value = "32,64")]
    pub filters: Vec<usize>,
    #[arg(long, default_value_t = 3)]
    pub kernel_size: usize,
    #[arg(long, default_value_t = 256)]
    pub dense_units: usize,
    #[arg(long, default_value_t = 0.25)]
    pub dropout: f64,
}

#[derive(Args, Debug)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub data_dir: PathBuf,
    #[arg(long, value_parser = parse_split, default_value = "test")]
    pub split: SplitPart,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub split_manifest: Option<PathBuf>,
    /// Metrics JSON path.
    #[arg(long)]
    pub out: PathBuf,
    /// ROC CSV path; defaults to the metrics path with a `.roc.csv` suffix.
    #[arg(long)]
    pub roc: Option<PathBuf>,
    #[arg(long, default_value_t = 0.5)]
    pub threshold: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MethodArg {
    All,
    One(Method),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ClassArg {
    Auto,
    Index(usize),
}

#[derive(Args, Debug)]
pub struct ExplainArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub image: PathBuf,
    /// One of saliency, smoothgrad, grad-cam, grad-cam++, score-cam,
    /// faster-score-cam, lime, class-model, or `all`.
    #[arg(long, value_parser = parse_method)]
    pub method: MethodArg,
    #[arg(long, value_parser = parse_class, default_value = "auto")]
    pub class: ClassArg,
    /// Conv layer for CAM methods; the last one by default.
    #[arg(long)]
    pub layer: Option<String>,
    /// Output PNG. With `--method all` each method writes
    /// `<stem>.<method>.png` next to it.
    #[arg(long)]
    pub out: PathBuf,
    /// Also write `<stem>.panel.png`: the input followed by every map.
    #[arg(long)]
    pub panel: bool,
    #[arg(long, default_value_t = 0.5)]
    pub alpha: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 25)]
    pub samples: usize,
    #[arg(long, default_value_t = 0.15)]
    pub sigma_fraction: f64,
    #[arg(long, default_value_t = 10)]
    pub top_k: usize,
    #[arg(long, default_value_t = 200)]
    pub steps: usize,
    #[arg(long, default_value_t = 0.01)]
    pub lambda: f64,
    #[arg(long, default_value_t = 1.0)]
    pub step_size: f64,
    #[arg(long, default_value_t = 50)]
    pub regions: usize,
    #[arg(long, default_value_t = 1000)]
    pub lime_samples: usize,
    #[arg(long)]
    pub kernel_width: Option<f64>,
    #[arg(long, default_value_t = 1.0)]
    pub ridge_lambda: f64,
    #[arg(long, default_value_t = 5)]
    pub top_regions: usize,
    #[arg(long, default_value_t = 0.0)]
    pub fill: f64,
}

#[derive(Args, Debug)]
pub struct ReportArgs {
    /// Metrics JSON files, optionally as `tag=path`.
    #[arg(long, num_args = 1.., required = true)]
    pub inputs: Vec<String>,
    #[arg(long)]
    pub out: PathBuf,
}

fn parse_weights(s: &str) -> Result<ClassWeights, String> {
    let parts: Vec<&str> = s.split(',').map(str::trim).collect();
    let [w0, w1] = parts[..] else {
        return Err("expected two comma-separated weights w0,w1".into());
    };
    let parse = |v: &str| v.parse::<f64>().map_err(|e| format!("bad weight {v:?}: {e}"));
    ClassWeights::new(parse(w1)?, parse(w0)?).map_err(|e| e.to_string())
}

fn parse_split(s: &str) -> Result<SplitPart, String> {
    match s {
        "train" => Ok(SplitPart::Train),
        "val" => Ok(SplitPart::Validation),
        "test" => Ok(SplitPart::Test),
        _ => Err(format!("split must be train, val or test, got {s:?}")),
    }
}

fn parse_method(s: &str) -> Result<MethodArg, String> {
    if s == "all" {
        return Ok(MethodArg::All);
    }
    s.parse().map(MethodArg::One).map_err(|e: xai_kit::Error| e.to_string())
}

fn parse_class(s: &str) -> Result<ClassArg, String> {
    match s {
        "auto" => Ok(ClassArg::Auto),
        _ => s
            .parse()
            .map(ClassArg::Index)
            .map_err(|_| format!("class must be auto or an index, got {s:?}")),
    }
}
