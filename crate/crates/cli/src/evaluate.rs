use std::time::Instant;

use anyhow::{Context, Result};
use serde_json::json;
use xai_kit::metrics::{roc_csv, MetricsReport};
use xai_kit::{evaluate, load_checkpoint};

use crate::args::EvaluateArgs;
use crate::output::{sibling, write_atomic, write_json, RunManifest};
use crate::train::{load_classes, make_split};

pub fn run(args: EvaluateArgs, argv: &[String]) -> Result<()> {
    let started = Instant::now();
    let model = load_checkpoint(&args.model)
        .with_context(|| format!("loading checkpoint {}", args.model.display()))?;
    let classes = load_classes(&args.data_dir, model.config())?;
    let split = make_split(classes, args.seed, args.split_manifest.as_deref())?;
    let samples = split.part(args.split);
    let eval = evaluate(&model, samples, args.threshold)?;
    let report = MetricsReport::new(&eval.metrics, &eval.roc, eval.confusion, args.threshold);

    println!("samples:     {}", samples.len());
    println!("accuracy:    {:.4}", report.accuracy);
    println!("precision:   {:.4}", report.precision);
    println!("recall:      {:.4}", report.recall);
    println!("f1:          {:.4}", report.f1);
    println!("specificity: {:.4}", report.specificity);
    println!("auc:         {:.4}", report.auc);
    for name in &eval.metrics.undefined {
        println!("note: {name} has a zero denominator and is reported as 0");
    }

    let mut manifest = RunManifest::new("evaluate", argv);
    write_json(&args.out, &report)?;
    manifest.artifact(&args.out);
    let roc_path = args.roc.clone().unwrap_or_else(|| sibling(&args.out, "roc.csv"));
    write_atomic(&roc_path, roc_csv(&eval.roc).as_bytes())?;
    manifest.artifact(&roc_path);

    manifest.config = json!({
        "model": args.model.display().to_string(),
        "split": args.split,
        "threshold": args.threshold,
        "split_manifest": args.split_manifest.as_ref().map(|p| p.display().to_string()),
    });
    manifest.seed = Some(args.seed);
    manifest.dataset_root = Some(args.data_dir.display().to_string());
    manifest.finish(&sibling(&args.out, "manifest.json"), started)
}
