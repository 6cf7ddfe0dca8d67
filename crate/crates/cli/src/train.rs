use std::fs;
use std::path::Path;
use std::time::Instant;

use anyhow::{Context, Result};
use serde_json::json;
use xai_kit::data::{load_dataset, match_channels, split_dataset, ImageSample, SplitManifest, SplitRatios};
use xai_kit::{save_checkpoint, train, CnnModel, DatasetSplit, ModelConfig, TrainConfig};

use crate::args::TrainArgs;
use crate::output::{sibling, write_atomic, write_json, RunManifest};

/// Loads `<root>/no` and `<root>/yes` at the model's input size.
pub fn load_classes(root: &Path, config: &ModelConfig) -> Result<[Vec<ImageSample>; 2]> {
    let mut classes = load_dataset(root, config.input_height, config.input_width)
        .with_context(|| format!("loading dataset {}", root.display()))?;
    for class in classes.iter_mut() {
        for s in class.iter_mut() {
            s.pixels = match_channels(&s.pixels, config.input_channels)?;
        }
    }
    Ok(classes)
}

/// The split from a manifest file if given, otherwise regenerated from seed.
pub fn make_split(classes: [Vec<ImageSample>; 2], seed: u64, manifest: Option<&Path>) -> Result<DatasetSplit> {
    match manifest {
        Some(path) => {
            let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            let m: SplitManifest = serde_json::from_str(&text)
                .with_context(|| format!("malformed split manifest {}", path.display()))?;
            Ok(m.apply(classes.into_iter().flatten().collect())?)
        }
        None => Ok(split_dataset(classes.to_vec(), SplitRatios::default(), seed)?),
    }
}

pub fn run(args: TrainArgs, argv: &[String]) -> Result<()> {
    let started = Instant::now();
    let config = ModelConfig {
        input_height: args.image_size,
        input_width: args.image_size,
        input_channels: args.channels,
        conv_filters: args.filters.clone(),
        kernel_size: args.kernel_size,
        dense_units: args.dense_units,
        dropout_rate: args.dropout,
        num_classes: 2,
    };
    config.stage_sizes()?;

    let classes = load_classes(&args.data_dir, &config)?;
    let (n0, n1) = (classes[0].len(), classes[1].len());
    let balanced = n0 == n1;
    println!(
        "class counts: no={n0} yes={n1} ({})",
        if balanced { "balanced" } else { "imbalanced" }
    );
    let cost_sensitive = if args.standard {
        false
    } else {
        args.cost_sensitive || args.weights.is_some() || !balanced
    };
    println!("branch: {}", if cost_sensitive { "cost-sensitive" } else { "standard" });

    let split = make_split(classes, args.seed, args.split_manifest.as_deref())?;
    println!(
        "split: train={} val={} test={}",
        split.train.len(),
        split.validation.len(),
        split.test.len()
    );
    let train_config = TrainConfig {
        epochs: args.epochs,
        batch_size: args.batch_size,
        learning_rate: args.lr,
        cost_sensitive,
        weights: args.weights,
        seed: args.seed,
    };
    let model = CnnModel::new(config.clone(), args.seed)?;
    let (model, report) = train(model, &split, &train_config)?;
    if let Some(w) = report.weights {
        println!("class weights: no={} yes={}", w.negative, w.positive);
    }
    for e in 0..report.epochs() {
        println!(
            "epoch {:>3}: train_loss={:.4} train_acc={:.4} val_loss={:.4} val_acc={:.4}",
            e + 1,
            report.train_loss[e],
            report.train_accuracy[e],
            report.val_loss[e],
            report.val_accuracy[e]
        );
    }

    let mut manifest = RunManifest::new("train", argv);
    save_checkpoint(&model, &args.out)
        .with_context(|| format!("writing checkpoint {}", args.out.display()))?;
    manifest.artifact(&args.out);

    let report_path = args.report.clone().unwrap_or_else(|| sibling(&args.out, "report.csv"));
    if report_path.extension().is_some_and(|e| e == "json") {
        write_json(&report_path, &report)?;
    } else {
        write_atomic(&report_path, report.to_csv().as_bytes())?;
    }
    manifest.artifact(&report_path);

    let split_path = sibling(&args.out, "split.json");
    write_json(&split_path, &SplitManifest::from_split(&split))?;
    manifest.artifact(&split_path);

    manifest.config = json!({ "model": config, "train": train_config });
    manifest.seed = Some(args.seed);
    manifest.dataset_root = Some(args.data_dir.display().to_string());
    manifest.finish(&sibling(&args.out, "manifest.json"), started)
}
