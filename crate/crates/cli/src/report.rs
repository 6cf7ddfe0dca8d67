use std::fs;
use std::path::Path;
use std::time::Instant;

use anyhow::{Context, Result};
use serde_json::json;
use xai_kit::metrics::MetricsReport;

use crate::args::ReportArgs;
use crate::output::{sibling, write_atomic, RunManifest};

pub const HEADER: &str = "model,accuracy,precision,recall,f1,specificity,auc";

/// `tag=path` or a bare path tagged by its file stem.
fn tag_and_path(input: &str) -> (String, &str) {
    match input.split_once('=') {
        Some((tag, path)) if !tag.is_empty() && !tag.contains('/') => (tag.to_string(), path),
        _ => {
            let stem = Path::new(input)
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_else(|| input.to_string());
            (stem, input)
        }
    }
}

pub fn row(tag: &str, m: &MetricsReport) -> String {
    format!(
        "{tag},{:.4},{:.4},{:.4},{:.4},{:.4},{:.4}",
        m.accuracy, m.precision, m.recall, m.f1, m.specificity, m.auc
    )
}

pub fn run(args: ReportArgs, argv: &[String]) -> Result<()> {
    let started = Instant::now();
    let mut csv = format!("{HEADER}\n");
    for input in &args.inputs {
        let (tag, path) = tag_and_path(input);
        let text = fs::read_to_string(path).with_context(|| format!("reading {path}"))?;
        let m: MetricsReport =
            serde_json::from_str(&text).with_context(|| format!("malformed metrics JSON in {path}"))?;
        csv.push_str(&row(&tag, &m));
        csv.push('\n');
    }
    write_atomic(&args.out, csv.as_bytes())?;
    print!("{csv}");
    let mut manifest = RunManifest::new("report", argv);
    manifest.artifact(&args.out);
    manifest.config = json!({ "inputs": args.inputs });
    manifest.finish(&sibling(&args.out, "manifest.json"), started)
}
