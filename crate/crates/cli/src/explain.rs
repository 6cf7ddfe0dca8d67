use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use image::RgbImage;
use serde_json::{json, Value};
use xai_kit::data::{load_image, match_channels, resize_bilinear};
use xai_kit::render::{compose_panel, render_lime_overlay, render_overlay, tensor_to_rgb};
use xai_kit::xai::{
    class_model_visualization, explain_lime, faster_score_cam, grad_cam, grad_cam_pp, predicted_class,
    score_cam, smoothgrad, vanilla_saliency, CamConfig, Heatmap, LimeConfig, Method,
};
use xai_kit::{load_checkpoint, Classifier, CnnModel, Tensor};

use crate::args::{ClassArg, ExplainArgs, MethodArg};
use crate::output::{sibling, write_json, write_png, RunManifest};

struct Job<'a> {
    model: &'a CnnModel,
    image: &'a Tensor,
    class: usize,
    layer: &'a str,
    cam: &'a CamConfig,
    lime: &'a LimeConfig,
    alpha: f64,
}

fn file_tag(m: Method) -> String {
    m.as_str().replace("++", "pp")
}

fn heatmap_sidecar(ctx: &Job, h: &Heatmap, layer: Option<&str>, config: Value) -> Value {
    json!({
        "method": h.method,
        "target_class": h.target_class,
        "layer": layer,
        "config": config,
        "min": h.raw_min,
        "max": h.raw_max,
        "image_shape": ctx.image.shape(),
    })
}

/// Runs one method; returns the rendered image and its sidecar document.
fn explain_one(ctx: &Job, method: Method) -> Result<(RgbImage, Value)> {
    let cam_json = serde_json::to_value(ctx.cam)?;
    let overlay = |h: &Heatmap| render_overlay(ctx.image, h, ctx.alpha);
    let (m, img, c, layer) = (ctx.model, ctx.image, ctx.class, ctx.layer);
    let out = match method {
        Method::Saliency => {
            let h = vanilla_saliency(m, img, c)?;
            (overlay(&h)?, heatmap_sidecar(ctx, &h, None, Value::Null))
        }
        Method::SmoothGrad => {
            let h = smoothgrad(m, img, c, ctx.cam)?;
            (overlay(&h)?, heatmap_sidecar(ctx, &h, None, cam_json))
        }
        Method::GradCam => {
            let h = grad_cam(m, img, c, layer)?;
            (overlay(&h)?, heatmap_sidecar(ctx, &h, Some(layer), cam_json))
        }
        Method::GradCamPlusPlus => {
            let h = grad_cam_pp(m, img, c, layer)?;
            (overlay(&h)?, heatmap_sidecar(ctx, &h, Some(layer), cam_json))
        }
        Method::ScoreCam => {
            let h = score_cam(m, img, c, layer)?;
            (overlay(&h)?, heatmap_sidecar(ctx, &h, Some(layer), cam_json))
        }
        Method::FasterScoreCam => {
            let channels = m.parameter(&format!("{layer}.bias")).map_or(1, |b| b.len());
            let top_k = ctx.cam.scorecam_top_k.min(channels);
            let h = faster_score_cam(m, img, c, layer, top_k)?;
            let mut config = cam_json;
            config["scorecam_top_k"] = json!(top_k);
            (overlay(&h)?, heatmap_sidecar(ctx, &h, Some(layer), config))
        }
        Method::Lime => {
            let (e, sp) = explain_lime(m, img, c, ctx.lime)?;
            let png = render_lime_overlay(img, &sp, &e, ctx.lime.top_regions)?;
            let regions: Vec<Value> = e
                .region_weights
                .iter()
                .map(|&(id, w)| json!({ "id": id, "weight": w }))
                .collect();
            let mut config = serde_json::to_value(ctx.lime)?;
            config["kernel_width"] = json!(ctx.lime.kernel_width_for(sp.num_regions));
            config["segmented_regions"] = json!(sp.num_regions);
            let doc = json!({
                "method": Method::Lime,
                "target_class": c,
                "regions": regions,
                "intercept": e.intercept,
                "r2": e.r2,
                "config": config,
            });
            (png, doc)
        }
        Method::ClassModel => {
            let v = class_model_visualization(m, c, ctx.cam)?;
            let doc = json!({
                "method": Method::ClassModel,
                "target_class": c,
                "layer": Value::Null,
                "config": cam_json,
                "min": v.raw.min(),
                "max": v.raw.max(),
                "final_objective": v.objective.last(),
            });
            (tensor_to_rgb(&v.image)?, doc)
        }
    };
    Ok(out)
}

fn output_path(out: &Path, method: Method, all: bool) -> PathBuf {
    if all {
        sibling(out, &format!("{}.png", file_tag(method)))
    } else {
        out.to_path_buf()
    }
}

pub fn run(args: ExplainArgs, argv: &[String]) -> Result<()> {
    let started = Instant::now();
    let model = load_checkpoint(&args.model)
        .with_context(|| format!("loading checkpoint {}", args.model.display()))?;
    let [c, h, w] = model.input_shape();
    let raw = load_image(&args.image)?;
    let image = match_channels(&resize_bilinear(&raw, h, w)?, c)?;
    let (predicted, probs) = predicted_class(&model, &image)?;
    let class = match args.class {
        ClassArg::Auto => predicted,
        ClassArg::Index(i) if i < model.num_classes() => i,
        ClassArg::Index(i) => bail!("class {i} out of range for {} classes", model.num_classes()),
    };
    let layer = args.layer.clone().unwrap_or_else(|| model.last_conv_layer());
    model.layer_index(&layer)?;
    println!(
        "probabilities: [{}]; predicted class {predicted}; explaining class {class}",
        probs.iter().map(|p| format!("{p:.4}")).collect::<Vec<_>>().join(", ")
    );

    let cam = CamConfig {
        target_layer: Some(layer.clone()),
        smoothgrad_samples: args.samples,
        smoothgrad_sigma_fraction: args.sigma_fraction,
        scorecam_top_k: args.top_k,
        classmodel_steps: args.steps,
        classmodel_lambda: args.lambda,
        classmodel_step_size: args.step_size,
        seed: args.seed,
    };
    cam.validate()?;
    let lime = LimeConfig {
        num_regions: args.regions,
        num_samples: args.lime_samples,
        kernel_width: args.kernel_width,
        ridge_lambda: args.ridge_lambda,
        top_regions: args.top_regions,
        fill_value: args.fill,
        seed: args.seed,
    };
    lime.validate()?;
    let ctx = Job {
        model: &model,
        image: &image,
        class,
        layer: &layer,
        cam: &cam,
        lime: &lime,
        alpha: args.alpha,
    };

    let (methods, all) = match args.method {
        MethodArg::All => (Method::ALL.to_vec(), true),
        MethodArg::One(m) => (vec![m], false),
    };
    let mut manifest = RunManifest::new("explain", argv);
    let mut tiles = vec![tensor_to_rgb(&image)?];
    for method in methods {
        let (png, mut doc) = explain_one(&ctx, method)?;
        doc["probabilities"] = json!(probs);
        doc["predicted_class"] = json!(predicted);
        let path = output_path(&args.out, method, all);
        write_png(&path, &png)?;
        let side = path.with_extension("json");
        write_json(&side, &doc)?;
        println!("{method}: {}", path.display());
        manifest.artifact(&path);
        manifest.artifact(&side);
        tiles.push(png);
    }
    if args.panel {
        let path = sibling(&args.out, "panel.png");
        let columns = tiles.len();
        write_png(&path, &compose_panel(&tiles, columns)?)?;
        println!("panel: {}", path.display());
        manifest.artifact(&path);
    }
    manifest.config = json!({ "cam": cam, "lime": lime, "class": class, "alpha": args.alpha });
    manifest.seed = Some(args.seed);
    manifest.finish(&sibling(&args.out, "manifest.json"), started)
}
