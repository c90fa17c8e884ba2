mod config;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand};
use dsppnet::data::{generate_synthetic, load_dataset, read_image, write_dataset_dir, DatasetSplit, GrayImage};
use dsppnet::dspp::compute_rates;
use dsppnet::eval::{evaluate, grad_cam, heatmap_overlay_ppm, heatmap_pgm};
use dsppnet::ops::resize_bilinear;
use dsppnet::seed::derive_seed;
use dsppnet::train::{ablate, ablation_csv, finetune, history_csv, train, TrainOutcome};
use dsppnet::{build_model, Checkpoint, Graph, Model, Tensor};

use crate::config::RunConfig;

#[derive(Parser, Debug)]
#[command(
    name = "dsppnet",
    version,
    about = "Train and inspect small CNN classifiers with an atrous pyramid and attention gate"
)]
struct Cli {
    /// Flat `key = value` run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override one config key, e.g. `--set alpha=2`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    set: Vec<String>,
    /// Output directory.
    #[arg(long, env = "DSPPNET_OUT", global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    epochs: Option<usize>,
    /// Peak learning rate of the cosine schedule.
    #[arg(long, global = true)]
    lr: Option<f64>,
    #[arg(long = "batch-size", global = true)]
    batch_size: Option<usize>,
    /// Dataset root laid out as `<root>/<class>/*.pgm|png`.
    #[arg(long, global = true, conflicts_with = "synth")]
    data: Option<PathBuf>,
    /// Use generated blob images instead of a dataset directory.
    #[arg(long, global = true)]
    synth: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Print the atrous rate schedule for the configured pyramid stages.
    Rates,
    /// Write the synthetic dataset to `<out>/data`.
    Synth,
    /// Train from scratch.
    Train {
        /// Print the architecture and exit.
        #[arg(long)]
        describe: bool,
    },
    /// Train every placement/attention combination and tabulate the results.
    Ablate,
    /// Score a checkpoint on one split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// train, val or test.
        #[arg(long)]
        split: Option<String>,
    },
    /// Continue training a checkpoint on new data.
    Finetune {
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Grad-CAM heatmap and attention map for one image.
    Gradcam {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        image: PathBuf,
        /// Backbone stage to explain (1-6).
        #[arg(long)]
        layer: Option<usize>,
        /// Target class; defaults to the predicted one.
        #[arg(long)]
        class: Option<usize>,
    },
}

/// Bad flags, keys or values. Exit code 2.
#[derive(Debug, thiserror::Error)]
#[error("{0}")]
struct UsageError(String);

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            let usage = e.downcast_ref::<UsageError>().is_some()
                || matches!(
                    e.downcast_ref::<dsppnet::Error>(),
                    Some(dsppnet::Error::InvalidConfig(_))
                );
            ExitCode::from(if usage { 2 } else { 1 })
        }
    }
}

fn resolve_config(cli: &Cli) -> anyhow::Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(path) => {
            let text = fs::read_to_string(path)
                .map_err(|e| UsageError(format!("cannot read config {}: {e}", path.display())))?;
            RunConfig::from_text(&text)?
        }
        None => RunConfig::default(),
    };
    for pair in &cli.set {
        let (k, v) = pair
            .split_once('=')
            .ok_or_else(|| UsageError(format!("--set expects KEY=VALUE, got `{pair}`")))?;
        cfg.set(k.trim(), v.trim())?;
    }
    if let Some(v) = &cli.out {
        cfg.out = v.clone();
    }
    if let Some(v) = cli.seed {
        cfg.seed = v;
    }
    if let Some(v) = cli.epochs {
        cfg.optim.epochs = v;
    }
    if let Some(v) = cli.lr {
        cfg.optim.lr_max = v;
    }
    if let Some(v) = cli.batch_size {
        cfg.optim.batch_size = v;
    }
    if let Some(v) = &cli.data {
        cfg.data = Some(v.clone());
    }
    if cli.synth {
        cfg.data = None;
    }
    if let Command::Gradcam { layer: Some(l), .. } = cli.command {
        cfg.gradcam_layer = l;
    }
    if let Command::Eval { split: Some(s), .. } = &cli.command {
        cfg.set("eval_split", s)?;
    }
    Ok(cfg.finalize()?)
}

/// Loads the configured data at the given input geometry.
fn load_data(cfg: &RunConfig, input_size: (usize, usize, usize)) -> anyhow::Result<DatasetSplit> {
    match &cfg.data {
        Some(root) => load_dataset(root, cfg.directory_split(), cfg.seed, input_size)
            .with_context(|| format!("loading {}", root.display())),
        None => {
            let (height, width, channels) = input_size;
            Ok(generate_synthetic(&dsppnet::data::SynthConfig {
                height,
                width,
                channels,
                ..cfg.synth.clone()
            })?)
        }
    }
}

fn write(dir: &Path, name: &str, bytes: impl AsRef<[u8]>) -> anyhow::Result<()> {
    let path = dir.join(name);
    fs::write(&path, bytes).with_context(|| format!("writing {}", path.display()))
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let cfg = resolve_config(&cli)?;
    match &cli.command {
        Command::Rates => {
            if cfg.ablation.dspp_stages.is_empty() {
                return Err(UsageError("no pyramid stages configured".into()).into());
            }
            let taps: Vec<_> = cfg.ablation.dspp_stages.iter().map(|&s| cfg.backbone.tap(s)).collect();
            print!("{}", compute_rates(&taps, cfg.backbone.alpha)?.to_csv());
        }
        Command::Synth => {
            let split = generate_synthetic(&cfg.synth)?;
            let dir = cfg.out.join("data");
            write_dataset_dir(&dir, &split)?;
            println!("wrote {} images to {}", split.len(), dir.display());
        }
        Command::Train { describe } => {
            let mut backbone = cfg.backbone.clone();
            if *describe {
                print!(
                    "{}",
                    build_model(&backbone, &cfg.ablation, derive_seed(cfg.seed, "init"))?.describe()
                );
                return Ok(());
            }
            let data = load_data(&cfg, backbone.input_size)?;
            backbone.classes = data.classes.len();
            let model = build_model(&backbone, &cfg.ablation, derive_seed(cfg.seed, "init"))?;
            eprintln!(
                "{} parameters, {} train / {} val / {} test",
                model.param_count(),
                data.train.len(),
                data.val.len(),
                data.test.len()
            );
            let outcome = train(&model, &data, &cfg.optim)?;
            save_outcome(&cfg, &data, &outcome)?;
        }
        Command::Ablate => {
            let data = load_data(&cfg, cfg.backbone.input_size)?;
            let backbone = dsppnet::BackboneConfig {
                classes: data.classes.len(),
                ..cfg.backbone.clone()
            };
            let rows = ablate(&backbone, &data, &cfg.optim);
            let csv = ablation_csv(&rows);
            fs::create_dir_all(&cfg.out)?;
            write(&cfg.out, "ablation.csv", &csv)?;
            print!("{csv}");
        }
        Command::Eval { checkpoint, .. } => {
            let ckpt = load_checkpoint(checkpoint)?;
            let data = load_data(&cfg, ckpt.model.backbone.input_size)?;
            let samples = match cfg.eval_split.as_str() {
                "train" => &data.train,
                "test" => &data.test,
                _ => &data.val,
            };
            if samples.is_empty() {
                return Err(UsageError(format!("the {} split is empty", cfg.eval_split)).into());
            }
            let e = evaluate(&ckpt.model, samples)?;
            fs::create_dir_all(&cfg.out)?;
            write(&cfg.out, "metrics.csv", e.metrics_csv())?;
            if let Some(roc) = &e.roc {
                write(&cfg.out, "roc.csv", roc.to_csv())?;
            }
            print!("{}", e.metrics_csv());
        }
        Command::Finetune { checkpoint } => {
            let ckpt = load_checkpoint(checkpoint)?;
            let data = load_data(&cfg, ckpt.model.backbone.input_size)?;
            let outcome = finetune(&ckpt, &data, &cfg.optim)?;
            save_outcome(&cfg, &data, &outcome)?;
        }
        Command::Gradcam {
            checkpoint,
            image,
            class,
            ..
        } => {
            let ckpt = load_checkpoint(checkpoint)?;
            gradcam(&cfg, &ckpt.model, image, *class)?;
        }
    }
    Ok(())
}

fn load_checkpoint(path: &Path) -> anyhow::Result<Checkpoint> {
    Checkpoint::load(path).with_context(|| format!("loading checkpoint {}", path.display()))
}

fn save_outcome(cfg: &RunConfig, data: &DatasetSplit, outcome: &TrainOutcome) -> anyhow::Result<()> {
    for r in &outcome.history {
        match r.val {
            Some((m, auc)) => eprintln!(
                "epoch {} lr {:.6} loss {:.6} val acc {:.4} auc {:.4}",
                r.epoch, r.lr, r.train_loss, m.accuracy, auc
            ),
            None => eprintln!("epoch {} lr {:.6} loss {:.6}", r.epoch, r.lr, r.train_loss),
        }
    }
    fs::create_dir_all(&cfg.out)?;
    outcome.last.save(&cfg.out.join("last.ckpt"))?;
    outcome.best.save(&cfg.out.join("best.ckpt"))?;
    write(&cfg.out, "history.csv", history_csv(&outcome.history))?;
    write(&cfg.out, "config.txt", cfg.to_text())?;
    if !data.test.is_empty() {
        let e = evaluate(&outcome.best.model, &data.test)?;
        write(&cfg.out, "test_metrics.csv", e.metrics_csv())?;
        if let Some(roc) = &e.roc {
            write(&cfg.out, "test_roc.csv", roc.to_csv())?;
        }
    }
    eprintln!("wrote {}", cfg.out.display());
    Ok(())
}

/// Reads an image and brings it to the model's input geometry, repeating the
/// gray plane over the input channels.
fn prepare_image(model: &Model, path: &Path) -> anyhow::Result<Tensor> {
    let plane = read_image(path)?;
    let (h, w, c) = model.backbone.input_size;
    let (ph, pw) = (plane.shape()[1], plane.shape()[2]);
    let plane = resize_bilinear(&plane.reshape([1, 1, ph, pw])?, (h, w))?;
    let data: Vec<f64> = plane.data().iter().cycle().take(c * h * w).copied().collect();
    Ok(Tensor::new([1, c, h, w], data)?)
}

fn gradcam(cfg: &RunConfig, model: &Model, path: &Path, class: Option<usize>) -> anyhow::Result<()> {
    let image = prepare_image(model, path)?;
    let mut g = Graph::new();
    let x = g.constant(image.clone())?;
    let trace = model.forward_graph(&mut g, x)?;
    let logits = g.value(trace.logits).data();
    let top = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exp: Vec<f64> = logits.iter().map(|l| (l - top).exp()).collect();
    let probs: Vec<f64> = exp.iter().map(|e| e / exp.iter().sum::<f64>()).collect();
    let predicted = (0..probs.len()).fold(0, |best, k| if probs[k] > probs[best] { k } else { best });
    let target = class.unwrap_or(predicted);
    if target >= model.backbone.classes {
        return Err(UsageError(format!(
            "class {target} out of range for {} classes",
            model.backbone.classes
        ))
        .into());
    }
    let heat = grad_cam(model, &image, target, cfg.gradcam_layer)?;
    fs::create_dir_all(&cfg.out)?;
    write(&cfg.out, "gradcam.pgm", heatmap_pgm(&heat)?)?;
    write(&cfg.out, "gradcam_overlay.ppm", heatmap_overlay_ppm(&image, &heat)?)?;
    if let Some(a) = trace.attention {
        let map = g.value(a);
        let [_, _, h, w] = map.dims4()?;
        GrayImage::from_unit_tensor(&map.reshape([h, w])?)?.write_pgm(&cfg.out.join("attention.pgm"))?;
    }
    let probs: Vec<String> = probs.iter().map(|p| p.to_string()).collect();
    println!(
        "predicted {predicted} target {target} layer {} probabilities {}",
        cfg.gradcam_layer,
        probs.join(",")
    );
    Ok(())
}
