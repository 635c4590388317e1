use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use ovseg::openvocab::{relabel_external_parts, PartRelabelInput};
use ovseg::pipeline::{
    ablate, evaluation_data, render_overlay, segment_distributions, train_to_dir, training_data, TaskResult,
};
use ovseg::synthdata::{generate_dataset, load_dataset, read_mask_list};
use ovseg::{Checkpoint, Engine, Image, Metric, PanopticPrediction, Query, RunConfig, Task, Variant};
use serde_json::json;

/// Open-vocabulary panoptic, referring and part segmentation at toy scale.
#[derive(Parser, Debug)]
#[command(name = "ovseg", version, about)]
struct Cli {
    /// Print the full default config as TOML and exit.
    #[arg(long)]
    dump_default_config: bool,

    #[command(subcommand)]
    command: Option<Command>,
}

#[derive(Args, Debug, Clone, Default)]
struct Common {
    /// TOML run config; defaults apply to every missing key.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    task: Option<String>,
    /// Decoder variant: unified, decoupled, a, b or c.
    #[arg(long)]
    variant: Option<String>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic dataset (PNG images plus an RLE manifest).
    Synth {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 20)]
        scenes: usize,
    },
    /// Train a model and write a checkpoint and loss curve.
    Train {
        #[command(flatten)]
        common: Common,
        /// Override the configured iteration count.
        #[arg(long)]
        iterations: Option<usize>,
    },
    /// Run one image through a checkpoint.
    Infer {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        image: PathBuf,
        /// Comma-separated class names (panoptic, instance, semantic).
        #[arg(long, value_delimiter = ',')]
        labels: Vec<String>,
        /// Referring expression.
        #[arg(long)]
        expression: Option<String>,
        /// Comma-separated part names (part, hierarchical); instances come from `--labels`.
        #[arg(long, value_delimiter = ',')]
        parts: Vec<String>,
    },
    /// Evaluate a checkpoint on a dataset.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Dataset manifest; the checkpoint's evaluation data otherwise.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Comma-separated metrics (pq, miou, ap, ap_box, oiou, part_miou).
        #[arg(long, value_delimiter = ',')]
        metrics: Vec<String>,
    },
    /// Train and evaluate several decoder variants on identical data.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_delimiter = ',', default_value = "unified,decoupled,a,b,c")]
        variants: Vec<String>,
        /// Comma-separated seeds; `--seed` alone gives one.
        #[arg(long, value_delimiter = ',')]
        seeds: Vec<u64>,
    },
    /// Label external class-agnostic part masks with the panoptic output.
    RelabelParts {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        image: PathBuf,
        /// JSON list of RLE part masks.
        #[arg(long)]
        parts: PathBuf,
    },
    /// Draw segments over an image.
    Render {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        image: PathBuf,
        /// Panoptic prediction JSON (as written by `infer`).
        #[arg(long)]
        segments: PathBuf,
    },
}

fn load_config(common: &Common) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    if let Some(t) = &common.task {
        cfg.task = t.parse()?;
    }
    if let Some(v) = &common.variant {
        let v: Variant = v.parse()?;
        cfg.model.decoder = v.apply(cfg.model.decoder.clone());
    }
    cfg.validate()?;
    Ok(cfg)
}

fn out_dir(common: &Common, fallback: &str) -> Result<PathBuf> {
    let dir = common.out.clone().unwrap_or_else(|| PathBuf::from(fallback));
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    Ok(dir)
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)?).with_context(|| format!("writing {}", path.display()))
}

fn engine_from(checkpoint: &Path, common: &Common) -> Result<(Engine, Task)> {
    let ckpt = Checkpoint::load(checkpoint)?;
    let task = match &common.task {
        Some(t) => t.parse()?,
        None => ckpt.config.task,
    };
    Ok((Engine::from_checkpoint(ckpt)?, task))
}

fn run(cli: Cli) -> Result<serde_json::Value> {
    if cli.dump_default_config {
        print!("{}", RunConfig::default().to_toml()?);
        return Ok(serde_json::Value::Null);
    }
    let command = cli.command.ok_or_else(|| anyhow!("no subcommand given (try --help)"))?;
    match command {
        Command::Synth { common, scenes } => {
            let cfg = load_config(&common)?;
            let out = out_dir(&common, "data")?;
            let manifest = generate_dataset(&cfg.data.generator, cfg.seed, scenes, &out)?;
            Ok(json!({ "manifest": manifest, "scenes": scenes }))
        }
        Command::Train { common, iterations } => {
            let mut cfg = load_config(&common)?;
            if let Some(n) = iterations {
                cfg.schedule.iterations = n;
            }
            let out = out_dir(&common, "run")?;
            fs::write(out.join("config.toml"), cfg.to_toml()?)?;
            let every = cfg.schedule.log_every.max(1);
            let (ckpt, curve) = train_to_dir(&cfg, &out, |r| {
                if r.iteration % every == 0 {
                    eprintln!("iter {:>6}  loss {:.4}  lr x{}", r.iteration, r.total, r.lr_scale);
                }
            })?;
            Ok(json!({ "checkpoint": ckpt, "loss_curve": curve }))
        }
        Command::Infer {
            common,
            checkpoint,
            image,
            labels,
            expression,
            parts,
        } => {
            let (engine, task) = engine_from(&checkpoint, &common)?;
            let img = Image::load_png(&image, engine.config.model.image.channels)?;
            let default_labels = || -> Result<Vec<String>> { Ok(engine.config.data.generator.vocabulary()?.all_classes()) };
            let query = match task {
                Task::Referring => Query::Expression(expression.ok_or_else(|| anyhow!("referring needs --expression"))?),
                Task::Part | Task::Hierarchical => {
                    let vocab = engine.config.data.generator.vocabulary()?;
                    Query::Hierarchy {
                        instances: if labels.is_empty() { vocab.thing_classes } else { labels },
                        parts: if parts.is_empty() { vocab.part_classes } else { parts },
                    }
                }
                _ => Query::Labels(if labels.is_empty() { default_labels()? } else { labels }),
            };
            let out = engine.infer(&img, task, &query)?;
            let dir = out_dir(&common, "infer")?;
            let result_path = dir.join("result.json");
            write_json(&result_path, &out.result)?;
            write_json(&dir.join("probabilities.json"), &out.probabilities)?;
            let mut summary = json!({
                "task": task.name(),
                "result": result_path,
                "proposals": out.prediction.proposals.len(),
                "classes": out.probabilities.classes,
            });
            match &out.result {
                TaskResult::Panoptic(p) => {
                    let png = dir.join("overlay.png");
                    render_overlay(&img, &p.segments, &png)?;
                    summary["segments"] = json!(p.segments.iter().map(|s| json!({"class": s.class, "score": s.score, "area": s.mask.area()})).collect::<Vec<_>>());
                    summary["overlay"] = json!(png);
                }
                TaskResult::Referring { proposal, score, mask } => {
                    summary["referring"] = json!({ "proposal": proposal, "score": score, "area": mask.area() });
                }
                TaskResult::Instances(d) => summary["detections"] = json!(d.len()),
                TaskResult::Parts(p) => summary["parts"] = json!(p.len()),
                TaskResult::Hierarchical(h) => summary["instances"] = json!(h.len()),
                TaskResult::Semantic(_) => {}
            }
            Ok(summary)
        }
        Command::Eval {
            common,
            checkpoint,
            data,
            metrics,
        } => {
            let (engine, task) = engine_from(&checkpoint, &common)?;
            let (vocab, scenes) = match data {
                Some(p) => load_dataset(&p)?,
                None => evaluation_data(&engine.config)?,
            };
            let metrics: Vec<Metric> = metrics.iter().map(|m| m.parse()).collect::<ovseg::Result<_>>()?;
            let report = engine.evaluate(&scenes, &vocab, task, &metrics)?;
            let dir = out_dir(&common, "eval")?;
            write_json(&dir.join("report.json"), &report)?;
            Ok(serde_json::to_value(&report)?)
        }
        Command::Ablate {
            common,
            variants,
            seeds,
        } => {
            let cfg = load_config(&common)?;
            let variants: Vec<Variant> = variants.iter().map(|v| v.parse()).collect::<ovseg::Result<_>>()?;
            let seeds = if seeds.is_empty() { vec![cfg.seed] } else { seeds };
            let train = training_data(&cfg)?;
            let eval = evaluation_data(&cfg)?;
            let report = ablate(&cfg, &variants, &seeds, (&train.0, &train.1), (&eval.0, &eval.1))?;
            let dir = out_dir(&common, "ablate")?;
            write_json(&dir.join("ablation.json"), &report)?;
            for r in &report.rows {
                eprintln!(
                    "{:<10} seed {:<4} PQ {:.4}  AP {:.4}  oIoU {:.4}",
                    r.variant,
                    r.seed,
                    r.report.pq.as_ref().map_or(f64::NAN, |p| p.pq),
                    r.report.ap.as_ref().map_or(f64::NAN, |a| a.ap),
                    r.report.oiou.unwrap_or(f64::NAN)
                );
            }
            Ok(serde_json::to_value(&report)?)
        }
        Command::RelabelParts {
            common,
            checkpoint,
            image,
            parts,
        } => {
            let (engine, _) = engine_from(&checkpoint, &common)?;
            let img = Image::load_png(&image, engine.config.model.image.channels)?;
            let labels = engine.config.data.generator.vocabulary()?.all_classes();
            let out = engine.infer(&img, Task::Panoptic, &Query::Labels(labels))?;
            let TaskResult::Panoptic(pan) = &out.result else {
                bail!("panoptic inference returned another result kind");
            };
            let part_masks = read_mask_list(&parts)?;
            let input = PartRelabelInput {
                semantic_masks: pan.segments.iter().map(|s| s.mask.clone()).collect(),
                semantic_probs: segment_distributions(&out.probabilities, &pan.segments),
                part_masks,
            };
            let rel = relabel_external_parts(&input)?;
            let rows: Vec<serde_json::Value> = (0..rel.probs.rows())
                .map(|r| {
                    let row = rel.probs.row(r);
                    let best = row
                        .iter()
                        .enumerate()
                        .fold((0, f64::NEG_INFINITY), |a, (c, &p)| if p > a.1 { (c, p) } else { a });
                    json!({
                        "label": out.probabilities.classes.get(best.0),
                        "probabilities": row,
                        "uncovered": rel.uncovered[r],
                    })
                })
                .collect();
            let report = json!({ "classes": out.probabilities.classes, "parts": rows });
            let dir = out_dir(&common, "relabel")?;
            write_json(&dir.join("relabel.json"), &report)?;
            Ok(report)
        }
        Command::Render { common, image, segments } => {
            let pan: PanopticPrediction = serde_json::from_str(&fs::read_to_string(&segments)?)
                .or_else(|_| -> Result<PanopticPrediction> {
                    let r: TaskResult = serde_json::from_str(&fs::read_to_string(&segments)?)?;
                    match r {
                        TaskResult::Panoptic(p) => Ok(p),
                        _ => bail!("{} holds no panoptic segments", segments.display()),
                    }
                })?;
            let channels = if common.config.is_some() { load_config(&common)?.model.image.channels } else { 3 };
            let img = Image::load_png(&image, channels)?;
            let dir = out_dir(&common, "render")?;
            let png = dir.join("overlay.png");
            render_overlay(&img, &pan.segments, &png)?;
            Ok(json!({ "overlay": png }))
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(serde_json::Value::Null) => ExitCode::SUCCESS,
        Ok(v) => {
            println!("{}", serde_json::to_string_pretty(&v).unwrap_or_default());
            ExitCode::SUCCESS
        }
        Err(e) => {
            let kind = e.downcast_ref::<ovseg::Error>().map_or("cli", |e| e.kind());
            let record = json!({ "error": { "kind": kind, "message": format!("{e:#}") } });
            eprintln!("{record}");
            ExitCode::FAILURE
        }
    }
}
