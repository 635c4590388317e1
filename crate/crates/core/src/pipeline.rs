//! Run configuration, the training loop, checkpoints, inference,
//! evaluation, the decoder ablation harness and overlay rendering.

use std::collections::BTreeSet;
use std::fmt;
use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::assignment::{build_cost, hungarian, iou_matrix, simota, MatchResult, SIMOTA_TOPQ};
use crate::autograd::{Gradients, Graph, Var};
use crate::decoders::{Source, Variant};
use crate::error::{Error, Result};
use crate::geometry::{BBox, BinaryMask};
use crate::losses::{
    stuff_loss, thing_loss, total_loss, ClassLayout, DecoderLoss, GtKind, GtTarget, LossReport, LossWeights, Predictions,
};
use crate::metrics::{
    average_precision, coco_thresholds, instance_detections, miou_parts, oiou, panoptic_postprocess, panoptic_quality,
    ApMode, ApReport, Detection, GroundTruth, IouAccumulator, PanopticPrediction, PartMasks, PartMiouReport,
    PostprocessConfig, PqReport, Segment,
};
use crate::model::{ModelConfig, Prediction, PromptVars, SegModel};
use crate::nn::ParamStore;
use crate::openvocab::{
    binarize, combine_instance_part, open_vocab_classify, parts_from_prediction, AuxConfig, AuxModel,
    ClassProbabilities, HierInstance, InstanceSegment, PartSegment,
};
use crate::optim::{AdamW, AdamWConfig};
use crate::prompts::{
    build_category_prompt, build_hierarchical_prompt, build_referring_prompt, fnv1a, HierLabel, PromptSpec,
};
use crate::synthdata::{generate_scenes, load_dataset, GeneratorConfig, Image, SceneSample, Vocabulary};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"OVSGCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Panoptic,
    Instance,
    Semantic,
    Referring,
    Part,
    Hierarchical,
}

impl Task {
    pub const ALL: [Task; 6] = [
        Task::Panoptic,
        Task::Instance,
        Task::Semantic,
        Task::Referring,
        Task::Part,
        Task::Hierarchical,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Task::Panoptic => "panoptic",
            Task::Instance => "instance",
            Task::Semantic => "semantic",
            Task::Referring => "referring",
            Task::Part => "part",
            Task::Hierarchical => "hierarchical",
        }
    }

    pub fn default_metrics(&self) -> Vec<Metric> {
        match self {
            Task::Panoptic => vec![Metric::Pq, Metric::Miou],
            Task::Instance => vec![Metric::Ap, Metric::ApBox],
            Task::Semantic => vec![Metric::Miou],
            Task::Referring => vec![Metric::Oiou],
            Task::Part => vec![Metric::PartMiou],
            Task::Hierarchical => vec![Metric::Pq, Metric::PartMiou],
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Task::ALL
            .into_iter()
            .find(|t| t.name() == s.trim().to_ascii_lowercase())
            .ok_or_else(|| Error::UnknownTask(s.to_string()))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    Pq,
    Miou,
    Ap,
    ApBox,
    Oiou,
    PartMiou,
}

impl Metric {
    pub const ALL: [Metric; 6] = [
        Metric::Pq,
        Metric::Miou,
        Metric::Ap,
        Metric::ApBox,
        Metric::Oiou,
        Metric::PartMiou,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Metric::Pq => "pq",
            Metric::Miou => "miou",
            Metric::Ap => "ap",
            Metric::ApBox => "ap_box",
            Metric::Oiou => "oiou",
            Metric::PartMiou => "part_miou",
        }
    }
}

impl FromStr for Metric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let key = s.trim().to_ascii_lowercase().replace('-', "_");
        Metric::ALL
            .into_iter()
            .find(|m| m.name() == key)
            .ok_or_else(|| Error::Config(format!("unknown metric `{s}`")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainSchedule {
    pub iterations: usize,
    /// Scenes per iteration; their gradients are averaged.
    pub batch_size: usize,
    /// Fractions of `iterations` after which the step size drops by 10x.
    pub lr_drops: Vec<f64>,
    /// Worker threads for the batch; `0` uses every core.
    pub workers: usize,
    pub log_every: usize,
    pub referring: bool,
    pub parts: bool,
}

impl Default for TrainSchedule {
    fn default() -> Self {
        Self {
            iterations: 2000,
            batch_size: 1,
            lr_drops: vec![0.9],
            workers: 0,
            log_every: 100,
            referring: true,
            parts: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    /// Training manifest; scenes are generated when absent.
    pub train: Option<PathBuf>,
    /// Evaluation manifest; scenes are generated when absent.
    pub eval: Option<PathBuf>,
    pub train_scenes: usize,
    pub eval_scenes: usize,
    pub train_seed: u64,
    pub eval_seed: u64,
    pub generator: GeneratorConfig,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            train: None,
            eval: None,
            train_scenes: 20,
            eval_scenes: 20,
            train_seed: 0,
            eval_seed: 0,
            generator: GeneratorConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OpenVocabConfig {
    pub enabled: bool,
    pub lambda_seen: f64,
    pub lambda_novel: f64,
    /// Thing or stuff classes removed from the training data.
    pub held_out: Vec<String>,
    pub aux: AuxConfig,
}

impl Default for OpenVocabConfig {
    fn default() -> Self {
        Self {
            enabled: false,
            lambda_seen: 0.2,
            lambda_novel: 0.45,
            held_out: Vec::new(),
            aux: AuxConfig::default(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub seed: u64,
    pub task: Task,
    pub model: ModelConfig,
    pub loss: LossWeights,
    pub optimizer: AdamWConfig,
    pub schedule: TrainSchedule,
    pub data: DataConfig,
    pub open_vocab: OpenVocabConfig,
    pub postprocess: PostprocessConfig,
}

impl Default for Task {
    fn default() -> Self {
        Task::Panoptic
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Reads and validates a config file, including referenced paths.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg = Self::from_toml(&text)?;
        for p in [&cfg.data.train, &cfg.data.eval].into_iter().flatten() {
            if !p.exists() {
                return Err(Error::Config(format!("referenced file {} does not exist", p.display())));
            }
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.loss.validate()?;
        let s = &self.schedule;
        if s.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if s.lr_drops.iter().any(|f| !(0.0..=1.0).contains(f)) {
            return Err(Error::Config("lr_drops are fractions of the run in [0, 1]".into()));
        }
        if self.optimizer.lr <= 0.0 || !self.optimizer.lr.is_finite() {
            return Err(Error::Config("the step size must be positive".into()));
        }
        for l in [self.open_vocab.lambda_seen, self.open_vocab.lambda_novel] {
            if !(0.0..=1.0).contains(&l) {
                return Err(Error::Config(format!("lambda {l} outside [0, 1]")));
            }
        }
        let g = &self.data.generator;
        if (g.height, g.width, g.channels) != (self.model.image.height, self.model.image.width, self.model.image.channels)
        {
            return Err(Error::Config(format!(
                "generator produces {}x{}x{} images, the model expects {}x{}x{}",
                g.height, g.width, g.channels, self.model.image.height, self.model.image.width, self.model.image.channels
            )));
        }
        Ok(())
    }

    /// Stable hash of the serialized config.
    pub fn hash(&self) -> u64 {
        fnv1a(&serde_json::to_string(self).expect("config serializes"))
    }

    /// Step-size factor at an iteration.
    pub fn lr_scale(&self, iteration: usize) -> f64 {
        let n = self.schedule.iterations as f64;
        let drops = self
            .schedule
            .lr_drops
            .iter()
            .filter(|&&f| iteration as f64 >= f * n)
            .count();
        0.1f64.powi(drops as i32)
    }
}

/// Training scenes and their vocabulary: a manifest when configured, else
/// generated scenes without the held-out classes.
pub fn training_data(cfg: &RunConfig) -> Result<(Vocabulary, Vec<SceneSample>)> {
    match &cfg.data.train {
        Some(p) => {
            let (vocab, scenes) = load_dataset(p)?;
            let keep: Vec<SceneSample> = scenes
                .into_iter()
                .map(|mut s| {
                    let held = |c: &String| cfg.open_vocab.held_out.contains(c);
                    let mut remap = Vec::with_capacity(s.instances.len());
                    let mut kept = 0;
                    for i in &s.instances {
                        remap.push((!held(&i.class)).then(|| {
                            kept += 1;
                            kept - 1
                        }));
                    }
                    s.instances.retain(|i| !held(&i.class));
                    s.stuff.retain(|r| !held(&r.class));
                    s.referring = s
                        .referring
                        .into_iter()
                        .filter_map(|mut r| {
                            r.target = remap[r.target]?;
                            Some(r)
                        })
                        .collect();
                    s
                })
                .collect();
            let mut v = vocab;
            v.thing_classes.retain(|c| !cfg.open_vocab.held_out.contains(c));
            v.stuff_classes.retain(|c| !cfg.open_vocab.held_out.contains(c));
            Ok((v, keep))
        }
        None => {
            let gen = cfg.data.generator.without_classes(&cfg.open_vocab.held_out);
            let vocab = gen.vocabulary()?;
            let scenes = generate_scenes(&gen, cfg.data.train_seed, cfg.data.train_scenes)?;
            Ok((vocab, scenes))
        }
    }
}

/// Evaluation scenes over the full vocabulary.
pub fn evaluation_data(cfg: &RunConfig) -> Result<(Vocabulary, Vec<SceneSample>)> {
    match &cfg.data.eval {
        Some(p) => load_dataset(p),
        None => {
            let vocab = cfg.data.generator.vocabulary()?;
            let scenes = generate_scenes(&cfg.data.generator, cfg.data.eval_seed, cfg.data.eval_scenes)?;
            Ok((vocab, scenes))
        }
    }
}

/// Fresh model and weights, drawn from the run seed.
pub fn build_model(cfg: &RunConfig) -> Result<(SegModel, ParamStore)> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut store = ParamStore::new();
    let model = SegModel::new(&mut store, &mut rng, cfg.model.clone())?;
    Ok((model, store))
}

fn normalized_box(b: &BBox, width: usize, height: usize) -> BBox {
    b.scale(1.0 / width as f64, 1.0 / height as f64)
}

/// Panoptic targets in the column order of `prompt`.
pub fn panoptic_targets(scene: &SceneSample, prompt: &PromptSpec) -> Result<Vec<GtTarget>> {
    let (h, w) = (scene.height(), scene.width());
    let col = |name: &str| {
        prompt
            .label_index(name)
            .ok_or_else(|| Error::Vocabulary(format!("class `{name}` is not in the prompt")))
    };
    let mut out = Vec::new();
    for inst in &scene.instances {
        out.push(GtTarget {
            class: col(&inst.class)?,
            instance_class: None,
            kind: GtKind::Thing,
            mask: inst.mask.data().to_vec(),
            bbox: Some(normalized_box(&inst.bbox, w, h)),
        });
    }
    for region in &scene.stuff {
        out.push(GtTarget {
            class: col(&region.class)?,
            instance_class: None,
            kind: GtKind::Stuff,
            mask: region.mask.data().to_vec(),
            bbox: None,
        });
    }
    Ok(out)
}

/// The referred instance as a single class-0 target.
pub fn referring_target(scene: &SceneSample, expression: usize) -> Result<GtTarget> {
    let r = scene
        .referring
        .get(expression)
        .ok_or_else(|| Error::IndexOutOfRange(format!("expression {expression}")))?;
    let inst = scene
        .instances
        .get(r.target)
        .ok_or_else(|| Error::IndexOutOfRange(format!("referring target {}", r.target)))?;
    Ok(GtTarget {
        class: 0,
        instance_class: None,
        kind: GtKind::Thing,
        mask: inst.mask.data().to_vec(),
        bbox: Some(normalized_box(&inst.bbox, scene.width(), scene.height())),
    })
}

/// One target per annotated part, labelled with its `"<instance> <part>"`
/// column and its instance column.
pub fn part_targets(scene: &SceneSample, prompt: &PromptSpec) -> Result<Vec<GtTarget>> {
    let (h, w) = (scene.height(), scene.width());
    let mut out = Vec::new();
    for inst in &scene.instances {
        let ic = prompt
            .hierarchy
            .iter()
            .position(|l| matches!(l, HierLabel::Instance(n) if *n == inst.class))
            .ok_or_else(|| Error::Vocabulary(format!("instance `{}` is not in the prompt", inst.class)))?;
        for part in &inst.parts {
            let pc = prompt
                .hierarchy
                .iter()
                .position(|l| matches!(l, HierLabel::Part { instance, part: p } if *instance == inst.class && *p == part.name))
                .ok_or_else(|| Error::Vocabulary(format!("part `{} {}` is not in the prompt", inst.class, part.name)))?;
            if part.mask.area() == 0 {
                continue;
            }
            out.push(GtTarget {
                class: pc,
                instance_class: Some(ic),
                kind: GtKind::Thing,
                mask: part.mask.data().to_vec(),
                bbox: Some(normalized_box(&crate::geometry::mask_to_box(&part.mask), w, h)),
            });
        }
    }
    Ok(out)
}

/// Column layout of the classification loss for a prompt.
pub fn class_layout(prompt: &PromptSpec) -> ClassLayout {
    if prompt.hierarchy.is_empty() {
        return ClassLayout::Flat {
            other: prompt.other_index(),
        };
    }
    let mut part_cols = Vec::new();
    let mut instance_cols = Vec::new();
    for (c, l) in prompt.hierarchy.iter().enumerate() {
        match l {
            HierLabel::Instance(_) => instance_cols.push(c),
            HierLabel::Part { .. } => part_cols.push(c),
        }
    }
    ClassLayout::Hierarchical {
        part_cols,
        instance_cols,
        other: prompt.other_index(),
    }
}

fn branch_loss(
    g: &Graph,
    logits: Var,
    masks: Var,
    boxes: Var,
    gts: &[GtTarget],
    source: Source,
    layout: &ClassLayout,
    w: &LossWeights,
) -> Result<DecoderLoss> {
    let (lv, mv, bv) = (g.value(logits), g.value(masks), g.value(boxes));
    let preds = Predictions {
        logits: lv,
        masks: mv,
        boxes: bv,
    };
    let pboxes: Vec<BBox> = (0..bv.rows())
        .map(|r| {
            let b = bv.row(r);
            BBox::from_array([b[0], b[1], b[2], b[3]])
        })
        .collect();
    let m = if gts.is_empty() {
        MatchResult::default()
    } else {
        let cost = build_cost(lv, mv, &pboxes, gts, w)?;
        match source {
            Source::Thing => simota(&cost, &iou_matrix(&pboxes, gts), SIMOTA_TOPQ)?,
            Source::Stuff | Source::Unified => hungarian(&cost),
        }
    };
    match source {
        Source::Stuff => stuff_loss(&preds, gts, &m, layout, w),
        Source::Thing | Source::Unified => thing_loss(&preds, gts, &m, layout, w),
    }
}

/// Loss of one prompt pass spliced into the tape. The thing (or unified)
/// branch sees `gts` restricted by kind in decoupled mode; the stuff
/// branch sees every target when `stuff_targets` is set and none otherwise.
pub fn prompt_loss(
    g: &mut Graph,
    vars: &PromptVars,
    gts: &[GtTarget],
    layout: &ClassLayout,
    w: &LossWeights,
    stuff_targets: bool,
) -> Result<(Var, LossReport)> {
    let mut thing: Option<DecoderLoss> = None;
    let mut stuff: Option<DecoderLoss> = None;
    let mut roots = Vec::new();
    for b in &vars.branches {
        let sub: Vec<GtTarget> = match b.source {
            Source::Thing => gts.iter().filter(|t| t.kind == GtKind::Thing).cloned().collect(),
            Source::Stuff if stuff_targets => gts.to_vec(),
            Source::Stuff => Vec::new(),
            Source::Unified => gts.to_vec(),
        };
        let d = &b.decoder;
        let loss = branch_loss(g, b.logits, d.masks, d.boxes, &sub, b.source, layout, w)?;
        let root = g.external(
            loss.total(),
            vec![
                (b.logits, loss.grads.logits.clone()),
                (d.masks, loss.grads.masks.clone()),
                (d.boxes, loss.grads.boxes.clone()),
            ],
        );
        roots.push(root);
        match b.source {
            Source::Stuff => stuff = Some(loss),
            _ => thing = Some(loss),
        }
    }
    let thing = thing.ok_or_else(|| Error::InvalidArgument("prompt pass without a thing branch".into()))?;
    let report = total_loss(&thing, stuff.as_ref());
    let mut root = roots[0];
    for &r in &roots[1..] {
        root = g.add(root, r);
    }
    Ok((root, report))
}

fn prefixed(report: &LossReport, prefix: &str) -> LossReport {
    LossReport {
        total: report.total,
        thing: report.thing,
        stuff: report.stuff,
        terms: report.terms.iter().map(|(k, v)| (format!("{prefix}.{k}"), *v)).collect(),
    }
}

/// Per-scene randomness, independent of thread scheduling.
fn scene_rng(seed: u64, iteration: usize, slot: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((iteration as u64) << 16) | slot as u64);
    rng
}

/// Loss and gradients of one scene: a panoptic pass with shuffled labels,
/// then optionally one referring pass and one hierarchical part pass, all
/// sharing the image features.
pub fn scene_gradients(
    model: &SegModel,
    store: &ParamStore,
    cfg: &RunConfig,
    vocab: &Vocabulary,
    scene: &SceneSample,
    rng: &mut ChaCha8Rng,
) -> Result<(Gradients, LossReport)> {
    let mut g = Graph::new();
    let visual = model.forward_image(&mut g, store, &scene.image)?;
    let mut labels = vocab.all_classes();
    labels.shuffle(rng);
    let prompt = build_category_prompt(&labels)?;
    let vars = model.forward_prompt(&mut g, store, visual, &prompt)?;
    let gts = panoptic_targets(scene, &prompt)?;
    let (mut root, pan) = prompt_loss(&mut g, &vars, &gts, &class_layout(&prompt), &cfg.loss, true)?;
    let mut report = prefixed(&pan, "panoptic");

    if cfg.schedule.referring && !scene.referring.is_empty() {
        let k = rand::Rng::gen_range(rng, 0..scene.referring.len());
        let prompt = build_referring_prompt(&scene.referring[k].expression)?;
        let vars = model.forward_prompt(&mut g, store, visual, &prompt)?;
        let gt = [referring_target(scene, k)?];
        let (r, rep) = prompt_loss(&mut g, &vars, &gt, &class_layout(&prompt), &cfg.loss, false)?;
        root = g.add(root, r);
        report.merge(&prefixed(&rep, "referring"));
    }

    if cfg.schedule.parts && !vocab.part_classes.is_empty() && scene.instances.iter().any(|i| !i.parts.is_empty()) {
        let prompt = build_hierarchical_prompt(&vocab.thing_classes, &vocab.part_classes)?;
        let vars = model.forward_prompt(&mut g, store, visual, &prompt)?;
        let gts = part_targets(scene, &prompt)?;
        let (r, rep) = prompt_loss(&mut g, &vars, &gts, &class_layout(&prompt), &cfg.loss, false)?;
        root = g.add(root, r);
        report.merge(&prefixed(&rep, "part"));
    }
    Ok((g.backward(root, store.len()), report))
}

/// Averaged gradients of a batch, reduced in scene order.
pub fn batch_gradients(
    model: &SegModel,
    store: &ParamStore,
    cfg: &RunConfig,
    vocab: &Vocabulary,
    scenes: &[&SceneSample],
    iteration: usize,
) -> Result<(Gradients, LossReport)> {
    let per_scene: Vec<Result<(Gradients, LossReport)>> = scenes
        .par_iter()
        .enumerate()
        .map(|(slot, s)| {
            let mut rng = scene_rng(cfg.seed, iteration, slot);
            scene_gradients(model, store, cfg, vocab, s, &mut rng)
        })
        .collect();
    let mut grads = Gradients { grads: Vec::new() };
    let mut report = LossReport::default();
    for r in per_scene {
        let (g, rep) = r?;
        grads.accumulate(&g);
        report.merge(&rep);
    }
    let inv = 1.0 / scenes.len() as f64;
    grads.scale(inv);
    report.total *= inv;
    report.thing *= inv;
    report.stuff *= inv;
    for v in report.terms.values_mut() {
        *v *= inv;
    }
    Ok((grads, report))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub iteration: usize,
    pub lr_scale: f64,
    pub total: f64,
    pub grad_norm: f64,
    pub terms: std::collections::BTreeMap<String, f64>,
}

/// Result of a training run.
#[derive(Clone, Debug)]
pub struct Trained {
    pub model: SegModel,
    pub store: ParamStore,
    pub vocabulary: Vocabulary,
    pub curve: Vec<LossRecord>,
}

impl Trained {
    pub fn checkpoint(&self, cfg: &RunConfig) -> Checkpoint {
        Checkpoint {
            config: cfg.clone(),
            vocabulary: self.vocabulary.clone(),
            iterations: self.curve.len(),
            store: self.store.clone(),
        }
    }
}

fn thread_pool(workers: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))
}

/// Runs the configured number of iterations over `scenes`, visiting them
/// in a fresh shuffled order every epoch. `on_record` sees every
/// iteration's loss.
pub fn train(
    cfg: &RunConfig,
    vocab: &Vocabulary,
    scenes: &[SceneSample],
    mut on_record: impl FnMut(&LossRecord),
) -> Result<Trained> {
    let (model, mut store) = build_model(cfg)?;
    if scenes.is_empty() && cfg.schedule.iterations > 0 {
        return Err(Error::InvalidArgument("no training scenes".into()));
    }
    for (i, s) in scenes.iter().enumerate() {
        if (s.height(), s.width()) != model.mask_shape() {
            return Err(Error::ShapeMismatch(format!(
                "scene {i} is {}x{}, the model expects {:?}",
                s.height(),
                s.width(),
                model.mask_shape()
            )));
        }
    }
    let mut opt = AdamW::new(cfg.optimizer.clone(), &store);
    let pool = thread_pool(cfg.schedule.workers)?;
    let mut order_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_0f_da7a);
    let mut order: Vec<usize> = Vec::new();
    let mut cursor = 0;
    let mut curve = Vec::with_capacity(cfg.schedule.iterations);
    for it in 0..cfg.schedule.iterations {
        let mut batch = Vec::with_capacity(cfg.schedule.batch_size);
        while batch.len() < cfg.schedule.batch_size {
            if cursor == order.len() {
                order = (0..scenes.len()).collect();
                order.shuffle(&mut order_rng);
                cursor = 0;
            }
            batch.push(&scenes[order[cursor]]);
            cursor += 1;
        }
        let (grads, report) = pool.install(|| batch_gradients(&model, &store, cfg, vocab, &batch, it))?;
        let norm = AdamW::grad_norm(&grads);
        if !report.is_finite() || !norm.is_finite() {
            let bad: Vec<&String> = report.terms.iter().filter(|(_, v)| !v.is_finite()).map(|(k, _)| k).collect();
            return Err(Error::Diverged {
                iteration: it,
                detail: format!("loss {} (non-finite terms {bad:?}), gradient norm {norm}", report.total),
            });
        }
        let scale = cfg.lr_scale(it);
        opt.step(&mut store, &grads, scale);
        let rec = LossRecord {
            iteration: it,
            lr_scale: scale,
            total: report.total,
            grad_norm: norm,
            terms: report.terms,
        };
        on_record(&rec);
        curve.push(rec);
    }
    Ok(Trained {
        model,
        store,
        vocabulary: vocab.clone(),
        curve,
    })
}

/// All weights plus the config and vocabulary they were trained with.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub config: RunConfig,
    pub vocabulary: Vocabulary,
    pub iterations: usize,
    pub store: ParamStore,
}

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    version: u32,
    config_hash: u64,
    config: RunConfig,
    vocabulary: Vocabulary,
    iterations: usize,
    params: Vec<(String, usize, usize)>,
}

impl Checkpoint {
    /// Magic, format version, JSON header length and header, then every
    /// parameter as little-endian `f64` in store order.
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = CheckpointHeader {
            version: CHECKPOINT_VERSION,
            config_hash: self.config.hash(),
            config: self.config.clone(),
            vocabulary: self.vocabulary.clone(),
            iterations: self.iterations,
            params: self
                .store
                .entries()
                .iter()
                .map(|e| (e.name.clone(), e.value.rows(), e.value.cols()))
                .collect(),
        };
        let json = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(json.len() + 8 * self.store.num_scalars() + 20);
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for e in self.store.entries() {
            for v in e.value.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Checkpoint(m.to_string());
        let mut r = bytes;
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(|_| bad("truncated magic"))?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(bad("not a checkpoint file"));
        }
        let mut v = [0u8; 4];
        r.read_exact(&mut v).map_err(|_| bad("truncated version"))?;
        let version = u32::from_le_bytes(v);
        if version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported format version {version}")));
        }
        let mut l = [0u8; 8];
        r.read_exact(&mut l).map_err(|_| bad("truncated header length"))?;
        let len = u64::from_le_bytes(l) as usize;
        if r.len() < len {
            return Err(bad("truncated header"));
        }
        let header: CheckpointHeader = serde_json::from_slice(&r[..len])?;
        r = &r[len..];
        if header.config.hash() != header.config_hash {
            return Err(bad("config hash mismatch"));
        }
        let (model, mut store) = build_model(&header.config)?;
        drop(model);
        if store.len() != header.params.len() {
            return Err(Error::Checkpoint(format!(
                "{} parameters stored, the config builds {}",
                header.params.len(),
                store.len()
            )));
        }
        for (entry, (name, rows, cols)) in store.entries_mut().iter_mut().zip(&header.params) {
            if entry.name != *name || entry.value.shape() != (*rows, *cols) {
                return Err(Error::Checkpoint(format!(
                    "parameter `{name}` {rows}x{cols} does not match `{}` {:?}",
                    entry.name,
                    entry.value.shape()
                )));
            }
            for x in entry.value.data_mut() {
                let mut b = [0u8; 8];
                r.read_exact(&mut b).map_err(|_| bad("truncated weights"))?;
                *x = f64::from_le_bytes(b);
            }
        }
        if !r.is_empty() {
            return Err(bad("trailing bytes"));
        }
        Ok(Self {
            config: header.config,
            vocabulary: header.vocabulary,
            iterations: header.iterations,
            store,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&bytes).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    pub fn model(&self) -> Result<SegModel> {
        Ok(build_model(&self.config)?.0)
    }
}

/// Trains from the config's data and writes `checkpoint.bin` and
/// `loss_curve.json` into `out`.
pub fn train_to_dir(cfg: &RunConfig, out: &Path, on_record: impl FnMut(&LossRecord)) -> Result<(PathBuf, PathBuf)> {
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let (vocab, scenes) = training_data(cfg)?;
    let trained = train(cfg, &vocab, &scenes, on_record)?;
    let ckpt = out.join("checkpoint.bin");
    trained.checkpoint(cfg).save(&ckpt)?;
    let curve = out.join("loss_curve.json");
    fs::write(&curve, serde_json::to_string_pretty(&trained.curve)?).map_err(|e| Error::io(&curve, e))?;
    Ok((ckpt, curve))
}

/// What the user asks the model for.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Query {
    Labels(Vec<String>),
    Expression(String),
    Hierarchy { instances: Vec<String>, parts: Vec<String> },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskResult {
    Panoptic(PanopticPrediction),
    Instances(Vec<Detection>),
    /// Class name per pixel, row-major.
    Semantic(Vec<Option<String>>),
    Referring { proposal: usize, score: f64, mask: BinaryMask },
    Parts(Vec<PartSegment>),
    Hierarchical(Vec<HierInstance>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct InferOutput {
    pub prediction: Prediction,
    pub probabilities: ClassProbabilities,
    pub result: TaskResult,
}

/// A trained model ready for inference, with the optional auxiliary
/// classifier of open-vocabulary mode.
#[derive(Clone, Debug)]
pub struct Engine {
    pub config: RunConfig,
    pub model: SegModel,
    pub store: ParamStore,
    /// Classes seen in training.
    pub seen: BTreeSet<String>,
    pub aux: Option<AuxModel>,
}

/// Auxiliary classifier fitted on generated scenes over the full
/// generator vocabulary.
pub fn fit_aux(cfg: &RunConfig) -> Result<AuxModel> {
    let gen = &cfg.data.generator;
    let names = gen.vocabulary()?.all_classes();
    let scenes = generate_scenes(gen, cfg.open_vocab.aux.seed, cfg.open_vocab.aux.scenes)?;
    AuxModel::fit(cfg.open_vocab.aux.clone(), &scenes, &names)
}

impl Engine {
    pub fn new(config: RunConfig, model: SegModel, store: ParamStore, vocabulary: &Vocabulary) -> Result<Self> {
        let aux = if config.open_vocab.enabled {
            Some(fit_aux(&config)?)
        } else {
            None
        };
        Ok(Self {
            seen: vocabulary.all_classes().into_iter().collect(),
            config,
            model,
            store,
            aux,
        })
    }

    pub fn from_checkpoint(ckpt: Checkpoint) -> Result<Self> {
        let model = ckpt.model()?;
        Self::new(ckpt.config, model, ckpt.store, &ckpt.vocabulary)
    }

    pub fn from_trained(cfg: &RunConfig, trained: Trained) -> Result<Self> {
        Self::new(cfg.clone(), trained.model, trained.store, &trained.vocabulary)
    }

    /// Open-vocabulary probabilities for category prompts when enabled,
    /// decoder probabilities otherwise.
    pub fn classify(&self, pred: &Prediction, image: &Image) -> Result<ClassProbabilities> {
        match (&self.aux, pred.kind) {
            (Some(aux), crate::prompts::PromptKind::Category) => open_vocab_classify(
                pred,
                image,
                aux,
                self.config.open_vocab.lambda_seen,
                self.config.open_vocab.lambda_novel,
                &self.seen,
            ),
            _ => ClassProbabilities::closed_set(pred),
        }
    }

    pub fn infer(&self, image: &Image, task: Task, query: &Query) -> Result<InferOutput> {
        let post = &self.config.postprocess;
        match (task, query) {
            (Task::Panoptic | Task::Instance | Task::Semantic, Query::Labels(labels)) => {
                let (pred, probs, kinds) = self.category_pass(image, labels)?;
                let result = match task {
                    Task::Instance => {
                        TaskResult::Instances(instance_detections(&pred.proposals, &probs, &kinds, 0, post)?)
                    }
                    Task::Semantic => {
                        let p = panoptic_postprocess(&pred.proposals, &probs, &kinds, post)?;
                        let map = p.semantic_map(&probs.classes);
                        TaskResult::Semantic(map.into_iter().map(|c| c.map(|c| probs.classes[c].clone())).collect())
                    }
                    _ => TaskResult::Panoptic(panoptic_postprocess(&pred.proposals, &probs, &kinds, post)?),
                };
                Ok(InferOutput {
                    prediction: pred,
                    probabilities: probs,
                    result,
                })
            }
            (Task::Referring, Query::Expression(e)) => {
                let prompt = build_referring_prompt(e)?;
                let pred = self.model.predict(&self.store, image, &prompt)?;
                let probs = ClassProbabilities::closed_set(&pred)?;
                let (proposal, score) = referring_choice(&pred);
                let mask = binarize(&pred.proposals, proposal, post.mask_threshold);
                Ok(InferOutput {
                    prediction: pred,
                    probabilities: probs,
                    result: TaskResult::Referring { proposal, score, mask },
                })
            }
            (Task::Part | Task::Hierarchical, Query::Hierarchy { instances, parts }) => {
                let (inst_pred, inst_probs, kinds) = self.category_pass(image, instances)?;
                let prompt = build_hierarchical_prompt(instances, parts)?;
                let part_pred = self.model.predict(&self.store, image, &prompt)?;
                let part_probs = ClassProbabilities::closed_set(&part_pred)?;
                let segs = parts_from_prediction(&part_pred, &part_probs, &prompt.hierarchy, post.score_threshold);
                let result = if task == Task::Part {
                    TaskResult::Parts(segs)
                } else {
                    let pan = panoptic_postprocess(&inst_pred.proposals, &inst_probs, &kinds, post)?;
                    let insts: Vec<InstanceSegment> = pan
                        .segments
                        .iter()
                        .map(|s| InstanceSegment {
                            class: s.class.clone(),
                            mask: s.mask.clone(),
                        })
                        .collect();
                    TaskResult::Hierarchical(combine_instance_part(
                        &insts,
                        &segs,
                        &self.config.data.generator.part_grouping,
                    )?)
                };
                Ok(InferOutput {
                    prediction: part_pred,
                    probabilities: part_probs,
                    result,
                })
            }
            (t, q) => Err(Error::InvalidArgument(format!("task `{t}` cannot take query {q:?}"))),
        }
    }

    /// Category prompt over `labels`; every label not known as stuff is
    /// treated as a thing.
    fn category_pass(&self, image: &Image, labels: &[String]) -> Result<(Prediction, ClassProbabilities, Vec<GtKind>)> {
        let prompt = build_category_prompt(labels)?;
        let pred = self.model.predict(&self.store, image, &prompt)?;
        let probs = self.classify(&pred, image)?;
        let stuff: BTreeSet<&String> = self.config.data.generator.stuff.iter().map(|s| &s.name).collect();
        let kinds = labels
            .iter()
            .map(|l| if stuff.contains(l) { GtKind::Stuff } else { GtKind::Thing })
            .collect();
        Ok((pred, probs, kinds))
    }
}

/// The thing-side proposal with the highest similarity to the sentence.
pub fn referring_choice(pred: &Prediction) -> (usize, f64) {
    let candidates: Vec<usize> = (0..pred.proposals.len())
        .filter(|&i| pred.proposals.sources[i] != Source::Stuff)
        .collect();
    let pool: Vec<usize> = if candidates.is_empty() {
        (0..pred.proposals.len()).collect()
    } else {
        candidates
    };
    let mut best = (pool[0], pred.logits.get(pool[0], 0));
    for &i in &pool[1..] {
        let v = pred.logits.get(i, 0);
        if v > best.1 {
            best = (i, v);
        }
    }
    best
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub task: Option<Task>,
    pub scenes: usize,
    pub pq: Option<PqReport>,
    pub miou: Option<f64>,
    pub ap: Option<ApReport>,
    pub ap_box: Option<ApReport>,
    pub oiou: Option<f64>,
    pub part_miou: Option<PartMiouReport>,
}

#[derive(Default)]
struct SceneEval {
    panoptic: Option<(PanopticPrediction, PanopticPrediction)>,
    detections: Vec<Detection>,
    referring: Vec<(BinaryMask, BinaryMask)>,
    parts: Option<(PartMasks, PartMasks)>,
}

fn gt_parts(scene: &SceneSample) -> PartMasks {
    scene
        .instances
        .iter()
        .flat_map(|i| i.parts.iter().map(|p| (p.name.clone(), p.mask.clone())))
        .collect()
}

impl Engine {
    fn eval_scene(&self, scene: &SceneSample, index: usize, vocab: &Vocabulary, metrics: &BTreeSet<Metric>, task: Task) -> Result<SceneEval> {
        let mut out = SceneEval::default();
        let post = &self.config.postprocess;
        let classes = vocab.all_classes();
        let need_pan = metrics.iter().any(|m| matches!(m, Metric::Pq | Metric::Miou | Metric::Ap | Metric::ApBox));
        let hier = task == Task::Hierarchical;
        if need_pan || (hier && metrics.contains(&Metric::PartMiou)) {
            let (pred, probs, kinds) = self.category_pass(&scene.image, &classes)?;
            let pan = panoptic_postprocess(&pred.proposals, &probs, &kinds, post)?;
            if metrics.contains(&Metric::Ap) || metrics.contains(&Metric::ApBox) {
                out.detections = instance_detections(&pred.proposals, &probs, &kinds, index, post)?;
            }
            out.panoptic = Some((pan, PanopticPrediction::from_scene(scene)));
        }
        if metrics.contains(&Metric::Oiou) {
            for r in &scene.referring {
                let prompt = build_referring_prompt(&r.expression)?;
                let pred = self.model.predict(&self.store, &scene.image, &prompt)?;
                let (i, _) = referring_choice(&pred);
                out.referring.push((
                    binarize(&pred.proposals, i, post.mask_threshold),
                    scene.instances[r.target].mask.clone(),
                ));
            }
        }
        if metrics.contains(&Metric::PartMiou) && !vocab.part_classes.is_empty() {
            let prompt = build_hierarchical_prompt(&vocab.thing_classes, &vocab.part_classes)?;
            let pred = self.model.predict(&self.store, &scene.image, &prompt)?;
            let probs = ClassProbabilities::closed_set(&pred)?;
            let segs = parts_from_prediction(&pred, &probs, &prompt.hierarchy, post.score_threshold);
            let pred_parts: PartMasks = if hier {
                let insts: Vec<InstanceSegment> = out
                    .panoptic
                    .as_ref()
                    .map(|(p, _)| {
                        p.segments
                            .iter()
                            .filter(|s| s.kind == GtKind::Thing)
                            .map(|s| InstanceSegment {
                                class: s.class.clone(),
                                mask: s.mask.clone(),
                            })
                            .collect()
                    })
                    .unwrap_or_default();
                combine_instance_part(&insts, &segs, &vocab.part_grouping)?
                    .into_iter()
                    .flat_map(|h| h.parts)
                    .collect()
            } else {
                segs.into_iter().map(|s| (s.part, s.mask)).collect()
            };
            out.parts = Some((pred_parts, gt_parts(scene)));
        }
        Ok(out)
    }

    /// Metrics over `scenes`, evaluated in parallel per scene and reduced
    /// in scene order. An empty metric list uses the task defaults.
    pub fn evaluate(&self, scenes: &[SceneSample], vocab: &Vocabulary, task: Task, metrics: &[Metric]) -> Result<EvalReport> {
        let wanted: BTreeSet<Metric> = if metrics.is_empty() {
            task.default_metrics().into_iter().collect()
        } else {
            metrics.iter().copied().collect()
        };
        let per_scene: Vec<Result<SceneEval>> = scenes
            .par_iter()
            .enumerate()
            .map(|(i, s)| self.eval_scene(s, i, vocab, &wanted, task))
            .collect();
        let per_scene: Vec<SceneEval> = per_scene.into_iter().collect::<Result<_>>()?;
        let mut report = EvalReport {
            task: Some(task),
            scenes: scenes.len(),
            ..EvalReport::default()
        };
        let classes = vocab.all_classes();
        if wanted.contains(&Metric::Pq) {
            let (p, g): (Vec<_>, Vec<_>) = per_scene.iter().filter_map(|s| s.panoptic.clone()).unzip();
            report.pq = Some(panoptic_quality(&p, &g)?);
        }
        if wanted.contains(&Metric::Miou) {
            let mut acc = IouAccumulator::new(classes.len());
            for (p, g) in per_scene.iter().filter_map(|s| s.panoptic.as_ref()) {
                acc.add(&p.semantic_map(&classes), &g.semantic_map(&classes))?;
            }
            report.miou = Some(acc.mean());
        }
        if wanted.contains(&Metric::Ap) || wanted.contains(&Metric::ApBox) {
            let dets: Vec<Detection> = per_scene.iter().flat_map(|s| s.detections.clone()).collect();
            let gts: Vec<GroundTruth> = scenes
                .iter()
                .enumerate()
                .flat_map(|(i, s)| {
                    s.instances.iter().map(move |inst| GroundTruth {
                        image: i,
                        class: inst.class.clone(),
                        mask: inst.mask.clone(),
                        bbox: inst.bbox,
                    })
                })
                .collect();
            if wanted.contains(&Metric::Ap) {
                report.ap = Some(average_precision(&dets, &gts, &coco_thresholds(), ApMode::Mask)?);
            }
            if wanted.contains(&Metric::ApBox) {
                report.ap_box = Some(average_precision(&dets, &gts, &coco_thresholds(), ApMode::Box)?);
            }
        }
        if wanted.contains(&Metric::Oiou) {
            let (p, g): (Vec<BinaryMask>, Vec<BinaryMask>) = per_scene.iter().flat_map(|s| s.referring.clone()).unzip();
            report.oiou = Some(oiou(&p, &g)?);
        }
        if wanted.contains(&Metric::PartMiou) {
            let (p, g): (Vec<PartMasks>, Vec<PartMasks>) = per_scene.iter().filter_map(|s| s.parts.clone()).unzip();
            let (h, w) = self.model.mask_shape();
            report.part_miou = Some(miou_parts(&p, &g, &vocab.part_grouping, h, w)?);
        }
        Ok(report)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: String,
    pub seed: u64,
    pub final_loss: f64,
    pub report: EvalReport,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub rows: Vec<AblationRow>,
}

impl AblationReport {
    /// Mean PQ of a variant over its seeds.
    pub fn mean_pq(&self, variant: &str) -> Option<f64> {
        let v: Vec<f64> = self
            .rows
            .iter()
            .filter(|r| r.variant == variant)
            .filter_map(|r| r.report.pq.as_ref().map(|p| p.pq))
            .collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    }
}

/// The metrics reported per ablation variant.
pub const ABLATION_METRICS: [Metric; 3] = [Metric::Pq, Metric::Ap, Metric::Oiou];

/// Trains and evaluates every variant on the same data for every seed, in
/// the given order.
pub fn ablate(
    base: &RunConfig,
    variants: &[Variant],
    seeds: &[u64],
    train_data: (&Vocabulary, &[SceneSample]),
    eval_data: (&Vocabulary, &[SceneSample]),
) -> Result<AblationReport> {
    let mut report = AblationReport::default();
    for &seed in seeds {
        for v in variants {
            let mut cfg = base.clone();
            cfg.seed = seed;
            cfg.model.decoder = v.apply(cfg.model.decoder.clone());
            let trained = train(&cfg, train_data.0, train_data.1, |_| {})?;
            let final_loss = trained.curve.last().map_or(f64::NAN, |r| r.total);
            let engine = Engine::from_trained(&cfg, trained)?;
            let eval = engine.evaluate(eval_data.1, eval_data.0, cfg.task, &ABLATION_METRICS)?;
            report.rows.push(AblationRow {
                variant: v.name().to_string(),
                seed,
                final_loss,
                report: eval,
            });
        }
    }
    Ok(report)
}

/// Stable display colour of a class name.
pub fn class_color(name: &str) -> [f64; 3] {
    let h = fnv1a(name);
    [(h & 0xff) as f64 / 255.0, ((h >> 8) & 0xff) as f64 / 255.0, ((h >> 16) & 0xff) as f64 / 255.0]
}

/// Blends each segment's class colour into the image at half opacity and
/// darkens segment boundaries.
pub fn overlay(image: &Image, segments: &[Segment]) -> Result<Image> {
    let mut out = image.clone();
    let (h, w, ch) = (image.height, image.width, image.channels);
    for s in segments {
        if s.mask.shape() != (h, w) {
            return Err(Error::ShapeMismatch(format!("segment mask {:?} on a {h}x{w} image", s.mask.shape())));
        }
        let color = class_color(&s.class);
        for r in 0..h {
            for c in 0..w {
                if !s.mask.get(r, c) {
                    continue;
                }
                let edge = [(0i64, 1i64), (1, 0), (0, -1), (-1, 0)].iter().any(|&(dr, dc)| {
                    let (rr, cc) = (r as i64 + dr, c as i64 + dc);
                    rr < 0 || cc < 0 || rr >= h as i64 || cc >= w as i64 || !s.mask.get(rr as usize, cc as usize)
                });
                for k in 0..ch {
                    let i = (r * w + c) * ch + k;
                    let target = if ch == 3 { color[k] } else { color.iter().sum::<f64>() / 3.0 };
                    out.data[i] = if edge { 0.2 * out.data[i] } else { 0.5 * out.data[i] + 0.5 * target };
                }
            }
        }
    }
    Ok(out)
}

pub fn render_overlay(image: &Image, segments: &[Segment], path: &Path) -> Result<()> {
    overlay(image, segments)?.save_png(path)
}

/// Grouped class probabilities of a flat distribution row, used when
/// relabelling external part masks with panoptic segment distributions.
pub fn segment_distributions(probs: &ClassProbabilities, segments: &[Segment]) -> Tensor {
    let rows: Vec<Vec<f64>> = segments
        .iter()
        .map(|s| match s.proposal {
            Some(p) => {
                let row = probs.p_final.row(p);
                let z: f64 = row.iter().sum();
                row.iter().map(|v| v / z.max(f64::MIN_POSITIVE)).collect()
            }
            None => probs
                .classes
                .iter()
                .map(|c| if *c == s.class { 1.0 } else { 0.0 })
                .collect(),
        })
        .collect();
    if rows.is_empty() {
        Tensor::zeros(0, probs.classes.len())
    } else {
        Tensor::from_rows(&rows)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn tiny_config() -> RunConfig {
        let mut cfg = RunConfig::default();
        cfg.model.text.dim = 16;
        cfg.model.image.dim = 16;
        cfg.model.decoder.dim = 16;
        cfg.model.decoder.ffn_hidden = 32;
        cfg.model.decoder.layers = 1;
        cfg.model.decoder.num_thing_queries = 6;
        cfg.model.decoder.num_stuff_queries = 4;
        cfg.model.image.height = 32;
        cfg.model.image.width = 32;
        cfg.data.generator.height = 32;
        cfg.data.generator.width = 32;
        cfg.data.generator.min_radius = 4;
        cfg.data.generator.max_radius = 7;
        cfg.data.train_scenes = 3;
        cfg.data.eval_scenes = 2;
        cfg.schedule.iterations = 3;
        cfg.schedule.batch_size = 2;
        cfg.optimizer.lr = 1e-3;
        cfg
    }

    #[test]
    fn task_names_round_trip() {
        for t in Task::ALL {
            assert_eq!(t.name().parse::<Task>().unwrap(), t);
        }
        assert!(matches!("depth".parse::<Task>(), Err(Error::UnknownTask(_))));
    }

    #[test]
    fn config_toml_round_trip() {
        let cfg = tiny_config();
        let text = cfg.to_toml().unwrap();
        assert_eq!(RunConfig::from_toml(&text).unwrap(), cfg);
        let default = RunConfig::default().to_toml().unwrap();
        assert_eq!(RunConfig::from_toml(&default).unwrap(), RunConfig::default());
        assert_eq!(RunConfig::from_toml("seed = 3").unwrap().seed, 3);
    }

    #[test]
    fn lr_drops_by_ten() {
        let mut cfg = RunConfig::default();
        cfg.schedule.iterations = 100;
        cfg.schedule.lr_drops = vec![0.5, 0.9];
        assert_eq!(cfg.lr_scale(49), 1.0);
        assert!((cfg.lr_scale(50) - 0.1).abs() < 1e-15);
        assert!((cfg.lr_scale(95) - 0.01).abs() < 1e-15);
    }

    #[test]
    fn zero_iterations_keeps_initialization() {
        let mut cfg = tiny_config();
        cfg.schedule.iterations = 0;
        let (vocab, scenes) = training_data(&cfg).unwrap();
        let trained = train(&cfg, &vocab, &scenes, |_| {}).unwrap();
        let (_, init) = build_model(&cfg).unwrap();
        for (a, b) in trained.store.entries().iter().zip(init.entries()) {
            assert_eq!(a.value, b.value);
        }
    }

    #[test]
    fn training_is_reproducible_and_thread_independent() {
        let mut cfg = tiny_config();
        let (vocab, scenes) = training_data(&cfg).unwrap();
        cfg.schedule.workers = 1;
        let a = train(&cfg, &vocab, &scenes, |_| {}).unwrap();
        cfg.schedule.workers = 3;
        let b = train(&cfg, &vocab, &scenes, |_| {}).unwrap();
        assert_eq!(a.curve, b.curve);
        for (x, y) in a.store.entries().iter().zip(b.store.entries()) {
            assert_eq!(x.value, y.value);
        }
        assert!(a.curve.iter().all(|r| r.total.is_finite() && r.total > 0.0));
        let terms: f64 = a.curve[0].terms.values().sum();
        assert!((terms - a.curve[0].total).abs() < 1e-9 * terms.abs().max(1.0));
    }

    #[test]
    fn checkpoint_round_trip_is_bit_identical() {
        let cfg = tiny_config();
        let (vocab, scenes) = training_data(&cfg).unwrap();
        let trained = train(&cfg, &vocab, &scenes, |_| {}).unwrap();
        let ckpt = trained.checkpoint(&cfg);
        let bytes = ckpt.to_bytes().unwrap();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        let q = Query::Labels(vocab.all_classes());
        let e1 = Engine::from_trained(&cfg, trained).unwrap();
        let e2 = Engine::from_checkpoint(back).unwrap();
        let a = e1.infer(&scenes[0].image, Task::Panoptic, &q).unwrap();
        let b = e2.infer(&scenes[0].image, Task::Panoptic, &q).unwrap();
        assert_eq!(a, b);
        let mut corrupt = bytes.clone();
        corrupt[0] = b'X';
        assert!(Checkpoint::from_bytes(&corrupt).is_err());
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 1]).is_err());
    }

    #[test]
    fn inference_contracts() {
        let cfg = tiny_config();
        let (model, store) = build_model(&cfg).unwrap();
        let vocab = cfg.data.generator.vocabulary().unwrap();
        let engine = Engine::new(cfg.clone(), model, store, &vocab).unwrap();
        let (_, scenes) = evaluation_data(&cfg).unwrap();
        let img = &scenes[0].image;
        let labels = vec!["sky".to_string(), "red disk".to_string(), "grass".to_string()];
        let out = engine.infer(img, Task::Panoptic, &Query::Labels(labels.clone())).unwrap();
        assert_eq!(out.prediction.logits.cols(), labels.len() + 1);
        assert_eq!(out.prediction.probabilities().cols(), labels.len() + 1);
        let again = engine.infer(img, Task::Panoptic, &Query::Labels(labels)).unwrap();
        assert_eq!(out, again);
        let r = engine
            .infer(img, Task::Referring, &Query::Expression(scenes[0].referring[0].expression.clone()))
            .unwrap();
        assert!(matches!(r.result, TaskResult::Referring { .. }));
        assert!(engine.infer(img, Task::Referring, &Query::Labels(vec!["x".into()])).is_err());
        let h = engine
            .infer(
                img,
                Task::Hierarchical,
                &Query::Hierarchy {
                    instances: vocab.thing_classes.clone(),
                    parts: vocab.part_classes.clone(),
                },
            )
            .unwrap();
        assert!(matches!(h.result, TaskResult::Hierarchical(_)));
    }

    #[test]
    fn evaluation_reports_requested_metrics() {
        let cfg = tiny_config();
        let (model, store) = build_model(&cfg).unwrap();
        let (vocab, scenes) = evaluation_data(&cfg).unwrap();
        let engine = Engine::new(cfg, model, store, &vocab).unwrap();
        let r = engine.evaluate(&scenes, &vocab, Task::Panoptic, &Metric::ALL).unwrap();
        for v in [r.pq.as_ref().unwrap().pq, r.miou.unwrap(), r.ap.as_ref().unwrap().ap, r.oiou.unwrap()] {
            assert!((0.0..=1.0).contains(&v));
        }
        assert!(r.part_miou.is_some());
        let d = engine.evaluate(&scenes, &vocab, Task::Referring, &[]).unwrap();
        assert!(d.oiou.is_some() && d.pq.is_none());
    }

    #[test]
    fn overlay_keeps_unlabelled_pixels() {
        let img = Image::zeros(4, 4, 3);
        let seg = Segment {
            mask: BinaryMask::from_fn(4, 4, |r, c| r < 3 && c < 3).unwrap(),
            class: "sky".into(),
            kind: GtKind::Stuff,
            score: 1.0,
            proposal: None,
        };
        let mut lit = img.clone();
        lit.data.iter_mut().for_each(|v| *v = 1.0);
        let out = overlay(&lit, &[seg]).unwrap();
        assert_eq!(out.pixel(3, 3), &[1.0, 1.0, 1.0]);
        assert_eq!(out.pixel(0, 0), &[0.2, 0.2, 0.2]);
        let c = class_color("sky");
        assert!((out.pixel(1, 1)[0] - (0.5 + 0.5 * c[0])).abs() < 1e-12);
    }
}
