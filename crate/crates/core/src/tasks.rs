//! Downstream networks: depth enhancement and surface-normal estimation with
//! a shared four-scale U-shaped encoder-decoder.

use std::collections::HashSet;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use dcl_tensor::{Graph, Tensor, Var};
use rand::seq::SliceRandom;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::depth::DepthMap;
use crate::error::{DclError, Result};
use crate::metrics::{DepthAccumulator, MetricReport, NormalAccumulator, Provenance, SsimWindow};
use crate::nn::{adam_update, read_checkpoint, write_checkpoint, CheckpointFile, OptimizerState, ParamSet, NORM_EPS};
use crate::nn::checkpoint::{fill_params, push_params};
use crate::scene::{load_samples, Manifest, Sample, Split};
use crate::seed::{derive_seed, rng, tag};
use crate::train::EpochOrder;

const EVAL_BATCH: usize = 8;
/// Shallowest depth an enhancement output may take, in meters.
const MIN_DEPTH_M: f32 = 1e-3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskKind {
    Enhance,
    Normals,
}

impl TaskKind {
    pub fn out_channels(self) -> usize {
        match self {
            TaskKind::Enhance => 1,
            TaskKind::Normals => 3,
        }
    }
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TaskKind::Enhance => "enhance",
            TaskKind::Normals => "normals",
        })
    }
}

impl FromStr for TaskKind {
    type Err = DclError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "enhance" => Ok(TaskKind::Enhance),
            "normals" => Ok(TaskKind::Normals),
            other => Err(DclError::Usage(format!("unknown task {other:?} (enhance|normals)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskConfig {
    pub kind: TaskKind,
    pub base_width: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub batch_size: usize,
    pub steps: usize,
    pub finetune_steps: usize,
    pub seed: u64,
}

impl Default for TaskConfig {
    fn default() -> Self {
        Self {
            kind: TaskKind::Enhance,
            base_width: 32,
            lr: 2e-4,
            beta1: 0.9,
            beta2: 0.999,
            batch_size: 8,
            steps: 1000,
            finetune_steps: 200,
            seed: 0,
        }
    }
}

impl TaskConfig {
    pub fn validate(&self) -> Result<()> {
        if self.base_width == 0 || self.batch_size == 0 {
            return Err(DclError::Config("task config: base_width and batch_size must be >= 1".into()));
        }
        if !(self.lr > 0.0 && (0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2)) {
            return Err(DclError::Config("task config: lr must be > 0 and moment decays in [0, 1)".into()));
        }
        Ok(())
    }
}

/// Which data a task model has seen.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TaskProvenance {
    /// Source of the training depth: rendered, simulated or synthesized.
    pub method: String,
    pub train_keys: Vec<u64>,
    pub finetune_fraction: Option<f64>,
    pub finetune_keys: Vec<u64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TaskModel {
    pub config: TaskConfig,
    pub resolution: usize,
    pub params: ParamSet<f32>,
    pub provenance: TaskProvenance,
}

fn he_normal(p: &mut ParamSet<f32>, name: &str, shape: &[usize], rng: &mut impl rand::Rng) {
    let fan_in: usize = shape[1..].iter().product();
    let d = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("valid std");
    p.push(name, Tensor::from_fn(shape, |_| d.sample(rng) as f32));
}

/// Four scales: full, 1/2, 1/4 and 1/8 resolution, widths W to 8W.
pub fn build_unet(kind: TaskKind, width: usize, seed: u64) -> ParamSet<f32> {
    let mut r = rng(seed);
    let mut p = ParamSet::default();
    let w = width;
    let scales = [w, 2 * w, 4 * w, 8 * w];
    he_normal(&mut p, "enc0.weight", &[w, 1, 3, 3], &mut r);
    p.push_zeros("enc0.bias", &[w]);
    for l in 1..4 {
        he_normal(&mut p, &format!("enc{l}.weight"), &[scales[l], scales[l - 1], 3, 3], &mut r);
        p.push_zeros(format!("enc{l}.bias"), &[scales[l]]);
    }
    for l in (0..3).rev() {
        // transposed kernels are [in, out, k, k]; fan-in is taken over `out`
        let d = Normal::new(0.0, (2.0 / (scales[l] * 9) as f64).sqrt()).expect("valid std");
        p.push(
            format!("up{l}.weight"),
            Tensor::from_fn(&[scales[l + 1], scales[l], 3, 3], |_| d.sample(&mut r) as f32),
        );
        p.push_zeros(format!("up{l}.bias"), &[scales[l]]);
        he_normal(&mut p, &format!("dec{l}.weight"), &[scales[l], 2 * scales[l], 3, 3], &mut r);
        p.push_zeros(format!("dec{l}.bias"), &[scales[l]]);
    }
    match kind {
        TaskKind::Enhance => {
            p.push_zeros("head.weight", &[1, w, 3, 3]);
            p.push_zeros("head.bias", &[1]);
        }
        TaskKind::Normals => {
            p.push_normal("head.weight", &[3, w, 3, 3], &mut r);
            p.push("head.bias", Tensor::new(&[3], vec![0.0, 0.0, -1.0]));
        }
    }
    p
}

/// Forward pass on normalized depth `[N, 1, H, W]`. Enhancement returns
/// normalized depth; normals return unit vectors `[N, 3, H, W]`.
pub fn unet_forward<'g>(kind: TaskKind, params: &[Var<'g, f32>], x: Var<'g, f32>) -> Var<'g, f32> {
    let mut it = params.iter().copied();
    let mut next = || it.next().expect("parameter count");
    let mut skips = Vec::new();
    let mut h = x.conv2d(next(), Some(next()), 1, 1).relu();
    for _ in 1..4 {
        skips.push(h);
        h = h.conv2d(next(), Some(next()), 2, 1).relu();
    }
    for _ in 0..3 {
        let up = h.conv_transpose2d(next(), Some(next()), 2, 1, 1).relu();
        let skip = skips.pop().expect("skip");
        h = Var::concat_channels(&[up, skip]).conv2d(next(), Some(next()), 1, 1).relu();
    }
    let out = h.conv2d(next(), Some(next()), 1, 1);
    match kind {
        TaskKind::Enhance => x.add(out),
        TaskKind::Normals => out.normalize_channels(NORM_EPS as f32),
    }
}

struct TaskData {
    resolution: usize,
    input: Vec<Vec<f32>>,
    /// Normalized clean depth or planar normals.
    target: Vec<Vec<f32>>,
    mask: Vec<Vec<f32>>,
}

impl TaskData {
    fn new(kind: TaskKind, samples: &[Sample]) -> Result<Self> {
        let first = samples.first().ok_or_else(|| DclError::Config("task manifest is empty".into()))?;
        let res = first.depth.width();
        if first.depth.height() != res || res % 8 != 0 {
            return Err(DclError::Config(format!(
                "task data must be square with an edge divisible by 8, got {}x{}",
                res,
                first.depth.height()
            )));
        }
        let mut d = Self {
            resolution: res,
            input: vec![],
            target: vec![],
            mask: vec![],
        };
        for s in samples {
            if s.depth.width() != res || s.depth.height() != res {
                return Err(DclError::Config("task samples differ in size".into()));
            }
            d.input.push(s.depth.to_normalized());
            let mask: Vec<f32>;
            match kind {
                TaskKind::Enhance => {
                    mask = s.clean_depth.values().iter().map(|&v| (v > 0.0) as u8 as f32).collect();
                    d.target.push(s.clean_depth.to_normalized());
                }
                TaskKind::Normals => {
                    mask = (0..res * res).map(|i| s.normals.is_valid(i) as u8 as f32).collect();
                    d.target.push(s.normals.to_planar());
                }
            }
            d.mask.push(mask);
        }
        Ok(d)
    }

    fn batch(&self, idx: &[usize], kind: TaskKind) -> (Tensor<f32>, Tensor<f32>, Tensor<f32>) {
        let r = self.resolution;
        let c = kind.out_channels();
        let gather = |v: &Vec<Vec<f32>>, reps: usize| -> Vec<f32> {
            idx.iter()
                .flat_map(|&i| (0..reps).flat_map(move |_| v[i].iter().copied()))
                .collect()
        };
        (
            Tensor::new(&[idx.len(), 1, r, r], gather(&self.input, 1)),
            Tensor::new(&[idx.len(), c, r, r], gather(&self.target, 1)),
            Tensor::new(&[idx.len(), c, r, r], gather(&self.mask, c)),
        )
    }
}

/// Mean over valid ground-truth pixels of the per-pixel L1 error; `None`
/// when the batch has no valid pixel.
pub fn masked_l1<'g>(pred: Var<'g, f32>, target: &Tensor<f32>, mask: &Tensor<f32>, channels: usize) -> Option<Var<'g, f32>> {
    let valid = mask.data().iter().sum::<f32>() / channels as f32;
    if valid == 0.0 {
        return None;
    }
    let g = pred.graph();
    let diff = pred.sub(g.constant(target.clone())).abs().mul_const(mask);
    Some(diff.sum().scale(1.0 / valid))
}

fn check_split(m: &Manifest, what: &str) -> Result<()> {
    if m.split == Split::Validation {
        return Err(DclError::Config(format!("{what} uses a validation manifest")));
    }
    Ok(())
}

fn fit(
    model: &mut TaskModel,
    data: &TaskData,
    steps: usize,
    lr: f64,
    seed: u64,
    log: &mut Vec<f64>,
) -> Result<()> {
    let cfg = model.config.clone();
    let shapes: Vec<Vec<usize>> = model.params.tensors().iter().map(|t| t.shape().to_vec()).collect();
    let mut opt = OptimizerState::new(shapes.iter().map(|s| s.as_slice()), lr, cfg.beta1, cfg.beta2);
    let mut order = EpochOrder::new(data.input.len(), seed);
    for step in 0..steps {
        let idx = order.next_batch(cfg.batch_size);
        let (x, t, m) = data.batch(&idx, cfg.kind);
        let g = Graph::<f32>::new();
        let vars = model.params.bind(&g, true);
        let pred = unet_forward(cfg.kind, &vars, g.constant(x));
        let Some(loss) = masked_l1(pred, &t, &m, cfg.kind.out_channels()) else {
            continue;
        };
        let value = loss.item() as f64;
        if !value.is_finite() {
            return Err(DclError::Numeric(format!("task loss is {value} at step {}", step + 1)));
        }
        log.push(value);
        let grads = g.backward(loss);
        let gv: Vec<_> = vars.iter().map(|v| grads.get_or_zeros(*v)).collect();
        let mut params: Vec<_> = model.params.tensors_mut().iter_mut().collect();
        adam_update(&mut params, &gv, &mut opt)?;
    }
    Ok(())
}

/// Supervised training on a manifest's depth against its clean labels.
/// Returns the model and the per-step loss.
pub fn train_task(manifest: &Manifest, cfg: &TaskConfig) -> Result<(TaskModel, Vec<f64>)> {
    cfg.validate()?;
    check_split(manifest, "task training")?;
    let samples = load_samples(manifest)?;
    let data = TaskData::new(cfg.kind, &samples)?;
    let mut model = TaskModel {
        config: cfg.clone(),
        resolution: data.resolution,
        params: build_unet(cfg.kind, cfg.base_width, derive_seed(cfg.seed, &[tag("task"), tag(&cfg.kind.to_string())])),
        provenance: TaskProvenance {
            method: manifest.source.clone(),
            train_keys: manifest.keys(),
            ..TaskProvenance::default()
        },
    };
    let mut log = Vec::new();
    fit(&mut model, &data, cfg.steps, cfg.lr, derive_seed(cfg.seed, &[tag("task-order")]), &mut log)?;
    Ok((model, log))
}

/// Seeded subset of `round(fraction * n)` indices, in ascending order.
pub fn finetune_subset(n: usize, fraction: f64, seed: u64) -> Result<Vec<usize>> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(DclError::Config(format!("fine-tune fraction {fraction} outside (0, 1]")));
    }
    let k = (fraction * n as f64).round() as usize;
    if k == 0 {
        return Err(DclError::Config(format!("fraction {fraction} of {n} samples is empty")));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng(derive_seed(seed, &[tag("finetune-subset")])));
    idx.truncate(k);
    idx.sort_unstable();
    Ok(idx)
}

/// Continue training on a seeded fraction of labelled real data at half the
/// learning rate.
pub fn finetune(model: &TaskModel, real: &Manifest, fraction: f64) -> Result<(TaskModel, Vec<f64>)> {
    check_split(real, "fine-tuning")?;
    let cfg = &model.config;
    let subset = finetune_subset(real.entries.len(), fraction, cfg.seed)?;
    let all = load_samples(real)?;
    let samples: Vec<Sample> = subset.iter().map(|&i| all[i].clone()).collect();
    let data = TaskData::new(cfg.kind, &samples)?;
    if data.resolution != model.resolution {
        return Err(DclError::Config("fine-tune data resolution differs from the model's".into()));
    }
    let keys = real.keys();
    let mut out = model.clone();
    out.provenance.finetune_fraction = Some(fraction);
    out.provenance.finetune_keys = subset.iter().map(|&i| keys[i]).collect();
    let mut log = Vec::new();
    fit(
        &mut out,
        &data,
        cfg.finetune_steps,
        cfg.lr / 2.0,
        derive_seed(cfg.seed, &[tag("finetune-order")]),
        &mut log,
    )?;
    Ok((out, log))
}

impl TaskModel {
    /// Raw network output for normalized depth `[N, 1, H, W]`.
    pub fn predict(&self, depth: &Tensor<f32>) -> Tensor<f32> {
        let g = Graph::<f32>::new();
        let vars = self.params.bind(&g, false);
        let out = unet_forward(self.config.kind, &vars, g.constant(depth.clone()));
        (*out.value()).clone()
    }

    pub fn seen_keys(&self) -> HashSet<u64> {
        self.provenance
            .train_keys
            .iter()
            .chain(&self.provenance.finetune_keys)
            .copied()
            .collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let meta = serde_json::json!({
            "kind": "task",
            "config": self.config,
            "resolution": self.resolution,
            "provenance": self.provenance,
        });
        let mut tensors = Vec::new();
        push_params(&mut tensors, "task", &self.params);
        write_checkpoint(path, &CheckpointFile { meta, tensors })
    }

    pub fn load(path: &Path) -> Result<Self> {
        #[derive(Deserialize)]
        struct Meta {
            kind: String,
            config: TaskConfig,
            resolution: usize,
            provenance: TaskProvenance,
        }
        let ck = read_checkpoint(path)?;
        let meta: Meta = serde_json::from_value(ck.meta.clone()).map_err(|e| DclError::json(path, e))?;
        if meta.kind != "task" {
            return Err(DclError::format(path, format!("checkpoint kind {:?}, expected \"task\"", meta.kind)));
        }
        let mut params = build_unet(meta.config.kind, meta.config.base_width, 0);
        fill_params(&mut params, "task", &ck.tensor_map(), path)?;
        Ok(Self {
            config: meta.config,
            resolution: meta.resolution,
            params,
            provenance: meta.provenance,
        })
    }
}

/// Dense metric depth from a normalized enhancement output.
pub fn output_to_depth(out: &[f32], res: usize, d_max: f32) -> Result<DepthMap> {
    let values = out
        .iter()
        .map(|&o| ((o + 1.0) * 0.5 * d_max).clamp(MIN_DEPTH_M, d_max))
        .collect();
    DepthMap::new(res, res, values, d_max)
}

/// Metrics on a validation manifest that shares no sample with anything the
/// model was trained or fine-tuned on.
pub fn evaluate_task(model: &TaskModel, validation: &Manifest) -> Result<MetricReport> {
    evaluate_task_with(model, validation, SsimWindow::default())
}

pub fn evaluate_task_with(model: &TaskModel, validation: &Manifest, window: SsimWindow) -> Result<MetricReport> {
    let seen = model.seen_keys();
    if let Some(k) = validation.keys().into_iter().find(|k| seen.contains(k)) {
        return Err(DclError::Config(format!("validation sample {k:#018x} was seen in training")));
    }
    let samples = load_samples(validation)?;
    if samples.is_empty() {
        return Err(DclError::Evaluation("validation manifest is empty".into()));
    }
    let r = model.resolution;
    let kind = model.config.kind;
    let mut depth_acc = DepthAccumulator::new(window);
    let mut normal_acc = NormalAccumulator::new();
    for chunk in samples.chunks(EVAL_BATCH) {
        if chunk.iter().any(|s| s.depth.width() != r || s.depth.height() != r) {
            return Err(DclError::Config("validation resolution differs from the model's".into()));
        }
        let x = Tensor::new(
            &[chunk.len(), 1, r, r],
            chunk.iter().flat_map(|s| s.depth.to_normalized()).collect(),
        );
        let out = model.predict(&x);
        if !out.all_finite() {
            return Err(DclError::Numeric("non-finite task prediction".into()));
        }
        let n = r * r;
        for (b, s) in chunk.iter().enumerate() {
            match kind {
                TaskKind::Enhance => {
                    let o = &out.data()[b * n..(b + 1) * n];
                    depth_acc.add(&output_to_depth(o, r, s.clean_depth.d_max())?, &s.clean_depth)?;
                }
                TaskKind::Normals => {
                    let o = &out.data()[b * 3 * n..(b + 1) * 3 * n];
                    let v: Vec<[f32; 3]> = (0..n).map(|i| [o[i], o[n + i], o[2 * n + i]]).collect();
                    normal_acc.add_vectors(&v, &s.normals)?;
                }
            }
        }
    }
    let provenance = Provenance {
        method: model.provenance.method.clone(),
        model: format!("{kind}-unet-w{}", model.config.base_width),
        dataset: validation.root.display().to_string(),
        seed: model.config.seed,
        details: [(
            "finetune_fraction".to_string(),
            serde_json::to_value(model.provenance.finetune_fraction).unwrap_or_default(),
        )]
        .into_iter()
        .collect(),
    };
    match kind {
        TaskKind::Enhance => depth_acc.finish(provenance),
        TaskKind::Normals => normal_acc.finish(provenance),
    }
}
