//! Alternating adversarial training of the synthesis network, checkpoints
//! with full resumable state, and bulk synthesis of realistic depth.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use dcl_tensor::{Graph, Tensor};
use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::depth::{write_depth, DepthMap, Domain};
use crate::error::{DclError, Result};
use crate::losses::{
    adv_discriminator, adv_generator, loss_dc, loss_idt, sample_all_layers, GanObjective, LossBreakdown, PairSampling,
};
use crate::nn::checkpoint::{fill_optimizer, push_optimizer};
use crate::nn::{
    adam_update, build_models, read_checkpoint, write_checkpoint, CheckpointFile, ModelConfig, ModelSet,
    OptimizerState,
};
use crate::scene::{dataset::copy_labels, load_samples, write_manifest, Manifest, ManifestEntry, Sample};
use crate::seed::{derive_seed, rng, tag};

pub const HOLE_THRESHOLD: f32 = -0.995;
pub const LOG_FILE: &str = "train_log.jsonl";
pub const FINAL_CHECKPOINT: &str = "model.dclc";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub alpha: f64,
    pub beta: f64,
    pub tau: f64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub batch_size: usize,
    pub steps: usize,
    pub seed: u64,
    pub enable_adv: bool,
    pub enable_dc: bool,
    pub enable_idt: bool,
    /// Steps between periodic checkpoints; 0 writes only the final one.
    pub checkpoint_every: usize,
    pub sampling: PairSampling,
    pub gan: GanObjective,
    /// Hold the learning rate for the first half, then decay linearly to 0.
    pub lr_decay: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            alpha: 1.5,
            beta: 1.0,
            tau: 0.07,
            lr: 2e-4,
            beta1: 0.5,
            beta2: 0.999,
            batch_size: 8,
            steps: 2000,
            seed: 0,
            enable_adv: true,
            enable_dc: true,
            enable_idt: true,
            checkpoint_every: 500,
            sampling: PairSampling::default(),
            gan: GanObjective::Logistic,
            lr_decay: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        let bad = |m: &str| Err(DclError::Config(format!("train config: {m}")));
        if !(self.alpha >= 0.0 && self.beta >= 0.0) {
            return bad("alpha and beta must be >= 0");
        }
        if !(self.tau > 0.0) {
            return bad("tau must be > 0");
        }
        if !(self.lr > 0.0 && (0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2)) {
            return bad("lr must be > 0 and moment decays in [0, 1)");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1");
        }
        if !(self.enable_adv || self.enable_dc || self.enable_idt) {
            return bad("at least one loss term must stay enabled");
        }
        if self.enable_dc && self.sampling.partners == 0 {
            return bad("sampling needs at least one partner");
        }
        Ok(())
    }
}

/// Normalized network inputs: depth `[N, 1, H, W]`, color `[N, 3, H, W]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub depth: Tensor<f32>,
    pub rgb: Option<Tensor<f32>>,
}

/// One domain held in memory in network units.
pub struct DomainData {
    pub resolution: usize,
    depth: Vec<Vec<f32>>,
    rgb: Vec<Vec<f32>>,
}

impl DomainData {
    pub fn from_samples(samples: &[Sample], resolution: usize) -> Result<Self> {
        if samples.is_empty() {
            return Err(DclError::Config("dataset is empty".into()));
        }
        for s in samples {
            if s.depth.width() != resolution || s.depth.height() != resolution {
                return Err(DclError::Config(format!(
                    "sample of {}x{} does not match model resolution {resolution}",
                    s.depth.width(),
                    s.depth.height()
                )));
            }
        }
        Ok(Self {
            resolution,
            depth: samples.iter().map(|s| s.depth.to_normalized()).collect(),
            rgb: samples.iter().map(|s| s.rgb.to_normalized_planar()).collect(),
        })
    }

    pub fn from_manifest(m: &Manifest, resolution: usize) -> Result<Self> {
        Self::from_samples(&load_samples(m)?, resolution)
    }

    pub fn len(&self) -> usize {
        self.depth.len()
    }

    pub fn is_empty(&self) -> bool {
        self.depth.is_empty()
    }

    pub fn batch(&self, indices: &[usize], with_rgb: bool) -> Batch {
        let r = self.resolution;
        let depth = Tensor::new(
            &[indices.len(), 1, r, r],
            indices.iter().flat_map(|&i| self.depth[i].iter().copied()).collect(),
        );
        let rgb = with_rgb.then(|| {
            Tensor::new(
                &[indices.len(), 3, r, r],
                indices.iter().flat_map(|&i| self.rgb[i].iter().copied()).collect(),
            )
        });
        Batch { depth, rgb }
    }
}

/// Shuffled epoch iteration with its own stream.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochOrder {
    rng: ChaCha8Rng,
    order: Vec<usize>,
    pos: usize,
}

impl EpochOrder {
    pub fn new(len: usize, seed: u64) -> Self {
        let mut rng = rng(seed);
        let mut order: Vec<usize> = (0..len).collect();
        order.shuffle(&mut rng);
        Self { rng, order, pos: 0 }
    }

    pub fn next_batch(&mut self, size: usize) -> Vec<usize> {
        (0..size)
            .map(|_| {
                if self.pos == self.order.len() {
                    self.order.shuffle(&mut self.rng);
                    self.pos = 0;
                }
                self.pos += 1;
                self.order[self.pos - 1]
            })
            .collect()
    }
}

fn finite(name: &str, x: f64) -> Result<f64> {
    if x.is_finite() {
        Ok(x)
    } else {
        Err(DclError::Numeric(format!("{name} loss is {x}")))
    }
}

/// Spatial extents of the tapped layers.
pub fn tapped_extents(cfg: &ModelConfig) -> Vec<(usize, usize)> {
    cfg.tapped_layers
        .iter()
        .map(|&l| (cfg.layer_extent(l), cfg.layer_extent(l)))
        .collect()
}

/// One discriminator update followed by one generator update.
pub fn train_step(
    m: &mut ModelSet<f32>,
    opt_g: &mut OptimizerState<f32>,
    opt_d: &mut OptimizerState<f32>,
    batch_s: &Batch,
    batch_r: &Batch,
    cfg: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<LossBreakdown> {
    let use_rgb = cfg.model.use_rgb;
    let g = Graph::<f32>::new();
    let mut b = m.bind(&g, true, false);
    let rgb_s = if use_rgb { batch_s.rgb.clone().map(|t| g.constant(t)) } else { None };
    let (fake, feats_s) = b.synthesize(g.constant(batch_s.depth.clone()), rgb_s)?;

    let mut adv_d = 0.0;
    if cfg.enable_adv {
        let gd = Graph::<f32>::new();
        let bd = m.bind(&gd, false, true);
        let real = bd.discriminate(gd.constant(batch_r.depth.clone()));
        let detached = bd.discriminate(gd.constant((*fake.value()).clone()));
        let loss = adv_discriminator(real, detached, cfg.gan);
        adv_d = finite("adv_d", loss.item() as f64)?;
        let grads = gd.backward(loss);
        let gv: Vec<_> = bd.discriminator.iter().map(|v| grads.get_or_zeros(*v)).collect();
        let mut params: Vec<_> = m.discriminator.tensors_mut().iter_mut().collect();
        adam_update(&mut params, &gv, opt_d)?;
        // the generator sees the updated discriminator, as constants
        b.discriminator = m.discriminator.bind(&g, false);
    }

    let mut terms = Vec::new();
    let mut adv_g = 0.0;
    if cfg.enable_adv {
        let l = adv_generator(b.discriminate(fake), cfg.gan);
        adv_g = finite("adv_g", l.item() as f64)?;
        terms.push(l);
    }
    let mut dc = 0.0;
    if cfg.enable_dc {
        let feats_r = b.features(fake);
        let samples = sample_all_layers(&tapped_extents(&cfg.model), batch_s.depth.dim(0), &cfg.sampling, rng)?;
        if let Some(l) = loss_dc(&b, &feats_s, &feats_r, &samples, cfg.tau) {
            dc = finite("dc", l.item() as f64)?;
            terms.push(l.scale(cfg.alpha as f32));
        }
    }
    let mut idt = 0.0;
    if cfg.enable_idt {
        let dr = g.constant(batch_r.depth.clone());
        let rgb_r = if use_rgb { batch_r.rgb.clone().map(|t| g.constant(t)) } else { None };
        let (out_r, _) = b.synthesize(dr, rgb_r)?;
        let l = loss_idt(out_r, dr);
        idt = finite("idt", l.item() as f64)?;
        terms.push(l.scale(cfg.beta as f32));
    }
    let total = terms
        .into_iter()
        .reduce(|a, t| a.add(t))
        .ok_or_else(|| DclError::Config("no loss term enabled".into()))?;
    let total_value = crate::losses::loss_total(adv_g, dc, idt, cfg.alpha, cfg.beta);
    finite("total", total.item() as f64)?;

    let grads = g.backward(total);
    let mut vars = vec![];
    vars.extend(b.encoder.iter().copied());
    vars.extend(b.decoder.iter().copied());
    if let Some(r) = &b.rgb_encoder {
        vars.extend(r.iter().copied());
    }
    for h in &b.heads {
        vars.extend(h.iter().copied());
    }
    let gv: Vec<_> = vars.iter().map(|v| grads.get_or_zeros(*v)).collect();
    let mut params: Vec<_> = m
        .generator_groups_mut()
        .into_iter()
        .flat_map(|p| p.tensors_mut().iter_mut())
        .collect();
    adam_update(&mut params, &gv, opt_g)?;
    Ok(LossBreakdown {
        adv_d,
        adv_g,
        dc,
        idt,
        total: total_value,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct OptimizerMeta {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct TrainerMeta {
    kind: String,
    config: TrainConfig,
    step: usize,
    opt_g: OptimizerMeta,
    opt_d: OptimizerMeta,
    sampler: ChaCha8Rng,
    order_s: EpochOrder,
    order_r: EpochOrder,
}

fn opt_meta(st: &OptimizerState<f32>) -> OptimizerMeta {
    OptimizerMeta {
        lr: st.lr,
        beta1: st.beta1,
        beta2: st.beta2,
        eps: st.eps,
        step: st.step,
    }
}

/// Complete mutable training state.
#[derive(Clone, Debug, PartialEq)]
pub struct Trainer {
    pub config: TrainConfig,
    pub models: ModelSet<f32>,
    pub opt_g: OptimizerState<f32>,
    pub opt_d: OptimizerState<f32>,
    pub step: usize,
    sampler: ChaCha8Rng,
    order_s: EpochOrder,
    order_r: EpochOrder,
}

impl Trainer {
    pub fn new(config: TrainConfig, synth_len: usize, real_len: usize) -> Result<Self> {
        config.validate()?;
        if synth_len == 0 || real_len == 0 {
            return Err(DclError::Config("dataset is empty".into()));
        }
        let models = build_models::<f32>(&config.model, derive_seed(config.seed, &[tag("models")]))?;
        let shapes = |groups: Vec<&crate::nn::ParamSet<f32>>| -> Vec<Vec<usize>> {
            groups
                .into_iter()
                .flat_map(|p| p.tensors().iter().map(|t| t.shape().to_vec()))
                .collect()
        };
        let g_shapes = shapes(models.generator_groups());
        let d_shapes = shapes(vec![&models.discriminator]);
        let opt = |s: &Vec<Vec<usize>>| {
            OptimizerState::new(s.iter().map(|x| x.as_slice()), config.lr, config.beta1, config.beta2)
        };
        Ok(Self {
            opt_g: opt(&g_shapes),
            opt_d: opt(&d_shapes),
            models,
            step: 0,
            sampler: rng(derive_seed(config.seed, &[tag("pairs")])),
            order_s: EpochOrder::new(synth_len, derive_seed(config.seed, &[tag("order-synth")])),
            order_r: EpochOrder::new(real_len, derive_seed(config.seed, &[tag("order-real")])),
            config,
        })
    }

    fn learning_rate(&self) -> f64 {
        let c = &self.config;
        if !c.lr_decay || c.steps == 0 {
            return c.lr;
        }
        let frac = self.step as f64 / c.steps as f64;
        c.lr * (2.0 * (1.0 - frac)).clamp(0.0, 1.0)
    }

    pub fn step_once(&mut self, synth: &DomainData, real: &DomainData) -> Result<LossBreakdown> {
        let lr = self.learning_rate();
        self.opt_g.lr = lr;
        self.opt_d.lr = lr;
        let rgb = self.config.model.use_rgb;
        let bs = synth.batch(&self.order_s.next_batch(self.config.batch_size), rgb);
        let br = real.batch(&self.order_r.next_batch(self.config.batch_size), rgb);
        let out = train_step(
            &mut self.models,
            &mut self.opt_g,
            &mut self.opt_d,
            &bs,
            &br,
            &self.config,
            &mut self.sampler,
        )?;
        self.step += 1;
        Ok(out)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let meta = TrainerMeta {
            kind: "dcl".into(),
            config: self.config.clone(),
            step: self.step,
            opt_g: opt_meta(&self.opt_g),
            opt_d: opt_meta(&self.opt_d),
            sampler: self.sampler.clone(),
            order_s: self.order_s.clone(),
            order_r: self.order_r.clone(),
        };
        let mut tensors = self.models.to_tensors();
        push_optimizer(&mut tensors, "opt_g", &self.opt_g);
        push_optimizer(&mut tensors, "opt_d", &self.opt_d);
        let meta = serde_json::to_value(&meta).map_err(|e| DclError::json(path, e))?;
        write_checkpoint(path, &CheckpointFile { meta, tensors })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let ck = read_checkpoint(path)?;
        let meta: TrainerMeta = serde_json::from_value(ck.meta.clone()).map_err(|e| DclError::json(path, e))?;
        if meta.kind != "dcl" {
            return Err(DclError::format(path, format!("checkpoint kind {:?}, expected \"dcl\"", meta.kind)));
        }
        let mut t = Self::new(meta.config.clone(), 1, 1)?;
        t.models = ModelSet::from_checkpoint(&meta.config.model, &ck, path)?;
        let map = ck.tensor_map();
        fill_optimizer(&mut t.opt_g, "opt_g", &map, path)?;
        fill_optimizer(&mut t.opt_d, "opt_d", &map, path)?;
        for (st, m) in [(&mut t.opt_g, &meta.opt_g), (&mut t.opt_d, &meta.opt_d)] {
            st.lr = m.lr;
            st.beta1 = m.beta1;
            st.beta2 = m.beta2;
            st.eps = m.eps;
            st.step = m.step;
        }
        t.step = meta.step;
        t.sampler = meta.sampler;
        t.order_s = meta.order_s;
        t.order_r = meta.order_r;
        Ok(t)
    }
}

/// Models and configuration of any training checkpoint, without its
/// optimizer state.
pub fn load_synthesis_model(path: &Path) -> Result<(ModelSet<f32>, TrainConfig)> {
    let t = Trainer::load(path)?;
    Ok((t.models, t.config))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct LogLine {
    step: usize,
    #[serde(flatten)]
    losses: LossBreakdown,
}

pub struct TrainOutcome {
    pub checkpoint: PathBuf,
    pub log: Vec<LossBreakdown>,
}

/// Train on two unpaired manifests, appending one JSON line per step to
/// `out_dir/train_log.jsonl` and writing periodic and final checkpoints.
/// A checkpoint in `resume` continues a run where it stopped; only the step
/// budget may differ from the original configuration.
pub fn train(
    synth: &Manifest,
    real: &Manifest,
    cfg: &TrainConfig,
    out_dir: &Path,
    resume: Option<&Path>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if synth.domain != Domain::Synth || real.domain != Domain::Real {
        return Err(DclError::Config(format!(
            "expected a synth and a real manifest, got {} and {}",
            synth.domain, real.domain
        )));
    }
    let synth_keys: std::collections::HashSet<u64> = synth.keys().into_iter().collect();
    if real.keys().iter().any(|k| synth_keys.contains(k)) {
        return Err(DclError::Config("synth and real manifests share samples".into()));
    }
    let res = cfg.model.resolution;
    let sd = DomainData::from_manifest(synth, res)?;
    let rd = DomainData::from_manifest(real, res)?;
    fs::create_dir_all(out_dir).map_err(|e| DclError::io(out_dir, e))?;

    let mut trainer = match resume {
        Some(p) => {
            let mut t = Trainer::load(p)?;
            if (TrainConfig { steps: cfg.steps, ..t.config.clone() }) != *cfg {
                return Err(DclError::Config("resume checkpoint was trained with a different config".into()));
            }
            t.config.steps = cfg.steps;
            t
        }
        None => Trainer::new(cfg.clone(), sd.len(), rd.len())?,
    };

    let log_path = out_dir.join(LOG_FILE);
    let file = if resume.is_some() {
        fs::OpenOptions::new().append(true).create(true).open(&log_path)
    } else {
        File::create(&log_path)
    }
    .map_err(|e| DclError::io(&log_path, e))?;
    let mut log_file = BufWriter::new(file);
    let mut log = Vec::new();
    let mut last_good: Option<PathBuf> = resume.map(Path::to_path_buf);

    while trainer.step < cfg.steps {
        let losses = match trainer.step_once(&sd, &rd) {
            Ok(l) => l,
            Err(DclError::Numeric(msg)) => {
                let _ = log_file.flush();
                let hint = match &last_good {
                    Some(p) => format!("last good checkpoint: {}", p.display()),
                    None => "no checkpoint written yet".into(),
                };
                return Err(DclError::Numeric(format!("step {}: {msg}; {hint}", trainer.step + 1)));
            }
            Err(e) => return Err(e),
        };
        let line = serde_json::to_string(&LogLine {
            step: trainer.step,
            losses,
        })
        .map_err(|e| DclError::json(&log_path, e))?;
        writeln!(log_file, "{line}").map_err(|e| DclError::io(&log_path, e))?;
        log.push(losses);
        if cfg.checkpoint_every > 0 && trainer.step % cfg.checkpoint_every == 0 && trainer.step < cfg.steps {
            let p = out_dir.join(format!("checkpoint_{:06}.dclc", trainer.step));
            trainer.save(&p)?;
            last_good = Some(p);
        }
    }
    log_file.flush().map_err(|e| DclError::io(&log_path, e))?;
    let checkpoint = out_dir.join(FINAL_CHECKPOINT);
    trainer.save(&checkpoint)?;
    Ok(TrainOutcome { checkpoint, log })
}

/// Parse a training log back into loss records.
pub fn read_train_log(path: &Path) -> Result<Vec<(usize, LossBreakdown)>> {
    let text = fs::read_to_string(path).map_err(|e| DclError::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            let line: LogLine = serde_json::from_str(l).map_err(|e| DclError::json(path, e))?;
            Ok((line.step, line.losses))
        })
        .collect()
}

/// Run the generator over every sample of a clean manifest. Outputs at or
/// below the hole threshold become missing; labels are copied unchanged.
pub fn synthesize_dataset(checkpoint: &Path, clean: &Manifest, out_dir: &Path) -> Result<Manifest> {
    let (models, cfg) = load_synthesis_model(checkpoint)?;
    synthesize_with(&models, &cfg.model, clean, out_dir)
}

pub fn synthesize_with(models: &ModelSet<f32>, cfg: &ModelConfig, clean: &Manifest, out_dir: &Path) -> Result<Manifest> {
    if clean.domain != Domain::Synth {
        return Err(DclError::Config("synthesis expects a synth-domain manifest".into()));
    }
    if clean.width != cfg.resolution || clean.height != cfg.resolution {
        return Err(DclError::Config(format!(
            "manifest resolution {}x{} does not match the checkpoint's {}",
            clean.width, clean.height, cfg.resolution
        )));
    }
    fs::create_dir_all(out_dir).map_err(|e| DclError::io(out_dir, e))?;
    let samples = load_samples(clean)?;
    let data = DomainData::from_samples(&samples, cfg.resolution)?;
    let r = cfg.resolution;
    let mut entries = Vec::with_capacity(samples.len());
    for (i, (entry, sample)) in clean.entries.iter().zip(&samples).enumerate() {
        let batch = data.batch(&[i], cfg.use_rgb);
        let (out, _) = models.forward_synthesis(&batch.depth, batch.rgb.as_ref())?;
        if !out.all_finite() {
            return Err(DclError::Numeric(format!("entry {i}: non-finite synthesized depth")));
        }
        let depth = DepthMap::from_normalized(r, r, out.data(), sample.clean_depth.d_max(), HOLE_THRESHOLD)?;
        let names = [
            format!("{i:05}_depth.pgm"),
            format!("{i:05}_rgb.ppm"),
            format!("{i:05}_normals.nrm"),
            format!("{i:05}_clean.pgm"),
        ];
        write_depth(&out_dir.join(&names[0]), &depth, &entry.intrinsics, clean.domain, entry.key)?;
        copy_labels(clean, entry, out_dir, &names[1], &names[2], &names[3])?;
        let [depth, rgb, normals, clean_depth] = names;
        entries.push(ManifestEntry {
            depth,
            rgb,
            normals,
            clean_depth,
            intrinsics: entry.intrinsics,
            key: entry.key,
        });
    }
    let manifest = Manifest {
        source: "synthesized".into(),
        noise_model: None,
        entries,
        root: out_dir.to_path_buf(),
        ..clean.clone()
    };
    write_manifest(&manifest, out_dir)?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::{apply_sensor_noise, generate_scene, render, DomainConfig, NoiseModel};

    fn samples(domain: Domain, n: usize, res: usize, seed: u64) -> Vec<Sample> {
        let cfg = DomainConfig::for_domain(domain, res, res);
        (0..n as u64)
            .map(|i| {
                let scene = generate_scene(&cfg, derive_seed(seed, &[i])).unwrap();
                let s = render(&scene, &cfg.intrinsics(), res, res, cfg.d_max).unwrap();
                match domain {
                    Domain::Synth => s,
                    Domain::Real => apply_sensor_noise(&s, &NoiseModel::default(), i).unwrap(),
                }
            })
            .collect()
    }

    fn tiny() -> (TrainConfig, DomainData, DomainData) {
        let mut model = ModelConfig::new(16, 4, 2);
        model.projection_dim = 8;
        model.discriminator_depth = 2;
        let cfg = TrainConfig {
            model,
            batch_size: 2,
            steps: 3,
            sampling: PairSampling {
                anchors: 4,
                partners: 3,
                local_radius: 2,
            },
            checkpoint_every: 0,
            ..TrainConfig::default()
        };
        let s = DomainData::from_samples(&samples(Domain::Synth, 4, 16, 1), 16).unwrap();
        let r = DomainData::from_samples(&samples(Domain::Real, 4, 16, 2), 16).unwrap();
        (cfg, s, r)
    }

    #[test]
    fn generator_step_leaves_discriminator_alone_without_adversary() {
        let (mut cfg, s, r) = tiny();
        cfg.enable_adv = false;
        let mut t = Trainer::new(cfg, s.len(), r.len()).unwrap();
        let before = t.models.clone();
        t.step_once(&s, &r).unwrap();
        assert_eq!(t.models.discriminator, before.discriminator);
        assert_ne!(t.models.encoder, before.encoder);
        assert_ne!(t.models.decoder, before.decoder);
        assert_eq!(t.opt_d.step, 0);
    }

    #[test]
    fn heads_only_move_under_contrastive_term() {
        let (mut cfg, s, r) = tiny();
        cfg.enable_dc = false;
        let mut t = Trainer::new(cfg.clone(), s.len(), r.len()).unwrap();
        let before = t.models.clone();
        t.step_once(&s, &r).unwrap();
        assert_eq!(t.models.heads, before.heads);
        assert_ne!(t.models.discriminator, before.discriminator);

        cfg.enable_dc = true;
        let mut t = Trainer::new(cfg, s.len(), r.len()).unwrap();
        t.step_once(&s, &r).unwrap();
        assert_ne!(t.models.heads, before.heads);
    }

    #[test]
    fn total_combines_enabled_terms() {
        let (cfg, s, r) = tiny();
        for (adv, dc, idt) in [(true, true, true), (true, false, false), (false, true, false), (false, false, true)] {
            let c = TrainConfig {
                enable_adv: adv,
                enable_dc: dc,
                enable_idt: idt,
                ..cfg.clone()
            };
            let mut t = Trainer::new(c.clone(), s.len(), r.len()).unwrap();
            let l = t.step_once(&s, &r).unwrap();
            assert!(l.all_finite());
            let want = l.adv_g + c.alpha * l.dc + c.beta * l.idt;
            assert!((l.total - want).abs() < 1e-12);
            assert_eq!(l.adv_g == 0.0 && l.adv_d == 0.0, !adv);
            assert_eq!(l.dc == 0.0, !dc);
            assert_eq!(l.idt == 0.0, !idt);
        }
    }

    #[test]
    fn training_is_deterministic() {
        let (cfg, s, r) = tiny();
        let run = || {
            let mut t = Trainer::new(cfg.clone(), s.len(), r.len()).unwrap();
            let log: Vec<_> = (0..2).map(|_| t.step_once(&s, &r).unwrap()).collect();
            (t, log)
        };
        let (a, la) = run();
        let (b, lb) = run();
        assert_eq!(la, lb);
        assert_eq!(a, b);
    }

    #[test]
    fn resumed_training_matches_uninterrupted() {
        let (cfg, s, r) = tiny();
        let dir = tempfile::tempdir().unwrap();
        let mut a = Trainer::new(cfg.clone(), s.len(), r.len()).unwrap();
        a.step_once(&s, &r).unwrap();
        a.save(&dir.path().join("ck.dclc")).unwrap();
        let mut b = Trainer::load(&dir.path().join("ck.dclc")).unwrap();
        assert_eq!(a, b);
        let la = a.step_once(&s, &r).unwrap();
        let lb = b.step_once(&s, &r).unwrap();
        assert_eq!(la, lb);
        assert_eq!(a, b);
    }

    #[test]
    fn identity_term_alone_decreases() {
        let (mut cfg, s, r) = tiny();
        cfg.enable_adv = false;
        cfg.enable_dc = false;
        cfg.lr = 2e-3;
        let mut t = Trainer::new(cfg, s.len(), r.len()).unwrap();
        let log: Vec<f64> = (0..30).map(|_| t.step_once(&s, &r).unwrap().idt).collect();
        let head: f64 = log[..5].iter().sum::<f64>() / 5.0;
        let tail: f64 = log[25..].iter().sum::<f64>() / 5.0;
        assert!(tail < 0.8 * head, "idt {head} -> {tail}");
    }

    #[test]
    fn epoch_order_visits_every_index() {
        let mut o = EpochOrder::new(5, 3);
        let mut seen = o.next_batch(5);
        seen.sort();
        assert_eq!(seen, vec![0, 1, 2, 3, 4]);
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let (cfg, _, _) = tiny();
        let off = TrainConfig {
            enable_adv: false,
            enable_dc: false,
            enable_idt: false,
            ..cfg.clone()
        };
        assert!(matches!(off.validate(), Err(DclError::Config(_))));
        let bad_tau = TrainConfig { tau: 0.0, ..cfg };
        assert!(matches!(bad_tau.validate(), Err(DclError::Config(_))));
    }
}
