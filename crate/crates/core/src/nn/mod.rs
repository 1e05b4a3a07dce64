//! Translation generator (encoder, decoder, optional color encoder), patch
//! discriminator and projection heads, plus the optimizer and checkpoints.

pub(crate) mod checkpoint;
mod optim;
mod params;

pub use checkpoint::{read_checkpoint, write_checkpoint, CheckpointFile, CHECKPOINT_MAGIC};
pub use optim::{adam_update, OptimizerState};
pub use params::ParamSet;
pub(crate) use params::Cursor;

use dcl_tensor::{Graph, Real, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{DclError, Result};
use crate::seed::{derive_seed, rng, tag};

pub const IN_EPS: f64 = 1e-5;
pub const NORM_EPS: f64 = 1e-8;
const LEAK: f64 = 0.2;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// Square input edge in pixels.
    pub resolution: usize,
    pub base_width: usize,
    pub residual_blocks: usize,
    /// Encoder layers whose activations feed the contrastive loss; 0 is the
    /// input raster itself.
    pub tapped_layers: Vec<usize>,
    pub projection_dim: usize,
    pub use_rgb: bool,
    /// Number of stride-2 discriminator convolutions.
    pub discriminator_depth: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::new(64, 32, 6)
    }
}

impl ModelConfig {
    /// Evenly spread taps: input, stem, both downsamplings and the end of the
    /// encoder trunk.
    pub fn new(resolution: usize, base_width: usize, residual_blocks: usize) -> Self {
        Self {
            resolution,
            base_width,
            residual_blocks,
            tapped_layers: vec![0, 1, 2, 3, 3 + residual_blocks.div_ceil(2)],
            projection_dim: 128,
            use_rgb: false,
            discriminator_depth: 3,
        }
    }

    pub fn encoder_blocks(&self) -> usize {
        self.residual_blocks.div_ceil(2)
    }

    pub fn decoder_blocks(&self) -> usize {
        self.residual_blocks / 2
    }

    /// Index of the last encoder layer.
    pub fn last_encoder_layer(&self) -> usize {
        3 + self.encoder_blocks()
    }

    /// Channels of encoder layer `index` for an input with `in_ch` channels.
    pub fn layer_channels(&self, index: usize, in_ch: usize) -> usize {
        match index {
            0 => in_ch,
            1 => self.base_width,
            2 => 2 * self.base_width,
            _ => 4 * self.base_width,
        }
    }

    /// Spatial edge of encoder layer `index`.
    pub fn layer_extent(&self, index: usize) -> usize {
        match index {
            0 | 1 => self.resolution,
            2 => self.resolution / 2,
            _ => self.resolution / 4,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(DclError::Config(format!("model config: {msg}")));
        if self.resolution < 8 || self.resolution % 4 != 0 {
            return bad(format!("resolution {} must be >= 8 and divisible by 4", self.resolution));
        }
        if self.base_width == 0 || self.projection_dim == 0 {
            return bad("base_width and projection_dim must be positive".into());
        }
        let t = &self.tapped_layers;
        if t.len() != 5 || t[0] != 0 || t.windows(2).any(|w| w[0] >= w[1]) {
            return bad(format!("tapped_layers {t:?} must be 5 strictly increasing indices starting at 0"));
        }
        if t[4] > self.last_encoder_layer() {
            return bad(format!(
                "tapped layer {} beyond the encoder (last index {})",
                t[4],
                self.last_encoder_layer()
            ));
        }
        if self.discriminator_depth == 0 || self.resolution >> self.discriminator_depth == 0 {
            return bad(format!(
                "discriminator depth {} does not fit resolution {}",
                self.discriminator_depth, self.resolution
            ));
        }
        // reflect padding by one pixel needs at least two pixels per side
        if self.residual_blocks > 0 && self.resolution / 4 < 2 {
            return bad("residual blocks need a bottleneck of at least 2x2".into());
        }
        Ok(())
    }
}

/// Parameters of every network.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelSet<T: Real> {
    pub config: ModelConfig,
    pub encoder: ParamSet<T>,
    pub decoder: ParamSet<T>,
    pub rgb_encoder: Option<ParamSet<T>>,
    pub discriminator: ParamSet<T>,
    pub heads: Vec<ParamSet<T>>,
}

fn build_encoder<T: Real>(cfg: &ModelConfig, in_ch: usize, seed: u64) -> ParamSet<T> {
    let mut r = rng(seed);
    let w = cfg.base_width;
    let mut p = ParamSet::default();
    p.push_normal("stem.weight", &[w, in_ch, 7, 7], &mut r);
    p.push_zeros("stem.bias", &[w]);
    p.push_normal("down1.weight", &[2 * w, w, 3, 3], &mut r);
    p.push_normal("down2.weight", &[4 * w, 2 * w, 3, 3], &mut r);
    for b in 0..cfg.encoder_blocks() {
        p.push_normal(format!("block{b}.conv1.weight"), &[4 * w, 4 * w, 3, 3], &mut r);
        p.push_normal(format!("block{b}.conv2.weight"), &[4 * w, 4 * w, 3, 3], &mut r);
    }
    p
}

fn build_decoder<T: Real>(cfg: &ModelConfig, seed: u64) -> ParamSet<T> {
    let mut r = rng(seed);
    let w = cfg.base_width;
    let mut p = ParamSet::default();
    if cfg.use_rgb {
        p.push_normal("fuse.weight", &[4 * w, 8 * w, 1, 1], &mut r);
        p.push_zeros("fuse.bias", &[4 * w]);
    }
    for b in 0..cfg.decoder_blocks() {
        p.push_normal(format!("block{b}.conv1.weight"), &[4 * w, 4 * w, 3, 3], &mut r);
        p.push_normal(format!("block{b}.conv2.weight"), &[4 * w, 4 * w, 3, 3], &mut r);
    }
    p.push_normal("up1.weight", &[4 * w, 2 * w, 3, 3], &mut r);
    p.push_normal("up2.weight", &[2 * w, w, 3, 3], &mut r);
    p.push_normal("out.weight", &[1, w, 7, 7], &mut r);
    p.push_zeros("out.bias", &[1]);
    p
}

fn disc_width(cfg: &ModelConfig, layer: usize) -> usize {
    cfg.base_width << layer.min(3)
}

fn build_discriminator<T: Real>(cfg: &ModelConfig, seed: u64) -> ParamSet<T> {
    let mut r = rng(seed);
    let mut p = ParamSet::default();
    let mut in_ch = 1;
    let last = cfg.discriminator_depth - 1;
    for l in 0..cfg.discriminator_depth {
        let out = disc_width(cfg, l);
        p.push_normal(format!("conv{l}.weight"), &[out, in_ch, 4, 4], &mut r);
        if l == 0 || l == last {
            p.push_zeros(format!("conv{l}.bias"), &[out]);
        }
        in_ch = out;
    }
    p.push_normal("out.weight", &[1, in_ch, 1, 1], &mut r);
    p.push_zeros("out.bias", &[1]);
    p
}

fn build_head<T: Real>(in_ch: usize, dim: usize, seed: u64) -> ParamSet<T> {
    let mut r = rng(seed);
    let mut p = ParamSet::default();
    p.push_normal("fc1.weight", &[dim, in_ch], &mut r);
    p.push_zeros("fc1.bias", &[dim]);
    p.push_normal("fc2.weight", &[dim, dim], &mut r);
    p.push_zeros("fc2.bias", &[dim]);
    p
}

/// Deterministic initialization; every network draws from its own stream.
pub fn build_models<T: Real>(cfg: &ModelConfig, seed: u64) -> Result<ModelSet<T>> {
    cfg.validate()?;
    let s = |name: &str| derive_seed(seed, &[tag(name)]);
    let heads = cfg
        .tapped_layers
        .iter()
        .enumerate()
        .map(|(i, &l)| build_head(cfg.layer_channels(l, 1), cfg.projection_dim, derive_seed(s("head"), &[i as u64])))
        .collect();
    Ok(ModelSet {
        config: cfg.clone(),
        encoder: build_encoder(cfg, 1, s("encoder")),
        decoder: build_decoder(cfg, s("decoder")),
        rgb_encoder: cfg.use_rgb.then(|| build_encoder(cfg, 3, s("rgb_encoder"))),
        discriminator: build_discriminator(cfg, s("discriminator")),
        heads,
    })
}

impl<T: Real> ModelSet<T> {
    /// Generator-side parameter groups in optimizer order: encoder, decoder,
    /// color encoder, heads.
    pub fn generator_groups(&self) -> Vec<&ParamSet<T>> {
        let mut g = vec![&self.encoder, &self.decoder];
        g.extend(self.rgb_encoder.as_ref());
        g.extend(self.heads.iter());
        g
    }

    pub fn generator_groups_mut(&mut self) -> Vec<&mut ParamSet<T>> {
        let mut g = vec![&mut self.encoder, &mut self.decoder];
        g.extend(self.rgb_encoder.as_mut());
        g.extend(self.heads.iter_mut());
        g
    }

    /// Every group under a stable prefix, for checkpoints.
    pub fn named_groups(&self) -> Vec<(String, &ParamSet<T>)> {
        let mut g = vec![("encoder".to_string(), &self.encoder), ("decoder".to_string(), &self.decoder)];
        if let Some(r) = &self.rgb_encoder {
            g.push(("rgb_encoder".into(), r));
        }
        g.push(("discriminator".into(), &self.discriminator));
        for (i, h) in self.heads.iter().enumerate() {
            g.push((format!("head{i}"), h));
        }
        g
    }

    pub fn all_finite(&self) -> bool {
        self.named_groups().iter().all(|(_, p)| p.all_finite())
    }

    pub fn cast<U: Real>(&self) -> ModelSet<U> {
        ModelSet {
            config: self.config.clone(),
            encoder: self.encoder.cast(),
            decoder: self.decoder.cast(),
            rgb_encoder: self.rgb_encoder.as_ref().map(ParamSet::cast),
            discriminator: self.discriminator.cast(),
            heads: self.heads.iter().map(ParamSet::cast).collect(),
        }
    }

    pub fn bind<'g>(&self, g: &'g Graph<T>, generator: bool, discriminator: bool) -> Bound<'g, T> {
        Bound {
            config: self.config.clone(),
            encoder: self.encoder.bind(g, generator),
            decoder: self.decoder.bind(g, generator),
            rgb_encoder: self.rgb_encoder.as_ref().map(|p| p.bind(g, generator)),
            discriminator: self.discriminator.bind(g, discriminator),
            heads: self.heads.iter().map(|h| h.bind(g, generator)).collect(),
        }
    }

    /// Inference without gradients: synthesized raster and tapped features.
    pub fn forward_synthesis(&self, d: &Tensor<T>, rgb: Option<&Tensor<T>>) -> Result<(Tensor<T>, Vec<Tensor<T>>)> {
        let g = Graph::new();
        let b = self.bind(&g, false, false);
        let rgb = rgb.map(|t| g.constant(t.clone()));
        let (out, feats) = b.synthesize(g.constant(d.clone()), rgb)?;
        let feats = feats.iter().map(|f| (*f.value()).clone()).collect();
        Ok(((*out.value()).clone(), feats))
    }

    /// Patch logits of the discriminator.
    pub fn discriminate(&self, x: &Tensor<T>) -> Tensor<T> {
        let g = Graph::new();
        let b = self.bind(&g, false, false);
        (*b.discriminate(g.constant(x.clone())).value()).clone()
    }
}

/// A [`ModelSet`] placed on a graph.
pub struct Bound<'g, T: Real> {
    pub config: ModelConfig,
    pub encoder: Vec<Var<'g, T>>,
    pub decoder: Vec<Var<'g, T>>,
    pub rgb_encoder: Option<Vec<Var<'g, T>>>,
    pub discriminator: Vec<Var<'g, T>>,
    pub heads: Vec<Vec<Var<'g, T>>>,
}

fn residual<'g, T: Real>(x: Var<'g, T>, p: &mut Cursor<'_, 'g, T>) -> Var<'g, T> {
    let eps = T::lit(IN_EPS);
    let h = x
        .reflect_pad(1)
        .conv2d(p.next(), None, 1, 0)
        .instance_norm(eps)
        .relu()
        .reflect_pad(1)
        .conv2d(p.next(), None, 1, 0)
        .instance_norm(eps);
    x.add(h)
}

/// Every encoder activation, index 0 being the input.
fn encode_all<'g, T: Real>(cfg: &ModelConfig, params: &[Var<'g, T>], x: Var<'g, T>) -> Vec<Var<'g, T>> {
    let eps = T::lit(IN_EPS);
    let mut p = Cursor::new(params);
    let mut layers = vec![x];
    let mut h = x.reflect_pad(3).conv2d(p.next(), Some(p.next()), 1, 0).relu();
    layers.push(h);
    for _ in 0..2 {
        h = h.conv2d(p.next(), None, 2, 1).instance_norm(eps).relu();
        layers.push(h);
    }
    for _ in 0..cfg.encoder_blocks() {
        h = residual(h, &mut p);
        layers.push(h);
    }
    p.finish();
    layers
}

impl<'g, T: Real> Bound<'g, T> {
    /// Activations of the tapped encoder layers for input `x`.
    pub fn features(&self, x: Var<'g, T>) -> Vec<Var<'g, T>> {
        let all = encode_all(&self.config, &self.encoder, x);
        self.config.tapped_layers.iter().map(|&i| all[i]).collect()
    }

    /// Generator forward pass: output raster in [-1, 1] and the tapped
    /// features of the depth encoder.
    pub fn synthesize(&self, d: Var<'g, T>, rgb: Option<Var<'g, T>>) -> Result<(Var<'g, T>, Vec<Var<'g, T>>)> {
        let cfg = &self.config;
        if rgb.is_some() != cfg.use_rgb {
            return Err(DclError::Usage(format!(
                "color input {} but the model was built with use_rgb = {}",
                if rgb.is_some() { "given" } else { "missing" },
                cfg.use_rgb
            )));
        }
        let shape = d.shape();
        if shape.len() != 4 || shape[1] != 1 || shape[2] != cfg.resolution || shape[3] != cfg.resolution {
            return Err(DclError::Usage(format!(
                "depth input of shape {shape:?}, expected [N, 1, {r}, {r}]",
                r = cfg.resolution
            )));
        }
        let all = encode_all(cfg, &self.encoder, d);
        let tapped = cfg.tapped_layers.iter().map(|&i| all[i]).collect();
        let mut p = Cursor::new(&self.decoder);
        let mut h = *all.last().unwrap();
        if let (Some(rgb), Some(theta)) = (rgb, &self.rgb_encoder) {
            let c = *encode_all(cfg, theta, rgb).last().unwrap();
            h = Var::concat_channels(&[h, c]).conv2d(p.next(), Some(p.next()), 1, 0);
        }
        for _ in 0..cfg.decoder_blocks() {
            h = residual(h, &mut p);
        }
        let eps = T::lit(IN_EPS);
        for _ in 0..2 {
            h = h.conv_transpose2d(p.next(), None, 2, 1, 1).instance_norm(eps).relu();
        }
        let out = h.reflect_pad(3).conv2d(p.next(), Some(p.next()), 1, 0).tanh();
        p.finish();
        Ok((out, tapped))
    }

    pub fn discriminate(&self, x: Var<'g, T>) -> Var<'g, T> {
        let depth = self.config.discriminator_depth;
        let mut p = Cursor::new(&self.discriminator);
        let mut h = x;
        for l in 0..depth {
            let w = p.next();
            h = if l == 0 || l == depth - 1 {
                h.conv2d(w, Some(p.next()), 2, 1)
            } else {
                h.conv2d(w, None, 2, 1).instance_norm(T::lit(IN_EPS))
            };
            h = h.leaky_relu(T::lit(LEAK));
        }
        let out = h.conv2d(p.next(), Some(p.next()), 1, 0);
        p.finish();
        out
    }

    /// Two-layer projection with explicit normalization at flat pixel
    /// indices `b * H * W + y * W + x` of tapped layer `layer`.
    pub fn project(&self, layer: usize, features: Var<'g, T>, index: &[usize]) -> Var<'g, T> {
        let h = &self.heads[layer];
        features
            .gather_pixels(index)
            .linear(h[0], Some(h[1]))
            .relu()
            .linear(h[2], Some(h[3]))
            .l2_normalize_rows(T::lit(NORM_EPS))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tapped_shapes_follow_stride_arithmetic() {
        let cfg = ModelConfig::new(64, 32, 6);
        let m = build_models::<f32>(&cfg, 0).unwrap();
        let d = Tensor::zeros(&[1, 1, 64, 64]);
        let (out, feats) = m.forward_synthesis(&d, None).unwrap();
        assert_eq!(out.shape(), &[1, 1, 64, 64]);
        let shapes: Vec<_> = feats.iter().map(|f| f.shape().to_vec()).collect();
        assert_eq!(
            shapes,
            vec![
                vec![1, 1, 64, 64],
                vec![1, 32, 64, 64],
                vec![1, 64, 32, 32],
                vec![1, 128, 16, 16],
                vec![1, 128, 16, 16],
            ]
        );
        assert_eq!(m.discriminate(&d).shape(), &[1, 1, 8, 8]);
    }

    #[test]
    fn initialization_is_deterministic() {
        let cfg = ModelConfig::new(16, 4, 2);
        let a = build_models::<f32>(&cfg, 3).unwrap();
        assert_eq!(a, build_models::<f32>(&cfg, 3).unwrap());
        assert_ne!(a, build_models::<f32>(&cfg, 4).unwrap());
    }

    #[test]
    fn output_is_bounded_and_shape_preserving() {
        let mut cfg = ModelConfig::new(16, 4, 2);
        cfg.use_rgb = true;
        let mut m = build_models::<f32>(&cfg, 1).unwrap();
        // saturate the output layer
        for t in m.decoder.tensors_mut() {
            *t = t.map(|x| x * 500.0);
        }
        let d = Tensor::from_fn(&[2, 1, 16, 16], |i| ((i % 7) as f32 / 3.0) - 1.0);
        let rgb = Tensor::from_fn(&[2, 3, 16, 16], |i| (i % 5) as f32 / 4.0);
        let (out, _) = m.forward_synthesis(&d, Some(&rgb)).unwrap();
        assert_eq!(out.shape(), d.shape());
        assert!(out.data().iter().all(|x| (-1.0..=1.0).contains(x)));
        assert!(matches!(m.forward_synthesis(&d, None), Err(DclError::Usage(_))));
    }

    #[test]
    fn config_invariants() {
        let mut cfg = ModelConfig::new(64, 8, 6);
        assert!(cfg.validate().is_ok());
        cfg.tapped_layers = vec![0, 1, 2, 3];
        assert!(cfg.validate().is_err());
        cfg.tapped_layers = vec![1, 2, 3, 4, 5];
        assert!(cfg.validate().is_err());
        cfg.tapped_layers = vec![0, 1, 1, 3, 6];
        assert!(cfg.validate().is_err());
        cfg.tapped_layers = vec![0, 1, 2, 3, 7];
        assert!(cfg.validate().is_err());
        assert!(ModelConfig::new(62, 8, 6).validate().is_err());
    }

    #[test]
    fn projections_are_unit_length() {
        let cfg = ModelConfig::new(16, 4, 2);
        let m = build_models::<f64>(&cfg, 2).unwrap();
        let g = Graph::new();
        let b = m.bind(&g, false, false);
        let d = g.constant(Tensor::from_fn(&[1, 1, 16, 16], |i| (i as f64 * 0.37 + 0.1).sin()));
        let feats = b.features(d);
        for (l, f) in feats.iter().enumerate() {
            let p = b.project(l, *f, &[0, 3, 3]).value();
            let dim = cfg.projection_dim;
            for r in 0..3 {
                let n: f64 = p.data()[r * dim..(r + 1) * dim].iter().map(|x| x * x).sum::<f64>().sqrt();
                assert!((n - 1.0).abs() < 1e-5);
            }
            assert_eq!(p.data()[dim..2 * dim], p.data()[2 * dim..3 * dim]);
        }
        // a zero input location stays finite under the guard
        let z = g.constant(Tensor::zeros(&[1, 1, 16, 16]));
        let p = b.project(0, z, &[5]).value();
        let n: f64 = p.data().iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!(p.all_finite() && n <= 1.0);
    }
}
