//! Training objectives: location-pair sampling, feature differentials,
//! InfoNCE, the differential contrastive loss, the adversarial pair, the
//! identity penalty and their weighted total.
//!
//! Scalar `f64` versions operate on explicit vectors and serve as reference
//! semantics; the tape versions are what training differentiates.

use std::collections::HashMap;

use dcl_tensor::{Real, Var};
use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{DclError, Result};
use crate::nn::{Bound, NORM_EPS};

/// Projected, unit-normalized feature vectors of one tapped layer, row-major
/// over locations `y * width + x`.
#[derive(Clone, Debug, PartialEq)]
pub struct ProjectedFeatures {
    pub layer: usize,
    pub height: usize,
    pub width: usize,
    pub vectors: Vec<Vec<f64>>,
}

impl ProjectedFeatures {
    /// Add `c` to every vector. Used to probe shift invariance.
    pub fn shifted(&self, c: &[f64]) -> Self {
        Self {
            vectors: self
                .vectors
                .iter()
                .map(|v| v.iter().zip(c).map(|(a, b)| a + b).collect())
                .collect(),
            ..self.clone()
        }
    }
}

/// Anchor `i`, positive partner `j` and negative partners `k` on one layer of
/// one batch image.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LocationPairSample {
    pub layer: usize,
    pub image: usize,
    pub anchor: usize,
    pub positive: usize,
    pub negatives: Vec<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub adv_d: f64,
    pub adv_g: f64,
    pub dc: f64,
    pub idt: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn all_finite(&self) -> bool {
        [self.adv_d, self.adv_g, self.dc, self.idt, self.total]
            .iter()
            .all(|x| x.is_finite())
    }
}

/// Pair-sampling budget per layer and image.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairSampling {
    pub anchors: usize,
    pub partners: usize,
    pub local_radius: usize,
}

impl Default for PairSampling {
    fn default() -> Self {
        Self {
            anchors: 64,
            partners: 16,
            local_radius: 8,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GanObjective {
    /// Cross-entropy on sigmoid patch probabilities, non-saturating generator.
    #[default]
    Logistic,
    LeastSquares,
}

fn normalize(mut v: Vec<f64>) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let d = n.max(NORM_EPS);
    v.iter_mut().for_each(|x| *x /= d);
    v
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Per-location projection head: affine, ReLU, affine, then division by the
/// guarded Euclidean norm. `w1` is `[dim][in]`, `w2` is `[dim][dim]`.
pub fn project(
    features: &[Vec<f64>],
    height: usize,
    width: usize,
    layer: usize,
    head: (&[Vec<f64>], &[f64], &[Vec<f64>], &[f64]),
) -> ProjectedFeatures {
    let (w1, b1, w2, b2) = head;
    let vectors = features
        .iter()
        .map(|f| {
            let h: Vec<f64> = w1.iter().zip(b1).map(|(row, b)| (dot(row, f) + b).max(0.0)).collect();
            normalize(w2.iter().zip(b2).map(|(row, b)| dot(row, &h) + b).collect())
        })
        .collect();
    ProjectedFeatures {
        layer,
        height,
        width,
        vectors,
    }
}

/// Draw distinct anchors and, per anchor, distinct partners other than the
/// anchor: half from the Chebyshev window of `local_radius`, the rest
/// uniformly over the map. The partner order is shuffled; the first one is
/// the positive.
pub fn sample_pairs<R: Rng>(
    height: usize,
    width: usize,
    budget: &PairSampling,
    layer: usize,
    image: usize,
    rng: &mut R,
) -> Result<Vec<LocationPairSample>> {
    let PairSampling {
        anchors,
        partners,
        local_radius,
    } = *budget;
    let n = height * width;
    if partners == 0 || n < partners + 1 {
        return Err(DclError::Sampling(format!(
            "{height}x{width} map cannot supply {partners} partners per anchor"
        )));
    }
    let anchors = anchors.min(n);
    let mut out = Vec::with_capacity(anchors);
    for a in index::sample(rng, n, anchors) {
        let (ay, ax) = (a / width, a % width);
        let mut chosen: Vec<usize> = Vec::with_capacity(partners);
        let window: Vec<usize> = (ay.saturating_sub(local_radius)..=(ay + local_radius).min(height - 1))
            .flat_map(|y| (ax.saturating_sub(local_radius)..=(ax + local_radius).min(width - 1)).map(move |x| y * width + x))
            .filter(|&p| p != a)
            .collect();
        let local = (partners / 2).min(window.len());
        for i in index::sample(rng, window.len(), local) {
            chosen.push(window[i]);
        }
        while chosen.len() < partners {
            let p = rng.random_range(0..n);
            if p != a && !chosen.contains(&p) {
                chosen.push(p);
            }
        }
        // Fisher-Yates so the positive is local or global with the mixture odds
        for i in (1..chosen.len()).rev() {
            let j = rng.random_range(0..=i);
            chosen.swap(i, j);
        }
        out.push(LocationPairSample {
            layer,
            image,
            anchor: a,
            positive: chosen[0],
            negatives: chosen[1..].to_vec(),
        });
    }
    Ok(out)
}

/// Normalized difference `f_i - f_j`; the zero vector when `i == j`.
pub fn differential(pf: &ProjectedFeatures, i: usize, j: usize) -> Vec<f64> {
    normalize(pf.vectors[i].iter().zip(&pf.vectors[j]).map(|(a, b)| a - b).collect())
}

/// `-log softmax` of the positive score among positive and negatives, all
/// scaled by `1 / tau`.
pub fn infonce(q: &[f64], pos: &[f64], negs: &[Vec<f64>], tau: f64) -> f64 {
    let scores: Vec<f64> = std::iter::once(dot(q, pos) / tau)
        .chain(negs.iter().map(|k| dot(q, k) / tau))
        .collect();
    let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + scores.iter().map(|s| (s - m).exp()).sum::<f64>().ln();
    (lse - scores[0]).max(0.0)
}

/// Reference differential contrastive loss for a single image: query from the
/// synthesized path, positive and negatives from the synthetic path, averaged
/// over samples.
pub fn loss_dc_reference(
    synthetic: &[ProjectedFeatures],
    synthesized: &[ProjectedFeatures],
    samples: &[LocationPairSample],
    tau: f64,
) -> f64 {
    if samples.is_empty() {
        return 0.0;
    }
    let total: f64 = samples
        .iter()
        .map(|s| {
            let (f, fh) = (&synthetic[s.layer], &synthesized[s.layer]);
            let q = differential(fh, s.anchor, s.positive);
            let pos = differential(f, s.anchor, s.positive);
            let negs: Vec<Vec<f64>> = s.negatives.iter().map(|&k| differential(f, s.anchor, k)).collect();
            infonce(&q, &pos, &negs, tau)
        })
        .sum();
    total / samples.len() as f64
}

/// Sample every tapped layer of every batch image.
pub fn sample_all_layers<R: Rng>(
    extents: &[(usize, usize)],
    batch: usize,
    budget: &PairSampling,
    rng: &mut R,
) -> Result<Vec<LocationPairSample>> {
    let mut out = Vec::new();
    for (l, &(h, w)) in extents.iter().enumerate() {
        for b in 0..batch {
            out.extend(sample_pairs(h, w, budget, l, b, rng)?);
        }
    }
    Ok(out)
}

/// Differentiable differential contrastive loss. `synthetic` and
/// `synthesized` are the tapped feature maps `[N, C_l, H_l, W_l]` of the two
/// paths; both are projected by the same heads. Every sample must carry the
/// same number of partners.
pub fn loss_dc<'g, T: Real>(
    models: &Bound<'g, T>,
    synthetic: &[Var<'g, T>],
    synthesized: &[Var<'g, T>],
    samples: &[LocationPairSample],
    tau: f64,
) -> Option<Var<'g, T>> {
    let eps = T::lit(NORM_EPS);
    let mut total: Option<Var<'g, T>> = None;
    for layer in 0..synthetic.len() {
        let layer_samples: Vec<_> = samples.iter().filter(|s| s.layer == layer).collect();
        let Some(first) = layer_samples.first() else { continue };
        let partners = 1 + first.negatives.len();
        let shape = synthetic[layer].shape();
        let hw = shape[2] * shape[3];

        // project only the unique locations the samples touch
        let mut slot: HashMap<usize, usize> = HashMap::new();
        let mut pixels = Vec::new();
        let mut row = |p: usize| {
            *slot.entry(p).or_insert_with(|| {
                pixels.push(p);
                pixels.len() - 1
            })
        };
        let mut q_a = Vec::new();
        let mut q_b = Vec::new();
        let mut k_a = Vec::new();
        let mut k_b = Vec::new();
        for s in &layer_samples {
            assert_eq!(1 + s.negatives.len(), partners, "ragged partner counts");
            let base = s.image * hw;
            let a = row(base + s.anchor);
            let j = row(base + s.positive);
            q_a.push(a);
            q_b.push(j);
            k_a.push(a);
            k_b.push(j);
            for &k in &s.negatives {
                k_a.push(a);
                k_b.push(row(base + k));
            }
        }
        let p_syn = models.project(layer, synthetic[layer], &pixels);
        let p_hat = models.project(layer, synthesized[layer], &pixels);
        let queries = p_hat.gather_rows(&q_a).sub(p_hat.gather_rows(&q_b)).l2_normalize_rows(eps);
        let keys = p_syn.gather_rows(&k_a).sub(p_syn.gather_rows(&k_b)).l2_normalize_rows(eps);
        let ce = queries.row_dots(keys, partners).cross_entropy_first(T::lit(1.0 / tau)).sum();
        total = Some(match total {
            Some(t) => t.add(ce),
            None => ce,
        });
    }
    total.map(|t| t.scale(T::lit(1.0 / samples.len() as f64)))
}

/// Discriminator loss on real logits and logits of the detached fake batch.
pub fn adv_discriminator<'g, T: Real>(real: Var<'g, T>, fake: Var<'g, T>, objective: GanObjective) -> Var<'g, T> {
    match objective {
        // -log sigmoid(x) = softplus(-x), -log(1 - sigmoid(x)) = softplus(x)
        GanObjective::Logistic => real.neg().softplus().mean().add(fake.softplus().mean()),
        GanObjective::LeastSquares => real
            .add_scalar(T::lit(-1.0))
            .square()
            .mean()
            .add(fake.square().mean())
            .scale(T::lit(0.5)),
    }
}

/// Non-saturating generator loss on the logits of the fake batch.
pub fn adv_generator<'g, T: Real>(fake: Var<'g, T>, objective: GanObjective) -> Var<'g, T> {
    match objective {
        GanObjective::Logistic => fake.neg().softplus().mean(),
        GanObjective::LeastSquares => fake.add_scalar(T::lit(-1.0)).square().mean(),
    }
}

/// `(adv_d, adv_g)`; `fake_for_d` must be the logits of the detached fake
/// batch, `fake_for_g` the logits through which the generator is trained.
pub fn loss_adv<'g, T: Real>(
    real_logits: Var<'g, T>,
    fake_for_d: Var<'g, T>,
    fake_for_g: Var<'g, T>,
    objective: GanObjective,
) -> (Var<'g, T>, Var<'g, T>) {
    (
        adv_discriminator(real_logits, fake_for_d, objective),
        adv_generator(fake_for_g, objective),
    )
}

/// Reference adversarial pair from patch probabilities.
pub fn loss_adv_reference(p_real: &[f64], p_fake: &[f64]) -> (f64, f64) {
    let mean = |v: &[f64], f: &dyn Fn(f64) -> f64| v.iter().map(|&p| f(p)).sum::<f64>() / v.len() as f64;
    let d = mean(p_real, &|p| -p.ln()) + mean(p_fake, &|p| -(1.0 - p).ln());
    let g = mean(p_fake, &|p| -p.ln());
    (d, g)
}

/// Mean absolute difference in normalized units.
pub fn loss_idt<'g, T: Real>(output: Var<'g, T>, target: Var<'g, T>) -> Var<'g, T> {
    output.sub(target).abs().mean()
}

pub fn loss_total(adv_g: f64, dc: f64, idt: f64, alpha: f64, beta: f64) -> f64 {
    adv_g + alpha * dc + beta * idt
}
