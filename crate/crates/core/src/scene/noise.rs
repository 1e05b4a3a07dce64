use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::Sample;
use crate::depth::DepthMap;
use crate::error::{DclError, Result};
use crate::seed;

/// Largest incidence angle used by the axial term; the a2 term diverges at
/// grazing incidence.
const AXIAL_THETA_CAP: f64 = 85.0 * std::f64::consts::PI / 180.0;

/// Kinect-style structured-light corruption.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseModel {
    /// Axial sigma coefficients: constant (m), depth-quadratic (m per m^2),
    /// incidence term (m).
    pub a0: f64,
    pub a1: f64,
    pub a2: f64,
    /// Lateral jitter std in pixels.
    pub lateral_std: f64,
    /// Quantization step is `kappa * z^2`.
    pub kappa: f64,
    /// Grazing dropout `sigmoid((theta - theta0) / slope)`, degrees. A zero
    /// slope is a hard threshold `theta > theta0`.
    pub grazing_theta0_deg: f64,
    pub grazing_slope_deg: f64,
    /// Width of the shadow band behind depth jumps, pixels.
    pub shadow_px: usize,
    /// Depth step that counts as a discontinuity, meters.
    pub edge_jump_m: f64,
    pub dark_threshold: f64,
    pub dark_drop_p: f64,
    pub specular_threshold: f64,
    pub specular_drop_p: f64,
}

impl Default for NoiseModel {
    fn default() -> Self {
        Self {
            a0: 0.0012,
            a1: 0.0019,
            a2: 0.0001,
            lateral_std: 0.8,
            kappa: 2.85e-3,
            grazing_theta0_deg: 75.0,
            grazing_slope_deg: 4.0,
            shadow_px: 2,
            edge_jump_m: 0.1,
            dark_threshold: 0.1,
            dark_drop_p: 0.7,
            specular_threshold: 0.8,
            specular_drop_p: 0.7,
        }
    }
}

impl NoiseModel {
    /// The identity corruption.
    pub fn zero() -> Self {
        Self {
            a0: 0.0,
            a1: 0.0,
            a2: 0.0,
            lateral_std: 0.0,
            kappa: 0.0,
            grazing_theta0_deg: 90.0,
            grazing_slope_deg: 0.0,
            shadow_px: 0,
            edge_jump_m: 0.1,
            dark_threshold: 0.0,
            dark_drop_p: 0.0,
            specular_threshold: 1.0,
            specular_drop_p: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let nonneg = [
            ("a0", self.a0),
            ("a1", self.a1),
            ("a2", self.a2),
            ("lateral_std", self.lateral_std),
            ("kappa", self.kappa),
            ("grazing_theta0_deg", self.grazing_theta0_deg),
            ("grazing_slope_deg", self.grazing_slope_deg),
            ("edge_jump_m", self.edge_jump_m),
            ("dark_threshold", self.dark_threshold),
            ("specular_threshold", self.specular_threshold),
        ];
        for (name, v) in nonneg {
            if !(v.is_finite() && v >= 0.0) {
                return Err(DclError::Config(format!("noise model: {name} must be finite and >= 0, got {v}")));
            }
        }
        for (name, p) in [("dark_drop_p", self.dark_drop_p), ("specular_drop_p", self.specular_drop_p)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(DclError::Config(format!("noise model: {name} must lie in [0, 1], got {p}")));
            }
        }
        Ok(())
    }
}

/// Axial standard deviation at depth `z` and incidence angle `theta`.
pub fn axial_sigma(nm: &NoiseModel, z: f64, theta: f64) -> f64 {
    let t = theta.clamp(0.0, AXIAL_THETA_CAP);
    let half_pi = std::f64::consts::FRAC_PI_2;
    nm.a0 + nm.a1 * (z - 0.4).powi(2) + nm.a2 * t * t / (half_pi - t).powi(2)
}

pub fn grazing_drop_probability(nm: &NoiseModel, theta_deg: f64) -> f64 {
    if nm.grazing_slope_deg == 0.0 {
        return if theta_deg > nm.grazing_theta0_deg { 1.0 } else { 0.0 };
    }
    1.0 / (1.0 + (-(theta_deg - nm.grazing_theta0_deg) / nm.grazing_slope_deg).exp())
}

/// Corrupt a clean sample. Stages run in a fixed order: lateral jitter, axial
/// noise, quantization, grazing dropout, shadow bands, material dropout.
pub fn apply_sensor_noise(s: &Sample, nm: &NoiseModel, seed: u64) -> Result<Sample> {
    nm.validate()?;
    let clean = &s.clean_depth;
    let (w, h) = (clean.width(), clean.height());
    let d_max = clean.d_max() as f64;
    let k = s.intrinsics;
    let mut rng = seed::rng(seed);

    // (1) lateral jitter: nearest-neighbor resample at a perturbed position
    let mut source: Vec<usize> = (0..w * h).collect();
    if nm.lateral_std > 0.0 {
        let jitter = Normal::new(0.0, nm.lateral_std).expect("validated std");
        for v in 0..h {
            for u in 0..w {
                let du: f64 = jitter.sample(&mut rng);
                let dv: f64 = jitter.sample(&mut rng);
                let su = (u as f64 + du).round().clamp(0.0, w as f64 - 1.0) as usize;
                let sv = (v as f64 + dv).round().clamp(0.0, h as f64 - 1.0) as usize;
                source[v * w + u] = sv * w + su;
            }
        }
    }
    let mut z: Vec<f64> = source.iter().map(|&i| clean.values()[i] as f64).collect();

    let incidence: Vec<f64> = (0..w * h)
        .map(|i| {
            let src = source[i];
            let n = s.normals.values()[src];
            if n == [0.0; 3] {
                return 0.0;
            }
            let r = k.ray((src % w) as f64, (src / w) as f64);
            let len = (r[0] * r[0] + r[1] * r[1] + 1.0).sqrt();
            let cos = -(n[0] as f64 * r[0] + n[1] as f64 * r[1] + n[2] as f64 * r[2]) / len;
            cos.abs().min(1.0).acos()
        })
        .collect();

    // (2) axial noise
    if nm.a0 > 0.0 || nm.a1 > 0.0 || nm.a2 > 0.0 {
        for (zi, &theta) in z.iter_mut().zip(&incidence) {
            let e: f64 = rand_distr::StandardNormal.sample(&mut rng);
            if *zi > 0.0 {
                *zi += axial_sigma(nm, *zi, theta) * e;
            }
        }
    }

    // (3) quantization with a depth-dependent step
    if nm.kappa > 0.0 {
        for zi in z.iter_mut().filter(|z| **z > 0.0) {
            let step = nm.kappa * *zi * *zi;
            *zi = (*zi / step).round() * step;
        }
    }

    // (4) grazing dropout
    for (zi, &theta) in z.iter_mut().zip(&incidence) {
        let p = grazing_drop_probability(nm, theta.to_degrees());
        if p > 0.0 && rng.random::<f64>() < p {
            *zi = 0.0;
        }
    }

    // (5) one-sided shadow band right of every near-to-far horizontal jump
    if nm.shadow_px > 0 {
        let mut shadow = vec![false; w * h];
        for v in 0..h {
            for u in 0..w - 1 {
                let (a, b) = (clean.get(u, v) as f64, clean.get(u + 1, v) as f64);
                if a > 0.0 && b - a > nm.edge_jump_m {
                    for x in u + 1..(u + 1 + nm.shadow_px).min(w) {
                        shadow[v * w + x] = true;
                    }
                }
            }
        }
        for (zi, _) in z.iter_mut().zip(&shadow).filter(|(_, s)| **s) {
            *zi = 0.0;
        }
    }

    // (6) material dropout on dark or glossy surfaces
    if nm.dark_drop_p > 0.0 || nm.specular_drop_p > 0.0 {
        for (i, zi) in z.iter_mut().enumerate() {
            let src = source[i];
            let dark = (s.rgb.luminance(src) as f64) < nm.dark_threshold;
            let glossy = s
                .specularity
                .as_ref()
                .is_some_and(|sp| sp[src] as f64 > nm.specular_threshold);
            let u1: f64 = rng.random();
            let u2: f64 = rng.random();
            if (dark && u1 < nm.dark_drop_p) || (glossy && u2 < nm.specular_drop_p) {
                *zi = 0.0;
            }
        }
    }

    let values = z
        .iter()
        .zip(clean.values())
        .map(|(&zi, &c)| {
            if c == 0.0 || !(zi > 0.0 && zi <= d_max) {
                0.0
            } else {
                zi as f32
            }
        })
        .collect();
    let depth = DepthMap::new(w, h, values, clean.d_max())?;
    Ok(Sample {
        depth,
        ..s.clone()
    })
}
