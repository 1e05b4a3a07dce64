//! Procedural desk-scale scenes, a ray-cast depth renderer and a parametric
//! depth-sensor noise model. Together they produce the clean synthetic domain
//! and the noisy "real" domain.

pub(crate) mod dataset;
mod noise;
mod render;

pub use dataset::{
    build_dataset, load_manifest, load_samples, simulate_dataset, write_manifest, Manifest, ManifestEntry, Split,
};
pub use noise::{apply_sensor_noise, axial_sigma, grazing_drop_probability, NoiseModel};
pub use render::{intersect, render, Hit};

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::depth::{CameraIntrinsics, DepthMap, Domain, NormalMap, RgbImage, MIN_EXTENT};
use crate::error::{DclError, Result};
use crate::seed;

/// Closest distance from the camera any surface may come.
pub const NEAR_M: f64 = 0.3;
const MAX_RETRIES: usize = 256;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PrimitiveKind {
    Plane,
    Box,
    Sphere,
}

impl PrimitiveKind {
    pub const ALL: [PrimitiveKind; 3] = [PrimitiveKind::Plane, PrimitiveKind::Box, PrimitiveKind::Sphere];
}

/// Rigid transform: `rotation` columns are the local axes in camera
/// coordinates, `translation` is the local origin.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub rotation: [[f64; 3]; 3],
    pub translation: [f64; 3],
}

impl Pose {
    pub fn identity_at(translation: [f64; 3]) -> Self {
        Self {
            rotation: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
            translation,
        }
    }

    pub fn to_local(&self, v: [f64; 3]) -> [f64; 3] {
        let r = &self.rotation;
        [
            r[0][0] * v[0] + r[1][0] * v[1] + r[2][0] * v[2],
            r[0][1] * v[0] + r[1][1] * v[1] + r[2][1] * v[2],
            r[0][2] * v[0] + r[1][2] * v[1] + r[2][2] * v[2],
        ]
    }

    pub fn to_world(&self, v: [f64; 3]) -> [f64; 3] {
        let r = &self.rotation;
        [
            r[0][0] * v[0] + r[0][1] * v[1] + r[0][2] * v[2],
            r[1][0] * v[0] + r[1][1] * v[1] + r[1][2] * v[2],
            r[2][0] * v[0] + r[2][1] * v[1] + r[2][2] * v[2],
        ]
    }
}

/// A plane primitive is a rectangle in its local xy plane with half extents
/// `size[0..2]`; a box has half extents `size`; a sphere has radius `size[0]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Primitive {
    pub kind: PrimitiveKind,
    pub pose: Pose,
    pub size: [f64; 3],
    pub albedo: [f32; 3],
    pub specularity: f32,
}

/// Infinite plane through `(0, 0, distance)` with unit `normal` (facing the
/// camera).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Background {
    pub distance: f64,
    pub normal: [f64; 3],
    pub albedo: [f32; 3],
    pub specularity: f32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub primitives: Vec<Primitive>,
    pub background: Background,
}

/// Distribution over scenes for one domain.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainConfig {
    pub domain: Domain,
    pub width: usize,
    pub height: usize,
    pub d_max: f32,
    /// Inclusive primitive-count range.
    pub primitive_count: [usize; 2],
    /// Relative weights for plane, box, sphere.
    pub kind_weights: [f64; 3],
    /// Half extent / radius range in meters.
    pub size_range: [f64; 2],
    /// Depth range of primitive centers in meters.
    pub depth_range: [f64; 2],
    /// On-axis background distance range in meters.
    pub background_distance: [f64; 2],
    pub background_tilt_deg: f64,
    /// Gray-level range of albedos before tinting.
    pub albedo_range: [f32; 2],
    /// Probability that a primitive is glossy.
    pub specular_fraction: f64,
}

impl DomainConfig {
    pub fn synth(width: usize, height: usize) -> Self {
        Self {
            domain: Domain::Synth,
            width,
            height,
            d_max: 10.0,
            primitive_count: [2, 6],
            kind_weights: [0.3, 0.4, 0.3],
            size_range: [0.15, 0.6],
            depth_range: [1.0, 4.5],
            background_distance: [3.5, 7.0],
            background_tilt_deg: 30.0,
            albedo_range: [0.05, 0.95],
            specular_fraction: 0.2,
        }
    }

    pub fn real(width: usize, height: usize) -> Self {
        Self {
            domain: Domain::Real,
            width,
            height,
            d_max: 10.0,
            primitive_count: [3, 8],
            kind_weights: [0.4, 0.35, 0.25],
            size_range: [0.1, 0.5],
            depth_range: [0.8, 4.0],
            background_distance: [3.0, 6.5],
            background_tilt_deg: 35.0,
            albedo_range: [0.03, 0.9],
            specular_fraction: 0.25,
        }
    }

    pub fn for_domain(domain: Domain, width: usize, height: usize) -> Self {
        match domain {
            Domain::Synth => Self::synth(width, height),
            Domain::Real => Self::real(width, height),
        }
    }

    pub fn intrinsics(&self) -> CameraIntrinsics {
        CameraIntrinsics::for_resolution(self.width, self.height)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(DclError::Config(format!("domain config: {msg}")));
        let ordered = |r: [f64; 2]| r[0].is_finite() && r[1].is_finite() && r[0] <= r[1];
        if self.width < MIN_EXTENT || self.height < MIN_EXTENT {
            return bad("resolution below 8x8");
        }
        if !(self.d_max.is_finite() && self.d_max > 0.0 && self.d_max <= 65.535) {
            return bad("d_max must lie in (0, 65.535] m");
        }
        if self.primitive_count[0] > self.primitive_count[1] {
            return bad("primitive_count range is reversed");
        }
        if self.kind_weights.iter().any(|w| !(w.is_finite() && *w >= 0.0))
            || (self.primitive_count[1] > 0 && self.kind_weights.iter().sum::<f64>() <= 0.0)
        {
            return bad("kind weights must be nonnegative with a positive sum");
        }
        if !ordered(self.size_range) || self.size_range[0] <= 0.0 {
            return bad("size_range must be positive and ordered");
        }
        if !ordered(self.depth_range) || self.depth_range[0] <= NEAR_M {
            return bad("depth_range must be ordered and beyond the near plane");
        }
        let bg = self.background_distance;
        if !ordered(bg) || bg[0] <= NEAR_M || bg[1] > self.d_max as f64 {
            return bad("background_distance must be ordered within (near, d_max]");
        }
        if !(0.0..80.0).contains(&self.background_tilt_deg) {
            return bad("background_tilt_deg must lie in [0, 80)");
        }
        let a = self.albedo_range;
        if !(0.0 <= a[0] && a[0] <= a[1] && a[1] <= 1.0) {
            return bad("albedo_range must be ordered within [0, 1]");
        }
        if !(0.0..=1.0).contains(&self.specular_fraction) {
            return bad("specular_fraction must lie in [0, 1]");
        }
        Ok(())
    }
}

/// One rendered (and possibly corrupted) view.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub depth: DepthMap,
    pub clean_depth: DepthMap,
    pub normals: NormalMap,
    pub rgb: RgbImage,
    pub intrinsics: CameraIntrinsics,
    /// Per-pixel specularity of the visible surface; only known for freshly
    /// rendered samples.
    pub specularity: Option<Vec<f32>>,
}

fn uniform<R: Rng>(rng: &mut R, range: [f64; 2]) -> f64 {
    if range[0] == range[1] {
        range[0]
    } else {
        rng.random_range(range[0]..range[1])
    }
}

fn random_albedo<R: Rng>(rng: &mut R, range: [f32; 2]) -> [f32; 3] {
    let gray = uniform(rng, [range[0] as f64, range[1] as f64]) as f32;
    let mut c = [0.0; 3];
    for ch in &mut c {
        *ch = (gray * rng.random_range(0.85f32..1.15)).clamp(0.0, 1.0);
    }
    c
}

/// Uniformly distributed rotation from a normalized Gaussian quaternion.
fn random_rotation<R: Rng>(rng: &mut R) -> [[f64; 3]; 3] {
    let mut q = [0.0f64; 4];
    loop {
        for x in &mut q {
            *x = StandardNormal.sample(rng);
        }
        let n = q.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-9 {
            q.iter_mut().for_each(|x| *x /= n);
            break;
        }
    }
    let [w, x, y, z] = q;
    [
        [1.0 - 2.0 * (y * y + z * z), 2.0 * (x * y - w * z), 2.0 * (x * z + w * y)],
        [2.0 * (x * y + w * z), 1.0 - 2.0 * (x * x + z * z), 2.0 * (y * z - w * x)],
        [2.0 * (x * z - w * y), 2.0 * (y * z + w * x), 1.0 - 2.0 * (x * x + y * y)],
    ]
}

/// Rotation whose local z axis is `axis_z`.
fn frame_from_axis(axis_z: [f64; 3], spin: f64) -> [[f64; 3]; 3] {
    let helper = if axis_z[0].abs() < 0.9 { [1.0, 0.0, 0.0] } else { [0.0, 1.0, 0.0] };
    let norm = |v: [f64; 3]| {
        let l = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
        [v[0] / l, v[1] / l, v[2] / l]
    };
    let cross = |a: [f64; 3], b: [f64; 3]| {
        [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]]
    };
    let x0 = norm(cross(helper, axis_z));
    let y0 = cross(axis_z, x0);
    let (s, c) = spin.sin_cos();
    let x = [c * x0[0] + s * y0[0], c * x0[1] + s * y0[1], c * x0[2] + s * y0[2]];
    let y = cross(axis_z, x);
    [[x[0], y[0], axis_z[0]], [x[1], y[1], axis_z[1]], [x[2], y[2], axis_z[2]]]
}

/// Unit vector within `max_tilt` radians of the given axis direction.
fn tilted_normal<R: Rng>(rng: &mut R, max_tilt: f64, axis_z_sign: f64) -> [f64; 3] {
    let tilt = max_tilt * rng.random::<f64>().sqrt();
    let azimuth = rng.random_range(0.0..std::f64::consts::TAU);
    [tilt.sin() * azimuth.cos(), tilt.sin() * azimuth.sin(), axis_z_sign * tilt.cos()]
}

fn weighted_kind<R: Rng>(rng: &mut R, weights: &[f64; 3]) -> PrimitiveKind {
    let total: f64 = weights.iter().sum();
    let mut x = rng.random_range(0.0..total);
    for (k, &w) in PrimitiveKind::ALL.iter().zip(weights) {
        if x < w {
            return *k;
        }
        x -= w;
    }
    PrimitiveKind::Sphere
}

/// Radius of the sphere bounding a primitive.
pub fn bounding_radius(p: &Primitive) -> f64 {
    match p.kind {
        PrimitiveKind::Sphere => p.size[0],
        PrimitiveKind::Plane => (p.size[0].powi(2) + p.size[1].powi(2)).sqrt(),
        PrimitiveKind::Box => p.size.iter().map(|s| s * s).sum::<f64>().sqrt(),
    }
}

fn background_depth_at(bg: &Background, ray: [f64; 3]) -> Option<f64> {
    let denom = bg.normal[0] * ray[0] + bg.normal[1] * ray[1] + bg.normal[2] * ray[2];
    let t = bg.normal[2] * bg.distance / denom;
    (denom < 0.0 && t.is_finite() && t > 0.0).then_some(t)
}

/// Sample a scene. Kinds are drawn first and only poses are re-drawn on
/// rejection, so kind frequencies follow `kind_weights` exactly.
pub fn generate_scene(cfg: &DomainConfig, seed: u64) -> Result<Scene> {
    cfg.validate()?;
    let mut rng = seed::rng(seed);
    let k = cfg.intrinsics();
    let corners = [
        k.ray(0.0, 0.0),
        k.ray(cfg.width as f64 - 1.0, 0.0),
        k.ray(0.0, cfg.height as f64 - 1.0),
        k.ray(cfg.width as f64 - 1.0, cfg.height as f64 - 1.0),
    ];

    let mut background = None;
    for _ in 0..MAX_RETRIES {
        let bg = Background {
            distance: uniform(&mut rng, cfg.background_distance),
            normal: tilted_normal(&mut rng, cfg.background_tilt_deg.to_radians(), -1.0),
            albedo: random_albedo(&mut rng, cfg.albedo_range),
            specularity: 0.0,
        };
        // depth along pixel rays is extremal at the image corners
        let fits = corners.iter().all(|&r| {
            background_depth_at(&bg, r).is_some_and(|z| z >= NEAR_M && z <= cfg.d_max as f64)
        });
        if fits {
            background = Some(bg);
            break;
        }
    }
    let background =
        background.ok_or_else(|| DclError::Generation(format!("no admissible background after {MAX_RETRIES} draws")))?;

    let count = rng.random_range(cfg.primitive_count[0]..=cfg.primitive_count[1]);
    let mut primitives = Vec::with_capacity(count);
    for _ in 0..count {
        let kind = weighted_kind(&mut rng, &cfg.kind_weights);
        let mut placed = None;
        for _ in 0..MAX_RETRIES {
            // centers are placed on a pixel ray, which keeps every primitive
            // inside the viewing frustum
            let u = rng.random_range(0.0..cfg.width as f64 - 1.0);
            let v = rng.random_range(0.0..cfg.height as f64 - 1.0);
            let z = uniform(&mut rng, cfg.depth_range);
            let r = k.ray(u, v);
            let center = [r[0] * z, r[1] * z, z];
            let mut size = [0.0; 3];
            for s in &mut size {
                *s = uniform(&mut rng, cfg.size_range);
            }
            let rotation = match kind {
                PrimitiveKind::Plane => {
                    frame_from_axis(tilted_normal(&mut rng, 60f64.to_radians(), -1.0), rng.random_range(0.0..6.3))
                }
                _ => random_rotation(&mut rng),
            };
            if kind == PrimitiveKind::Sphere {
                size = [size[0]; 3];
            }
            if kind == PrimitiveKind::Plane {
                size[2] = 0.0;
            }
            let prim = Primitive {
                kind,
                pose: Pose { rotation, translation: center },
                size,
                albedo: random_albedo(&mut rng, cfg.albedo_range),
                specularity: if rng.random_bool(cfg.specular_fraction) {
                    rng.random_range(0.8f32..1.0)
                } else {
                    rng.random_range(0.0f32..0.5)
                },
            };
            let radius = bounding_radius(&prim);
            let bg_z = background_depth_at(&background, r).unwrap_or(f64::INFINITY);
            if z - radius >= NEAR_M && z + radius <= cfg.d_max as f64 && z - radius < bg_z {
                placed = Some(prim);
                break;
            }
        }
        primitives.push(placed.ok_or_else(|| {
            DclError::Generation(format!("no admissible {kind:?} placement after {MAX_RETRIES} draws"))
        })?);
    }
    Ok(Scene { primitives, background })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scenes_are_deterministic() {
        let cfg = DomainConfig::synth(64, 64);
        assert_eq!(generate_scene(&cfg, 5).unwrap(), generate_scene(&cfg, 5).unwrap());
        assert_ne!(generate_scene(&cfg, 5).unwrap(), generate_scene(&cfg, 6).unwrap());
    }

    #[test]
    fn empty_count_range_gives_background_only() {
        let cfg = DomainConfig {
            primitive_count: [0, 0],
            ..DomainConfig::real(32, 32)
        };
        for seed in 0..20 {
            assert!(generate_scene(&cfg, seed).unwrap().primitives.is_empty());
        }
    }

    #[test]
    fn kind_frequencies_follow_weights() {
        let cfg = DomainConfig {
            primitive_count: [1, 1],
            ..DomainConfig::synth(64, 64)
        };
        let mut counts = [0usize; 3];
        for seed in 0..1000 {
            let scene = generate_scene(&cfg, seed).unwrap();
            let k = scene.primitives[0].kind;
            counts[PrimitiveKind::ALL.iter().position(|&x| x == k).unwrap()] += 1;
        }
        let total: f64 = cfg.kind_weights.iter().sum();
        for (c, w) in counts.iter().zip(cfg.kind_weights) {
            assert!((*c as f64 / 1000.0 - w / total).abs() < 0.05, "{counts:?}");
        }
    }

    #[test]
    fn primitives_sit_inside_the_frustum() {
        let cfg = DomainConfig::real(64, 48);
        let k = cfg.intrinsics();
        for seed in 0..50 {
            for p in generate_scene(&cfg, seed).unwrap().primitives {
                let c = p.pose.translation;
                let (u, v) = crate::depth::reproject(c, &k);
                assert!(c[2] > NEAR_M && (0.0..64.0).contains(&u) && (0.0..48.0).contains(&v));
            }
        }
    }

    #[test]
    fn rotations_are_orthonormal() {
        let mut rng = seed::rng(1);
        for _ in 0..20 {
            let pose = Pose {
                rotation: random_rotation(&mut rng),
                translation: [0.0; 3],
            };
            let v = [0.3, -1.2, 2.0];
            let back = pose.to_world(pose.to_local(v));
            for i in 0..3 {
                assert!((back[i] - v[i]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn domain_configs_differ_and_validate() {
        let (s, r) = (DomainConfig::synth(64, 64), DomainConfig::real(64, 64));
        assert!(s.validate().is_ok() && r.validate().is_ok());
        assert_ne!(s.primitive_count, r.primitive_count);
        assert_ne!(s.size_range, r.size_range);
        let bad = DomainConfig {
            size_range: [0.5, 0.1],
            ..s
        };
        assert!(matches!(bad.validate(), Err(DclError::Config(_))));
    }
}
