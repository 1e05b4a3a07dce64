use super::{background_depth_at, Primitive, PrimitiveKind, Sample, Scene};
use crate::depth::{CameraIntrinsics, DepthMap, NormalMap, RgbImage};
use crate::error::Result;

/// Nearest surface along a ray. `t` is the hit depth because rays are scaled
/// to unit z.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Hit {
    pub t: f64,
    pub normal: [f64; 3],
    pub albedo: [f32; 3],
    pub specularity: f32,
    /// 0 for the background, `i + 1` for primitive `i`.
    pub surface: usize,
}

fn dot(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn hit_primitive(p: &Primitive, ray: [f64; 3]) -> Option<(f64, [f64; 3])> {
    let c = p.pose.translation;
    match p.kind {
        PrimitiveKind::Sphere => {
            let r = p.size[0];
            let a = dot(ray, ray);
            let b = -2.0 * dot(ray, c);
            let cc = dot(c, c) - r * r;
            let disc = b * b - 4.0 * a * cc;
            if disc < 0.0 {
                return None;
            }
            let t = (-b - disc.sqrt()) / (2.0 * a);
            if t <= 0.0 {
                return None;
            }
            let n = [(t * ray[0] - c[0]) / r, (t * ray[1] - c[1]) / r, (t * ray[2] - c[2]) / r];
            Some((t, n))
        }
        PrimitiveKind::Plane => {
            let o = p.pose.to_local([-c[0], -c[1], -c[2]]);
            let d = p.pose.to_local(ray);
            if d[2].abs() < 1e-12 {
                return None;
            }
            let t = -o[2] / d[2];
            let (x, y) = (o[0] + t * d[0], o[1] + t * d[1]);
            (t > 0.0 && x.abs() <= p.size[0] && y.abs() <= p.size[1]).then(|| (t, p.pose.to_world([0.0, 0.0, 1.0])))
        }
        PrimitiveKind::Box => {
            let o = p.pose.to_local([-c[0], -c[1], -c[2]]);
            let d = p.pose.to_local(ray);
            let (mut t_near, mut t_far) = (f64::NEG_INFINITY, f64::INFINITY);
            let mut axis = 0;
            for i in 0..3 {
                if d[i].abs() < 1e-12 {
                    if o[i].abs() > p.size[i] {
                        return None;
                    }
                    continue;
                }
                let t1 = (-p.size[i] - o[i]) / d[i];
                let t2 = (p.size[i] - o[i]) / d[i];
                let (lo, hi) = if t1 < t2 { (t1, t2) } else { (t2, t1) };
                if lo > t_near {
                    t_near = lo;
                    axis = i;
                }
                t_far = t_far.min(hi);
            }
            if t_near > t_far || t_near <= 0.0 {
                return None;
            }
            let mut n = [0.0; 3];
            n[axis] = -d[axis].signum();
            Some((t_near, p.pose.to_world(n)))
        }
    }
}

/// Ray cast against every primitive and the background.
pub fn intersect(scene: &Scene, ray: [f64; 3]) -> Option<Hit> {
    let bg = &scene.background;
    let mut best = background_depth_at(bg, ray).map(|t| Hit {
        t,
        normal: bg.normal,
        albedo: bg.albedo,
        specularity: bg.specularity,
        surface: 0,
    });
    for (id, p) in scene.primitives.iter().enumerate() {
        if let Some((t, normal)) = hit_primitive(p, ray) {
            if best.is_none_or(|b| t < b.t) {
                best = Some(Hit {
                    t,
                    normal,
                    albedo: p.albedo,
                    specularity: p.specularity,
                    surface: id + 1,
                });
            }
        }
    }
    best
}

/// Clean render: depth, analytic normals, headlight-shaded color.
pub fn render(scene: &Scene, k: &CameraIntrinsics, width: usize, height: usize, d_max: f32) -> Result<Sample> {
    k.validate(width, height)?;
    let n = width * height;
    let mut depth = vec![0.0f32; n];
    let mut normals = vec![[0.0f32; 3]; n];
    let mut rgb = vec![[0.0f32; 3]; n];
    let mut specularity = vec![0.0f32; n];
    for v in 0..height {
        for u in 0..width {
            let ray = k.ray(u as f64, v as f64);
            let Some(hit) = intersect(scene, ray) else { continue };
            if !(hit.t > 0.0 && hit.t <= d_max as f64) {
                continue;
            }
            let i = v * width + u;
            depth[i] = hit.t as f32;
            let nn = NormalMap::orient(hit.normal);
            normals[i] = nn;
            let len = dot(ray, ray).sqrt();
            let cos = (-(nn[0] as f64 * ray[0] + nn[1] as f64 * ray[1] + nn[2] as f64 * ray[2]) / len).clamp(0.0, 1.0);
            let highlight = hit.specularity * (cos as f32).powi(32) * 0.6;
            for c in 0..3 {
                rgb[i][c] = (hit.albedo[c] * (0.2 + 0.8 * cos as f32) + highlight).clamp(0.0, 1.0);
            }
            specularity[i] = hit.specularity;
        }
    }
    let depth = DepthMap::new(width, height, depth, d_max)?;
    Ok(Sample {
        clean_depth: depth.clone(),
        depth,
        normals: NormalMap::new(width, height, normals)?,
        rgb: RgbImage::new(width, height, rgb)?,
        intrinsics: *k,
        specularity: Some(specularity),
    })
}
