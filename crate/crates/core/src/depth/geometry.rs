use super::{CameraIntrinsics, DepthMap, NormalMap, PointCloud};

/// Lift every valid pixel to a camera-frame point; missing pixels emit nothing.
pub fn backproject(depth: &DepthMap, k: &CameraIntrinsics) -> PointCloud {
    let mut points = Vec::new();
    for v in 0..depth.height() {
        for u in 0..depth.width() {
            let z = depth.get(u, v) as f64;
            if z > 0.0 {
                points.push(lift(u, v, z, k));
            }
        }
    }
    PointCloud { points }
}

/// Pixel coordinates of a camera-frame point.
pub fn reproject(p: [f64; 3], k: &CameraIntrinsics) -> (f64, f64) {
    (k.fx * p[0] / p[2] + k.cx, k.fy * p[1] / p[2] + k.cy)
}

fn lift(u: usize, v: usize, z: f64, k: &CameraIntrinsics) -> [f64; 3] {
    [(u as f64 - k.cx) * z / k.fx, (v as f64 - k.cy) * z / k.fy, z]
}

fn sub(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

fn cross(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

/// Normals from central differences of the back-projected 4-neighborhood.
///
/// Border pixels, missing pixels and pixels with a missing neighbor get the
/// zero vector.
pub fn normals_from_depth(depth: &DepthMap, k: &CameraIntrinsics) -> NormalMap {
    let (w, h) = (depth.width(), depth.height());
    let mut out = NormalMap::invalid(w, h);
    for v in 1..h.saturating_sub(1) {
        for u in 1..w.saturating_sub(1) {
            let taps = [
                (u, v),
                (u - 1, v),
                (u + 1, v),
                (u, v - 1),
                (u, v + 1),
            ];
            if taps.iter().any(|&(x, y)| !depth.is_valid(x, y)) {
                continue;
            }
            let p = |x: usize, y: usize| lift(x, y, depth.get(x, y) as f64, k);
            let du = sub(p(u + 1, v), p(u - 1, v));
            let dv = sub(p(u, v + 1), p(u, v - 1));
            out.values[v * w + u] = NormalMap::orient(cross(du, dv));
        }
    }
    out
}
