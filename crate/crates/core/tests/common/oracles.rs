use std::f64::consts::LN_2;

use dcl_core::depth::{backproject, normals_from_depth, reproject, CameraIntrinsics, DepthMap, NormalMap};
use dcl_core::losses::{
    adv_discriminator, adv_generator, differential, infonce, loss_adv_reference, loss_dc_reference, sample_pairs,
    GanObjective, PairSampling, ProjectedFeatures,
};
use dcl_core::metrics::{angle_deg, depth_metrics_with, normal_metrics, SsimWindow, ANGLE_THRESHOLDS_DEG};
use dcl_core::scene::{apply_sensor_noise, generate_scene, render, Background, DomainConfig, NoiseModel, Scene};
use dcl_core::seed;
use dcl_tensor::{Graph, Tensor};
use rand::Rng;

fn verdict(ok: bool, detail: String) -> Result<String, String> {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

pub fn a2() -> Result<String, String> {
    let q = [0.6, 0.8];
    let equal = infonce(&q, &[0.6, 0.8], &[vec![0.6, 0.8]], 0.07);
    let empty = infonce(&q, &[0.6, 0.8], &[], 0.07);
    // unit query along x; scores / tau = 2, 0, 1 with tau = 0.5
    let three = infonce(&[1.0, 0.0], &[1.0, 0.0], &[vec![0.0, 1.0], vec![0.5, 0.0]], 0.5);
    let e = std::f64::consts::E;
    let direct = -(e.powi(2) / (e.powi(2) + 1.0 + e)).ln();
    let ok = (equal - LN_2).abs() < 1e-9 && empty == 0.0 && (three - direct).abs() < 1e-9 && (direct - 0.407606).abs() < 1e-6;
    verdict(ok, format!("equal {equal:.12}, empty {empty}, three {three:.12} vs {direct:.12}"))
}

fn random_features(rng: &mut impl Rng, h: usize, w: usize, dim: usize) -> ProjectedFeatures {
    ProjectedFeatures {
        layer: 0,
        height: h,
        width: w,
        vectors: (0..h * w)
            .map(|_| {
                let v: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
                let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                v.into_iter().map(|x| x / n).collect()
            })
            .collect(),
    }
}

pub fn a3() -> Result<String, String> {
    let mut rng = seed::rng(3);
    let mut exact = true;
    let mut worst = 0.0f64;
    for trial in 0..20 {
        let f = random_features(&mut rng, 6, 6, 8);
        let fh = random_features(&mut rng, 6, 6, 8);
        for i in 0..36 {
            for j in 0..36 {
                let a = differential(&f, i, j);
                let b = differential(&f, j, i);
                exact &= a.iter().zip(&b).all(|(x, y)| *x == -*y);
            }
        }
        let budget = PairSampling {
            anchors: 16,
            partners: 8,
            local_radius: 2,
        };
        let samples = sample_pairs(6, 6, &budget, 0, 0, &mut rng).map_err(|e| e.to_string())?;
        let base = loss_dc_reference(std::slice::from_ref(&f), std::slice::from_ref(&fh), &samples, 0.07);
        let c: Vec<f64> = (0..8).map(|k| 0.3 * ((trial + k) as f64).sin()).collect();
        let shifted = loss_dc_reference(&[f.shifted(&c)], &[fh.shifted(&c)], &samples, 0.07);
        worst = worst.max((shifted - base).abs());
    }
    verdict(exact && worst < 1e-6, format!("antisymmetry exact {exact}, largest shift change {worst:.3e}"))
}

pub fn a4() -> Result<String, String> {
    let g = Graph::<f64>::new();
    // zero logits are probabilities of one half
    let real = g.constant(Tensor::zeros(&[2, 1, 4, 4]));
    let fake = g.constant(Tensor::zeros(&[2, 1, 4, 4]));
    let d = adv_discriminator(real, fake, GanObjective::Logistic).item();
    let gl = adv_generator(fake, GanObjective::Logistic).item();
    let (rd, rg) = loss_adv_reference(&[0.5; 32], &[0.5; 32]);
    let ok = (d - 2.0 * LN_2).abs() < 1e-9 && (gl - LN_2).abs() < 1e-9 && (rd - 2.0 * LN_2).abs() < 1e-9 && (rg - LN_2).abs() < 1e-9;
    verdict(ok, format!("adv_d {d:.12}, adv_g {gl:.12}"))
}

pub fn a5() -> Result<String, String> {
    let res = 32;
    let k = CameraIntrinsics::for_resolution(res, res);
    let mut rng = seed::rng(5);
    let (mut worst_deg, mut worst_px, mut interior) = (0.0f64, 0.0f64, 0usize);
    for _ in 0..50 {
        let tilt = rng.random_range(0.0..50f64).to_radians();
        let azimuth = rng.random_range(0.0..std::f64::consts::TAU);
        let normal = [tilt.sin() * azimuth.cos(), tilt.sin() * azimuth.sin(), -tilt.cos()];
        let scene = Scene {
            primitives: vec![],
            background: Background {
                distance: rng.random_range(1.0..4.0),
                normal,
                albedo: [0.5; 3],
                specularity: 0.0,
            },
        };
        let s = render(&scene, &k, res, res, 10.0).map_err(|e| e.to_string())?;
        let est = normals_from_depth(&s.depth, &k);
        let truth = normal.map(|x| x as f32);
        for v in 1..res - 1 {
            for u in 1..res - 1 {
                let inside = (v - 1..=v + 1).all(|y| (u - 1..=u + 1).all(|x| s.depth.is_valid(x, y)));
                if !inside {
                    continue;
                }
                interior += 1;
                worst_deg = worst_deg.max(angle_deg(est.get(u, v), truth));
            }
        }
        let cloud = backproject(&s.depth, &k);
        let pixels = (0..res * res).filter(|&i| s.depth.values()[i] > 0.0);
        for (p, i) in cloud.points.iter().zip(pixels) {
            let (u, v) = reproject(*p, &k);
            worst_px = worst_px.max((u - (i % res) as f64).abs()).max((v - (i / res) as f64).abs());
        }
    }
    verdict(
        interior > 10_000 && worst_deg < 0.5 && worst_px < 1e-6,
        format!("{interior} interior pixels, worst normal error {worst_deg:.2e} deg, worst reprojection {worst_px:.2e} px"),
    )
}

fn random_depth(rng: &mut impl Rng, n: usize, holes: f64) -> DepthMap {
    let v = (0..n * n)
        .map(|_| if rng.random_bool(holes) { 0.0 } else { rng.random_range(0.5f32..9.5) })
        .collect();
    DepthMap::new(n, n, v, 10.0).unwrap()
}

fn random_normals(rng: &mut impl Rng, n: usize, holes: f64) -> NormalMap {
    let v = (0..n * n)
        .map(|_| {
            if rng.random_bool(holes) {
                return [0.0; 3];
            }
            let mut p: [f64; 3] = [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), -rng.random_range(0.05..1.0)];
            let len = p.iter().map(|x| x * x).sum::<f64>().sqrt();
            p.iter_mut().for_each(|x| *x /= len);
            NormalMap::orient(p)
        })
        .collect();
    NormalMap::new(n, n, v).unwrap()
}

/// Straight from the definitions: a single pass over pixels and a direct
/// two-dimensional weighted window for SSIM.
fn naive_depth(pred: &DepthMap, gt: &DepthMap, win: SsimWindow) -> [Option<f64>; 5] {
    let (w, h) = (gt.width(), gt.height());
    let x = |u: usize, v: usize| pred.get(u, v) as f64;
    let y = |u: usize, v: usize| gt.get(u, v) as f64;
    let ok = |u: usize, v: usize| x(u, v) > 0.0 && y(u, v) > 0.0;
    let (mut n, mut sq, mut ab, mut lg) = (0.0, 0.0, 0.0, 0.0);
    for v in 0..h {
        for u in 0..w {
            if ok(u, v) {
                n += 1.0;
                sq += (x(u, v) - y(u, v)).powi(2);
                ab += (x(u, v) - y(u, v)).abs();
                lg += (x(u, v).ln() - y(u, v).ln()).powi(2);
            }
        }
    }
    let d_max = gt.d_max() as f64;
    let mse = sq / n;
    let psnr = if mse == 0.0 { f64::INFINITY } else { 10.0 * (d_max * d_max / mse).log10() };

    let s = win.size;
    let c = (s as f64 - 1.0) / 2.0;
    let mut k2 = vec![vec![0.0; s]; s];
    let mut total = 0.0;
    for (i, row) in k2.iter_mut().enumerate() {
        for (j, a) in row.iter_mut().enumerate() {
            *a = (-((i as f64 - c).powi(2) + (j as f64 - c).powi(2)) / (2.0 * win.sigma * win.sigma)).exp();
            total += *a;
        }
    }
    let (c1, c2) = ((0.01 * d_max).powi(2), (0.03 * d_max).powi(2));
    let (mut ssim, mut windows) = (0.0, 0.0);
    if s <= w && s <= h {
        for v0 in 0..=h - s {
            for u0 in 0..=w - s {
                if (0..s).any(|i| (0..s).any(|j| !ok(u0 + j, v0 + i))) {
                    continue;
                }
                let (mut mx, mut my, mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for i in 0..s {
                    for j in 0..s {
                        let wt = k2[i][j] / total;
                        let (a, b) = (x(u0 + j, v0 + i), y(u0 + j, v0 + i));
                        mx += wt * a;
                        my += wt * b;
                    }
                }
                for i in 0..s {
                    for j in 0..s {
                        let wt = k2[i][j] / total;
                        let (a, b) = (x(u0 + j, v0 + i) - mx, y(u0 + j, v0 + i) - my);
                        sxx += wt * a * a;
                        syy += wt * b * b;
                        sxy += wt * a * b;
                    }
                }
                ssim += ((2.0 * mx * my + c1) * (2.0 * sxy + c2)) / ((mx * mx + my * my + c1) * (sxx + syy + c2));
                windows += 1.0;
            }
        }
    }
    [
        Some(mse.sqrt()),
        Some((lg / n).sqrt()),
        Some(ab / n),
        Some(psnr),
        (windows > 0.0).then(|| ssim / windows),
    ]
}

fn naive_normals(pred: &NormalMap, gt: &NormalMap) -> Vec<f64> {
    let mut angles = Vec::new();
    for (p, g) in pred.values().iter().zip(gt.values()) {
        if *p == [0.0; 3] || *g == [0.0; 3] {
            continue;
        }
        let (p, g) = (p.map(|x| x as f64), g.map(|x| x as f64));
        let dot: f64 = (0..3).map(|c| p[c] * g[c]).sum();
        let sin = (0..3)
            .map(|c| {
                let (i, j) = ((c + 1) % 3, (c + 2) % 3);
                (p[i] * g[j] - p[j] * g[i]).powi(2)
            })
            .sum::<f64>()
            .sqrt();
        angles.push(sin.atan2(dot) * 180.0 / std::f64::consts::PI);
    }
    let mut sorted = angles.clone();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = sorted.len();
    let median = if n % 2 == 1 { sorted[n / 2] } else { (sorted[n / 2 - 1] + sorted[n / 2]) / 2.0 };
    let mut out = vec![median, angles.iter().sum::<f64>() / n as f64];
    for t in ANGLE_THRESHOLDS_DEG {
        out.push(angles.iter().filter(|&&a| a <= t).count() as f64 / n as f64);
    }
    out
}

fn close(a: f64, b: f64) -> bool {
    a == b || (a - b).abs() <= 1e-10 * (1.0 + b.abs())
}

pub fn a6() -> Result<String, String> {
    let mut rng = seed::rng(6);
    let keys = ["rmse", "rmse_log", "mae", "psnr", "ssim"];
    let mut mismatches = Vec::new();
    let mut ssim_checked = 0;
    let cases = [(8, SsimWindow { size: 5, sigma: 1.0 }, 0.05), (16, SsimWindow::default(), 0.02)];
    for (res, win, holes) in cases {
        for trial in 0..100 {
            // every other pair is hole-free so that SSIM windows survive
            let h = if trial % 2 == 0 { 0.0 } else { holes };
            let pred = random_depth(&mut rng, res, h);
            let gt = random_depth(&mut rng, res, h);
            let r = depth_metrics_with(&pred, &gt, win).map_err(|e| e.to_string())?;
            for (k, want) in keys.iter().zip(naive_depth(&pred, &gt, win)) {
                match (r.get(k), want) {
                    (Some(a), Some(b)) if close(a, b) => ssim_checked += (*k == "ssim") as usize,
                    (None, None) => {}
                    (a, b) => mismatches.push(format!("{res}px trial {trial} {k}: {a:?} vs {b:?}")),
                }
            }
        }
    }
    let normal_keys = ["median_deg", "mean_deg", "within_11.25", "within_16", "within_22.5", "within_30"];
    for trial in 0..100 {
        let pred = random_normals(&mut rng, 8, 0.1);
        let gt = random_normals(&mut rng, 8, 0.1);
        let r = normal_metrics(&pred, &gt).map_err(|e| e.to_string())?;
        for (k, want) in normal_keys.iter().zip(naive_normals(&pred, &gt)) {
            let got = r.get(k).unwrap_or(f64::NAN);
            if !close(got, want) {
                mismatches.push(format!("normals trial {trial} {k}: {got} vs {want}"));
            }
        }
    }
    let d = random_depth(&mut rng, 16, 0.0);
    let id = depth_metrics_with(&d, &d, SsimWindow::default()).map_err(|e| e.to_string())?;
    let nm = random_normals(&mut rng, 8, 0.0);
    let nid = normal_metrics(&nm, &nm).map_err(|e| e.to_string())?;
    let identity = id.get("rmse") == Some(0.0)
        && id.get("ssim").is_some_and(|s| (s - 1.0).abs() < 1e-12)
        && nid.get("mean_deg") == Some(0.0);
    verdict(
        mismatches.is_empty() && identity && ssim_checked > 100,
        format!(
            "{} mismatches{}, {ssim_checked} SSIM values compared, identity rmse {:?} ssim {:?} angle {:?}",
            mismatches.len(),
            mismatches.first().map(|m| format!(" (first: {m})")).unwrap_or_default(),
            id.get("rmse"),
            id.get("ssim"),
            nid.get("mean_deg")
        ),
    )
}

pub fn a7() -> Result<String, String> {
    let d = NoiseModel::default();
    let nm = NoiseModel {
        a0: d.a0,
        a1: d.a1,
        a2: d.a2,
        ..NoiseModel::zero()
    };
    let scene = Scene {
        primitives: vec![],
        background: Background {
            distance: 2.0,
            normal: [0.0, 0.0, -1.0],
            albedo: [0.5; 3],
            specularity: 0.0,
        },
    };
    let k = CameraIntrinsics::for_resolution(64, 64);
    let clean = render(&scene, &k, 64, 64, 10.0).map_err(|e| e.to_string())?;
    let (mut sum, mut sq, mut n) = (0.0, 0.0, 0usize);
    for s in 0..25 {
        let noisy = apply_sensor_noise(&clean, &nm, s).map_err(|e| e.to_string())?;
        for (&a, &c) in noisy.depth.values().iter().zip(clean.clean_depth.values()) {
            let e = a as f64 - c as f64;
            sum += e;
            sq += e * e;
            n += 1;
        }
    }
    let mean = sum / n as f64;
    let std = (sq / n as f64 - mean * mean).sqrt();
    let expect = 0.0012 + 0.0019 * 1.6f64.powi(2);

    let mut identity = true;
    for s in 0..10 {
        let cfg = DomainConfig::real(32, 32);
        let sample = render(&generate_scene(&cfg, s).map_err(|e| e.to_string())?, &cfg.intrinsics(), 32, 32, 10.0)
            .map_err(|e| e.to_string())?;
        let noisy = apply_sensor_noise(&sample, &NoiseModel::zero(), s).map_err(|e| e.to_string())?;
        identity &= noisy.depth == sample.clean_depth;
    }
    verdict(
        n >= 100_000 && (std - expect).abs() < 0.1 * expect && identity,
        format!("{n} draws, std {std:.6} m vs {expect:.6} m, zero-noise identity {identity}"),
    )
}
