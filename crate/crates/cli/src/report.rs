//! Figure emission: depth panels and point-cloud side views as PNG.

use std::path::{Path, PathBuf};

use dcl_core::depth::{backproject, DepthMap};
use dcl_core::scene::{load_samples, Manifest};
use dcl_core::{DclError, Result};
use image::{Rgb, RgbImage};

const GAP: u32 = 4;
const CLOUD_SIZE: u32 = 192;
const HOLE: Rgb<u8> = Rgb([160, 0, 40]);
const PALETTE: [Rgb<u8>; 3] = [Rgb([40, 110, 220]), Rgb([230, 120, 20]), Rgb([30, 160, 70])];

fn save(img: &RgbImage, path: &Path) -> Result<()> {
    img.save(path)
        .map_err(|e| DclError::Data(format!("{}: {e}", path.display())))
}

/// Near is bright, far is dark, holes are marked.
fn depth_tile(d: &DepthMap) -> RgbImage {
    RgbImage::from_fn(d.width() as u32, d.height() as u32, |u, v| {
        let z = d.get(u as usize, v as usize);
        if z <= 0.0 {
            return HOLE;
        }
        let g = (255.0 * (1.0 - z / d.d_max())).round().clamp(0.0, 255.0) as u8;
        Rgb([g, g, g])
    })
}

fn blit(dst: &mut RgbImage, src: &RgbImage, x0: u32) {
    for (x, y, p) in src.enumerate_pixels() {
        dst.put_pixel(x0 + x, y, *p);
    }
}

/// Side view: depth along the horizontal axis, camera height on the vertical.
fn side_view(d: &DepthMap, sample: &dcl_core::scene::Sample, color: Rgb<u8>) -> RgbImage {
    let mut img = RgbImage::from_pixel(CLOUD_SIZE, CLOUD_SIZE, Rgb([255, 255, 255]));
    let cloud = backproject(d, &sample.intrinsics);
    let zmax = d.d_max() as f64;
    let ymax = zmax * 0.5;
    let s = CLOUD_SIZE as f64 - 1.0;
    for p in &cloud.points {
        let x = (p[2] / zmax * s).round();
        let y = ((p[1] / ymax + 1.0) * 0.5 * s).round();
        if (0.0..=s).contains(&x) && (0.0..=s).contains(&y) {
            img.put_pixel(x as u32, y as u32, color);
        }
    }
    img
}

/// For each of the first `count` samples, one panel row across the given
/// manifests and one point-cloud strip. Returns the written files.
pub fn write_panels(sets: &[(&str, &Manifest)], count: usize, dir: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir).map_err(|e| DclError::Data(format!("{}: {e}", dir.display())))?;
    let loaded: Vec<(&str, Vec<_>)> = sets
        .iter()
        .map(|(name, m)| Ok((*name, load_samples(m)?)))
        .collect::<Result<_>>()?;
    let n = loaded.iter().map(|(_, s)| s.len()).min().unwrap_or(0).min(count);
    let mut written = Vec::new();
    for i in 0..n {
        let tiles: Vec<RgbImage> = loaded.iter().map(|(_, s)| depth_tile(&s[i].depth)).collect();
        let h = tiles.iter().map(|t| t.height()).max().unwrap_or(1);
        let w: u32 = tiles.iter().map(|t| t.width() + GAP).sum::<u32>() - GAP;
        let mut panel = RgbImage::from_pixel(w, h, Rgb([255, 255, 255]));
        let mut x = 0;
        for t in &tiles {
            blit(&mut panel, t, x);
            x += t.width() + GAP;
        }
        let names: Vec<&str> = loaded.iter().map(|(n, _)| *n).collect();
        let p = dir.join(format!("panel_{i:03}_{}.png", names.join("-")));
        save(&panel, &p)?;
        written.push(p);

        let k = loaded.len() as u32;
        let mut strip = RgbImage::from_pixel(k * (CLOUD_SIZE + GAP) - GAP, CLOUD_SIZE, Rgb([255, 255, 255]));
        for (j, (_, s)) in loaded.iter().enumerate() {
            let view = side_view(&s[i].depth, &s[i], PALETTE[j % PALETTE.len()]);
            blit(&mut strip, &view, j as u32 * (CLOUD_SIZE + GAP));
        }
        let p = dir.join(format!("cloud_{i:03}_{}.png", names.join("-")));
        save(&strip, &p)?;
        written.push(p);
    }
    Ok(written)
}
