//! Depth and surface-normal evaluation metrics, pooled across images, with
//! JSON and CSV emission.

use std::collections::BTreeMap;

use serde::de::{self, Deserializer};
use serde::ser::Serializer;
use serde::{Deserialize, Serialize};

use crate::depth::{DepthMap, NormalMap};
use crate::error::{DclError, Result};

pub const ANGLE_THRESHOLDS_DEG: [f64; 4] = [11.25, 16.0, 22.5, 30.0];
const K1: f64 = 0.01;
const K2: f64 = 0.03;

/// Metric value; only PSNR may be `+inf`, written as the string `"inf"`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MetricValue {
    pub value: f64,
    pub n_pixels: u64,
}

impl Serialize for MetricValue {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        use serde::ser::SerializeStruct;
        let mut st = s.serialize_struct("MetricValue", 2)?;
        if self.value == f64::INFINITY {
            st.serialize_field("value", "inf")?;
        } else {
            st.serialize_field("value", &self.value)?;
        }
        st.serialize_field("n_pixels", &self.n_pixels)?;
        st.end()
    }
}

impl<'de> Deserialize<'de> for MetricValue {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Num {
            F(f64),
            S(String),
        }
        #[derive(Deserialize)]
        #[serde(deny_unknown_fields)]
        struct Raw {
            value: Num,
            n_pixels: u64,
        }
        let raw = Raw::deserialize(d)?;
        let value = match raw.value {
            Num::F(v) => v,
            Num::S(s) if s == "inf" => f64::INFINITY,
            Num::S(s) => return Err(de::Error::custom(format!("bad metric value {s:?}"))),
        };
        Ok(Self {
            value,
            n_pixels: raw.n_pixels,
        })
    }
}

/// Where a report came from.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    /// Row label in report tables.
    pub method: String,
    pub model: String,
    pub dataset: String,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub details: BTreeMap<String, serde_json::Value>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    #[serde(flatten)]
    pub metrics: BTreeMap<String, MetricValue>,
    pub provenance: Provenance,
}

impl MetricReport {
    pub fn get(&self, name: &str) -> Option<f64> {
        self.metrics.get(name).map(|m| m.value)
    }

    /// Every value is finite (PSNR may be `+inf`) and every count positive.
    pub fn check(&self) -> Result<()> {
        for (k, m) in &self.metrics {
            let ok = m.value.is_finite() || (k == "psnr" && m.value == f64::INFINITY);
            if !ok || m.n_pixels == 0 {
                return Err(DclError::Evaluation(format!("metric {k} = {} over {} pixels", m.value, m.n_pixels)));
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| DclError::Evaluation(e.to_string()))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| DclError::Evaluation(format!("metric report: {e}")))
    }
}

/// Gaussian SSIM window.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SsimWindow {
    pub size: usize,
    pub sigma: f64,
}

impl Default for SsimWindow {
    fn default() -> Self {
        Self { size: 11, sigma: 1.5 }
    }
}

impl SsimWindow {
    /// Normalized separable 1-D weights.
    pub fn weights(&self) -> Vec<f64> {
        let c = (self.size as f64 - 1.0) / 2.0;
        let w: Vec<f64> = (0..self.size)
            .map(|i| (-((i as f64 - c).powi(2)) / (2.0 * self.sigma * self.sigma)).exp())
            .collect();
        let s: f64 = w.iter().sum();
        w.into_iter().map(|x| x / s).collect()
    }
}

fn separable(src: &[f64], w: usize, h: usize, k: &[f64]) -> Vec<f64> {
    let n = k.len();
    let (ow, oh) = (w + 1 - n, h + 1 - n);
    let mut rows = vec![0.0; ow * h];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = k.iter().enumerate().map(|(i, c)| c * src[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; ow * oh];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = k.iter().enumerate().map(|(i, c)| c * rows[(y + i) * ow + x]).sum();
        }
    }
    out
}

/// SSIM terms of every window lying entirely inside `valid`: returns the sum
/// of window scores and the window count.
fn ssim_windows(x: &[f64], y: &[f64], valid: &[bool], w: usize, h: usize, win: &SsimWindow, range: f64) -> (f64, u64) {
    let n = win.size;
    if n == 0 || n > w || n > h {
        return (0.0, 0);
    }
    let k = win.weights();
    let mask = |f: &dyn Fn(usize) -> f64| -> Vec<f64> { (0..w * h).map(|i| if valid[i] { f(i) } else { 0.0 }).collect() };
    let mx = separable(&mask(&|i| x[i]), w, h, &k);
    let my = separable(&mask(&|i| y[i]), w, h, &k);
    let mxx = separable(&mask(&|i| x[i] * x[i]), w, h, &k);
    let myy = separable(&mask(&|i| y[i] * y[i]), w, h, &k);
    let mxy = separable(&mask(&|i| x[i] * y[i]), w, h, &k);

    // window validity from a summed-area table of holes
    let mut sat = vec![0u32; (w + 1) * (h + 1)];
    for yy in 0..h {
        for xx in 0..w {
            sat[(yy + 1) * (w + 1) + xx + 1] = (!valid[yy * w + xx]) as u32 + sat[yy * (w + 1) + xx + 1]
                + sat[(yy + 1) * (w + 1) + xx]
                - sat[yy * (w + 1) + xx];
        }
    }
    let c1 = (K1 * range).powi(2);
    let c2 = (K2 * range).powi(2);
    let ow = w + 1 - n;
    let (mut sum, mut count) = (0.0, 0);
    for yy in 0..h + 1 - n {
        for xx in 0..ow {
            let holes = sat[(yy + n) * (w + 1) + xx + n] + sat[yy * (w + 1) + xx]
                - sat[yy * (w + 1) + xx + n]
                - sat[(yy + n) * (w + 1) + xx];
            if holes != 0 {
                continue;
            }
            let i = yy * ow + xx;
            let (ux, uy) = (mx[i], my[i]);
            let vx = mxx[i] - ux * ux;
            let vy = myy[i] - uy * uy;
            let cxy = mxy[i] - ux * uy;
            sum += ((2.0 * ux * uy + c1) * (2.0 * cxy + c2)) / ((ux * ux + uy * uy + c1) * (vx + vy + c2));
            count += 1;
        }
    }
    (sum, count)
}

/// Pooled depth error statistics over any number of image pairs.
#[derive(Clone, Debug, PartialEq)]
pub struct DepthAccumulator {
    window: SsimWindow,
    d_max: Option<f64>,
    n: u64,
    sq: f64,
    abs: f64,
    log_sq: f64,
    ssim_sum: f64,
    ssim_n: u64,
}

impl DepthAccumulator {
    pub fn new(window: SsimWindow) -> Self {
        Self {
            window,
            d_max: None,
            n: 0,
            sq: 0.0,
            abs: 0.0,
            log_sq: 0.0,
            ssim_sum: 0.0,
            ssim_n: 0,
        }
    }

    pub fn add(&mut self, pred: &DepthMap, gt: &DepthMap) -> Result<()> {
        if (pred.width(), pred.height()) != (gt.width(), gt.height()) {
            return Err(DclError::Evaluation(format!(
                "prediction {}x{} vs ground truth {}x{}",
                pred.width(),
                pred.height(),
                gt.width(),
                gt.height()
            )));
        }
        let d_max = gt.d_max() as f64;
        match self.d_max {
            Some(d) if d != d_max => {
                return Err(DclError::Evaluation(format!("mixed d_max {d} and {d_max}")));
            }
            _ => self.d_max = Some(d_max),
        }
        let x: Vec<f64> = pred.values().iter().map(|&v| v as f64).collect();
        let y: Vec<f64> = gt.values().iter().map(|&v| v as f64).collect();
        let valid: Vec<bool> = x.iter().zip(&y).map(|(a, b)| *a > 0.0 && *b > 0.0).collect();
        for i in (0..x.len()).filter(|&i| valid[i]) {
            let e = x[i] - y[i];
            self.n += 1;
            self.sq += e * e;
            self.abs += e.abs();
            self.log_sq += (x[i].ln() - y[i].ln()).powi(2);
        }
        let (s, c) = ssim_windows(&x, &y, &valid, gt.width(), gt.height(), &self.window, d_max);
        self.ssim_sum += s;
        self.ssim_n += c;
        Ok(())
    }

    /// SSIM is omitted when no window fits inside the valid mask.
    pub fn finish(&self, provenance: Provenance) -> Result<MetricReport> {
        if self.n == 0 {
            return Err(DclError::Evaluation("no jointly valid depth pixels".into()));
        }
        let n = self.n as f64;
        let mse = self.sq / n;
        let d_max = self.d_max.unwrap_or(1.0);
        let mut metrics = BTreeMap::new();
        let mut put = |k: &str, value: f64, n_pixels: u64| {
            metrics.insert(k.to_string(), MetricValue { value, n_pixels });
        };
        put("rmse", mse.sqrt(), self.n);
        put("rmse_log", (self.log_sq / n).sqrt(), self.n);
        put("mae", self.abs / n, self.n);
        let psnr = if mse == 0.0 { f64::INFINITY } else { 10.0 * (d_max * d_max / mse).log10() };
        put("psnr", psnr, self.n);
        if self.ssim_n > 0 {
            put("ssim", self.ssim_sum / self.ssim_n as f64, self.ssim_n);
        }
        let mut provenance = provenance;
        provenance.details.insert("psnr_peak_m".into(), d_max.into());
        provenance.details.insert(
            "ssim_window".into(),
            serde_json::json!({ "size": self.window.size, "sigma": self.window.sigma }),
        );
        Ok(MetricReport { metrics, provenance })
    }
}

/// Depth metrics of a single pair with the default SSIM window.
pub fn depth_metrics(pred: &DepthMap, gt: &DepthMap) -> Result<MetricReport> {
    depth_metrics_with(pred, gt, SsimWindow::default())
}

pub fn depth_metrics_with(pred: &DepthMap, gt: &DepthMap, window: SsimWindow) -> Result<MetricReport> {
    let mut acc = DepthAccumulator::new(window);
    acc.add(pred, gt)?;
    acc.finish(Provenance::default())
}

/// Angle in degrees between two unit vectors, exactly zero for equal ones.
pub fn angle_deg(a: [f32; 3], b: [f32; 3]) -> f64 {
    let a = a.map(f64::from);
    let b = b.map(f64::from);
    let dot = a[0] * b[0] + a[1] * b[1] + a[2] * b[2];
    let cross = [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]];
    let sin = (cross[0] * cross[0] + cross[1] * cross[1] + cross[2] * cross[2]).sqrt();
    sin.atan2(dot).to_degrees()
}

/// Pooled angular errors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct NormalAccumulator {
    angles: Vec<f64>,
}

impl NormalAccumulator {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, pred: &NormalMap, gt: &NormalMap) -> Result<()> {
        if (pred.width(), pred.height()) != (gt.width(), gt.height()) {
            return Err(DclError::Evaluation("normal maps differ in size".into()));
        }
        for i in 0..gt.values().len() {
            if pred.is_valid(i) && gt.is_valid(i) {
                self.angles.push(angle_deg(pred.values()[i], gt.values()[i]));
            }
        }
        Ok(())
    }

    /// Raw unit predictions, compared wherever the ground truth is valid.
    pub fn add_vectors(&mut self, pred: &[[f32; 3]], gt: &NormalMap) -> Result<()> {
        if pred.len() != gt.values().len() {
            return Err(DclError::Evaluation("normal prediction size mismatch".into()));
        }
        for (i, p) in pred.iter().enumerate() {
            if gt.is_valid(i) {
                self.angles.push(angle_deg(*p, gt.values()[i]));
            }
        }
        Ok(())
    }

    pub fn angles(&self) -> &[f64] {
        &self.angles
    }

    pub fn finish(&self, provenance: Provenance) -> Result<MetricReport> {
        if self.angles.is_empty() {
            return Err(DclError::Evaluation("no jointly valid normals".into()));
        }
        let n = self.angles.len();
        let mut sorted = self.angles.clone();
        sorted.sort_by(f64::total_cmp);
        let median = if n % 2 == 1 {
            sorted[n / 2]
        } else {
            0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
        };
        let mean = sorted.iter().sum::<f64>() / n as f64;
        let mut metrics = BTreeMap::new();
        let count = n as u64;
        metrics.insert(
            "median_deg".into(),
            MetricValue {
                value: median,
                n_pixels: count,
            },
        );
        metrics.insert(
            "mean_deg".into(),
            MetricValue {
                value: mean,
                n_pixels: count,
            },
        );
        for t in ANGLE_THRESHOLDS_DEG {
            let within = sorted.partition_point(|&a| a <= t);
            metrics.insert(
                format!("within_{t}"),
                MetricValue {
                    value: within as f64 / n as f64,
                    n_pixels: count,
                },
            );
        }
        Ok(MetricReport { metrics, provenance })
    }
}

pub fn normal_metrics(pred: &NormalMap, gt: &NormalMap) -> Result<MetricReport> {
    let mut acc = NormalAccumulator::new();
    acc.add(pred, gt)?;
    acc.finish(Provenance::default())
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

/// One row per report, labelled by its method, one column per metric in
/// sorted name order. All reports must carry the same metric names.
pub fn reports_to_csv(reports: &[MetricReport]) -> Result<String> {
    let first = reports
        .first()
        .ok_or_else(|| DclError::Config("no metric reports given".into()))?;
    let keys: Vec<&String> = first.metrics.keys().collect();
    for r in &reports[1..] {
        let other: Vec<&String> = r.metrics.keys().collect();
        if other != keys {
            return Err(DclError::Config(format!(
                "conflicting metric keys: {:?} vs {:?}",
                keys, other
            )));
        }
    }
    let mut out = String::from("method");
    for k in &keys {
        out.push(',');
        out.push_str(k);
    }
    out.push('\n');
    for r in reports {
        out.push_str(&csv_field(&r.provenance.method));
        for k in &keys {
            let v = r.metrics[*k].value;
            out.push(',');
            if v == f64::INFINITY {
                out.push_str("inf");
            } else {
                out.push_str(&format!("{v}"));
            }
        }
        out.push('\n');
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn depth(values: Vec<f32>, w: usize) -> DepthMap {
        DepthMap::new(w, values.len() / w, values, 10.0).unwrap()
    }

    #[test]
    fn identical_depth_is_perfect() {
        let d = depth((0..256).map(|i| 1.0 + (i % 17) as f32 * 0.1).collect(), 16);
        let r = depth_metrics(&d, &d).unwrap();
        assert_eq!(r.get("rmse"), Some(0.0));
        assert_eq!(r.get("mae"), Some(0.0));
        assert_eq!(r.get("rmse_log"), Some(0.0));
        assert_eq!(r.get("psnr"), Some(f64::INFINITY));
        assert!((r.get("ssim").unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(r.metrics["ssim"].n_pixels, 36);
    }

    #[test]
    fn constant_offset() {
        let gt = depth(vec![2.0; 64], 8);
        let pred = depth(vec![2.1; 64], 8);
        let r = depth_metrics(&pred, &gt).unwrap();
        let e = (2.1f32 - 2.0f32) as f64;
        assert!((r.get("mae").unwrap() - e).abs() < 1e-12);
        assert!((r.get("rmse").unwrap() - e).abs() < 1e-12);
        let psnr = 10.0 * (100.0 / (e * e)).log10();
        assert!((r.get("psnr").unwrap() - psnr).abs() < 1e-9);
        assert!(!r.metrics.contains_key("ssim"));
    }

    #[test]
    fn holes_are_excluded() {
        let mut g = vec![1.0; 64];
        g[1] = 0.0;
        let gt = depth(g, 8);
        let mut p = gt.values().to_vec();
        p[1] = 9.0;
        p[2] = 0.0;
        let r = depth_metrics(&depth(p, 8), &gt).unwrap();
        assert_eq!(r.get("rmse"), Some(0.0));
        assert_eq!(r.metrics["rmse"].n_pixels, 62);
        let empty = depth(vec![0.0; 64], 8);
        assert!(matches!(depth_metrics(&empty, &gt), Err(DclError::Evaluation(_))));
    }

    #[test]
    fn two_pixel_angles() {
        let up = [0.0, 0.0, -1.0];
        // the z component is rounded away from zero so that the f32 angle does
        // not exceed its nominal value
        let rot = |deg: f64| {
            let r = deg.to_radians();
            let z = r.cos() as f32;
            let z = if (z as f64) < r.cos() { z.next_up() } else { z };
            [r.sin() as f32, 0.0, -z]
        };
        let gt = NormalMap::new(1, 2, vec![up, up]).unwrap();
        let pred = NormalMap::new(1, 2, vec![rot(30.0), rot(10.0)]).unwrap();
        let r = normal_metrics(&pred, &gt).unwrap();
        assert!((r.get("median_deg").unwrap() - 20.0).abs() < 1e-4);
        assert!((r.get("mean_deg").unwrap() - 20.0).abs() < 1e-4);
        assert_eq!(r.get("within_11.25"), Some(0.5));
        assert_eq!(r.get("within_30"), Some(1.0));
    }

    #[test]
    fn clamp_and_orthogonal_cases() {
        assert_eq!(angle_deg([0.0, 0.0, -1.0], [0.0, 0.0, -1.0000001]), 0.0);
        let gt = NormalMap::new(1, 1, vec![[0.0, 0.0, -1.0]]).unwrap();
        let pred = NormalMap::new(1, 1, vec![[1.0, 0.0, 0.0]]).unwrap();
        let r = normal_metrics(&pred, &gt).unwrap();
        assert!((r.get("mean_deg").unwrap() - 90.0).abs() < 1e-9);
        assert_eq!(r.get("within_30"), Some(0.0));
    }

    #[test]
    fn report_json_round_trip_with_inf() {
        let d = depth(vec![1.5; 64], 8);
        let mut r = depth_metrics(&d, &d).unwrap();
        r.provenance.method = "identity".into();
        let text = r.to_json().unwrap();
        assert!(text.contains("\"inf\""));
        let back = MetricReport::from_json(&text).unwrap();
        assert_eq!(back, r);
        back.check().unwrap();
    }

    #[test]
    fn csv_rows_and_key_conflicts() {
        let d = depth(vec![1.5; 64], 8);
        let mut a = depth_metrics(&d, &d).unwrap();
        a.provenance.method = "a".into();
        let mut b = a.clone();
        b.provenance.method = "b".into();
        let csv = reports_to_csv(&[a.clone(), b]).unwrap();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "method,mae,psnr,rmse,rmse_log");
        assert_eq!(lines.len(), 3);
        assert!(lines[1].starts_with("a,0,inf,"));
        let n = normal_metrics(
            &NormalMap::new(1, 1, vec![[0.0, 0.0, -1.0]]).unwrap(),
            &NormalMap::new(1, 1, vec![[0.0, 0.0, -1.0]]).unwrap(),
        )
        .unwrap();
        assert!(matches!(reports_to_csv(&[a, n]), Err(DclError::Config(_))));
        assert!(matches!(reports_to_csv(&[]), Err(DclError::Config(_))));
    }
}
