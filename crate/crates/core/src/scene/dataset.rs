use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{apply_sensor_noise, generate_scene, render, DomainConfig, NoiseModel, Sample};
use crate::depth::{
    read_depth, read_normals, read_rgb, write_depth, write_normals, write_rgb, CameraIntrinsics, Domain,
};
use crate::depth::io::{read_json, write_json};
use crate::error::{DclError, Result};
use crate::seed::{derive_seed, tag};

pub const MANIFEST_FILE: &str = "manifest.json";

/// Disjoint sample streams: synthesis training, task training, validation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Synthesis,
    Task,
    Validation,
}

impl std::str::FromStr for Split {
    type Err = DclError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "synthesis" => Ok(Split::Synthesis),
            "task" => Ok(Split::Task),
            "validation" => Ok(Split::Validation),
            other => Err(DclError::Usage(format!("unknown split {other:?} (synthesis|task|validation)"))),
        }
    }
}

impl Split {
    fn label(self) -> &'static str {
        match self {
            Split::Synthesis => "synthesis",
            Split::Task => "task",
            Split::Validation => "validation",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub depth: String,
    pub rgb: String,
    pub normals: String,
    pub clean_depth: String,
    pub intrinsics: CameraIntrinsics,
    /// Identity of the underlying scene; shared by every derived dataset.
    pub key: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub domain: Domain,
    pub count: usize,
    pub seed: u64,
    pub split: Split,
    /// `rendered`, `simulated` or `synthesized`.
    pub source: String,
    pub width: usize,
    pub height: usize,
    pub d_max: f32,
    pub scene_config: Option<DomainConfig>,
    pub noise_model: Option<NoiseModel>,
    pub entries: Vec<ManifestEntry>,
    /// Directory the entry paths are relative to.
    #[serde(skip)]
    pub root: PathBuf,
}

impl Manifest {
    pub fn path_of(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    pub fn keys(&self) -> Vec<u64> {
        self.entries.iter().map(|e| e.key).collect()
    }
}

pub fn sample_key(seed: u64, domain: Domain, split: Split, index: usize) -> u64 {
    derive_seed(seed, &[tag(&domain.to_string()), tag(split.label()), index as u64])
}

fn entry_names(index: usize) -> [String; 4] {
    [
        format!("{index:05}_depth.pgm"),
        format!("{index:05}_rgb.ppm"),
        format!("{index:05}_normals.nrm"),
        format!("{index:05}_clean.pgm"),
    ]
}

fn render_entry(cfg: &DomainConfig, key: u64) -> Result<Sample> {
    let scene = generate_scene(cfg, derive_seed(key, &[tag("scene")]))?;
    render(&scene, &cfg.intrinsics(), cfg.width, cfg.height, cfg.d_max)
}

fn write_sample(dir: &Path, index: usize, s: &Sample, domain: Domain, key: u64) -> Result<ManifestEntry> {
    let [depth, rgb, normals, clean] = entry_names(index);
    write_depth(&dir.join(&depth), &s.depth, &s.intrinsics, domain, key)?;
    write_rgb(&dir.join(&rgb), &s.rgb)?;
    write_normals(&dir.join(&normals), &s.normals)?;
    write_depth(&dir.join(&clean), &s.clean_depth, &s.intrinsics, domain, key)?;
    Ok(ManifestEntry {
        depth,
        rgb,
        normals,
        clean_depth: clean,
        intrinsics: s.intrinsics,
        key,
    })
}

/// Render `count` samples of one domain and split. Real-domain samples are
/// corrupted by `nm`; synthetic samples stay clean.
pub fn build_dataset(
    cfg: &DomainConfig,
    nm: &NoiseModel,
    split: Split,
    count: usize,
    seed: u64,
    out_dir: &Path,
) -> Result<Manifest> {
    cfg.validate()?;
    nm.validate()?;
    fs::create_dir_all(out_dir).map_err(|e| DclError::io(out_dir, e))?;
    let mut entries = Vec::with_capacity(count);
    for index in 0..count {
        let key = sample_key(seed, cfg.domain, split, index);
        let clean = render_entry(cfg, key)?;
        let sample = match cfg.domain {
            Domain::Synth => clean,
            Domain::Real => apply_sensor_noise(&clean, nm, derive_seed(key, &[tag("noise")]))?,
        };
        entries.push(write_sample(out_dir, index, &sample, cfg.domain, key)?);
    }
    let manifest = Manifest {
        domain: cfg.domain,
        count,
        seed,
        split,
        source: "rendered".into(),
        width: cfg.width,
        height: cfg.height,
        d_max: cfg.d_max,
        scene_config: Some(cfg.clone()),
        noise_model: (cfg.domain == Domain::Real).then(|| nm.clone()),
        entries,
        root: out_dir.to_path_buf(),
    };
    write_manifest(&manifest, out_dir)?;
    Ok(manifest)
}

/// Simulation baseline: re-render every scene of a clean rendered manifest
/// and corrupt it with `nm`. Labels are copied byte for byte.
pub fn simulate_dataset(clean: &Manifest, nm: &NoiseModel, seed: u64, out_dir: &Path) -> Result<Manifest> {
    nm.validate()?;
    let cfg = clean
        .scene_config
        .as_ref()
        .filter(|_| clean.source == "rendered")
        .ok_or_else(|| DclError::Data("simulation needs a rendered manifest with its scene config".into()))?;
    fs::create_dir_all(out_dir).map_err(|e| DclError::io(out_dir, e))?;
    let mut entries = Vec::with_capacity(clean.entries.len());
    for (index, entry) in clean.entries.iter().enumerate() {
        let mut s = render_entry(cfg, entry.key)?;
        let (stored, _) = read_depth(&clean.path_of(&entry.clean_depth))?;
        if stored != s.clean_depth.quantized() {
            return Err(DclError::Data(format!(
                "entry {index}: stored clean depth does not match its re-rendered scene"
            )));
        }
        s = apply_sensor_noise(&s, nm, derive_seed(seed, &[entry.key, tag("simulate")]))?;
        let [depth, rgb, normals, clean_name] = entry_names(index);
        write_depth(&out_dir.join(&depth), &s.depth, &s.intrinsics, clean.domain, entry.key)?;
        copy_labels(clean, entry, out_dir, &rgb, &normals, &clean_name)?;
        entries.push(ManifestEntry {
            depth,
            rgb,
            normals,
            clean_depth: clean_name,
            intrinsics: entry.intrinsics,
            key: entry.key,
        });
    }
    let manifest = Manifest {
        source: "simulated".into(),
        seed,
        noise_model: Some(nm.clone()),
        entries,
        root: out_dir.to_path_buf(),
        count: clean.entries.len(),
        ..clean.clone()
    };
    write_manifest(&manifest, out_dir)?;
    Ok(manifest)
}

/// Copy the rgb, normal and clean-depth files of `entry` into `out_dir`.
pub(crate) fn copy_labels(
    from: &Manifest,
    entry: &ManifestEntry,
    out_dir: &Path,
    rgb: &str,
    normals: &str,
    clean: &str,
) -> Result<()> {
    let copy = |src: PathBuf, dst: PathBuf| fs::copy(&src, &dst).map(|_| ()).map_err(|e| DclError::io(src, e));
    copy(from.path_of(&entry.rgb), out_dir.join(rgb))?;
    copy(from.path_of(&entry.normals), out_dir.join(normals))?;
    copy(from.path_of(&entry.clean_depth), out_dir.join(clean))?;
    let side = |p: PathBuf| crate::depth::sidecar_path(&p);
    copy(side(from.path_of(&entry.clean_depth)), side(out_dir.join(clean)))
}

pub fn write_manifest(m: &Manifest, out_dir: &Path) -> Result<()> {
    write_json(&out_dir.join(MANIFEST_FILE), m)
}

/// Accepts the manifest file itself or the directory holding it.
pub fn load_manifest(path: &Path) -> Result<Manifest> {
    let file = if path.is_dir() { path.join(MANIFEST_FILE) } else { path.to_path_buf() };
    let mut m: Manifest = read_json(&file)?;
    if m.entries.len() != m.count {
        return Err(DclError::format(
            &file,
            format!("count {} but {} entries", m.count, m.entries.len()),
        ));
    }
    m.root = file.parent().map(Path::to_path_buf).unwrap_or_default();
    Ok(m)
}

/// Read every entry back; specularity is not stored and comes back `None`.
pub fn load_samples(m: &Manifest) -> Result<Vec<Sample>> {
    m.entries
        .iter()
        .map(|e| {
            let (depth, intrinsics) = read_depth(&m.path_of(&e.depth))?;
            let (clean_depth, _) = read_depth(&m.path_of(&e.clean_depth))?;
            let normals = read_normals(&m.path_of(&e.normals))?;
            let rgb = read_rgb(&m.path_of(&e.rgb))?;
            let dims = |w: usize, h: usize| (w, h) == (m.width, m.height);
            if !(dims(depth.width(), depth.height())
                && dims(clean_depth.width(), clean_depth.height())
                && dims(normals.width(), normals.height())
                && dims(rgb.width(), rgb.height()))
            {
                return Err(DclError::Data(format!("{}: raster size differs from the manifest", e.depth)));
            }
            Ok(Sample {
                depth,
                clean_depth,
                normals,
                rgb,
                intrinsics,
                specularity: None,
            })
        })
        .collect()
}
