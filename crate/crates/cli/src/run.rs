//! Run manifests, input hashing and JSON config layering.

use std::fs;
use std::path::{Path, PathBuf};

use dcl_core::{DclError, Result};
use serde::{de::DeserializeOwned, Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub const RUN_MANIFEST: &str = "run_manifest.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub args: Vec<String>,
    pub config: serde_json::Value,
    pub seed: u64,
    pub inputs: Vec<PathBuf>,
    /// `sha256:` digest over every input file, see [`hash_inputs`].
    pub input_hash: String,
    /// Produced files, relative to the manifest's directory.
    pub artifacts: Vec<String>,
}

fn collect_files(root: &Path, rel: &Path, out: &mut Vec<(String, PathBuf)>) -> Result<()> {
    let path = if rel.as_os_str().is_empty() { root.to_path_buf() } else { root.join(rel) };
    let meta = fs::metadata(&path).map_err(|e| io(&path, e))?;
    if meta.is_dir() {
        let mut names: Vec<_> = fs::read_dir(&path)
            .map_err(|e| io(&path, e))?
            .map(|e| e.map(|e| e.file_name()).map_err(|err| io(&path, err)))
            .collect::<Result<_>>()?;
        names.sort();
        for n in names {
            collect_files(root, &rel.join(n), out)?;
        }
    } else {
        out.push((rel.to_string_lossy().replace('\\', "/"), path));
    }
    Ok(())
}

fn io(path: &Path, e: std::io::Error) -> DclError {
    DclError::Data(format!("{}: {e}", path.display()))
}

/// Content hash over files and directory trees. Each file contributes its
/// path relative to the named input, its length and its bytes, in sorted
/// order, so the digest is independent of where the inputs live.
pub fn hash_inputs(inputs: &[PathBuf]) -> Result<String> {
    let mut h = Sha256::new();
    for (i, input) in inputs.iter().enumerate() {
        let mut files = Vec::new();
        collect_files(input, Path::new(""), &mut files)?;
        h.update(format!("input {i}\n").as_bytes());
        for (name, path) in files {
            let bytes = fs::read(&path).map_err(|e| io(&path, e))?;
            h.update(format!("{name}\n{}\n", bytes.len()).as_bytes());
            h.update(&bytes);
        }
    }
    let digest = h.finalize();
    Ok(format!("sha256:{}", digest.iter().map(|b| format!("{b:02x}")).collect::<String>()))
}

/// Where the manifest of an output lives: inside an output directory, or
/// beside an output file as `<name>.run.json`.
pub fn manifest_path(output: &Path) -> PathBuf {
    if output.is_dir() {
        output.join(RUN_MANIFEST)
    } else {
        let name = output.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
        output.with_file_name(format!("{name}.run.json"))
    }
}

impl RunManifest {
    pub fn write(&self, output: &Path) -> Result<PathBuf> {
        let path = manifest_path(output);
        let mut text = serde_json::to_string_pretty(self).map_err(|e| DclError::Data(e.to_string()))?;
        text.push('\n');
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, text).map_err(|e| io(&tmp, e))?;
        fs::rename(&tmp, &path).map_err(|e| io(&path, e))?;
        Ok(path)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| io(path, e))?;
        serde_json::from_str(&text).map_err(|e| DclError::Data(format!("{}: {e}", path.display())))
    }

    /// Recompute the input digest and compare.
    pub fn verify(&self) -> Result<bool> {
        Ok(hash_inputs(&self.inputs)? == self.input_hash)
    }
}

fn merge(base: &mut serde_json::Value, over: serde_json::Value) {
    match (base, over) {
        (serde_json::Value::Object(b), serde_json::Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

/// `defaults` overlaid with the JSON object in `file`; unknown keys and
/// type mismatches are configuration errors.
pub fn layered_config<T: Serialize + DeserializeOwned>(defaults: &T, file: Option<&Path>) -> Result<(T, serde_json::Value)> {
    let mut value = serde_json::to_value(defaults).map_err(|e| DclError::Config(e.to_string()))?;
    let mut overrides = serde_json::Value::Object(Default::default());
    if let Some(path) = file {
        let text = fs::read_to_string(path).map_err(|e| io(path, e))?;
        overrides = serde_json::from_str(&text).map_err(|e| DclError::Config(format!("{}: {e}", path.display())))?;
        if !overrides.is_object() {
            return Err(DclError::Config(format!("{}: expected a JSON object", path.display())));
        }
        merge(&mut value, overrides.clone());
    }
    let cfg = serde_json::from_value(value).map_err(|e| DclError::Config(format!("config: {e}")))?;
    Ok((cfg, overrides))
}
