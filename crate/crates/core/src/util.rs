use std::fs;
use std::path::Path;

use crate::error::{DclError, Result};

/// Write through a temporary sibling and rename into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = std::path::PathBuf::from(tmp);
    fs::write(&tmp, bytes).map_err(|e| DclError::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| DclError::io(path, e))
}
