use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{CsadError, Result};

/// Write via a sibling temp file and rename, so readers never observe a
/// half-written file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir).map_err(|e| CsadError::io(dir, e))?;
        }
    }
    let file_name = path
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();
    let tmp = path.with_file_name(format!(".{file_name}.tmp{}", std::process::id()));
    {
        let mut f = fs::File::create(&tmp).map_err(|e| CsadError::io(&tmp, e))?;
        f.write_all(bytes).map_err(|e| CsadError::io(&tmp, e))?;
        f.sync_all().map_err(|e| CsadError::io(&tmp, e))?;
    }
    fs::rename(&tmp, path).map_err(|e| CsadError::io(path, e))
}
