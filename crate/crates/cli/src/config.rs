use std::fs;
use std::path::{Path, PathBuf};

use crossdesc_core::io::write_atomic;
use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::{CliError, Result};

/// Copies every `Some` flag over the matching run-config field.
macro_rules! overlay {
    ($run:expr, $args:expr; $($field:ident),* $(,)?) => {
        $(
            if let Some(v) = $args.$field.clone() {
                $run.$field = v.into();
            }
        )*
    };
}
pub(crate) use overlay;

/// Run config from `path`, or defaults. Unknown keys are usage errors.
pub fn load<C: DeserializeOwned + Default>(path: Option<&Path>) -> Result<C> {
    let Some(p) = path else {
        return Ok(C::default());
    };
    let bytes = fs::read(p).map_err(|e| CliError::Usage(format!("config {}: {e}", p.display())))?;
    serde_json::from_slice(&bytes).map_err(|e| CliError::Usage(format!("config {}: {e}", p.display())))
}

pub fn require<'a>(p: &'a Option<PathBuf>, what: &str) -> Result<&'a Path> {
    p.as_deref()
        .ok_or_else(|| CliError::Usage(format!("missing {what} (flag or config key)")))
}

/// Where the resolved config of a run writing `out` goes: `config.json`
/// inside an output directory, `<stem>.config.json` beside an output file.
pub fn snapshot_path(out: &Path, is_dir: bool) -> PathBuf {
    if is_dir {
        return out.join("config.json");
    }
    let stem = out.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "run".into());
    out.with_file_name(format!("{stem}.config.json"))
}

pub fn write_json<S: Serialize>(path: &Path, value: &S) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_atomic(path, text.as_bytes())?;
    Ok(())
}

pub fn snapshot<S: Serialize>(out: &Path, is_dir: bool, run: &S) -> Result<PathBuf> {
    let p = snapshot_path(out, is_dir);
    write_json(&p, run)?;
    Ok(p)
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    Ok(serde_json::from_slice(&fs::read(path)?)?)
}

/// Sibling path with `suffix` replacing the extension, e.g. the manifest
/// next to a record container.
pub fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    path.with_file_name(format!("{stem}{suffix}"))
}
