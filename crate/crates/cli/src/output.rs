//! Output directory handling: locking, resolved config and report files.

use crate::config::RunConfig;
use crate::error::{CliError, CliResult};
use serde::Serialize;
use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use stereovae::checkpoint::sha256_hex;
use stereovae::Error;

const LOCK_FILE: &str = ".lock";

/// Exclusive claim on an output directory, released on drop.
#[derive(Debug)]
pub struct DirLock {
    path: PathBuf,
}

impl DirLock {
    pub fn acquire(dir: &Path) -> CliResult<Self> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(LOCK_FILE);
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                let _ = writeln!(f, "{}", std::process::id());
                Ok(Self { path })
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => {
                Err(CliError::Locked(dir.display().to_string()))
            }
            Err(e) => Err(Error::io(&path, e).into()),
        }
    }
}

impl Drop for DirLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

/// Git-style object hash: sha256 of `"blob <len>\0"` followed by the bytes.
pub fn content_hash(bytes: &[u8]) -> String {
    let mut data = format!("blob {}\0", bytes.len()).into_bytes();
    data.extend_from_slice(bytes);
    sha256_hex(&data)
}

pub fn to_json<T: Serialize>(value: &T) -> CliResult<String> {
    let mut s = serde_json::to_string_pretty(value).map_err(|e| Error::State(format!("serialisation: {e}")))?;
    s.push('\n');
    Ok(s)
}

pub fn write_text(path: &Path, text: &str) -> CliResult<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e).into())
}

/// Identity stamped on every output of a run.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Stamp {
    pub config_hash: String,
    pub seed: u64,
}

impl Stamp {
    /// Comment line that starts every CSV output.
    pub fn csv_header(&self) -> String {
        format!("# config_hash={} seed={}\n", self.config_hash, self.seed)
    }
}

/// Writes `<task>.config.json` and `<task>.config.sha256` and returns the
/// stamp for the run's other outputs.
pub fn write_resolved_config(config: &RunConfig) -> CliResult<Stamp> {
    let task = config.task.map_or("run", |t| t.name());
    let text = to_json(config)?;
    let hash = content_hash(text.as_bytes());
    let dir = config.output_dir();
    write_text(&dir.join(format!("{task}.config.json")), &text)?;
    write_text(&dir.join(format!("{task}.config.sha256")), &format!("{hash}\n"))?;
    Ok(Stamp {
        config_hash: hash,
        seed: config.seed,
    })
}

/// CSV data lines of `text`, without comment lines and the column header.
pub fn csv_rows(text: &str) -> impl Iterator<Item = Vec<&str>> {
    text.lines()
        .filter(|l| !l.starts_with('#') && !l.is_empty())
        .skip(1)
        .map(|l| l.split(',').collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hash_matches_git_object_framing() {
        // sha256 object id of the empty blob, as `git hash-object` prints it
        // in a sha256 repository.
        assert_eq!(
            content_hash(b""),
            "473a0f4c3be8a93681a267e3b1e9a7dcda1185436fe141f7749120a303721813"
        );
    }

    #[test]
    fn lock_is_exclusive_and_released() {
        let dir = tempfile::tempdir().unwrap();
        let a = DirLock::acquire(dir.path()).unwrap();
        assert!(matches!(DirLock::acquire(dir.path()), Err(CliError::Locked(_))));
        drop(a);
        assert!(DirLock::acquire(dir.path()).is_ok());
    }

    #[test]
    fn csv_rows_skip_comments_and_header() {
        let rows: Vec<Vec<&str>> = csv_rows("# x\na,b\n1,2\n3,4\n").collect();
        assert_eq!(rows, vec![vec!["1", "2"], vec!["3", "4"]]);
    }
}
