//! Config loading, echo and run-log files.

use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use mergeforge::checkpoint::write_atomic;
use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{usage, CliError, CliResult};

/// Config file contents, or the type's defaults when no file is given.
pub fn load_config<T: DeserializeOwned + Default>(path: Option<&Path>) -> CliResult<T> {
    let Some(path) = path else {
        return Ok(T::default());
    };
    let text =
        std::fs::read_to_string(path).map_err(|e| usage(format!("cannot read config {}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| usage(format!("bad config {}: {e}", path.display())))
}

pub fn to_json<T: Serialize>(value: &T) -> Vec<u8> {
    let mut s = serde_json::to_string_pretty(value).expect("serializable");
    s.push('\n');
    s.into_bytes()
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    write_atomic(path, &to_json(value)).map_err(CliError::from)
}

/// `path` with `suffix` appended to its file name.
pub fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let mut name = path.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(suffix);
    path.with_file_name(name)
}

pub fn ensure_dir(dir: &Path) -> CliResult<()> {
    std::fs::create_dir_all(dir).map_err(|e| {
        CliError::Core(mergeforge::Error::Io {
            path: dir.to_path_buf(),
            source: e,
        })
    })
}

/// Wall-clock bookkeeping that only ever lands in the run log.
pub struct RunClock {
    started_unix_ms: u128,
    start: Instant,
}

impl RunClock {
    pub fn start() -> Self {
        Self {
            started_unix_ms: SystemTime::now()
                .duration_since(UNIX_EPOCH)
                .map(|d| d.as_millis())
                .unwrap_or(0),
            start: Instant::now(),
        }
    }

    pub fn log(&self, command: &str, detail: serde_json::Value) -> serde_json::Value {
        serde_json::json!({
            "command": command,
            "version": env!("CARGO_PKG_VERSION"),
            "started_unix_ms": self.started_unix_ms as u64,
            "elapsed_ms": self.start.elapsed().as_secs_f64() * 1e3,
            "detail": detail,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[derive(Debug, Default, serde::Deserialize, PartialEq)]
    #[serde(default, deny_unknown_fields)]
    struct Probe {
        lr: f64,
    }

    #[test]
    fn config_files_are_strict() {
        let dir = tempfile::tempdir().unwrap();
        let good = dir.path().join("good.json");
        std::fs::write(&good, r#"{"lr": 0.5}"#).unwrap();
        assert_eq!(load_config::<Probe>(Some(&good)).unwrap(), Probe { lr: 0.5 });
        let bad = dir.path().join("bad.json");
        std::fs::write(&bad, r#"{"lr": 0.5, "typo": 1}"#).unwrap();
        assert_eq!(load_config::<Probe>(Some(&bad)).unwrap_err().exit_code(), 2);
        assert_eq!(load_config::<Probe>(None).unwrap(), Probe::default());
    }

    #[test]
    fn sibling_appends_to_file_name() {
        assert_eq!(
            sibling(Path::new("out/m.ntc"), ".log.json"),
            PathBuf::from("out/m.ntc.log.json")
        );
    }
}
