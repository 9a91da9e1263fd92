//! Per-run manifest written to the output directory before any work starts.

use std::fs;
use std::path::{Path, PathBuf};

use chrono::{SecondsFormat, Utc};
use serde::{Deserialize, Serialize};

use crate::exit::{CmdResult, Exit, Failure, OrExit};

pub const MANIFEST_FILE: &str = "run_manifest.json";

/// Revision tag of this build: the git commit when known at build time.
pub const REVISION: &str = match option_env!("SEGDG_REVISION") {
    Some(r) => r,
    None => concat!("v", env!("CARGO_PKG_VERSION")),
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    Running,
    Completed,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub run_id: String,
    pub command: String,
    pub config_path: PathBuf,
    pub config_hash: String,
    pub revision: String,
    pub out_dir: PathBuf,
    pub seed: u64,
    pub started_at: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub finished_at: Option<String>,
    pub status: RunStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

pub fn now() -> String {
    Utc::now().to_rfc3339_opts(SecondsFormat::Millis, true)
}

impl RunManifest {
    pub fn new(command: &str, config_path: &Path, config_hash: &str, out_dir: &Path, seed: u64) -> Self {
        let stamp = Utc::now().format("%Y%m%dT%H%M%S%3f");
        Self {
            run_id: format!("{stamp}-{}", &config_hash[..config_hash.len().min(8)]),
            command: command.to_string(),
            config_path: config_path.to_path_buf(),
            config_hash: config_hash.to_string(),
            revision: REVISION.to_string(),
            out_dir: out_dir.to_path_buf(),
            seed,
            started_at: now(),
            finished_at: None,
            status: RunStatus::Running,
            error: None,
        }
    }

    pub fn path(out_dir: &Path) -> PathBuf {
        out_dir.join(MANIFEST_FILE)
    }

    pub fn load(out_dir: &Path) -> CmdResult<Option<Self>> {
        let p = Self::path(out_dir);
        if !p.exists() {
            return Ok(None);
        }
        let text = fs::read_to_string(&p).or_exit(Exit::Other)?;
        serde_json::from_str(&text)
            .map(Some)
            .map_err(|e| Failure::new(Exit::Other, format!("{}: {e}", p.display())))
    }

    pub fn save(&self) -> CmdResult {
        fs::create_dir_all(&self.out_dir).or_exit(Exit::Other)?;
        let p = Self::path(&self.out_dir);
        let tmp = p.with_extension("json.tmp");
        fs::write(&tmp, serde_json::to_string_pretty(self).or_exit(Exit::Other)?).or_exit(Exit::Other)?;
        fs::rename(&tmp, &p).or_exit(Exit::Other)
    }

    pub fn finish(&mut self, status: RunStatus, error: Option<String>) -> CmdResult {
        self.status = status;
        self.error = error;
        self.finished_at = Some(now());
        self.save()
    }
}

/// Refuse to reuse an output directory that holds a completed or unfinished
/// run, unless forced. Failed runs may be retried.
pub fn claim_out_dir(out_dir: &Path, force: bool) -> CmdResult {
    if let Some(m) = RunManifest::load(out_dir)? {
        if !force && m.status != RunStatus::Failed {
            return Err(Failure::config(format!(
                "{} already holds run {} ({:?}); pass --force to overwrite or --resume to continue",
                out_dir.display(),
                m.run_id,
                m.status
            )));
        }
    }
    Ok(())
}
