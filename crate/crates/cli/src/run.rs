//! Output directories and the run manifest.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use mbrw::{Error, Result};
use serde::Serialize;
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

fn unix_now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs())
}

#[derive(Clone, Debug, Serialize)]
pub struct InputFile {
    pub role: String,
    pub path: String,
    pub sha256: String,
}

#[derive(Clone, Debug, Serialize)]
pub struct OutputFile {
    pub file: String,
    pub sha256: String,
}

/// `manifest.json`: rewritten on every output so that an interrupted run
/// still lists what it produced, with `status` left at `incomplete`.
#[derive(Clone, Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    /// Parsed settings, minus the thread count and the output directory.
    pub settings: Value,
    pub inputs: Vec<InputFile>,
    pub seed: u64,
    pub threads: usize,
    pub out: String,
    pub started_unix: u64,
    pub finished_unix: Option<u64>,
    pub version: String,
    pub status: String,
    /// Hash of command, settings, inputs, seed and version. Every JSON
    /// output carries it; it does not depend on threads or time.
    pub manifest_hash: String,
    pub outputs: Vec<OutputFile>,
}

pub struct Run {
    dir: PathBuf,
    manifest: RunManifest,
}

impl Run {
    pub fn start(out: &Path, command: &str, settings: Value, inputs: Vec<InputFile>, seed: u64, threads: usize) -> Result<Run> {
        fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
        let version = env!("CARGO_PKG_VERSION").to_string();
        let id = json!({
            "command": command,
            "settings": settings,
            "inputs": inputs.iter().map(|i| (&i.role, &i.sha256)).collect::<Vec<_>>(),
            "seed": seed,
            "version": version,
        });
        let manifest = RunManifest {
            command: command.to_string(),
            settings,
            inputs,
            seed,
            threads,
            out: out.display().to_string(),
            started_unix: unix_now(),
            finished_unix: None,
            version,
            status: "incomplete".into(),
            manifest_hash: sha256_hex(id.to_string().as_bytes()),
            outputs: Vec::new(),
        };
        let run = Run { dir: out.to_path_buf(), manifest };
        run.write_manifest()?;
        Ok(run)
    }

    fn write_manifest(&self) -> Result<()> {
        let path = self.dir.join("manifest.json");
        let text = serde_json::to_string_pretty(&self.manifest)? + "\n";
        fs::write(&path, text).map_err(|e| Error::io(path, e))
    }

    pub fn write_text(&mut self, name: &str, text: &str) -> Result<()> {
        let path = self.dir.join(name);
        fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
        self.manifest.outputs.retain(|o| o.file != name);
        self.manifest.outputs.push(OutputFile {
            file: name.to_string(),
            sha256: sha256_hex(text.as_bytes()),
        });
        self.write_manifest()
    }

    /// Pretty JSON with `manifest_hash` added to top-level objects.
    pub fn write_json(&mut self, name: &str, mut value: Value) -> Result<()> {
        if let Value::Object(map) = &mut value {
            map.insert("manifest_hash".into(), Value::String(self.manifest.manifest_hash.clone()));
        }
        let text = serde_json::to_string_pretty(&value)? + "\n";
        self.write_text(name, &text)
    }

    pub fn finish(mut self) -> Result<()> {
        self.manifest.status = "complete".into();
        self.manifest.finished_unix = Some(unix_now());
        self.write_manifest()
    }
}

pub fn read_input(role: &str, path: &Path) -> Result<(String, InputFile)> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let file = InputFile {
        role: role.to_string(),
        path: path.display().to_string(),
        sha256: sha256_hex(text.as_bytes()),
    };
    Ok((text, file))
}
