use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::Context;
use nalgebra::DMatrix;
use serde::Serialize;
use serde_json::Value;

/// An output directory that exists only once inputs have been validated.
pub struct RunDir {
    root: PathBuf,
    written: Vec<String>,
    started: Instant,
}

impl RunDir {
    pub fn create(root: &Path, started: Instant) -> anyhow::Result<Self> {
        fs::create_dir_all(root).with_context(|| format!("creating {}", root.display()))?;
        Ok(Self {
            root: root.to_path_buf(),
            written: Vec::new(),
            started,
        })
    }

    pub fn write(&mut self, name: &str, contents: impl AsRef<[u8]>) -> anyhow::Result<()> {
        let path = self.root.join(name);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        fs::write(&path, contents).with_context(|| format!("writing {}", path.display()))?;
        if !self.written.iter().any(|w| w == name) {
            self.written.push(name.to_string());
        }
        Ok(())
    }

    pub fn write_matrix(&mut self, name: &str, m: &DMatrix<f64>) -> anyhow::Result<()> {
        self.write(name, plq_learn::io::format_matrix_csv(m))
    }

    pub fn write_json(&mut self, name: &str, value: &impl Serialize) -> anyhow::Result<()> {
        let mut text = serde_json::to_string_pretty(value)?;
        text.push('\n');
        self.write(name, text)
    }

    /// Writes `manifest.json`: the command line, resolved configuration,
    /// seeds, versions and wall time.
    pub fn finish(mut self, command: &str, config: Value, seeds: BTreeMap<String, u64>, extra: Value, threads: usize) -> anyhow::Result<()> {
        let manifest = serde_json::json!({
            "tool": "plqlearn",
            "version": env!("CARGO_PKG_VERSION"),
            "command": command,
            "argv": std::env::args().skip(1).collect::<Vec<_>>(),
            "config": config,
            "seeds": seeds,
            "threads": threads,
            "wall_time_secs": self.started.elapsed().as_secs_f64(),
            "outputs": self.written.clone(),
            "result": extra,
        });
        self.write_json("manifest.json", &manifest)
    }
}

/// Plot-ready convergence curve: `iteration,objective,series`.
pub fn history_csv(history: &[f64], series: &str) -> String {
    let mut out = String::from("iteration,objective,series\n");
    for (i, v) in history.iter().enumerate() {
        out.push_str(&format!("{i},{v},{series}\n"));
    }
    out
}
