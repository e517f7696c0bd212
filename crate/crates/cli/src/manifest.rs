//! Run manifests: everything needed to repeat a command, written before the
//! command does any real work.

use serde::Serialize;
use std::collections::BTreeMap;
use std::path::Path;

#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: &'static str,
    pub version: &'static str,
    pub argv: Vec<String>,
    pub seeds: BTreeMap<&'static str, u64>,
    pub inputs: BTreeMap<&'static str, String>,
    pub outputs: BTreeMap<&'static str, String>,
    /// Fully resolved settings, defaults included.
    pub config: serde_json::Value,
    /// Worker threads requested through `CGP_THREADS` (0 = automatic).
    pub threads: usize,
}

impl RunManifest {
    pub fn new(command: &'static str, config: impl Serialize) -> Self {
        Self {
            command,
            version: env!("CARGO_PKG_VERSION"),
            argv: std::env::args().collect(),
            seeds: BTreeMap::new(),
            inputs: BTreeMap::new(),
            outputs: BTreeMap::new(),
            config: serde_json::to_value(config).expect("config serializes"),
            threads: cgp_core::evaluation::threads_from_env(),
        }
    }

    pub fn seed(mut self, name: &'static str, value: u64) -> Self {
        self.seeds.insert(name, value);
        self
    }

    pub fn input(mut self, name: &'static str, path: &Path) -> Self {
        self.inputs.insert(name, path.display().to_string());
        self
    }

    pub fn output(mut self, name: &'static str, path: &Path) -> Self {
        self.outputs.insert(name, path.display().to_string());
        self
    }

    pub fn write(&self, path: &Path) -> anyhow::Result<()> {
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        std::fs::write(path, text)?;
        Ok(())
    }
}
