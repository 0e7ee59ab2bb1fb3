//! Run manifests: everything needed to replay a command on the same build.

use std::path::Path;
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use anyhow::Result;
use layoutguide::config::RunConfig;
use layoutguide::image_io::write_atomic;
use layoutguide::rng::RNG_ALGORITHM;
use serde::Serialize;

#[derive(Debug, Clone, Serialize)]
pub struct BuildInfo {
    pub package: &'static str,
    pub version: &'static str,
    pub profile: &'static str,
    pub target: String,
    pub rng: &'static str,
}

impl BuildInfo {
    pub fn current() -> Self {
        Self {
            package: env!("CARGO_PKG_NAME"),
            version: env!("CARGO_PKG_VERSION"),
            profile: if cfg!(debug_assertions) { "debug" } else { "release" },
            target: format!("{}-{}", std::env::consts::ARCH, std::env::consts::OS),
            rng: RNG_ALGORITHM,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub argv: Vec<String>,
    pub config: RunConfig,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub weights_checksum: Option<String>,
    pub seeds: Vec<u64>,
    pub outputs: Vec<String>,
    pub build: BuildInfo,
    pub threads: usize,
    pub started_unix: u64,
    pub wall_clock_secs: f64,
}

/// Collects manifest fields while a command runs.
pub struct ManifestBuilder {
    manifest: RunManifest,
    clock: Instant,
}

impl ManifestBuilder {
    pub fn start(command: &str, config: &RunConfig) -> Self {
        let started_unix = SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0);
        Self {
            manifest: RunManifest {
                command: command.into(),
                argv: std::env::args().collect(),
                config: config.clone(),
                weights_checksum: None,
                seeds: Vec::new(),
                outputs: Vec::new(),
                build: BuildInfo::current(),
                threads: rayon::current_num_threads(),
                started_unix,
                wall_clock_secs: 0.0,
            },
            clock: Instant::now(),
        }
    }

    pub fn weights(&mut self, checksum: String) -> &mut Self {
        self.manifest.weights_checksum = Some(checksum);
        self
    }

    pub fn seeds(&mut self, seeds: &[u64]) -> &mut Self {
        self.manifest.seeds = seeds.to_vec();
        self
    }

    pub fn output(&mut self, path: &Path) -> &mut Self {
        self.manifest.outputs.push(path.display().to_string());
        self
    }

    /// Writes `manifest.json` and `config.toml` into `dir`.
    pub fn finish(mut self, dir: &Path) -> Result<RunManifest> {
        self.manifest.wall_clock_secs = self.clock.elapsed().as_secs_f64();
        write_atomic(&dir.join("config.toml"), self.manifest.config.to_toml()?.as_bytes())?;
        write_atomic(
            &dir.join("manifest.json"),
            serde_json::to_string_pretty(&self.manifest)?.as_bytes(),
        )?;
        Ok(self.manifest)
    }
}
