//! Output directory with a reproducibility header on every artifact.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::config::ExperimentConfig;
use crate::CliError;

/// Writes CSV and JSON files under one directory. CSV files start with
/// `#` comment lines carrying the config hash, seed and versions.
pub struct Artifacts {
    dir: PathBuf,
    header: Vec<(String, String)>,
}

impl Artifacts {
    pub fn create(dir: &Path, cfg: &ExperimentConfig, command: &str) -> Result<Self, CliError> {
        std::fs::create_dir_all(dir)?;
        let header = vec![
            ("command".to_string(), command.to_string()),
            ("experiment".to_string(), serde_json::to_value(cfg.experiment)?.as_str().unwrap_or_default().to_string()),
            ("config_sha256".to_string(), cfg.hash()),
            ("seed".to_string(), cfg.seed.to_string()),
            ("datasched".to_string(), env!("CARGO_PKG_VERSION").to_string()),
        ];
        let out = Self { dir: dir.to_path_buf(), header };
        let mut meta = serde_json::Map::new();
        for (k, v) in &out.header {
            meta.insert(k.clone(), serde_json::Value::String(v.clone()));
        }
        meta.insert("config".to_string(), serde_json::to_value(cfg)?);
        out.write_json("metadata.json", &meta)?;
        Ok(out)
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn write<F>(&self, name: &str, body: F) -> Result<PathBuf, CliError>
    where
        F: FnOnce(&mut dyn Write) -> Result<(), CliError>,
    {
        let path = self.dir.join(name);
        let mut w = BufWriter::new(File::create(&path)?);
        for (k, v) in &self.header {
            writeln!(w, "# {k}: {v}")?;
        }
        body(&mut w)?;
        w.flush()?;
        Ok(path)
    }

    pub fn write_json<T: Serialize + ?Sized>(&self, name: &str, value: &T) -> Result<PathBuf, CliError> {
        let path = self.dir.join(name);
        let mut w = BufWriter::new(File::create(&path)?);
        serde_json::to_writer_pretty(&mut w, value)?;
        writeln!(w)?;
        w.flush()?;
        Ok(path)
    }
}
