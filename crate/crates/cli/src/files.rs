use std::collections::{BTreeMap, HashSet};
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::error::CliError;

/// Reads `id<TAB>text` lines. Blank lines are skipped; ids must be unique.
pub fn read_tsv(path: &Path) -> Result<Vec<(String, String)>, CliError> {
    let text = fs::read_to_string(path).map_err(|e| CliError::io(path.display(), e))?;
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.strip_suffix('\r').unwrap_or(line);
        if line.trim().is_empty() {
            continue;
        }
        let (id, body) = line
            .split_once('\t')
            .ok_or_else(|| CliError::format(format!("{}:{}: expected id<TAB>text", path.display(), i + 1)))?;
        if id.is_empty() {
            return Err(CliError::format(format!("{}:{}: empty id", path.display(), i + 1)));
        }
        if !seen.insert(id.to_string()) {
            return Err(CliError::validation(format!(
                "{}:{}: duplicate id {id:?}",
                path.display(),
                i + 1
            )));
        }
        out.push((id.to_string(), body.to_string()));
    }
    Ok(out)
}

pub fn write_tsv(path: &Path, rows: &[(String, String)]) -> Result<(), CliError> {
    write_with(path, |out| {
        for (id, text) in rows {
            writeln!(out, "{id}\t{text}")?;
        }
        Ok(())
    })
}

/// Creates `path` and hands a buffered writer to `f`.
pub fn write_with(path: &Path, f: impl FnOnce(&mut BufWriter<File>) -> std::io::Result<()>) -> Result<(), CliError> {
    let file = File::create(path).map_err(|e| CliError::io(path.display(), e))?;
    let mut out = BufWriter::new(file);
    f(&mut out)
        .and_then(|_| out.flush())
        .map_err(|e| CliError::io(path.display(), e))
}

/// Provenance record written next to every output as `<output>.manifest.json`.
#[derive(Debug, Serialize)]
pub struct RunManifest<C: Serialize> {
    pub tool: &'static str,
    pub version: &'static str,
    pub subcommand: &'static str,
    pub config: C,
    pub inputs: BTreeMap<&'static str, String>,
    pub outputs: BTreeMap<&'static str, String>,
    pub seed: Option<u64>,
}

impl<C: Serialize> RunManifest<C> {
    pub fn new(subcommand: &'static str, config: C, seed: Option<u64>) -> Self {
        Self {
            tool: "pqe",
            version: env!("CARGO_PKG_VERSION"),
            subcommand,
            config,
            inputs: BTreeMap::new(),
            outputs: BTreeMap::new(),
            seed,
        }
    }

    pub fn input(mut self, role: &'static str, path: &Path) -> Self {
        self.inputs.insert(role, path.display().to_string());
        self
    }

    pub fn output(mut self, role: &'static str, path: &Path) -> Self {
        self.outputs.insert(role, path.display().to_string());
        self
    }

    /// Writes one manifest beside each output.
    pub fn write(&self) -> Result<(), CliError> {
        let json = serde_json::to_string_pretty(self).map_err(|e| CliError::io("manifest", e))?;
        for path in self.outputs.values() {
            let target = manifest_path(Path::new(path));
            fs::write(&target, format!("{json}\n")).map_err(|e| CliError::io(target.display(), e))?;
        }
        Ok(())
    }
}

pub fn manifest_path(output: &Path) -> PathBuf {
    let mut name = output.as_os_str().to_owned();
    name.push(".manifest.json");
    PathBuf::from(name)
}
