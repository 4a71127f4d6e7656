//! CSV helpers. Every file written by the tool starts with one `#` comment
//! row naming the tool version and the resolved-config hash.

use std::fs::File;
use std::path::Path;

use crate::error::{Error, Result};

pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Provenance {
    pub config_hash: String,
}

impl Provenance {
    pub fn new(config_hash: impl Into<String>) -> Self {
        Self {
            config_hash: config_hash.into(),
        }
    }

    pub fn comment(&self) -> String {
        format!("# gfnact {} config={}", TOOL_VERSION, self.config_hash)
    }
}

pub fn create(path: &Path, provenance: &Provenance) -> Result<csv::Writer<File>> {
    use std::io::Write;
    let mut file = File::create(path).map_err(|e| Error::io(path, e))?;
    writeln!(file, "{}", provenance.comment()).map_err(|e| Error::io(path, e))?;
    Ok(csv::Writer::from_writer(file))
}

pub fn open(path: &Path) -> Result<csv::Reader<File>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    Ok(csv::ReaderBuilder::new().comment(Some(b'#')).from_reader(file))
}

/// The provenance comment of a file written by [`create`], if present.
pub fn read_provenance(path: &Path) -> Result<Option<Provenance>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let first = text.lines().next().unwrap_or_default();
    Ok(first
        .strip_prefix("# gfnact ")
        .and_then(|rest| rest.split_once(" config="))
        .map(|(_, hash)| Provenance::new(hash.trim())))
}

/// Formats an `f64` with the shortest representation that round-trips.
pub fn num(v: f64) -> String {
    format!("{v}")
}
