//! Error reporting and atomic output.

use std::fmt;
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use gapkit::embedstore::{read_normalized, PairedEmbeddingDataset};
use gapkit::fsutil::write_atomic;
use gapkit::GapError;
use serde::Serialize;

pub const EXIT_OK: i32 = 0;
pub const EXIT_VALIDATION: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;

#[derive(Debug)]
pub struct Failure {
    pub code: i32,
    pub message: String,
}

impl Failure {
    pub fn validation(message: impl Into<String>) -> Self {
        Failure {
            code: EXIT_VALIDATION,
            message: message.into(),
        }
    }

    pub fn runtime(message: impl Into<String>) -> Self {
        Failure {
            code: EXIT_RUNTIME,
            message: message.into(),
        }
    }

    fn context(mut self, what: impl fmt::Display) -> Self {
        self.message = format!("{what}: {}", self.message);
        self
    }

    pub fn with_path(self, path: &Path) -> Self {
        self.context(path.display())
    }
}

impl From<GapError> for Failure {
    fn from(e: GapError) -> Self {
        let code = if e.is_validation() { EXIT_VALIDATION } else { EXIT_RUNTIME };
        Failure {
            code,
            message: e.to_string(),
        }
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

pub type CliResult<T = ()> = Result<T, Failure>;

/// Loads a GAPEMB file with unit-normalized rows. A missing file is a usage
/// error; anything else keeps the library's classification.
pub fn load(path: &Path) -> CliResult<PairedEmbeddingDataset> {
    if !path.is_file() {
        return Err(Failure::validation(format!(
            "cannot open {}: no such file (check --data)",
            path.display()
        )));
    }
    read_normalized(path).map_err(|e| Failure::from(e).context(path.display()))
}

fn write_bytes(path: &Path, bytes: &[u8]) -> CliResult {
    write_atomic(path, bytes).map_err(|e| Failure::runtime(format!("cannot write {}: {e}", path.display())))
}

/// Pretty JSON to `out`, or to stdout when no path is given.
pub fn emit_json<T: Serialize>(value: &T, out: Option<&PathBuf>) -> CliResult {
    let mut bytes = serde_json::to_vec_pretty(value).map_err(|e| Failure::runtime(e.to_string()))?;
    bytes.push(b'\n');
    match out {
        Some(p) => write_bytes(p, &bytes),
        None => io::stdout()
            .lock()
            .write_all(&bytes)
            .map_err(|e| Failure::runtime(format!("cannot write to stdout: {e}"))),
    }
}

/// CSV with a header row, to `out` or stdout.
pub fn emit_csv(header: &[&str], rows: &[Vec<String>], out: Option<&PathBuf>) -> CliResult {
    let mut w = csv::Writer::from_writer(Vec::new());
    let fail = |e: csv::Error| Failure::runtime(format!("CSV encoding failed: {e}"));
    w.write_record(header).map_err(fail)?;
    for row in rows {
        w.write_record(row).map_err(fail)?;
    }
    let bytes = w.into_inner().map_err(|e| Failure::runtime(e.to_string()))?;
    match out {
        Some(p) => write_bytes(p, &bytes),
        None => io::stdout()
            .lock()
            .write_all(&bytes)
            .map_err(|e| Failure::runtime(format!("cannot write to stdout: {e}"))),
    }
}

/// Formats an optional float as a CSV cell; missing values stay empty.
pub fn cell(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// Stderr progress notes, shown with `-v`.
#[derive(Debug, Clone, Copy)]
pub struct Log {
    pub verbosity: i8,
}

impl Log {
    pub fn info(&self, msg: impl fmt::Display) {
        if self.verbosity >= 1 {
            eprintln!("gapctl: {msg}");
        }
    }

    pub fn warn(&self, msg: impl fmt::Display) {
        if self.verbosity >= 0 {
            eprintln!("gapctl: warning: {msg}");
        }
    }
}
