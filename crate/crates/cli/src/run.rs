use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::Serialize;

pub const EXIT_FAILURE: u8 = 1;
pub const EXIT_BAD_INPUT: u8 = 2;
pub const EXIT_EMPTY: u8 = 3;

#[derive(Debug)]
pub struct Failure {
    pub code: u8,
    pub error: anyhow::Error,
}

impl Failure {
    pub fn new(code: u8, error: impl Into<anyhow::Error>) -> Self {
        Failure { code, error: error.into() }
    }

    pub fn bad_input(error: impl Into<anyhow::Error>) -> Self {
        Failure::new(EXIT_BAD_INPUT, error)
    }
}

impl From<io::Error> for Failure {
    fn from(e: io::Error) -> Self {
        Failure::new(EXIT_FAILURE, e)
    }
}

pub type CmdResult<T> = Result<T, Failure>;

fn unix_ms() -> u128 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_millis())
}

/// Record of one invocation, written on success and on failure.
#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: &'static str,
    pub tool_version: &'static str,
    pub inputs: Vec<PathBuf>,
    pub seed: Option<u64>,
    pub parameters: serde_json::Value,
    pub started_unix_ms: u128,
    pub finished_unix_ms: u128,
    pub exit_code: u8,
    pub error: Option<String>,
    pub outputs: Vec<PathBuf>,
}

impl RunManifest {
    pub fn start(command: &'static str, inputs: Vec<PathBuf>, seed: Option<u64>, parameters: serde_json::Value) -> Self {
        RunManifest {
            command,
            tool_version: env!("CARGO_PKG_VERSION"),
            inputs,
            seed,
            parameters,
            started_unix_ms: unix_ms(),
            finished_unix_ms: 0,
            exit_code: 0,
            error: None,
            outputs: Vec::new(),
        }
    }

    pub fn finish(&mut self, result: &CmdResult<Vec<PathBuf>>) {
        self.finished_unix_ms = unix_ms();
        match result {
            Ok(outputs) => self.outputs = outputs.clone(),
            Err(f) => {
                self.exit_code = f.code;
                self.error = Some(format!("{:#}", f.error));
            }
        }
    }

    pub fn write(&self, path: &Path) -> io::Result<()> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir)?;
        }
        fs::write(path, serde_json::to_vec_pretty(self)?)
    }
}

fn partial_name(path: &Path) -> PathBuf {
    let mut name = path.file_name().unwrap_or_default().to_os_string();
    name.push(".partial");
    path.with_file_name(name)
}

/// Output files are written under a `.partial` name and renamed into place
/// only by [`Staged::commit`].
#[derive(Debug, Default)]
pub struct Staged {
    files: Vec<(PathBuf, PathBuf)>,
}

impl Staged {
    pub fn write(&mut self, path: &Path, bytes: &[u8]) -> io::Result<()> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir)?;
        }
        let tmp = partial_name(path);
        fs::write(&tmp, bytes)?;
        self.files.push((tmp, path.to_path_buf()));
        Ok(())
    }

    pub fn commit(self) -> io::Result<Vec<PathBuf>> {
        let mut done = Vec::with_capacity(self.files.len());
        for (tmp, path) in self.files {
            fs::rename(&tmp, &path)?;
            done.push(path);
        }
        Ok(done)
    }
}

/// Appends `suffix` to the full file name: `a/b.cfg` -> `a/b.cfg.trace.json`.
pub fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let mut name = path.file_name().unwrap_or_default().to_os_string();
    name.push(suffix);
    path.with_file_name(name)
}

pub fn parse_split(name: &str) -> CmdResult<lesionkit::ingest::Split> {
    lesionkit::ingest::Split::from_name(name)
        .ok_or_else(|| Failure::bad_input(anyhow::anyhow!("unknown split {name:?}; use train, val or test")))
}
