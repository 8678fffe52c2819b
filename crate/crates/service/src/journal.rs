//! Append-only JSON-lines log of session mutations. Replaying it from the
//! top rebuilds every session, including refinement results, because
//! refinement is a pure function of the logged inputs.

use std::fs::{self, File, OpenOptions};
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::state::RefineOverrides;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum Event {
    SessionCreated {
        session_id: String,
        image_id: String,
    },
    Click {
        session_id: String,
        x: f64,
        y: f64,
        class_id: u32,
        sequence: u64,
    },
    Undo {
        session_id: String,
        sequence: u64,
    },
    Refine {
        session_id: String,
        #[serde(default, skip_serializing_if = "RefineOverrides::is_empty")]
        overrides: RefineOverrides,
    },
}

#[derive(Debug, Error)]
pub enum JournalError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("{path}:{line}: {source}")]
    Parse {
        path: PathBuf,
        line: usize,
        #[source]
        source: serde_json::Error,
    },
}

pub struct Journal {
    path: PathBuf,
    file: File,
}

impl Journal {
    /// Opens (creating if needed) the journal at `path` and returns the
    /// events already in it. A torn final line, left by a crash mid-write,
    /// is dropped; a bad line anywhere else is an error.
    pub fn open(path: &Path) -> Result<(Self, Vec<Event>), JournalError> {
        let io_err = |source| JournalError::Io {
            path: path.to_path_buf(),
            source,
        };
        let text = match fs::read_to_string(path) {
            Ok(t) => t,
            Err(e) if e.kind() == io::ErrorKind::NotFound => String::new(),
            Err(e) => return Err(io_err(e)),
        };
        let mut events = Vec::new();
        let mut keep = 0usize;
        let segments: Vec<&str> = text.split_inclusive('\n').collect();
        for (i, seg) in segments.iter().enumerate() {
            let line = seg.trim();
            if !line.is_empty() {
                match serde_json::from_str(line) {
                    Ok(ev) => events.push(ev),
                    Err(e) if i + 1 == segments.len() => {
                        tracing::warn!(line = i + 1, error = %e, "dropping torn journal line");
                        break;
                    }
                    Err(source) => {
                        return Err(JournalError::Parse {
                            path: path.to_path_buf(),
                            line: i + 1,
                            source,
                        })
                    }
                }
            }
            keep += seg.len();
        }
        let mut file = OpenOptions::new().create(true).append(true).open(path).map_err(io_err)?;
        if keep < text.len() {
            file.set_len(keep as u64).map_err(io_err)?;
        }
        if keep > 0 && !text[..keep].ends_with('\n') {
            file.write_all(b"\n").map_err(io_err)?;
        }
        Ok((
            Self {
                path: path.to_path_buf(),
                file,
            },
            events,
        ))
    }

    pub fn append(&mut self, event: &Event) -> io::Result<()> {
        let mut line = serde_json::to_vec(event).map_err(io::Error::other)?;
        line.push(b'\n');
        self.file.write_all(&line)?;
        self.file.flush()
    }

    pub fn path(&self) -> &Path {
        &self.path
    }
}
