//! Reading and writing manifests, detection files and image tiles.

mod detections;
mod manifest;
pub mod rle_string;
mod tiles;

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{MaskError, RleMask, Violation};

pub use detections::{read_detections, write_detections, DetectionFile};
pub use manifest::{
    manifest_from_str, manifest_to_string, read_manifest, tracks_to_manifest, write_manifest,
    LoadedManifest, MANIFEST_SCHEMA_KEY, MANIFEST_SCHEMA_VERSION,
};
pub use tiles::{read_tile, write_tile, TILE_SIZE};

#[derive(Debug, Error)]
pub enum IoError {
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{}: parse error at line {line}, column {column} (byte offset {offset}): {message}", path.display())]
    Parse {
        path: PathBuf,
        line: usize,
        column: usize,
        offset: usize,
        message: String,
    },
    #[error("{}: unsupported schema version {found} (this build reads version {supported})", path.display())]
    SchemaVersion {
        path: PathBuf,
        found: serde_json::Value,
        supported: u64,
    },
    #[error("{context}: {source}")]
    Mask {
        context: String,
        #[source]
        source: MaskError,
    },
    #[error("{context}: {source}")]
    RleString {
        context: String,
        #[source]
        source: rle_string::RleStringError,
    },
    #[error("{context}: score {score} outside [0, 1]")]
    ScoreRange { context: String, score: f64 },
    #[error("{context}: {message}")]
    Dimension { context: String, message: String },
    #[error("manifest is invalid:\n{}", format_violations(.0))]
    Invalid(Vec<Violation>),
    #[error("duplicate track id {0}")]
    DuplicateTrackId(u64),
    #[error("{}: {source}", path.display())]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },
}

fn format_violations(violations: &[Violation]) -> String {
    violations
        .iter()
        .map(|v| format!("  - {v}"))
        .collect::<Vec<_>>()
        .join("\n")
}

/// How RLE counts are emitted on write.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub enum CountsEncoding {
    /// Integer arrays.
    #[default]
    Array,
    /// Compressed ASCII strings.
    Compressed,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct WriteOptions {
    pub counts: CountsEncoding,
}

impl WriteOptions {
    pub fn compressed() -> Self {
        Self {
            counts: CountsEncoding::Compressed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
enum CountsWire {
    Array(Vec<u32>),
    Compressed(String),
}

/// `{"size": [H, W], "counts": ...}`
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct SegmentationWire {
    size: [u32; 2],
    counts: CountsWire,
}

impl SegmentationWire {
    fn from_mask(mask: &RleMask, options: WriteOptions) -> Self {
        let counts = match options.counts {
            CountsEncoding::Array => CountsWire::Array(mask.counts().to_vec()),
            CountsEncoding::Compressed => {
                CountsWire::Compressed(rle_string::encode_counts(mask.counts()))
            }
        };
        Self {
            size: [mask.height(), mask.width()],
            counts,
        }
    }

    fn into_mask(self, context: impl Fn() -> String) -> Result<RleMask, IoError> {
        let [height, width] = self.size;
        let counts = match self.counts {
            CountsWire::Array(c) => c,
            CountsWire::Compressed(s) => {
                rle_string::decode_counts(&s).map_err(|source| IoError::RleString {
                    context: context(),
                    source,
                })?
            }
        };
        RleMask::new(height, width, counts).map_err(|source| IoError::Mask {
            context: context(),
            source,
        })
    }
}

fn read_text(path: &Path) -> Result<String, IoError> {
    std::fs::read_to_string(path).map_err(|source| IoError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn write_text(path: &Path, text: &str) -> Result<(), IoError> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|source| IoError::Io {
            path: parent.to_path_buf(),
            source,
        })?;
    }
    std::fs::write(path, text).map_err(|source| IoError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn parse_error(path: &Path, text: &str, err: &serde_json::Error) -> IoError {
    IoError::Parse {
        path: path.to_path_buf(),
        line: err.line(),
        column: err.column(),
        offset: if err.is_eof() {
            text.len()
        } else {
            byte_offset(text, err.line(), err.column())
        },
        message: err.to_string(),
    }
}

/// Converts serde_json's 1-based line/column into a byte offset.
fn byte_offset(text: &str, line: usize, column: usize) -> usize {
    let line_start: usize = text
        .split_inclusive('\n')
        .take(line.saturating_sub(1))
        .map(str::len)
        .sum();
    (line_start + column.saturating_sub(1)).min(text.len())
}

fn to_pretty_json<T: Serialize>(value: &T) -> String {
    let mut text = serde_json::to_string_pretty(value).expect("manifest types always serialize");
    text.push('\n');
    text
}
