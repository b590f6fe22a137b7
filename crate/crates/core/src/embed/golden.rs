//! Golden embedding fixtures: newline-delimited `{text, vector}` records
//! produced by the encoder export tool.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error)]
pub enum GoldenError {
    #[error("golden file {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("golden file line {line}: {message}")]
    Parse { line: usize, message: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GoldenFixture {
    pub text: String,
    pub vector: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub encoder_id: Option<String>,
    /// Set by the exporter when the text overflowed the context window.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub truncated: bool,
}

pub fn read_golden(path: impl AsRef<Path>) -> Result<Vec<GoldenFixture>, GoldenError> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|source| GoldenError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fixture: GoldenFixture = serde_json::from_str(line).map_err(|e| GoldenError::Parse {
            line: i + 1,
            message: e.to_string(),
        })?;
        let norm = fixture.vector.iter().map(|v| v * v).sum::<f64>().sqrt();
        if (norm - 1.0).abs() > 1e-5 {
            return Err(GoldenError::Parse {
                line: i + 1,
                message: format!("vector norm {norm} is not 1"),
            });
        }
        out.push(fixture);
    }
    Ok(out)
}

pub fn write_golden(path: impl AsRef<Path>, fixtures: &[GoldenFixture]) -> Result<(), GoldenError> {
    let path = path.as_ref();
    let io = |source| GoldenError::Io {
        path: path.to_path_buf(),
        source,
    };
    let mut f = fs::File::create(path).map_err(io)?;
    for fx in fixtures {
        let line = serde_json::to_string(fx).expect("fixture serializes");
        writeln!(f, "{line}").map_err(io)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embed::reference_hash_embed;

    #[test]
    fn round_trip_and_validation() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("golden.jsonl");
        let fixtures: Vec<GoldenFixture> = ["red car", "old car"]
            .iter()
            .map(|t| GoldenFixture {
                text: t.to_string(),
                vector: reference_hash_embed(t, 16).unwrap().values().to_vec(),
                encoder_id: Some("reference-hash-16".into()),
                truncated: false,
            })
            .collect();
        write_golden(&p, &fixtures).unwrap();
        assert_eq!(read_golden(&p).unwrap(), fixtures);

        write_golden(&p, &[]).unwrap();
        assert!(read_golden(&p).unwrap().is_empty());

        fs::write(&p, "{\"text\":\"x\",\"vector\":[0.5,0.5]}\n").unwrap();
        assert!(matches!(read_golden(&p), Err(GoldenError::Parse { line: 1, .. })));
    }
}
