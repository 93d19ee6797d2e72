//! Parameter checkpoint files: a text manifest (metadata lines plus array
//! names and shapes) followed by the concatenated array contents as
//! little-endian 64-bit floats.
//!
//! Layout:
//! ```text
//! ckpt1 <n_meta> <n_arrays>
//! <key>\t<value>            (n_meta lines; value may contain spaces)
//! <name> <d0> <d1> ...      (n_arrays lines)
//! end
//! <raw little-endian f64 bytes, arrays in manifest order>
//! ```

use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::Path;

use thiserror::Error;

#[derive(Debug, Clone, PartialEq)]
pub struct NamedArray {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl NamedArray {
    pub fn new(name: impl Into<String>, shape: Vec<usize>, data: Vec<f64>) -> Self {
        let name = name.into();
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "array {name}: shape/data mismatch"
        );
        NamedArray { name, shape, data }
    }
}

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("io error: {0}")]
    Io(#[from] io::Error),
    #[error("line {line}: {message}")]
    Malformed { line: usize, message: String },
    #[error("array data truncated: expected {expected} floats, file holds {found}")]
    Truncated { expected: usize, found: usize },
}

pub fn save(
    path: &Path,
    meta: &[(String, String)],
    arrays: &[NamedArray],
) -> Result<(), CheckpointError> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "ckpt1 {} {}", meta.len(), arrays.len())?;
    for (k, v) in meta {
        debug_assert!(!k.contains(char::is_whitespace), "meta key {k:?}");
        writeln!(w, "{k}\t{v}")?;
    }
    for a in arrays {
        write!(w, "{}", a.name)?;
        for d in &a.shape {
            write!(w, " {d}")?;
        }
        writeln!(w)?;
    }
    writeln!(w, "end")?;
    for a in arrays {
        for v in &a.data {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn load(path: &Path) -> Result<(Vec<(String, String)>, Vec<NamedArray>), CheckpointError> {
    let mut r = BufReader::new(File::open(path)?);
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;

    let mut offset = 0;
    let mut line_no = 0;
    let mut next_line = |bytes: &[u8]| -> Result<(usize, String), CheckpointError> {
        line_no += 1;
        let rest = &bytes[offset..];
        let end = rest
            .iter()
            .position(|&b| b == b'\n')
            .ok_or(CheckpointError::Malformed {
                line: line_no,
                message: "unexpected end of manifest".into(),
            })?;
        let text = String::from_utf8_lossy(&rest[..end]).into_owned();
        offset += end + 1;
        Ok((line_no, text))
    };

    let (line, header) = next_line(&bytes)?;
    let parts: Vec<&str> = header.split_whitespace().collect();
    if parts.len() != 3 || parts[0] != "ckpt1" {
        return Err(CheckpointError::Malformed {
            line,
            message: format!("bad header {header:?}"),
        });
    }
    let n_meta: usize = parts[1].parse().map_err(|_| CheckpointError::Malformed {
        line,
        message: "bad meta count".into(),
    })?;
    let n_arrays: usize = parts[2].parse().map_err(|_| CheckpointError::Malformed {
        line,
        message: "bad array count".into(),
    })?;

    let mut meta = Vec::with_capacity(n_meta);
    for _ in 0..n_meta {
        let (line, text) = next_line(&bytes)?;
        let (k, v) = text.split_once('\t').ok_or(CheckpointError::Malformed {
            line,
            message: "meta line missing tab".into(),
        })?;
        meta.push((k.to_string(), v.to_string()));
    }

    let mut headers = Vec::with_capacity(n_arrays);
    for _ in 0..n_arrays {
        let (line, text) = next_line(&bytes)?;
        let mut it = text.split_whitespace();
        let name = it
            .next()
            .ok_or(CheckpointError::Malformed {
                line,
                message: "empty array line".into(),
            })?
            .to_string();
        let mut shape = Vec::new();
        for tok in it {
            shape.push(tok.parse().map_err(|_| CheckpointError::Malformed {
                line,
                message: format!("bad dimension {tok:?}"),
            })?);
        }
        headers.push((name, shape));
    }

    let (line, end) = next_line(&bytes)?;
    if end != "end" {
        return Err(CheckpointError::Malformed {
            line,
            message: format!("expected end marker, got {end:?}"),
        });
    }

    let payload = &bytes[offset..];
    let expected: usize = headers
        .iter()
        .map(|(_, s)| s.iter().product::<usize>())
        .sum();
    if payload.len() < expected * 8 {
        return Err(CheckpointError::Truncated {
            expected,
            found: payload.len() / 8,
        });
    }

    let mut arrays = Vec::with_capacity(n_arrays);
    let mut pos = 0;
    for (name, shape) in headers {
        let n: usize = shape.iter().product();
        let mut data = Vec::with_capacity(n);
        for _ in 0..n {
            let mut buf = [0u8; 8];
            buf.copy_from_slice(&payload[pos..pos + 8]);
            data.push(f64::from_le_bytes(buf));
            pos += 8;
        }
        arrays.push(NamedArray { name, shape, data });
    }
    Ok((meta, arrays))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip() {
        let dir = std::env::temp_dir().join("autograd_ckpt_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("rt.ckpt");
        let arrays = vec![
            NamedArray::new("w", vec![2, 3], vec![1.0, -2.5, 3.25, 0.0, 1e-9, -1e9]),
            NamedArray::new("b", vec![3], vec![0.5, 0.25, 0.125]),
        ];
        let meta = vec![("seed".to_string(), "42".to_string())];
        save(&path, &meta, &arrays).unwrap();
        let (m2, a2) = load(&path).unwrap();
        assert_eq!(meta, m2);
        assert_eq!(arrays, a2);
    }

    #[test]
    fn truncated_file_is_an_error() {
        let dir = std::env::temp_dir().join("autograd_ckpt_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("trunc.ckpt");
        let arrays = vec![NamedArray::new("w", vec![4], vec![1.0; 4])];
        save(&path, &[], &arrays).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 8]).unwrap();
        assert!(matches!(
            load(&path),
            Err(CheckpointError::Truncated { .. })
        ));
    }
}
