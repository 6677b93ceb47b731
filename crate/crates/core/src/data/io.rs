//! Binary feature files and JSON-lines annotations.
//!
//! Feature layout: magic `DAVF`, then little-endian `u32` version (1), `u32`
//! T, `u32` D, followed by `T*D` little-endian `f32` values in row-major
//! order.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use davel_tensor::Tensor;
use serde::{Deserialize, Serialize};

use super::{DatasetSplit, EventAnnotation, Split, VideoSample};
use crate::error::{io_err, Error, Result};

const MAGIC: &[u8; 4] = b"DAVF";
const VERSION: u32 = 1;
const HEADER_LEN: usize = 16;

pub fn encode_features(t: &Tensor<f32>) -> Vec<u8> {
    let mut buf = Vec::with_capacity(HEADER_LEN + 4 * t.numel());
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(t.rows() as u32).to_le_bytes());
    buf.extend_from_slice(&(t.cols() as u32).to_le_bytes());
    for v in t.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    buf
}

pub fn decode_features(bytes: &[u8], path: &Path) -> Result<Tensor<f32>> {
    let fail = |offset: usize, msg: String| Error::Format {
        path: path.to_path_buf(),
        offset: offset as u64,
        msg,
    };
    if bytes.len() < HEADER_LEN {
        return Err(fail(bytes.len(), format!("truncated header ({} bytes)", bytes.len())));
    }
    if &bytes[0..4] != MAGIC {
        return Err(fail(0, "bad magic".into()));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().expect("4 bytes"));
    let version = word(4);
    if version != VERSION {
        return Err(fail(4, format!("unsupported version {version}")));
    }
    let (t, d) = (word(8) as usize, word(12) as usize);
    if t == 0 || d == 0 {
        return Err(fail(8, format!("empty shape {t}x{d}")));
    }
    let payload = &bytes[HEADER_LEN..];
    let expected = t * d * 4;
    if payload.len() != expected {
        return Err(fail(
            HEADER_LEN + payload.len().min(expected),
            format!("header claims {t}x{d} ({expected} payload bytes), found {}", payload.len()),
        ));
    }
    let data = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    Ok(Tensor::new(vec![t, d], data)?)
}

pub fn save_features(t: &Tensor<f32>, path: &Path) -> Result<()> {
    fs::write(path, encode_features(t)).map_err(io_err(path))
}

pub fn load_features(path: &Path) -> Result<Tensor<f32>> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    decode_features(&bytes, path)
}

/// One line of an annotation file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnnotationRecord {
    pub id: String,
    #[serde(rename = "T")]
    pub len: usize,
    pub events: Vec<EventAnnotation>,
}

pub fn write_annotations(records: &[AnnotationRecord], path: &Path) -> Result<()> {
    let file = fs::File::create(path).map_err(io_err(path))?;
    let mut w = BufWriter::new(file);
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n").map_err(io_err(path))?;
    }
    w.flush().map_err(io_err(path))
}

pub fn read_annotations(path: &Path) -> Result<Vec<AnnotationRecord>> {
    let file = fs::File::open(path).map_err(io_err(path))?;
    let mut out = Vec::new();
    let mut offset = 0u64;
    for line in BufReader::new(file).lines() {
        let line = line.map_err(io_err(path))?;
        if !line.trim().is_empty() {
            let rec = serde_json::from_str(&line).map_err(|e| Error::Format {
                path: path.to_path_buf(),
                offset,
                msg: e.to_string(),
            })?;
            out.push(rec);
        }
        offset += line.len() as u64 + 1;
    }
    Ok(out)
}

pub fn feature_paths(dir: &Path, split: Split, id: &str) -> (PathBuf, PathBuf) {
    let base = dir.join(split.name());
    (base.join(format!("{id}.audio.davf")), base.join(format!("{id}.visual.davf")))
}

pub fn annotation_path(dir: &Path, split: Split) -> PathBuf {
    dir.join(format!("{}.jsonl", split.name()))
}

/// Writes `<dir>/<split>.jsonl` plus one audio and one visual feature file per
/// video under `<dir>/<split>/`.
pub fn save_dataset(data: &DatasetSplit, dir: &Path) -> Result<()> {
    for split in Split::ALL {
        let sub = dir.join(split.name());
        fs::create_dir_all(&sub).map_err(io_err(&sub))?;
        let videos = data.get(split);
        let mut records = Vec::with_capacity(videos.len());
        for v in videos {
            let (a, vis) = feature_paths(dir, split, &v.id);
            save_features(&v.audio, &a)?;
            save_features(&v.visual, &vis)?;
            records.push(AnnotationRecord {
                id: v.id.clone(),
                len: v.len(),
                events: v.events.clone(),
            });
        }
        write_annotations(&records, &annotation_path(dir, split))?;
    }
    Ok(())
}

pub fn load_split(dir: &Path, split: Split) -> Result<Vec<VideoSample>> {
    let path = annotation_path(dir, split);
    read_annotations(&path)?
        .into_iter()
        .map(|rec| {
            let (a, v) = feature_paths(dir, split, &rec.id);
            let audio = load_features(&a)?;
            let visual = load_features(&v)?;
            if audio.rows() != rec.len {
                return Err(Error::Format {
                    path: a,
                    offset: 8,
                    msg: format!("expected T={}, file has {}", rec.len, audio.rows()),
                });
            }
            VideoSample::new(rec.id, audio, visual, rec.events)
        })
        .collect()
}

pub fn load_dataset(dir: &Path) -> Result<DatasetSplit> {
    Ok(DatasetSplit {
        train: load_split(dir, Split::Train)?,
        val: load_split(dir, Split::Val)?,
        test: load_split(dir, Split::Test)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tensor(rows: usize, cols: usize) -> Tensor<f32> {
        Tensor::new(vec![rows, cols], (0..rows * cols).map(|i| (i as f32).sin() * 3.7).collect()).unwrap()
    }

    #[test]
    fn round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.davf");
        let t = tensor(7, 4);
        save_features(&t, &path).unwrap();
        assert_eq!(load_features(&path).unwrap(), t);
    }

    #[test]
    fn header_layout_is_bit_exact() {
        let bytes = encode_features(&Tensor::new(vec![1, 2], vec![1.0f32, -2.0]).unwrap());
        let mut expected = b"DAVF".to_vec();
        expected.extend([1, 0, 0, 0, 1, 0, 0, 0, 2, 0, 0, 0]);
        expected.extend(1.0f32.to_le_bytes());
        expected.extend((-2.0f32).to_le_bytes());
        assert_eq!(bytes, expected);
    }

    #[test]
    fn truncated_file_is_format_error() {
        let p = Path::new("mem");
        let bytes = encode_features(&tensor(3, 2));
        assert!(matches!(decode_features(&bytes[..10], p), Err(Error::Format { .. })));
        assert!(matches!(decode_features(&bytes[..bytes.len() - 1], p), Err(Error::Format { .. })));
    }

    #[test]
    fn payload_shorter_than_header_claims() {
        let mut bytes = encode_features(&tensor(2, 3));
        bytes.truncate(HEADER_LEN + 5 * 4);
        match decode_features(&bytes, Path::new("mem")) {
            Err(Error::Format { offset, msg, .. }) => {
                assert_eq!(offset, (HEADER_LEN + 20) as u64);
                assert!(msg.contains("2x3"));
            }
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn bad_magic() {
        let mut bytes = encode_features(&tensor(1, 1));
        bytes[0] = b'X';
        assert!(matches!(decode_features(&bytes, Path::new("mem")), Err(Error::Format { offset: 0, .. })));
    }

    #[test]
    fn annotation_lines_use_documented_keys() {
        let rec = AnnotationRecord {
            id: "train-00000".into(),
            len: 40,
            events: vec![EventAnnotation { class_id: 2, start: 1.0, end: 5.5 }],
        };
        let line = serde_json::to_string(&rec).unwrap();
        assert_eq!(line, r#"{"id":"train-00000","T":40,"events":[{"class":2,"start":1.0,"end":5.5}]}"#);
    }
}
