//! File formats: binary PGM frames, CSV tables and JSON documents.

use std::fs;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::frame::{Frame, FrameSequence};

/// Write through a temporary sibling file and rename, so readers never see a
/// partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

/// Byte offset of a 1-based `(line, column)` position in `text`.
fn byte_offset(text: &str, line: usize, column: usize) -> u64 {
    let mut offset = 0usize;
    for (i, l) in text.split_inclusive('\n').enumerate() {
        if i + 1 == line {
            return (offset + column.saturating_sub(1)).min(text.len()) as u64;
        }
        offset += l.len();
    }
    text.len() as u64
}

pub(crate) fn json_error(path: &Path, text: &str, err: &serde_json::Error) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        offset: byte_offset(text, err.line(), err.column()),
        message: err.to_string(),
    }
}

pub(crate) fn prefix_path(path: &Path, err: Error) -> Error {
    match err {
        e @ (Error::Parse { .. } | Error::Io { .. }) => e,
        e => Error::Parse {
            path: path.to_path_buf(),
            offset: 0,
            message: e.to_string(),
        },
    }
}

pub fn read_json<T: DeserializeOwned>(path: impl AsRef<Path>) -> Result<T> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| json_error(path, &text, &e))
}

pub fn write_json<T: Serialize>(path: impl AsRef<Path>, value: &T) -> Result<()> {
    let path = path.as_ref();
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::Json {
        path: path.to_path_buf(),
        source: e,
    })?;
    text.push('\n');
    write_atomic(path, text.as_bytes())
}

pub fn read_csv<T: DeserializeOwned>(path: impl AsRef<Path>) -> Result<Vec<T>> {
    let path = path.as_ref();
    let mut reader = csv::Reader::from_path(path).map_err(|e| Error::Csv {
        path: path.to_path_buf(),
        source: e,
    })?;
    reader
        .deserialize()
        .collect::<std::result::Result<Vec<T>, _>>()
        .map_err(|e| Error::Csv {
            path: path.to_path_buf(),
            source: e,
        })
}

pub fn csv_bytes<T: Serialize>(rows: &[T]) -> std::result::Result<Vec<u8>, csv::Error> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r)?;
    }
    w.into_inner().map_err(|e| csv::Error::from(e.into_error()))
}

pub fn write_csv<T: Serialize>(path: impl AsRef<Path>, rows: &[T]) -> Result<()> {
    let path = path.as_ref();
    let bytes = csv_bytes(rows).map_err(|e| Error::Csv {
        path: path.to_path_buf(),
        source: e,
    })?;
    write_atomic(path, &bytes)
}

/// Encode a frame as binary PGM (`P5`, maxval 255); intensities are clamped
/// to `[0, 1]` and rounded.
pub fn encode_pgm(frame: &Frame) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", frame.width(), frame.height()).into_bytes();
    out.extend(frame.data().iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    out
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl Cursor<'_> {
    fn fail(&self, message: impl Into<String>) -> Error {
        Error::Parse {
            path: self.path.to_path_buf(),
            offset: self.pos as u64,
            message: message.into(),
        }
    }

    fn skip_space_and_comments(&mut self) {
        while self.pos < self.bytes.len() {
            let b = self.bytes[self.pos];
            if b == b'#' {
                while self.pos < self.bytes.len() && self.bytes[self.pos] != b'\n' {
                    self.pos += 1;
                }
            } else if b.is_ascii_whitespace() {
                self.pos += 1;
            } else {
                break;
            }
        }
    }

    fn number(&mut self, what: &str) -> Result<usize> {
        self.skip_space_and_comments();
        let start = self.pos;
        while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_digit() {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(self.fail(format!("expected {what}")));
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::Parse {
                path: self.path.to_path_buf(),
                offset: start as u64,
                message: format!("{what} out of range"),
            })
    }
}

/// Decode a binary PGM with 8- or 16-bit samples into `[0, 1]` intensities.
pub fn decode_pgm(bytes: &[u8], path: &Path) -> Result<Frame> {
    let mut c = Cursor { bytes, pos: 0, path };
    if bytes.len() < 2 || &bytes[..2] != b"P5" {
        return Err(c.fail("not a binary PGM (missing P5 magic)"));
    }
    c.pos = 2;
    let width = c.number("width")?;
    let height = c.number("height")?;
    let maxval = c.number("maxval")?;
    if width == 0 || height == 0 {
        return Err(c.fail("zero image dimension"));
    }
    if maxval == 0 || maxval > 65535 {
        return Err(c.fail(format!("maxval {maxval} outside 1..=65535")));
    }
    if c.pos >= bytes.len() || !bytes[c.pos].is_ascii_whitespace() {
        return Err(c.fail("expected whitespace after header"));
    }
    c.pos += 1;
    let sample_bytes = if maxval < 256 { 1 } else { 2 };
    let need = width
        .checked_mul(height)
        .and_then(|n| n.checked_mul(sample_bytes))
        .ok_or_else(|| c.fail("image too large"))?;
    let data = &bytes[c.pos..];
    if data.len() < need {
        c.pos = bytes.len();
        return Err(c.fail(format!("truncated pixel data: expected {need} bytes, found {}", data.len())));
    }
    let mut pixels = Vec::with_capacity(width * height);
    for i in 0..width * height {
        let raw = if sample_bytes == 1 {
            data[i] as usize
        } else {
            ((data[2 * i] as usize) << 8) | data[2 * i + 1] as usize
        };
        if raw > maxval {
            c.pos += i * sample_bytes;
            return Err(c.fail(format!("sample {raw} exceeds maxval {maxval}")));
        }
        pixels.push(raw as f64 / maxval as f64);
    }
    Frame::new(width, height, pixels)
}

pub fn read_pgm(path: impl AsRef<Path>) -> Result<Frame> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_pgm(&bytes, path)
}

pub fn write_pgm(path: impl AsRef<Path>, frame: &Frame) -> Result<()> {
    write_atomic(path.as_ref(), &encode_pgm(frame))
}

pub fn frame_file_name(t: usize) -> String {
    format!("frame_{t:05}.pgm")
}

/// Write frames as `frame_00000.pgm`, `frame_00001.pgm`, ...
pub fn write_sequence(dir: impl AsRef<Path>, frames: &FrameSequence) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (t, f) in frames.iter().enumerate() {
        write_pgm(dir.join(frame_file_name(t)), f)?;
    }
    Ok(())
}

/// Read every `frame_NNNNN.pgm` in `dir`, in numeric order.
pub fn read_sequence(dir: impl AsRef<Path>) -> Result<FrameSequence> {
    let dir = dir.as_ref();
    let mut numbered = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let name = entry.file_name();
        let Some(name) = name.to_str() else { continue };
        let Some(num) = name.strip_prefix("frame_").and_then(|s| s.strip_suffix(".pgm")) else {
            continue;
        };
        if let Ok(t) = num.parse::<usize>() {
            numbered.push((t, entry.path()));
        }
    }
    if numbered.is_empty() {
        return Err(Error::InvalidArgument(format!("no frame_*.pgm files in {}", dir.display())));
    }
    numbered.sort();
    let frames = numbered
        .iter()
        .map(|(_, p)| read_pgm(p))
        .collect::<Result<Vec<_>>>()?;
    FrameSequence::new(frames).map_err(|e| prefix_path(dir, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pgm_roundtrip_is_exact_on_8bit_values() {
        let data: Vec<f64> = (0..12).map(|i| (i * 20) as f64 / 255.0).collect();
        let f = Frame::new(4, 3, data).unwrap();
        let back = decode_pgm(&encode_pgm(&f), Path::new("x.pgm")).unwrap();
        assert_eq!(back, f);
    }

    #[test]
    fn pgm_with_comment_and_16bit() {
        let mut bytes = b"P5\n# comment\n2 1\n65535\n".to_vec();
        bytes.extend([0xff, 0xff, 0x00, 0x00]);
        let f = decode_pgm(&bytes, Path::new("x.pgm")).unwrap();
        assert_eq!(f.data(), &[1.0, 0.0]);
    }

    #[test]
    fn pgm_errors_report_offsets() {
        let e = decode_pgm(b"P6\n1 1\n255\n\0", Path::new("a.pgm")).unwrap_err();
        assert_eq!(e.offset(), Some(0));
        let e = decode_pgm(b"P5\n2 x\n255\n", Path::new("a.pgm")).unwrap_err();
        assert_eq!(e.offset(), Some(5));
        let e = decode_pgm(b"P5\n2 2\n255\n\0\0", Path::new("a.pgm")).unwrap_err();
        assert!(e.to_string().contains("truncated"));
    }

    #[test]
    fn json_offsets_count_bytes() {
        let text = "{\n  \"a\": 1,\n  \"b\": x\n}";
        let err = serde_json::from_str::<serde_json::Value>(text).unwrap_err();
        let e = json_error(Path::new("f.json"), text, &err);
        let off = e.offset().unwrap() as usize;
        assert_eq!(&text[off..off + 1], "x");
    }
}
