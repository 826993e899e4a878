//! Shared container layout for datasets and checkpoints: a magic line, UTF-8
//! `key: value` lines, an `end_header` line, then a little-endian f32 payload.

use std::path::Path;

use crate::error::{Error, Result};

const END: &str = "end_header";

#[derive(Debug, Clone, Default, PartialEq)]
pub(crate) struct Header {
    entries: Vec<(String, String)>,
}

impl Header {
    pub fn push(&mut self, key: &str, value: impl ToString) {
        self.entries.push((key.to_string(), value.to_string()));
    }

    pub fn entries(&self) -> &[(String, String)] {
        &self.entries
    }

    pub fn get(&self, key: &str) -> Result<&str> {
        self.entries
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
            .ok_or_else(|| Error::CorruptHeader(format!("missing key '{key}'")))
    }

    pub fn parse<T: std::str::FromStr>(&self, key: &str) -> Result<T> {
        let raw = self.get(key)?;
        raw.parse()
            .map_err(|_| Error::CorruptHeader(format!("key '{key}' has unparsable value '{raw}'")))
    }

    /// Values of a repeated key, in file order.
    pub fn all(&self, key: &str) -> Vec<&str> {
        self.entries
            .iter()
            .filter(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
            .collect()
    }

    pub fn encode(&self, magic: &str) -> String {
        let mut s = format!("{magic}\n");
        for (k, v) in &self.entries {
            s.push_str(k);
            s.push_str(": ");
            s.push_str(v);
            s.push('\n');
        }
        s.push_str(END);
        s.push('\n');
        s
    }

    /// Splits `bytes` into the parsed header and the payload that follows it.
    pub fn decode<'a>(bytes: &'a [u8], magic: &str) -> Result<(Header, &'a [u8])> {
        let first = bytes
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| Error::CorruptHeader("no header line found".into()))?;
        if &bytes[..first] != magic.as_bytes() {
            return Err(Error::CorruptHeader(format!("expected magic '{magic}'")));
        }
        let mut header = Header::default();
        let mut pos = first + 1;
        loop {
            let rest = &bytes[pos..];
            let len = rest
                .iter()
                .position(|&b| b == b'\n')
                .ok_or_else(|| Error::CorruptHeader(format!("header ends before '{END}'")))?;
            let line = std::str::from_utf8(&rest[..len]).map_err(|_| {
                Error::CorruptHeader(format!("non-UTF-8 header line at byte {pos}"))
            })?;
            pos += len + 1;
            if line == END {
                return Ok((header, &bytes[pos..]));
            }
            let (k, v) = line
                .split_once(": ")
                .ok_or_else(|| Error::CorruptHeader(format!("malformed header line '{line}'")))?;
            if k.is_empty() {
                return Err(Error::CorruptHeader(format!("empty key in '{line}'")));
            }
            header.push(k, v);
        }
    }
}

pub(crate) fn push_f32s(out: &mut Vec<u8>, values: &[f32]) {
    out.reserve(values.len() * 4);
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

/// Payload bytes → f32 values; the caller has already checked the length.
pub(crate) fn read_f32s(bytes: &[u8]) -> Vec<f32> {
    bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect()
}

/// Checks that `payload` holds exactly `values` f32s.
pub(crate) fn check_payload(payload: &[u8], values: usize) -> Result<()> {
    let expected = values * 4;
    match payload.len() {
        n if n < expected => Err(Error::Truncated { expected, found: n }),
        n if n > expected => Err(Error::DimensionMismatch(format!(
            "payload holds {n} bytes but the header declares {expected}"
        ))),
        _ => Ok(()),
    }
}

pub(crate) fn read_file(path: &Path, what: &str) -> Result<Vec<u8>> {
    match std::fs::read(path) {
        Ok(b) => Ok(b),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Err(Error::MissingInput {
            path: path.to_path_buf(),
            hint: format!("no {what} at this path"),
        }),
        Err(e) => Err(e.into()),
    }
}
