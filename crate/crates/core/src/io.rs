//! File helpers shared by the artifact formats.

use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// 17 significant digits, enough for an exact `f64` round trip.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

pub fn parse_f64(s: &str, path: &Path, line: usize) -> Result<f64> {
    let v: f64 = s
        .trim()
        .parse()
        .map_err(|_| Error::format(path, format!("line {line}: bad number {s:?}")))?;
    if !v.is_finite() {
        return Err(Error::format(path, format!("line {line}: non-finite value")));
    }
    Ok(v)
}

pub fn read_to_string(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

pub fn write_string(path: &Path, contents: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value)
        .map_err(|e| Error::format(path, e.to_string()))?;
    s.push('\n');
    write_string(path, &s)
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let s = read_to_string(path)?;
    serde_json::from_str(&s).map_err(|e| Error::format(path, e.to_string()))
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(sha256_hex(&bytes))
}

/// Splits `# key: value` header lines from comma-separated data rows.
/// Data rows come back with their 1-based line numbers.
pub fn split_header(text: &str) -> (Vec<(String, String)>, Vec<(usize, &str)>) {
    let mut header = Vec::new();
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if let Some(h) = line.strip_prefix('#') {
            if let Some((k, v)) = h.split_once(':') {
                header.push((k.trim().to_string(), v.trim().to_string()));
            } else {
                header.push((h.trim().to_string(), String::new()));
            }
        } else if !line.trim().is_empty() {
            rows.push((i + 1, line));
        }
    }
    (header, rows)
}

pub fn header_value<'a>(header: &'a [(String, String)], key: &str) -> Option<&'a str> {
    header
        .iter()
        .find(|(k, _)| k == key)
        .map(|(_, v)| v.as_str())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn fmt_parse_round_trip(bits in any::<u64>()) {
            let v = f64::from_bits(bits);
            prop_assume!(v.is_finite());
            let back = parse_f64(&fmt_f64(v), Path::new("-"), 1).unwrap();
            prop_assert_eq!(back.to_bits(), v.to_bits());
        }
    }

    #[test]
    fn header_split() {
        let (h, rows) = split_header("# format v1\n# seed: 7\n1,2\n\n3,4\n");
        assert_eq!(header_value(&h, "seed"), Some("7"));
        assert_eq!(header_value(&h, "format v1"), Some(""));
        assert_eq!(rows, vec![(3, "1,2"), (5, "3,4")]);
    }
}
