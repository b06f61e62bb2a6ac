//! Versioned, checksummed text container for model and baseline parameters.
//!
//! Layout:
//!
//! ```text
//! ddcrnn-checkpoint 1
//! kind <tag>
//! sha256 <hex digest of everything after this line>
//! meta <key> <value>
//! matrix <name> <rows> <cols>
//! <row values, space separated>
//! ...
//! end
//! ```
//!
//! Values are written in shortest round-trip scientific notation so a
//! save/load cycle is bit exact.

use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::matrix::Matrix;

pub const MAGIC: &str = "ddcrnn-checkpoint";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    kind: String,
    meta: Vec<(String, String)>,
    matrices: Vec<(String, Matrix)>,
}

impl Checkpoint {
    pub fn new(kind: &str) -> Self {
        Checkpoint {
            kind: kind.to_string(),
            meta: Vec::new(),
            matrices: Vec::new(),
        }
    }

    pub fn kind(&self) -> &str {
        &self.kind
    }

    pub fn expect_kind(&self, kind: &str) -> Result<()> {
        if self.kind != kind {
            return Err(Error::Checkpoint(format!(
                "expected a {kind:?} checkpoint, found {:?}",
                self.kind
            )));
        }
        Ok(())
    }

    pub fn set_meta(&mut self, key: &str, value: impl ToString) {
        let value = value.to_string();
        match self.meta.iter_mut().find(|(k, _)| k == key) {
            Some(slot) => slot.1 = value,
            None => self.meta.push((key.to_string(), value)),
        }
    }

    pub fn meta(&self, key: &str) -> Result<&str> {
        self.meta
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
            .ok_or_else(|| Error::Checkpoint(format!("missing metadata {key:?}")))
    }

    pub fn meta_parse<T: std::str::FromStr>(&self, key: &str) -> Result<T> {
        let raw = self.meta(key)?;
        raw.parse()
            .map_err(|_| Error::Checkpoint(format!("bad value {raw:?} for {key:?}")))
    }

    pub fn push_matrix(&mut self, name: &str, m: Matrix) {
        self.matrices.push((name.to_string(), m));
    }

    pub fn matrix_opt(&self, name: &str) -> Option<&Matrix> {
        self.matrices.iter().find(|(n, _)| n == name).map(|(_, m)| m)
    }

    pub fn matrix(&self, name: &str) -> Result<&Matrix> {
        self.matrix_opt(name)
            .ok_or_else(|| Error::Checkpoint(format!("missing matrix {name:?}")))
    }

    fn body(&self) -> String {
        let mut out = String::new();
        for (k, v) in &self.meta {
            out.push_str(&format!("meta {k} {v}\n"));
        }
        for (name, m) in &self.matrices {
            out.push_str(&format!("matrix {name} {} {}\n", m.rows(), m.cols()));
            for i in 0..m.rows() {
                let row: Vec<String> = m.row(i).iter().map(|v| format!("{v:e}")).collect();
                out.push_str(&row.join(" "));
                out.push('\n');
            }
        }
        out.push_str("end\n");
        out
    }

    pub fn to_text(&self) -> String {
        let body = self.body();
        let digest = hex::encode(Sha256::digest(body.as_bytes()));
        format!("{MAGIC} {VERSION}\nkind {}\nsha256 {digest}\n{body}", self.kind)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut header = text.splitn(4, '\n');
        let magic = header.next().unwrap_or("");
        let kind_line = header.next().unwrap_or("");
        let sum_line = header.next().unwrap_or("");
        let body = header.next().unwrap_or("");

        let mut parts = magic.split_whitespace();
        if parts.next() != Some(MAGIC) {
            return Err(Error::Checkpoint("not a checkpoint file".into()));
        }
        let version: u32 = parts
            .next()
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| Error::Checkpoint("missing version".into()))?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported checkpoint version {version}, expected {VERSION}"
            )));
        }
        let kind = kind_line
            .strip_prefix("kind ")
            .ok_or_else(|| Error::Checkpoint("missing kind".into()))?
            .trim()
            .to_string();
        let expected = sum_line
            .strip_prefix("sha256 ")
            .ok_or_else(|| Error::Checkpoint("missing checksum".into()))?
            .trim();
        let actual = hex::encode(Sha256::digest(body.as_bytes()));
        if actual != expected {
            return Err(Error::Checkpoint("checksum mismatch".into()));
        }

        let mut ck = Checkpoint::new(&kind);
        let mut lines = body.lines().enumerate();
        let bad = |i: usize, msg: &str| Error::Checkpoint(format!("line {}: {msg}", i + 4));
        let mut ended = false;
        while let Some((i, line)) = lines.next() {
            if line == "end" {
                ended = true;
                break;
            }
            if let Some(rest) = line.strip_prefix("meta ") {
                let (k, v) = rest.split_once(' ').unwrap_or((rest, ""));
                ck.meta.push((k.to_string(), v.to_string()));
            } else if let Some(rest) = line.strip_prefix("matrix ") {
                let f: Vec<&str> = rest.split_whitespace().collect();
                if f.len() != 3 {
                    return Err(bad(i, "malformed matrix header"));
                }
                let rows: usize = f[1].parse().map_err(|_| bad(i, "bad row count"))?;
                let cols: usize = f[2].parse().map_err(|_| bad(i, "bad column count"))?;
                let mut data = Vec::with_capacity(rows * cols);
                for _ in 0..rows {
                    let (j, row) = lines.next().ok_or_else(|| bad(i, "truncated matrix"))?;
                    let before = data.len();
                    for tok in row.split_whitespace() {
                        data.push(tok.parse::<f64>().map_err(|_| bad(j, "bad number"))?);
                    }
                    if data.len() - before != cols {
                        return Err(bad(j, "row length does not match header"));
                    }
                }
                ck.matrices.push((f[0].to_string(), Matrix::from_vec(rows, cols, data)?));
            } else {
                return Err(bad(i, "unexpected line"));
            }
        }
        if !ended {
            return Err(Error::Checkpoint("missing end marker".into()));
        }
        Ok(ck)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::manifest::write_atomic(path, self.to_text().as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Checkpoint::parse(&text)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        let mut ck = Checkpoint::new("test");
        ck.set_meta("units", 16);
        ck.set_meta("note", "two words");
        ck.push_matrix(
            "w",
            Matrix::from_rows(&[vec![0.1, -1e-300, f64::MAX], vec![1.0 / 3.0, 0.0, -2.5]]).unwrap(),
        );
        ck
    }

    #[test]
    fn round_trip_is_exact() {
        let ck = sample();
        let back = Checkpoint::parse(&ck.to_text()).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.meta("note").unwrap(), "two words");
        assert_eq!(back.meta_parse::<usize>("units").unwrap(), 16);
    }

    #[test]
    fn tampering_is_detected() {
        let text = sample().to_text().replace("-2.5e0", "-2.4e0");
        assert!(matches!(Checkpoint::parse(&text), Err(Error::Checkpoint(m)) if m.contains("checksum")));
        let text = sample().to_text().replacen("ddcrnn-checkpoint 1", "ddcrnn-checkpoint 2", 1);
        assert!(matches!(Checkpoint::parse(&text), Err(Error::Checkpoint(m)) if m.contains("version")));
        assert!(Checkpoint::parse("garbage").is_err());
    }

    #[test]
    fn kind_is_checked() {
        assert!(sample().expect_kind("test").is_ok());
        assert!(sample().expect_kind("other").is_err());
    }
}
