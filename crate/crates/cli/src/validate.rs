//! Per-check conformance report for the three binary formats.

use std::fmt;
use std::path::Path;

use ato_core::features::{decode_dictionary, FDICT_MAGIC};
use ato_core::operator::{decode_operator, ATO_MAGIC};
use ato_core::tensor_io::{
    decode_rows, read_sidecar, AtdHeader, ATD_HEADER_LEN, ATD_MAGIC, DTYPE_F32_LE,
};
use ato_core::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Format {
    Atd,
    Ato,
    Fdict,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Outcome {
    Pass,
    Fail(String),
    Skip,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Check {
    pub name: &'static str,
    pub outcome: Outcome,
}

impl fmt::Display for Check {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.outcome {
            Outcome::Pass => write!(f, "PASS {}", self.name),
            Outcome::Skip => write!(f, "SKIP {}", self.name),
            Outcome::Fail(why) => write!(f, "FAIL {}: {}", self.name, why),
        }
    }
}

pub fn detect(path: &Path, bytes: &[u8]) -> Option<Format> {
    match path.extension().and_then(|e| e.to_str()) {
        Some("atd") => return Some(Format::Atd),
        Some("ato") => return Some(Format::Ato),
        Some("fdict") => return Some(Format::Fdict),
        _ => {}
    }
    match bytes.get(..4) {
        Some(m) if m == ATD_MAGIC => Some(Format::Atd),
        Some(m) if m == ATO_MAGIC => Some(Format::Ato),
        Some(m) if m == FDICT_MAGIC => Some(Format::Fdict),
        _ => None,
    }
}

/// Checks in the order the decoders perform them; the first failure marks
/// the rest as skipped.
struct Ladder {
    names: &'static [&'static str],
    checks: Vec<Check>,
}

impl Ladder {
    fn new(names: &'static [&'static str]) -> Self {
        Self {
            names,
            checks: Vec::new(),
        }
    }

    fn pass_until(&mut self, name: &str) {
        let upto = self.names.iter().position(|n| *n == name).unwrap();
        for n in &self.names[self.checks.len()..upto] {
            self.checks.push(Check {
                name: n,
                outcome: Outcome::Pass,
            });
        }
    }

    fn fail(mut self, name: &str, why: String) -> Vec<Check> {
        self.pass_until(name);
        let at = self.checks.len();
        self.checks.push(Check {
            name: self.names[at],
            outcome: Outcome::Fail(why),
        });
        for n in &self.names[at + 1..] {
            self.checks.push(Check {
                name: n,
                outcome: Outcome::Skip,
            });
        }
        self.checks
    }

    fn finish(mut self) -> Vec<Check> {
        let n = self.names.len();
        for name in &self.names[self.checks.len()..n] {
            self.checks.push(Check {
                name,
                outcome: Outcome::Pass,
            });
        }
        self.checks
    }
}

fn header_stage(e: &Error) -> &'static str {
    match e {
        Error::BadMagic { .. } => "magic",
        Error::UnsupportedVersion { .. } => "version",
        Error::Truncated { .. } => "length",
        Error::NonFinite { .. } => "finiteness",
        _ => "header",
    }
}

fn validate_atd(path: &Path, bytes: &[u8]) -> Vec<Check> {
    let ladder = Ladder::new(&["magic", "version", "header", "length", "finiteness", "sidecar"]);
    let header = match AtdHeader::parse(bytes) {
        Ok(h) => h,
        Err(e @ Error::Truncated { .. }) => return ladder.fail("header", e.to_string()),
        Err(e) => return ladder.fail(header_stage(&e), e.to_string()),
    };
    let expected = header.expected_len();
    if bytes.len() as u64 != expected {
        let why = format!("expected {expected} bytes, found {}", bytes.len());
        return ladder.fail("length", why);
    }
    let (rows, cols) = (header.n_rows as usize, header.d_model as usize);
    let block = rows * cols * 4;
    let payload = &bytes[ATD_HEADER_LEN..];
    for (name, part) in [("x", &payload[..block]), ("y", &payload[block..])] {
        if let Err(e) = decode_rows(part, rows, cols, DTYPE_F32_LE, name) {
            return ladder.fail("finiteness", e.to_string());
        }
    }
    match read_sidecar(path) {
        Err(e) => ladder.fail("sidecar", e.to_string()),
        Ok(meta) if meta.n_rows != rows || meta.d_model != cols => ladder.fail(
            "sidecar",
            format!(
                "sidecar says {}x{}, header says {rows}x{cols}",
                meta.n_rows, meta.d_model
            ),
        ),
        Ok(_) => ladder.finish(),
    }
}

fn validate_ato(bytes: &[u8]) -> Vec<Check> {
    let ladder = Ladder::new(&["magic", "version", "header", "length", "finiteness", "rank"]);
    let op = match decode_operator(bytes) {
        Ok(op) => op,
        Err(e @ Error::OutOfRange(_)) => return ladder.fail("rank", e.to_string()),
        Err(e) => return ladder.fail(header_stage(&e), e.to_string()),
    };
    match op.check_rank() {
        Ok(()) => ladder.finish(),
        Err(e) => ladder.fail("rank", e.to_string()),
    }
}

fn validate_fdict(bytes: &[u8]) -> Vec<Check> {
    let ladder = Ladder::new(&["magic", "version", "header", "length", "finiteness", "decoders"]);
    match decode_dictionary(bytes) {
        Ok(_) => ladder.finish(),
        Err(e @ (Error::DimensionMismatch(_) | Error::Metadata(_))) => {
            ladder.fail("decoders", e.to_string())
        }
        Err(e) => ladder.fail(header_stage(&e), e.to_string()),
    }
}

pub fn validate(path: &Path, bytes: &[u8]) -> (Option<Format>, Vec<Check>) {
    let format = detect(path, bytes);
    let checks = match format {
        Some(Format::Atd) => validate_atd(path, bytes),
        Some(Format::Ato) => validate_ato(bytes),
        Some(Format::Fdict) => validate_fdict(bytes),
        None => vec![Check {
            name: "magic",
            outcome: Outcome::Fail("unrecognised file type".into()),
        }],
    };
    (format, checks)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ladder_marks_later_checks_skipped() {
        let l = Ladder::new(&["a", "b", "c"]);
        let c = l.fail("b", "nope".into());
        assert_eq!(c[0].outcome, Outcome::Pass);
        assert_eq!(c[1].outcome, Outcome::Fail("nope".into()));
        assert_eq!(c[2].outcome, Outcome::Skip);
        assert_eq!(c[1].to_string(), "FAIL b: nope");
    }

    #[test]
    fn detection_prefers_extension_then_magic() {
        assert_eq!(detect(Path::new("a.ato"), b"ATD1"), Some(Format::Ato));
        assert_eq!(detect(Path::new("a.bin"), b"FDC1...."), Some(Format::Fdict));
        assert_eq!(detect(Path::new("a.bin"), b"zz"), None);
    }
}
