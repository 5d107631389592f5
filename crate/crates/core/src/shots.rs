//! Bitstring sample tables and their JSONL persistence.
//!
//! Every sampling backend produces the same record shape, so mitigation and
//! analysis code can stay agnostic about where shots came from. Bits are
//! stored qubit 0 first; for a lattice of `l` sites the first `l` bits are
//! the up sector in snake order and the next `l` the down sector.

use std::fmt;
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::model::Flux;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShotRecord {
    /// Measured bits as a '0'/'1' string, qubit 0 leftmost.
    pub bits: String,
    pub t: f64,
    pub u: f64,
    pub flux: Flux,
    /// Seed of the twirl instance the shot was taken under, if any.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub twirl_id: Option<u64>,
    /// Readout mask of that twirl instance, same encoding as `bits`.
    /// Stored, not applied; undoing it is the mitigation layer's job.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask: Option<String>,
}

impl ShotRecord {
    pub fn bit(&self, q: usize) -> bool {
        self.bits.as_bytes()[q] == b'1'
    }

    pub fn n_qubits(&self) -> usize {
        self.bits.len()
    }
}

/// Pack a bit vector into the record encoding.
pub fn bits_to_string(bits: &[bool]) -> String {
    bits.iter().map(|&b| if b { '1' } else { '0' }).collect()
}

/// Inverse of [`bits_to_string`]; rejects anything but '0' and '1'.
pub fn string_to_bits(s: &str) -> Result<Vec<bool>, ShotError> {
    s.bytes()
        .map(|b| match b {
            b'0' => Ok(false),
            b'1' => Ok(true),
            _ => Err(ShotError::BadBitChar(b as char)),
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ShotError {
    BadBitChar(char),
    InconsistentWidth { expect: usize, got: usize },
    Json(String),
    Io(String),
}

impl fmt::Display for ShotError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ShotError::BadBitChar(c) => write!(f, "invalid bit character {c:?}"),
            ShotError::InconsistentWidth { expect, got } => {
                write!(f, "record width {got} differs from table width {expect}")
            }
            ShotError::Json(e) => write!(f, "shot record JSON: {e}"),
            ShotError::Io(e) => write!(f, "shot table io: {e}"),
        }
    }
}

impl std::error::Error for ShotError {}

/// A homogeneous collection of shots (one qubit count for the whole table).
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ShotTable {
    pub records: Vec<ShotRecord>,
}

impl ShotTable {
    pub fn new(records: Vec<ShotRecord>) -> Result<Self, ShotError> {
        let table = ShotTable { records };
        table.check_width()?;
        Ok(table)
    }

    fn check_width(&self) -> Result<(), ShotError> {
        if let Some(first) = self.records.first() {
            let w = first.bits.len();
            for r in &self.records {
                if r.bits.len() != w {
                    return Err(ShotError::InconsistentWidth { expect: w, got: r.bits.len() });
                }
                if let Some(m) = &r.mask {
                    if m.len() != w {
                        return Err(ShotError::InconsistentWidth { expect: w, got: m.len() });
                    }
                }
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn n_qubits(&self) -> Option<usize> {
        self.records.first().map(|r| r.bits.len())
    }

    /// Decoded bit rows, one `Vec<bool>` per shot.
    pub fn bit_rows(&self) -> Result<Vec<Vec<bool>>, ShotError> {
        self.records.iter().map(|r| string_to_bits(&r.bits)).collect()
    }

    pub fn write_jsonl<W: Write>(&self, mut w: W) -> Result<(), ShotError> {
        for r in &self.records {
            let line =
                serde_json::to_string(r).map_err(|e| ShotError::Json(e.to_string()))?;
            writeln!(w, "{line}").map_err(|e| ShotError::Io(e.to_string()))?;
        }
        Ok(())
    }

    pub fn read_jsonl<R: BufRead>(r: R) -> Result<Self, ShotError> {
        let mut records = Vec::new();
        for line in r.lines() {
            let line = line.map_err(|e| ShotError::Io(e.to_string()))?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: ShotRecord =
                serde_json::from_str(&line).map_err(|e| ShotError::Json(e.to_string()))?;
            string_to_bits(&rec.bits)?;
            records.push(rec);
        }
        ShotTable::new(records)
    }

    pub fn save(&self, path: &std::path::Path) -> Result<(), ShotError> {
        let f = std::fs::File::create(path).map_err(|e| ShotError::Io(e.to_string()))?;
        self.write_jsonl(std::io::BufWriter::new(f))
    }

    pub fn load(path: &std::path::Path) -> Result<Self, ShotError> {
        let f = std::fs::File::open(path).map_err(|e| ShotError::Io(e.to_string()))?;
        Self::read_jsonl(std::io::BufReader::new(f))
    }
}
