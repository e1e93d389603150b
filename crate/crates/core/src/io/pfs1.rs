//! PFS1: a flat little-endian container for paired feature sets.
//!
//! ```text
//! header  "PFS1" | version u16 | flags u16 | N u64 | D_t u32 | D_s u32 | C u32
//! record  instance_id u64 | class_id u32 | level_id u32
//!         | f_t[D_t] | f_s[D_s] | [logits_t[C] | logits_s[C]] | [ambiguous u8]
//! ```
//!
//! Flag bit 0 selects 64-bit floats (32-bit otherwise), bit 1 marks logits and
//! bit 2 marks ambiguity flags. The byte length is fully determined by the
//! header.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::feature_model::{FeatureRecord, GroupKey, PairedFeatureSet};

pub const MAGIC: [u8; 4] = *b"PFS1";
pub const VERSION: u16 = 1;
pub const HEADER_LEN: usize = 28;

pub const FLAG_F64: u16 = 1;
pub const FLAG_LOGITS: u16 = 1 << 1;
pub const FLAG_AMBIGUOUS: u16 = 1 << 2;
const KNOWN_FLAGS: u16 = FLAG_F64 | FLAG_LOGITS | FLAG_AMBIGUOUS;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Precision {
    F32,
    #[default]
    F64,
}

impl Precision {
    fn width(self) -> usize {
        match self {
            Precision::F32 => 4,
            Precision::F64 => 8,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Pfs1Header {
    pub version: u16,
    pub flags: u16,
    pub n: u64,
    pub dim_t: u32,
    pub dim_s: u32,
    pub num_logits: u32,
}

impl Pfs1Header {
    pub fn precision(&self) -> Precision {
        if self.flags & FLAG_F64 != 0 {
            Precision::F64
        } else {
            Precision::F32
        }
    }

    pub fn has_logits(&self) -> bool {
        self.flags & FLAG_LOGITS != 0
    }

    pub fn has_ambiguous(&self) -> bool {
        self.flags & FLAG_AMBIGUOUS != 0
    }

    pub fn record_len(&self) -> usize {
        let w = self.precision().width();
        let mut floats = self.dim_t as usize + self.dim_s as usize;
        if self.has_logits() {
            floats += 2 * self.num_logits as usize;
        }
        16 + floats * w + usize::from(self.has_ambiguous())
    }

    /// Total container length, `None` on overflow.
    pub fn total_len(&self) -> Option<usize> {
        usize::try_from(self.n)
            .ok()?
            .checked_mul(self.record_len())?
            .checked_add(HEADER_LEN)
    }
}

fn narrow(x: f64) -> Result<f32> {
    let y = x as f32;
    if y.is_finite() {
        Ok(y)
    } else {
        Err(Error::InvalidConfig(format!("value {x} does not fit in 32-bit float")))
    }
}

/// Serializes a valid set. In `F32` mode values are rounded to nearest.
pub fn encode_pfs1(set: &PairedFeatureSet, precision: Precision) -> Result<Vec<u8>> {
    set.ensure_valid()?;
    let num_logits = set.num_logits();
    let with_flags = set.has_ambiguous_flags();
    let mut flags = 0;
    if precision == Precision::F64 {
        flags |= FLAG_F64;
    }
    if num_logits.is_some() {
        flags |= FLAG_LOGITS;
    }
    if with_flags {
        flags |= FLAG_AMBIGUOUS;
    }
    let u32_of = |what: &'static str, v: usize| {
        u32::try_from(v).map_err(|_| Error::InvalidConfig(format!("{what} {v} exceeds u32")))
    };
    let header = Pfs1Header {
        version: VERSION,
        flags,
        n: set.len() as u64,
        dim_t: u32_of("D_t", set.dim_t)?,
        dim_s: u32_of("D_s", set.dim_s)?,
        num_logits: u32_of("C", num_logits.unwrap_or(0))?,
    };

    let mut out = Vec::with_capacity(header.total_len().unwrap_or(HEADER_LEN));
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&header.version.to_le_bytes());
    out.extend_from_slice(&header.flags.to_le_bytes());
    out.extend_from_slice(&header.n.to_le_bytes());
    out.extend_from_slice(&header.dim_t.to_le_bytes());
    out.extend_from_slice(&header.dim_s.to_le_bytes());
    out.extend_from_slice(&header.num_logits.to_le_bytes());

    let put = |out: &mut Vec<u8>, values: &[f64]| -> Result<()> {
        for &v in values {
            match precision {
                Precision::F64 => out.extend_from_slice(&v.to_le_bytes()),
                Precision::F32 => out.extend_from_slice(&narrow(v)?.to_le_bytes()),
            }
        }
        Ok(())
    };
    for r in &set.records {
        out.extend_from_slice(&r.instance_id.to_le_bytes());
        out.extend_from_slice(&r.group.class_id.to_le_bytes());
        out.extend_from_slice(&r.group.level_id.to_le_bytes());
        put(&mut out, &r.f_t)?;
        put(&mut out, &r.f_s)?;
        if let (Some(lt), Some(ls)) = (&r.logits_t, &r.logits_s) {
            put(&mut out, lt)?;
            put(&mut out, ls)?;
        }
        if with_flags {
            out.push(u8::from(r.ambiguous == Some(true)));
        }
    }
    Ok(out)
}

/// Parses and checks the fixed-size header.
pub fn decode_header(bytes: &[u8]) -> Result<Pfs1Header> {
    if bytes.len() < MAGIC.len() {
        return Err(Error::TruncatedPayload {
            needed: HEADER_LEN,
            available: bytes.len(),
        });
    }
    if bytes[..4] != MAGIC {
        return Err(Error::BadMagic);
    }
    if bytes.len() < HEADER_LEN {
        return Err(Error::TruncatedPayload {
            needed: HEADER_LEN,
            available: bytes.len(),
        });
    }
    let u16_at = |o: usize| u16::from_le_bytes([bytes[o], bytes[o + 1]]);
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
    let header = Pfs1Header {
        version: u16_at(4),
        flags: u16_at(6),
        n: u64::from_le_bytes(bytes[8..16].try_into().unwrap()),
        dim_t: u32_at(16),
        dim_s: u32_at(20),
        num_logits: u32_at(24),
    };
    if header.version != VERSION {
        return Err(Error::VersionUnsupported(header.version));
    }
    if header.flags & !KNOWN_FLAGS != 0 {
        return Err(Error::Malformed(format!("unknown flag bits {:#06x}", header.flags)));
    }
    if !header.has_logits() && header.num_logits != 0 {
        return Err(Error::Malformed(format!(
            "C = {} without the logits flag",
            header.num_logits
        )));
    }
    Ok(header)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take<const N: usize>(&mut self) -> [u8; N] {
        let out = self.bytes[self.pos..self.pos + N].try_into().unwrap();
        self.pos += N;
        out
    }

    fn floats(&mut self, n: usize, precision: Precision) -> Vec<f64> {
        (0..n)
            .map(|_| match precision {
                Precision::F64 => f64::from_le_bytes(self.take()),
                Precision::F32 => f64::from(f32::from_le_bytes(self.take())),
            })
            .collect()
    }
}

/// Parses a container. The result is not validated beyond its framing.
pub fn decode_pfs1(bytes: &[u8]) -> Result<PairedFeatureSet> {
    let header = decode_header(bytes)?;
    let expected = header.total_len().ok_or(Error::LengthMismatch {
        expected: usize::MAX,
        actual: bytes.len(),
    })?;
    if bytes.len() < expected {
        return Err(Error::TruncatedPayload {
            needed: expected,
            available: bytes.len(),
        });
    }
    if bytes.len() > expected {
        return Err(Error::LengthMismatch {
            expected,
            actual: bytes.len(),
        });
    }

    let precision = header.precision();
    let (dt, ds, c) = (
        header.dim_t as usize,
        header.dim_s as usize,
        header.num_logits as usize,
    );
    let mut cur = Cursor {
        bytes,
        pos: HEADER_LEN,
    };
    let mut records = Vec::with_capacity(header.n as usize);
    for i in 0..header.n as usize {
        let instance_id = u64::from_le_bytes(cur.take());
        let class_id = u32::from_le_bytes(cur.take());
        let level_id = u32::from_le_bytes(cur.take());
        let f_t = cur.floats(dt, precision);
        let f_s = cur.floats(ds, precision);
        let mut record = FeatureRecord::new(instance_id, GroupKey::new(class_id, level_id), f_t, f_s);
        if header.has_logits() {
            let lt = cur.floats(c, precision);
            let ls = cur.floats(c, precision);
            record = record.with_logits(lt, ls);
        }
        if header.has_ambiguous() {
            let [flag] = cur.take::<1>();
            record.ambiguous = Some(match flag {
                0 => false,
                1 => true,
                b => return Err(Error::Malformed(format!("record {i}: ambiguous byte {b}"))),
            });
        }
        records.push(record);
    }
    Ok(PairedFeatureSet::new(dt, ds, records))
}

pub fn write_pfs1(path: &Path, set: &PairedFeatureSet, precision: Precision) -> Result<()> {
    fs::write(path, encode_pfs1(set, precision)?)?;
    Ok(())
}

pub fn read_pfs1(path: &Path) -> Result<PairedFeatureSet> {
    decode_pfs1(&fs::read(path)?)
}
