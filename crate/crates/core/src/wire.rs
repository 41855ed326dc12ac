//! Byte-stable encodings: uploaded records, dispatch messages and checkpoints.
//! All integers and floats are little-endian.
//!
//! Record (32 bytes): `client_id u32 | base_seed u64 | index u64 | dd f64 | batch_size u32`.
//!
//! Dispatch message: a 24-byte header
//! `magic "FWDD" | version u16 | kind u8 | 0u8 | round u32 | client_id u32 | n_params u32 | n_seeds u32`,
//! then `n_params` f64 trainable values and `n_seeds` pairs of `base_seed u64, index u64`.
//!
//! Checkpoint: `magic "FWDFEDCK" | version u32 | round u64 | mask tag u8 | rank u32 | dim u64`
//! followed by `dim` f64 values.

use std::io::{Read, Write};

use crate::error::{Error, Result};
use crate::fwdgrad::{ForwardGradientRecord, PerturbationSeed};
use crate::model::ParamVector;
use crate::peft::TrainableMask;

pub const RECORD_BYTES: usize = 32;
pub const SEED_BYTES: usize = 16;
pub const DISPATCH_HEADER_BYTES: usize = 24;
pub const RECORD_CSV_HEADER: &str = "client_id,base_seed,index,dd,batch_size";

const DISPATCH_MAGIC: &[u8; 4] = b"FWDD";
const DISPATCH_VERSION: u16 = 1;
const CHECKPOINT_MAGIC: &[u8; 8] = b"FWDFEDCK";
const CHECKPOINT_VERSION: u32 = 1;

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn new(buf: &'a [u8]) -> Self {
        Cursor { buf, pos: 0 }
    }

    fn take<const N: usize>(&mut self) -> Result<[u8; N]> {
        let end = self.pos + N;
        let bytes = self
            .buf
            .get(self.pos..end)
            .ok_or_else(|| Error::Wire(format!("truncated at byte {}", self.pos)))?;
        self.pos = end;
        Ok(bytes.try_into().expect("slice length is N"))
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take::<1>()?[0])
    }
    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take()?))
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take()?))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take()?))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take()?))
    }

    fn finish(&self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(Error::Wire(format!("{} trailing bytes", self.buf.len() - self.pos)));
        }
        Ok(())
    }
}

pub fn encode_record(r: &ForwardGradientRecord) -> [u8; RECORD_BYTES] {
    let mut out = [0u8; RECORD_BYTES];
    out[0..4].copy_from_slice(&r.client_id.to_le_bytes());
    out[4..12].copy_from_slice(&r.seed.base_seed.to_le_bytes());
    out[12..20].copy_from_slice(&r.seed.index.to_le_bytes());
    out[20..28].copy_from_slice(&r.dd.to_le_bytes());
    out[28..32].copy_from_slice(&r.batch_size.to_le_bytes());
    out
}

pub fn decode_record(bytes: &[u8]) -> Result<ForwardGradientRecord> {
    let mut c = Cursor::new(bytes);
    let r = ForwardGradientRecord {
        client_id: c.u32()?,
        seed: PerturbationSeed {
            base_seed: c.u64()?,
            index: c.u64()?,
        },
        dd: c.f64()?,
        batch_size: c.u32()?,
    };
    c.finish()?;
    if !r.dd.is_finite() {
        return Err(Error::Wire("record carries a non-finite derivative".into()));
    }
    Ok(r)
}

/// CSV row without trailing newline; `dd` uses the shortest exact decimal form.
pub fn record_csv_row(r: &ForwardGradientRecord) -> String {
    format!(
        "{},{},{},{:?},{}",
        r.client_id, r.seed.base_seed, r.seed.index, r.dd, r.batch_size
    )
}

pub fn parse_record_csv_row(row: &str) -> Result<ForwardGradientRecord> {
    let fields: Vec<&str> = row.trim_end_matches(['\r', '\n']).split(',').collect();
    if fields.len() != 5 {
        return Err(Error::Wire(format!("expected 5 fields, got {}", fields.len())));
    }
    let bad = |name: &str| Error::Wire(format!("bad `{name}` field"));
    let r = ForwardGradientRecord {
        client_id: fields[0].parse().map_err(|_| bad("client_id"))?,
        seed: PerturbationSeed {
            base_seed: fields[1].parse().map_err(|_| bad("base_seed"))?,
            index: fields[2].parse().map_err(|_| bad("index"))?,
        },
        dd: fields[3].parse().map_err(|_| bad("dd"))?,
        batch_size: fields[4].parse().map_err(|_| bad("batch_size"))?,
    };
    if !r.dd.is_finite() {
        return Err(bad("dd"));
    }
    Ok(r)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum DispatchKind {
    /// Current trainable weights plus a first seed list.
    Model = 0,
    /// Extra seeds for a client that already holds this round's weights.
    Seeds = 1,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DispatchMessage {
    pub kind: DispatchKind,
    pub round: u32,
    pub client_id: u32,
    pub trainable: Vec<f64>,
    pub seeds: Vec<PerturbationSeed>,
}

impl DispatchMessage {
    /// Encoded length, `DISPATCH_HEADER_BYTES + 8 * params + 16 * seeds`.
    pub fn encoded_len(n_params: usize, n_seeds: usize) -> usize {
        DISPATCH_HEADER_BYTES + 8 * n_params + SEED_BYTES * n_seeds
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(Self::encoded_len(self.trainable.len(), self.seeds.len()));
        out.extend_from_slice(DISPATCH_MAGIC);
        out.extend_from_slice(&DISPATCH_VERSION.to_le_bytes());
        out.push(self.kind as u8);
        out.push(0);
        out.extend_from_slice(&self.round.to_le_bytes());
        out.extend_from_slice(&self.client_id.to_le_bytes());
        out.extend_from_slice(&(self.trainable.len() as u32).to_le_bytes());
        out.extend_from_slice(&(self.seeds.len() as u32).to_le_bytes());
        for v in &self.trainable {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for s in &self.seeds {
            out.extend_from_slice(&s.base_seed.to_le_bytes());
            out.extend_from_slice(&s.index.to_le_bytes());
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut c = Cursor::new(bytes);
        if &c.take::<4>()? != DISPATCH_MAGIC {
            return Err(Error::Wire("bad dispatch magic".into()));
        }
        let version = c.u16()?;
        if version != DISPATCH_VERSION {
            return Err(Error::Wire(format!("unsupported dispatch version {version}")));
        }
        let kind = match c.u8()? {
            0 => DispatchKind::Model,
            1 => DispatchKind::Seeds,
            k => return Err(Error::Wire(format!("unknown dispatch kind {k}"))),
        };
        c.u8()?;
        let round = c.u32()?;
        let client_id = c.u32()?;
        let n_params = c.u32()? as usize;
        let n_seeds = c.u32()? as usize;
        let trainable = (0..n_params).map(|_| c.f64()).collect::<Result<Vec<_>>>()?;
        let seeds = (0..n_seeds)
            .map(|_| {
                Ok(PerturbationSeed {
                    base_seed: c.u64()?,
                    index: c.u64()?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        c.finish()?;
        Ok(DispatchMessage {
            kind,
            round,
            client_id,
            trainable,
            seeds,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub round: u64,
    pub mask: TrainableMask,
    pub trainable: ParamVector,
}

fn mask_descriptor(mask: TrainableMask) -> (u8, u32) {
    match mask {
        TrainableMask::Full => (0, 0),
        TrainableMask::BiasOnly => (1, 0),
        TrainableMask::LowRank { rank } => (2, rank as u32),
    }
}

impl Checkpoint {
    pub fn write_to<W: Write>(&self, mut out: W) -> Result<()> {
        let (tag, rank) = mask_descriptor(self.mask);
        out.write_all(CHECKPOINT_MAGIC)?;
        out.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        out.write_all(&self.round.to_le_bytes())?;
        out.write_all(&[tag])?;
        out.write_all(&rank.to_le_bytes())?;
        out.write_all(&(self.trainable.len() as u64).to_le_bytes())?;
        for v in self.trainable.iter() {
            out.write_all(&v.to_le_bytes())?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn read_from<R: Read>(mut input: R) -> Result<Self> {
        let mut bytes = Vec::new();
        input.read_to_end(&mut bytes)?;
        let mut c = Cursor::new(&bytes);
        if &c.take::<8>()? != CHECKPOINT_MAGIC {
            return Err(Error::Wire("bad checkpoint magic".into()));
        }
        let version = c.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Wire(format!("unsupported checkpoint version {version}")));
        }
        let round = c.u64()?;
        let tag = c.u8()?;
        let rank = c.u32()? as usize;
        let mask = match tag {
            0 => TrainableMask::Full,
            1 => TrainableMask::BiasOnly,
            2 => TrainableMask::LowRank { rank },
            t => return Err(Error::Wire(format!("unknown mask tag {t}"))),
        };
        let dim = c.u64()? as usize;
        let values = (0..dim).map(|_| c.f64()).collect::<Result<Vec<_>>>()?;
        c.finish()?;
        Ok(Checkpoint {
            round,
            mask,
            trainable: values.into(),
        })
    }
}
