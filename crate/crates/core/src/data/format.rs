//! `EPOCHS-v1`: little-endian, no padding.
//!
//! ```text
//! "ASMD" | version u32 | n_trials u32 | n_channels u32 | n_samples u32 | sample_rate f32
//! n_channels × (name_len u8, ASCII name)
//! n_trials × label u8
//! n_trials × subject_id u16
//! n_trials·n_channels·n_samples × f32   (trial, channel, sample)
//! ```
//!
//! Samples are stored as `f32`; values that are not exactly representable are
//! rounded on write. The domain tag is not part of the file.

use std::io::Write;
use std::path::Path;

use super::EpochSet;
use crate::error::{Error, Result};

pub const MAGIC: [u8; 4] = *b"ASMD";
pub const VERSION: u32 = 1;

pub fn encode(set: &EpochSet) -> Result<Vec<u8>> {
    let mut buf = Vec::with_capacity(32 + set.data().len() * 4 + set.n_trials() * 3);
    buf.extend_from_slice(&MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    for n in [set.n_trials(), set.n_channels(), set.n_samples()] {
        let n = u32::try_from(n).map_err(|_| Error::invalid("write_epochs", format!("extent {n} exceeds u32")))?;
        buf.extend_from_slice(&n.to_le_bytes());
    }
    buf.extend_from_slice(&set.sample_rate_hz().to_le_bytes());
    for name in set.channel_names() {
        if !name.is_ascii() || name.len() > u8::MAX as usize {
            return Err(Error::invalid("write_epochs", format!("channel name {name:?} not short ASCII")));
        }
        buf.push(name.len() as u8);
        buf.extend_from_slice(name.as_bytes());
    }
    buf.extend_from_slice(set.labels());
    for id in set.subject_ids() {
        buf.extend_from_slice(&id.to_le_bytes());
    }
    for &x in set.data() {
        buf.extend_from_slice(&(x as f32).to_le_bytes());
    }
    Ok(buf)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            Error::Truncated(format!(
                "{what}: need {n} bytes at offset {}, file has {}",
                self.pos,
                self.bytes.len()
            ))
        })?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }
}

pub fn decode(bytes: &[u8]) -> Result<EpochSet> {
    let mut c = Cursor { bytes, pos: 0 };
    let magic: [u8; 4] = c.take(4, "magic")?.try_into().expect("4 bytes");
    if magic != MAGIC {
        return Err(Error::BadMagic(magic));
    }
    let version = c.u32("version")?;
    if version != VERSION {
        return Err(Error::VersionMismatch(version));
    }
    let n_trials = c.u32("n_trials")? as usize;
    let n_channels = c.u32("n_channels")? as usize;
    let n_samples = c.u32("n_samples")? as usize;
    let rate = f32::from_le_bytes(c.take(4, "sample_rate_hz")?.try_into().expect("4 bytes"));
    let mut names = Vec::with_capacity(n_channels.min(1024));
    for _ in 0..n_channels {
        let len = c.take(1, "channel name length")?[0] as usize;
        let raw = c.take(len, "channel name")?;
        if !raw.is_ascii() {
            return Err(Error::invalid("read_epochs", "channel name is not ASCII"));
        }
        names.push(String::from_utf8(raw.to_vec()).expect("ascii is utf-8"));
    }
    let labels = c.take(n_trials, "labels")?.to_vec();
    let ids = c
        .take(n_trials.saturating_mul(2), "subject ids")?
        .chunks_exact(2)
        .map(|b| u16::from_le_bytes([b[0], b[1]]))
        .collect();
    let n_values = n_trials
        .checked_mul(n_channels)
        .and_then(|v| v.checked_mul(n_samples))
        .and_then(|v| v.checked_mul(4))
        .ok_or_else(|| Error::Truncated("data extent overflows".into()))?;
    let data = c
        .take(n_values, "data")?
        .chunks_exact(4)
        .map(|b| f64::from(f32::from_le_bytes([b[0], b[1], b[2], b[3]])))
        .collect();
    if c.pos != bytes.len() {
        return Err(Error::invalid(
            "read_epochs",
            format!("{} trailing bytes after payload", bytes.len() - c.pos),
        ));
    }
    EpochSet::new(data, n_channels, n_samples, labels, ids, names, rate)
}

pub fn write_epochs(path: impl AsRef<Path>, set: &EpochSet) -> Result<()> {
    let bytes = encode(set)?;
    let mut f = std::fs::File::create(path)?;
    f.write_all(&bytes)?;
    Ok(())
}

pub fn read_epochs(path: impl AsRef<Path>) -> Result<EpochSet> {
    decode(&std::fs::read(path)?)
}
