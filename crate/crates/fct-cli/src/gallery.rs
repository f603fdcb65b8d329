//! Binary gallery persistence.
//!
//! Layout, all little-endian: magic `FCTG`, model version `u32`, flags `u8`
//! (bit 0 set when embeddings are unit-normalized), `d_emb: u32`,
//! `d_side: u32`, record count `u64`, then per record `id: u64`,
//! `class: u32`, `d_emb` f32 values, `d_side` f32 values, and finally a
//! CRC32 over everything after the magic. Embeddings are computed in f64
//! but stored as f32; loading widens them back, so a save/load round trip
//! is bit-exact on the stored f32 payload.

use std::path::Path;

use fct_core::retrieval::{GalleryRecord, GalleryStore};
use fct_core::{Error, Result};

use crate::io::{atomic_write, read_bytes};

const MAGIC: &[u8; 4] = b"FCTG";
const HEADER_LEN: usize = 4 + 4 + 1 + 4 + 4 + 8;

fn record_len(d_emb: usize, d_side: usize) -> usize {
    8 + 4 + 4 * (d_emb + d_side)
}

pub fn save_gallery(store: &GalleryStore, path: &Path) -> Result<()> {
    let mut buf =
        Vec::with_capacity(HEADER_LEN + store.len() * record_len(store.d_emb(), store.d_side()) + 4);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&store.model_version().to_le_bytes());
    buf.push(u8::from(store.normalized()));
    buf.extend_from_slice(&(store.d_emb() as u32).to_le_bytes());
    buf.extend_from_slice(&(store.d_side() as u32).to_le_bytes());
    buf.extend_from_slice(&(store.len() as u64).to_le_bytes());
    for rec in store.records() {
        buf.extend_from_slice(&rec.id.to_le_bytes());
        buf.extend_from_slice(&rec.class_label.to_le_bytes());
        for &v in rec.embedding.iter().chain(&rec.side_info) {
            buf.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&buf[4..]);
    buf.extend_from_slice(&crc.to_le_bytes());
    atomic_write(path, &buf)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let slice = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(slice)
            }
            None => Err(Error::Data("gallery file is truncated".into())),
        }
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f32(&mut self) -> Result<f64> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()) as f64)
    }
}

pub fn load_gallery(path: &Path) -> Result<GalleryStore> {
    let bytes = read_bytes(path)?;
    if bytes.len() < HEADER_LEN + 4 {
        return Err(Error::Data(format!("{} is too short to be a gallery", path.display())));
    }
    if &bytes[..4] != MAGIC {
        return Err(Error::Data(format!("{} is not a gallery file", path.display())));
    }
    let (payload, crc_bytes) = bytes.split_at(bytes.len() - 4);
    let declared_crc = u32::from_le_bytes(crc_bytes.try_into().unwrap());
    let actual_crc = crc32fast::hash(&payload[4..]);
    if declared_crc != actual_crc {
        return Err(Error::Data(format!(
            "{} is corrupted: checksum {actual_crc:08x} does not match {declared_crc:08x}",
            path.display()
        )));
    }
    let mut cur = Cursor { bytes: payload, pos: 4 };
    let version = cur.u32()?;
    let flags = cur.take(1)?[0];
    if flags & !1 != 0 {
        return Err(Error::Data(format!("unknown gallery flags {flags:#04x}")));
    }
    let normalized = flags & 1 != 0;
    let d_emb = cur.u32()? as usize;
    let d_side = cur.u32()? as usize;
    let count = cur.u64()? as usize;
    let expected = HEADER_LEN + count * record_len(d_emb, d_side);
    if payload.len() != expected {
        return Err(Error::Data(format!(
            "{} declares {count} records but holds {} payload bytes instead of {expected}",
            path.display(),
            payload.len()
        )));
    }
    let mut store = GalleryStore::new(d_emb, d_side, version, normalized)?;
    for _ in 0..count {
        let id = cur.u64()?;
        let class_label = cur.u32()?;
        let mut embedding = Vec::with_capacity(d_emb);
        for _ in 0..d_emb {
            embedding.push(cur.f32()?);
        }
        let mut side_info = Vec::with_capacity(d_side);
        for _ in 0..d_side {
            side_info.push(cur.f32()?);
        }
        store.push(GalleryRecord { id, class_label, embedding, side_info })?;
    }
    Ok(store)
}
