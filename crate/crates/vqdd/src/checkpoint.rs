//! Single-file checkpoints with a checksummed section table.
//!
//! Layout, all little-endian:
//!
//! ```text
//! "VQDD" | version u32 | section count u32
//! per section: name_len u16 | name | offset u64 | len u64 | crc32 u32
//! crc32 of everything above
//! section payloads, back to back, in table order
//! ```
//!
//! Offsets must tile the payload area exactly; absent parts have no entry.

use std::path::Path;

use vqdd_core::autoencoder::ToyAutoencoder;
use vqdd_core::codebook::Codebook;
use vqdd_core::denoiser::{AdamState, DenoiserConfig, DenoiserModel};
use vqdd_core::Schedule;

use crate::bytes::{Reader, Writer};
use crate::error::{read_file, write_atomic, Error, Result};

pub const MAGIC: [u8; 4] = *b"VQDD";
pub const VERSION: u32 = 1;

const SECTIONS: [&str; 7] = ["schedule", "codebook", "autoencoder", "denoiser", "adam", "rng_seed", "config_hash"];

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Checkpoint {
    pub schedule: Option<Schedule>,
    pub codebook: Option<Codebook>,
    pub autoencoder: Option<ToyAutoencoder>,
    pub denoiser: Option<DenoiserModel>,
    pub adam: Option<AdamState>,
    pub rng_seed: Option<u64>,
    pub config_hash: Option<[u8; 32]>,
}

fn put_schedule(w: &mut Writer, s: &Schedule) {
    w.usize(s.steps());
    w.f64(s.offset());
    w.f64(s.beta_cap());
    w.f64s(s.betas());
}

fn get_schedule(r: &mut Reader) -> Result<Schedule> {
    let steps = r.usize()?;
    let offset = r.f64()?;
    let cap = r.f64()?;
    let betas = r.f64s()?;
    Ok(Schedule::from_betas(steps, offset, cap, betas)?)
}

fn put_codebook(w: &mut Writer, cb: &Codebook) {
    w.usize(cb.k());
    w.usize(cb.d());
    w.f64s(cb.vectors());
    for &h in cb.hit_counts() {
        w.u64(h);
    }
}

fn get_codebook(r: &mut Reader) -> Result<Codebook> {
    let k = r.usize()?;
    let d = r.usize()?;
    let v = r.f64s()?;
    if k.checked_mul(8).is_none_or(|b| b > r.remaining()) {
        return Err(Error::Truncated("codebook section".into()));
    }
    let hits = (0..k).map(|_| r.u64()).collect::<Result<Vec<_>>>()?;
    Ok(Codebook::with_hits(k, d, v, hits)?)
}

fn put_autoencoder(w: &mut Writer, ae: &ToyAutoencoder) {
    w.usize(ae.c());
    w.usize(ae.patch());
    w.usize(ae.d());
    for block in [&ae.enc_w, &ae.enc_b, &ae.dec_w, &ae.dec_b] {
        w.f64s(block);
    }
}

fn get_autoencoder(r: &mut Reader) -> Result<ToyAutoencoder> {
    let (c, p, d) = (r.usize()?, r.usize()?, r.usize()?);
    let (ew, eb, dw, db) = (r.f64s()?, r.f64s()?, r.f64s()?, r.f64s()?);
    Ok(ToyAutoencoder::from_parts(c, p, d, ew, eb, dw, db)?)
}

fn put_denoiser(w: &mut Writer, m: &DenoiserModel) {
    let c = m.config();
    for v in [c.k, c.h, c.w, c.embed_dim, c.time_dim, c.hidden[0], c.hidden[1]] {
        w.usize(v);
    }
    w.f64(c.time_base);
    w.f64s(m.params());
}

fn get_denoiser(r: &mut Reader) -> Result<DenoiserModel> {
    let mut v = [0usize; 7];
    for x in &mut v {
        *x = r.usize()?;
    }
    let time_base = r.f64()?;
    let config = DenoiserConfig {
        k: v[0],
        h: v[1],
        w: v[2],
        embed_dim: v[3],
        time_dim: v[4],
        time_base,
        hidden: [v[5], v[6]],
    };
    let params = r.f64s()?;
    Ok(DenoiserModel::from_params(config, params)?)
}

fn put_adam(w: &mut Writer, a: &AdamState) {
    w.u64(a.step);
    for x in [a.beta1, a.beta2, a.eps, a.lr] {
        w.f64(x);
    }
    w.f64s(&a.m);
    w.f64s(&a.v);
}

fn get_adam(r: &mut Reader) -> Result<AdamState> {
    let step = r.u64()?;
    let (beta1, beta2, eps, lr) = (r.f64()?, r.f64()?, r.f64()?, r.f64()?);
    let m = r.f64s()?;
    let v = r.f64s()?;
    if m.len() != v.len() {
        return Err(Error::Format("adam section: moment vectors differ in length".into()));
    }
    Ok(AdamState { step, m, v, beta1, beta2, eps, lr })
}

impl Checkpoint {
    fn sections(&self) -> Vec<(&'static str, Vec<u8>)> {
        let mut out = Vec::new();
        let mut push = |name, f: &dyn Fn(&mut Writer)| {
            let mut w = Writer::default();
            f(&mut w);
            out.push((name, w.buf));
        };
        if let Some(s) = &self.schedule {
            push("schedule", &|w| put_schedule(w, s));
        }
        if let Some(cb) = &self.codebook {
            push("codebook", &|w| put_codebook(w, cb));
        }
        if let Some(ae) = &self.autoencoder {
            push("autoencoder", &|w| put_autoencoder(w, ae));
        }
        if let Some(m) = &self.denoiser {
            push("denoiser", &|w| put_denoiser(w, m));
        }
        if let Some(a) = &self.adam {
            push("adam", &|w| put_adam(w, a));
        }
        if let Some(s) = self.rng_seed {
            push("rng_seed", &|w| w.u64(s));
        }
        if let Some(h) = &self.config_hash {
            push("config_hash", &|w| w.bytes(h));
        }
        out
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let sections = self.sections();
        let table_len: usize = sections.iter().map(|(n, _)| 2 + n.len() + 8 + 8 + 4).sum();
        let mut offset = (12 + table_len + 4) as u64;
        let mut w = Writer::default();
        w.bytes(&MAGIC);
        w.u32(VERSION);
        w.u32(sections.len() as u32);
        for (name, body) in &sections {
            w.u16(name.len() as u16);
            w.bytes(name.as_bytes());
            w.u64(offset);
            w.u64(body.len() as u64);
            w.u32(crc32fast::hash(body));
            offset += body.len() as u64;
        }
        let crc = crc32fast::hash(&w.buf);
        w.u32(crc);
        for (_, body) in &sections {
            w.bytes(body);
        }
        w.buf
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut r = Reader::new(buf, "checkpoint header");
        let magic: [u8; 4] = r.take(4)?.try_into().unwrap();
        if magic != MAGIC {
            return Err(Error::BadMagic { expected: MAGIC, found: magic });
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Version { what: "checkpoint", found: version, supported: VERSION });
        }
        let count = r.u32()? as usize;
        if count > SECTIONS.len() {
            return Err(Error::Format(format!("checkpoint claims {count} sections")));
        }
        let mut table = Vec::with_capacity(count);
        for _ in 0..count {
            let n = r.u16()? as usize;
            let name = r.take(n)?.to_vec();
            let (offset, len, crc) = (r.u64()?, r.u64()?, r.u32()?);
            table.push((name, offset, len, crc));
        }
        let table_end = buf.len() - r.remaining();
        if r.u32()? != crc32fast::hash(&buf[..table_end]) {
            return Err(Error::Checksum("section table".into()));
        }

        let mut cp = Checkpoint::default();
        let mut expected = (table_end + 4) as u64;
        let mut seen = Vec::new();
        for (raw_name, offset, len, crc) in table {
            let name = String::from_utf8_lossy(&raw_name).into_owned();
            let Some(&known) = SECTIONS.iter().find(|s| s.as_bytes() == raw_name.as_slice()) else {
                return Err(Error::UnknownSection { name, version });
            };
            if seen.contains(&known) {
                return Err(Error::Format(format!("duplicate section {known}")));
            }
            seen.push(known);
            if offset != expected {
                return Err(Error::Format(format!("section {known} at offset {offset}, expected {expected}")));
            }
            let end = offset.checked_add(len).filter(|&e| e <= buf.len() as u64);
            let Some(end) = end else {
                return Err(Error::Truncated(format!("section {known}")));
            };
            let body = &buf[offset as usize..end as usize];
            if crc32fast::hash(body) != crc {
                return Err(Error::Checksum(format!("section {known}")));
            }
            expected = end;
            let what = format!("section {known}");
            let mut r = Reader::new(body, &what);
            match known {
                "schedule" => cp.schedule = Some(get_schedule(&mut r)?),
                "codebook" => cp.codebook = Some(get_codebook(&mut r)?),
                "autoencoder" => cp.autoencoder = Some(get_autoencoder(&mut r)?),
                "denoiser" => cp.denoiser = Some(get_denoiser(&mut r)?),
                "adam" => cp.adam = Some(get_adam(&mut r)?),
                "rng_seed" => cp.rng_seed = Some(r.u64()?),
                "config_hash" => cp.config_hash = Some(r.take(32)?.try_into().unwrap()),
                _ => unreachable!(),
            }
            r.finish()?;
        }
        if expected != buf.len() as u64 {
            return Err(Error::Format(format!("{} bytes after the last section", buf.len() as u64 - expected)));
        }
        Ok(cp)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&read_file(path)?)
    }

    pub fn require_schedule(&self) -> Result<&Schedule> {
        self.schedule.as_ref().ok_or_else(|| Error::Format("checkpoint has no schedule section".into()))
    }

    pub fn require_codebook(&self) -> Result<&Codebook> {
        self.codebook.as_ref().ok_or_else(|| Error::Format("checkpoint has no codebook section".into()))
    }

    pub fn require_autoencoder(&self) -> Result<&ToyAutoencoder> {
        self.autoencoder.as_ref().ok_or_else(|| Error::Format("checkpoint has no autoencoder section".into()))
    }

    pub fn require_denoiser(&self) -> Result<&DenoiserModel> {
        self.denoiser.as_ref().ok_or_else(|| Error::Format("checkpoint has no denoiser section".into()))
    }
}
