//! Toy image and latent-grid datasets.
//!
//! Binary layout, little-endian:
//!
//! ```text
//! "VQDS" | version u32 | kind u8 (0 image, 1 latent) | count u64
//! image:  c u32 | h u32 | w u32, then count·c·h·w pixels as u8 (value·255)
//! latent: h u32 | w u32 | K u32, then count·h·w indices as u16
//! crc32 of everything above
//! ```
//!
//! Files not starting with the magic are read as CSV: a header line
//! `# image C H W` or `# latent H W K`, then one comma-separated row per item
//! in row-major (channel-major for images) order. Other `#` lines and blank
//! lines are skipped.

use std::path::Path;

use vqdd_core::autoencoder::ToyImage;
use vqdd_core::LatentGrid;

use crate::bytes::{Reader, Writer};
use crate::error::{read_file, write_atomic, Error, Result};

pub const MAGIC: [u8; 4] = *b"VQDS";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub enum Dataset {
    Images(Vec<ToyImage>),
    Latents(Vec<LatentGrid>),
}

impl Dataset {
    pub fn len(&self) -> usize {
        match self {
            Dataset::Images(v) => v.len(),
            Dataset::Latents(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn kind(&self) -> &'static str {
        match self {
            Dataset::Images(_) => "image",
            Dataset::Latents(_) => "latent",
        }
    }

    pub fn into_images(self) -> Result<Vec<ToyImage>> {
        match self {
            Dataset::Images(v) => Ok(v),
            Dataset::Latents(_) => Err(Error::Shape("expected an image dataset, found latent grids".into())),
        }
    }

    pub fn into_latents(self) -> Result<Vec<LatentGrid>> {
        match self {
            Dataset::Latents(v) => Ok(v),
            Dataset::Images(_) => Err(Error::Shape("expected a latent dataset, found images".into())),
        }
    }

    /// Common item dimensions: `(c, h, w)` for images, `(h, w, K)` for grids.
    fn dims(&self) -> Result<[usize; 3]> {
        let all: Vec<[usize; 3]> = match self {
            Dataset::Images(v) => v.iter().map(|i| [i.c(), i.h(), i.w()]).collect(),
            Dataset::Latents(v) => v.iter().map(|g| [g.h(), g.w(), g.k()]).collect(),
        };
        let Some(&first) = all.first() else {
            return Err(Error::Usage("refusing to write an empty dataset".into()));
        };
        if all.iter().any(|d| *d != first) {
            return Err(Error::Shape("dataset items differ in shape".into()));
        }
        if first.iter().any(|&d| d > u32::MAX as usize) {
            return Err(Error::Shape("dimension does not fit in 32 bits".into()));
        }
        if matches!(self, Dataset::Latents(_)) && first[2] > 1 << 16 {
            return Err(Error::Shape(format!("K={} exceeds the 16-bit index range", first[2])));
        }
        Ok(first)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let dims = self.dims()?;
        let mut w = Writer::default();
        w.bytes(&MAGIC);
        w.u32(VERSION);
        w.u8(matches!(self, Dataset::Latents(_)) as u8);
        w.u64(self.len() as u64);
        for d in dims {
            w.u32(d as u32);
        }
        match self {
            Dataset::Images(v) => {
                for img in v {
                    for &p in img.pixels() {
                        w.u8(pixel_byte(p));
                    }
                }
            }
            Dataset::Latents(v) => {
                for g in v {
                    for &i in g.indices() {
                        w.u16(i as u16);
                    }
                }
            }
        }
        let crc = crc32fast::hash(&w.buf);
        w.u32(crc);
        Ok(w.buf)
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        if buf.len() < 4 || buf[..4] != MAGIC {
            return match std::str::from_utf8(buf) {
                Ok(text) if text.trim_start().starts_with('#') => Self::from_csv(text),
                _ => {
                    let mut found = [0u8; 4];
                    let n = buf.len().min(4);
                    found[..n].copy_from_slice(&buf[..n]);
                    Err(Error::BadMagic { expected: MAGIC, found })
                }
            };
        }
        if buf.len() < 4 + 4 + 1 + 8 + 12 + 4 {
            return Err(Error::Truncated("dataset header".into()));
        }
        let (body, trailer) = buf.split_at(buf.len() - 4);
        let mut r = Reader::new(body, "dataset");
        r.take(4)?;
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Version { what: "dataset", found: version, supported: VERSION });
        }
        if crc32fast::hash(body).to_le_bytes() != trailer {
            return Err(Error::Checksum("dataset".into()));
        }
        let kind = r.u8()?;
        let count = r.usize()?;
        let dims = [r.u32()? as usize, r.u32()? as usize, r.u32()? as usize];
        let per_item = match kind {
            0 => dims[0] * dims[1] * dims[2],
            1 => 2 * dims[0] * dims[1],
            _ => return Err(Error::Format(format!("dataset kind {kind}"))),
        };
        if count == 0 || per_item == 0 {
            return Err(Error::Format("dataset has no items or zero-sized items".into()));
        }
        if count.checked_mul(per_item) != Some(r.remaining()) {
            return Err(Error::Truncated("dataset payload".into()));
        }
        let ds = if kind == 0 {
            let [c, h, w] = dims;
            let items = (0..count)
                .map(|_| {
                    let px = r.take(c * h * w)?.iter().map(|&b| b as f64 / 255.0).collect();
                    Ok(ToyImage::new(c, h, w, px)?)
                })
                .collect::<Result<_>>()?;
            Dataset::Images(items)
        } else {
            let [h, w, k] = dims;
            let items = (0..count)
                .map(|_| {
                    let idx = (0..h * w).map(|_| r.u16().map(usize::from)).collect::<Result<Vec<_>>>()?;
                    latent(h, w, k, idx)
                })
                .collect::<Result<_>>()?;
            Dataset::Latents(items)
        };
        r.finish()?;
        Ok(ds)
    }

    pub fn to_csv(&self) -> Result<String> {
        let [a, b, c] = self.dims()?;
        let mut s = format!("# {} {a} {b} {c}\n", self.kind());
        let mut row = |vals: &mut dyn Iterator<Item = String>| {
            s.push_str(&vals.collect::<Vec<_>>().join(","));
            s.push('\n');
        };
        match self {
            Dataset::Images(v) => v.iter().for_each(|i| row(&mut i.pixels().iter().map(|p| format!("{p:?}")))),
            Dataset::Latents(v) => v.iter().for_each(|g| row(&mut g.indices().iter().map(|i| i.to_string()))),
        }
        Ok(s)
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l.trim())).filter(|(_, l)| !l.is_empty());
        let Some((_, header)) = lines.next() else {
            return Err(Error::Format("empty CSV dataset".into()));
        };
        let fields: Vec<&str> = header.trim_start_matches('#').split_whitespace().collect();
        let parse_dims = |f: &[&str]| -> Result<[usize; 3]> {
            let mut d = [0; 3];
            for (slot, s) in d.iter_mut().zip(f) {
                *slot = s.parse().map_err(|_| Error::Format(format!("CSV header dimension {s:?}")))?;
            }
            Ok(d)
        };
        let (is_image, [a, b, c]) = match fields.as_slice() {
            ["image", rest @ ..] if rest.len() == 3 => (true, parse_dims(rest)?),
            ["latent", rest @ ..] if rest.len() == 3 => (false, parse_dims(rest)?),
            _ => return Err(Error::Format(format!("CSV header {header:?}; expected '# image C H W' or '# latent H W K'"))),
        };
        let width = if is_image { a * b * c } else { a * b };
        let mut images = Vec::new();
        let mut grids = Vec::new();
        for (n, line) in lines.filter(|(_, l)| !l.starts_with('#')) {
            let cells: Vec<&str> = line.split(',').map(str::trim).collect();
            if cells.len() != width {
                return Err(Error::Shape(format!("line {n}: {} values, expected {width}", cells.len())));
            }
            if is_image {
                let px = cells
                    .iter()
                    .map(|s| s.parse::<f64>().map_err(|_| Error::Format(format!("line {n}: pixel {s:?}"))))
                    .collect::<Result<Vec<_>>>()?;
                images.push(ToyImage::new(a, b, c, px)?);
            } else {
                let idx = cells
                    .iter()
                    .map(|s| s.parse::<usize>().map_err(|_| Error::Format(format!("line {n}: index {s:?}"))))
                    .collect::<Result<Vec<_>>>()?;
                grids.push(latent(a, b, c, idx)?);
            }
        }
        let ds = if is_image { Dataset::Images(images) } else { Dataset::Latents(grids) };
        if ds.is_empty() {
            return Err(Error::Format("CSV dataset has no rows".into()));
        }
        Ok(ds)
    }

    /// Reads either format, telling them apart by the magic.
    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&read_file(path)?)
    }

    /// Writes CSV when the path ends in `.csv`, binary otherwise.
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("csv")) {
            self.to_csv()?.into_bytes()
        } else {
            self.to_bytes()?
        };
        write_atomic(path, &bytes)
    }
}

fn pixel_byte(p: f64) -> u8 {
    (p.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn latent(h: usize, w: usize, k: usize, idx: Vec<usize>) -> Result<LatentGrid> {
    if let Some(&bad) = idx.iter().find(|&&i| i >= k) {
        return Err(Error::Shape(format!("index {bad} is not below K={k}")));
    }
    Ok(LatentGrid::new(h, w, k, idx)?)
}
