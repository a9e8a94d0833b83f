//! Inpainting masks as text: one line per grid row, `1` for a known
//! position and `0` for one to generate. Spaces are ignored and `#` starts a
//! comment.

use std::path::Path;

use vqdd_core::sampler::Mask;

use crate::error::{read_file, write_atomic, Error, Result};

pub fn parse_mask(text: &str) -> Result<Mask> {
    let mut rows: Vec<Vec<bool>> = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("");
        let row = line
            .chars()
            .filter(|c| !c.is_whitespace())
            .map(|c| match c {
                '0' => Ok(false),
                '1' => Ok(true),
                _ => Err(Error::Format(format!("mask line {}: unexpected {c:?}", n + 1))),
            })
            .collect::<Result<Vec<_>>>()?;
        if !row.is_empty() {
            rows.push(row);
        }
    }
    let Some(w) = rows.first().map(Vec::len) else {
        return Err(Error::Format("mask is empty".into()));
    };
    if rows.iter().any(|r| r.len() != w) {
        return Err(Error::Shape("mask rows differ in length".into()));
    }
    let h = rows.len();
    Ok(Mask::new(h, w, rows.concat())?)
}

pub fn format_mask(m: &Mask) -> String {
    let mut s = String::new();
    for r in 0..m.h() {
        for c in 0..m.w() {
            s.push(if m.is_known(r * m.w() + c) { '1' } else { '0' });
        }
        s.push('\n');
    }
    s
}

pub fn load_mask(path: &Path) -> Result<Mask> {
    let bytes = read_file(path)?;
    let text = std::str::from_utf8(&bytes).map_err(|_| Error::Format("mask is not UTF-8".into()))?;
    parse_mask(text)
}

pub fn save_mask(path: &Path, m: &Mask) -> Result<()> {
    write_atomic(path, format_mask(m).as_bytes())
}
