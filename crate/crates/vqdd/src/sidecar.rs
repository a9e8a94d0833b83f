//! The `.dist` file written next to every generated dataset.
//!
//! Plain text, one record per line, floats in shortest round-trip form:
//!
//! ```text
//! kind patterns
//! shape H W K
//! coupling 0.25
//! grid <prob> i_0 i_1 ...        (one per support grid)
//! ```
//!
//! or
//!
//! ```text
//! kind clusters
//! layout C PATCH
//! noise 0.05
//! image H W
//! prototype v_0 v_1 ...          (one per prototype)
//! ```

use std::path::{Path, PathBuf};

use vqdd_core::toy::ClusterSpec;
use vqdd_core::{GridDistribution, LatentGrid};

use crate::error::{read_file, write_atomic, Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub enum Sidecar {
    Patterns { coupling: f64, dist: GridDistribution },
    Clusters { spec: ClusterSpec, h: usize, w: usize },
}

/// `data.vqds` → `data.vqds.dist`.
pub fn sidecar_path(data: &Path) -> PathBuf {
    let mut s = data.as_os_str().to_owned();
    s.push(".dist");
    PathBuf::from(s)
}

fn join<T: std::fmt::Debug>(v: impl IntoIterator<Item = T>) -> String {
    v.into_iter().map(|x| format!("{x:?}")).collect::<Vec<_>>().join(" ")
}

impl Sidecar {
    pub fn to_text(&self) -> String {
        match self {
            Sidecar::Patterns { coupling, dist } => {
                let (h, w, k) = dist.shape();
                let mut s = format!("kind patterns\nshape {h} {w} {k}\ncoupling {coupling:?}\n");
                for (g, p) in dist.iter() {
                    s.push_str(&format!("grid {p:?} {}\n", join(g.indices())));
                }
                s
            }
            Sidecar::Clusters { spec, h, w } => {
                let mut s = format!(
                    "kind clusters\nlayout {} {}\nnoise {:?}\nimage {h} {w}\n",
                    spec.c, spec.patch, spec.noise
                );
                for i in 0..spec.k() {
                    s.push_str(&format!("prototype {}\n", join(spec.prototype(i))));
                }
                s
            }
        }
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let bad = |what: &str| Error::Format(format!("distribution file: {what}"));
        let mut kind = None;
        let mut shape = None;
        let mut coupling = None;
        let mut grids = Vec::new();
        let mut weights = Vec::new();
        let mut layout = None;
        let mut noise = None;
        let mut image = None;
        let mut prototypes = Vec::new();
        for line in text.lines().map(str::trim).filter(|l| !l.is_empty() && !l.starts_with('#')) {
            let mut f = line.split_whitespace();
            let key = f.next().unwrap();
            let rest: Vec<&str> = f.collect();
            let nums = |n: Option<usize>| -> Result<Vec<usize>> {
                let v = rest.iter().map(|s| s.parse::<usize>()).collect::<std::result::Result<Vec<_>, _>>().map_err(|_| bad(line))?;
                if n.is_some_and(|n| n != v.len()) {
                    return Err(bad(line));
                }
                Ok(v)
            };
            let reals = || -> Result<Vec<f64>> {
                rest.iter().map(|s| s.parse::<f64>().map_err(|_| bad(line))).collect()
            };
            match key {
                "kind" if rest.len() == 1 => kind = Some(rest[0].to_string()),
                "shape" => shape = Some(nums(Some(3))?),
                "coupling" if rest.len() == 1 => coupling = Some(reals()?[0]),
                "grid" if !rest.is_empty() => {
                    let p: f64 = rest[0].parse().map_err(|_| bad(line))?;
                    let idx = rest[1..].iter().map(|s| s.parse::<usize>()).collect::<std::result::Result<Vec<_>, _>>().map_err(|_| bad(line))?;
                    weights.push(p);
                    grids.push(idx);
                }
                "layout" => layout = Some(nums(Some(2))?),
                "noise" if rest.len() == 1 => noise = Some(reals()?[0]),
                "image" => image = Some(nums(Some(2))?),
                "prototype" => prototypes.push(reals()?),
                _ => return Err(bad(line)),
            }
        }
        match kind.as_deref() {
            Some("patterns") => {
                let s = shape.ok_or_else(|| bad("missing shape"))?;
                let (h, w, k) = (s[0], s[1], s[2]);
                let grids = grids
                    .into_iter()
                    .map(|idx| {
                        if idx.iter().any(|&i| i >= k) {
                            return Err(Error::Shape(format!("grid index not below K={k}")));
                        }
                        Ok(LatentGrid::new(h, w, k, idx)?)
                    })
                    .collect::<Result<Vec<_>>>()?;
                let dist = GridDistribution::new(grids, weights)?;
                Ok(Sidecar::Patterns { coupling: coupling.ok_or_else(|| bad("missing coupling"))?, dist })
            }
            Some("clusters") => {
                let l = layout.ok_or_else(|| bad("missing layout"))?;
                let im = image.ok_or_else(|| bad("missing image"))?;
                let n = l[0] * l[1] * l[1];
                if prototypes.is_empty() || n == 0 || prototypes.iter().any(|p| p.len() != n) {
                    return Err(Error::Shape(format!("prototypes must each have {n} values")));
                }
                let spec = ClusterSpec { c: l[0], patch: l[1], prototypes: prototypes.concat(), noise: noise.ok_or_else(|| bad("missing noise"))? };
                Ok(Sidecar::Clusters { spec, h: im[0], w: im[1] })
            }
            _ => Err(bad("missing or unknown kind")),
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = read_file(path)?;
        Self::from_text(std::str::from_utf8(&bytes).map_err(|_| Error::Format("distribution file is not UTF-8".into()))?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, self.to_text().as_bytes())
    }
}
