//! Depth samples and manifest-driven dataset splits.
//!
//! `<root>/<split>.manifest`:
//!
//! ```text
//! # comment
//! depth_scale: 0.0001
//! <id> <rgb.ppm> <raw.pgm> <gt.pgm> <valid.pgm> <transp.pgm>
//! ```
//!
//! Paths are relative to `root`; depth is the stored 16-bit value times
//! `depth_scale` meters, 0 meaning no measurement.

use std::fs;
use std::path::{Path, PathBuf};

use hdc_tensor::Tensor;

use super::netpbm::{read_pgm, read_ppm, write_pgm16, write_pgm8, write_ppm, Image};
use crate::error::{io_err, Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct DepthSample {
    pub id: String,
    pub width: usize,
    pub height: usize,
    /// Planar `[3, H, W]` in `[0, 1]`.
    pub rgb: Vec<f32>,
    /// Meters; 0 marks a missing reading.
    pub raw: Vec<f32>,
    pub gt: Vec<f32>,
    pub valid: Vec<bool>,
    pub transparent: Vec<bool>,
}

impl DepthSample {
    pub fn pixels(&self) -> usize {
        self.width * self.height
    }

    /// Pixels scored at evaluation: transparent and valid, or every valid
    /// pixel when the sample has no transparent region.
    pub fn eval_mask(&self) -> Vec<bool> {
        let m: Vec<bool> = self.valid.iter().zip(&self.transparent).map(|(&v, &t)| v && t).collect();
        if m.iter().any(|&b| b) {
            m
        } else {
            self.valid.clone()
        }
    }

    pub fn check(&self) -> Result<()> {
        let n = self.pixels();
        let bad = |msg: String| Err(Error::Sample { id: self.id.clone(), msg });
        if self.rgb.len() != 3 * n || self.raw.len() != n || self.gt.len() != n || self.valid.len() != n || self.transparent.len() != n {
            return bad(format!("field sizes do not match {}x{}", self.width, self.height));
        }
        if let Some(k) = (0..n).find(|&k| self.valid[k] != (self.gt[k] > 0.0)) {
            return bad(format!("valid mask disagrees with ground truth at pixel {k}"));
        }
        Ok(())
    }
}

/// Stacks samples into `rgb [N,3,H,W]`, `raw [N,1,H,W]`, `gt [N,1,H,W]`
/// and a 0/1 loss mask from `valid`.
pub struct Batch {
    pub rgb: Tensor<f32>,
    pub raw: Tensor<f32>,
    pub gt: Tensor<f32>,
    pub mask: Tensor<f32>,
}

impl Batch {
    pub fn new(samples: &[&DepthSample]) -> Result<Self> {
        let first = samples.first().ok_or_else(|| crate::error::invalid("batch", "no samples"))?;
        let (w, h) = (first.width, first.height);
        if let Some(s) = samples.iter().find(|s| (s.width, s.height) != (w, h)) {
            return Err(Error::Sample {
                id: s.id.clone(),
                msg: format!("size {}x{} differs from batch size {w}x{h}", s.width, s.height),
            });
        }
        let n = samples.len();
        let cat = |f: &dyn Fn(&DepthSample) -> Vec<f32>| samples.iter().flat_map(|s| f(s)).collect::<Vec<f32>>();
        let bits = |m: &[bool]| m.iter().map(|&b| b as u8 as f32).collect::<Vec<f32>>();
        Ok(Batch {
            rgb: Tensor::new(vec![n, 3, h, w], cat(&|s| s.rgb.clone()))?,
            raw: Tensor::new(vec![n, 1, h, w], cat(&|s| s.raw.clone()))?,
            gt: Tensor::new(vec![n, 1, h, w], cat(&|s| s.gt.clone()))?,
            mask: Tensor::new(vec![n, 1, h, w], cat(&|s| bits(&s.valid)))?,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ManifestEntry {
    pub id: String,
    /// rgb, raw, gt, valid, transparent.
    pub files: [PathBuf; 5],
}

#[derive(Clone, Debug, PartialEq)]
pub struct Manifest {
    pub root: PathBuf,
    pub depth_scale: f64,
    pub entries: Vec<ManifestEntry>,
}

pub fn manifest_path(root: &Path, split: &str) -> PathBuf {
    root.join(format!("{split}.manifest"))
}

impl Manifest {
    pub fn parse(root: &Path, path: &Path, text: &str) -> Result<Self> {
        let bad = |line: usize, msg: String| Error::Format {
            path: path.to_path_buf(),
            msg: format!("line {line}: {msg}"),
        };
        let mut scale = None;
        let mut entries: Vec<ManifestEntry> = Vec::new();
        for (no, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            if let Some(v) = line.strip_prefix("depth_scale:") {
                let s: f64 = v.trim().parse().map_err(|_| bad(no + 1, format!("unreadable depth_scale `{}`", v.trim())))?;
                if !(s > 0.0 && s.is_finite()) || scale.is_some() {
                    return Err(bad(no + 1, "depth_scale must be given once and be positive".into()));
                }
                scale = Some(s);
                continue;
            }
            let f: Vec<&str> = line.split_whitespace().collect();
            if f.len() != 6 {
                return Err(bad(no + 1, format!("expected `id rgb raw gt valid transp`, got {} fields", f.len())));
            }
            if entries.iter().any(|e| e.id == f[0]) {
                return Err(bad(no + 1, format!("duplicate id `{}`", f[0])));
            }
            entries.push(ManifestEntry {
                id: f[0].to_string(),
                files: [1, 2, 3, 4, 5].map(|k| PathBuf::from(f[k])),
            });
        }
        let depth_scale = scale.ok_or_else(|| bad(0, "missing `depth_scale:` line".into()))?;
        Ok(Manifest {
            root: root.to_path_buf(),
            depth_scale,
            entries,
        })
    }

    pub fn read(root: &Path, split: &str) -> Result<Self> {
        let path = manifest_path(root, split);
        let text = fs::read_to_string(&path).map_err(io_err(&path))?;
        Self::parse(root, &path, &text)
    }

    pub fn to_text(&self) -> String {
        let mut s = format!("depth_scale: {}\n", self.depth_scale);
        for e in &self.entries {
            s.push_str(&e.id);
            for f in &e.files {
                s.push(' ');
                s.push_str(&f.to_string_lossy());
            }
            s.push('\n');
        }
        s
    }

    pub fn load(&self, entry: &ManifestEntry) -> Result<DepthSample> {
        let id = entry.id.clone();
        let wrap = |e: Error| Error::Sample { id: id.clone(), msg: e.to_string() };
        let p = |k: usize| self.root.join(&entry.files[k]);
        let rgb = read_ppm(&p(0)).map_err(wrap)?;
        let maps = [1, 2, 3, 4].map(|k| read_pgm(&p(k)));
        let [raw, gt, valid, transp] = maps;
        let (raw, gt, valid, transp) = (raw.map_err(wrap)?, gt.map_err(wrap)?, valid.map_err(wrap)?, transp.map_err(wrap)?);
        let (w, h) = (rgb.width, rgb.height);
        for (name, img) in [("raw", &raw), ("gt", &gt), ("valid", &valid), ("transparent", &transp)] {
            if (img.width, img.height) != (w, h) {
                return Err(Error::Sample {
                    id,
                    msg: format!("{name} is {}x{} but rgb is {w}x{h}", img.width, img.height),
                });
            }
        }
        let n = w * h;
        let mut planar = vec![0f32; 3 * n];
        for k in 0..n {
            for c in 0..3 {
                planar[c * n + k] = rgb.data[3 * k + c] as f32 / 255.0;
            }
        }
        let scale = self.depth_scale;
        let meters = |img: &Image<u16>| img.data.iter().map(|&v| (v as f64 * scale) as f32).collect::<Vec<f32>>();
        let gt = meters(&gt);
        let valid = valid.data.iter().zip(&gt).map(|(&v, &g)| v > 0 && g > 0.0).collect();
        Ok(DepthSample {
            id: entry.id.clone(),
            width: w,
            height: h,
            rgb: planar,
            raw: meters(&raw),
            gt,
            valid,
            transparent: transp.data.iter().map(|&v| v > 0).collect(),
        })
    }

    /// Samples in manifest order; failures are per-sample.
    pub fn iter(&self) -> impl Iterator<Item = Result<DepthSample>> + '_ {
        self.entries.iter().map(|e| self.load(e))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Opens a split. A malformed manifest fails here; unreadable samples fail
/// individually when iterated.
pub fn load_dataset(root: &Path, split: &str) -> Result<Manifest> {
    Manifest::read(root, split)
}

/// Loads every sample of a split, failing on the first bad one.
pub fn load_all(root: &Path, split: &str) -> Result<Vec<DepthSample>> {
    load_dataset(root, split)?.iter().collect()
}

fn quantize(v: f32, scale: f64) -> u16 {
    (v as f64 / scale).round().clamp(0.0, 65535.0) as u16
}

/// Writes samples under `root/<split>/` and the split manifest.
pub fn write_dataset(root: &Path, split: &str, samples: &[DepthSample], depth_scale: f64) -> Result<Manifest> {
    let dir = root.join(split);
    fs::create_dir_all(&dir).map_err(io_err(&dir))?;
    let mut entries = Vec::with_capacity(samples.len());
    for s in samples {
        s.check()?;
        let n = s.pixels();
        let rel = |suffix: &str| PathBuf::from(split).join(format!("{}_{suffix}", s.id));
        let files = [rel("rgb.ppm"), rel("raw.pgm"), rel("gt.pgm"), rel("valid.pgm"), rel("transp.pgm")];
        let mut rgb = vec![0u8; 3 * n];
        for k in 0..n {
            for c in 0..3 {
                rgb[3 * k + c] = (s.rgb[c * n + k].clamp(0.0, 1.0) * 255.0).round() as u8;
            }
        }
        let depth = |d: &[f32]| Image::new(s.width, s.height, d.iter().map(|&v| quantize(v, depth_scale)).collect());
        let mask = |m: &[bool]| Image::new(s.width, s.height, m.iter().map(|&b| if b { 255u8 } else { 0 }).collect());
        write_ppm(&root.join(&files[0]), &Image::new(s.width, s.height, rgb))?;
        write_pgm16(&root.join(&files[1]), &depth(&s.raw))?;
        write_pgm16(&root.join(&files[2]), &depth(&s.gt))?;
        write_pgm8(&root.join(&files[3]), &mask(&s.valid))?;
        write_pgm8(&root.join(&files[4]), &mask(&s.transparent))?;
        entries.push(ManifestEntry { id: s.id.clone(), files });
    }
    let m = Manifest {
        root: root.to_path_buf(),
        depth_scale,
        entries,
    };
    let path = manifest_path(root, split);
    fs::write(&path, m.to_text()).map_err(io_err(&path))?;
    Ok(m)
}
