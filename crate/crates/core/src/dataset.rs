//! In-memory image sets loaded from a manifest, normalized per channel and
//! grouped by split and class.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::Rng;
use rayon::prelude::*;

use crate::datagen::{self, CorpusSpec, Split};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Per-channel affine normalization `(x / 255 - mean) / std`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Norm {
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

impl Default for Norm {
    fn default() -> Self {
        Self {
            mean: [0.5; 3],
            std: [0.25; 3],
        }
    }
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub size: usize,
    pub norm: Norm,
    images: Vec<Vec<f32>>,
    labels: Vec<usize>,
    splits: Vec<Split>,
}

/// Indices of one split grouped by class, classes in ascending id order.
#[derive(Debug, Clone)]
pub struct SplitView {
    pub split: Split,
    pub classes: Vec<usize>,
    pub members: Vec<Vec<usize>>,
}

impl SplitView {
    pub fn n_images(&self) -> usize {
        self.members.iter().map(Vec::len).sum()
    }

    pub fn indices(&self) -> Vec<usize> {
        self.members.iter().flatten().copied().collect()
    }

    /// Position of global class `c` within this split.
    pub fn local_class(&self, c: usize) -> Option<usize> {
        self.classes.iter().position(|&x| x == c)
    }
}

impl Norm {
    /// Interleaved RGB in [0, 255] to normalized planar `[3, S, S]` order.
    pub fn chw(&self, rgb: &[f64]) -> Vec<f64> {
        let plane = rgb.len() / 3;
        let mut out = vec![0.0; rgb.len()];
        for (i, p) in rgb.chunks_exact(3).enumerate() {
            for c in 0..3 {
                out[c * plane + i] = (p[c] / 255.0 - self.mean[c]) / self.std[c];
            }
        }
        out
    }

    /// Decoded 8-bit image of any size, resized to `size` and normalized.
    pub fn prepare(&self, rgb: &[u8], width: usize, height: usize, size: usize) -> Result<Vec<f64>> {
        if width == 0 || height == 0 || rgb.len() != width * height * 3 {
            return Err(Error::invalid("prepare", format!("{} bytes for a {width}x{height} RGB image", rgb.len())));
        }
        Ok(self.chw(&resize_rgb(rgb, width, height, size, size)))
    }
}

/// Area-average for integer factors, bilinear otherwise.
pub fn resize_rgb(src: &[u8], sw: usize, sh: usize, dw: usize, dh: usize) -> Vec<f64> {
    let mut out = vec![0.0; dw * dh * 3];
    if sw % dw == 0 && sh % dh == 0 {
        let (fx, fy) = (sw / dw, sh / dh);
        let n = (fx * fy) as f64;
        for y in 0..dh {
            for x in 0..dw {
                for c in 0..3 {
                    let mut s = 0.0;
                    for yy in 0..fy {
                        for xx in 0..fx {
                            s += src[((y * fy + yy) * sw + x * fx + xx) * 3 + c] as f64;
                        }
                    }
                    out[(y * dw + x) * 3 + c] = s / n;
                }
            }
        }
        return out;
    }
    let at = |x: usize, y: usize, c: usize| src[(y * sw + x) * 3 + c] as f64;
    for y in 0..dh {
        let sy = ((y as f64 + 0.5) * sh as f64 / dh as f64 - 0.5).clamp(0.0, (sh - 1) as f64);
        let y0 = sy.floor() as usize;
        let y1 = (y0 + 1).min(sh - 1);
        let wy = sy - y0 as f64;
        for x in 0..dw {
            let sx = ((x as f64 + 0.5) * sw as f64 / dw as f64 - 0.5).clamp(0.0, (sw - 1) as f64);
            let x0 = sx.floor() as usize;
            let x1 = (x0 + 1).min(sw - 1);
            let wx = sx - x0 as f64;
            for c in 0..3 {
                let top = at(x0, y0, c) * (1.0 - wx) + at(x1, y0, c) * wx;
                let bot = at(x0, y1, c) * (1.0 - wx) + at(x1, y1, c) * wx;
                out[(y * dw + x) * 3 + c] = top * (1.0 - wy) + bot * wy;
            }
        }
    }
    out
}

impl Dataset {
    /// Builds from interleaved RGB pixels (already at `size`). When `norm` is
    /// `None` the statistics come from the base split.
    pub fn from_pixels(
        size: usize,
        pixels: Vec<Vec<f64>>,
        labels: Vec<usize>,
        splits: Vec<Split>,
        norm: Option<Norm>,
    ) -> Result<Self> {
        if pixels.is_empty() {
            return Err(Error::Config("empty dataset".into()));
        }
        if pixels.iter().any(|p| p.len() != size * size * 3) {
            return Err(Error::invalid("dataset", format!("every image must have {size}x{size}x3 values")));
        }
        let norm = match norm {
            Some(n) => n,
            None => {
                let base: Vec<&Vec<f64>> = pixels
                    .iter()
                    .zip(&splits)
                    .filter(|(_, s)| **s == Split::Base)
                    .map(|(p, _)| p)
                    .collect();
                let pool = if base.is_empty() { pixels.iter().collect() } else { base };
                let mut mean = [0.0; 3];
                let mut sq = [0.0; 3];
                let mut n = 0.0;
                for p in &pool {
                    for px in p.chunks_exact(3) {
                        for c in 0..3 {
                            let v = px[c] / 255.0;
                            mean[c] += v;
                            sq[c] += v * v;
                        }
                        n += 1.0;
                    }
                }
                let mean = mean.map(|m| m / n);
                let std = [0, 1, 2].map(|c| (sq[c] / n - mean[c] * mean[c]).max(1e-12).sqrt());
                Norm { mean, std }
            }
        };
        let images = pixels
            .into_par_iter()
            .map(|p| {
                let mut chw = vec![0f32; size * size * 3];
                for (i, px) in p.chunks_exact(3).enumerate() {
                    for c in 0..3 {
                        chw[c * size * size + i] = ((px[c] / 255.0 - norm.mean[c]) / norm.std[c]) as f32;
                    }
                }
                chw
            })
            .collect();
        Ok(Self {
            size,
            norm,
            images,
            labels,
            splits,
        })
    }

    /// Loads every manifest entry of the corpus in `dir`, resized to `size`.
    pub fn load(dir: &Path, size: usize, norm: Option<Norm>) -> Result<Self> {
        let entries = datagen::read_manifest(dir)?;
        let pixels = entries
            .par_iter()
            .map(|e| {
                let p = dir.join(&e.path);
                let bytes = fs::read(&p).map_err(|err| Error::io(&p, err))?;
                let (w, h, c, body) = datagen::decode_pnm(&bytes)?;
                let rgb = if c == 3 {
                    body
                } else {
                    body.iter().flat_map(|&v| [v, v, v]).collect()
                };
                Ok(resize_rgb(&rgb, w, h, size, size))
            })
            .collect::<Result<Vec<_>>>()?;
        let labels = entries.iter().map(|e| e.class_id).collect();
        let splits = entries.iter().map(|e| e.split).collect();
        Self::from_pixels(size, pixels, labels, splits, norm)
    }

    /// Renders a corpus directly into memory.
    pub fn render(spec: &CorpusSpec, size: usize, norm: Option<Norm>) -> Result<Self> {
        let table = datagen::class_table(spec)?;
        let jobs: Vec<(usize, usize)> = (0..spec.n_classes())
            .flat_map(|c| (0..spec.per_class).map(move |i| (c, i)))
            .collect();
        let pixels = jobs
            .par_iter()
            .map(|&(c, i)| {
                let r = datagen::render(spec, &table, c, i);
                resize_rgb(&r.rgb, spec.image_size, spec.image_size, size, size)
            })
            .collect();
        let labels = jobs.iter().map(|j| j.0).collect();
        let splits = jobs.iter().map(|j| spec.split_of(j.0)).collect();
        Self::from_pixels(size, pixels, labels, splits, norm)
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn image(&self, i: usize) -> &[f32] {
        &self.images[i]
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i]
    }

    pub fn split(&self, split: Split) -> SplitView {
        let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for (i, (&l, &s)) in self.labels.iter().zip(&self.splits).enumerate() {
            if s == split {
                by_class.entry(l).or_default().push(i);
            }
        }
        SplitView {
            split,
            classes: by_class.keys().copied().collect(),
            members: by_class.into_values().collect(),
        }
    }

    /// Stacks images into `[N, 3, S, S]`, optionally with crop+flip.
    pub fn batch<T: Real>(&self, idx: &[usize], mut augment: Option<&mut dyn rand::RngCore>) -> Tensor<T> {
        let s = self.size;
        let mut data = Vec::with_capacity(idx.len() * 3 * s * s);
        for &i in idx {
            let img = match augment.as_deref_mut() {
                Some(rng) => crop_flip(&self.images[i], s, rng),
                None => self.images[i].clone(),
            };
            data.extend(img.into_iter().map(|v| T::from_f64(v as f64)));
        }
        Tensor::new(&[idx.len(), 3, s, s], data).expect("batch shape")
    }
}

/// Random crop from a zero-padded (pad `s / 8`) image plus a horizontal
/// flip with probability 1/2.
pub fn crop_flip(img: &[f32], s: usize, rng: &mut dyn rand::RngCore) -> Vec<f32> {
    let pad = s / 8;
    let oy = rng.gen_range(0..=2 * pad) as isize - pad as isize;
    let ox = rng.gen_range(0..=2 * pad) as isize - pad as isize;
    let flip = rng.gen::<bool>();
    let mut out = vec![0f32; img.len()];
    for c in 0..3 {
        for y in 0..s {
            for x in 0..s {
                let sx = if flip { s - 1 - x } else { x } as isize + ox;
                let sy = y as isize + oy;
                if sx >= 0 && sy >= 0 && (sx as usize) < s && (sy as usize) < s {
                    out[(c * s + y) * s + x] = img[(c * s + sy as usize) * s + sx as usize];
                }
            }
        }
    }
    out
}
