//! Procedural fine-grained corpus: every image is a posed object (shared body
//! plus class-specific part motifs) over a cluttered background. Classes
//! differ only in the motifs; pose, position, scale and clutter are nuisance.

mod render;

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::kv;

pub use render::{render, Rendered, MOTIF_COLORS, SLOTS};

pub const MANIFEST: &str = "manifest.tsv";
pub const SPEC_FILE: &str = "spec.txt";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Split {
    Base,
    Val,
    Novel,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Base, Split::Val, Split::Novel];

    pub fn name(self) -> &'static str {
        match self {
            Split::Base => "base",
            Split::Val => "val",
            Split::Novel => "novel",
        }
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "base" | "train" => Ok(Split::Base),
            "val" => Ok(Split::Val),
            "novel" | "test" => Ok(Split::Novel),
            _ => Err(Error::Parse(format!("split `{s}` (expected base|val|novel)"))),
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Motif {
    Disk,
    Square,
    Triangle,
    Ring,
    Cross,
    Bar,
}

impl Motif {
    pub const ALL: [Motif; 6] = [
        Motif::Disk,
        Motif::Square,
        Motif::Triangle,
        Motif::Ring,
        Motif::Cross,
        Motif::Bar,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Motif::Disk => "disk",
            Motif::Square => "square",
            Motif::Triangle => "triangle",
            Motif::Ring => "ring",
            Motif::Cross => "cross",
            Motif::Bar => "bar",
        }
    }
}

impl FromStr for Motif {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Motif::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Parse(format!("motif `{s}`")))
    }
}

impl fmt::Display for Motif {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Palette {
    Default,
    Swapped,
}

impl FromStr for Palette {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "default" => Ok(Palette::Default),
            "swapped" => Ok(Palette::Swapped),
            _ => Err(Error::Parse(format!("palette `{s}` (expected default|swapped)"))),
        }
    }
}

impl fmt::Display for Palette {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Palette::Default => "default",
            Palette::Swapped => "swapped",
        })
    }
}

/// Generator parameters. Lengths are in pixels of an 84-pixel canvas and
/// scale with `image_size`.
#[derive(Debug, Clone, PartialEq)]
pub struct CorpusSpec {
    pub n_base: usize,
    pub n_val: usize,
    pub n_novel: usize,
    pub per_class: usize,
    pub image_size: usize,
    pub motifs: Vec<Motif>,
    /// Motif colours in use (a prefix of the fixed colour table).
    pub colors: usize,
    /// Motif radius in 84-pixel units.
    pub motif_radius: f64,
    /// Blend of motif colour against the body colour, in (0, 1].
    pub delta: f64,
    pub rotation_deg: f64,
    pub translation: f64,
    pub scale_lo: f64,
    pub scale_hi: f64,
    /// Expected clutter blobs per image.
    pub clutter: f64,
    /// Expected motif-shaped clutter blobs per image (class independent).
    pub decoys: f64,
    pub palette: Palette,
    pub seed: u64,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        Self {
            n_base: 40,
            n_val: 10,
            n_novel: 10,
            per_class: 40,
            image_size: 84,
            motifs: Motif::ALL.to_vec(),
            colors: 2,
            motif_radius: 4.5,
            delta: 1.0,
            rotation_deg: 30.0,
            translation: 10.0,
            scale_lo: 0.85,
            scale_hi: 1.15,
            clutter: 12.0,
            decoys: 6.0,
            palette: Palette::Default,
            seed: 1,
        }
    }
}

/// Second-corpus shift for train-on-A, evaluate-on-B runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DomainShift {
    None,
    /// Background palette swap; geometry and motifs untouched.
    Palette,
    /// Palette swap plus doubled clutter.
    Full,
}

impl FromStr for DomainShift {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(DomainShift::None),
            "palette" => Ok(DomainShift::Palette),
            "full" => Ok(DomainShift::Full),
            _ => Err(Error::Parse(format!("shift `{s}` (expected none|palette|full)"))),
        }
    }
}

/// Corpus spec of the shifted corpus.
pub fn domain_shift(spec: &CorpusSpec, shift: DomainShift) -> CorpusSpec {
    let swap = |p| match p {
        Palette::Default => Palette::Swapped,
        Palette::Swapped => Palette::Default,
    };
    let mut out = spec.clone();
    match shift {
        DomainShift::None => {}
        DomainShift::Palette => out.palette = swap(spec.palette),
        DomainShift::Full => {
            out.palette = swap(spec.palette);
            out.clutter = spec.clutter * 2.0;
            out.decoys = spec.decoys * 2.0;
        }
    }
    out
}

impl CorpusSpec {
    pub fn n_classes(&self) -> usize {
        self.n_base + self.n_val + self.n_novel
    }

    pub fn split_of(&self, class: usize) -> Split {
        if class < self.n_base {
            Split::Base
        } else if class < self.n_base + self.n_val {
            Split::Val
        } else {
            Split::Novel
        }
    }

    /// Distinct part assignments available.
    pub fn capacity(&self) -> usize {
        (self.motifs.len() * self.colors).pow(SLOTS.len() as u32)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.n_base == 0 || self.n_val == 0 || self.n_novel == 0 || self.per_class == 0 {
            return bad("class and sample counts must be positive".into());
        }
        if self.image_size < 16 {
            return bad(format!("image_size {} < 16", self.image_size));
        }
        if self.motifs.is_empty() {
            return bad("motif inventory is empty".into());
        }
        if self.colors == 0 || self.colors > MOTIF_COLORS.len() {
            return bad(format!("colors {} outside 1..={}", self.colors, MOTIF_COLORS.len()));
        }
        if !(self.motif_radius > 0.0 && self.motif_radius <= 8.0) {
            return bad(format!("motif_radius {} outside (0, 8]", self.motif_radius));
        }
        if !(self.delta > 0.0 && self.delta <= 1.0) {
            return bad(format!("delta {} outside (0, 1]", self.delta));
        }
        let finite_nonneg = [self.rotation_deg, self.translation, self.clutter, self.decoys];
        if finite_nonneg.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return bad("nuisance ranges must be finite and non-negative".into());
        }
        if !(self.scale_lo > 0.0 && self.scale_lo <= self.scale_hi && self.scale_hi.is_finite()) {
            return bad(format!("scale range [{}, {}]", self.scale_lo, self.scale_hi));
        }
        if render::object_radius(self) > 42.0 - 1.0 {
            return bad(format!(
                "object may leave the canvas: radius {:.1} + translation {:.1} exceeds 41",
                render::object_radius(self) - self.translation,
                self.translation
            ));
        }
        if self.n_classes() > self.capacity() {
            return bad(format!("{} classes exceed {} distinct part assignments", self.n_classes(), self.capacity()));
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let motifs: Vec<&str> = self.motifs.iter().map(|m| m.name()).collect();
        format!(
            "n_base={}\nn_val={}\nn_novel={}\nper_class={}\nimage_size={}\nmotifs={}\ncolors={}\nmotif_radius={}\ndelta={}\nrotation_deg={}\ntranslation={}\nscale_lo={}\nscale_hi={}\nclutter={}\ndecoys={}\npalette={}\nseed={}\n",
            self.n_base,
            self.n_val,
            self.n_novel,
            self.per_class,
            self.image_size,
            motifs.join(","),
            self.colors,
            self.motif_radius,
            self.delta,
            self.rotation_deg,
            self.translation,
            self.scale_lo,
            self.scale_hi,
            self.clutter,
            self.decoys,
            self.palette,
            self.seed,
        )
    }

    /// Defaults overridden by `text`; unknown keys are errors.
    pub fn from_text(text: &str) -> Result<Self> {
        let mut s = Self::default();
        for (k, v) in kv::parse(text)? {
            s.set(&k, &v)?;
        }
        Ok(s)
    }

    pub fn set(&mut self, k: &str, v: &str) -> Result<()> {
        match k {
            "n_base" => self.n_base = kv::parse_value(k, v)?,
            "n_val" => self.n_val = kv::parse_value(k, v)?,
            "n_novel" => self.n_novel = kv::parse_value(k, v)?,
            "per_class" => self.per_class = kv::parse_value(k, v)?,
            "image_size" => self.image_size = kv::parse_value(k, v)?,
            "motifs" => self.motifs = kv::parse_list(k, v)?,
            "colors" => self.colors = kv::parse_value(k, v)?,
            "motif_radius" => self.motif_radius = kv::parse_value(k, v)?,
            "delta" => self.delta = kv::parse_value(k, v)?,
            "rotation_deg" => self.rotation_deg = kv::parse_value(k, v)?,
            "translation" => self.translation = kv::parse_value(k, v)?,
            "scale_lo" => self.scale_lo = kv::parse_value(k, v)?,
            "scale_hi" => self.scale_hi = kv::parse_value(k, v)?,
            "clutter" => self.clutter = kv::parse_value(k, v)?,
            "decoys" => self.decoys = kv::parse_value(k, v)?,
            "palette" => self.palette = kv::parse_value(k, v)?,
            "seed" => self.seed = kv::parse_value(k, v)?,
            _ => return Err(Error::Config(format!("unknown corpus key `{k}`"))),
        }
        Ok(())
    }

    /// Zero pose, position, scale and clutter variation.
    pub fn without_nuisance(&self) -> Self {
        Self {
            rotation_deg: 0.0,
            translation: 0.0,
            scale_lo: 1.0,
            scale_hi: 1.0,
            clutter: 0.0,
            decoys: 0.0,
            ..self.clone()
        }
    }
}

/// Part assignment of one class: `(motif index, colour index)` per slot.
pub type PartAssignment = [(usize, usize); 3];

/// Distinct part assignments for every class, drawn from the master seed.
pub fn class_table(spec: &CorpusSpec) -> Result<Vec<PartAssignment>> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut seen = std::collections::HashSet::new();
    let mut table = Vec::with_capacity(spec.n_classes());
    while table.len() < spec.n_classes() {
        let mut a = [(0, 0); 3];
        for slot in &mut a {
            *slot = (rng.gen_range(0..spec.motifs.len()), rng.gen_range(0..spec.colors));
        }
        if seen.insert(a) {
            table.push(a);
        }
    }
    Ok(table)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    pub path: PathBuf,
    pub class_id: usize,
    pub split: Split,
}

pub fn image_path(spec: &CorpusSpec, class: usize, index: usize) -> PathBuf {
    PathBuf::from("images")
        .join(spec.split_of(class).name())
        .join(format!("c{class:03}_{index:03}.ppm"))
}

pub fn manifest_text(entries: &[ManifestEntry]) -> String {
    let mut s = String::new();
    for e in entries {
        s.push_str(&format!("{}\t{}\t{}\n", e.path.display(), e.class_id, e.split));
    }
    s
}

pub fn parse_manifest(text: &str) -> Result<Vec<ManifestEntry>> {
    let mut out = Vec::new();
    for (no, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split('\t').collect();
        let [path, class, split] = cols[..] else {
            return Err(Error::Parse(format!("manifest line {}: expected 3 tab-separated fields", no + 1)));
        };
        out.push(ManifestEntry {
            path: PathBuf::from(path),
            class_id: kv::parse_value("class_id", class)?,
            split: split.parse()?,
        });
    }
    Ok(out)
}

pub fn read_manifest(dir: &Path) -> Result<Vec<ManifestEntry>> {
    let p = dir.join(MANIFEST);
    let text = fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
    parse_manifest(&text)
}

/// Writes images, `manifest.tsv` and `spec.txt` under `out`.
pub fn generate(spec: &CorpusSpec, out: &Path) -> Result<Vec<ManifestEntry>> {
    let table = class_table(spec)?;
    for split in Split::ALL {
        let d = out.join("images").join(split.name());
        fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
    }
    let jobs: Vec<(usize, usize)> = (0..spec.n_classes())
        .flat_map(|c| (0..spec.per_class).map(move |i| (c, i)))
        .collect();
    jobs.par_iter().try_for_each(|&(c, i)| {
        let img = render(spec, &table, c, i);
        let p = out.join(image_path(spec, c, i));
        fs::write(&p, encode_ppm(spec.image_size, spec.image_size, &img.rgb)).map_err(|e| Error::io(&p, e))
    })?;
    let entries: Vec<ManifestEntry> = jobs
        .iter()
        .map(|&(c, i)| ManifestEntry {
            path: image_path(spec, c, i),
            class_id: c,
            split: spec.split_of(c),
        })
        .collect();
    let mp = out.join(MANIFEST);
    fs::write(&mp, manifest_text(&entries)).map_err(|e| Error::io(&mp, e))?;
    let sp = out.join(SPEC_FILE);
    fs::write(&sp, spec.to_text()).map_err(|e| Error::io(&sp, e))?;
    Ok(entries)
}

/// Binary PPM (P6).
pub fn encode_ppm(w: usize, h: usize, rgb: &[u8]) -> Vec<u8> {
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    out.extend_from_slice(rgb);
    out
}

/// Binary PGM (P5).
pub fn encode_pgm(w: usize, h: usize, gray: &[u8]) -> Vec<u8> {
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.extend_from_slice(gray);
    out
}

/// Decodes P6 or P5 (8-bit) into `(width, height, channels, bytes)`.
pub fn decode_pnm(bytes: &[u8]) -> Result<(usize, usize, usize, Vec<u8>)> {
    let mut fields = Vec::with_capacity(4);
    let mut i = 0;
    while fields.len() < 4 {
        while i < bytes.len() && bytes[i].is_ascii_whitespace() {
            i += 1;
        }
        if i < bytes.len() && bytes[i] == b'#' {
            while i < bytes.len() && bytes[i] != b'\n' {
                i += 1;
            }
            continue;
        }
        let start = i;
        while i < bytes.len() && !bytes[i].is_ascii_whitespace() {
            i += 1;
        }
        if start == i {
            return Err(Error::Parse("truncated PNM header".into()));
        }
        fields.push(String::from_utf8_lossy(&bytes[start..i]).into_owned());
    }
    i += 1;
    let channels = match fields[0].as_str() {
        "P6" => 3,
        "P5" => 1,
        m => return Err(Error::Parse(format!("unsupported PNM magic `{m}`"))),
    };
    let w: usize = kv::parse_value("width", &fields[1])?;
    let h: usize = kv::parse_value("height", &fields[2])?;
    if fields[3] != "255" {
        return Err(Error::Parse(format!("unsupported maxval {}", fields[3])));
    }
    let n = w * h * channels;
    let body = bytes.get(i..i + n).ok_or_else(|| Error::Parse("truncated PNM payload".into()))?;
    Ok((w, h, channels, body.to_vec()))
}

/// Per-class counts in a manifest, keyed by split.
pub fn split_summary(entries: &[ManifestEntry]) -> BTreeMap<Split, BTreeMap<usize, usize>> {
    let mut out: BTreeMap<Split, BTreeMap<usize, usize>> = BTreeMap::new();
    for e in entries {
        *out.entry(e.split).or_default().entry(e.class_id).or_default() += 1;
    }
    out
}
