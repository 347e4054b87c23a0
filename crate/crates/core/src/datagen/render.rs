use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{CorpusSpec, Motif, Palette, PartAssignment};

/// Part slot centres in object-local coordinates (84-pixel units, x toward
/// the head).
pub const SLOTS: [(f64, f64); 3] = [(13.0, -3.0), (-2.0, 4.0), (-14.0, -2.0)];
const BODY_AXES: (f64, f64) = (22.0, 12.0);
const BODY: [f64; 3] = [175.0, 150.0, 115.0];
pub const MOTIF_COLORS: [[f64; 3]; 5] = [
    [210.0, 40.0, 40.0],
    [40.0, 70.0, 210.0],
    [235.0, 210.0, 40.0],
    [25.0, 25.0, 25.0],
    [240.0, 240.0, 240.0],
];
const SUPERSAMPLE: usize = 2;

fn palette(p: Palette) -> ([f64; 3], [[f64; 3]; 3]) {
    match p {
        Palette::Default => (
            [90.0, 120.0, 70.0],
            [[60.0, 100.0, 50.0], [125.0, 150.0, 80.0], [105.0, 90.0, 60.0]],
        ),
        Palette::Swapped => (
            [70.0, 90.0, 140.0],
            [[50.0, 60.0, 110.0], [110.0, 130.0, 180.0], [95.0, 95.0, 120.0]],
        ),
    }
}

/// Worst-case distance (84-pixel units) of any object pixel from the canvas
/// centre.
pub(crate) fn object_radius(spec: &CorpusSpec) -> f64 {
    BODY_AXES.0.max(BODY_AXES.1) * spec.scale_hi + spec.translation * std::f64::consts::SQRT_2
}

/// Motif membership for motif-local coordinates scaled to the unit disk.
fn inside(m: Motif, u: f64, v: f64) -> bool {
    match m {
        Motif::Disk => u * u + v * v <= 1.0,
        Motif::Square => u.abs() <= 0.8 && v.abs() <= 0.8,
        Motif::Triangle => (-0.8..=0.8).contains(&v) && u.abs() <= 0.5 * (v + 0.8),
        Motif::Ring => (0.3..=1.0).contains(&(u * u + v * v)),
        Motif::Cross => (u.abs() <= 0.3 && v.abs() <= 1.0) || (v.abs() <= 0.3 && u.abs() <= 1.0),
        Motif::Bar => v.abs() <= 0.35 && u.abs() <= 1.0,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Rendered {
    /// Interleaved RGB, row-major.
    pub rgb: Vec<u8>,
    /// Pixels touched by a part motif.
    pub motif_mask: Vec<bool>,
}

struct Blob {
    cx: f64,
    cy: f64,
    r: f64,
    square: bool,
    color: [f64; 3],
}

struct Decoy {
    cx: f64,
    cy: f64,
    r: f64,
    sin: f64,
    cos: f64,
    motif: Motif,
    color: [f64; 3],
}

fn poisson_count(rng: &mut ChaCha8Rng, expected: f64) -> usize {
    let mut n = expected.floor() as usize;
    if rng.gen::<f64>() < expected.fract() {
        n += 1;
    }
    n
}

/// Renders image `index` of global class `class`. Geometry and appearance
/// draw from separate streams so a palette change leaves geometry intact.
pub fn render(spec: &CorpusSpec, table: &[PartAssignment], class: usize, index: usize) -> Rendered {
    let s = spec.image_size;
    let unit = s as f64 / 84.0;
    let id = (class * spec.per_class + index) as u64;
    let mut geo = ChaCha8Rng::seed_from_u64(spec.seed);
    geo.set_stream(1 + 2 * id);
    let mut app = ChaCha8Rng::seed_from_u64(spec.seed);
    app.set_stream(2 + 2 * id);

    let sym = |r: &mut ChaCha8Rng, half: f64| (2.0 * r.gen::<f64>() - 1.0) * half;
    let tx = sym(&mut geo, spec.translation) * unit;
    let ty = sym(&mut geo, spec.translation) * unit;
    let theta = sym(&mut geo, spec.rotation_deg).to_radians();
    let scale = spec.scale_lo + (spec.scale_hi - spec.scale_lo) * geo.gen::<f64>();
    let (sin, cos) = theta.sin_cos();
    let (ox, oy) = (s as f64 / 2.0 + tx, s as f64 / 2.0 + ty);

    let (bg, clutter_colors) = palette(spec.palette);
    let area = (s * s) as f64 / (84.0 * 84.0);
    let n_blobs = poisson_count(&mut app, spec.clutter * area);
    let blobs: Vec<Blob> = (0..n_blobs)
        .map(|_| Blob {
            cx: app.gen::<f64>() * s as f64,
            cy: app.gen::<f64>() * s as f64,
            r: (2.0 + 4.0 * app.gen::<f64>()) * unit,
            square: app.gen::<bool>(),
            color: clutter_colors[app.gen_range(0..clutter_colors.len())],
        })
        .collect();

    let part_color = |ci: usize| -> [f64; 3] {
        let m = MOTIF_COLORS[ci];
        [0, 1, 2].map(|c| BODY[c] + spec.delta * (m[c] - BODY[c]))
    };
    let n_decoys = poisson_count(&mut geo, spec.decoys * area);
    let decoys: Vec<Decoy> = (0..n_decoys)
        .map(|_| {
            let (sin, cos) = (geo.gen::<f64>() * std::f64::consts::TAU).sin_cos();
            Decoy {
                cx: geo.gen::<f64>() * s as f64,
                cy: geo.gen::<f64>() * s as f64,
                r: spec.motif_radius * (0.85 + 0.3 * geo.gen::<f64>()) * unit,
                sin,
                cos,
                motif: spec.motifs[geo.gen_range(0..spec.motifs.len())],
                color: part_color(geo.gen_range(0..spec.colors)),
            }
        })
        .collect();
    let parts = &table[class];

    let mut rgb = Vec::with_capacity(s * s * 3);
    let mut motif_mask = Vec::with_capacity(s * s);
    let ss = SUPERSAMPLE as f64;
    for py in 0..s {
        for px in 0..s {
            let mut acc = [0.0; 3];
            let mut hit = false;
            for sy in 0..SUPERSAMPLE {
                for sx in 0..SUPERSAMPLE {
                    let x = px as f64 + (sx as f64 + 0.5) / ss;
                    let y = py as f64 + (sy as f64 + 0.5) / ss;
                    let mut color = bg;
                    for b in &blobs {
                        let (dx, dy) = (x - b.cx, y - b.cy);
                        let inb = if b.square {
                            dx.abs() <= b.r && dy.abs() <= b.r
                        } else {
                            dx * dx + dy * dy <= b.r * b.r
                        };
                        if inb {
                            color = b.color;
                        }
                    }
                    for d in &decoys {
                        let (dx, dy) = (x - d.cx, y - d.cy);
                        let u = (d.cos * dx + d.sin * dy) / d.r;
                        let v = (-d.sin * dx + d.cos * dy) / d.r;
                        if inside(d.motif, u, v) {
                            color = d.color;
                        }
                    }
                    let (dx, dy) = (x - ox, y - oy);
                    let lx = (cos * dx + sin * dy) / (scale * unit);
                    let ly = (-sin * dx + cos * dy) / (scale * unit);
                    let (a, b) = BODY_AXES;
                    if (lx / a).powi(2) + (ly / b).powi(2) <= 1.0 {
                        color = BODY;
                    }
                    for (slot, &(mi, ci)) in SLOTS.iter().zip(parts) {
                        let u = (lx - slot.0) / spec.motif_radius;
                        let v = (ly - slot.1) / spec.motif_radius;
                        if inside(spec.motifs[mi], u, v) {
                            color = part_color(ci);
                            hit = true;
                        }
                    }
                    for c in 0..3 {
                        acc[c] += color[c];
                    }
                }
            }
            let n = (SUPERSAMPLE * SUPERSAMPLE) as f64;
            rgb.extend(acc.iter().map(|v| (v / n).round().clamp(0.0, 255.0) as u8));
            motif_mask.push(hit);
        }
    }
    Rendered { rgb, motif_mask }
}
