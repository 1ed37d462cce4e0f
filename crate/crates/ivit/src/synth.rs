//! Deterministic synthetic ROI generator.
//!
//! Each ROI depicts papillary structures: a tinted cytoplasm disc per
//! papilla with rings of elliptical nuclei around it. Type 1 places a single
//! ring with grades {1,2}; type 2 stacks 2-3 rings and mixes in grade-3
//! nuclei. Two ablations isolate the class signals: `grade_only` gives both
//! classes identical single-ring layouts (only the grade mix differs), and
//! `spatial_only` gives both classes identical grade draws (only the ring
//! structure differs).
//!
//! Determinism: every random quantity comes from a ChaCha stream keyed by
//! (seed, purpose, sharing class, ROI index), so any ROI can be regenerated
//! bit-identically in isolation, and ablations can share exactly the streams
//! they are supposed to share.

use std::f64::consts::{PI, TAU};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::PartialSynthParams;
use crate::error::{Error, Result};
use crate::extraction::{
    compute_morphology, encode_mask_rle, ManifestEntry, ManifestNucleus, Nucleus, NucleusKind,
    RoiRecord, Subtype,
};
use crate::numerics::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    Full,
    GradeOnly,
    SpatialOnly,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SynthParams {
    pub roi_size: usize,
    /// Inclusive papillae count range per ROI.
    pub papillae: (usize, usize),
    /// Inclusive tumor-nuclei count range per papilla.
    pub nuclei_per_papilla: (usize, usize),
    pub radius_grade1: (f64, f64),
    pub radius_grade2: (f64, f64),
    pub radius_grade3: (f64, f64),
    /// Probability that a type-2 tumor nucleus is grade 3.
    pub type2_grade3_fraction: f64,
    /// Inclusive ring count range for type 2 (type 1 always uses one ring).
    pub rings_type2: (usize, usize),
    /// Radial distance between stacked rings, pixels.
    pub ring_offset: f64,
    /// Std of the additive Gaussian pixel noise.
    pub noise_std: f64,
    pub endothelial_per_papilla: (usize, usize),
    pub ablation: Ablation,
    pub seed: u64,
}

/// Arc spacing between neighboring nuclei on a ring, pixels.
const RING_SPACING: f64 = 9.0;
/// Smallest innermost ring radius.
const MIN_RING_RADIUS: f64 = 16.0;

impl SynthParams {
    pub fn default_for_roi(roi_size: usize) -> SynthParams {
        // Papillae scale with area so density stays roughly constant.
        let scale = (roi_size as f64 / 400.0).max(1.0);
        let pap = |a: f64| ((a * scale * scale).round() as usize).max(1);
        SynthParams {
            roi_size,
            papillae: (pap(3.0), pap(5.0)),
            nuclei_per_papilla: (16, 24),
            radius_grade1: (2.2, 3.0),
            radius_grade2: (3.2, 4.2),
            radius_grade3: (4.6, 6.0),
            type2_grade3_fraction: 0.35,
            rings_type2: (2, 3),
            ring_offset: 12.0,
            noise_std: 0.02,
            endothelial_per_papilla: (3, 6),
            ablation: Ablation::Full,
            seed: 1,
        }
    }

    pub fn apply(&mut self, p: PartialSynthParams) {
        macro_rules! take {
            ($($f:ident),*) => { $( if let Some(v) = p.$f { self.$f = v; } )* };
        }
        take!(
            papillae,
            nuclei_per_papilla,
            radius_grade1,
            radius_grade2,
            radius_grade3,
            type2_grade3_fraction,
            rings_type2,
            ring_offset,
            noise_std,
            endothelial_per_papilla,
            ablation
        );
    }

    pub fn validate(&self, roi_size: usize) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.roi_size != roi_size {
            return bad(format!("synth roi_size {} disagrees with run roi_size {}", self.roi_size, roi_size));
        }
        if self.roi_size % 20 != 0 {
            return bad(format!("roi_size {} must be divisible by 20", self.roi_size));
        }
        if !(0.0..=1.0).contains(&self.type2_grade3_fraction) {
            return bad(format!("type2_grade3_fraction {} outside [0,1]", self.type2_grade3_fraction));
        }
        for (name, (lo, hi)) in [
            ("radius_grade1", self.radius_grade1),
            ("radius_grade2", self.radius_grade2),
            ("radius_grade3", self.radius_grade3),
        ] {
            if !(lo > 0.0 && hi >= lo) {
                return bad(format!("{} range ({}, {}) invalid", name, lo, hi));
            }
        }
        for (name, (lo, hi)) in [
            ("papillae", self.papillae),
            ("nuclei_per_papilla", self.nuclei_per_papilla),
            ("rings_type2", self.rings_type2),
        ] {
            if lo == 0 || hi < lo {
                return bad(format!("{} range ({}, {}) invalid", name, lo, hi));
            }
        }
        if self.endothelial_per_papilla.1 < self.endothelial_per_papilla.0 {
            return bad("endothelial_per_papilla range invalid".into());
        }
        if !(self.ring_offset > 0.0) || !(self.noise_std >= 0.0) {
            return bad("ring_offset must be positive and noise_std non-negative".into());
        }
        // The largest papilla must fit inside the ROI.
        let worst = papilla_extent(
            self.nuclei_per_papilla.1,
            self.rings_type2.1,
            self.ring_offset,
            self.radius_grade3.1,
        );
        if 2.0 * (worst + 6.0) >= self.roi_size as f64 {
            return bad(format!(
                "largest papilla (extent {:.0}px) cannot fit a {}px ROI",
                worst, self.roi_size
            ));
        }
        Ok(())
    }
}

/// Outer reach of a papilla: outermost ring radius plus nucleus and pad.
fn papilla_extent(n_nuclei: usize, rings: usize, ring_offset: f64, r_nuc_max: f64) -> f64 {
    let per_ring = n_nuclei.div_ceil(rings);
    let r_base = (per_ring as f64 * RING_SPACING / TAU).max(MIN_RING_RADIUS);
    r_base + (rings - 1) as f64 * ring_offset + r_nuc_max + 4.0
}

// Stream purposes. "Shared" streams ignore the class so paired ROI indices
// across classes draw identical sequences.
const PURPOSE_COUNTS: u64 = 0;
const PURPOSE_LAYOUT: u64 = 1;
const PURPOSE_GRADES: u64 = 2;
const PURPOSE_COLOR: u64 = 3;
const PURPOSE_NOISE: u64 = 4;

fn stream_rng(seed: u64, purpose: u64, class_bits: u64, index: usize) -> ChaCha12Rng {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    rng.set_stream((purpose << 56) | (class_bits << 48) | index as u64);
    rng
}

struct Palette {
    background: [f64; 3],
    cytoplasm: [f64; 3],
}

fn palette(class: Subtype, ablation: Ablation) -> Palette {
    match ablation {
        // Hue is a class cue only in full mode; ablations share a neutral tint.
        Ablation::Full => match class {
            Subtype::Type1 => Palette { background: [0.78, 0.76, 0.88], cytoplasm: [0.66, 0.62, 0.80] },
            Subtype::Type2 => Palette { background: [0.90, 0.78, 0.81], cytoplasm: [0.82, 0.62, 0.68] },
        },
        _ => Palette { background: [0.84, 0.77, 0.85], cytoplasm: [0.74, 0.62, 0.74] },
    }
}

fn grade_color(kind: NucleusKind) -> [f64; 3] {
    match kind {
        NucleusKind::Grade1 => [0.42, 0.32, 0.58],
        NucleusKind::Grade2 => [0.33, 0.22, 0.50],
        NucleusKind::Grade3 => [0.20, 0.10, 0.38],
        NucleusKind::Endothelial => [0.50, 0.38, 0.58],
    }
}

struct Canvas {
    size: usize,
    data: Vec<f64>, // [3, size, size]
}

impl Canvas {
    fn new(size: usize, color: [f64; 3]) -> Canvas {
        let mut data = vec![0.0; 3 * size * size];
        for c in 0..3 {
            data[c * size * size..(c + 1) * size * size].fill(color[c]);
        }
        Canvas { size, data }
    }

    fn paint(&mut self, x: usize, y: usize, color: [f64; 3]) {
        let hw = self.size * self.size;
        let at = y * self.size + x;
        self.data[at] = color[0];
        self.data[hw + at] = color[1];
        self.data[2 * hw + at] = color[2];
    }

    fn fill_disc(&mut self, cx: f64, cy: f64, r: f64, color: [f64; 3]) {
        let lo_y = ((cy - r).floor().max(0.0)) as usize;
        let hi_y = ((cy + r).ceil().min(self.size as f64 - 1.0)) as usize;
        let lo_x = ((cx - r).floor().max(0.0)) as usize;
        let hi_x = ((cx + r).ceil().min(self.size as f64 - 1.0)) as usize;
        for y in lo_y..=hi_y {
            for x in lo_x..=hi_x {
                let dx = x as f64 - cx;
                let dy = y as f64 - cy;
                if dx * dx + dy * dy <= r * r {
                    self.paint(x, y, color);
                }
            }
        }
    }

    /// Paints a rotated ellipse and returns its pixel mask, clipped to bounds.
    fn fill_ellipse(&mut self, cx: f64, cy: f64, a: f64, b: f64, phi: f64, color: [f64; 3]) -> Vec<(u32, u32)> {
        let reach = a.max(b);
        let lo_y = ((cy - reach).floor().max(0.0)) as usize;
        let hi_y = ((cy + reach).ceil().min(self.size as f64 - 1.0)) as usize;
        let lo_x = ((cx - reach).floor().max(0.0)) as usize;
        let hi_x = ((cx + reach).ceil().min(self.size as f64 - 1.0)) as usize;
        let (sin, cos) = phi.sin_cos();
        let mut mask = Vec::new();
        for y in lo_y..=hi_y {
            for x in lo_x..=hi_x {
                let dx = x as f64 - cx;
                let dy = y as f64 - cy;
                let u = (dx * cos + dy * sin) / a;
                let v = (-dx * sin + dy * cos) / b;
                if u * u + v * v <= 1.0 {
                    self.paint(x, y, color);
                    mask.push((x as u32, y as u32));
                }
            }
        }
        mask
    }
}

struct PapillaPlan {
    n_nuclei: usize,
    n_endo: usize,
    rings: usize,
    extent: f64,
}

/// Generates one ROI, fully determined by (params.seed, class, index).
pub fn generate_roi(class: Subtype, params: &SynthParams, index: usize) -> Result<RoiRecord> {
    params.validate(params.roi_size)?;
    let size = params.roi_size;
    let ab = params.ablation;
    let class_bits = 1 + class.index() as u64;

    // counts: shared across classes unless every factor is class-specific
    let counts_bits = match ab {
        Ablation::Full => class_bits,
        Ablation::GradeOnly | Ablation::SpatialOnly => 0,
    };
    // layout: shared only when the spatial factor is frozen (grade_only)
    let layout_bits = match ab {
        Ablation::GradeOnly => 0,
        _ => class_bits,
    };
    // grades: shared only when the grade factor is frozen (spatial_only)
    let grades_bits = match ab {
        Ablation::SpatialOnly => 0,
        _ => class_bits,
    };
    let color_bits = match ab {
        Ablation::Full => class_bits,
        _ => 0,
    };

    let mut counts = stream_rng(params.seed, PURPOSE_COUNTS, counts_bits, index);
    let mut layout = stream_rng(params.seed, PURPOSE_LAYOUT, layout_bits, index);
    let mut grades = stream_rng(params.seed, PURPOSE_GRADES, grades_bits, index);
    let mut color = stream_rng(params.seed, PURPOSE_COLOR, color_bits, index);
    let mut noise = stream_rng(params.seed, PURPOSE_NOISE, class_bits, index);

    // Ring counts: one ring for type 1 (and for everyone in grade_only).
    // The draw happens unconditionally so shared counts streams stay aligned
    // across classes even when the result is discarded.
    let rings_for_class = |rng: &mut ChaCha12Rng| -> usize {
        let drawn = rng.random_range(params.rings_type2.0..=params.rings_type2.1);
        match (ab, class) {
            (Ablation::GradeOnly, _) | (_, Subtype::Type1) => 1,
            (_, Subtype::Type2) => drawn,
        }
    };

    let n_papillae = counts.random_range(params.papillae.0..=params.papillae.1);
    let mut plans = Vec::with_capacity(n_papillae);
    for _ in 0..n_papillae {
        let n_nuclei = counts.random_range(params.nuclei_per_papilla.0..=params.nuclei_per_papilla.1);
        let n_endo = counts.random_range(params.endothelial_per_papilla.0..=params.endothelial_per_papilla.1);
        let rings = rings_for_class(&mut counts);
        let extent = papilla_extent(n_nuclei, rings, params.ring_offset, params.radius_grade3.1);
        plans.push(PapillaPlan { n_nuclei, n_endo, rings, extent });
    }

    // Rejection-place papilla centers, farthest-first never required: accept
    // after a bounded number of tries so generation always terminates.
    let mut centers: Vec<(f64, f64)> = Vec::with_capacity(plans.len());
    for plan in &plans {
        let margin = plan.extent + 4.0;
        let lo = margin;
        let hi = size as f64 - margin;
        let mut best = (lo, lo);
        for _try in 0..60 {
            let cand = (layout.random_range(lo..hi), layout.random_range(lo..hi));
            let ok = centers.iter().zip(&plans).all(|(&(ox, oy), other)| {
                let d2 = (cand.0 - ox).powi(2) + (cand.1 - oy).powi(2);
                let need = 0.85 * (plan.extent + other.extent);
                d2 >= need * need
            });
            best = cand;
            if ok {
                break;
            }
        }
        centers.push(best);
    }

    let pal = palette(class, ab);
    let mut canvas = Canvas::new(size, pal.background);
    let mut nuclei: Vec<Nucleus> = Vec::new();

    for (plan, &(px, py)) in plans.iter().zip(&centers) {
        let per_ring_base = plan.n_nuclei / plan.rings;
        let rem = plan.n_nuclei % plan.rings;
        // extras go to outer rings where there is more room
        let ring_counts: Vec<usize> = (0..plan.rings)
            .map(|k| per_ring_base + usize::from(k >= plan.rings - rem))
            .collect();
        let r_base = (ring_counts[0] as f64 * RING_SPACING / TAU).max(MIN_RING_RADIUS);
        let disc_r = r_base + (plan.rings - 1) as f64 * params.ring_offset + params.radius_grade3.1 + 3.0;
        canvas.fill_disc(px, py, disc_r, pal.cytoplasm);

        for (k, &count) in ring_counts.iter().enumerate() {
            let ring_r = r_base + k as f64 * params.ring_offset;
            let phase = layout.random_range(0.0..TAU);
            for i in 0..count {
                let jitter = layout.random_range(-0.35..0.35);
                let theta = TAU * (i as f64 + jitter) / count as f64 + phase;
                let rad = ring_r + layout.random_range(-1.2..1.2);
                let cx = px + rad * theta.cos();
                let cy = py + rad * theta.sin();
                let elong: f64 = layout.random_range(1.1..1.45);
                let phi = theta + PI / 2.0 + layout.random_range(-0.25..0.25);

                let kind = draw_grade(&mut grades, class, ab, params.type2_grade3_fraction);
                let (rlo, rhi) = match kind {
                    NucleusKind::Grade1 => params.radius_grade1,
                    NucleusKind::Grade2 => params.radius_grade2,
                    _ => params.radius_grade3,
                };
                let r_nuc = grades.random_range(rlo..rhi);
                let a = r_nuc * elong.sqrt();
                let b = r_nuc / elong.sqrt();

                let mut col = grade_color(kind);
                for ch in &mut col {
                    *ch = (*ch + color.random_range(-0.03..0.03)).clamp(0.0, 1.0);
                }
                push_nucleus(&mut canvas, &mut nuclei, cx, cy, a, b, phi, kind, col)?;
            }
        }

        // endothelial nuclei scattered inside the core
        for _ in 0..plan.n_endo {
            let rad = layout.random_range(0.0..(r_base - 8.0).max(2.0));
            let theta = layout.random_range(0.0..TAU);
            let cx = px + rad * theta.cos();
            let cy = py + rad * theta.sin();
            let a = layout.random_range(4.2..5.6);
            let b = layout.random_range(1.1..1.7);
            let phi = layout.random_range(0.0..PI);
            let mut col = grade_color(NucleusKind::Endothelial);
            for ch in &mut col {
                *ch = (*ch + color.random_range(-0.03..0.03)).clamp(0.0, 1.0);
            }
            push_nucleus(&mut canvas, &mut nuclei, cx, cy, a, b, phi, NucleusKind::Endothelial, col)?;
        }
    }

    // Additive Gaussian noise, then 8-bit quantization; the in-memory record
    // holds the quantized values so it matches a PNG round trip bit for bit.
    if params.noise_std > 0.0 {
        let dist = Normal::new(0.0, params.noise_std)
            .map_err(|e| Error::Config(format!("noise_std: {}", e)))?;
        for v in canvas.data.iter_mut() {
            *v = (*v + dist.sample(&mut noise)).clamp(0.0, 1.0);
        }
    }
    for v in canvas.data.iter_mut() {
        *v = (*v * 255.0).round() / 255.0;
    }

    let record = RoiRecord {
        roi_id: format!("{}_{:04}", class, index),
        image: Tensor::from_vec(&[3, size, size], canvas.data)?,
        nuclei,
        label: class,
    };
    record.validate()?;
    Ok(record)
}

fn draw_grade(rng: &mut ChaCha12Rng, class: Subtype, ablation: Ablation, g3_frac: f64) -> NucleusKind {
    let low_grade = |r: f64| if r < 0.65 { NucleusKind::Grade1 } else { NucleusKind::Grade2 };
    match (ablation, class) {
        // spatial_only freezes the grade factor to the type-1 mix for both
        // classes, so "type 1 has no grade 3" holds in every mode.
        (Ablation::SpatialOnly, _) | (_, Subtype::Type1) => low_grade(rng.random::<f64>()),
        (_, Subtype::Type2) => {
            if rng.random::<f64>() < g3_frac {
                NucleusKind::Grade3
            } else {
                low_grade(rng.random::<f64>())
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn push_nucleus(
    canvas: &mut Canvas,
    nuclei: &mut Vec<Nucleus>,
    cx: f64,
    cy: f64,
    a: f64,
    b: f64,
    phi: f64,
    kind: NucleusKind,
    color: [f64; 3],
) -> Result<()> {
    let size = canvas.size as f64;
    if !(cx >= 1.0 && cx < size - 1.0 && cy >= 1.0 && cy < size - 1.0) {
        return Err(Error::Contract {
            op: "generate_roi",
            msg: format!("nucleus center ({:.1}, {:.1}) escaped the ROI", cx, cy),
        });
    }
    let mask = canvas.fill_ellipse(cx, cy, a, b, phi, color);
    debug_assert!(!mask.is_empty());
    let (area, major, minor) = compute_morphology(&mask)?;
    nuclei.push(Nucleus { cx, cy, kind, area, major_axis: major, minor_axis: minor, mask: Some(mask) });
    Ok(())
}

/// Train/val/test sizes for one class: floor(60%), floor(20%), remainder.
pub fn split_counts(n: usize) -> (usize, usize, usize) {
    let train = n * 3 / 5;
    let val = n / 5;
    (train, val, n - train - val)
}

/// Writes `images/*.png`, `manifest.jsonl`, and per-split manifests under
/// `out_dir` with `n_per_class` ROIs per class, split 60/20/20.
pub fn generate_dataset(out_dir: &Path, n_per_class: usize, params: &SynthParams) -> Result<Vec<ManifestEntry>> {
    if n_per_class == 0 {
        return Err(Error::Config("n_per_class must be >= 1".into()));
    }
    generate_dataset_split(out_dir, split_counts(n_per_class), params)
}

/// As [`generate_dataset`], but with explicit per-class split sizes.
pub fn generate_dataset_split(
    out_dir: &Path,
    per_class: (usize, usize, usize),
    params: &SynthParams,
) -> Result<Vec<ManifestEntry>> {
    let n_per_class = per_class.0 + per_class.1 + per_class.2;
    if n_per_class == 0 {
        return Err(Error::Config("empty dataset requested".into()));
    }
    params.validate(params.roi_size)?;
    let images_dir = out_dir.join("images");
    std::fs::create_dir_all(&images_dir)?;

    let jobs: Vec<(Subtype, usize)> = [Subtype::Type1, Subtype::Type2]
        .into_iter()
        .flat_map(|c| (0..n_per_class).map(move |i| (c, i)))
        .collect();
    let entries: Vec<ManifestEntry> = jobs
        .into_par_iter()
        .map(|(class, index)| -> Result<ManifestEntry> {
            let roi = generate_roi(class, params, index)?;
            let file = format!("images/{}.png", roi.roi_id);
            write_png(&out_dir.join(&file), &roi)?;
            Ok(manifest_entry(&roi, file))
        })
        .collect::<Result<_>>()?;

    write_split_manifests(out_dir, &entries, n_per_class, per_class)?;
    Ok(entries)
}

fn manifest_entry(roi: &RoiRecord, image_path: String) -> ManifestEntry {
    ManifestEntry {
        roi_id: roi.roi_id.clone(),
        image: image_path,
        label: roi.label,
        nuclei: roi
            .nuclei
            .iter()
            .map(|n| ManifestNucleus {
                cx: n.cx,
                cy: n.cy,
                kind: n.kind,
                area: n.area,
                major_axis: n.major_axis,
                minor_axis: n.minor_axis,
                mask_rle: n.mask.as_deref().and_then(encode_mask_rle),
            })
            .collect(),
    }
}

fn write_png(path: &Path, roi: &RoiRecord) -> Result<()> {
    let size = roi.height();
    let data = roi.image.data();
    let hw = size * size;
    let mut buf = Vec::with_capacity(3 * hw);
    for i in 0..hw {
        for c in 0..3 {
            buf.push((data[c * hw + i] * 255.0).round() as u8);
        }
    }
    drop(data);
    let img = image::RgbImage::from_raw(size as u32, size as u32, buf)
        .ok_or_else(|| Error::Image("buffer size mismatch".into()))?;
    img.save_with_format(path, image::ImageFormat::Png)?;
    Ok(())
}

fn write_split_manifests(
    out_dir: &Path,
    entries: &[ManifestEntry],
    n_per_class: usize,
    (n_train, n_val, _): (usize, usize, usize),
) -> Result<()> {
    crate::extraction::write_manifest(entries, &out_dir.join("manifest.jsonl"))?;
    let split_of = |idx_in_class: usize| -> usize {
        if idx_in_class < n_train {
            0
        } else if idx_in_class < n_train + n_val {
            1
        } else {
            2
        }
    };
    for (si, name) in ["train.jsonl", "val.jsonl", "test.jsonl"].iter().enumerate() {
        let subset: Vec<ManifestEntry> = entries
            .iter()
            .enumerate()
            .filter(|(i, _)| split_of(i % n_per_class) == si)
            .map(|(_, e)| e.clone())
            .collect();
        crate::extraction::write_manifest(&subset, &out_dir.join(name))?;
    }
    Ok(())
}

/// Conventional file layout under a dataset directory.
pub fn dataset_paths(dir: &Path) -> (PathBuf, PathBuf, PathBuf, PathBuf) {
    (
        dir.join("manifest.jsonl"),
        dir.join("train.jsonl"),
        dir.join("val.jsonl"),
        dir.join("test.jsonl"),
    )
}
