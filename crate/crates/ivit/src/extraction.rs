//! ROI-to-instance-bag extraction: nucleus-centered patch cropping,
//! morphology, coordinate gridding, and top-N selection by grade and size.
//!
//! Everything here is a pure function of an in-memory [`RoiRecord`]; manifest
//! parsing and PNG decoding live at the bottom of the module.

use std::fmt;
use std::io::{BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::IViTConfig;
use crate::numerics::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NucleusKind {
    Grade1,
    Grade2,
    Grade3,
    Endothelial,
}

impl NucleusKind {
    /// Zero-based grade embedding id; endothelial nuclei have none.
    pub fn grade_id(self) -> Option<usize> {
        match self {
            NucleusKind::Grade1 => Some(0),
            NucleusKind::Grade2 => Some(1),
            NucleusKind::Grade3 => Some(2),
            NucleusKind::Endothelial => None,
        }
    }

    pub fn is_tumor(self) -> bool {
        self.grade_id().is_some()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Subtype {
    Type1,
    Type2,
}

impl Subtype {
    pub fn index(self) -> usize {
        match self {
            Subtype::Type1 => 0,
            Subtype::Type2 => 1,
        }
    }

    pub fn from_index(i: usize) -> Subtype {
        if i == 0 {
            Subtype::Type1
        } else {
            Subtype::Type2
        }
    }
}

impl fmt::Display for Subtype {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Subtype::Type1 => write!(f, "type1"),
            Subtype::Type2 => write!(f, "type2"),
        }
    }
}

/// One segmented nucleus. `mask`, when present, holds absolute (x, y) pixel
/// coordinates within the ROI.
#[derive(Debug, Clone)]
pub struct Nucleus {
    pub cx: f64,
    pub cy: f64,
    pub kind: NucleusKind,
    pub area: f64,
    pub major_axis: f64,
    pub minor_axis: f64,
    pub mask: Option<Vec<(u32, u32)>>,
}

/// A segmented ROI: RGB image in [0,1] plus its nucleus list and label.
#[derive(Debug, Clone)]
pub struct RoiRecord {
    pub roi_id: String,
    pub image: Tensor,
    pub nuclei: Vec<Nucleus>,
    pub label: Subtype,
}

impl RoiRecord {
    pub fn height(&self) -> usize {
        self.image.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.image.shape()[2]
    }

    /// Checks the structural invariants: centers in bounds, positive sizes,
    /// mask cardinality consistent with area.
    pub fn validate(&self) -> Result<()> {
        if self.image.ndim() != 3 || self.image.shape()[0] != 3 {
            return Err(Error::Manifest(format!(
                "ROI {}: image must be [3,H,W], got {:?}",
                self.roi_id,
                self.image.shape()
            )));
        }
        let (h, w) = (self.height() as f64, self.width() as f64);
        for (i, n) in self.nuclei.iter().enumerate() {
            if !(n.cx >= 0.0 && n.cx < w && n.cy >= 0.0 && n.cy < h) {
                return Err(Error::Manifest(format!(
                    "ROI {}: nucleus {} center ({}, {}) outside {}x{}",
                    self.roi_id, i, n.cx, n.cy, w, h
                )));
            }
            if !(n.area > 0.0) || !(n.major_axis >= n.minor_axis) || !(n.minor_axis > 0.0) {
                return Err(Error::Manifest(format!(
                    "ROI {}: nucleus {} has degenerate size (area {}, axes {}/{})",
                    self.roi_id, i, n.area, n.major_axis, n.minor_axis
                )));
            }
            if let Some(mask) = &n.mask {
                if (mask.len() as f64 - n.area).abs() > 1e-9 {
                    return Err(Error::Manifest(format!(
                        "ROI {}: nucleus {} mask has {} pixels but area {}",
                        self.roi_id,
                        i,
                        mask.len(),
                        n.area
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Model-ready bag: patch stack plus per-slot embedding ids and validity.
/// Valid entries lead and are sorted by (grade desc, area desc).
#[derive(Debug, Clone)]
pub struct InstanceBag {
    pub roi_id: String,
    pub patches: Tensor,
    pub grid_x: Vec<usize>,
    pub grid_y: Vec<usize>,
    pub grade_ids: Vec<usize>,
    pub valid: Vec<bool>,
    pub n_valid: usize,
    pub label: Subtype,
}

/// Crops the P x P window centered (after flooring) on the nucleus;
/// out-of-bounds pixels are zero-filled.
pub fn crop_patch(roi: &RoiRecord, nucleus: &Nucleus, p: usize) -> Result<Tensor> {
    if p < 8 || p % 2 != 0 {
        return Err(Error::Contract { op: "crop_patch", msg: format!("P must be even and >= 8, got {}", p) });
    }
    let (h, w) = (roi.height() as isize, roi.width() as isize);
    let half = (p / 2) as isize;
    let cy = nucleus.cy.floor() as isize;
    let cx = nucleus.cx.floor() as isize;
    let img = roi.image.data();
    let mut out = vec![0.0; 3 * p * p];
    for c in 0..3isize {
        for dy in 0..p as isize {
            let sy = cy - half + dy;
            if sy < 0 || sy >= h {
                continue;
            }
            let src_row = &img[((c * h + sy) * w) as usize..((c * h + sy) * w + w) as usize];
            let dst_row = &mut out[((c * p as isize + dy) * p as isize) as usize
                ..((c * p as isize + dy) * p as isize + p as isize) as usize];
            for dx in 0..p as isize {
                let sx = cx - half + dx;
                if sx >= 0 && sx < w {
                    dst_row[dx as usize] = src_row[sx as usize];
                }
            }
        }
    }
    drop(img);
    Tensor::from_vec(&[3, p, p], out)
}

/// Area plus equivalent-ellipse axes (4 sqrt of covariance eigenvalues) of a
/// pixel mask.
pub fn compute_morphology(mask: &[(u32, u32)]) -> Result<(f64, f64, f64)> {
    if mask.is_empty() {
        return Err(Error::Contract { op: "compute_morphology", msg: "empty mask".into() });
    }
    let n = mask.len() as f64;
    let (mut mx, mut my) = (0.0, 0.0);
    for &(x, y) in mask {
        mx += x as f64;
        my += y as f64;
    }
    mx /= n;
    my /= n;
    let (mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0);
    for &(x, y) in mask {
        let dx = x as f64 - mx;
        let dy = y as f64 - my;
        sxx += dx * dx;
        syy += dy * dy;
        sxy += dx * dy;
    }
    sxx /= n;
    syy /= n;
    sxy /= n;
    let tr = sxx + syy;
    let det_root = ((sxx - syy) * (sxx - syy) + 4.0 * sxy * sxy).sqrt();
    let l1 = 0.5 * (tr + det_root);
    let l2 = (0.5 * (tr - det_root)).max(0.0);
    Ok((n, 4.0 * l1.sqrt(), 4.0 * l2.sqrt()))
}

/// Floor-divides a center into grid coordinates.
pub fn grid_position(cx: f64, cy: f64, factor: usize) -> (usize, usize) {
    debug_assert!(factor >= 1 && cx >= 0.0 && cy >= 0.0);
    ((cx / factor as f64).floor() as usize, (cy / factor as f64).floor() as usize)
}

/// Excludes endothelial nuclei, sorts the rest by grade descending then area
/// descending (ties broken by (cy, cx) ascending), and keeps the first `n`.
/// Returns indices into `nuclei`.
pub fn select_top_k_indices(nuclei: &[Nucleus], n: usize) -> Result<Vec<usize>> {
    let mut tumor: Vec<usize> = (0..nuclei.len()).filter(|&i| nuclei[i].kind.is_tumor()).collect();
    if tumor.is_empty() {
        return Err(Error::EmptyBag { roi_id: String::new() });
    }
    tumor.sort_by(|&ia, &ib| {
        let (a, b) = (&nuclei[ia], &nuclei[ib]);
        b.kind
            .grade_id()
            .cmp(&a.kind.grade_id())
            .then(b.area.total_cmp(&a.area))
            .then(a.cy.total_cmp(&b.cy))
            .then(a.cx.total_cmp(&b.cx))
    });
    tumor.truncate(n);
    Ok(tumor)
}

/// [`select_top_k_indices`], resolved to nucleus references.
pub fn select_top_k(nuclei: &[Nucleus], n: usize) -> Result<Vec<&Nucleus>> {
    Ok(select_top_k_indices(nuclei, n)?.into_iter().map(|i| &nuclei[i]).collect())
}

/// Combines selection, cropping, and gridding into a padded bag of length
/// `config.n`.
pub fn build_bag(roi: &RoiRecord, config: &IViTConfig) -> Result<InstanceBag> {
    let selected = select_top_k(&roi.nuclei, config.n)
        .map_err(|_| Error::EmptyBag { roi_id: roi.roi_id.clone() })?;
    let n_valid = selected.len();
    let p = config.p;
    let mut patches = vec![0.0; config.n * 3 * p * p];
    let mut grid_x = vec![config.grid_w + 1; config.n];
    let mut grid_y = vec![config.grid_h + 1; config.n];
    let mut grade_ids = vec![config.n_grades + 1; config.n];
    let mut valid = vec![false; config.n];
    for (i, nucleus) in selected.iter().enumerate() {
        let patch = crop_patch(roi, nucleus, p)?;
        patches[i * 3 * p * p..(i + 1) * 3 * p * p].copy_from_slice(&patch.data());
        let (gx, gy) = grid_position(nucleus.cx, nucleus.cy, crate::config::GRID_FACTOR);
        if gx >= config.grid_w || gy >= config.grid_h {
            return Err(Error::Contract {
                op: "build_bag",
                msg: format!(
                    "ROI {}: grid position ({}, {}) outside vocabulary {}x{}",
                    roi.roi_id, gx, gy, config.grid_w, config.grid_h
                ),
            });
        }
        grid_x[i] = gx;
        grid_y[i] = gy;
        grade_ids[i] = nucleus.kind.grade_id().expect("selected nuclei are tumor");
        valid[i] = true;
    }
    Ok(InstanceBag {
        roi_id: roi.roi_id.clone(),
        patches: Tensor::from_vec(&[config.n, 3, p, p], patches)?,
        grid_x,
        grid_y,
        grade_ids,
        valid,
        n_valid,
        label: roi.label,
    })
}

// ---------------------------------------------------------------------------
// Manifest format: one JSON object per line.

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestNucleus {
    pub cx: f64,
    pub cy: f64,
    pub kind: NucleusKind,
    pub area: f64,
    pub major_axis: f64,
    pub minor_axis: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mask_rle: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub roi_id: String,
    /// Path to an 8-bit RGB PNG, relative to the manifest file.
    pub image: String,
    pub label: Subtype,
    pub nuclei: Vec<ManifestNucleus>,
}

/// Encodes a mask as `"x0 y0 w h:c0 c1 ..."`: run lengths over the bounding
/// box in row-major order, alternating background/foreground, starting with
/// background.
pub fn encode_mask_rle(mask: &[(u32, u32)]) -> Option<String> {
    if mask.is_empty() {
        return None;
    }
    let x0 = mask.iter().map(|p| p.0).min().unwrap();
    let y0 = mask.iter().map(|p| p.1).min().unwrap();
    let x1 = mask.iter().map(|p| p.0).max().unwrap();
    let y1 = mask.iter().map(|p| p.1).max().unwrap();
    let w = (x1 - x0 + 1) as usize;
    let h = (y1 - y0 + 1) as usize;
    let mut grid = vec![false; w * h];
    for &(x, y) in mask {
        grid[(y - y0) as usize * w + (x - x0) as usize] = true;
    }
    let mut runs: Vec<usize> = Vec::new();
    let mut current = false; // runs start with background
    let mut count = 0usize;
    for &cell in &grid {
        if cell == current {
            count += 1;
        } else {
            runs.push(count);
            current = cell;
            count = 1;
        }
    }
    runs.push(count);
    let body: Vec<String> = runs.iter().map(|c| c.to_string()).collect();
    Some(format!("{} {} {} {}:{}", x0, y0, w, h, body.join(" ")))
}

pub fn decode_mask_rle(rle: &str) -> Result<Vec<(u32, u32)>> {
    let bad = |msg: &str| Error::Manifest(format!("mask_rle {:?}: {}", rle, msg));
    let (head, body) = rle.split_once(':').ok_or_else(|| bad("missing ':'"))?;
    let head: Vec<u32> = head
        .split_whitespace()
        .map(|t| t.parse::<u32>().map_err(|_| bad("bad header number")))
        .collect::<Result<_>>()?;
    let [x0, y0, w, h] = head[..] else {
        return Err(bad("header must be x0 y0 w h"));
    };
    let mut mask = Vec::new();
    let mut pos = 0usize;
    let total = (w as usize) * (h as usize);
    let mut foreground = false;
    for tok in body.split_whitespace() {
        let run: usize = tok.parse().map_err(|_| bad("bad run length"))?;
        if foreground {
            for i in pos..pos + run {
                if i >= total {
                    return Err(bad("runs exceed bounding box"));
                }
                mask.push((x0 + (i % w as usize) as u32, y0 + (i / w as usize) as u32));
            }
        }
        pos += run;
        foreground = !foreground;
    }
    if pos != total {
        return Err(bad("runs do not cover bounding box"));
    }
    Ok(mask)
}

pub fn write_manifest(entries: &[ManifestEntry], path: &Path) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for e in entries {
        serde_json::to_writer(&mut f, e)?;
        f.write_all(b"\n")?;
    }
    f.flush()?;
    Ok(())
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let f = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut entries = Vec::new();
    for (i, line) in f.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let e: ManifestEntry = serde_json::from_str(&line)
            .map_err(|err| Error::Manifest(format!("{}:{}: {}", path.display(), i + 1, err)))?;
        entries.push(e);
    }
    Ok(entries)
}

/// Loads the PNG behind a manifest entry and materializes a validated
/// [`RoiRecord`]. Pixels are divided by 255.
pub fn load_roi(entry: &ManifestEntry, manifest_dir: &Path) -> Result<RoiRecord> {
    let img_path = manifest_dir.join(&entry.image);
    let img = image::open(&img_path)?.into_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let raw = img.into_raw(); // interleaved RGB
    let mut data = vec![0.0; 3 * h * w];
    for y in 0..h {
        for x in 0..w {
            let base = (y * w + x) * 3;
            for c in 0..3 {
                data[(c * h + y) * w + x] = raw[base + c] as f64 / 255.0;
            }
        }
    }
    let nuclei = entry
        .nuclei
        .iter()
        .map(|n| {
            let mask = n.mask_rle.as_deref().map(decode_mask_rle).transpose()?;
            Ok(Nucleus {
                cx: n.cx,
                cy: n.cy,
                kind: n.kind,
                area: n.area,
                major_axis: n.major_axis,
                minor_axis: n.minor_axis,
                mask,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let record = RoiRecord {
        roi_id: entry.roi_id.clone(),
        image: Tensor::from_vec(&[3, h, w], data)?,
        nuclei,
        label: entry.label,
    };
    record.validate()?;
    Ok(record)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn nucleus(cx: f64, cy: f64, kind: NucleusKind, area: f64) -> Nucleus {
        Nucleus { cx, cy, kind, area, major_axis: 4.0, minor_axis: 2.0, mask: None }
    }

    fn gradient_roi(h: usize, w: usize) -> RoiRecord {
        // pixel value encodes position so crops are verifiable
        let mut data = vec![0.0; 3 * h * w];
        for c in 0..3 {
            for y in 0..h {
                for x in 0..w {
                    data[(c * h + y) * w + x] = (c * h * w + y * w + x) as f64 / (3 * h * w) as f64;
                }
            }
        }
        RoiRecord {
            roi_id: "r0".into(),
            image: Tensor::from_vec(&[3, h, w], data).unwrap(),
            nuclei: vec![],
            label: Subtype::Type1,
        }
    }

    #[test]
    fn crop_window_is_centered_with_floor() {
        let roi = gradient_roi(200, 200);
        let n = nucleus(100.7, 100.2, NucleusKind::Grade1, 10.0);
        let patch = crop_patch(&roi, &n, 64).unwrap();
        assert_eq!(patch.shape(), &[3, 64, 64]);
        // window rows 68..131, cols 68..131; check corner pixel identity
        let img = roi.image.data();
        let pd = patch.data();
        assert_eq!(pd[0], img[68 * 200 + 68]);
        assert_eq!(pd[63], img[68 * 200 + 131]);
    }

    #[test]
    fn crop_zero_fills_borders() {
        let roi = gradient_roi(100, 100);
        let n = nucleus(10.0, 10.0, NucleusKind::Grade1, 10.0);
        let patch = crop_patch(&roi, &n, 64).unwrap();
        let pd = patch.data();
        // rows -22..41: first 22 rows of every channel are zero
        for c in 0..3 {
            for y in 0..22 {
                for x in 0..64 {
                    assert_eq!(pd[(c * 64 + y) * 64 + x], 0.0);
                }
            }
        }
        // in-bounds corner maps to image (0,0) area
        assert_eq!(pd[22 * 64 + 22], roi.image.data()[0]);
    }

    #[test]
    fn morphology_single_pixel_and_strip() {
        assert_eq!(compute_morphology(&[(5, 5)]).unwrap(), (1.0, 0.0, 0.0));
        let strip: Vec<(u32, u32)> = (0..9).map(|x| (x, 3)).collect();
        let (area, major, minor) = compute_morphology(&strip).unwrap();
        assert_eq!(area, 9.0);
        assert!((major - 4.0 * (20.0f64 / 3.0).sqrt()).abs() < 1e-12);
        assert_eq!(minor, 0.0);
    }

    #[test]
    fn morphology_disc_is_axisymmetric() {
        let mut mask = Vec::new();
        for y in -20i32..=20 {
            for x in -20i32..=20 {
                if x * x + y * y <= 400 {
                    mask.push(((x + 30) as u32, (y + 30) as u32));
                }
            }
        }
        let (_, major, minor) = compute_morphology(&mask).unwrap();
        assert!((major - minor).abs() / major < 0.02);
    }

    #[test]
    fn morphology_rejects_empty() {
        assert!(compute_morphology(&[]).is_err());
    }

    #[test]
    fn grid_position_floors() {
        assert_eq!(grid_position(1234.0, 56.0, 20), (61, 2));
        assert_eq!(grid_position(0.0, 0.0, 20), (0, 0));
        assert_eq!(grid_position(19.99, 20.0, 20), (0, 1));
    }

    #[test]
    fn select_orders_by_grade_then_area() {
        let nuclei = vec![
            nucleus(0.0, 0.0, NucleusKind::Grade2, 50.0),
            nucleus(1.0, 1.0, NucleusKind::Grade3, 10.0),
            nucleus(2.0, 2.0, NucleusKind::Endothelial, 99.0),
            nucleus(3.0, 3.0, NucleusKind::Grade1, 80.0),
            nucleus(4.0, 4.0, NucleusKind::Grade3, 40.0),
        ];
        let top = select_top_k(&nuclei, 3).unwrap();
        let got: Vec<(NucleusKind, f64)> = top.iter().map(|n| (n.kind, n.area)).collect();
        assert_eq!(
            got,
            vec![
                (NucleusKind::Grade3, 40.0),
                (NucleusKind::Grade3, 10.0),
                (NucleusKind::Grade2, 50.0)
            ]
        );
        // n larger than available: all tumor nuclei, stable order
        let all = select_top_k(&nuclei, 100).unwrap();
        assert_eq!(all.len(), 4);
    }

    #[test]
    fn select_ties_break_by_position() {
        let nuclei = vec![
            nucleus(9.0, 5.0, NucleusKind::Grade1, 30.0),
            nucleus(2.0, 5.0, NucleusKind::Grade1, 30.0),
            nucleus(4.0, 1.0, NucleusKind::Grade1, 30.0),
        ];
        let top = select_top_k(&nuclei, 3).unwrap();
        let centers: Vec<(f64, f64)> = top.iter().map(|n| (n.cy, n.cx)).collect();
        assert_eq!(centers, vec![(1.0, 4.0), (5.0, 2.0), (5.0, 9.0)]);
    }

    #[test]
    fn select_rejects_all_endothelial() {
        let nuclei = vec![nucleus(0.0, 0.0, NucleusKind::Endothelial, 10.0)];
        assert!(matches!(select_top_k(&nuclei, 5), Err(Error::EmptyBag { .. })));
    }

    #[test]
    fn mask_rle_roundtrip() {
        let mask: Vec<(u32, u32)> = vec![(10, 4), (11, 4), (12, 4), (10, 5), (12, 5), (11, 6)];
        let rle = encode_mask_rle(&mask).unwrap();
        let mut back = decode_mask_rle(&rle).unwrap();
        back.sort_unstable();
        let mut orig = mask.clone();
        orig.sort_unstable();
        assert_eq!(back, orig);
    }

    #[test]
    fn mask_rle_single_pixel() {
        let rle = encode_mask_rle(&[(7, 9)]).unwrap();
        assert_eq!(decode_mask_rle(&rle).unwrap(), vec![(7, 9)]);
    }

    #[test]
    fn bag_pads_with_reserved_ids() {
        let mut roi = gradient_roi(100, 100);
        roi.nuclei = vec![
            nucleus(50.0, 50.0, NucleusKind::Grade2, 40.0),
            nucleus(30.0, 60.0, NucleusKind::Grade1, 20.0),
            nucleus(70.0, 20.0, NucleusKind::Endothelial, 90.0),
        ];
        let config = IViTConfig { p: 16, n: 5, d: 16, heads: 2, layers: 1, grid_w: 5, grid_h: 5, n_grades: 3, n_classes: 2, mlp_ratio: 4 };
        let bag = build_bag(&roi, &config).unwrap();
        assert_eq!(bag.n_valid, 2);
        assert_eq!(bag.valid, vec![true, true, false, false, false]);
        assert_eq!(bag.grade_ids[0], 1); // grade2 first (higher grade)
        assert_eq!(bag.grade_ids[1], 0);
        assert_eq!(bag.grade_ids[2], config.n_grades + 1); // pad slot
        assert_eq!(bag.grid_x[3], config.grid_w + 1);
        assert_eq!(bag.grid_y[4], config.grid_h + 1);
        // pad patches are all zero
        let pd = bag.patches.data();
        assert!(pd[2 * 3 * 256..].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn bag_rejects_grid_overflow() {
        let mut roi = gradient_roi(100, 100);
        roi.nuclei = vec![nucleus(90.0, 90.0, NucleusKind::Grade1, 10.0)];
        // grid vocab 2x2 but position (90,90)/20 = (4,4)
        let config = IViTConfig { p: 16, n: 4, d: 16, heads: 2, layers: 1, grid_w: 2, grid_h: 2, n_grades: 3, n_classes: 2, mlp_ratio: 4 };
        assert!(matches!(build_bag(&roi, &config), Err(Error::Contract { .. })));
    }

    #[test]
    fn validate_catches_out_of_bounds_center() {
        let mut roi = gradient_roi(50, 50);
        roi.nuclei = vec![nucleus(60.0, 10.0, NucleusKind::Grade1, 5.0)];
        assert!(roi.validate().is_err());
    }
}
