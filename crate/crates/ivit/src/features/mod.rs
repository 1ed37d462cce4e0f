//! Hand-crafted cellular features and the classifiers built on them.
//!
//! Ten per-nucleus features (morphology, color, Delaunay neighbor distances)
//! aggregate into a 150-dim per-image distribution vector; with the 3-dim
//! grade distribution appended this is the 153-dim export layout. The same
//! ten raw features feed the feature-token transformer variant.

pub mod decision_tree;
pub mod delaunay;

use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::extraction::{crop_patch, select_top_k_indices, Nucleus, RoiRecord, Subtype};
use crate::model::{IViTConfig, RAW_FEATURE_DIM};
use crate::numerics::tensor::Tensor;

use delaunay::neighbor_distance_stats;

pub const AGGREGATE_DIM: usize = 150;
pub const EXPORT_DIM: usize = AGGREGATE_DIM + 3;
const STATS_PER_FEATURE: usize = 15; // mean, std, skew, kurt, entropy, 10 bins
const HIST_BINS: usize = 10;

/// Per-nucleus rows `[area, major, minor, axis_ratio, mean_R, mean_G, mean_B,
/// d_max, d_min, d_mean]` for every tumor nucleus, along with the indices of
/// those nuclei in `roi.nuclei`. The Delaunay graph spans all tumor centers;
/// endothelial nuclei are excluded throughout. Color means are taken over the
/// nucleus mask when present, else over the P x P patch around the center.
pub fn cellular_features(roi: &RoiRecord, p: usize) -> Result<(Vec<usize>, Vec<[f64; RAW_FEATURE_DIM]>)> {
    let tumor: Vec<usize> =
        (0..roi.nuclei.len()).filter(|&i| roi.nuclei[i].kind.is_tumor()).collect();
    if tumor.len() < 2 {
        return Err(Error::Contract {
            op: "cellular_features",
            msg: format!("ROI {}: need >= 2 tumor nuclei, got {}", roi.roi_id, tumor.len()),
        });
    }
    let points: Vec<(f64, f64)> =
        tumor.iter().map(|&i| (roi.nuclei[i].cx, roi.nuclei[i].cy)).collect();
    let dists = neighbor_distance_stats(&points)?;

    let mut rows = Vec::with_capacity(tumor.len());
    for (k, &i) in tumor.iter().enumerate() {
        let n = &roi.nuclei[i];
        if n.minor_axis <= 0.0 {
            return Err(Error::Contract {
                op: "cellular_features",
                msg: format!("ROI {}: nucleus {} has non-positive minor axis", roi.roi_id, i),
            });
        }
        let (r, g, b) = color_means(roi, n, p)?;
        let (d_max, d_min, d_mean) = dists[k];
        rows.push([
            n.area,
            n.major_axis,
            n.minor_axis,
            n.major_axis / n.minor_axis,
            r,
            g,
            b,
            d_max,
            d_min,
            d_mean,
        ]);
    }
    Ok((tumor, rows))
}

fn color_means(roi: &RoiRecord, n: &Nucleus, p: usize) -> Result<(f64, f64, f64)> {
    let (h, w) = (roi.height(), roi.width());
    if let Some(mask) = &n.mask {
        let img = roi.image.data();
        let mut sums = [0.0; 3];
        let mut count = 0usize;
        for &(x, y) in mask {
            let (x, y) = (x as usize, y as usize);
            if x < w && y < h {
                for c in 0..3 {
                    sums[c] += img[(c * h + y) * w + x];
                }
                count += 1;
            }
        }
        if count > 0 {
            return Ok((sums[0] / count as f64, sums[1] / count as f64, sums[2] / count as f64));
        }
    }
    let patch = crop_patch(roi, n, p)?;
    let pd = patch.data();
    let per_channel = p * p;
    let mut sums = [0.0; 3];
    for c in 0..3 {
        sums[c] = pd[c * per_channel..(c + 1) * per_channel].iter().sum();
    }
    Ok((sums[0] / per_channel as f64, sums[1] / per_channel as f64, sums[2] / per_channel as f64))
}

/// Distribution statistics of each feature column: mean, population std,
/// Fisher skewness, excess kurtosis, Shannon entropy (natural log) of the
/// normalized 10-bin histogram, then the histogram itself. Bins span the
/// column's own [min, max] with equal width; a single-valued column puts all
/// mass in bin 0 and defines skewness and kurtosis as 0.
pub fn aggregate_distribution(rows: &[[f64; RAW_FEATURE_DIM]]) -> Result<[f64; AGGREGATE_DIM]> {
    if rows.is_empty() {
        return Err(Error::Contract { op: "aggregate_distribution", msg: "empty feature list".into() });
    }
    let n = rows.len() as f64;
    let mut out = [0.0; AGGREGATE_DIM];
    for f in 0..RAW_FEATURE_DIM {
        let col: Vec<f64> = rows.iter().map(|r| r[f]).collect();
        let mean = col.iter().sum::<f64>() / n;
        let (mut m2, mut m3, mut m4) = (0.0, 0.0, 0.0);
        for &v in &col {
            let d = v - mean;
            m2 += d * d;
            m3 += d * d * d;
            m4 += d * d * d * d;
        }
        m2 /= n;
        m3 /= n;
        m4 /= n;
        let std = m2.sqrt();
        let (skew, kurt) = if m2 == 0.0 { (0.0, 0.0) } else { (m3 / m2.powf(1.5), m4 / (m2 * m2) - 3.0) };

        let lo = col.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = col.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut hist = [0.0; HIST_BINS];
        if lo == hi {
            hist[0] = 1.0;
        } else {
            let width = (hi - lo) / HIST_BINS as f64;
            for &v in &col {
                let bin = (((v - lo) / width) as usize).min(HIST_BINS - 1);
                hist[bin] += 1.0;
            }
            for h in hist.iter_mut() {
                *h /= n;
            }
        }
        let entropy = -hist.iter().filter(|&&h| h > 0.0).map(|&h| h * h.ln()).sum::<f64>();

        let base = f * STATS_PER_FEATURE;
        out[base] = mean;
        out[base + 1] = std;
        out[base + 2] = skew;
        out[base + 3] = kurt;
        out[base + 4] = entropy;
        out[base + 5..base + 5 + HIST_BINS].copy_from_slice(&hist);
    }
    Ok(out)
}

/// Normalized grade-1/2/3 counts over tumor nuclei; endothelial nuclei are
/// excluded from numerator and denominator alike.
pub fn grade_distribution(nuclei: &[Nucleus]) -> Result<[f64; 3]> {
    let mut counts = [0.0; 3];
    let mut total = 0.0;
    for n in nuclei {
        if let Some(g) = n.kind.grade_id() {
            counts[g] += 1.0;
            total += 1.0;
        }
    }
    if total == 0.0 {
        return Err(Error::Contract { op: "grade_distribution", msg: "no tumor nuclei".into() });
    }
    Ok([counts[0] / total, counts[1] / total, counts[2] / total])
}

/// The 153-dim export layout: 150 aggregate statistics then the 3-dim grade
/// distribution.
pub fn image_feature_vector(roi: &RoiRecord, p: usize) -> Result<[f64; EXPORT_DIM]> {
    let (_, rows) = cellular_features(roi, p)?;
    let agg = aggregate_distribution(&rows)?;
    let grades = grade_distribution(&roi.nuclei)?;
    let mut out = [0.0; EXPORT_DIM];
    out[..AGGREGATE_DIM].copy_from_slice(&agg);
    out[AGGREGATE_DIM..].copy_from_slice(&grades);
    Ok(out)
}

/// Feature-token bag: raw 10-dim rows for the selected top-N nuclei, padded
/// with zero rows. Selection order and pad ids match the patch-based bag.
#[derive(Debug, Clone)]
pub struct FeatureBag {
    pub roi_id: String,
    /// `[n, RAW_FEATURE_DIM]`, pad rows all zero.
    pub features: Tensor,
    pub grade_ids: Vec<usize>,
    pub valid: Vec<bool>,
    pub n_valid: usize,
    pub label: Subtype,
}

pub fn build_feature_bag(roi: &RoiRecord, config: &IViTConfig) -> Result<FeatureBag> {
    let (tumor, rows) = cellular_features(roi, config.p)?;
    let mut row_of = vec![None; roi.nuclei.len()];
    for (r, &i) in tumor.iter().enumerate() {
        row_of[i] = Some(r);
    }
    let selected = select_top_k_indices(&roi.nuclei, config.n)
        .map_err(|_| Error::EmptyBag { roi_id: roi.roi_id.clone() })?;
    let n_valid = selected.len();
    let mut features = vec![0.0; config.n * RAW_FEATURE_DIM];
    let mut grade_ids = vec![config.n_grades + 1; config.n];
    let mut valid = vec![false; config.n];
    for (slot, &i) in selected.iter().enumerate() {
        let row = row_of[i].expect("selected nuclei are tumor");
        features[slot * RAW_FEATURE_DIM..(slot + 1) * RAW_FEATURE_DIM].copy_from_slice(&rows[row]);
        grade_ids[slot] = roi.nuclei[i].kind.grade_id().expect("selected nuclei are tumor");
        valid[slot] = true;
    }
    Ok(FeatureBag {
        roi_id: roi.roi_id.clone(),
        features: Tensor::from_vec(&[config.n, RAW_FEATURE_DIM], features)?,
        grade_ids,
        valid,
        n_valid,
        label: roi.label,
    })
}

/// Writes the export CSV: header `roi_id,label,f000..f152`, one row per ROI.
pub fn write_feature_csv(
    rows: &[(String, Subtype, [f64; EXPORT_DIM])],
    path: &Path,
) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    write!(f, "roi_id,label")?;
    for i in 0..EXPORT_DIM {
        write!(f, ",f{:03}", i)?;
    }
    writeln!(f)?;
    for (roi_id, label, vec) in rows {
        write!(f, "{},{}", roi_id, label)?;
        for v in vec.iter() {
            write!(f, ",{}", v)?;
        }
        writeln!(f)?;
    }
    f.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::extraction::NucleusKind;

    fn flat_roi(h: usize, w: usize, rgb: [f64; 3], nuclei: Vec<Nucleus>) -> RoiRecord {
        let mut data = vec![0.0; 3 * h * w];
        for c in 0..3 {
            data[c * h * w..(c + 1) * h * w].fill(rgb[c]);
        }
        RoiRecord {
            roi_id: "r".into(),
            image: Tensor::from_vec(&[3, h, w], data).unwrap(),
            nuclei,
            label: Subtype::Type1,
        }
    }

    fn nucleus(cx: f64, cy: f64, kind: NucleusKind) -> Nucleus {
        Nucleus { cx, cy, kind, area: 12.0, major_axis: 5.0, minor_axis: 2.5, mask: None }
    }

    #[test]
    fn feature_row_layout_and_values() {
        let mut a = nucleus(10.0, 10.0, NucleusKind::Grade1);
        a.mask = Some(vec![(10, 10), (11, 10), (10, 11)]);
        a.area = 3.0;
        let b = nucleus(40.0, 10.0, NucleusKind::Grade2);
        let e = nucleus(20.0, 20.0, NucleusKind::Endothelial);
        let roi = flat_roi(64, 64, [0.25, 0.5, 0.75], vec![a, b, e]);
        let (tumor, rows) = cellular_features(&roi, 16).unwrap();
        assert_eq!(tumor, vec![0, 1]);
        // nucleus 0: mask color means hit the flat image exactly
        assert_eq!(rows[0][0], 3.0);
        assert_eq!(rows[0][3], 2.0); // 5.0 / 2.5
        assert_eq!(&rows[0][4..7], &[0.25, 0.5, 0.75]);
        // both tumor nuclei are mutual neighbors at distance 30
        assert_eq!(&rows[0][7..10], &[30.0, 30.0, 30.0]);
        assert_eq!(&rows[1][7..10], &[30.0, 30.0, 30.0]);
        // nucleus 1 has no mask: patch means over a fully interior flat patch
        assert!((rows[1][4] - 0.25).abs() < 1e-12);
    }

    #[test]
    fn patch_color_fallback_includes_zero_fill() {
        // center on the border so half the 16x16 patch is zero padding
        let n = nucleus(0.0, 32.0, NucleusKind::Grade1);
        let m = nucleus(40.0, 32.0, NucleusKind::Grade2);
        let roi = flat_roi(64, 64, [1.0, 1.0, 1.0], vec![n, m]);
        let (_, rows) = cellular_features(&roi, 16).unwrap();
        // columns -8..8: exactly half the patch is in bounds
        assert!((rows[0][4] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn single_tumor_nucleus_is_rejected() {
        let roi = flat_roi(32, 32, [0.5; 3], vec![nucleus(5.0, 5.0, NucleusKind::Grade1)]);
        assert!(cellular_features(&roi, 16).is_err());
    }

    #[test]
    fn aggregate_matches_hand_values() {
        let mut rows = Vec::new();
        for v in [1.0, 2.0, 3.0, 4.0, 5.0] {
            let mut r = [0.0; RAW_FEATURE_DIM];
            r[0] = v;
            rows.push(r);
        }
        let agg = aggregate_distribution(&rows).unwrap();
        assert_eq!(agg[0], 3.0);
        assert!((agg[1] - 2.0f64.sqrt()).abs() < 1e-12);
        assert_eq!(agg[2], 0.0); // symmetric
        // histogram: 5 values over [1,5], bins of width 0.4
        let hist = &agg[5..15];
        assert!((hist.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert_eq!(hist[0], 0.2); // value 1.0
        assert_eq!(hist[9], 0.2); // value 5.0 clamps into the last bin
        // constant columns 1..: all mass in bin 0, skew/kurt zero, entropy 0
        assert_eq!(agg[STATS_PER_FEATURE + 2], 0.0);
        assert_eq!(agg[STATS_PER_FEATURE + 3], 0.0);
        assert_eq!(agg[STATS_PER_FEATURE + 4], 0.0);
        assert_eq!(agg[STATS_PER_FEATURE + 5], 1.0);
    }

    #[test]
    fn uniform_histogram_has_entropy_ln_10() {
        // 10 equally spaced values, one per bin
        let mut rows = Vec::new();
        for i in 0..10 {
            let mut r = [0.0; RAW_FEATURE_DIM];
            r[0] = i as f64 + 0.5 * (i as f64 / 10.0); // strictly increasing
            rows.push(r);
        }
        let agg = aggregate_distribution(&rows).unwrap();
        let hist = &agg[5..15];
        for &h in hist {
            assert!((h - 0.1).abs() < 1e-12, "hist {:?}", hist);
        }
        assert!((agg[4] - 10.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn aggregate_is_order_invariant() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(7);
        let rows: Vec<[f64; RAW_FEATURE_DIM]> = (0..30)
            .map(|_| std::array::from_fn(|_| rng.random_range(-3.0..3.0)))
            .collect();
        let mut shuffled = rows.clone();
        shuffled.reverse();
        shuffled.swap(3, 17);
        let a = aggregate_distribution(&rows).unwrap();
        let b = aggregate_distribution(&shuffled).unwrap();
        for (x, y) in a.iter().zip(b.iter()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    // independent single-pass oracle over raw power sums
    fn aggregate_oracle(rows: &[[f64; RAW_FEATURE_DIM]]) -> Vec<f64> {
        let n = rows.len() as f64;
        let mut out = Vec::new();
        for f in 0..RAW_FEATURE_DIM {
            let (mut s1, mut s2, mut s3, mut s4) = (0.0, 0.0, 0.0, 0.0);
            let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
            for r in rows {
                let v = r[f];
                s1 += v;
                s2 += v * v;
                s3 += v * v * v;
                s4 += v * v * v * v;
                lo = lo.min(v);
                hi = hi.max(v);
            }
            let mean = s1 / n;
            let m2 = s2 / n - mean * mean;
            let m3 = s3 / n - 3.0 * mean * s2 / n + 2.0 * mean.powi(3);
            let m4 = s4 / n - 4.0 * mean * s3 / n + 6.0 * mean * mean * s2 / n - 3.0 * mean.powi(4);
            let mut hist = vec![0.0; HIST_BINS];
            if lo == hi {
                hist[0] = 1.0;
            } else {
                for r in rows {
                    // walk bin edges instead of dividing
                    let mut bin = HIST_BINS - 1;
                    for k in 1..HIST_BINS {
                        if r[f] < lo + (hi - lo) * k as f64 / HIST_BINS as f64 {
                            bin = k - 1;
                            break;
                        }
                    }
                    hist[bin] += 1.0 / n;
                }
            }
            let mut entropy = 0.0;
            for &h in &hist {
                if h > 0.0 {
                    entropy -= h * h.ln();
                }
            }
            out.push(mean);
            out.push(m2.max(0.0).sqrt());
            if m2 <= 0.0 {
                out.push(0.0);
                out.push(0.0);
            } else {
                out.push(m3 / (m2 * m2.sqrt()));
                out.push(m4 / (m2 * m2) - 3.0);
            }
            out.push(entropy);
            out.extend_from_slice(&hist);
        }
        out
    }

    #[test]
    fn aggregate_matches_single_pass_oracle() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(13);
        for _ in 0..5 {
            let rows: Vec<[f64; RAW_FEATURE_DIM]> = (0..30)
                .map(|_| std::array::from_fn(|_| rng.random_range(0.0..4.0)))
                .collect();
            let agg = aggregate_distribution(&rows).unwrap();
            let oracle = aggregate_oracle(&rows);
            for (i, (a, b)) in agg.iter().zip(oracle.iter()).enumerate() {
                assert!((a - b).abs() < 1e-9, "entry {}: {} vs {}", i, a, b);
            }
        }
    }

    #[test]
    fn grade_distribution_counts_and_excludes_endothelial() {
        let mut nuclei = Vec::new();
        for _ in 0..2 {
            nuclei.push(nucleus(0.0, 0.0, NucleusKind::Grade1));
        }
        for _ in 0..3 {
            nuclei.push(nucleus(0.0, 0.0, NucleusKind::Grade2));
        }
        for _ in 0..5 {
            nuclei.push(nucleus(0.0, 0.0, NucleusKind::Grade3));
        }
        for _ in 0..4 {
            nuclei.push(nucleus(0.0, 0.0, NucleusKind::Endothelial));
        }
        assert_eq!(grade_distribution(&nuclei).unwrap(), [0.2, 0.3, 0.5]);
        let all_g1 = vec![nucleus(0.0, 0.0, NucleusKind::Grade1)];
        assert_eq!(grade_distribution(&all_g1).unwrap(), [1.0, 0.0, 0.0]);
        let only_endo = vec![nucleus(0.0, 0.0, NucleusKind::Endothelial)];
        assert!(grade_distribution(&only_endo).is_err());
    }

    #[test]
    fn export_vector_appends_grades() {
        let roi = flat_roi(
            64,
            64,
            [0.5; 3],
            vec![
                nucleus(10.0, 10.0, NucleusKind::Grade1),
                nucleus(40.0, 40.0, NucleusKind::Grade3),
            ],
        );
        let v = image_feature_vector(&roi, 16).unwrap();
        assert_eq!(&v[AGGREGATE_DIM..], &[0.5, 0.0, 0.5]);
    }

    #[test]
    fn feature_bag_aligns_rows_with_selection() {
        let mut big = nucleus(40.0, 40.0, NucleusKind::Grade1);
        big.area = 50.0;
        let small = nucleus(10.0, 10.0, NucleusKind::Grade3);
        let roi = flat_roi(64, 64, [0.5; 3], vec![big, small]);
        let config = IViTConfig {
            p: 16,
            n: 4,
            d: 16,
            heads: 2,
            layers: 1,
            grid_w: 4,
            grid_h: 4,
            n_grades: 3,
            n_classes: 2,
            mlp_ratio: 4,
        };
        let bag = build_feature_bag(&roi, &config).unwrap();
        assert_eq!(bag.n_valid, 2);
        assert_eq!(bag.valid, vec![true, true, false, false]);
        // grade 3 nucleus sorts first despite smaller area
        assert_eq!(bag.grade_ids[..2], [2, 0]);
        let fd = bag.features.data();
        assert_eq!(fd[0], 12.0); // small grade-3 nucleus area
        assert_eq!(fd[RAW_FEATURE_DIM], 50.0); // big grade-1 nucleus area
        assert!(fd[2 * RAW_FEATURE_DIM..].iter().all(|&v| v == 0.0));
        assert_eq!(bag.grade_ids[2], config.n_grades + 1);
    }

    #[test]
    fn csv_layout_is_stable() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("features.csv");
        let mut v = [0.0; EXPORT_DIM];
        v[0] = 1.5;
        v[EXPORT_DIM - 1] = 0.25;
        write_feature_csv(&[("roi_7".into(), Subtype::Type2, v)], &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let mut lines = text.lines();
        let header = lines.next().unwrap();
        assert!(header.starts_with("roi_id,label,f000,f001,"));
        assert!(header.ends_with(",f151,f152"));
        assert_eq!(header.split(',').count(), 2 + EXPORT_DIM);
        let row = lines.next().unwrap();
        assert!(row.starts_with("roi_7,type2,1.5,0,"));
        assert!(row.ends_with(",0.25"));
    }
}
