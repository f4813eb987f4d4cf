//! Segmentation scores and localization error statistics.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::raster::Mask;

/// Width of one histogram bin, in meters.
pub const BIN_M: f64 = 2.5;
/// Thresholds reported by [`localization_errors`], in meters.
pub const THRESHOLDS_M: [f64; 3] = [2.5, 5.0, 20.0];
pub const DEFAULT_RHO: u32 = 3;

#[derive(Error, Debug, Clone, PartialEq)]
pub enum MetricsError {
    #[error("prediction is {0}x{1} but reference is {2}x{3}")]
    ShapeMismatch(usize, usize, usize, usize),
    #[error("no samples")]
    EmptyInput,
    #[error("error value {0} is negative or not finite")]
    InvalidSample(f64),
}

/// Neighborhood shape for the relaxation radius.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Norm {
    #[default]
    Euclidean,
    Chebyshev,
}

impl std::str::FromStr for Norm {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "euclidean" => Ok(Norm::Euclidean),
            "chebyshev" => Ok(Norm::Chebyshev),
            other => Err(format!("unknown norm '{other}'")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SegScores {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub rho: u32,
}

fn f1_of(p: f64, r: f64) -> f64 {
    if p + r > 0.0 {
        2.0 * p * r / (p + r)
    } else {
        0.0
    }
}

fn check(a: &Mask, b: &Mask) -> Result<(), MetricsError> {
    if a.width != b.width || a.height != b.height {
        return Err(MetricsError::ShapeMismatch(a.width, a.height, b.width, b.height));
    }
    Ok(())
}

/// Squared Euclidean distance from each cell to the nearest positive cell of
/// `m` (lower-envelope transform, exact in integer arithmetic). Cells are
/// `u64::MAX` when `m` has no positives.
pub fn squared_distance_transform(m: &Mask) -> Vec<u64> {
    let (w, h) = (m.width, m.height);
    const INF: u64 = u64::MAX / 4;
    // column pass: 1D distance to the nearest positive in the same column
    let mut g = vec![INF; w * h];
    for c in 0..w {
        let mut last: Option<usize> = None;
        for r in 0..h {
            if m.values[r * w + c] != 0 {
                last = Some(r);
            }
            if let Some(l) = last {
                g[r * w + c] = ((r - l) as u64).pow(2);
            }
        }
        let mut next: Option<usize> = None;
        for r in (0..h).rev() {
            if m.values[r * w + c] != 0 {
                next = Some(r);
            }
            if let Some(n) = next {
                g[r * w + c] = g[r * w + c].min(((n - r) as u64).pow(2));
            }
        }
    }
    // row pass: lower envelope of parabolas f(q) + (x - q)^2
    let mut out = vec![INF; w * h];
    let mut v = vec![0usize; w];
    let mut z = vec![0f64; w + 1];
    for r in 0..h {
        let f = &g[r * w..(r + 1) * w];
        let sites: Vec<usize> = (0..w).filter(|&q| f[q] < INF).collect();
        if sites.is_empty() {
            continue;
        }
        let mut k = 0usize;
        v[0] = sites[0];
        z[0] = f64::NEG_INFINITY;
        z[1] = f64::INFINITY;
        for &q in &sites[1..] {
            let meet = |p: usize| {
                ((f[q] + (q * q) as u64) as f64 - (f[p] + (p * p) as u64) as f64)
                    / (2.0 * (q - p) as f64)
            };
            let mut s = meet(v[k]);
            while s <= z[k] {
                k -= 1;
                s = meet(v[k]);
            }
            k += 1;
            v[k] = q;
            z[k] = s;
            z[k + 1] = f64::INFINITY;
        }
        let mut k = 0usize;
        for x in 0..w {
            while z[k + 1] < x as f64 {
                k += 1;
            }
            let p = v[k];
            let d = (x as i64 - p as i64).unsigned_abs();
            out[r * w + x] = d * d + f[p];
        }
    }
    if m.values.iter().all(|&v| v == 0) {
        out.iter_mut().for_each(|d| *d = u64::MAX);
    }
    out
}

/// Chebyshev distance from each cell to the nearest positive, saturated at
/// `cap + 1`.
fn chebyshev_within(m: &Mask, cap: usize) -> Vec<usize> {
    let (w, h) = (m.width, m.height);
    let far = cap + 1;
    let mut row = vec![far; w * h];
    for r in 0..h {
        let mut d = far;
        for c in 0..w {
            d = if m.values[r * w + c] != 0 { 0 } else { (d + 1).min(far) };
            row[r * w + c] = d;
        }
        let mut d = far;
        for c in (0..w).rev() {
            d = if m.values[r * w + c] != 0 { 0 } else { (d + 1).min(far) };
            row[r * w + c] = row[r * w + c].min(d);
        }
    }
    let mut out = vec![far; w * h];
    for r in 0..h {
        let lo = r.saturating_sub(cap);
        let hi = (r + cap).min(h - 1);
        for c in 0..w {
            let mut best = far;
            for rr in lo..=hi {
                best = best.min(row[rr * w + c].max(rr.abs_diff(r)));
            }
            out[r * w + c] = best;
        }
    }
    out
}

fn within_mask(m: &Mask, rho: u32, norm: Norm) -> Vec<bool> {
    match norm {
        Norm::Euclidean => {
            let r2 = (rho as u64) * (rho as u64);
            squared_distance_transform(m)
                .into_iter()
                .map(|d| d <= r2)
                .collect()
        }
        Norm::Chebyshev => chebyshev_within(m, rho as usize)
            .into_iter()
            .map(|d| d <= rho as usize)
            .collect(),
    }
}

fn score_from_hits(
    pred_hits: usize,
    pred_n: usize,
    gt_hits: usize,
    gt_n: usize,
    rho: u32,
) -> SegScores {
    if pred_n == 0 && gt_n == 0 {
        return SegScores { precision: 1.0, recall: 1.0, f1: 1.0, rho };
    }
    let precision = if pred_n == 0 { 0.0 } else { pred_hits as f64 / pred_n as f64 };
    let recall = if gt_n == 0 { 0.0 } else { gt_hits as f64 / gt_n as f64 };
    SegScores { precision, recall, f1: f1_of(precision, recall), rho }
}

/// Relaxed precision, recall and F1 with a Euclidean neighborhood.
pub fn relaxed_scores(pred: &Mask, gt: &Mask, rho: u32) -> Result<SegScores, MetricsError> {
    relaxed_scores_norm(pred, gt, rho, Norm::Euclidean)
}

pub fn relaxed_scores_norm(
    pred: &Mask,
    gt: &Mask,
    rho: u32,
    norm: Norm,
) -> Result<SegScores, MetricsError> {
    check(pred, gt)?;
    let near_gt = within_mask(gt, rho, norm);
    let near_pred = within_mask(pred, rho, norm);
    let (mut ph, mut pn, mut gh, mut gn) = (0, 0, 0, 0);
    for i in 0..pred.values.len() {
        if pred.values[i] != 0 {
            pn += 1;
            ph += near_gt[i] as usize;
        }
        if gt.values[i] != 0 {
            gn += 1;
            gh += near_pred[i] as usize;
        }
    }
    Ok(score_from_hits(ph, pn, gh, gn, rho))
}

/// Intersection over union and pixel accuracy.
pub fn iou_accuracy(pred: &Mask, gt: &Mask) -> Result<(f64, f64), MetricsError> {
    check(pred, gt)?;
    let (mut inter, mut union, mut agree) = (0usize, 0usize, 0usize);
    for (&p, &g) in pred.values.iter().zip(&gt.values) {
        let (p, g) = (p != 0, g != 0);
        inter += (p && g) as usize;
        union += (p || g) as usize;
        agree += (p == g) as usize;
    }
    let iou = if union == 0 { 1.0 } else { inter as f64 / union as f64 };
    Ok((iou, agree as f64 / pred.values.len().max(1) as f64))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LocStats {
    pub count: usize,
    pub mean_m: f64,
    pub median_m: f64,
    pub bin_m: f64,
    pub histogram: Vec<usize>,
    /// Fraction of samples strictly below each threshold, keyed by meters.
    pub pct_within: BTreeMap<String, f64>,
}

impl LocStats {
    pub fn within(&self, threshold_m: f64) -> Option<f64> {
        self.pct_within.get(&threshold_key(threshold_m)).copied()
    }

    /// Histogram as `bin_start_m,bin_end_m,count` rows with a header.
    pub fn histogram_csv(&self) -> String {
        let mut out = String::from("bin_start_m,bin_end_m,count\n");
        for (i, c) in self.histogram.iter().enumerate() {
            out.push_str(&format!(
                "{},{},{}\n",
                i as f64 * self.bin_m,
                (i + 1) as f64 * self.bin_m,
                c
            ));
        }
        out
    }
}

pub fn threshold_key(t: f64) -> String {
    format!("{t}")
}

/// Fraction of `errors` strictly below `threshold_m`.
pub fn fraction_within(errors: &[f64], threshold_m: f64) -> f64 {
    if errors.is_empty() {
        return 0.0;
    }
    errors.iter().filter(|&&e| e < threshold_m).count() as f64 / errors.len() as f64
}

pub fn localization_errors(errors_m: &[f64]) -> Result<LocStats, MetricsError> {
    localization_errors_with(errors_m, &THRESHOLDS_M)
}

/// [`localization_errors`] reporting `pct_within` at custom thresholds.
pub fn localization_errors_with(
    errors_m: &[f64],
    thresholds_m: &[f64],
) -> Result<LocStats, MetricsError> {
    if errors_m.is_empty() {
        return Err(MetricsError::EmptyInput);
    }
    if let Some(&bad) = errors_m.iter().find(|e| !(e.is_finite() && **e >= 0.0)) {
        return Err(MetricsError::InvalidSample(bad));
    }
    let n = errors_m.len();
    let mean_m = errors_m.iter().sum::<f64>() / n as f64;
    let mut sorted = errors_m.to_vec();
    sorted.sort_by(f64::total_cmp);
    let median_m = sorted[(n - 1) / 2];
    let bins = (sorted[n - 1] / BIN_M).floor() as usize + 1;
    let mut histogram = vec![0usize; bins];
    for &e in errors_m {
        histogram[(e / BIN_M).floor() as usize] += 1;
    }
    let pct_within = thresholds_m
        .iter()
        .map(|&t| (threshold_key(t), fraction_within(errors_m, t)))
        .collect();
    Ok(LocStats { count: n, mean_m, median_m, bin_m: BIN_M, histogram, pct_within })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::XorShift64Star;
    use proptest::prelude::*;

    fn random_mask(rng: &mut XorShift64Star, w: usize, h: usize, p: f64) -> Mask {
        Mask::from_values(w, h, (0..w * h).map(|_| rng.bernoulli(p) as u8).collect()).unwrap()
    }

    fn brute_scores(pred: &Mask, gt: &Mask, rho: u32, norm: Norm) -> SegScores {
        let w = pred.width;
        let pos = |m: &Mask| -> Vec<(i64, i64)> {
            (0..m.values.len())
                .filter(|&i| m.values[i] != 0)
                .map(|i| ((i / w) as i64, (i % w) as i64))
                .collect()
        };
        let near = |a: (i64, i64), set: &[(i64, i64)]| {
            set.iter().any(|b| {
                let (dr, dc) = ((a.0 - b.0).abs(), (a.1 - b.1).abs());
                match norm {
                    Norm::Euclidean => dr * dr + dc * dc <= (rho as i64).pow(2),
                    Norm::Chebyshev => dr.max(dc) <= rho as i64,
                }
            })
        };
        let (pp, gp) = (pos(pred), pos(gt));
        let ph = pp.iter().filter(|&&a| near(a, &gp)).count();
        let gh = gp.iter().filter(|&&a| near(a, &pp)).count();
        score_from_hits(ph, pp.len(), gh, gp.len(), rho)
    }

    fn brute_sq_dt(m: &Mask) -> Vec<u64> {
        let w = m.width as i64;
        let pos: Vec<(i64, i64)> = (0..m.values.len())
            .filter(|&i| m.values[i] != 0)
            .map(|i| (i as i64 / w, i as i64 % w))
            .collect();
        (0..m.values.len() as i64)
            .map(|i| {
                pos.iter()
                    .map(|&(r, c)| ((r - i / w).pow(2) + (c - i % w).pow(2)) as u64)
                    .min()
                    .unwrap_or(u64::MAX)
            })
            .collect()
    }

    #[test]
    fn distance_transform_matches_all_pairs() {
        let mut rng = XorShift64Star::new(5);
        for k in 0..200 {
            let (w, h) = (1 + rng.below(20), 1 + rng.below(20));
            let p = [0.0, 0.01, 0.05, 0.3][k % 4];
            let m = random_mask(&mut rng, w, h, p);
            assert_eq!(squared_distance_transform(&m), brute_sq_dt(&m));
        }
    }

    #[test]
    fn relaxed_matches_brute_force() {
        let mut rng = XorShift64Star::new(11);
        for k in 0..100 {
            let p = [0.02, 0.1, 0.4][k % 3];
            let a = random_mask(&mut rng, 32, 32, p);
            let b = random_mask(&mut rng, 32, 32, p);
            for rho in [0u32, 3] {
                for norm in [Norm::Euclidean, Norm::Chebyshev] {
                    assert_eq!(
                        relaxed_scores_norm(&a, &b, rho, norm).unwrap(),
                        brute_scores(&a, &b, rho, norm)
                    );
                }
            }
        }
    }

    #[test]
    fn identical_masks_score_one() {
        let mut rng = XorShift64Star::new(2);
        let m = random_mask(&mut rng, 16, 16, 0.2);
        for rho in 0..5 {
            let s = relaxed_scores(&m, &m, rho).unwrap();
            assert_eq!((s.precision, s.recall, s.f1), (1.0, 1.0, 1.0));
        }
        let e = Mask::zeros(4, 4);
        assert_eq!(relaxed_scores(&e, &e, 3).unwrap().f1, 1.0);
    }

    #[test]
    fn three_pixel_shift_recovered_at_rho_three() {
        let mut gt = Mask::zeros(32, 32);
        for c in 8..20 {
            gt.set(10, c, true);
            gt.set(9 + c / 2, 12, true);
        }
        let mut pred = Mask::zeros(32, 32);
        for r in 0..32 {
            for c in 0..32 {
                if gt.get(r, c) {
                    pred.set(r, c + 3, true);
                }
            }
        }
        let s = relaxed_scores(&pred, &gt, 3).unwrap();
        assert_eq!(s.recall, 1.0);
        assert_eq!(s.precision, 1.0);
        assert!(relaxed_scores(&pred, &gt, 2).unwrap().recall < 1.0);
    }

    #[test]
    fn rho_zero_is_exact_confusion() {
        let mut rng = XorShift64Star::new(8);
        for _ in 0..50 {
            let a = random_mask(&mut rng, 12, 9, 0.3);
            let b = random_mask(&mut rng, 12, 9, 0.3);
            let tp = a.values.iter().zip(&b.values).filter(|(x, y)| **x == 1 && **y == 1).count();
            let s = relaxed_scores(&a, &b, 0).unwrap();
            assert_eq!(s.precision, tp as f64 / a.count_positive() as f64);
            assert_eq!(s.recall, tp as f64 / b.count_positive() as f64);
        }
    }

    #[test]
    fn iou_cases() {
        let mut rng = XorShift64Star::new(4);
        let m = random_mask(&mut rng, 10, 10, 0.3);
        assert_eq!(iou_accuracy(&m, &m).unwrap(), (1.0, 1.0));
        let mut left = Mask::zeros(8, 1);
        let mut right = Mask::zeros(8, 1);
        for c in 0..4 {
            left.set(0, c, true);
            right.set(0, c + 4, true);
        }
        assert_eq!(iou_accuracy(&left, &right).unwrap(), (0.0, 0.0));
        // half overlap: columns 0..6 against 2..8
        let mut a = Mask::zeros(8, 1);
        let mut b = Mask::zeros(8, 1);
        for c in 0..6 {
            a.set(0, c, true);
            b.set(0, c + 2, true);
        }
        let inter = (0..8).filter(|&c| a.get(0, c) && b.get(0, c)).count() as f64;
        let union = (0..8).filter(|&c| a.get(0, c) || b.get(0, c)).count() as f64;
        let (iou, acc) = iou_accuracy(&a, &b).unwrap();
        assert_eq!(iou, inter / union);
        assert_eq!(acc, 4.0 / 8.0);
        assert!(iou_accuracy(&a, &Mask::zeros(4, 2)).is_err());
    }

    #[test]
    fn loc_stats_small_cases() {
        let s = localization_errors(&[0.0; 7]).unwrap();
        assert_eq!((s.mean_m, s.median_m), (0.0, 0.0));
        assert!(s.pct_within.values().all(|&v| v == 1.0));
        let s = localization_errors(&[1.0, 3.0]).unwrap();
        assert_eq!((s.mean_m, s.median_m), (2.0, 1.0));
        assert_eq!(s.histogram, vec![1, 1]);
        assert_eq!(localization_errors(&[]), Err(MetricsError::EmptyInput));
        assert!(localization_errors(&[1.0, -2.0]).is_err());
        assert_eq!(s.within(2.5), Some(0.5));
    }

    #[test]
    fn loc_stats_match_recount() {
        let mut rng = XorShift64Star::new(99);
        let e: Vec<f64> = (0..1000).map(|_| rng.uniform(0.0, 30.0).powi(2) / 10.0).collect();
        let s = localization_errors(&e).unwrap();
        assert_eq!(s.histogram.iter().sum::<usize>(), 1000);
        for (b, &count) in s.histogram.iter().enumerate() {
            let lo = b as f64 * BIN_M;
            let brute = e.iter().filter(|&&x| x >= lo && x < lo + BIN_M).count();
            assert_eq!(count, brute);
        }
        let mut sorted = e.clone();
        sorted.sort_by(f64::total_cmp);
        assert_eq!(s.median_m, sorted[499]);
        for t in THRESHOLDS_M {
            let brute = e.iter().filter(|&&x| x < t).count() as f64 / 1000.0;
            assert_eq!(s.within(t), Some(brute));
        }
    }

    proptest! {
        #[test]
        fn relaxed_monotone_in_rho(seed in any::<u64>(), p in 0.01f64..0.5) {
            let mut rng = XorShift64Star::new(seed);
            let a = random_mask(&mut rng, 20, 20, p);
            let b = random_mask(&mut rng, 20, 20, p);
            let mut prev = relaxed_scores(&a, &b, 0).unwrap();
            for rho in 1..6 {
                let s = relaxed_scores(&a, &b, rho).unwrap();
                prop_assert!(s.precision >= prev.precision);
                prop_assert!(s.recall >= prev.recall);
                prev = s;
            }
        }

        #[test]
        fn pct_within_monotone(v in proptest::collection::vec(0.0f64..50.0, 1..200)) {
            let s = localization_errors(&v).unwrap();
            let w: Vec<f64> = THRESHOLDS_M.iter().map(|&t| s.within(t).unwrap()).collect();
            prop_assert!(w.windows(2).all(|p| p[0] <= p[1]));
            prop_assert_eq!(s.histogram.iter().sum::<usize>(), v.len());
        }
    }
}
