//! Segmentation and regression losses with analytic gradients.
//!
//! Segmentation losses use sum reduction. Binary cross-entropy is the
//! negated log-likelihood with predictions clamped to `[EPS, 1 - EPS]`;
//! the dice term carries a small denominator smoothing so that an empty
//! prediction against an empty target is finite (value 0).

use thiserror::Error;

use crate::raster::{Mask, ProbMap};

/// Clamp applied to predictions before taking logarithms.
pub const BCE_EPS: f64 = 1e-7;
/// Dice denominator smoothing.
pub const DICE_EPS: f64 = 1e-7;

#[derive(Error, Debug, Clone, PartialEq)]
pub enum LossError {
    #[error("prediction is {0}x{1} but target is {2}x{3}")]
    ShapeMismatch(usize, usize, usize, usize),
}

/// Loss value and its gradient with respect to the prediction.
#[derive(Debug, Clone, PartialEq)]
pub struct LossValue {
    pub value: f64,
    pub gradient: Vec<f64>,
}

fn check(pred: &ProbMap, target: &Mask) -> Result<(), LossError> {
    if pred.width != target.width || pred.height != target.height {
        return Err(LossError::ShapeMismatch(
            pred.width,
            pred.height,
            target.width,
            target.height,
        ));
    }
    Ok(())
}

pub fn bce_loss(pred: &ProbMap, target: &Mask) -> Result<LossValue, LossError> {
    check(pred, target)?;
    let mut value = 0.0;
    let gradient = pred
        .values
        .iter()
        .zip(&target.values)
        .map(|(&p, &t)| {
            let p = p.clamp(BCE_EPS, 1.0 - BCE_EPS);
            let y = t as f64;
            value -= y * p.ln() + (1.0 - y) * (1.0 - p).ln();
            -(y / p - (1.0 - y) / (1.0 - p))
        })
        .collect();
    Ok(LossValue { value, gradient })
}

pub fn dice_loss(pred: &ProbMap, target: &Mask) -> Result<LossValue, LossError> {
    check(pred, target)?;
    let (mut inter, mut sp, mut st) = (0.0, 0.0, 0.0);
    for (&p, &t) in pred.values.iter().zip(&target.values) {
        let y = t as f64;
        inter += p * y;
        sp += p;
        st += y;
    }
    let denom = sp + st + DICE_EPS;
    let value = -2.0 * inter / denom;
    let gradient = target
        .values
        .iter()
        .map(|&t| -2.0 * (t as f64 * denom - inter) / (denom * denom))
        .collect();
    Ok(LossValue { value, gradient })
}

/// Sum of the cross-entropy and dice terms.
pub fn segmentation_loss(pred: &ProbMap, target: &Mask) -> Result<LossValue, LossError> {
    let bce = bce_loss(pred, target)?;
    let dice = dice_loss(pred, target)?;
    Ok(LossValue {
        value: bce.value + dice.value,
        gradient: bce
            .gradient
            .iter()
            .zip(&dice.gradient)
            .map(|(a, b)| a + b)
            .collect(),
    })
}

/// Root mean square error over the two regression coordinates.
pub fn regression_loss(pred: (f64, f64), target: (f64, f64)) -> LossValue {
    let (d1, d2) = (pred.0 - target.0, pred.1 - target.1);
    let value = ((d1 * d1 + d2 * d2) / 2.0).sqrt();
    let gradient = if value == 0.0 {
        vec![0.0, 0.0]
    } else {
        vec![d1 / (2.0 * value), d2 / (2.0 * value)]
    };
    LossValue { value, gradient }
}

/// One row of the finite-difference gradient check.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientCheck {
    pub loss: &'static str,
    pub instances: usize,
    pub max_rel_error: f64,
    pub tolerance: f64,
}

impl GradientCheck {
    pub fn passed(&self) -> bool {
        self.max_rel_error < self.tolerance
    }
}

pub const FD_STEP: f64 = 1e-6;
pub const FD_TOLERANCE: f64 = 1e-5;

/// `|a - n| / max(|a|, |n|)`, or 0 when both vanish.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let scale = analytic.abs().max(numeric.abs());
    if scale == 0.0 {
        0.0
    } else {
        (analytic - numeric).abs() / scale
    }
}

fn fd_check_map(
    loss: fn(&ProbMap, &Mask) -> Result<LossValue, LossError>,
    pred: &ProbMap,
    target: &Mask,
) -> f64 {
    let analytic = loss(pred, target).expect("shapes match").gradient;
    let mut probe = pred.clone();
    let mut worst: f64 = 0.0;
    for i in 0..pred.values.len() {
        let v = pred.values[i];
        probe.values[i] = v + FD_STEP;
        let up = loss(&probe, target).expect("shapes match").value;
        probe.values[i] = v - FD_STEP;
        let down = loss(&probe, target).expect("shapes match").value;
        probe.values[i] = v;
        worst = worst.max(relative_error(analytic[i], (up - down) / (2.0 * FD_STEP)));
    }
    worst
}

/// Central-difference check of every analytic gradient on `instances`
/// random 8x8 problems drawn from `seed`.
pub fn run_gradient_checks(instances: usize, seed: u64) -> Vec<GradientCheck> {
    use crate::rng::XorShift64Star;
    let mut rng = XorShift64Star::new(seed);
    let mut maps = Vec::with_capacity(instances);
    for _ in 0..instances {
        // keep predictions away from the clamp so the loss is smooth at +-h
        let pred: Vec<f64> = (0..64).map(|_| rng.uniform(0.02, 0.98)).collect();
        let target: Vec<u8> = (0..64).map(|_| rng.bernoulli(0.4) as u8).collect();
        maps.push((
            ProbMap::from_values(8, 8, pred).expect("valid"),
            Mask::from_values(8, 8, target).expect("valid"),
        ));
    }
    let mut rows = Vec::new();
    let named: [(&'static str, fn(&ProbMap, &Mask) -> Result<LossValue, LossError>); 3] = [
        ("bce", bce_loss),
        ("dice", dice_loss),
        ("segmentation", segmentation_loss),
    ];
    for (name, f) in named {
        let worst = maps
            .iter()
            .map(|(p, t)| fd_check_map(f, p, t))
            .fold(0.0, f64::max);
        rows.push(GradientCheck {
            loss: name,
            instances,
            max_rel_error: worst,
            tolerance: FD_TOLERANCE,
        });
    }
    let mut worst: f64 = 0.0;
    for _ in 0..instances {
        let pred = (rng.uniform(0.0, 100.0), rng.uniform(0.0, 100.0));
        let target = (rng.uniform(0.0, 100.0), rng.uniform(0.0, 100.0));
        let g = regression_loss(pred, target).gradient;
        let fd0 = (regression_loss((pred.0 + FD_STEP, pred.1), target).value
            - regression_loss((pred.0 - FD_STEP, pred.1), target).value)
            / (2.0 * FD_STEP);
        let fd1 = (regression_loss((pred.0, pred.1 + FD_STEP), target).value
            - regression_loss((pred.0, pred.1 - FD_STEP), target).value)
            / (2.0 * FD_STEP);
        worst = worst
            .max(relative_error(g[0], fd0))
            .max(relative_error(g[1], fd1));
    }
    rows.push(GradientCheck {
        loss: "regression",
        instances,
        max_rel_error: worst,
        tolerance: FD_TOLERANCE,
    });
    rows
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::XorShift64Star;

    fn random_pair(rng: &mut XorShift64Star, w: usize, h: usize) -> (ProbMap, Mask) {
        let p = (0..w * h).map(|_| rng.next_f64()).collect();
        let t = (0..w * h).map(|_| rng.bernoulli(0.5) as u8).collect();
        (
            ProbMap::from_values(w, h, p).unwrap(),
            Mask::from_values(w, h, t).unwrap(),
        )
    }

    #[test]
    fn bce_half_is_n_ln2() {
        let mut rng = XorShift64Star::new(1);
        let (_, t) = random_pair(&mut rng, 6, 5);
        let p = ProbMap::filled(6, 5, 0.5);
        let l = bce_loss(&p, &t).unwrap();
        assert!((l.value - 30.0 * std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn perfect_predictions() {
        let mut rng = XorShift64Star::new(2);
        let (_, t) = random_pair(&mut rng, 8, 8);
        let p = ProbMap::from_mask(&t);
        let bce = bce_loss(&p, &t).unwrap();
        let expected = 64.0 * -(1.0 - BCE_EPS).ln();
        assert!((bce.value - expected).abs() < 1e-15);
        let dice = dice_loss(&p, &t).unwrap();
        assert!((dice.value + 1.0).abs() < 1e-8);
        let seg = segmentation_loss(&p, &t).unwrap();
        assert!((seg.value + 1.0).abs() < 1e-5);
    }

    #[test]
    fn dice_disjoint_and_empty() {
        let mut t = Mask::zeros(4, 4);
        t.set(0, 0, true);
        let mut p = ProbMap::zeros(4, 4);
        p.set(3, 3, 1.0);
        assert_eq!(dice_loss(&p, &t).unwrap().value, 0.0);
        let empty = dice_loss(&ProbMap::zeros(4, 4), &Mask::zeros(4, 4)).unwrap();
        assert_eq!(empty.value, 0.0);
        assert!(empty.gradient.iter().all(|g| g.is_finite()));
    }

    #[test]
    fn shape_mismatch() {
        let p = ProbMap::zeros(4, 4);
        let t = Mask::zeros(4, 5);
        assert!(bce_loss(&p, &t).is_err());
        assert!(dice_loss(&p, &t).is_err());
        assert!(segmentation_loss(&p, &t).is_err());
    }

    #[test]
    fn segmentation_is_exact_sum() {
        let mut rng = XorShift64Star::new(3);
        for _ in 0..50 {
            let (p, t) = random_pair(&mut rng, 7, 9);
            let a = bce_loss(&p, &t).unwrap();
            let b = dice_loss(&p, &t).unwrap();
            let s = segmentation_loss(&p, &t).unwrap();
            assert_eq!(s.value, a.value + b.value);
            for i in 0..s.gradient.len() {
                assert_eq!(s.gradient[i], a.gradient[i] + b.gradient[i]);
            }
        }
    }

    #[test]
    fn regression_closed_form() {
        let l = regression_loss((3.0, 4.0), (0.0, 0.0));
        assert!((l.value - (12.5f64).sqrt()).abs() < 1e-15);
        assert!((l.value - 3.535_533_905_932_737_6).abs() < 1e-12);
        let z = regression_loss((5.0, 5.0), (5.0, 5.0));
        assert_eq!(z.value, 0.0);
        assert_eq!(z.gradient, vec![0.0, 0.0]);
    }

    #[test]
    fn value_ranges_and_permutation() {
        let mut rng = XorShift64Star::new(9);
        for _ in 0..100 {
            let (p, t) = random_pair(&mut rng, 8, 8);
            let bce = bce_loss(&p, &t).unwrap().value;
            let dice = dice_loss(&p, &t).unwrap().value;
            assert!(bce >= 0.0);
            assert!((-1.0..=0.0).contains(&dice));
            let mut perm: Vec<usize> = (0..64).collect();
            rng.shuffle(&mut perm);
            let pp = ProbMap::from_values(8, 8, perm.iter().map(|&i| p.values[i]).collect())
                .unwrap();
            let tp = Mask::from_values(8, 8, perm.iter().map(|&i| t.values[i]).collect())
                .unwrap();
            let permuted = bce_loss(&pp, &tp).unwrap().value;
            assert!((permuted - bce).abs() <= 1e-12 * bce.max(1.0));
        }
    }

    #[test]
    fn finite_difference_suite_passes() {
        let rows = run_gradient_checks(20, 77);
        assert_eq!(rows.len(), 4);
        for r in rows {
            assert!(r.passed(), "{} max rel err {}", r.loss, r.max_rel_error);
        }
    }
}
