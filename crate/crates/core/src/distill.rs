//! Hierarchical feature-matching loss between teacher and student pyramids.
//!
//! Reduction order: normalize each position's feature vector, take half the
//! squared distance per position, average over positions, take the weighted
//! sum over levels, average over the batch. Every stage is exposed so the
//! intermediate quantities can be checked on their own.

use crate::backbone::PyramidConfig;
use crate::error::{Error, Result};
use crate::tensor::{FeatureMap, FeaturePyramid, Real};

/// Vectors whose norm is at or below this value normalize to zero.
pub const DEFAULT_EPSILON: f64 = 1e-12;

/// Loss of one image: the per-level means and their weighted sum.
#[derive(Clone, Debug, PartialEq)]
pub struct LossBreakdown {
    pub per_level: Vec<f64>,
    pub total: f64,
    /// Row-major per-position losses of every level, when requested.
    pub per_position: Option<Vec<Vec<f64>>>,
}

fn eps<T: Real>(epsilon: f64) -> T {
    T::from(epsilon).expect("epsilon representable")
}

fn position_norms<T: Real>(map: &FeatureMap<T>) -> Vec<T> {
    let hw = map.positions();
    let mut sq = vec![T::zero(); hw];
    for plane in map.data.chunks(hw) {
        for (acc, &v) in sq.iter_mut().zip(plane) {
            *acc = *acc + v * v;
        }
    }
    sq.into_iter().map(T::sqrt).collect()
}

/// Scales every position's channel vector to unit length. Vectors with norm
/// at most `epsilon` become zero; the others are divided by `norm + epsilon`.
pub fn normalize_positions<T: Real>(map: &FeatureMap<T>, epsilon: f64) -> Result<FeatureMap<T>> {
    if map.data.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("feature map contains NaN or infinite values".into()));
    }
    let e = eps::<T>(epsilon);
    let hw = map.positions();
    let scale: Vec<T> = position_norms(map)
        .into_iter()
        .map(|n| if n <= e { T::zero() } else { T::one() / (n + e) })
        .collect();
    let mut out = map.clone();
    for plane in out.data.chunks_mut(hw) {
        for (v, &s) in plane.iter_mut().zip(&scale) {
            *v = *v * s;
        }
    }
    Ok(out)
}

/// Half the squared Euclidean distance between two (normalized) vectors.
pub fn position_loss<T: Real>(f_t: &[T], f_s: &[T]) -> Result<T> {
    if f_t.len() != f_s.len() {
        return Err(Error::Dimension(format!(
            "feature vectors of length {} and {}",
            f_t.len(),
            f_s.len()
        )));
    }
    let half = T::from(0.5).expect("representable");
    Ok(half * f_t.iter().zip(f_s).map(|(&a, &b)| (a - b) * (a - b)).sum::<T>())
}

fn check_same_shape<T: Real>(a: &FeatureMap<T>, b: &FeatureMap<T>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Dimension(format!(
            "teacher map {:?} and student map {:?} differ in shape",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

/// Row-major grid of per-position losses between two raw feature maps.
pub fn position_losses<T: Real>(f_t: &FeatureMap<T>, f_s: &FeatureMap<T>) -> Result<Vec<f64>> {
    check_same_shape(f_t, f_s)?;
    let t = normalize_positions(f_t, DEFAULT_EPSILON)?;
    let s = normalize_positions(f_s, DEFAULT_EPSILON)?;
    Ok(normalized_position_losses(&t, &s))
}

fn normalized_position_losses<T: Real>(t: &FeatureMap<T>, s: &FeatureMap<T>) -> Vec<f64> {
    let hw = t.positions();
    let mut acc = vec![0.0f64; hw];
    for (pt, ps) in t.data.chunks(hw).zip(s.data.chunks(hw)) {
        for ((a, &x), &y) in acc.iter_mut().zip(pt).zip(ps) {
            let d = (x - y).to_f64().expect("finite");
            *a += d * d;
        }
    }
    acc.iter_mut().for_each(|v| *v *= 0.5);
    acc
}

/// Mean per-position loss of one level.
pub fn level_loss<T: Real>(f_t: &FeatureMap<T>, f_s: &FeatureMap<T>) -> Result<f64> {
    let grid = position_losses(f_t, f_s)?;
    Ok(grid.iter().sum::<f64>() / grid.len() as f64)
}

fn check_pyramids<T: Real>(pyr_t: &FeaturePyramid<T>, pyr_s: &FeaturePyramid<T>, weights: &[f64]) -> Result<()> {
    if pyr_t.len() != pyr_s.len() || pyr_t.len() != weights.len() {
        return Err(Error::Config(format!(
            "level counts disagree: teacher {}, student {}, weights {}",
            pyr_t.len(),
            pyr_s.len(),
            weights.len()
        )));
    }
    Ok(())
}

/// Weighted sum of level losses for one image.
pub fn total_loss<T: Real>(
    pyr_t: &FeaturePyramid<T>,
    pyr_s: &FeaturePyramid<T>,
    config: &PyramidConfig,
) -> Result<LossBreakdown> {
    weighted_loss(pyr_t, pyr_s, &config.weights, false)
}

/// Like [`total_loss`] but keeps the per-position grids.
pub fn total_loss_detailed<T: Real>(
    pyr_t: &FeaturePyramid<T>,
    pyr_s: &FeaturePyramid<T>,
    config: &PyramidConfig,
) -> Result<LossBreakdown> {
    weighted_loss(pyr_t, pyr_s, &config.weights, true)
}

fn weighted_loss<T: Real>(
    pyr_t: &FeaturePyramid<T>,
    pyr_s: &FeaturePyramid<T>,
    weights: &[f64],
    keep_grids: bool,
) -> Result<LossBreakdown> {
    check_pyramids(pyr_t, pyr_s, weights)?;
    let mut per_level = Vec::with_capacity(weights.len());
    let mut grids = Vec::new();
    for (ft, fs) in pyr_t.levels.iter().zip(&pyr_s.levels) {
        let grid = position_losses(ft, fs)?;
        per_level.push(grid.iter().sum::<f64>() / grid.len() as f64);
        if keep_grids {
            grids.push(grid);
        }
    }
    Ok(breakdown(per_level, weights, keep_grids.then_some(grids)))
}

fn breakdown(per_level: Vec<f64>, weights: &[f64], per_position: Option<Vec<Vec<f64>>>) -> LossBreakdown {
    let total = per_level.iter().zip(weights).map(|(l, a)| a * l).sum();
    LossBreakdown {
        per_level,
        total,
        per_position,
    }
}

/// Mean of per-image totals.
pub fn batch_loss(items: &[LossBreakdown]) -> Result<f64> {
    if items.is_empty() {
        return Err(Error::Usage("batch loss of an empty batch".into()));
    }
    Ok(items.iter().map(|b| b.total).sum::<f64>() / items.len() as f64)
}

/// Loss of one image together with its gradient with respect to the raw
/// student features. `teacher_normalized` must already be unit-normalized.
pub fn loss_and_grad<T: Real>(
    teacher_normalized: &FeaturePyramid<T>,
    student: &FeaturePyramid<T>,
    weights: &[f64],
) -> Result<(LossBreakdown, FeaturePyramid<T>)> {
    check_pyramids(teacher_normalized, student, weights)?;
    let e = eps::<T>(DEFAULT_EPSILON);
    let half = T::from(0.5).expect("representable");
    let mut per_level = Vec::with_capacity(weights.len());
    let mut grads = Vec::with_capacity(weights.len());
    for ((t, s), &alpha) in teacher_normalized.levels.iter().zip(&student.levels).zip(weights) {
        check_same_shape(t, s)?;
        if s.data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("student features contain NaN or infinite values".into()));
        }
        let hw = s.positions();
        let norms = position_norms(s);
        let coef = T::from(alpha / hw as f64).expect("representable");
        let mut grad = FeatureMap::<T>::zeros(s.channels, s.height, s.width);
        let mut loss = 0.0f64;
        // g = coef * (s_hat - t_hat); grad = g / (n + e) - s (s . g) / (n (n + e)^2)
        let mut dot = vec![T::zero(); hw];
        for c in 0..s.channels {
            let off = c * hw;
            for p in 0..hw {
                let n = norms[p];
                let sv = s.data[off + p];
                let s_hat = if n <= e { T::zero() } else { sv / (n + e) };
                let d = s_hat - t.data[off + p];
                loss += (half * d * d).to_f64().expect("finite");
                let g = coef * d;
                grad.data[off + p] = g;
                dot[p] = dot[p] + sv * g;
            }
        }
        for c in 0..s.channels {
            let off = c * hw;
            for p in 0..hw {
                let n = norms[p];
                grad.data[off + p] = if n <= e {
                    T::zero()
                } else {
                    let ne = n + e;
                    grad.data[off + p] / ne - s.data[off + p] * dot[p] / (n * ne * ne)
                };
            }
        }
        per_level.push(loss / hw as f64);
        grads.push(grad);
    }
    Ok((breakdown(per_level, weights, None), FeaturePyramid::new(grads)))
}

/// Normalizes every level of a pyramid.
pub fn normalize_pyramid<T: Real>(pyr: &FeaturePyramid<T>) -> Result<FeaturePyramid<T>> {
    Ok(FeaturePyramid::new(
        pyr.levels
            .iter()
            .map(|m| normalize_positions(m, DEFAULT_EPSILON))
            .collect::<Result<_>>()?,
    ))
}
