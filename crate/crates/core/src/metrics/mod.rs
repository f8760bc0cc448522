//! Threshold-free detection metrics: ROC AUC at image and pixel level, and
//! the per-region overlap (PRO) curve integrated up to a false positive rate
//! limit.

mod report;

pub use report::{evaluate_category, evaluate_maps, CategoryCurves, CategoryMetrics, EvalOptions, EvalReport};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scorer::AnomalyMap;

/// Ground-truth defect mask; 1 marks an anomalous pixel.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BinaryMask {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

impl BinaryMask {
    pub fn new(width: usize, height: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::Dimension(format!(
                "mask buffer of length {} does not match {width}x{height}",
                data.len()
            )));
        }
        if data.iter().any(|&v| v > 1) {
            return Err(Error::Dataset("mask values must be 0 or 1".into()));
        }
        Ok(Self { width, height, data })
    }

    pub fn zeros(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![0; width * height],
        }
    }

    pub fn get(&self, x: usize, y: usize) -> bool {
        self.data[y * self.width + x] == 1
    }

    pub fn set(&mut self, x: usize, y: usize, on: bool) {
        self.data[y * self.width + x] = u8::from(on);
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&v| v == 1).count()
    }

    pub fn any(&self) -> bool {
        self.data.contains(&1)
    }
}

/// Area under the ROC curve (the Mann-Whitney statistic); tied
/// positive/negative pairs count one half.
pub fn roc_auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::Dimension(format!(
            "{} scores for {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::Numeric("NaN score".into()));
    }
    let positives = labels.iter().filter(|&&l| l).count() as u64;
    let negatives = labels.len() as u64 - positives;
    if positives == 0 || negatives == 0 {
        return Err(Error::MetricUndefined(
            "ROC AUC needs both positive and negative samples".into(),
        ));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_unstable_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // twice the count of correctly ordered pairs, ties counted once
    let mut doubled: u128 = 0;
    let mut negatives_below: u64 = 0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        let (mut pos, mut neg) = (0u64, 0u64);
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            if labels[order[j]] {
                pos += 1;
            } else {
                neg += 1;
            }
            j += 1;
        }
        doubled += 2 * u128::from(pos) * u128::from(negatives_below) + u128::from(pos) * u128::from(neg);
        negatives_below += neg;
        i = j;
    }
    Ok(doubled as f64 / (2.0 * positives as f64 * negatives as f64))
}

/// ROC curve points `(fpr, tpr)` from the strictest threshold down,
/// starting at the origin.
pub fn roc_curve(scores: &[f64], labels: &[bool]) -> Result<Vec<(f64, f64)>> {
    let positives = labels.iter().filter(|&&l| l).count();
    let negatives = labels.len() - positives;
    if positives == 0 || negatives == 0 {
        return Err(Error::MetricUndefined(
            "ROC curve needs both positive and negative samples".into(),
        ));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_unstable_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut points = vec![(0.0, 0.0)];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < order.len() {
        let s = scores[order[i]];
        while i < order.len() && scores[order[i]] == s {
            if labels[order[i]] {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        points.push((fp as f64 / negatives as f64, tp as f64 / positives as f64));
    }
    Ok(points)
}

fn check_pairs(maps: &[AnomalyMap], masks: &[BinaryMask]) -> Result<()> {
    if maps.len() != masks.len() {
        return Err(Error::Dimension(format!(
            "{} anomaly maps for {} masks",
            maps.len(),
            masks.len()
        )));
    }
    for (i, (m, g)) in maps.iter().zip(masks).enumerate() {
        if (m.width, m.height) != (g.width, g.height) {
            return Err(Error::Dimension(format!(
                "pair {i}: map is {}x{}, mask is {}x{}",
                m.width, m.height, g.width, g.height
            )));
        }
    }
    Ok(())
}

/// ROC AUC over the pooled pixels of every image.
pub fn pixel_roc_auc(maps: &[AnomalyMap], masks: &[BinaryMask]) -> Result<f64> {
    check_pairs(maps, masks)?;
    let (scores, labels) = pool_pixels(maps, masks);
    roc_auc(&scores, &labels)
}

pub(crate) fn pool_pixels(maps: &[AnomalyMap], masks: &[BinaryMask]) -> (Vec<f64>, Vec<bool>) {
    let scores = maps.iter().flat_map(|m| m.scores.iter().copied()).collect();
    let labels = masks.iter().flat_map(|g| g.data.iter().map(|&v| v == 1)).collect();
    (scores, labels)
}

/// An 8-connected region of a mask, as row-major pixel indices.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Component {
    pub pixels: Vec<usize>,
}

impl Component {
    pub fn len(&self) -> usize {
        self.pixels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pixels.is_empty()
    }

    pub fn to_mask(&self, width: usize, height: usize) -> BinaryMask {
        let mut mask = BinaryMask::zeros(width, height);
        for &p in &self.pixels {
            mask.data[p] = 1;
        }
        mask
    }
}

/// 8-connected components of the set pixels, in raster order of their
/// first pixel.
pub fn connected_components(mask: &BinaryMask) -> Vec<Component> {
    let (w, h) = (mask.width, mask.height);
    let mut seen = vec![false; w * h];
    let mut components = Vec::new();
    let mut stack = Vec::new();
    for start in 0..w * h {
        if mask.data[start] != 1 || seen[start] {
            continue;
        }
        seen[start] = true;
        stack.push(start);
        let mut pixels = Vec::new();
        while let Some(p) = stack.pop() {
            pixels.push(p);
            let (x, y) = ((p % w) as isize, (p / w) as isize);
            for dy in -1..=1isize {
                for dx in -1..=1isize {
                    let (nx, ny) = (x + dx, y + dy);
                    if nx < 0 || ny < 0 || nx >= w as isize || ny >= h as isize {
                        continue;
                    }
                    let q = ny as usize * w + nx as usize;
                    if mask.data[q] == 1 && !seen[q] {
                        seen[q] = true;
                        stack.push(q);
                    }
                }
            }
        }
        pixels.sort_unstable();
        components.push(Component { pixels });
    }
    components
}

/// How false positive rates combine across images.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FprMode {
    /// Fraction of all normal pixels of the test set.
    #[default]
    Pooled,
    /// Mean of per-image rates over images that have normal pixels.
    PerImage,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProOptions {
    pub fpr_limit: f64,
    pub steps: usize,
    pub fpr_mode: FprMode,
}

impl Default for ProOptions {
    fn default() -> Self {
        Self {
            fpr_limit: 0.3,
            steps: 200,
            fpr_mode: FprMode::Pooled,
        }
    }
}

/// PRO curve points `(fpr, pro)` for a quantile threshold sweep, starting at
/// the origin (threshold above every score). A pixel is flagged when its
/// score is at or above the threshold.
pub fn pro_curve(maps: &[AnomalyMap], masks: &[BinaryMask], options: &ProOptions) -> Result<Vec<(f64, f64)>> {
    check_pairs(maps, masks)?;
    if options.steps < 2 {
        return Err(Error::Usage("the threshold sweep needs at least 2 steps".into()));
    }
    if !(options.fpr_limit > 0.0 && options.fpr_limit <= 1.0) {
        return Err(Error::Usage(format!("FPR limit {} outside (0, 1]", options.fpr_limit)));
    }

    // owner[p]: component id for defect pixels, otherwise the image index
    // tagged as normal
    enum Owner {
        Region(usize),
        Normal(usize),
    }
    let mut region_sizes = Vec::new();
    let mut normals_per_image = vec![0usize; maps.len()];
    let mut owners = Vec::new();
    let mut scores = Vec::new();
    for (i, (map, mask)) in maps.iter().zip(masks).enumerate() {
        let mut region_of = vec![usize::MAX; mask.data.len()];
        for comp in connected_components(mask) {
            for &p in &comp.pixels {
                region_of[p] = region_sizes.len();
            }
            region_sizes.push(comp.len());
        }
        for (p, &r) in region_of.iter().enumerate() {
            if r == usize::MAX {
                normals_per_image[i] += 1;
                owners.push(Owner::Normal(i));
            } else {
                owners.push(Owner::Region(r));
            }
            scores.push(map.scores[p]);
        }
    }
    if region_sizes.is_empty() {
        return Err(Error::MetricUndefined("PRO needs at least one ground-truth region".into()));
    }
    let total_normals: usize = normals_per_image.iter().sum();
    let images_with_normals = normals_per_image.iter().filter(|&&n| n > 0).count();
    if total_normals == 0 {
        return Err(Error::MetricUndefined("PRO needs at least one normal pixel".into()));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::Numeric("NaN in anomaly map".into()));
    }

    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_unstable_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let n = order.len();
    let mut thresholds: Vec<f64> = (0..options.steps)
        .map(|k| {
            let rank = (k as f64 * (n - 1) as f64 / (options.steps - 1) as f64).round() as usize;
            scores[order[rank]]
        })
        .collect();
    thresholds.dedup();

    let regions = region_sizes.len() as f64;
    let mut overlap_sum = 0.0f64;
    let mut fp_total = 0usize;
    let mut fpr_per_image_sum = 0.0f64;
    let mut points = Vec::with_capacity(thresholds.len() + 1);
    points.push((0.0, 0.0));
    let mut next = 0;
    for &t in &thresholds {
        while next < n && scores[order[next]] >= t {
            match owners[order[next]] {
                Owner::Region(r) => overlap_sum += 1.0 / region_sizes[r] as f64,
                Owner::Normal(i) => {
                    fp_total += 1;
                    fpr_per_image_sum += 1.0 / normals_per_image[i] as f64;
                }
            }
            next += 1;
        }
        let fpr = match options.fpr_mode {
            FprMode::Pooled => fp_total as f64 / total_normals as f64,
            FprMode::PerImage => fpr_per_image_sum / images_with_normals as f64,
        };
        points.push((fpr, overlap_sum / regions));
    }
    Ok(points)
}

/// Trapezoidal area under a monotone curve from 0 to `limit`, divided by
/// `limit`. The segment straddling the limit is cut by linear interpolation.
pub fn normalized_partial_area(points: &[(f64, f64)], limit: f64) -> f64 {
    let mut area = 0.0;
    for w in points.windows(2) {
        let ((x0, y0), (x1, y1)) = (w[0], w[1]);
        if x0 >= limit {
            break;
        }
        if x1 <= limit {
            area += (x1 - x0) * (y0 + y1) / 2.0;
        } else {
            let y = y0 + (y1 - y0) * (limit - x0) / (x1 - x0);
            area += (limit - x0) * (y0 + y) / 2.0;
            break;
        }
    }
    (area / limit).clamp(0.0, 1.0)
}

/// Normalized area under the PRO curve up to `options.fpr_limit`.
pub fn pro_score(maps: &[AnomalyMap], masks: &[BinaryMask], options: &ProOptions) -> Result<f64> {
    let curve = pro_curve(maps, masks, options)?;
    Ok(normalized_partial_area(&curve, options.fpr_limit))
}
