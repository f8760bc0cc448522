use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{pixel_roc_auc, pool_pixels, pro_curve, roc_auc, roc_curve, normalized_partial_area, BinaryMask, ProOptions};
use crate::backbone::NetworkHandle;
use crate::datasets::CategorySet;
use crate::error::{Error, Result};
use crate::scorer::{score_images, AnomalyMap, ScoreOptions};
use crate::trainer::Checkpoint;

/// Curves longer than this are thinned evenly before export.
const MAX_CURVE_POINTS: usize = 2000;

type Row<T> = (&'static str, fn(&T) -> f64);

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalOptions {
    pub pro: ProOptions,
    pub score: ScoreOptions,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CategoryMetrics {
    pub name: String,
    pub image_auc: f64,
    pub pixel_auc: f64,
    pub pro: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CategoryCurves {
    pub name: String,
    pub image_roc: Vec<(f64, f64)>,
    pub pixel_roc: Vec<(f64, f64)>,
    pub pro: Vec<(f64, f64)>,
}

/// Per-category metrics with their unweighted mean.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub categories: Vec<CategoryMetrics>,
    pub mean: CategoryMetrics,
    #[serde(skip)]
    pub curves: Vec<CategoryCurves>,
}

fn thin(points: Vec<(f64, f64)>) -> Vec<(f64, f64)> {
    if points.len() <= MAX_CURVE_POINTS {
        return points;
    }
    let last = points.len() - 1;
    (0..MAX_CURVE_POINTS)
        .map(|k| points[k * last / (MAX_CURVE_POINTS - 1)])
        .collect()
}

impl EvalReport {
    pub fn new(categories: Vec<CategoryMetrics>, curves: Vec<CategoryCurves>) -> Result<Self> {
        if categories.is_empty() {
            return Err(Error::Usage("a report needs at least one category".into()));
        }
        let n = categories.len() as f64;
        let mean = CategoryMetrics {
            name: "mean".into(),
            image_auc: categories.iter().map(|c| c.image_auc).sum::<f64>() / n,
            pixel_auc: categories.iter().map(|c| c.pixel_auc).sum::<f64>() / n,
            pro: categories.iter().map(|c| c.pro).sum::<f64>() / n,
        };
        Ok(Self {
            categories,
            mean,
            curves,
        })
    }

    /// Joins single- or multi-category reports into one.
    pub fn merge(reports: impl IntoIterator<Item = EvalReport>) -> Result<Self> {
        let (mut cats, mut curves) = (Vec::new(), Vec::new());
        for r in reports {
            cats.extend(r.categories);
            curves.extend(r.curves);
        }
        Self::new(cats, curves)
    }

    /// Metrics in a grid with one column per category plus the mean: a PRO
    /// row, a pixel AUC-ROC row and an image AUC-ROC row.
    pub fn to_table(&self) -> String {
        let cols: Vec<&CategoryMetrics> = self.categories.iter().chain(std::iter::once(&self.mean)).collect();
        let width = cols.iter().map(|c| c.name.len()).max().unwrap_or(0).max(6);
        let mut out = String::new();
        let _ = write!(out, "{:<10}", "metric");
        for c in &cols {
            let _ = write!(out, " {:>width$}", c.name);
        }
        out.push('\n');
        let rows: [Row<CategoryMetrics>; 3] = [
            ("PRO", |c| c.pro),
            ("pixel-AUC", |c| c.pixel_auc),
            ("image-AUC", |c| c.image_auc),
        ];
        for (label, get) in rows {
            let _ = write!(out, "{label:<10}");
            for c in &cols {
                let _ = write!(out, " {:>width$.3}", get(c));
            }
            out.push('\n');
        }
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("plain data")
    }

    /// Long-format CSV: `category,curve,x,y`.
    pub fn curves_csv(&self) -> String {
        let mut out = String::from("category,curve,x,y\n");
        for c in &self.curves {
            for (kind, pts) in [("image_roc", &c.image_roc), ("pixel_roc", &c.pixel_roc), ("pro", &c.pro)] {
                for (x, y) in pts {
                    let _ = writeln!(out, "{},{kind},{x},{y}", c.name);
                }
            }
        }
        out
    }

    /// Writes `report.txt`, `report.json` and `curves.csv` into `dir`.
    pub fn write_files(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|e| Error::file(dir, e))?;
        for (name, body) in [
            ("report.txt", self.to_table()),
            ("report.json", self.to_json()),
            ("curves.csv", self.curves_csv()),
        ] {
            let path = dir.join(name);
            std::fs::write(&path, body).map_err(|e| Error::file(&path, e))?;
        }
        Ok(())
    }
}

/// Metrics and curves from already computed maps.
pub fn evaluate_maps(
    name: &str,
    maps: &[AnomalyMap],
    masks: &[BinaryMask],
    image_scores: &[f64],
    image_labels: &[bool],
    options: &ProOptions,
) -> Result<(CategoryMetrics, CategoryCurves)> {
    let image_auc = roc_auc(image_scores, image_labels)?;
    let pixel_auc = pixel_roc_auc(maps, masks)?;
    let pro_points = pro_curve(maps, masks, options)?;
    let pro = normalized_partial_area(&pro_points, options.fpr_limit);
    let (pixels, labels) = pool_pixels(maps, masks);
    let curves = CategoryCurves {
        name: name.into(),
        image_roc: roc_curve(image_scores, image_labels)?,
        pixel_roc: thin(roc_curve(&pixels, &labels)?),
        pro: thin(pro_points),
    };
    Ok((
        CategoryMetrics {
            name: name.into(),
            image_auc,
            pixel_auc,
            pro,
        },
        curves,
    ))
}

/// Scores every test image of `set` with the checkpoint's student and
/// computes image AUC-ROC (label: defect type other than good), pixel
/// AUC-ROC and PRO.
pub fn evaluate_category(
    set: &CategorySet,
    teacher: &NetworkHandle,
    checkpoint: &Checkpoint,
    options: &EvalOptions,
) -> Result<EvalReport> {
    checkpoint.check_teacher(teacher)?;
    if set.input_size != teacher.input_size() {
        return Err(Error::Config(format!(
            "category `{}` is loaded at {}px, the teacher expects {}px",
            set.name,
            set.input_size,
            teacher.input_size()
        )));
    }
    let samples = set.load_test()?;
    let (images, masks): (Vec<_>, Vec<_>) = samples.into_iter().unzip();
    let scored = score_images(teacher, &checkpoint.student, &images, &checkpoint.pyramid, &options.score)?;
    let labels: Vec<bool> = set.test.iter().map(|t| t.is_defective()).collect();
    let mut maps = Vec::with_capacity(scored.len());
    let mut scores = Vec::with_capacity(scored.len());
    for ((mut map, score), sample) in scored.into_iter().zip(&set.test) {
        map.source_id = Some(sample.image.id());
        maps.push(map);
        scores.push(score);
    }
    let (metrics, curves) = evaluate_maps(&set.name, &maps, &masks, &scores, &labels, &options.pro)?;
    EvalReport::new(vec![metrics], vec![curves])
}
