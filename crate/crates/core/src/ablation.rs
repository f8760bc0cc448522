//! Block-combination and training-fraction sweeps. Each setting trains a
//! fresh student per category and reports the category-mean metrics, one
//! column per setting.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::backbone::{init_student, NetworkHandle, PyramidConfig};
use crate::datasets::CategorySet;
use crate::error::{Error, Result};
use crate::metrics::{evaluate_category, EvalOptions, EvalReport};
use crate::trainer::{split_dataset, train, TrainConfig, TrainOptions};

/// Single blocks, then growing consecutive combinations.
pub fn block_grid() -> Vec<Vec<usize>> {
    vec![vec![2], vec![3], vec![4], vec![5], vec![2, 3], vec![2, 3, 4], vec![2, 3, 4, 5]]
}

pub const TRAIN_FRACTIONS: [f64; 3] = [0.05, 0.1, 1.0];

type Row<T> = (&'static str, fn(&T) -> f64);

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationSetting {
    pub label: String,
    pub pyramid: PyramidConfig,
    pub train_fraction: f64,
}

impl AblationSetting {
    pub fn blocks(blocks: Vec<usize>, train_fraction: f64) -> Result<Self> {
        let label = blocks.iter().map(ToString::to_string).collect::<Vec<_>>().join("+");
        Ok(Self {
            label,
            pyramid: PyramidConfig::uniform(blocks)?,
            train_fraction,
        })
    }

    pub fn fraction(pyramid: PyramidConfig, train_fraction: f64) -> Self {
        Self {
            label: format!("{}%", (train_fraction * 100.0).round()),
            pyramid,
            train_fraction,
        }
    }
}

pub fn block_settings() -> Vec<AblationSetting> {
    block_grid()
        .into_iter()
        .map(|b| AblationSetting::blocks(b, 1.0).expect("grid entries are valid"))
        .collect()
}

pub fn fraction_settings(pyramid: &PyramidConfig) -> Vec<AblationSetting> {
    TRAIN_FRACTIONS
        .iter()
        .map(|&f| AblationSetting::fraction(pyramid.clone(), f))
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationColumn {
    pub setting: AblationSetting,
    pub report: EvalReport,
}

/// Rows are metrics, columns are settings; cells are category means.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub title: String,
    pub columns: Vec<AblationColumn>,
}

impl AblationTable {
    pub fn to_text(&self) -> String {
        let width = self.columns.iter().map(|c| c.setting.label.len()).max().unwrap_or(0).max(6);
        let mut out = format!("{}\n{:<8}", self.title, "metric");
        for c in &self.columns {
            let _ = write!(out, " {:>width$}", c.setting.label);
        }
        out.push('\n');
        let rows: [Row<EvalReport>; 3] = [
            ("AR_I", |r| r.mean.image_auc),
            ("AR_P", |r| r.mean.pixel_auc),
            ("PRO", |r| r.mean.pro),
        ];
        for (name, get) in rows {
            let _ = write!(out, "{name:<8}");
            for c in &self.columns {
                let _ = write!(out, " {:>width$.3}", get(&c.report));
            }
            out.push('\n');
        }
        out
    }

    pub fn write_files(&self, dir: impl AsRef<Path>, stem: &str) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|e| Error::file(dir, e))?;
        let txt = dir.join(format!("{stem}.txt"));
        std::fs::write(&txt, self.to_text()).map_err(|e| Error::file(&txt, e))?;
        let json = dir.join(format!("{stem}.json"));
        let body = serde_json::to_string_pretty(self).expect("plain data");
        std::fs::write(&json, body).map_err(|e| Error::file(&json, e))
    }
}

/// Trains and evaluates every setting on every category.
pub fn run_ablation(
    title: &str,
    categories: &[CategorySet],
    teacher: &NetworkHandle,
    base: &TrainConfig,
    settings: &[AblationSetting],
    eval: &EvalOptions,
) -> Result<AblationTable> {
    if categories.is_empty() || settings.is_empty() {
        return Err(Error::Usage("an ablation needs categories and settings".into()));
    }
    let loaded = categories
        .iter()
        .map(|c| c.load_train().map(|imgs| (c, imgs)))
        .collect::<Result<Vec<_>>>()?;
    let mut columns = Vec::with_capacity(settings.len());
    for setting in settings {
        let config = TrainConfig {
            train_fraction: setting.train_fraction,
            ..base.clone()
        };
        let mut reports = Vec::with_capacity(loaded.len());
        for (set, images) in &loaded {
            let (tr, va) = split_dataset(images, config.val_fraction, config.train_fraction, config.seed)?;
            let student = init_student(teacher, config.seed);
            let outcome = train(teacher, student, &tr, &va, &config, &setting.pyramid, &TrainOptions::default())?;
            reports.push(evaluate_category(set, teacher, &outcome.best, eval)?);
        }
        log::info!("ablation setting {} done", setting.label);
        columns.push(AblationColumn {
            setting: setting.clone(),
            report: EvalReport::merge(reports)?,
        });
    }
    Ok(AblationTable {
        title: title.into(),
        columns,
    })
}
