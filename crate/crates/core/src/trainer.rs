//! Student training: minibatch SGD on the pyramid matching loss against a
//! frozen teacher, with per-epoch validation and best-checkpoint selection.

use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::archive::TensorArchive;
use crate::backbone::{extract_pyramid, trace_pyramids, NetworkHandle, PyramidConfig};
use crate::distill::{loss_and_grad, normalize_positions, normalize_pyramid, total_loss, DEFAULT_EPSILON};
use crate::error::{Error, Result};
use crate::optim::Sgd;
use crate::tensor::{FeaturePyramid, ImageTensor, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub input_size: usize,
    pub val_fraction: f64,
    pub train_fraction: f64,
    pub seed: u64,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.4,
            epochs: 100,
            batch_size: 32,
            input_size: 256,
            val_fraction: 0.2,
            train_fraction: 1.0,
            seed: 0,
            momentum: 0.9,
            weight_decay: 1e-4,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Usage("epochs must be at least 1".into()));
        }
        if self.batch_size == 0 || self.input_size == 0 {
            return Err(Error::Usage("batch size and input size must be positive".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Usage(format!("learning rate {} must be positive", self.learning_rate)));
        }
        check_fractions(self.val_fraction, self.train_fraction)?;
        if !(0.0..1.0).contains(&self.momentum) || !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::Usage("momentum must lie in [0, 1) and weight decay be non-negative".into()));
        }
        Ok(())
    }

    /// SHA-256 of the configuration together with the pyramid it trains.
    pub fn fingerprint(&self, pyramid: &PyramidConfig) -> String {
        let text = serde_json::to_string(&(self, pyramid)).expect("plain data");
        hex::encode(Sha256::digest(text.as_bytes()))
    }
}

fn check_fractions(val_fraction: f64, train_fraction: f64) -> Result<()> {
    if !(val_fraction > 0.0 && val_fraction < 1.0) {
        return Err(Error::Usage(format!("validation fraction {val_fraction} outside (0, 1)")));
    }
    if !(train_fraction > 0.0 && train_fraction <= 1.0) {
        return Err(Error::Usage(format!("train fraction {train_fraction} outside (0, 1]")));
    }
    Ok(())
}

/// Shuffles with `seed`, holds out `round(n * val_fraction)` items (at least
/// one, leaving at least one) for validation, then keeps the first
/// `ceil(train_fraction * rest)` of the remainder for training.
pub fn split_dataset<T: Clone>(items: &[T], val_fraction: f64, train_fraction: f64, seed: u64) -> Result<(Vec<T>, Vec<T>)> {
    check_fractions(val_fraction, train_fraction)?;
    if items.len() < 2 {
        return Err(Error::Usage(format!(
            "{} image(s) cannot be split into training and validation sets",
            items.len()
        )));
    }
    let n = items.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let val_count = ((n as f64 * val_fraction).round() as usize).clamp(1, n - 1);
    let (val_idx, rest) = order.split_at(val_count);
    let keep = ((rest.len() as f64 * train_fraction).ceil() as usize).clamp(1, rest.len());
    let train = rest[..keep].iter().map(|&i| items[i].clone()).collect();
    let val = val_idx.iter().map(|&i| items[i].clone()).collect();
    Ok((train, val))
}

const META_EPOCH: &str = "stfpm.checkpoint.epoch";
const META_VAL_LOSS: &str = "stfpm.checkpoint.val_loss";
const META_CONFIG_FP: &str = "stfpm.checkpoint.config_fingerprint";
const META_TEACHER_FP: &str = "stfpm.checkpoint.teacher_fingerprint";
const META_PYRAMID: &str = "stfpm.checkpoint.pyramid";
const META_TRAIN_CONFIG: &str = "stfpm.checkpoint.train_config";

/// Student parameters at one epoch with the context needed to reuse them.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub student: NetworkHandle,
    /// 1-based epoch the parameters were taken after.
    pub epoch: usize,
    pub val_loss: f64,
    pub config_fingerprint: String,
    pub teacher_fingerprint: String,
    pub pyramid: PyramidConfig,
    pub train_config: TrainConfig,
}

impl Checkpoint {
    pub fn to_archive(&self) -> TensorArchive {
        let mut archive = self.student.to_archive();
        let meta = &mut archive.metadata;
        meta.insert(META_EPOCH.into(), self.epoch.to_string());
        meta.insert(META_VAL_LOSS.into(), self.val_loss.to_string());
        meta.insert(META_CONFIG_FP.into(), self.config_fingerprint.clone());
        meta.insert(META_TEACHER_FP.into(), self.teacher_fingerprint.clone());
        meta.insert(META_PYRAMID.into(), serde_json::to_string(&self.pyramid).expect("plain data"));
        meta.insert(META_TRAIN_CONFIG.into(), serde_json::to_string(&self.train_config).expect("plain data"));
        archive
    }

    pub fn from_archive(archive: &TensorArchive) -> Result<Self> {
        let student = NetworkHandle::from_archive(archive, false)?;
        let parse_err = |key: &str, e: &dyn std::fmt::Display| Error::Load(format!("bad checkpoint record `{key}`: {e}"));
        let epoch = archive
            .require_meta(META_EPOCH)?
            .parse()
            .map_err(|e| parse_err(META_EPOCH, &e))?;
        let val_loss = archive
            .require_meta(META_VAL_LOSS)?
            .parse()
            .map_err(|e| parse_err(META_VAL_LOSS, &e))?;
        let pyramid: PyramidConfig =
            serde_json::from_str(archive.require_meta(META_PYRAMID)?).map_err(|e| parse_err(META_PYRAMID, &e))?;
        pyramid.validate()?;
        let train_config = serde_json::from_str(archive.require_meta(META_TRAIN_CONFIG)?)
            .map_err(|e| parse_err(META_TRAIN_CONFIG, &e))?;
        Ok(Self {
            student,
            epoch,
            val_loss,
            config_fingerprint: archive.require_meta(META_CONFIG_FP)?.to_string(),
            teacher_fingerprint: archive.require_meta(META_TEACHER_FP)?.to_string(),
            pyramid,
            train_config,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_archive().save(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_archive(&TensorArchive::load(path)?)
    }

    /// Errors unless `teacher` is the network this student was trained against.
    pub fn check_teacher(&self, teacher: &NetworkHandle) -> Result<()> {
        if teacher.checksum() != self.teacher_fingerprint {
            return Err(Error::Config(
                "the checkpoint was trained against a different teacher".into(),
            ));
        }
        Ok(())
    }

    /// Errors unless the checkpoint was trained with `pyramid`.
    pub fn check_pyramid(&self, pyramid: &PyramidConfig) -> Result<()> {
        if &self.pyramid != pyramid {
            return Err(Error::Config(format!(
                "checkpoint was trained with blocks {:?} and weights {:?}, not blocks {:?} and weights {:?}",
                self.pyramid.blocks, self.pyramid.weights, pyramid.blocks, pyramid.weights
            )));
        }
        Ok(())
    }
}

/// One line of the run log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub train_count: usize,
    pub val_count: usize,
    pub seconds: f64,
}

#[derive(Clone, Debug, Default)]
pub struct TrainOptions {
    /// Directory receiving `best.safetensors`, `last.safetensors` and
    /// `train_log.jsonl`; nothing is written when unset.
    pub output_dir: Option<PathBuf>,
    /// Recompute teacher features for every batch instead of caching them.
    pub no_teacher_cache: bool,
}

pub struct TrainOutcome {
    pub best: Checkpoint,
    pub last: Checkpoint,
    pub history: Vec<EpochRecord>,
}

/// Mean total loss over `val`, computed in inference mode.
pub fn validate(teacher: &NetworkHandle, student: &NetworkHandle, val: &[ImageTensor], pyramid: &PyramidConfig) -> Result<f64> {
    if val.is_empty() {
        return Err(Error::Usage("validation set is empty".into()));
    }
    let targets = extract_pyramid(teacher, val, pyramid)?;
    validate_cached(&targets, student, val, pyramid)
}

fn validate_cached(
    targets: &[FeaturePyramid],
    student: &NetworkHandle,
    val: &[ImageTensor],
    pyramid: &PyramidConfig,
) -> Result<f64> {
    let outputs = extract_pyramid(student, val, pyramid)?;
    let losses = targets
        .par_iter()
        .zip(&outputs)
        .map(|(t, s)| total_loss(t, s, pyramid).map(|b| b.total))
        .collect::<Result<Vec<f64>>>()?;
    Ok(losses.iter().sum::<f64>() / losses.len() as f64)
}

/// Trains `student` to match `teacher` on `train`, validating on `val` after
/// every epoch. Returns the checkpoint with the lowest validation loss
/// (earliest on ties) and the final one.
pub fn train(
    teacher: &NetworkHandle,
    mut student: NetworkHandle,
    train: &[ImageTensor],
    val: &[ImageTensor],
    config: &TrainConfig,
    pyramid: &PyramidConfig,
    options: &TrainOptions,
) -> Result<TrainOutcome> {
    config.validate()?;
    pyramid.validate()?;
    if train.is_empty() || val.is_empty() {
        return Err(Error::Usage("training and validation sets must be non-empty".into()));
    }
    if student.is_frozen() {
        return Err(Error::Usage("the student handle is frozen".into()));
    }
    if teacher.layer_shapes() != student.layer_shapes() {
        return Err(Error::Config("teacher and student architectures differ".into()));
    }
    if teacher.input_size() != config.input_size || student.input_size() != config.input_size {
        return Err(Error::Config(format!(
            "networks expect {}px inputs but the training config says {}px",
            teacher.input_size(),
            config.input_size
        )));
    }

    let mut log = match &options.output_dir {
        Some(dir) => {
            std::fs::create_dir_all(dir).map_err(|e| Error::file(dir, e))?;
            let path = dir.join("train_log.jsonl");
            let file = std::fs::File::create(&path).map_err(|e| Error::file(&path, e))?;
            Some((path, BufWriter::new(file)))
        }
        None => None,
    };

    let train_targets: Option<Vec<FeaturePyramid>> = if options.no_teacher_cache {
        None
    } else {
        Some(normalized_targets(teacher, train, pyramid)?)
    };
    let val_targets = extract_pyramid(teacher, val, pyramid)?;
    let config_fingerprint = config.fingerprint(pyramid);
    let teacher_fingerprint = teacher.checksum();
    let snapshot = |student: &NetworkHandle, epoch: usize, val_loss: f64| Checkpoint {
        student: student.clone(),
        epoch,
        val_loss,
        config_fingerprint: config_fingerprint.clone(),
        teacher_fingerprint: teacher_fingerprint.clone(),
        pyramid: pyramid.clone(),
        train_config: config.clone(),
    };

    let mut optimizer = Sgd::new(config.learning_rate, config.momentum, config.weight_decay).skip("fc.");
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut history = Vec::with_capacity(config.epochs);
    let mut best: Option<Checkpoint> = None;

    for epoch in 1..=config.epochs {
        let started = Instant::now();
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for chunk in order.chunks(config.batch_size) {
            let images: Vec<ImageTensor> = chunk.iter().map(|&i| train[i].clone()).collect();
            let targets = match &train_targets {
                Some(all) => chunk.iter().map(|&i| all[i].clone()).collect(),
                None => normalized_targets(teacher, &images, pyramid)?,
            };
            let batch_loss = step(&mut student, &mut optimizer, &images, &targets, pyramid)
                .map_err(|e| diverged(epoch, e))?;
            loss_sum += batch_loss * chunk.len() as f64;
        }
        let train_loss = loss_sum / train.len() as f64;
        let val_loss = validate_cached(&val_targets, &student, val, pyramid).map_err(|e| diverged(epoch, e))?;
        if !train_loss.is_finite() || !val_loss.is_finite() {
            return Err(Error::Diverged {
                epoch,
                reason: format!("train loss {train_loss}, validation loss {val_loss}"),
            });
        }
        let record = EpochRecord {
            epoch,
            train_loss,
            val_loss,
            train_count: train.len(),
            val_count: val.len(),
            seconds: started.elapsed().as_secs_f64(),
        };
        log::info!("epoch {epoch}: train {train_loss:.6} val {val_loss:.6}");
        if let Some((path, w)) = &mut log {
            let line = serde_json::to_string(&record).expect("plain data");
            writeln!(w, "{line}").and_then(|_| w.flush()).map_err(|e| Error::file(path.as_path(), e))?;
        }
        history.push(record);
        if best.as_ref().is_none_or(|b| val_loss < b.val_loss) {
            let ckpt = snapshot(&student, epoch, val_loss);
            if let Some(dir) = &options.output_dir {
                ckpt.save(dir.join("best.safetensors"))?;
            }
            best = Some(ckpt);
        }
    }

    let final_record = history.last().expect("at least one epoch");
    let last = snapshot(&student, final_record.epoch, final_record.val_loss);
    if let Some(dir) = &options.output_dir {
        last.save(dir.join("last.safetensors"))?;
    }
    Ok(TrainOutcome {
        best: best.expect("at least one epoch"),
        last,
        history,
    })
}

fn diverged(epoch: usize, e: Error) -> Error {
    match e {
        Error::Numeric(reason) => Error::Diverged { epoch, reason },
        other => other,
    }
}

fn normalized_targets(teacher: &NetworkHandle, images: &[ImageTensor], pyramid: &PyramidConfig) -> Result<Vec<FeaturePyramid>> {
    extract_pyramid(teacher, images, pyramid)?
        .iter()
        .map(normalize_pyramid)
        .collect()
}

/// One optimization step; returns the batch loss before the update.
fn step(
    student: &mut NetworkHandle,
    optimizer: &mut Sgd,
    images: &[ImageTensor],
    targets: &[FeaturePyramid],
    pyramid: &PyramidConfig,
) -> Result<f64> {
    let (trace, stages) = student.forward_train(images, pyramid)?;
    let outputs = trace_pyramids(&trace, &stages);
    let scale = 1.0 / images.len() as f64;
    let weights: Vec<f64> = pyramid.weights.iter().map(|w| w * scale).collect();
    let per_image = targets
        .par_iter()
        .zip(&outputs)
        .map(|(t, s)| loss_and_grad(t, s, &weights))
        .collect::<Result<Vec<_>>>()?;
    let loss = per_image.iter().map(|(b, _)| b.total).sum::<f64>();
    if !loss.is_finite() {
        return Err(Error::Numeric(format!("batch loss is {loss}")));
    }
    let mut stage_grads: Vec<Option<Tensor>> = vec![None; trace.stage_outputs.len()];
    for (level, &stage) in stages.iter().enumerate() {
        let maps: Vec<_> = per_image.iter().map(|(_, g)| g.levels[level].clone()).collect();
        stage_grads[stage] = Some(Tensor::from_feature_maps(&maps)?);
    }
    let net = student.network_mut()?;
    net.zero_grad();
    net.backward(trace, stage_grads, None);
    optimizer.step(net);
    Ok(loss)
}

/// Normalized feature vector at one position of one level.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureRecord {
    pub network: String,
    pub level: usize,
    pub block: usize,
    pub y: usize,
    pub x: usize,
    pub vector: Vec<f32>,
}

/// Every position's normalized vector from both networks, teacher first.
pub fn feature_records(
    teacher: &NetworkHandle,
    student: &NetworkHandle,
    image: &ImageTensor,
    pyramid: &PyramidConfig,
) -> Result<Vec<FeatureRecord>> {
    let mut records = Vec::new();
    for (name, net) in [("teacher", teacher), ("student", student)] {
        let pyr = extract_pyramid(net, std::slice::from_ref(image), pyramid)?.remove(0);
        for (level, (map, &block)) in pyr.levels.iter().zip(&pyramid.blocks).enumerate() {
            let unit = normalize_positions(map, DEFAULT_EPSILON)?;
            for y in 0..unit.height {
                for x in 0..unit.width {
                    records.push(FeatureRecord {
                        network: name.into(),
                        level,
                        block,
                        y,
                        x,
                        vector: unit.vector(y, x),
                    });
                }
            }
        }
    }
    Ok(records)
}

/// Writes [`feature_records`] as JSON lines; returns the number of records.
pub fn dump_features(
    teacher: &NetworkHandle,
    student: &NetworkHandle,
    image: &ImageTensor,
    pyramid: &PyramidConfig,
    path: impl AsRef<Path>,
) -> Result<usize> {
    let path = path.as_ref();
    let records = feature_records(teacher, student, image, pyramid)?;
    let file = std::fs::File::create(path).map_err(|e| Error::file(path, e))?;
    let mut w = BufWriter::new(file);
    for r in &records {
        let line = serde_json::to_string(r).expect("plain data");
        writeln!(w, "{line}").map_err(|e| Error::file(path, e))?;
    }
    w.flush().map_err(|e| Error::file(path, e))?;
    Ok(records.len())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn split_counts() {
        let items: Vec<usize> = (0..100).collect();
        let (train, val) = split_dataset(&items, 0.2, 1.0, 3).unwrap();
        assert_eq!((train.len(), val.len()), (80, 20));
        assert!(train.iter().all(|i| !val.contains(i)));
        let (few, val2) = split_dataset(&items, 0.2, 0.05, 3).unwrap();
        assert_eq!((few.len(), val2.len()), (4, 20));
        assert_eq!(val, val2);
        assert_eq!(split_dataset(&items, 0.2, 1.0, 3).unwrap(), (train, val));
        let (tiny, _) = split_dataset(&items[..3], 0.2, 0.01, 0).unwrap();
        assert_eq!(tiny.len(), 1);
        assert!(matches!(split_dataset::<usize>(&[], 0.2, 1.0, 0), Err(Error::Usage(_))));
    }

    #[test]
    fn config_defaults_and_fingerprint() {
        let c = TrainConfig::default();
        assert_eq!((c.learning_rate, c.epochs, c.batch_size, c.input_size), (0.4, 100, 32, 256));
        let p = PyramidConfig::default();
        assert_eq!(c.fingerprint(&p), c.clone().fingerprint(&p));
        let other = TrainConfig { seed: 1, ..c.clone() };
        assert_ne!(c.fingerprint(&p), other.fingerprint(&p));
        assert_ne!(c.fingerprint(&p), c.fingerprint(&PyramidConfig::uniform(vec![2]).unwrap()));
        assert!(matches!(TrainConfig { epochs: 0, ..c }.validate(), Err(Error::Usage(_))));
    }
}
