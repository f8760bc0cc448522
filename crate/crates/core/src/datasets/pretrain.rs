use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::resize_rgb;
use super::synth::{render_texture, SynthSpec};
use crate::archive::TensorArchive;
use crate::backbone::{BackboneHeader, NetworkHandle, Normalization};
use crate::error::{Error, Result};
use crate::nn::{Architecture, ResNet};
use crate::optim::Sgd;
use crate::tensor::{ImageTensor, Tensor};

pub const META_CLASSES: &str = "stfpm.pretrain.classes";
pub const META_ACCURACY: &str = "stfpm.pretrain.holdout_accuracy";

/// Minimum holdout accuracy for a usable teacher.
const REQUIRED_ACCURACY: f64 = 0.8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PretrainOptions {
    pub epochs: usize,
    pub seed: u64,
    pub images_per_class: usize,
    pub input_size: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    /// Share of each class held out to measure accuracy.
    pub holdout_fraction: f64,
}

impl Default for PretrainOptions {
    fn default() -> Self {
        Self {
            epochs: 8,
            seed: 0,
            images_per_class: 48,
            input_size: 64,
            learning_rate: 0.01,
            batch_size: 16,
            holdout_fraction: 0.25,
        }
    }
}

pub struct PretrainedTeacher {
    pub archive: TensorArchive,
    pub accuracy: f64,
    pub class_names: Vec<String>,
    /// Mean training cross-entropy of every epoch.
    pub loss_history: Vec<f64>,
}

fn channel_stats(images: &[ImageTensor]) -> Normalization {
    let mut sum = [0.0f64; 3];
    let mut sq = [0.0f64; 3];
    let mut count = 0.0;
    for img in images {
        let hw = img.height * img.width;
        for (c, plane) in img.data.chunks(hw).enumerate().take(3) {
            for &v in plane {
                sum[c] += f64::from(v);
                sq[c] += f64::from(v) * f64::from(v);
            }
        }
        count += hw as f64;
    }
    let mean = sum.map(|s| s / count);
    let std: Vec<f32> = (0..3)
        .map(|c| ((sq[c] / count - mean[c] * mean[c]).max(0.0).sqrt().max(1e-3)) as f32)
        .collect();
    Normalization {
        mean: mean.map(|m| m as f32),
        std: [std[0], std[1], std[2]],
    }
}

fn batch(images: &[&ImageTensor], norm: &Normalization) -> Result<Tensor> {
    let owned: Vec<ImageTensor> = images.iter().map(|&i| i.clone()).collect();
    let mut x = ImageTensor::stack(&owned)?;
    norm.apply(&mut x);
    Ok(x)
}

/// Trains the toy residual network to tell the textures of `variants` apart
/// and exports it as a frozen backbone archive. Each variant is one class;
/// its name labels the class.
pub fn pretrain_toy_teacher(variants: &[SynthSpec], options: &PretrainOptions) -> Result<PretrainedTeacher> {
    let classes = variants.len();
    if classes < 2 {
        return Err(Error::Usage(format!("pretraining needs at least 2 texture classes, got {classes}")));
    }
    if options.epochs == 0 || options.batch_size == 0 || options.images_per_class < 2 {
        return Err(Error::Usage("pretraining needs epochs, batch size and at least 2 images per class".into()));
    }
    if !(options.holdout_fraction > 0.0 && options.holdout_fraction < 1.0) {
        return Err(Error::Usage("holdout fraction must lie in (0, 1)".into()));
    }

    let size = options.input_size;
    let mut train = Vec::new();
    let mut holdout = Vec::new();
    let holdout_per_class = ((options.images_per_class as f64 * options.holdout_fraction).round() as usize)
        .clamp(1, options.images_per_class - 1);
    for (label, variant) in variants.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(variant.seed ^ options.seed.rotate_left(17));
        for i in 0..options.images_per_class {
            let img = render_texture(&variant.texture, variant.image_size, &mut rng);
            let tensor = ImageTensor::from_rgb8(&resize_rgb(&img, size));
            if i < holdout_per_class {
                holdout.push((tensor, label));
            } else {
                train.push((tensor, label));
            }
        }
    }

    let train_images: Vec<ImageTensor> = train.iter().map(|(t, _)| t.clone()).collect();
    let normalization = channel_stats(&train_images);
    let mut net = ResNet::new(Architecture::toy(classes));
    let mut rng = ChaCha8Rng::seed_from_u64(options.seed);
    net.init_random(&mut rng);
    let mut optimizer = Sgd::new(options.learning_rate, 0.9, 1e-4);
    let depth = net.arch.stages();
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut loss_history = Vec::with_capacity(options.epochs);

    for epoch in 1..=options.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for chunk in order.chunks(options.batch_size) {
            let imgs: Vec<&ImageTensor> = chunk.iter().map(|&i| &train[i].0).collect();
            let x = batch(&imgs, &normalization)?;
            let trace = net.forward_train(x, depth, true);
            let logits = trace.logits.clone().expect("head requested");
            let mut dlogits = vec![0.0f32; logits.len()];
            for (b, &i) in chunk.iter().enumerate() {
                let row = &logits[b * classes..(b + 1) * classes];
                let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
                let exps: Vec<f32> = row.iter().map(|v| (v - max).exp()).collect();
                let z: f32 = exps.iter().sum();
                let label = train[i].1;
                loss_sum += f64::from(z.ln() - (row[label] - max));
                for k in 0..classes {
                    let target = if k == label { 1.0 } else { 0.0 };
                    dlogits[b * classes + k] = (exps[k] / z - target) / chunk.len() as f32;
                }
            }
            net.zero_grad();
            net.backward(trace, vec![None; depth], Some(&dlogits));
            optimizer.step(&mut net);
        }
        let loss = loss_sum / train.len() as f64;
        if !loss.is_finite() {
            return Err(Error::Pretrain(format!("cross-entropy became {loss} at epoch {epoch}")));
        }
        log::info!("pretrain epoch {epoch}: cross-entropy {loss:.4}");
        loss_history.push(loss);
    }

    let mut correct = 0usize;
    for pair in holdout.chunks(options.batch_size) {
        let imgs: Vec<&ImageTensor> = pair.iter().map(|(t, _)| t).collect();
        let logits = net.classify(&batch(&imgs, &normalization)?);
        for (b, (_, label)) in pair.iter().enumerate() {
            let row = &logits[b * classes..(b + 1) * classes];
            let predicted = (0..classes).max_by(|&a, &c| row[a].total_cmp(&row[c])).expect("classes >= 2");
            correct += usize::from(predicted == *label);
        }
    }
    let accuracy = correct as f64 / holdout.len() as f64;
    if accuracy < REQUIRED_ACCURACY {
        return Err(Error::Pretrain(format!(
            "holdout accuracy {accuracy:.3} is below {REQUIRED_ACCURACY} (final cross-entropy {:.3}); \
             the textures may be too similar or the epochs too few",
            loss_history.last().copied().unwrap_or(f64::NAN)
        )));
    }

    let header = BackboneHeader {
        architecture: net.arch.clone(),
        input_size: size,
        normalization,
    };
    let class_names: Vec<String> = variants.iter().map(|v| v.name.clone()).collect();
    let mut archive = NetworkHandle::from_network(net, header, true).to_archive();
    archive
        .metadata
        .insert(META_CLASSES.into(), serde_json::to_string(&class_names).expect("plain data"));
    archive.metadata.insert(META_ACCURACY.into(), accuracy.to_string());
    Ok(PretrainedTeacher {
        archive,
        accuracy,
        class_names,
        loss_history,
    })
}
