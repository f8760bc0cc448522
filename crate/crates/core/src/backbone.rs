//! Teacher and student networks and feature pyramid extraction.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::archive::{hash_tensor, ArchiveTensor, TensorArchive};
use crate::error::{Error, Result};
use crate::nn::resnet::{Slot, SlotMut};
use crate::nn::{Architecture, ResNet, Trace};
use crate::tensor::{FeatureMap, FeaturePyramid, ImageTensor, Tensor};

pub const META_FORMAT: &str = "stfpm.format";
pub const META_ARCHITECTURE: &str = "stfpm.architecture";
pub const META_INPUT_SIZE: &str = "stfpm.input_size";
pub const META_NORMALIZATION: &str = "stfpm.normalization";
pub const WEIGHTS_FORMAT: &str = "stfpm-weights-v1";

/// Which residual blocks feed the pyramid, and how much each level counts
/// in the loss.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PyramidConfig {
    pub blocks: Vec<usize>,
    pub weights: Vec<f64>,
}

impl Default for PyramidConfig {
    /// Blocks conv2_x, conv3_x and conv4_x with unit weights.
    fn default() -> Self {
        Self {
            blocks: vec![2, 3, 4],
            weights: vec![1.0; 3],
        }
    }
}

impl PyramidConfig {
    pub fn new(blocks: Vec<usize>, weights: Vec<f64>) -> Result<Self> {
        let cfg = Self { blocks, weights };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn uniform(blocks: Vec<usize>) -> Result<Self> {
        let n = blocks.len();
        Self::new(blocks, vec![1.0; n])
    }

    pub fn validate(&self) -> Result<()> {
        if self.blocks.is_empty() {
            return Err(Error::Config("pyramid needs at least one block".into()));
        }
        if self.blocks.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config(format!(
                "pyramid blocks must be strictly increasing, got {:?}",
                self.blocks
            )));
        }
        if self.weights.len() != self.blocks.len() {
            return Err(Error::Config(format!(
                "{} level weights given for {} blocks",
                self.weights.len(),
                self.blocks.len()
            )));
        }
        if let Some(w) = self.weights.iter().find(|w| !w.is_finite() || **w < 0.0) {
            return Err(Error::Config(format!("level weight {w} is not a finite non-negative number")));
        }
        Ok(())
    }

    pub fn levels(&self) -> usize {
        self.blocks.len()
    }
}

/// Per-channel input standardization applied before the first layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub mean: [f32; 3],
    pub std: [f32; 3],
}

impl Normalization {
    /// ImageNet channel statistics.
    pub fn imagenet() -> Self {
        Self {
            mean: [0.485, 0.456, 0.406],
            std: [0.229, 0.224, 0.225],
        }
    }

    pub fn apply(&self, batch: &mut Tensor) {
        let [n, c, h, w] = batch.shape();
        let hw = h * w;
        let data = batch.data_mut();
        for b in 0..n {
            for ch in 0..c {
                let (m, s) = (self.mean[ch % 3], self.std[ch % 3]);
                for v in &mut data[(b * c + ch) * hw..(b * c + ch + 1) * hw] {
                    *v = (*v - m) / s;
                }
            }
        }
    }
}

/// Architecture plus preprocessing metadata carried by every weights archive.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BackboneHeader {
    pub architecture: Architecture,
    pub input_size: usize,
    pub normalization: Normalization,
}

impl BackboneHeader {
    pub fn write(&self, archive: &mut TensorArchive) {
        archive.metadata.insert(META_FORMAT.into(), WEIGHTS_FORMAT.into());
        archive.metadata.insert(META_ARCHITECTURE.into(), serde_json::to_string(&self.architecture).expect("plain data"));
        archive.metadata.insert(META_INPUT_SIZE.into(), self.input_size.to_string());
        archive.metadata.insert(META_NORMALIZATION.into(), serde_json::to_string(&self.normalization).expect("plain data"));
    }

    pub fn read(archive: &TensorArchive) -> Result<Self> {
        let architecture: Architecture = serde_json::from_str(archive.require_meta(META_ARCHITECTURE)?)
            .map_err(|e| Error::Load(format!("bad architecture record: {e}")))?;
        let input_size = archive
            .require_meta(META_INPUT_SIZE)?
            .parse()
            .map_err(|e| Error::Load(format!("bad input size record: {e}")))?;
        let normalization = serde_json::from_str(archive.require_meta(META_NORMALIZATION)?)
            .map_err(|e| Error::Load(format!("bad normalization record: {e}")))?;
        Ok(Self {
            architecture,
            input_size,
            normalization,
        })
    }
}

/// A backbone instance. Frozen handles (teachers) only expose read access to
/// their parameters; trainable handles (students) hand out a mutable network
/// to exactly one trainer at a time.
#[derive(Clone, Debug)]
pub struct NetworkHandle {
    net: ResNet,
    header: BackboneHeader,
    frozen: bool,
}

impl NetworkHandle {
    pub fn architecture(&self) -> &Architecture {
        &self.net.arch
    }

    pub fn header(&self) -> &BackboneHeader {
        &self.header
    }

    pub fn input_size(&self) -> usize {
        self.header.input_size
    }

    /// Overrides the spatial input size images must have (square).
    pub fn set_input_size(&mut self, size: usize) {
        self.header.input_size = size;
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn network(&self) -> &ResNet {
        &self.net
    }

    pub fn network_mut(&mut self) -> Result<&mut ResNet> {
        if self.frozen {
            return Err(Error::Usage("a frozen network cannot be modified".into()));
        }
        Ok(&mut self.net)
    }

    pub fn layer_shapes(&self) -> Vec<(String, Vec<usize>)> {
        self.net.layer_shapes()
    }

    /// SHA-256 over every parameter and running statistic.
    pub fn checksum(&self) -> String {
        let mut hasher = Sha256::new();
        self.net.for_each_slot(&mut |name, slot| match slot {
            Slot::Param(p) => hash_tensor(&mut hasher, name, &p.shape, &p.value),
            Slot::Buffer(b) => hash_tensor(&mut hasher, name, &[b.len()], b),
        });
        hex::encode(hasher.finalize())
    }

    /// A trainable copy with identical parameters.
    pub fn clone_as_student(&self) -> NetworkHandle {
        NetworkHandle {
            net: self.net.clone(),
            header: self.header.clone(),
            frozen: false,
        }
    }

    pub fn frozen(mut self) -> NetworkHandle {
        self.frozen = true;
        self
    }

    pub fn from_network(net: ResNet, header: BackboneHeader, frozen: bool) -> Self {
        Self { net, header, frozen }
    }

    /// Exports parameters and running statistics with the backbone header.
    pub fn to_archive(&self) -> TensorArchive {
        let mut archive = TensorArchive::default();
        self.net.for_each_slot(&mut |name, slot| {
            let tensor = match slot {
                Slot::Param(p) => ArchiveTensor {
                    shape: p.shape.clone(),
                    data: p.value.clone(),
                },
                Slot::Buffer(b) => ArchiveTensor {
                    shape: vec![b.len()],
                    data: b.to_vec(),
                },
            };
            archive.insert(name, tensor);
        });
        self.header.write(&mut archive);
        archive
    }

    /// Builds a network from an archive, checking every layer's shape.
    /// The classifier head may be absent.
    pub fn from_archive(archive: &TensorArchive, frozen: bool) -> Result<Self> {
        let header = BackboneHeader::read(archive)?;
        let mut net = ResNet::new(header.architecture.clone());
        let mut failure: Option<Error> = None;
        net.for_each_slot_mut(&mut |name, slot| {
            if failure.is_some() {
                return;
            }
            let Some(t) = archive.get(name) else {
                if !name.starts_with("fc.") {
                    failure = Some(Error::Load(format!("layer `{name}` is missing from the archive")));
                }
                return;
            };
            let (expected, target): (Vec<usize>, &mut Vec<f32>) = match slot {
                SlotMut::Param(p) => (p.shape.clone(), &mut p.value),
                SlotMut::Buffer(b) => (vec![b.len()], b),
            };
            if t.shape != expected || t.data.len() != target.len() {
                failure = Some(Error::Load(format!(
                    "layer `{name}` has shape {:?}, architecture `{}` expects {:?}",
                    t.shape, header.architecture.id, expected
                )));
                return;
            }
            target.copy_from_slice(&t.data);
        });
        if let Some(e) = failure {
            return Err(e);
        }
        Ok(Self { net, header, frozen })
    }

    fn check_config(&self, config: &PyramidConfig) -> Result<Vec<usize>> {
        config.validate()?;
        config
            .blocks
            .iter()
            .map(|&b| self.net.arch.stage_of_block(b))
            .collect()
    }

    fn prepare_batch(&self, batch: &[ImageTensor]) -> Result<Tensor> {
        let size = self.header.input_size;
        for img in batch {
            if img.height != size || img.width != size {
                return Err(Error::Dimension(format!(
                    "input is {}x{}, the network is configured for {size}x{size}",
                    img.height, img.width
                )));
            }
            if img.channels != self.net.arch.in_channels {
                return Err(Error::Dimension(format!(
                    "input has {} channels, the network expects {}",
                    img.channels, self.net.arch.in_channels
                )));
            }
        }
        let mut x = ImageTensor::stack(batch)?;
        self.header.normalization.apply(&mut x);
        Ok(x)
    }

    /// Training-mode forward pass returning the trace and the tapped stage
    /// indices; only trainable handles may run it.
    pub(crate) fn forward_train(&mut self, batch: &[ImageTensor], config: &PyramidConfig) -> Result<(Trace, Vec<usize>)> {
        let stages = self.check_config(config)?;
        let x = self.prepare_batch(batch)?;
        let depth = stages.last().copied().expect("validated non-empty") + 1;
        let net = self.network_mut()?;
        Ok((net.forward_train(x, depth, false), stages))
    }
}

/// Loads a frozen teacher and checks that the configured blocks exist.
pub fn load_teacher(archive: &TensorArchive, config: &PyramidConfig) -> Result<NetworkHandle> {
    let handle = NetworkHandle::from_archive(archive, true)?;
    handle.check_config(config)?;
    Ok(handle)
}

/// A trainable network with the teacher's topology and seeded random weights.
pub fn init_student(teacher: &NetworkHandle, seed: u64) -> NetworkHandle {
    let mut net = ResNet::new(teacher.net.arch.clone());
    net.init_random(&mut ChaCha8Rng::seed_from_u64(seed));
    NetworkHandle {
        net,
        header: teacher.header.clone(),
        frozen: false,
    }
}

/// Inference-mode pyramids, one per image. Images are processed in
/// parallel; the result does not depend on the thread count.
pub fn extract_pyramid(
    net: &NetworkHandle,
    batch: &[ImageTensor],
    config: &PyramidConfig,
) -> Result<Vec<FeaturePyramid>> {
    let stages = net.check_config(config)?;
    // validate every image up front so errors are independent of scheduling
    net.prepare_batch(batch)?;
    let depth = stages.last().copied().expect("validated non-empty") + 1;
    batch
        .par_iter()
        .map(|img| {
            let x = net.prepare_batch(std::slice::from_ref(img))?;
            let outputs = net.net.forward_stages(&x, depth);
            let levels = stages
                .iter()
                .map(|&s| outputs[s].to_feature_maps().pop().expect("batch of one"))
                .collect();
            Ok(FeaturePyramid::new(levels))
        })
        .collect()
}

/// Pulls the tapped stage outputs of a training trace apart per image.
pub(crate) fn trace_pyramids(trace: &Trace, stages: &[usize]) -> Vec<FeaturePyramid> {
    let per_stage: Vec<Vec<FeatureMap>> = stages
        .iter()
        .map(|&s| trace.stage_outputs[s].to_feature_maps())
        .collect();
    let n = per_stage[0].len();
    (0..n)
        .map(|i| FeaturePyramid::new(per_stage.iter().map(|maps| maps[i].clone()).collect()))
        .collect()
}
