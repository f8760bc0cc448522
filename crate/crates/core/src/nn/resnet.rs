//! Residual networks built from basic blocks (the ResNet-18/34 family and
//! a scaled-down variant for desk-scale experiments).
//!
//! Parameter names follow the torchvision convention (`layer2.0.conv1.weight`,
//! `layer2.0.downsample.1.running_var`, ...) so pretrained checkpoints map
//! one-to-one onto this implementation.

use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};

use super::{
    global_avg_pool, global_avg_pool_backward, relu_backward_inplace, relu_inplace, BatchNorm2d,
    BatchNormCache, Conv2d, Linear, MaxPool2d, MaxPoolCache, Param,
};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Block ids address the residual stages the way the original ResNet tables
/// do: `conv2_x` is block 2, `conv5_x` is block 5.
pub const FIRST_BLOCK_ID: usize = 2;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    pub id: String,
    pub in_channels: usize,
    pub stem_channels: usize,
    pub stem_kernel: usize,
    pub stem_stride: usize,
    pub stem_maxpool: bool,
    pub stage_widths: Vec<usize>,
    pub stage_depths: Vec<usize>,
    pub num_classes: usize,
}

impl Architecture {
    pub fn resnet18() -> Self {
        Self {
            id: "resnet18".into(),
            in_channels: 3,
            stem_channels: 64,
            stem_kernel: 7,
            stem_stride: 2,
            stem_maxpool: true,
            stage_widths: vec![64, 128, 256, 512],
            stage_depths: vec![2, 2, 2, 2],
            num_classes: 1000,
        }
    }

    pub fn resnet34() -> Self {
        Self {
            id: "resnet34".into(),
            stage_depths: vec![3, 4, 6, 3],
            ..Self::resnet18()
        }
    }

    /// Four single-block stages of width 16..128 behind a stride-2 3x3 stem.
    pub fn toy(num_classes: usize) -> Self {
        Self {
            id: "toy-resnet".into(),
            in_channels: 3,
            stem_channels: 16,
            stem_kernel: 3,
            stem_stride: 2,
            stem_maxpool: false,
            stage_widths: vec![16, 32, 64, 128],
            stage_depths: vec![1, 1, 1, 1],
            num_classes,
        }
    }

    pub fn from_id(id: &str, num_classes: usize) -> Result<Self> {
        match id {
            "resnet18" => Ok(Self {
                num_classes,
                ..Self::resnet18()
            }),
            "resnet34" => Ok(Self {
                num_classes,
                ..Self::resnet34()
            }),
            "toy-resnet" => Ok(Self::toy(num_classes)),
            other => Err(Error::Config(format!("unknown architecture id `{other}`"))),
        }
    }

    pub fn stages(&self) -> usize {
        self.stage_widths.len()
    }

    /// Every valid block id, shallow to deep.
    pub fn block_ids(&self) -> std::ops::Range<usize> {
        FIRST_BLOCK_ID..FIRST_BLOCK_ID + self.stages()
    }

    pub fn stage_of_block(&self, block_id: usize) -> Result<usize> {
        if self.block_ids().contains(&block_id) {
            Ok(block_id - FIRST_BLOCK_ID)
        } else {
            Err(Error::Config(format!(
                "block {block_id} does not exist in `{}` (valid blocks: {:?})",
                self.id,
                self.block_ids().collect::<Vec<_>>()
            )))
        }
    }

    fn stem_padding(&self) -> usize {
        self.stem_kernel / 2
    }

    fn stage_stride(stage: usize) -> usize {
        if stage == 0 {
            1
        } else {
            2
        }
    }

    /// Output (channels, height, width) of a block for a square input.
    pub fn block_output_shape(&self, block_id: usize, input_size: usize) -> Result<(usize, usize, usize)> {
        let stage = self.stage_of_block(block_id)?;
        let mut s = super::conv::output_size(input_size, self.stem_kernel, self.stem_stride, self.stem_padding());
        if self.stem_maxpool {
            s = super::conv::output_size(s, 3, 2, 1);
        }
        for st in 0..=stage {
            s = super::conv::output_size(s, 3, Self::stage_stride(st), 1);
        }
        Ok((self.stage_widths[stage], s, s))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BasicBlock {
    pub conv1: Conv2d,
    pub bn1: BatchNorm2d,
    pub conv2: Conv2d,
    pub bn2: BatchNorm2d,
    pub downsample: Option<(Conv2d, BatchNorm2d)>,
}

struct BlockCache {
    x: Tensor,
    bn1: BatchNormCache,
    a1: Tensor,
    bn2: BatchNormCache,
    ds: Option<BatchNormCache>,
    out: Tensor,
}

impl BasicBlock {
    fn new(inputs: usize, width: usize, stride: usize) -> Self {
        let downsample = (stride != 1 || inputs != width)
            .then(|| (Conv2d::new(inputs, width, 1, stride, 0), BatchNorm2d::new(width)));
        Self {
            conv1: Conv2d::new(inputs, width, 3, stride, 1),
            bn1: BatchNorm2d::new(width),
            conv2: Conv2d::new(width, width, 3, 1, 1),
            bn2: BatchNorm2d::new(width),
            downsample,
        }
    }

    fn forward_eval(&self, x: &Tensor) -> Tensor {
        let mut a1 = self.bn1.forward_eval(&self.conv1.forward(x));
        relu_inplace(a1.data_mut());
        let mut out = self.bn2.forward_eval(&self.conv2.forward(&a1));
        match &self.downsample {
            Some((conv, bn)) => out.add_assign(&bn.forward_eval(&conv.forward(x))),
            None => out.add_assign(x),
        }
        relu_inplace(out.data_mut());
        out
    }

    fn forward_train(&mut self, x: Tensor) -> BlockCache {
        let (mut a1, bn1) = self.bn1.forward_train(&self.conv1.forward(&x));
        relu_inplace(a1.data_mut());
        let (mut out, bn2) = self.bn2.forward_train(&self.conv2.forward(&a1));
        let ds = match &mut self.downsample {
            Some((conv, bn)) => {
                let (sc, cache) = bn.forward_train(&conv.forward(&x));
                out.add_assign(&sc);
                Some(cache)
            }
            None => {
                out.add_assign(&x);
                None
            }
        };
        relu_inplace(out.data_mut());
        BlockCache {
            x,
            bn1,
            a1,
            bn2,
            ds,
            out,
        }
    }

    fn backward(&mut self, cache: &BlockCache, mut grad: Tensor, need_input_grad: bool) -> Option<Tensor> {
        relu_backward_inplace(cache.out.data(), grad.data_mut());
        let d_h2 = self.bn2.backward(&cache.bn2, &grad);
        let mut d_a1 = self
            .conv2
            .backward(&cache.a1, &d_h2, true)
            .expect("input gradient requested");
        relu_backward_inplace(cache.a1.data(), d_a1.data_mut());
        let d_h1 = self.bn1.backward(&cache.bn1, &d_a1);
        let dx = self.conv1.backward(&cache.x, &d_h1, need_input_grad);
        match (&mut self.downsample, &cache.ds) {
            (Some((conv, bn)), Some(ds_cache)) => {
                let d_sc = bn.backward(ds_cache, &grad);
                let d_skip = conv.backward(&cache.x, &d_sc, need_input_grad);
                dx.map(|mut d| {
                    d.add_assign(&d_skip.expect("input gradient requested"));
                    d
                })
            }
            _ => dx.map(|mut d| {
                d.add_assign(&grad);
                d
            }),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ResNet {
    pub arch: Architecture,
    pub conv1: Conv2d,
    pub bn1: BatchNorm2d,
    pub stages: Vec<Vec<BasicBlock>>,
    pub fc: Linear,
}

/// Saved activations of a training-mode forward pass.
pub struct Trace {
    input: Tensor,
    stem_bn: BatchNormCache,
    stem_act: Tensor,
    pool: Option<MaxPoolCache>,
    blocks: Vec<Vec<BlockCache>>,
    head: Option<(Vec<f32>, [usize; 4])>,
    /// Outputs of every stage that was evaluated.
    pub stage_outputs: Vec<Tensor>,
    pub logits: Option<Vec<f32>>,
}

/// A borrowed named array: trainable parameter or running statistic.
pub enum Slot<'a> {
    Param(&'a Param),
    Buffer(&'a [f32]),
}

pub enum SlotMut<'a> {
    Param(&'a mut Param),
    Buffer(&'a mut Vec<f32>),
}

const STEM_POOL: MaxPool2d = MaxPool2d {
    kernel: 3,
    stride: 2,
    padding: 1,
};

impl ResNet {
    /// Builds the topology with zero weights and unit batch-norm scales.
    pub fn new(arch: Architecture) -> Self {
        let conv1 = Conv2d::new(
            arch.in_channels,
            arch.stem_channels,
            arch.stem_kernel,
            arch.stem_stride,
            arch.stem_padding(),
        );
        let bn1 = BatchNorm2d::new(arch.stem_channels);
        let mut inputs = arch.stem_channels;
        let mut stages = Vec::with_capacity(arch.stages());
        for (s, (&width, &depth)) in arch.stage_widths.iter().zip(&arch.stage_depths).enumerate() {
            let mut blocks = Vec::with_capacity(depth);
            for b in 0..depth {
                let stride = if b == 0 { Architecture::stage_stride(s) } else { 1 };
                blocks.push(BasicBlock::new(inputs, width, stride));
                inputs = width;
            }
            stages.push(blocks);
        }
        let fc = Linear::new(inputs, arch.num_classes);
        Self {
            arch,
            conv1,
            bn1,
            stages,
            fc,
        }
    }

    /// Kaiming-normal convolutions (fan-out), unit/zero batch norm, and a
    /// uniform fully connected head.
    pub fn init_random<R: Rng>(&mut self, rng: &mut R) {
        self.for_each_slot_mut(&mut |name, slot| match slot {
            SlotMut::Param(p) if p.shape.len() == 4 => {
                let fan_out = (p.shape[0] * p.shape[2] * p.shape[3]) as f32;
                let normal = Normal::new(0.0f32, (2.0 / fan_out).sqrt()).expect("finite std");
                p.value.iter_mut().for_each(|v| *v = normal.sample(rng));
            }
            SlotMut::Param(p) if name.starts_with("fc.") => {
                let fan_in = if p.shape.len() == 2 { p.shape[1] } else { p.len() };
                let bound = 1.0 / (fan_in.max(1) as f32).sqrt();
                let uniform = Uniform::new_inclusive(-bound, bound).expect("valid bound");
                p.value.iter_mut().for_each(|v| *v = uniform.sample(rng));
            }
            SlotMut::Param(p) => {
                let fill = if name.ends_with(".weight") { 1.0 } else { 0.0 };
                p.value.fill(fill);
            }
            SlotMut::Buffer(b) => {
                let fill = if name.ends_with("running_var") { 1.0 } else { 0.0 };
                b.fill(fill);
            }
        });
    }

    fn stem_eval(&self, x: &Tensor) -> Tensor {
        let mut a = self.bn1.forward_eval(&self.conv1.forward(x));
        relu_inplace(a.data_mut());
        if self.arch.stem_maxpool {
            STEM_POOL.forward(&a).0
        } else {
            a
        }
    }

    /// Inference-mode outputs of the first `depth` stages.
    pub fn forward_stages(&self, x: &Tensor, depth: usize) -> Vec<Tensor> {
        let mut h = self.stem_eval(x);
        let mut outputs = Vec::with_capacity(depth);
        for blocks in self.stages.iter().take(depth) {
            for block in blocks {
                h = block.forward_eval(&h);
            }
            outputs.push(h.clone());
        }
        outputs
    }

    /// Inference-mode class scores, `[batch][num_classes]` flattened.
    pub fn classify(&self, x: &Tensor) -> Vec<f32> {
        let outputs = self.forward_stages(x, self.stages.len());
        let last = outputs.last().expect("at least one stage");
        self.fc.forward(&global_avg_pool(last))
    }

    /// Training-mode forward through `depth` stages; with `with_head` the
    /// classifier runs too (requires `depth` to cover every stage).
    pub fn forward_train(&mut self, x: Tensor, depth: usize, with_head: bool) -> Trace {
        assert!(depth >= 1 && depth <= self.stages.len());
        assert!(!with_head || depth == self.stages.len());
        let (mut stem_act, stem_bn) = self.bn1.forward_train(&self.conv1.forward(&x));
        relu_inplace(stem_act.data_mut());
        let (mut h, pool) = if self.arch.stem_maxpool {
            let (pooled, cache) = STEM_POOL.forward(&stem_act);
            (pooled, Some(cache))
        } else {
            (stem_act.clone(), None)
        };
        let mut blocks_cache = Vec::with_capacity(depth);
        let mut stage_outputs = Vec::with_capacity(depth);
        for blocks in self.stages.iter_mut().take(depth) {
            let mut caches = Vec::with_capacity(blocks.len());
            for block in blocks.iter_mut() {
                let cache = block.forward_train(h);
                h = cache.out.clone();
                caches.push(cache);
            }
            stage_outputs.push(h.clone());
            blocks_cache.push(caches);
        }
        let (head, logits) = if with_head {
            let pooled = global_avg_pool(&h);
            let logits = self.fc.forward(&pooled);
            (Some((pooled, h.shape())), Some(logits))
        } else {
            (None, None)
        };
        Trace {
            input: x,
            stem_bn,
            stem_act,
            pool,
            blocks: blocks_cache,
            head,
            stage_outputs,
            logits,
        }
    }

    /// Accumulates parameter gradients given gradients at stage outputs
    /// (`None` where a stage receives no direct signal) and optionally at
    /// the logits.
    pub fn backward(&mut self, trace: Trace, stage_grads: Vec<Option<Tensor>>, logits_grad: Option<&[f32]>) {
        let depth = trace.blocks.len();
        assert_eq!(stage_grads.len(), depth);
        let mut grad: Option<Tensor> = match (logits_grad, &trace.head) {
            (Some(dl), Some((pooled, shape))) => {
                let dpool = self.fc.backward(pooled, dl);
                Some(global_avg_pool_backward(&dpool, *shape))
            }
            _ => None,
        };
        for (s, tap) in stage_grads.into_iter().enumerate().rev() {
            grad = match (grad, tap) {
                (Some(mut g), Some(t)) => {
                    g.add_assign(&t);
                    Some(g)
                }
                (g, t) => g.or(t),
            };
            let Some(mut g) = grad.take() else { continue };
            for (block, cache) in self.stages[s].iter_mut().zip(&trace.blocks[s]).rev() {
                g = block.backward(cache, g, true).expect("input gradient requested");
            }
            grad = Some(g);
        }
        let Some(mut g) = grad else { return };
        if let Some(pool) = &trace.pool {
            g = STEM_POOL.backward(pool, &g);
        }
        relu_backward_inplace(trace.stem_act.data(), g.data_mut());
        let d_stem = self.bn1.backward(&trace.stem_bn, &g);
        self.conv1.backward(&trace.input, &d_stem, false);
    }

    pub fn zero_grad(&mut self) {
        self.for_each_slot_mut(&mut |_, slot| {
            if let SlotMut::Param(p) = slot {
                p.zero_grad();
            }
        });
    }

    pub fn for_each_slot(&self, f: &mut dyn FnMut(&str, Slot<'_>)) {
        fn bn(prefix: &str, bn: &BatchNorm2d, f: &mut dyn FnMut(&str, Slot<'_>)) {
            f(&format!("{prefix}.weight"), Slot::Param(&bn.weight));
            f(&format!("{prefix}.bias"), Slot::Param(&bn.bias));
            f(&format!("{prefix}.running_mean"), Slot::Buffer(&bn.running_mean));
            f(&format!("{prefix}.running_var"), Slot::Buffer(&bn.running_var));
        }
        f("conv1.weight", Slot::Param(&self.conv1.weight));
        bn("bn1", &self.bn1, f);
        for (s, blocks) in self.stages.iter().enumerate() {
            for (b, block) in blocks.iter().enumerate() {
                let p = format!("layer{}.{b}", s + 1);
                f(&format!("{p}.conv1.weight"), Slot::Param(&block.conv1.weight));
                bn(&format!("{p}.bn1"), &block.bn1, f);
                f(&format!("{p}.conv2.weight"), Slot::Param(&block.conv2.weight));
                bn(&format!("{p}.bn2"), &block.bn2, f);
                if let Some((conv, norm)) = &block.downsample {
                    f(&format!("{p}.downsample.0.weight"), Slot::Param(&conv.weight));
                    bn(&format!("{p}.downsample.1"), norm, f);
                }
            }
        }
        f("fc.weight", Slot::Param(&self.fc.weight));
        f("fc.bias", Slot::Param(&self.fc.bias));
    }

    pub fn for_each_slot_mut(&mut self, f: &mut dyn FnMut(&str, SlotMut<'_>)) {
        fn bn(prefix: &str, bn: &mut BatchNorm2d, f: &mut dyn FnMut(&str, SlotMut<'_>)) {
            f(&format!("{prefix}.weight"), SlotMut::Param(&mut bn.weight));
            f(&format!("{prefix}.bias"), SlotMut::Param(&mut bn.bias));
            f(&format!("{prefix}.running_mean"), SlotMut::Buffer(&mut bn.running_mean));
            f(&format!("{prefix}.running_var"), SlotMut::Buffer(&mut bn.running_var));
        }
        f("conv1.weight", SlotMut::Param(&mut self.conv1.weight));
        bn("bn1", &mut self.bn1, f);
        for (s, blocks) in self.stages.iter_mut().enumerate() {
            for (b, block) in blocks.iter_mut().enumerate() {
                let p = format!("layer{}.{b}", s + 1);
                f(&format!("{p}.conv1.weight"), SlotMut::Param(&mut block.conv1.weight));
                bn(&format!("{p}.bn1"), &mut block.bn1, f);
                f(&format!("{p}.conv2.weight"), SlotMut::Param(&mut block.conv2.weight));
                bn(&format!("{p}.bn2"), &mut block.bn2, f);
                if let Some((conv, norm)) = &mut block.downsample {
                    f(&format!("{p}.downsample.0.weight"), SlotMut::Param(&mut conv.weight));
                    bn(&format!("{p}.downsample.1"), norm, f);
                }
            }
        }
        f("fc.weight", SlotMut::Param(&mut self.fc.weight));
        f("fc.bias", SlotMut::Param(&mut self.fc.bias));
    }

    /// (name, shape) of every named array, in a fixed order.
    pub fn layer_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let mut out = Vec::new();
        self.for_each_slot(&mut |name, slot| {
            let shape = match slot {
                Slot::Param(p) => p.shape.clone(),
                Slot::Buffer(b) => vec![b.len()],
            };
            out.push((name.to_string(), shape));
        });
        out
    }
}
