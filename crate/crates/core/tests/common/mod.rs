#![allow(dead_code)]

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use stfpm::backbone::{BackboneHeader, NetworkHandle, Normalization};
use stfpm::datasets::{generate_synthetic, CategorySet, SynthSpec};
use stfpm::nn::{Architecture, ResNet};
use stfpm::trainer::TrainConfig;

pub const SIZE: usize = 32;

/// Randomly initialized small backbone; enough for plumbing checks.
pub fn random_teacher(seed: u64) -> NetworkHandle {
    let mut net = ResNet::new(Architecture::toy(3));
    net.init_random(&mut ChaCha8Rng::seed_from_u64(seed));
    let header = BackboneHeader {
        architecture: net.arch.clone(),
        input_size: SIZE,
        normalization: Normalization::imagenet(),
    };
    NetworkHandle::from_network(net, header, true)
}

pub fn small_set() -> CategorySet {
    let mut set = generate_synthetic(&SynthSpec {
        name: "tiny".into(),
        image_size: SIZE,
        train_count: 12,
        test_good: 4,
        test_defect: 4,
        defect: stfpm::datasets::DefectSpec {
            min_radius: 2,
            max_radius: 4,
            ..Default::default()
        },
        ..SynthSpec::default()
    })
    .unwrap();
    set.input_size = SIZE;
    set
}

pub fn quick_config(epochs: usize) -> TrainConfig {
    TrainConfig {
        epochs,
        batch_size: 4,
        input_size: SIZE,
        learning_rate: 0.1,
        ..TrainConfig::default()
    }
}
