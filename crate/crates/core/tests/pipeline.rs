mod common;

use common::{quick_config, random_teacher, small_set, SIZE};
use stfpm::backbone::{extract_pyramid, init_student, PyramidConfig};
use stfpm::metrics::{evaluate_category, EvalOptions};
use stfpm::nn::Architecture;
use stfpm::scorer::{score_images, ScoreOptions};
use stfpm::trainer::{dump_features, feature_records, split_dataset, train, validate, Checkpoint, EpochRecord, TrainConfig, TrainOptions};
use stfpm::Error;

fn split() -> (Vec<stfpm::tensor::ImageTensor>, Vec<stfpm::tensor::ImageTensor>) {
    let images = small_set().load_train().unwrap();
    split_dataset(&images, 0.25, 1.0, 0).unwrap()
}

#[test]
fn training_writes_checkpoints_and_log() {
    let teacher = random_teacher(1);
    let (tr, va) = split();
    let dir = tempfile::tempdir().unwrap();
    let options = TrainOptions {
        output_dir: Some(dir.path().to_path_buf()),
        no_teacher_cache: false,
    };
    let pyramid = PyramidConfig::default();
    let out = train(&teacher, init_student(&teacher, 3), &tr, &va, &quick_config(3), &pyramid, &options).unwrap();

    let log = std::fs::read_to_string(dir.path().join("train_log.jsonl")).unwrap();
    let records: Vec<EpochRecord> = log.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(records, out.history);
    assert_eq!(records.len(), 3);
    assert!(records.iter().all(|r| r.train_count == tr.len() && r.val_count == va.len()));

    let best = Checkpoint::load(dir.path().join("best.safetensors")).unwrap();
    let last = Checkpoint::load(dir.path().join("last.safetensors")).unwrap();
    assert_eq!(best.epoch, out.best.epoch);
    assert_eq!(last.epoch, 3);
    assert_eq!(best.student.checksum(), out.best.student.checksum());
    assert_eq!(best.pyramid, pyramid);
    assert_eq!(best.train_config, quick_config(3));
    // reloaded parameters reproduce the logged validation loss
    let again = validate(&teacher, &best.student, &va, &pyramid).unwrap();
    assert!((again - best.val_loss).abs() < 1e-5, "{again} vs {}", best.val_loss);
    best.check_teacher(&teacher).unwrap();
    assert!(matches!(best.check_teacher(&random_teacher(2)), Err(Error::Config(_))));
}

#[test]
fn teacher_cache_does_not_change_results() {
    let teacher = random_teacher(1);
    let (tr, va) = split();
    let pyramid = PyramidConfig::default();
    let run = |no_cache| {
        let opts = TrainOptions {
            output_dir: None,
            no_teacher_cache: no_cache,
        };
        train(&teacher, init_student(&teacher, 3), &tr, &va, &quick_config(2), &pyramid, &opts).unwrap()
    };
    let (a, b) = (run(false), run(true));
    for (x, y) in a.history.iter().zip(&b.history) {
        assert!((x.val_loss - y.val_loss).abs() < 1e-9);
    }
}

#[test]
fn rejects_bad_training_setups() {
    let teacher = random_teacher(1);
    let (tr, va) = split();
    let pyramid = PyramidConfig::default();
    let opts = TrainOptions::default();
    let zero = TrainConfig {
        epochs: 0,
        ..quick_config(1)
    };
    assert!(matches!(train(&teacher, init_student(&teacher, 0), &tr, &va, &zero, &pyramid, &opts), Err(Error::Usage(_))));

    let wrong_size = TrainConfig {
        input_size: 64,
        ..quick_config(1)
    };
    assert!(matches!(train(&teacher, init_student(&teacher, 0), &tr, &va, &wrong_size, &pyramid, &opts), Err(Error::Config(_))));

    // a frozen handle cannot be trained
    assert!(matches!(train(&teacher, teacher.clone(), &tr, &va, &quick_config(1), &pyramid, &opts), Err(Error::Usage(_))));

    let mut other = stfpm::nn::ResNet::new(Architecture {
        stage_widths: vec![16, 32, 64, 96],
        ..Architecture::toy(3)
    });
    other.init_random(&mut <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0));
    let mismatched = stfpm::backbone::NetworkHandle::from_network(other, teacher.header().clone(), false);
    assert!(matches!(train(&teacher, mismatched, &tr, &va, &quick_config(1), &pyramid, &opts), Err(Error::Config(_))));

    let bad_blocks = PyramidConfig::uniform(vec![2, 6]);
    assert!(bad_blocks.is_err() || extract_pyramid(&teacher, &tr, &bad_blocks.unwrap()).is_err());
    assert!(extract_pyramid(&teacher, &tr, &PyramidConfig { blocks: vec![1, 2], weights: vec![1.0; 2] }).is_err());
}

#[test]
fn identical_student_scores_zero() {
    let teacher = random_teacher(4);
    let student = teacher.clone_as_student();
    let (_, va) = split();
    let pyramid = PyramidConfig::default();
    assert!(validate(&teacher, &student, &va, &pyramid).unwrap().abs() < 1e-12);
    let maps = score_images(&teacher, &student, &va, &pyramid, &ScoreOptions::default()).unwrap();
    for (map, score) in maps {
        assert_eq!((map.width, map.height), (SIZE, SIZE));
        assert!(score.abs() < 1e-12);
    }
}

#[test]
fn feature_dump_has_one_record_per_position() {
    let teacher = random_teacher(4);
    let student = init_student(&teacher, 1);
    let image = small_set().load_train().unwrap().remove(0);
    let pyramid = PyramidConfig::default();
    let positions: usize = (2..=4)
        .map(|b| {
            let (_, h, w) = teacher.architecture().block_output_shape(b, SIZE).unwrap();
            h * w
        })
        .sum();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("features.jsonl");
    assert_eq!(dump_features(&teacher, &student, &image, &pyramid, &path).unwrap(), 2 * positions);
    let records = feature_records(&teacher, &student, &image, &pyramid).unwrap();
    assert_eq!(std::fs::read_to_string(&path).unwrap().lines().count(), records.len());
    for r in &records {
        let norm: f32 = r.vector.iter().map(|v| v * v).sum::<f32>().sqrt();
        assert!(norm == 0.0 || (norm - 1.0).abs() < 1e-4, "norm {norm}");
    }
}

#[test]
fn evaluation_reports_every_metric() {
    let teacher = random_teacher(1);
    let set = small_set();
    let images = set.load_train().unwrap();
    let (tr, va) = split_dataset(&images, 0.25, 1.0, 0).unwrap();
    let pyramid = PyramidConfig::default();
    let out = train(&teacher, init_student(&teacher, 3), &tr, &va, &quick_config(2), &pyramid, &TrainOptions::default()).unwrap();
    let report = evaluate_category(&set, &teacher, &out.best, &EvalOptions::default()).unwrap();
    let m = &report.categories[0];
    for v in [m.image_auc, m.pixel_auc, m.pro] {
        assert!((0.0..=1.0).contains(&v));
    }
    assert_eq!(report.curves[0].image_roc.first(), Some(&(0.0, 0.0)));
    assert_eq!(report.curves[0].image_roc.last(), Some(&(1.0, 1.0)));

    let dir = tempfile::tempdir().unwrap();
    report.write_files(dir.path()).unwrap();
    let csv = std::fs::read_to_string(dir.path().join("curves.csv")).unwrap();
    assert!(csv.starts_with("category,curve,x,y\n"));
    assert!(csv.contains("tiny,pro,"));

    assert!(matches!(
        evaluate_category(&set, &random_teacher(9), &out.best, &EvalOptions::default()),
        Err(Error::Config(_))
    ));
}
