use std::ffi::{CStr, CString};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::ptr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use stfpm::backbone::{init_student, BackboneHeader, NetworkHandle, Normalization, PyramidConfig};
use stfpm::datasets::{generate_synthetic, SynthSpec};
use stfpm::metrics::{pro_score, roc_auc, BinaryMask, ProOptions};
use stfpm::nn::{Architecture, ResNet};
use stfpm::scorer::{score_images, AnomalyMap, ScoreOptions};
use stfpm::trainer::{Checkpoint, TrainConfig};
use stfpm_ffi::*;

const SIZE: usize = 32;

struct Fixture {
    _dir: tempfile::TempDir,
    teacher: PathBuf,
    checkpoint: PathBuf,
    image: PathBuf,
    handles: (NetworkHandle, Checkpoint),
}

fn fixture() -> Fixture {
    let dir = tempfile::tempdir().unwrap();
    let mut net = ResNet::new(Architecture::toy(2));
    net.init_random(&mut ChaCha8Rng::seed_from_u64(5));
    let header = BackboneHeader {
        architecture: net.arch.clone(),
        input_size: SIZE,
        normalization: Normalization::imagenet(),
    };
    let teacher = NetworkHandle::from_network(net, header, true);
    let checkpoint = Checkpoint {
        student: init_student(&teacher, 9),
        epoch: 1,
        val_loss: 0.5,
        config_fingerprint: "fixture".into(),
        teacher_fingerprint: teacher.checksum(),
        pyramid: PyramidConfig::default(),
        train_config: TrainConfig {
            input_size: SIZE,
            ..TrainConfig::default()
        },
    };
    let teacher_path = dir.path().join("teacher.safetensors");
    let ckpt_path = dir.path().join("student.safetensors");
    teacher.to_archive().save(&teacher_path).unwrap();
    checkpoint.save(&ckpt_path).unwrap();
    let set = generate_synthetic(&SynthSpec {
        image_size: SIZE,
        train_count: 1,
        test_good: 1,
        test_defect: 1,
        ..SynthSpec::default()
    })
    .unwrap();
    let image = dir.path().join("probe.png");
    set.test[1].image.load_rgb().unwrap().save(&image).unwrap();
    Fixture {
        _dir: dir,
        teacher: teacher_path,
        checkpoint: ckpt_path,
        image,
        handles: (teacher, checkpoint),
    }
}

fn cstr(p: &Path) -> CString {
    CString::new(p.to_str().unwrap()).unwrap()
}

fn last_error() -> String {
    let p = stfpm_last_error();
    assert!(!p.is_null(), "an error message is expected");
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

fn open(f: &Fixture) -> *mut StfpmDetector {
    let mut det = ptr::null_mut();
    let status = unsafe { stfpm_detector_open(cstr(&f.teacher).as_ptr(), cstr(&f.checkpoint).as_ptr(), &mut det) };
    assert_eq!(status, StfpmStatus::Ok);
    assert!(stfpm_last_error().is_null());
    det
}

#[test]
fn scoring_matches_the_library() {
    let f = fixture();
    let det = open(&f);
    let mut size = 0usize;
    assert_eq!(unsafe { stfpm_detector_input_size(det, &mut size) }, StfpmStatus::Ok);
    assert_eq!(size, SIZE);

    let rgb = image::open(&f.image).unwrap().to_rgb8();
    let mut map = vec![0.0; SIZE * SIZE];
    let mut score = 0.0;
    let status = unsafe {
        stfpm_detector_score_rgb8(det, rgb.as_raw().as_ptr(), rgb.width(), rgb.height(), 3 * rgb.width() as usize, map.as_mut_ptr(), map.len(), &mut score)
    };
    assert_eq!(status, StfpmStatus::Ok);

    let (teacher, ckpt) = &f.handles;
    let tensor = stfpm::tensor::ImageTensor::from_rgb8(&rgb);
    let (expected, expected_score) =
        score_images(teacher, &ckpt.student, &[tensor], &ckpt.pyramid, &ScoreOptions::default()).unwrap().remove(0);
    assert_eq!(map, expected.scores);
    assert_eq!(score, expected_score);

    let mut from_file = vec![0.0; SIZE * SIZE];
    let mut file_score = 0.0;
    let path = cstr(&f.image);
    let status = unsafe { stfpm_detector_score_file(det, path.as_ptr(), from_file.as_mut_ptr(), from_file.len(), &mut file_score) };
    assert_eq!(status, StfpmStatus::Ok);
    assert_eq!(from_file, map);

    // score only, no map buffer
    let status = unsafe { stfpm_detector_score_file(det, path.as_ptr(), ptr::null_mut(), 0, &mut file_score) };
    assert_eq!(status, StfpmStatus::Ok);
    assert_eq!(file_score, score);
    unsafe { stfpm_detector_free(det) };
}

#[test]
fn padded_rows_are_honoured() {
    let f = fixture();
    let det = open(&f);
    let rgb = image::open(&f.image).unwrap().to_rgb8();
    let stride = 3 * SIZE + 5;
    let mut padded = vec![0xAB; stride * SIZE];
    for (y, row) in rgb.as_raw().chunks(3 * SIZE).enumerate() {
        padded[y * stride..y * stride + 3 * SIZE].copy_from_slice(row);
    }
    let (mut a, mut b) = (0.0, 0.0);
    unsafe {
        assert_eq!(stfpm_detector_score_rgb8(det, rgb.as_raw().as_ptr(), SIZE as u32, SIZE as u32, 3 * SIZE, ptr::null_mut(), 0, &mut a), StfpmStatus::Ok);
        assert_eq!(stfpm_detector_score_rgb8(det, padded.as_ptr(), SIZE as u32, SIZE as u32, stride, ptr::null_mut(), 0, &mut b), StfpmStatus::Ok);
        stfpm_detector_free(det);
    }
    assert_eq!(a, b);
}

#[test]
fn errors_carry_codes_and_messages() {
    let f = fixture();
    let mut det = ptr::null_mut();
    let missing = CString::new("/nonexistent/teacher.safetensors").unwrap();
    let status = unsafe { stfpm_detector_open(missing.as_ptr(), cstr(&f.checkpoint).as_ptr(), &mut det) };
    assert_eq!(status, StfpmStatus::Io);
    assert!(det.is_null());
    assert!(last_error().contains("/nonexistent/teacher.safetensors"));

    // student trained against another teacher
    let other = f.teacher.with_file_name("other.safetensors");
    let mut net = ResNet::new(Architecture::toy(2));
    net.init_random(&mut ChaCha8Rng::seed_from_u64(6));
    let (teacher, _) = &f.handles;
    NetworkHandle::from_network(net, teacher.header().clone(), true).to_archive().save(&other).unwrap();
    let status = unsafe { stfpm_detector_open(cstr(&other).as_ptr(), cstr(&f.checkpoint).as_ptr(), &mut det) };
    assert_eq!(status, StfpmStatus::Config);
    assert!(last_error().contains("different teacher"));

    let status = unsafe { stfpm_detector_open(ptr::null(), cstr(&f.checkpoint).as_ptr(), &mut det) };
    assert_eq!(status, StfpmStatus::NullArgument);

    let det = open(&f);
    let mut small = vec![0.0; 10];
    let mut score = 0.0;
    let path = cstr(&f.image);
    let status = unsafe { stfpm_detector_score_file(det, path.as_ptr(), small.as_mut_ptr(), small.len(), &mut score) };
    assert_eq!(status, StfpmStatus::BufferTooSmall);
    let px = [0u8; 12];
    let status = unsafe { stfpm_detector_score_rgb8(det, px.as_ptr(), 2, 2, 5, ptr::null_mut(), 0, &mut score) };
    assert_eq!(status, StfpmStatus::Data);
    unsafe { stfpm_detector_free(det) };
    unsafe { stfpm_detector_free(ptr::null_mut()) };
}

#[test]
fn metrics_match_the_library() {
    let scores = [0.1, 0.4, 0.35, 0.8, 0.4];
    let labels = [0u8, 0, 1, 1, 1];
    let mut auc = 0.0;
    assert_eq!(unsafe { stfpm_roc_auc(scores.as_ptr(), labels.as_ptr(), 5, &mut auc) }, StfpmStatus::Ok);
    let bools: Vec<bool> = labels.iter().map(|&l| l == 1).collect();
    assert_eq!(auc, roc_auc(&scores, &bools).unwrap());

    let one_class = [1u8; 5];
    assert_eq!(unsafe { stfpm_roc_auc(scores.as_ptr(), one_class.as_ptr(), 5, &mut auc) }, StfpmStatus::Metric);

    let (w, h) = (6, 5);
    let maps: Vec<f64> = (0..2 * w * h).map(|i| ((i * 37) % 23) as f64).collect();
    let masks: Vec<u8> = (0..2 * w * h).map(|i| u8::from(i % 7 < 2)).collect();
    let mut pro = 0.0;
    let status = unsafe { stfpm_pro_score(maps.as_ptr(), masks.as_ptr(), 2, w, h, 0.3, 200, 0, &mut pro) };
    assert_eq!(status, StfpmStatus::Ok);
    let am: Vec<AnomalyMap> = maps.chunks(w * h).map(|c| AnomalyMap::new(w, h, c.to_vec()).unwrap()).collect();
    let bm: Vec<BinaryMask> = masks.chunks(w * h).map(|c| BinaryMask::new(w, h, c.to_vec()).unwrap()).collect();
    assert_eq!(pro, pro_score(&am, &bm, &ProOptions::default()).unwrap());
}

#[test]
fn version_is_the_crate_version() {
    let v = unsafe { CStr::from_ptr(stfpm_version()) };
    assert_eq!(v.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
}

const C_PROGRAM: &str = r#"
#include <stdio.h>
#include "stfpm.h"

int main(void) {
    double scores[4] = {0.1, 0.9, 0.2, 0.8};
    uint8_t labels[4] = {0, 1, 0, 1};
    double auc = -1.0;
    StfpmStatus s = stfpm_roc_auc(scores, labels, 4, &auc);
    StfpmDetector *det = NULL;
    StfpmStatus o = stfpm_detector_open("/nonexistent", "/nonexistent", &det);
    printf("%d %.3f %d %s %d\n", (int)s, auc, (int)o, stfpm_version(), stfpm_last_error() != NULL);
    stfpm_detector_free(det);
    return 0;
}
"#;

fn target_dir() -> PathBuf {
    // tests run from <target>/<profile>/deps
    let exe = std::env::current_exe().unwrap();
    exe.parent().unwrap().parent().unwrap().to_path_buf()
}

#[test]
fn header_compiles_and_links_from_c() {
    let include = Path::new(env!("CARGO_MANIFEST_DIR")).join("include");
    assert!(include.join("stfpm.h").is_file(), "header is generated by the build script");
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("probe.c");
    std::fs::write(&src, C_PROGRAM).unwrap();

    let lib_dir = target_dir();
    let exe = dir.path().join("probe");
    let status = Command::new("cc")
        .arg("-std=c99")
        .arg("-Wall")
        .arg("-Werror")
        .arg("-I")
        .arg(&include)
        .arg(&src)
        .arg("-o")
        .arg(&exe)
        .arg("-L")
        .arg(&lib_dir)
        .arg("-lstfpm_ffi")
        .arg(format!("-Wl,-rpath,{}", lib_dir.display()))
        .status()
        .expect("a C compiler is available");
    assert!(status.success(), "C probe failed to build against {}", lib_dir.display());
    let out = Command::new(&exe).output().unwrap();
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    assert_eq!(text.trim(), format!("0 1.000 6 {} 1", env!("CARGO_PKG_VERSION")));
}
