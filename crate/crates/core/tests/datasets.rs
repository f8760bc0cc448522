mod common;

use image::{GrayImage, Luma, Rgb, RgbImage};
use stfpm::datasets::{load_category, write_category, ImageSource, GOOD};
use stfpm::Error;

#[test]
fn written_category_loads_back_identically() {
    let set = common::small_set();
    let dir = tempfile::tempdir().unwrap();
    let base = write_category(&set, dir.path()).unwrap();
    assert_eq!(base, dir.path().join("tiny"));
    assert!(base.join("train").join(GOOD).join("000.png").is_file());

    let back = load_category(dir.path(), "tiny", common::SIZE).unwrap();
    assert_eq!(back.train.len(), set.train.len());
    assert_eq!(back.test.len(), set.test.len());
    assert_eq!(back.defect_types(), set.defect_types());
    assert_eq!(back.load_train().unwrap(), set.load_train().unwrap());
    let keyed = |s: &stfpm::datasets::CategorySet| {
        let loaded = s.load_test().unwrap();
        let mut items: Vec<_> = s
            .test
            .iter()
            .map(|t| {
                let id = t.image.id();
                let file = std::path::Path::new(&id).file_name().unwrap().to_string_lossy().into_owned();
                (t.label.clone(), file)
            })
            .zip(loaded)
            .collect();
        items.sort_by(|a, b| a.0.cmp(&b.0));
        items
    };
    assert_eq!(keyed(&back), keyed(&set));
    let labels: Vec<bool> = back.test.iter().map(|t| t.is_defective()).collect();
    assert_eq!(labels.iter().filter(|&&l| l).count(), 4);
}

#[test]
fn layout_problems_are_reported() {
    let dir = tempfile::tempdir().unwrap();
    assert!(matches!(load_category(dir.path(), "absent", 32), Err(Error::Layout(_))));

    let set = common::small_set();
    write_category(&set, dir.path()).unwrap();
    let mask = dir.path().join("tiny/ground_truth/blob/000_mask.png");
    std::fs::remove_file(&mask).unwrap();
    match load_category(dir.path(), "tiny", 32) {
        Err(Error::Dataset(msg)) => assert!(msg.contains("000_mask.png"), "{msg}"),
        other => panic!("expected a dataset error, got {:?}", other.map(|s| s.name)),
    }
}

#[test]
fn mask_dimension_mismatch_is_an_error() {
    let dir = tempfile::tempdir().unwrap();
    write_category(&common::small_set(), dir.path()).unwrap();
    GrayImage::new(7, 7)
        .save(dir.path().join("tiny/ground_truth/blob/000_mask.png"))
        .unwrap();
    assert!(matches!(load_category(dir.path(), "tiny", 32), Err(Error::Dataset(_))));
}

#[test]
fn large_and_grayscale_images_are_resized_to_rgb() {
    let dir = tempfile::tempdir().unwrap();
    let big = dir.path().join("big.png");
    RgbImage::from_fn(1024, 1024, |x, _| Rgb([(x / 4) as u8, 100, 200])).save(&big).unwrap();
    let t = ImageSource::File(big).load(256).unwrap();
    assert_eq!((t.channels, t.height, t.width), (3, 256, 256));
    assert!(t.data.iter().all(|v| (0.0..=1.0).contains(v)));

    let gray = dir.path().join("gray.png");
    GrayImage::from_pixel(40, 40, Luma([128])).save(&gray).unwrap();
    let g = ImageSource::File(gray).load(32).unwrap();
    assert_eq!(g.channels, 3);
    let hw = 32 * 32;
    assert_eq!(&g.data[..hw], &g.data[hw..2 * hw]);

    let broken = dir.path().join("broken.png");
    std::fs::write(&broken, b"not a png").unwrap();
    assert!(ImageSource::File(broken).load(32).is_err());
}
