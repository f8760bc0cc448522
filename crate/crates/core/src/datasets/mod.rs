//! Category datasets in the MVTec directory layout, plus the deterministic
//! synthetic generator and toy teacher used for desk-scale runs.
//!
//! Layout:
//!
//! ```text
//! <root>/<category>/train/good/*.png
//! <root>/<category>/test/<defect_type>/*.png
//! <root>/<category>/ground_truth/<defect_type>/<stem>_mask.png
//! ```

mod pretrain;
mod synth;

pub use pretrain::{pretrain_toy_teacher, PretrainOptions, PretrainedTeacher};
pub use synth::{
    generate_synthetic, noise_texture_classes, rasterize_disk, render_texture, structured_texture_classes, DefectSpec,
    SynthSpec, TextureSpec, BLOB,
};

use std::path::{Path, PathBuf};
use std::sync::Arc;

use image::imageops::{self, FilterType};
use image::{GrayImage, RgbImage};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::metrics::BinaryMask;
use crate::tensor::ImageTensor;

pub const GOOD: &str = "good";

/// Where an image comes from; decoded on demand.
#[derive(Clone, Debug, PartialEq)]
pub enum ImageSource {
    File(PathBuf),
    Memory { id: String, image: Arc<RgbImage> },
}

impl ImageSource {
    pub fn id(&self) -> String {
        match self {
            ImageSource::File(p) => p.display().to_string(),
            ImageSource::Memory { id, .. } => id.clone(),
        }
    }

    /// Decodes at native resolution; grayscale is replicated to RGB.
    pub fn load_rgb(&self) -> Result<RgbImage> {
        match self {
            ImageSource::File(p) => Ok(image::open(p)
                .map_err(|e| Error::Dataset(format!("{}: {e}", p.display())))?
                .to_rgb8()),
            ImageSource::Memory { image, .. } => Ok(image.as_ref().clone()),
        }
    }

    pub fn dimensions(&self) -> Result<(u32, u32)> {
        match self {
            ImageSource::File(p) => {
                image::image_dimensions(p).map_err(|e| Error::Dataset(format!("{}: {e}", p.display())))
            }
            ImageSource::Memory { image, .. } => Ok(image.dimensions()),
        }
    }

    /// Decodes and resizes (bilinear) to a square `size` image in `[0, 1]`.
    pub fn load(&self, size: usize) -> Result<ImageTensor> {
        let img = self.load_rgb()?;
        Ok(ImageTensor::from_rgb8(&resize_rgb(&img, size)))
    }
}

pub(crate) fn resize_rgb(img: &RgbImage, size: usize) -> RgbImage {
    let s = size as u32;
    if img.dimensions() == (s, s) {
        img.clone()
    } else {
        imageops::resize(img, s, s, FilterType::Triangle)
    }
}

/// Where a ground-truth mask comes from.
#[derive(Clone, Debug, PartialEq)]
pub enum MaskSource {
    File(PathBuf),
    Memory(BinaryMask),
}

impl MaskSource {
    /// Loads, resizes with nearest neighbour and binarizes at one half.
    pub fn load(&self, size: usize) -> Result<BinaryMask> {
        let gray = match self {
            MaskSource::File(p) => image::open(p)
                .map_err(|e| Error::Dataset(format!("{}: {e}", p.display())))?
                .to_luma8(),
            MaskSource::Memory(m) => {
                if (m.width, m.height) == (size, size) {
                    return Ok(m.clone());
                }
                GrayImage::from_raw(m.width as u32, m.height as u32, m.data.iter().map(|&v| v * 255).collect())
                    .expect("buffer matches dimensions")
            }
        };
        let s = size as u32;
        let gray = if gray.dimensions() == (s, s) {
            gray
        } else {
            imageops::resize(&gray, s, s, FilterType::Nearest)
        };
        BinaryMask::new(size, size, gray.pixels().map(|p| u8::from(p.0[0] >= 128)).collect())
    }
}

/// One test image with its defect type and, for defective images, a mask.
#[derive(Clone, Debug, PartialEq)]
pub struct TestSample {
    pub image: ImageSource,
    pub label: String,
    pub mask: Option<MaskSource>,
}

impl TestSample {
    pub fn is_defective(&self) -> bool {
        self.label != GOOD
    }
}

/// Train and test images of one category. Train images are all defect-free.
#[derive(Clone, Debug, PartialEq)]
pub struct CategorySet {
    pub name: String,
    pub input_size: usize,
    pub train: Vec<ImageSource>,
    pub test: Vec<TestSample>,
}

impl CategorySet {
    /// Distinct test labels, sorted.
    pub fn defect_types(&self) -> Vec<String> {
        let set: std::collections::BTreeSet<&str> = self.test.iter().map(|t| t.label.as_str()).collect();
        set.into_iter().map(String::from).collect()
    }

    pub fn load_images(sources: &[ImageSource], size: usize) -> Result<Vec<ImageTensor>> {
        sources.par_iter().map(|s| s.load(size)).collect()
    }

    pub fn load_train(&self) -> Result<Vec<ImageTensor>> {
        Self::load_images(&self.train, self.input_size)
    }

    /// Test images with their masks; defect-free images get an all-zero mask.
    pub fn load_test(&self) -> Result<Vec<(ImageTensor, BinaryMask)>> {
        let size = self.input_size;
        self.test
            .par_iter()
            .map(|t| {
                let img = t.image.load(size)?;
                let mask = match &t.mask {
                    Some(m) => m.load(size)?,
                    None if t.is_defective() => {
                        return Err(Error::Dataset(format!("defective image {} has no mask", t.image.id())))
                    }
                    None => BinaryMask::zeros(size, size),
                };
                Ok((img, mask))
            })
            .collect()
    }
}

fn png_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::file(dir, e))?
        .filter_map(|entry| entry.ok().map(|e| e.path()))
        .filter(|p| {
            p.is_file()
                && p.extension()
                    .and_then(|e| e.to_str())
                    .is_some_and(|e| e.eq_ignore_ascii_case("png"))
        })
        .collect();
    files.sort();
    Ok(files)
}

fn subdirs(dir: &Path) -> Result<Vec<String>> {
    let mut names: Vec<String> = std::fs::read_dir(dir)
        .map_err(|e| Error::file(dir, e))?
        .filter_map(|entry| entry.ok())
        .filter(|e| e.path().is_dir())
        .filter_map(|e| e.file_name().into_string().ok())
        .collect();
    names.sort();
    Ok(names)
}

/// Indexes one category directory. Images are decoded later, at `input_size`.
pub fn load_category(root: impl AsRef<Path>, name: &str, input_size: usize) -> Result<CategorySet> {
    let base = root.as_ref().join(name);
    let train_dir = base.join("train").join(GOOD);
    let test_dir = base.join("test");
    if !train_dir.is_dir() || !test_dir.is_dir() {
        return Err(Error::Layout(format!(
            "{} lacks train/{GOOD} or test directories",
            base.display()
        )));
    }
    if input_size == 0 {
        return Err(Error::Usage("input size must be positive".into()));
    }
    let train: Vec<ImageSource> = png_files(&train_dir)?.into_iter().map(ImageSource::File).collect();
    if train.is_empty() {
        return Err(Error::Dataset(format!("{} holds no training images", train_dir.display())));
    }
    let mut test = Vec::new();
    for label in subdirs(&test_dir)? {
        for file in png_files(&test_dir.join(&label))? {
            let mask = if label == GOOD {
                None
            } else {
                let stem = file.file_stem().and_then(|s| s.to_str()).unwrap_or_default();
                let mask_path = base.join("ground_truth").join(&label).join(format!("{stem}_mask.png"));
                if !mask_path.is_file() {
                    return Err(Error::Dataset(format!(
                        "missing mask {} for defective image {}",
                        mask_path.display(),
                        file.display()
                    )));
                }
                let img_dims = ImageSource::File(file.clone()).dimensions()?;
                let mask_dims = image::image_dimensions(&mask_path)
                    .map_err(|e| Error::Dataset(format!("{}: {e}", mask_path.display())))?;
                if img_dims != mask_dims {
                    return Err(Error::Dataset(format!(
                        "mask {} is {}x{} but image {} is {}x{}",
                        mask_path.display(),
                        mask_dims.0,
                        mask_dims.1,
                        file.display(),
                        img_dims.0,
                        img_dims.1
                    )));
                }
                Some(MaskSource::File(mask_path))
            };
            test.push(TestSample {
                image: ImageSource::File(file),
                label: label.clone(),
                mask,
            });
        }
    }
    if test.is_empty() {
        return Err(Error::Dataset(format!("{} holds no test images", test_dir.display())));
    }
    Ok(CategorySet {
        name: name.to_string(),
        input_size,
        train,
        test,
    })
}

fn save_png(img: &RgbImage, path: &Path) -> Result<()> {
    img.save(path).map_err(|e| match e {
        image::ImageError::IoError(io) => Error::file(path, io),
        other => Error::Image(other),
    })
}

/// Writes a category in the MVTec layout under `<root>/<name>`. Images are
/// stored at native resolution; masks as 0/255 grayscale.
pub fn write_category(set: &CategorySet, root: impl AsRef<Path>) -> Result<PathBuf> {
    let base = root.as_ref().join(&set.name);
    let mkdir = |p: &Path| std::fs::create_dir_all(p).map_err(|e| Error::file(p, e));
    let train_dir = base.join("train").join(GOOD);
    mkdir(&train_dir)?;
    for (i, src) in set.train.iter().enumerate() {
        save_png(&src.load_rgb()?, &train_dir.join(format!("{i:03}.png")))?;
    }
    let mut counters: std::collections::BTreeMap<&str, usize> = Default::default();
    for sample in &set.test {
        let idx = counters.entry(sample.label.as_str()).or_default();
        let stem = format!("{:03}", *idx);
        *idx += 1;
        let dir = base.join("test").join(&sample.label);
        mkdir(&dir)?;
        let img = sample.image.load_rgb()?;
        save_png(&img, &dir.join(format!("{stem}.png")))?;
        if sample.is_defective() {
            let mask = match &sample.mask {
                Some(MaskSource::Memory(m)) => m.clone(),
                Some(other) => other.load(img.width() as usize)?,
                None => {
                    return Err(Error::Dataset(format!(
                        "defective image {} has no mask",
                        sample.image.id()
                    )))
                }
            };
            let gt_dir = base.join("ground_truth").join(&sample.label);
            mkdir(&gt_dir)?;
            let gray = GrayImage::from_raw(mask.width as u32, mask.height as u32, mask.data.iter().map(|&v| v * 255).collect())
                .expect("buffer matches dimensions");
            let path = gt_dir.join(format!("{stem}_mask.png"));
            gray.save(&path).map_err(|e| match e {
                image::ImageError::IoError(io) => Error::file(&path, io),
                other => Error::Image(other),
            })?;
        }
    }
    Ok(base)
}
