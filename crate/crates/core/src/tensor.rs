//! Dense containers shared by the network, the loss and the scorer.

use std::fmt::Debug;
use std::iter::Sum;

use num_traits::Float;

use crate::error::{Error, Result};

/// Scalar type accepted by the loss and scoring code.
pub trait Real: Float + Sum + Debug + Send + Sync + 'static {}

impl<T> Real for T where T: Float + Sum + Debug + Send + Sync + 'static {}

/// Batch of feature maps in NCHW order.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: [usize; 4],
    data: Vec<f32>,
}

impl Tensor {
    pub fn zeros(shape: [usize; 4]) -> Self {
        Self {
            shape,
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn from_vec(shape: [usize; 4], data: Vec<f32>) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "tensor data does not match shape {shape:?}"
        );
        Self { shape, data }
    }

    pub fn shape(&self) -> [usize; 4] {
        self.shape
    }

    pub fn batch(&self) -> usize {
        self.shape[0]
    }

    pub fn channels(&self) -> usize {
        self.shape[1]
    }

    pub fn height(&self) -> usize {
        self.shape[2]
    }

    pub fn width(&self) -> usize {
        self.shape[3]
    }

    /// Number of values held by one image of the batch.
    pub fn image_len(&self) -> usize {
        self.shape[1] * self.shape[2] * self.shape[3]
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f32> {
        self.data
    }

    pub fn image(&self, n: usize) -> &[f32] {
        let len = self.image_len();
        &self.data[n * len..(n + 1) * len]
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += *b;
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Splits the batch into one feature map per image.
    pub fn to_feature_maps(&self) -> Vec<FeatureMap<f32>> {
        let [n, c, h, w] = self.shape;
        (0..n)
            .map(|i| FeatureMap {
                channels: c,
                height: h,
                width: w,
                data: self.image(i).to_vec(),
            })
            .collect()
    }

    /// Stacks equally shaped maps into a batch.
    pub fn from_feature_maps(maps: &[FeatureMap<f32>]) -> Result<Self> {
        let first = maps
            .first()
            .ok_or_else(|| Error::Usage("cannot stack an empty list of feature maps".into()))?;
        let shape = [maps.len(), first.channels, first.height, first.width];
        let mut data = Vec::with_capacity(shape.iter().product());
        for m in maps {
            if m.shape() != first.shape() {
                return Err(Error::Dimension(format!(
                    "cannot stack feature maps of shapes {:?} and {:?}",
                    first.shape(),
                    m.shape()
                )));
            }
            data.extend_from_slice(&m.data);
        }
        Ok(Self { shape, data })
    }
}

/// An RGB image with values in [0, 1], stored channel-major (CHW).
///
/// Normalization with the teacher's channel statistics happens inside the
/// network handle, so images stay in display range everywhere else.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageTensor {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl ImageTensor {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != channels * height * width {
            return Err(Error::Dimension(format!(
                "image buffer of length {} does not match {channels}x{height}x{width}",
                data.len()
            )));
        }
        Ok(Self {
            channels,
            height,
            width,
            data,
        })
    }

    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self {
            channels,
            height,
            width,
            data: vec![0.0; channels * height * width],
        }
    }

    pub fn from_rgb8(img: &image::RgbImage) -> Self {
        let (w, h) = img.dimensions();
        let (w, h) = (w as usize, h as usize);
        let mut data = vec![0.0f32; 3 * h * w];
        for (x, y, px) in img.enumerate_pixels() {
            let p = y as usize * w + x as usize;
            for c in 0..3 {
                data[c * h * w + p] = f32::from(px[c]) / 255.0;
            }
        }
        Self {
            channels: 3,
            height: h,
            width: w,
            data,
        }
    }

    /// Stacks images into an NCHW batch.
    pub fn stack(images: &[ImageTensor]) -> Result<Tensor> {
        let first = images
            .first()
            .ok_or_else(|| Error::Usage("empty image batch".into()))?;
        let mut data = Vec::with_capacity(images.len() * first.data.len());
        for img in images {
            if (img.channels, img.height, img.width) != (first.channels, first.height, first.width)
            {
                return Err(Error::Dimension(format!(
                    "batch mixes image sizes {}x{}x{} and {}x{}x{}",
                    first.channels, first.height, first.width, img.channels, img.height, img.width
                )));
            }
            data.extend_from_slice(&img.data);
        }
        Ok(Tensor::from_vec(
            [images.len(), first.channels, first.height, first.width],
            data,
        ))
    }
}

/// One pyramid level for one image: `channels` values at each of
/// `height * width` positions, stored channel-major.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap<T = f32> {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<T>,
}

impl<T: Real> FeatureMap<T> {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != channels * height * width {
            return Err(Error::Dimension(format!(
                "feature buffer of length {} does not match {channels}x{height}x{width}",
                data.len()
            )));
        }
        Ok(Self {
            channels,
            height,
            width,
            data,
        })
    }

    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self {
            channels,
            height,
            width,
            data: vec![T::zero(); channels * height * width],
        }
    }

    /// (channels, height, width)
    pub fn shape(&self) -> (usize, usize, usize) {
        (self.channels, self.height, self.width)
    }

    pub fn positions(&self) -> usize {
        self.height * self.width
    }

    /// Feature vector at row `y`, column `x`.
    pub fn vector(&self, y: usize, x: usize) -> Vec<T> {
        let hw = self.positions();
        let p = y * self.width + x;
        (0..self.channels).map(|c| self.data[c * hw + p]).collect()
    }

    pub fn set_vector(&mut self, y: usize, x: usize, v: &[T]) {
        assert_eq!(v.len(), self.channels);
        let hw = self.positions();
        let p = y * self.width + x;
        for (c, &value) in v.iter().enumerate() {
            self.data[c * hw + p] = value;
        }
    }

    pub fn map<U: Real>(&self, f: impl Fn(T) -> U) -> FeatureMap<U> {
        FeatureMap {
            channels: self.channels,
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }
}

/// Ordered per-level feature maps of one image, shallow to deep.
#[derive(Clone, Debug, PartialEq)]
pub struct FeaturePyramid<T = f32> {
    pub levels: Vec<FeatureMap<T>>,
}

impl<T: Real> FeaturePyramid<T> {
    pub fn new(levels: Vec<FeatureMap<T>>) -> Self {
        Self { levels }
    }

    pub fn len(&self) -> usize {
        self.levels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.levels.is_empty()
    }

    pub fn shapes(&self) -> Vec<(usize, usize, usize)> {
        self.levels.iter().map(FeatureMap::shape).collect()
    }
}
