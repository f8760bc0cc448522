use std::f64::consts::TAU;
use std::sync::Arc;

use image::{Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{CategorySet, ImageSource, MaskSource, TestSample, GOOD};
use crate::error::{Error, Result};
use crate::metrics::BinaryMask;

/// Background: an oriented sinusoid over a base color plus per-pixel noise.
/// Every image draws a fresh phase, so backgrounds shift but share statistics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TextureSpec {
    /// Wavelength in pixels.
    pub period: f64,
    pub angle_deg: f64,
    pub amplitude: f64,
    /// Half-width of the uniform per-pixel noise.
    pub noise: f64,
    pub base: [f64; 3],
}

impl Default for TextureSpec {
    fn default() -> Self {
        Self {
            period: 12.0,
            angle_deg: 30.0,
            amplitude: 0.2,
            noise: 0.04,
            base: [0.45, 0.5, 0.55],
        }
    }
}

/// Disk-shaped blobs painted flat at `base +/- intensity_delta`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DefectSpec {
    pub min_blobs: usize,
    pub max_blobs: usize,
    pub min_radius: usize,
    pub max_radius: usize,
    pub intensity_delta: f64,
}

impl Default for DefectSpec {
    fn default() -> Self {
        Self {
            min_blobs: 1,
            max_blobs: 2,
            min_radius: 4,
            max_radius: 8,
            intensity_delta: 0.35,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub name: String,
    pub image_size: usize,
    pub texture: TextureSpec,
    pub defect: DefectSpec,
    pub train_count: usize,
    pub test_good: usize,
    pub test_defect: usize,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            name: "synthetic".into(),
            image_size: 64,
            texture: TextureSpec::default(),
            defect: DefectSpec::default(),
            train_count: 80,
            test_good: 20,
            test_defect: 20,
            seed: 11,
        }
    }
}

/// Label given to synthetic defective test images.
pub const BLOB: &str = "blob";

impl SynthSpec {
    fn validate(&self) -> Result<()> {
        let d = &self.defect;
        let problem = if self.image_size < 8 {
            Some("image size must be at least 8".to_string())
        } else if self.train_count == 0 {
            Some("no training images requested".into())
        } else if self.test_good == 0 || self.test_defect == 0 {
            Some("both good and defective test images are required".into())
        } else if d.min_blobs == 0 || d.min_blobs > d.max_blobs {
            Some(format!("blob count range {}..={} is empty or zero", d.min_blobs, d.max_blobs))
        } else if d.min_radius == 0 || d.min_radius > d.max_radius || 2 * d.max_radius + 2 > self.image_size {
            Some(format!("radius range {}..={} does not fit the image", d.min_radius, d.max_radius))
        } else if !(self.texture.period > 0.0) {
            Some("texture period must be positive".into())
        } else {
            None
        };
        problem.map_or(Ok(()), |p| Err(Error::Usage(format!("synthetic spec: {p}"))))
    }
}

/// Three well-separated oriented textures for teacher pretraining.
pub fn structured_texture_classes(seed: u64) -> Vec<SynthSpec> {
    let class = |name: &str, period: f64, angle_deg: f64, base: [f64; 3], k: u64| SynthSpec {
        name: name.into(),
        texture: TextureSpec {
            period,
            angle_deg,
            amplitude: 0.25,
            noise: 0.05,
            base,
        },
        seed: seed.wrapping_add(k),
        ..SynthSpec::default()
    };
    vec![
        class("stripes-fine", 5.0, 0.0, [0.6, 0.45, 0.35], 1),
        class("stripes-wide", 16.0, 90.0, [0.35, 0.45, 0.6], 2),
        class("diagonal", 9.0, 45.0, [0.5, 0.55, 0.45], 3),
    ]
}

/// Classes that differ only in color and carry no spatial structure.
pub fn noise_texture_classes(seed: u64) -> Vec<SynthSpec> {
    structured_texture_classes(seed)
        .into_iter()
        .map(|mut spec| {
            spec.name = format!("noise-{}", spec.name);
            spec.texture.amplitude = 0.0;
            spec.texture.noise = 0.3;
            spec
        })
        .collect()
}

fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// One background image with a random phase drawn from `rng`.
pub fn render_texture(texture: &TextureSpec, size: usize, rng: &mut ChaCha8Rng) -> RgbImage {
    let phase = rng.random_range(0.0..TAU);
    let (s, c) = texture.angle_deg.to_radians().sin_cos();
    let k = TAU / texture.period;
    let mut img = RgbImage::new(size as u32, size as u32);
    for y in 0..size {
        for x in 0..size {
            let wave = texture.amplitude * (k * (x as f64 * c + y as f64 * s) + phase).sin();
            let mut px = [0u8; 3];
            for (ch, v) in px.iter_mut().enumerate() {
                let noise = if texture.noise > 0.0 {
                    rng.random_range(-texture.noise..=texture.noise)
                } else {
                    0.0
                };
                *v = to_u8(texture.base[ch] + wave + noise);
            }
            img.put_pixel(x as u32, y as u32, Rgb(px));
        }
    }
    img
}

/// Pixels `(x, y)` with `(x - cx)^2 + (y - cy)^2 <= r^2`.
pub fn rasterize_disk(width: usize, height: usize, cx: usize, cy: usize, radius: usize) -> BinaryMask {
    let mut mask = BinaryMask::zeros(width, height);
    let r2 = (radius * radius) as i64;
    for y in 0..height {
        for x in 0..width {
            let (dx, dy) = (x as i64 - cx as i64, y as i64 - cy as i64);
            if dx * dx + dy * dy <= r2 {
                mask.set(x, y, true);
            }
        }
    }
    mask
}

fn paint_defects(img: &mut RgbImage, spec: &SynthSpec, rng: &mut ChaCha8Rng) -> BinaryMask {
    let size = spec.image_size;
    let d = &spec.defect;
    let mut mask = BinaryMask::zeros(size, size);
    for _ in 0..rng.random_range(d.min_blobs..=d.max_blobs) {
        let r = rng.random_range(d.min_radius..=d.max_radius);
        let cx = rng.random_range(r..size - r);
        let cy = rng.random_range(r..size - r);
        let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
        let fill = Rgb(spec.texture.base.map(|b| to_u8(b + sign * d.intensity_delta)));
        let disk = rasterize_disk(size, size, cx, cy, r);
        for (i, _) in disk.data.iter().enumerate().filter(|(_, &v)| v == 1) {
            img.put_pixel((i % size) as u32, (i / size) as u32, fill);
            mask.data[i] = 1;
        }
    }
    mask
}

/// Builds the whole category in memory. Identical specs give bit-identical
/// images and masks.
pub fn generate_synthetic(spec: &SynthSpec) -> Result<CategorySet> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let size = spec.image_size;
    let memory = |id: String, image: RgbImage| ImageSource::Memory {
        id,
        image: Arc::new(image),
    };
    let train = (0..spec.train_count)
        .map(|i| memory(format!("train/{GOOD}/{i:03}.png"), render_texture(&spec.texture, size, &mut rng)))
        .collect();
    let mut test = Vec::with_capacity(spec.test_good + spec.test_defect);
    for i in 0..spec.test_good {
        test.push(TestSample {
            image: memory(format!("test/{GOOD}/{i:03}.png"), render_texture(&spec.texture, size, &mut rng)),
            label: GOOD.into(),
            mask: None,
        });
    }
    for i in 0..spec.test_defect {
        let mut img = render_texture(&spec.texture, size, &mut rng);
        let mask = paint_defects(&mut img, spec, &mut rng);
        test.push(TestSample {
            image: memory(format!("test/{BLOB}/{i:03}.png"), img),
            label: BLOB.into(),
            mask: Some(MaskSource::Memory(mask)),
        });
    }
    Ok(CategorySet {
        name: spec.name.clone(),
        input_size: size,
        train,
        test,
    })
}

#[cfg(test)]
mod tests {
    use sha2::{Digest, Sha256};

    use super::*;

    fn checksum(set: &CategorySet) -> String {
        let mut h = Sha256::new();
        for src in set.train.iter().chain(set.test.iter().map(|t| &t.image)) {
            h.update(src.load_rgb().unwrap().as_raw());
        }
        for t in &set.test {
            if let Some(MaskSource::Memory(m)) = &t.mask {
                h.update(&m.data);
            }
        }
        hex::encode(h.finalize())
    }

    #[test]
    fn generation_is_deterministic() {
        let spec = SynthSpec {
            train_count: 5,
            test_good: 2,
            test_defect: 3,
            ..SynthSpec::default()
        };
        assert_eq!(checksum(&generate_synthetic(&spec).unwrap()), checksum(&generate_synthetic(&spec).unwrap()));
        let reseeded = SynthSpec { seed: 12, ..spec.clone() };
        assert_ne!(checksum(&generate_synthetic(&spec).unwrap()), checksum(&generate_synthetic(&reseeded).unwrap()));
    }

    #[test]
    fn disk_rasterization() {
        let m = rasterize_disk(64, 64, 20, 30, 5);
        // 81 lattice points with x^2 + y^2 <= 25
        assert_eq!(m.count(), 81);
        assert!(m.get(25, 30) && m.get(20, 25) && m.get(23, 34));
        assert!(!m.get(24, 34) && !m.get(26, 30));
    }

    #[test]
    fn masks_cover_exactly_the_painted_blobs() {
        let spec = SynthSpec {
            texture: TextureSpec {
                amplitude: 0.0,
                noise: 0.0,
                ..TextureSpec::default()
            },
            ..SynthSpec::default()
        };
        let set = generate_synthetic(&spec).unwrap();
        let flat = set.test[0].image.load_rgb().unwrap();
        let background = *flat.get_pixel(0, 0);
        for t in &set.test {
            let img = t.image.load_rgb().unwrap();
            let mask = match &t.mask {
                Some(MaskSource::Memory(m)) => m.clone(),
                _ => BinaryMask::zeros(64, 64),
            };
            assert_eq!(t.is_defective(), mask.any());
            for (i, px) in img.pixels().enumerate() {
                assert_eq!(*px != background, mask.data[i] == 1);
            }
        }
    }

    #[test]
    fn zero_counts_are_rejected() {
        let spec = SynthSpec {
            test_defect: 0,
            ..SynthSpec::default()
        };
        assert!(matches!(generate_synthetic(&spec), Err(Error::Usage(_))));
    }
}
