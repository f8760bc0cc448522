//! Anomaly maps: per-level discrepancy grids, bilinear upsampling to the input
//! resolution, fusion by element-wise product and the max-score image rule.

use std::io::{Read, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backbone::{extract_pyramid, NetworkHandle, PyramidConfig};
use crate::distill::position_losses;
use crate::error::{Error, Result};
use crate::tensor::{FeatureMap, FeaturePyramid, ImageTensor};

/// A row-major grid of real values.
#[derive(Clone, Debug, PartialEq)]
pub struct Grid {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

impl Grid {
    pub fn new(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::Dimension(format!(
                "grid buffer of length {} does not match {width}x{height}",
                data.len()
            )));
        }
        Ok(Self { width, height, data })
    }

    pub fn filled(width: usize, height: usize, value: f64) -> Self {
        Self {
            width,
            height,
            data: vec![value; width * height],
        }
    }

    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.data[y * self.width + x]
    }

    pub fn min(&self) -> f64 {
        self.data.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max(&self) -> f64 {
        self.data.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }
}

/// Fused per-pixel anomaly scores of one image.
#[derive(Clone, Debug, PartialEq)]
pub struct AnomalyMap {
    pub width: usize,
    pub height: usize,
    pub scores: Vec<f64>,
    /// Upsampled per-level maps, kept only on request.
    pub per_level: Option<Vec<Grid>>,
    /// Dimensions of the image before it was resized for the network.
    pub source_size: Option<(usize, usize)>,
    pub source_id: Option<String>,
}

impl AnomalyMap {
    pub fn new(width: usize, height: usize, scores: Vec<f64>) -> Result<Self> {
        if scores.len() != width * height {
            return Err(Error::Dimension(format!(
                "anomaly map of length {} does not match {width}x{height}",
                scores.len()
            )));
        }
        Ok(Self {
            width,
            height,
            scores,
            per_level: None,
            source_size: None,
            source_id: None,
        })
    }

    /// The exact maximum of the map.
    pub fn max_score(&self) -> f64 {
        self.scores.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    /// Position `(x, y)` of the first maximum in raster order.
    pub fn argmax(&self) -> (usize, usize) {
        let mut best = 0;
        for (i, &s) in self.scores.iter().enumerate() {
            if s > self.scores[best] {
                best = i;
            }
        }
        (best % self.width, best / self.width)
    }

    pub fn as_grid(&self) -> Grid {
        Grid {
            width: self.width,
            height: self.height,
            data: self.scores.clone(),
        }
    }
}

/// Per-position loss grid of one pyramid level.
pub fn level_map(f_t: &FeatureMap, f_s: &FeatureMap) -> Result<Grid> {
    let data = position_losses(f_t, f_s)?;
    Grid::new(f_t.width, f_t.height, data)
}

/// Bilinear resize with half-pixel centers; border samples clamp to the edge.
pub fn upsample(grid: &Grid, width: usize, height: usize) -> Result<Grid> {
    if width < grid.width || height < grid.height {
        return Err(Error::Usage(format!(
            "cannot upsample {}x{} to the smaller {width}x{height}",
            grid.width, grid.height
        )));
    }
    if grid.width == 0 || grid.height == 0 {
        return Err(Error::Usage("cannot upsample an empty grid".into()));
    }
    let taps = |out: usize, inp: usize| -> Vec<(usize, usize, f64)> {
        let scale = inp as f64 / out as f64;
        (0..out)
            .map(|o| {
                let src = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (inp - 1) as f64);
                let lo = src.floor() as usize;
                let hi = (lo + 1).min(inp - 1);
                (lo, hi, src - lo as f64)
            })
            .collect()
    };
    let xs = taps(width, grid.width);
    let ys = taps(height, grid.height);
    let mut data = Vec::with_capacity(width * height);
    for &(y0, y1, fy) in &ys {
        for &(x0, x1, fx) in &xs {
            let top = grid.get(x0, y0) * (1.0 - fx) + grid.get(x1, y0) * fx;
            let bottom = grid.get(x0, y1) * (1.0 - fx) + grid.get(x1, y1) * fx;
            data.push(top * (1.0 - fy) + bottom * fy);
        }
    }
    Ok(Grid { width, height, data })
}

/// Element-wise product of equally sized grids.
pub fn fuse(maps: &[Grid]) -> Result<AnomalyMap> {
    let first = maps
        .first()
        .ok_or_else(|| Error::Usage("nothing to fuse".into()))?;
    let mut scores = first.data.clone();
    for (i, m) in maps.iter().enumerate().skip(1) {
        if (m.width, m.height) != (first.width, first.height) {
            return Err(Error::Dimension(format!(
                "level {i} is {}x{}, level 0 is {}x{}",
                m.width, m.height, first.width, first.height
            )));
        }
        for (s, v) in scores.iter_mut().zip(&m.data) {
            *s *= v;
        }
    }
    AnomalyMap::new(first.width, first.height, scores)
}

/// Separable Gaussian blur with edge clamping.
pub fn gaussian_smooth(grid: &Grid, sigma: f64) -> Result<Grid> {
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(Error::Usage(format!("smoothing sigma {sigma} must be positive")));
    }
    let radius = (3.0 * sigma).ceil() as isize;
    let mut kernel: Vec<f64> = (-radius..=radius)
        .map(|i| (-((i * i) as f64) / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = kernel.iter().sum();
    kernel.iter_mut().for_each(|k| *k /= total);
    let (w, h) = (grid.width as isize, grid.height as isize);
    let pass = |src: &[f64], horizontal: bool| -> Vec<f64> {
        let mut out = vec![0.0; src.len()];
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for (k, weight) in kernel.iter().enumerate() {
                    let off = k as isize - radius;
                    let (sx, sy) = if horizontal {
                        ((x + off).clamp(0, w - 1), y)
                    } else {
                        (x, (y + off).clamp(0, h - 1))
                    };
                    acc += weight * src[(sy * w + sx) as usize];
                }
                out[(y * w + x) as usize] = acc;
            }
        }
        out
    };
    let data = pass(&pass(&grid.data, true), false);
    Grid::new(grid.width, grid.height, data)
}

/// Knobs for map construction.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScoreOptions {
    /// Keep the upsampled per-level maps on the result.
    pub keep_levels: bool,
    /// Gaussian smoothing of the fused map; `None` leaves it untouched.
    pub smoothing_sigma: Option<f64>,
}

/// Builds the fused map of one image from its two pyramids.
pub fn map_from_pyramids(
    teacher: &FeaturePyramid,
    student: &FeaturePyramid,
    width: usize,
    height: usize,
    options: &ScoreOptions,
) -> Result<AnomalyMap> {
    if teacher.len() != student.len() {
        return Err(Error::Config(format!(
            "teacher pyramid has {} levels, student pyramid {}",
            teacher.len(),
            student.len()
        )));
    }
    let levels = teacher
        .levels
        .iter()
        .zip(&student.levels)
        .map(|(t, s)| upsample(&level_map(t, s)?, width, height))
        .collect::<Result<Vec<_>>>()?;
    let mut map = fuse(&levels)?;
    if let Some(sigma) = options.smoothing_sigma {
        map.scores = gaussian_smooth(&map.as_grid(), sigma)?.data;
    }
    if options.keep_levels {
        map.per_level = Some(levels);
    }
    Ok(map)
}

/// Anomaly map and image score (the map's maximum) of one image.
pub fn score_image(
    teacher: &NetworkHandle,
    student: &NetworkHandle,
    image: &ImageTensor,
    config: &PyramidConfig,
) -> Result<(AnomalyMap, f64)> {
    let mut out = score_images(teacher, student, std::slice::from_ref(image), config, &ScoreOptions::default())?;
    Ok(out.pop().expect("one image in, one map out"))
}

/// Scores a batch; images are independent and processed in parallel.
pub fn score_images(
    teacher: &NetworkHandle,
    student: &NetworkHandle,
    images: &[ImageTensor],
    config: &PyramidConfig,
    options: &ScoreOptions,
) -> Result<Vec<(AnomalyMap, f64)>> {
    if teacher.architecture() != student.architecture() {
        return Err(Error::Config(format!(
            "teacher is `{}` but student is `{}`",
            teacher.architecture().id,
            student.architecture().id
        )));
    }
    let pt = extract_pyramid(teacher, images, config)?;
    let ps = extract_pyramid(student, images, config)?;
    images
        .par_iter()
        .zip(pt.par_iter().zip(&ps))
        .map(|(img, (t, s))| {
            let map = map_from_pyramids(t, s, img.width, img.height, options)?;
            let score = map.max_score();
            Ok((map, score))
        })
        .collect()
}

const MAP_MAGIC: &[u8; 8] = b"STFPMMAP";
const MAP_VERSION: u32 = 1;
const MAP_HEADER: usize = 32;

/// Writes the raw fused scores as a little-endian binary grid:
/// magic `STFPMMAP`, then version, width, height, source width, source
/// height (both 0 when unknown) and id length as `u32`, the UTF-8 source id,
/// then `width * height` `f64` values in row-major order.
pub fn write_map(path: impl AsRef<Path>, map: &AnomalyMap) -> Result<()> {
    let path = path.as_ref();
    let id = map.source_id.as_deref().unwrap_or("");
    let (sw, sh) = map.source_size.unwrap_or((0, 0));
    let mut buf = Vec::with_capacity(MAP_HEADER + id.len() + 8 * map.scores.len());
    buf.extend_from_slice(MAP_MAGIC);
    for v in [MAP_VERSION, map.width as u32, map.height as u32, sw as u32, sh as u32, id.len() as u32] {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    buf.extend_from_slice(id.as_bytes());
    for s in &map.scores {
        buf.extend_from_slice(&s.to_le_bytes());
    }
    let mut file = std::fs::File::create(path).map_err(|e| Error::file(path, e))?;
    file.write_all(&buf).map_err(|e| Error::file(path, e))
}

/// Reads a grid written by [`write_map`].
pub fn read_map(path: impl AsRef<Path>) -> Result<AnomalyMap> {
    let path = path.as_ref();
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::file(path, e))?;
    let bad = |what: &str| Error::Dataset(format!("{}: {what}", path.display()));
    if bytes.len() < MAP_HEADER || &bytes[..8] != MAP_MAGIC {
        return Err(bad("not an anomaly map file"));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[8 + 4 * i..12 + 4 * i].try_into().expect("4 bytes")) as usize;
    if word(0) != MAP_VERSION as usize {
        return Err(bad("unsupported map version"));
    }
    let (width, height, id_len) = (word(1), word(2), word(5));
    let body = MAP_HEADER + id_len;
    if bytes.len() != body + 8 * width * height {
        return Err(bad("truncated anomaly map"));
    }
    let id = String::from_utf8(bytes[MAP_HEADER..body].to_vec()).map_err(|_| bad("source id is not UTF-8"))?;
    let scores = bytes[body..]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    let mut map = AnomalyMap::new(width, height, scores)?;
    map.source_id = (!id.is_empty()).then_some(id);
    map.source_size = (word(3) > 0 && word(4) > 0).then(|| (word(3), word(4)));
    Ok(map)
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn random_grid(rng: &mut ChaCha8Rng, w: usize, h: usize) -> Grid {
        Grid::new(w, h, (0..w * h).map(|_| rng.random::<f64>()).collect()).unwrap()
    }

    /// Textbook bilinear resize with pixel centers at `i + 0.5`.
    fn reference_bilinear(src: &[[f64; 2]; 2], out: usize) -> Vec<f64> {
        let mut v = Vec::new();
        for oy in 0..out {
            for ox in 0..out {
                let sy = ((oy as f64 + 0.5) * 2.0 / out as f64 - 0.5).clamp(0.0, 1.0);
                let sx = ((ox as f64 + 0.5) * 2.0 / out as f64 - 0.5).clamp(0.0, 1.0);
                let a = src[0][0] * (1.0 - sx) + src[0][1] * sx;
                let b = src[1][0] * (1.0 - sx) + src[1][1] * sx;
                v.push(a * (1.0 - sy) + b * sy);
            }
        }
        v
    }

    #[test]
    fn upsample_matches_reference() {
        let g = Grid::new(2, 2, vec![0.0, 1.0, 1.0, 0.0]).unwrap();
        let up = upsample(&g, 4, 4).unwrap();
        let want = reference_bilinear(&[[0.0, 1.0], [1.0, 0.0]], 4);
        for (a, b) in up.data.iter().zip(&want) {
            assert!((a - b).abs() < 1e-12);
        }
        assert_eq!(up.data[..4], [0.0, 0.25, 0.75, 1.0]);
    }

    #[test]
    fn upsample_constants_and_bounds() {
        let c = upsample(&Grid::filled(3, 5, 0.3), 17, 40).unwrap();
        assert!(c.data.iter().all(|&v| (v - 0.3).abs() < 1e-15));
        let one = upsample(&Grid::filled(1, 1, 0.7), 9, 4).unwrap();
        assert!(one.data.iter().all(|&v| v == 0.7));
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let g = random_grid(&mut rng, 4, 3);
        let up = upsample(&g, 13, 16).unwrap();
        assert!(up.min() >= g.min() && up.max() <= g.max());
        assert!(matches!(upsample(&g, 3, 16), Err(Error::Usage(_))));
    }

    #[test]
    fn fusion_is_product() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let grids: Vec<Grid> = (0..3).map(|_| random_grid(&mut rng, 4, 4)).collect();
        let fused = fuse(&grids).unwrap();
        for i in 0..16 {
            let want = grids[0].data[i] * grids[1].data[i] * grids[2].data[i];
            assert!((fused.scores[i] - want).abs() < 1e-9);
        }
        assert_eq!(fuse(&grids[..1]).unwrap().scores, grids[0].data);
        let mut zeroed = grids.clone();
        zeroed[1].data[5] = 0.0;
        assert_eq!(fuse(&zeroed).unwrap().scores[5], 0.0);
        let odd = vec![grids[0].clone(), Grid::filled(2, 2, 1.0)];
        assert!(matches!(fuse(&odd), Err(Error::Dimension(_))));
    }

    #[test]
    fn level_map_mean_is_level_loss() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mk = |rng: &mut ChaCha8Rng| FeatureMap::new(5, 3, 4, (0..60).map(|_| rng.random::<f32>()).collect()).unwrap();
        let (a, b) = (mk(&mut rng), mk(&mut rng));
        let grid = level_map(&a, &b).unwrap();
        let mean = grid.data.iter().sum::<f64>() / grid.data.len() as f64;
        assert!((mean - crate::distill::level_loss(&a, &b).unwrap()).abs() < 1e-12);
        assert!(level_map(&a, &a).unwrap().data.iter().all(|&v| v.abs() < 1e-12));
    }

    #[test]
    fn smoothing_preserves_constants() {
        let g = Grid::filled(6, 4, 0.2);
        let s = gaussian_smooth(&g, 1.5).unwrap();
        assert!(s.data.iter().all(|&v| (v - 0.2).abs() < 1e-12));
    }

    #[test]
    fn map_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut map = AnomalyMap::new(3, 2, vec![0.0, 0.1, 0.5, 1e-9, 0.25, 0.75]).unwrap();
        map.source_id = Some("bottle/test/crack/003.png".into());
        let path = dir.path().join("m.bin");
        write_map(&path, &map).unwrap();
        assert_eq!(read_map(&path).unwrap(), map);
        map.source_size = Some((900, 600));
        write_map(&path, &map).unwrap();
        assert_eq!(read_map(&path).unwrap(), map);
        std::fs::write(&path, b"STFPMMAP\x01\0\0\0").unwrap();
        assert!(matches!(read_map(&path), Err(Error::Dataset(_))));
    }
}
