//! Heatmaps and overlays for qualitative inspection. Colors are normalized
//! per image; numeric exports elsewhere stay raw.

use std::io::BufWriter;
use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};

use crate::error::{Error, Result};
use crate::metrics::BinaryMask;
use crate::scorer::{AnomalyMap, Grid};

/// Piecewise-linear blue-cyan-yellow-red ramp over `t` in `[0, 1]`.
pub fn colormap(t: f64) -> [u8; 3] {
    const STOPS: [(f64, [f64; 3]); 5] = [
        (0.0, [0.0, 0.0, 0.5]),
        (0.25, [0.0, 0.3, 1.0]),
        (0.5, [0.0, 1.0, 1.0]),
        (0.75, [1.0, 1.0, 0.0]),
        (1.0, [1.0, 0.0, 0.0]),
    ];
    let t = if t.is_nan() { 0.0 } else { t.clamp(0.0, 1.0) };
    let k = STOPS.iter().rposition(|(x, _)| *x <= t).unwrap_or(0).min(STOPS.len() - 2);
    let ((x0, c0), (x1, c1)) = (STOPS[k], STOPS[k + 1]);
    let f = (t - x0) / (x1 - x0);
    [0, 1, 2].map(|i| ((c0[i] + (c1[i] - c0[i]) * f) * 255.0).round() as u8)
}

/// Colors a grid after rescaling it to its own `[min, max]`.
pub fn heatmap(grid: &Grid) -> RgbImage {
    let (lo, hi) = (grid.min(), grid.max());
    let span = if hi > lo { hi - lo } else { 1.0 };
    RgbImage::from_fn(grid.width as u32, grid.height as u32, |x, y| {
        Rgb(colormap((grid.get(x as usize, y as usize) - lo) / span))
    })
}

/// Marks mask pixels that touch a pixel outside the mask (4-neighbourhood)
/// in red on a copy of `image`.
pub fn draw_contour(image: &RgbImage, mask: &BinaryMask) -> Result<RgbImage> {
    if (image.width() as usize, image.height() as usize) != (mask.width, mask.height) {
        return Err(Error::Dimension(format!(
            "image is {}x{}, mask is {}x{}",
            image.width(),
            image.height(),
            mask.width,
            mask.height
        )));
    }
    let mut out = image.clone();
    let (w, h) = (mask.width as isize, mask.height as isize);
    let inside = |x: isize, y: isize| x >= 0 && y >= 0 && x < w && y < h && mask.get(x as usize, y as usize);
    for y in 0..h {
        for x in 0..w {
            if inside(x, y) && [(1, 0), (-1, 0), (0, 1), (0, -1)].iter().any(|(dx, dy)| !inside(x + dx, y + dy)) {
                out.put_pixel(x as u32, y as u32, Rgb([255, 0, 0]));
            }
        }
    }
    Ok(out)
}

/// Saves an RGB PNG with a `Source` text chunk naming the scored image.
pub fn save_png_tagged(image: &RgbImage, source_id: Option<&str>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = std::fs::File::create(path).map_err(|e| Error::file(path, e))?;
    let mut encoder = png::Encoder::new(BufWriter::new(file), image.width(), image.height());
    encoder.set_color(png::ColorType::Rgb);
    encoder.set_depth(png::BitDepth::Eight);
    let encode_err = |e: png::EncodingError| match e {
        png::EncodingError::IoError(io) => Error::file(path, io),
        other => Error::Dataset(format!("{}: {other}", path.display())),
    };
    if let Some(id) = source_id {
        encoder.add_text_chunk("Source".into(), id.into()).map_err(encode_err)?;
    }
    let mut writer = encoder.write_header().map_err(encode_err)?;
    writer.write_image_data(image.as_raw()).map_err(encode_err)?;
    writer.finish().map_err(encode_err)
}

/// Writes the column images for one scored input: the input with its
/// ground-truth contour (only when a mask is given), one heatmap per
/// retained level, then the fused heatmap. Returns the written paths in
/// column order.
pub fn write_columns(
    input: &RgbImage,
    map: &AnomalyMap,
    mask: Option<&BinaryMask>,
    dir: impl AsRef<Path>,
    stem: &str,
) -> Result<Vec<PathBuf>> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| Error::file(dir, e))?;
    let id = map.source_id.as_deref();
    let mut written = Vec::new();
    let mut emit = |name: String, img: &RgbImage| -> Result<()> {
        let path = dir.join(name);
        save_png_tagged(img, id, &path)?;
        written.push(path);
        Ok(())
    };
    if let Some(mask) = mask {
        emit(format!("{stem}_0_contour.png"), &draw_contour(input, mask)?)?;
    }
    for (l, level) in map.per_level.iter().flatten().enumerate() {
        emit(format!("{stem}_{}_level{}.png", l + 1, l + 1), &heatmap(level))?;
    }
    let levels = map.per_level.as_ref().map_or(0, Vec::len);
    emit(format!("{stem}_{}_fused.png", levels + 1), &heatmap(&map.as_grid()))?;
    Ok(written)
}
