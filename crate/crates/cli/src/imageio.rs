use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use image::imageops::FilterType;
use image::{ImageReader, RgbImage};

use semreq::{Image, TensorDims};

/// Loads an RGB file, resizing to the configured image size.
pub fn load(path: &Path, dims: &TensorDims) -> Result<Image> {
    if dims.channels != 3 {
        bail!(
            "file input needs 3 image channels, configured {}",
            dims.channels
        );
    }
    let rgb = ImageReader::open(path)
        .with_context(|| format!("opening {}", path.display()))?
        .decode()
        .with_context(|| format!("decoding {}", path.display()))?
        .to_rgb8();
    let (w, h) = (dims.width as u32, dims.height as u32);
    let rgb = if rgb.dimensions() == (w, h) {
        rgb
    } else {
        image::imageops::resize(&rgb, w, h, FilterType::Triangle)
    };
    Ok(Image::from_fn(3, dims.height, dims.width, |c, y, x| {
        rgb.get_pixel(x as u32, y as u32)[c] as f64 / 255.0
    }))
}

/// Loads every `.png`/`.ppm` in `dir`, sorted by file name.
pub fn load_dir(dir: &Path, dims: &TensorDims) -> Result<Vec<(String, Image)>> {
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)
        .with_context(|| format!("reading {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension()
                .and_then(|e| e.to_str())
                .is_some_and(|e| matches!(e.to_ascii_lowercase().as_str(), "png" | "ppm"))
        })
        .collect();
    paths.sort();
    paths
        .iter()
        .map(|p| {
            let name = p
                .file_stem()
                .and_then(|s| s.to_str())
                .unwrap_or("image")
                .to_owned();
            Ok((name, load(p, dims)?))
        })
        .collect()
}

/// Writes the first three channels as 8-bit RGB; the format follows the
/// extension.
pub fn save(path: &Path, image: &Image) -> Result<()> {
    let (h, w) = (image.height(), image.width());
    let c = image.channels();
    let rgb = RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let px = |k: usize| (image.get(k.min(c - 1), y as usize, x as usize) * 255.0).round() as u8;
        image::Rgb([px(0), px(1), px(2)])
    });
    rgb.save(path)
        .with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}
