//! Image export: PGM (grayscale) / PPM (color) for morph galleries and
//! flagged-sample gtections, plus PNG ingestion for the morph command.

use std::fs;
use std::io::Write;
use std::path::Path;

use oiad_core::tensor::Tensor;

use crate::data::{DataError, ImageBatch};

/// Writes one image (`[1, C, H, W]` or `[C, H, W]`) as PGM/PPM depending on
/// channel count.
pub fn write_image(img: &Tensor<f32>, path: &Path) -> Result<(), DataError> {
    let shape = img.shape();
    let (c, h, w) = match shape.len() {
        4 => (shape[1], shape[2], shape[3]),
        3 => (shape[0], shape[1], shape[2]),
        _ => {
            return Err(DataError::InvalidBatch(format!(
                "cannot export image of shape {shape:?}"
            )))
        }
    };
    let mut buf = Vec::new();
    match c {
        1 => {
            write!(buf, "P5\n{w} {h}\n255\n").unwrap();
            for &v in img.data().iter().take(h * w) {
                buf.push((v * 255.0).round().clamp(0.0, 255.0) as u8);
            }
        }
        3 => {
            write!(buf, "P6\n{w} {h}\n255\n").unwrap();
            let plane = h * w;
            for i in 0..plane {
                for ch in 0..3 {
                    let v = img.data()[ch * plane + i];
                    buf.push((v * 255.0).round().clamp(0.0, 255.0) as u8);
                }
            }
        }
        other => {
            return Err(DataError::InvalidBatch(format!(
                "cannot export {other}-channel image"
            )))
        }
    }
    fs::write(path, buf).map_err(|source| DataError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Dumps selected samples of a batch into `dir`, one file per image, the
/// score embedded in the filename.
pub fn write_gallery(
    batch: &ImageBatch,
    picks: &[(usize, f64)],
    dir: &Path,
) -> Result<(), DataError> {
    fs::create_dir_all(dir).map_err(|source| DataError::Io {
        path: dir.to_path_buf(),
        source,
    })?;
    let ext = if batch.data.shape()[1] == 1 { "pgm" } else { "ppm" };
    for &(idx, score) in picks {
        let img = batch.data.gather_rows(&[idx]);
        let name = format!("sample{idx:05}_score{score:.4}.{ext}");
        write_image(&img, &dir.join(name))?;
    }
    Ok(())
}

/// Loads a PNG as a normalized single-image batch (grayscale or RGB).
pub fn load_png(path: &Path) -> Result<ImageBatch, DataError> {
    let img = image::open(path).map_err(|e| DataError::InvalidBatch(format!("{path:?}: {e}")))?;
    match img.color().channel_count() {
        1 | 2 => {
            let gray = img.to_luma8();
            let (w, h) = (gray.width() as usize, gray.height() as usize);
            let data: Vec<f32> = gray.as_raw().iter().map(|&b| b as f32 / 255.0).collect();
            ImageBatch::new(Tensor::from_vec(&[1, 1, h, w], data), None)
        }
        _ => {
            let rgb = img.to_rgb8();
            let (w, h) = (rgb.width() as usize, rgb.height() as usize);
            let mut data = vec![0.0f32; 3 * h * w];
            for (i, px) in rgb.pixels().enumerate() {
                for ch in 0..3 {
                    data[ch * h * w + i] = px.0[ch] as f32 / 255.0;
                }
            }
            ImageBatch::new(Tensor::from_vec(&[1, 3, h, w], data), None)
        }
    }
}
