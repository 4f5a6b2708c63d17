//! 8-bit PNG in and out of `[0, 1]` images.

use std::path::Path;

use image::{ImageBuffer, Rgb};
use mphm_core::image::Image;
use mphm_core::Scalar;

use crate::error::{DataError, Result};

/// `[0, 1]` → `0..=255`, rounding halves up.
pub fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0 + 0.5).floor() as u8
}

pub fn load_png<T: Scalar>(path: &Path) -> Result<Image<T>> {
    let img = image::open(path)
        .map_err(|e| match e {
            image::ImageError::IoError(source) => DataError::Io {
                path: path.to_path_buf(),
                source,
            },
            other => DataError::Decode {
                path: path.to_path_buf(),
                msg: other.to_string(),
            },
        })?
        .to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut out = Image::constant(h, w, T::zero());
    for (x, y, px) in img.enumerate_pixels() {
        for c in 0..3 {
            out.set(c, y as usize, x as usize, T::lit(px[c] as f64 / 255.0));
        }
    }
    Ok(out)
}

pub fn save_png<T: Scalar>(path: &Path, img: &Image<T>) -> Result<()> {
    let (h, w) = img.dims();
    let buf = ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
        let q = |c| quantize(img.get(c, y as usize, x as usize).to_f64().unwrap());
        Rgb([q(0), q(1), q(2)])
    });
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|source| DataError::Io {
            path: dir.to_path_buf(),
            source,
        })?;
    }
    buf.save(path).map_err(|e| DataError::Decode {
        path: path.to_path_buf(),
        msg: e.to_string(),
    })
}

/// Image dimensions `(h, w)` from the file header only.
pub fn png_dims(path: &Path) -> Result<(usize, usize)> {
    let (w, h) = image::image_dimensions(path).map_err(|e| DataError::Decode {
        path: path.to_path_buf(),
        msg: e.to_string(),
    })?;
    Ok((h as usize, w as usize))
}
