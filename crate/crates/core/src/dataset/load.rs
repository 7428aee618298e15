//! Collection filters and pair loading.
//!
//! Raw images are screened by aspect ratio and minimum side before use,
//! then image and mask are resized to 224x224: the image with a smooth
//! (triangle) filter, the mask with nearest-neighbor so it stays binary.

use std::path::Path;

use image::imageops::FilterType;
use image::{DynamicImage, GenericImageView, ImageReader};
use ndarray::{Array2, Array3};

use super::{DatasetError, LoadedPair, RuleId};
use crate::IMAGE_SIDE;

/// Mask binarization threshold on load: raw values above this map to 1.
pub const MASK_THRESHOLD: u8 = 127;

/// JPEG quality used when writing pairs.
const JPEG_QUALITY: u8 = 90;

/// Accept or reject raw image dimensions.
///
/// Accepts iff the aspect ratio lies in [0.5, 2] and both sides are at
/// least 224 pixels; a rejection carries every violated rule id (a pair
/// like 223x448 breaks both). Total function: no dimension panics.
pub fn validate_image(width: u32, height: u32) -> Result<(), Vec<RuleId>> {
    let mut violated = Vec::new();
    let (w, h) = (width as f64, height as f64);
    if h > 0.0 {
        let ratio = w / h;
        if !(0.5..=2.0).contains(&ratio) {
            violated.push(RuleId::AspectRatio);
        }
    }
    if width.min(height) < IMAGE_SIDE as u32 {
        violated.push(RuleId::MinSide);
    }
    if violated.is_empty() {
        Ok(())
    } else {
        Err(violated)
    }
}

/// Decode only the header to get raw dimensions without a full decode.
pub fn read_image_dimensions(path: &Path) -> Result<(u32, u32), DatasetError> {
    let reader = ImageReader::open(path)
        .map_err(|source| DatasetError::Io {
            path: path.to_path_buf(),
            source,
        })?
        .with_guessed_format()
        .map_err(|source| DatasetError::Io {
            path: path.to_path_buf(),
            source,
        })?;
    reader
        .into_dimensions()
        .map_err(|source| DatasetError::Decode {
            path: path.to_path_buf(),
            source,
        })
}

fn open_image(path: &Path) -> Result<DynamicImage, DatasetError> {
    ImageReader::open(path)
        .map_err(|source| DatasetError::Io {
            path: path.to_path_buf(),
            source,
        })?
        .with_guessed_format()
        .map_err(|source| DatasetError::Io {
            path: path.to_path_buf(),
            source,
        })?
        .decode()
        .map_err(|source| DatasetError::Decode {
            path: path.to_path_buf(),
            source,
        })
}

/// Convert an already-resized RGB image into `(3, side, side)` floats in [0,1].
pub fn rgb_to_unit_array(img: &image::RgbImage) -> Array3<f32> {
    let (w, h) = img.dimensions();
    let mut out = Array3::zeros((3, h as usize, w as usize));
    for (x, y, pixel) in img.enumerate_pixels() {
        for c in 0..3 {
            out[(c, y as usize, x as usize)] = f32::from(pixel.0[c]) / 255.0;
        }
    }
    out
}

pub(crate) fn gray_to_binary(img: &image::GrayImage) -> Array2<u8> {
    let (w, h) = img.dimensions();
    let mut out = Array2::zeros((h as usize, w as usize));
    for (x, y, pixel) in img.enumerate_pixels() {
        out[(y as usize, x as usize)] = u8::from(pixel.0[0] > MASK_THRESHOLD);
    }
    out
}

/// Load, filter and resize one image/mask pair.
///
/// Errors on missing files, filter rejection, image/mask dimension
/// mismatch, and masks that end up all-background: a pair without
/// foreground is unusable as support or ground truth.
pub fn load_pair(image_path: &Path, mask_path: &Path) -> Result<LoadedPair, DatasetError> {
    let image = open_image(image_path)?;
    let (iw, ih) = image.dimensions();
    validate_image(iw, ih).map_err(|rules| DatasetError::ImageFilter {
        path: image_path.to_path_buf(),
        rule: rules[0],
    })?;

    let mask = open_image(mask_path)?;
    let (mw, mh) = mask.dimensions();
    if (mw, mh) != (iw, ih) {
        return Err(DatasetError::DimensionMismatch {
            image: image_path.to_path_buf(),
            mask: mask_path.to_path_buf(),
            image_w: iw,
            image_h: ih,
            mask_w: mw,
            mask_h: mh,
        });
    }

    let side = IMAGE_SIDE as u32;
    let image = image.resize_exact(side, side, FilterType::Triangle).to_rgb8();
    let mask = mask.resize_exact(side, side, FilterType::Nearest).to_luma8();

    let mask = gray_to_binary(&mask);
    if mask.iter().all(|&v| v == 0) {
        return Err(DatasetError::AllBackground {
            path: mask_path.to_path_buf(),
        });
    }

    Ok(LoadedPair {
        image: rgb_to_unit_array(&image),
        mask,
        source_path: image_path.display().to_string(),
    })
}

/// Resize a raw interleaved RGB8 buffer to a `side x side` float image.
/// Used by the C ABI, which hands over plain pixel buffers.
pub fn resize_rgb_buffer(
    data: &[u8],
    width: u32,
    height: u32,
    side: usize,
) -> Result<Array3<f32>, DatasetError> {
    let img = image::RgbImage::from_raw(width, height, data.to_vec()).ok_or(
        DatasetError::BufferSize {
            expected: width as usize * height as usize * 3,
            got: data.len(),
        },
    )?;
    let resized = image::DynamicImage::ImageRgb8(img)
        .resize_exact(side as u32, side as u32, FilterType::Triangle)
        .to_rgb8();
    Ok(rgb_to_unit_array(&resized))
}

/// Resize a raw 8-bit mask buffer (nonzero = foreground) to a binary
/// `side x side` mask, nearest-neighbor.
pub fn resize_mask_buffer(
    data: &[u8],
    width: u32,
    height: u32,
    side: usize,
) -> Result<Array2<u8>, DatasetError> {
    let img = image::GrayImage::from_raw(width, height, data.to_vec()).ok_or(
        DatasetError::BufferSize {
            expected: width as usize * height as usize,
            got: data.len(),
        },
    )?;
    // map any nonzero to 255 so the loader threshold applies cleanly
    let img = image::GrayImage::from_fn(width, height, |x, y| {
        image::Luma([if img.get_pixel(x, y).0[0] > 0 { 255 } else { 0 }])
    });
    let resized = image::DynamicImage::ImageLuma8(img)
        .resize_exact(side as u32, side as u32, FilterType::Nearest)
        .to_luma8();
    Ok(gray_to_binary(&resized))
}

/// Write a loaded pair back to disk as `<stem>.jpg` + `<stem>.png`.
pub fn write_pair(
    dir: &Path,
    stem: &str,
    pair: &LoadedPair,
) -> Result<(std::path::PathBuf, std::path::PathBuf), DatasetError> {
    std::fs::create_dir_all(dir).map_err(|source| DatasetError::Io {
        path: dir.to_path_buf(),
        source,
    })?;
    let image_path = dir.join(format!("{stem}.jpg"));
    let mask_path = dir.join(format!("{stem}.png"));

    let (_, h, w) = pair.image.dim();
    let mut rgb = image::RgbImage::new(w as u32, h as u32);
    for (x, y, pixel) in rgb.enumerate_pixels_mut() {
        for c in 0..3 {
            let v = pair.image[(c, y as usize, x as usize)];
            pixel.0[c] = (v.clamp(0.0, 1.0) * 255.0).round() as u8;
        }
    }
    write_jpeg(&image_path, &rgb)?;
    write_mask_png(&mask_path, &pair.mask)?;
    Ok((image_path, mask_path))
}

pub(crate) fn write_jpeg(path: &Path, img: &image::RgbImage) -> Result<(), DatasetError> {
    let file = std::fs::File::create(path).map_err(|source| DatasetError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let mut writer = std::io::BufWriter::new(file);
    let encoder = image::codecs::jpeg::JpegEncoder::new_with_quality(&mut writer, JPEG_QUALITY);
    img.write_with_encoder(encoder)
        .map_err(|source| DatasetError::Decode {
            path: path.to_path_buf(),
            source,
        })
}

/// Write a {0,1} mask as an 8-bit 0/255 PNG.
pub(crate) fn write_mask_png(path: &Path, mask: &Array2<u8>) -> Result<(), DatasetError> {
    let (h, w) = mask.dim();
    let mut img = image::GrayImage::new(w as u32, h as u32);
    for (x, y, pixel) in img.enumerate_pixels_mut() {
        pixel.0[0] = if mask[(y as usize, x as usize)] > 0 { 255 } else { 0 };
    }
    img.save(path).map_err(|source| DatasetError::Decode {
        path: path.to_path_buf(),
        source,
    })
}
