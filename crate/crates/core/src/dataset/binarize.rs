//! Convert a multi-class labelled dataset into FSS-style binary entries:
//! one target class becomes foreground, everything else background, then
//! the usual collection filters apply.

use std::path::{Path, PathBuf};

use ndarray::Array2;

use super::{load_pair, validate_image, write_pair, ClassEntry, DatasetError, PairRef};

/// Per-image binarization: 1 where the labelmap equals the target class.
/// Returns `None` when no pixel matches (the image is excluded).
pub fn binarize_labelmap(labelmap: &Array2<u16>, target_class: u16) -> Option<Array2<u8>> {
    let mask = labelmap.mapv(|v| u8::from(v == target_class));
    if mask.iter().any(|&v| v == 1) {
        Some(mask)
    } else {
        None
    }
}

#[derive(Debug, Clone)]
pub struct BinarizeOutcome {
    pub entry: ClassEntry,
    /// Images skipped because the target class never appears in them.
    pub excluded_no_target: Vec<PathBuf>,
    /// Images skipped by the aspect-ratio / min-side filters.
    pub excluded_filtered: Vec<PathBuf>,
}

/// Binarize `(image, labelmap)` files against `target_class` and write the
/// surviving pairs as a new FSS-style class under `out_root/<class_name>/`.
///
/// The target must appear somewhere in the dataset's label vocabulary;
/// images without it are excluded rather than producing empty masks.
pub fn binarize_multiclass_dataset(
    items: &[(PathBuf, PathBuf)],
    target_class: u16,
    class_name: &str,
    out_root: &Path,
) -> Result<BinarizeOutcome, DatasetError> {
    let labelmaps: Vec<Array2<u16>> = items
        .iter()
        .map(|(_, label_path)| read_labelmap(label_path))
        .collect::<Result<_, _>>()?;

    let in_vocabulary = labelmaps
        .iter()
        .any(|map| map.iter().any(|&v| v == target_class));
    if !in_vocabulary {
        return Err(DatasetError::UnknownTargetClass {
            target: target_class,
        });
    }

    let class_dir = super::class_dir(out_root, class_name);
    std::fs::create_dir_all(&class_dir).map_err(|source| DatasetError::Io {
        path: class_dir.clone(),
        source,
    })?;

    let mut outcome = BinarizeOutcome {
        entry: ClassEntry {
            name: class_name.to_string(),
            pairs: Vec::new(),
        },
        excluded_no_target: Vec::new(),
        excluded_filtered: Vec::new(),
    };

    let mut k = 0usize;
    for ((image_path, _), labelmap) in items.iter().zip(&labelmaps) {
        let Some(mask) = binarize_labelmap(labelmap, target_class) else {
            outcome.excluded_no_target.push(image_path.clone());
            continue;
        };

        let (w, h) = super::load::read_image_dimensions(image_path)?;
        if validate_image(w, h).is_err() {
            outcome.excluded_filtered.push(image_path.clone());
            continue;
        }

        // stage the binary mask next to a temp name, then run the standard
        // load path so resizing and re-binarization match ordinary pairs
        let staged = class_dir.join(".staged-mask.png");
        super::load::write_mask_png(&staged, &mask)?;
        let loaded = match load_pair(image_path, &staged) {
            Ok(pair) => pair,
            Err(DatasetError::AllBackground { .. }) => {
                // a sliver of foreground can vanish in the resize
                std::fs::remove_file(&staged).ok();
                outcome.excluded_no_target.push(image_path.clone());
                continue;
            }
            Err(other) => {
                std::fs::remove_file(&staged).ok();
                return Err(other);
            }
        };
        std::fs::remove_file(&staged).ok();

        k += 1;
        let (img_out, mask_out) = write_pair(&class_dir, &k.to_string(), &loaded)?;
        outcome.entry.pairs.push(PairRef {
            image_path: img_out,
            mask_path: mask_out,
            instance_path: None,
        });
    }

    Ok(outcome)
}

fn read_labelmap(path: &Path) -> Result<Array2<u16>, DatasetError> {
    let img = image::open(path).map_err(|source| DatasetError::Decode {
        path: path.to_path_buf(),
        source,
    })?;
    // labels are raw integer ids; never rescale between bit depths
    match img {
        image::DynamicImage::ImageLuma16(buf) => {
            let (w, h) = buf.dimensions();
            let mut out = Array2::zeros((h as usize, w as usize));
            for (x, y, pixel) in buf.enumerate_pixels() {
                out[(y as usize, x as usize)] = pixel.0[0];
            }
            Ok(out)
        }
        other => {
            let gray = other.to_luma8();
            let (w, h) = gray.dimensions();
            let mut out = Array2::zeros((h as usize, w as usize));
            for (x, y, pixel) in gray.enumerate_pixels() {
                out[(y as usize, x as usize)] = u16::from(pixel.0[0]);
            }
            Ok(out)
        }
    }
}
