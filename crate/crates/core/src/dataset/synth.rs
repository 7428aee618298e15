//! Synthetic shapes corpus: desk-scale FSS-style registries with exact
//! masks, generated deterministically from a seed.
//!
//! Classes are (shape kind x fill style) combinations rendered at random
//! position and scale on textured backgrounds. Shape kinds double as the
//! 12 top-level superclasses; fill styles cycle through a palette of
//! patterns and hues.

use std::collections::BTreeMap;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::load::{write_jpeg, write_mask_png};
use super::{
    ClassEntry, DatasetError, DatasetRegistry, HierarchyGraph, Level, PairRef,
};
use crate::seed::{mix3, splitmix64};
use crate::{IMAGE_SIDE, PAIRS_PER_CLASS};

/// The 12 shape kinds, each a top-level superclass.
pub const SHAPE_KINDS: [&str; 12] = [
    "bar", "circle", "crescent", "cross", "diamond", "ellipse", "hexagon", "pentagon", "ring",
    "square", "star", "triangle",
];

const PATTERNS: [&str; 6] = ["solid", "hstripes", "vstripes", "checker", "dots", "diag"];

fn class_name(shape: &str, pattern: &str, fill_id: usize) -> String {
    format!("{shape}-{pattern}-f{fill_id:03}")
}

fn class_plan(idx: usize) -> (&'static str, &'static str, usize) {
    let shape = SHAPE_KINDS[idx % SHAPE_KINDS.len()];
    let fill_id = idx / SHAPE_KINDS.len();
    let pattern = PATTERNS[fill_id % PATTERNS.len()];
    (shape, pattern, fill_id)
}

fn build_hierarchy(n_classes: usize) -> HierarchyGraph {
    let mut graph = HierarchyGraph::new();
    for shape in SHAPE_KINDS {
        graph.add_node(shape, Level::Top);
    }
    for idx in 0..n_classes {
        let (shape, pattern, fill_id) = class_plan(idx);
        let name = class_name(shape, pattern, fill_id);
        graph.add_node(&name, Level::Bottom);
        if fill_id % 2 == 0 {
            let middle = format!("{shape}-{pattern}");
            if !graph.contains(&middle) {
                graph.add_node(&middle, Level::Middle);
                graph.add_edge(&middle, shape).expect("top exists");
            }
            graph.add_edge(&name, &middle).expect("middle exists");
        } else {
            graph.add_edge(&name, shape).expect("top exists");
        }
        // rings resemble circles; give a few of them both parents so the
        // DAG genuinely is not a tree
        if shape == "ring" && fill_id % 7 == 3 {
            graph.add_edge(&name, "circle").expect("top exists");
        }
    }
    graph
}

/// Build only the registry structure (names, pair paths, hierarchy) with
/// no pixel content. Pair paths point under `virtual:<seed>`.
pub fn synthetic_registry_structure(n_classes: usize, seed: u64) -> DatasetRegistry {
    let root = std::path::PathBuf::from(format!("virtual-synth-{seed}"));
    let mut classes = BTreeMap::new();
    for idx in 0..n_classes {
        let (shape, pattern, fill_id) = class_plan(idx);
        let name = class_name(shape, pattern, fill_id);
        let pairs = (1..=PAIRS_PER_CLASS)
            .map(|k| {
                let (image_path, mask_path, _) = super::pair_paths(&root, &name, k);
                PairRef {
                    image_path,
                    mask_path,
                    instance_path: None,
                }
            })
            .collect();
        classes.insert(name.clone(), ClassEntry { name, pairs });
    }
    DatasetRegistry::new(classes, build_hierarchy(n_classes), root)
}

/// Generate and write a synthetic corpus: `n_classes` classes with 10
/// image/mask pairs each plus `hierarchy.json`. Deterministic per seed.
pub fn build_synthetic_dataset(
    n_classes: usize,
    seed: u64,
    out_path: &Path,
) -> Result<DatasetRegistry, DatasetError> {
    if n_classes < 2 {
        return Err(DatasetError::TooFewClasses { got: n_classes });
    }
    std::fs::create_dir_all(out_path).map_err(|source| DatasetError::Io {
        path: out_path.to_path_buf(),
        source,
    })?;

    let mut classes = BTreeMap::new();
    for idx in 0..n_classes {
        let (shape, pattern, fill_id) = class_plan(idx);
        let name = class_name(shape, pattern, fill_id);
        let dir = super::class_dir(out_path, &name);
        std::fs::create_dir_all(&dir).map_err(|source| DatasetError::Io {
            path: dir.clone(),
            source,
        })?;

        let mut pairs = Vec::with_capacity(PAIRS_PER_CLASS);
        for k in 1..=PAIRS_PER_CLASS {
            let mut rng = ChaCha8Rng::seed_from_u64(mix3(seed, idx as u64, k as u64));
            let (image, mask) = render_example(idx, shape, pattern, &mut rng);
            let (image_path, mask_path, inst_path) = super::pair_paths(out_path, &name, k);
            write_jpeg(&image_path, &image)?;
            write_mask_png(&mask_path, &mask)?;
            // one instance annotation per class: a single instance, label 1
            let instance_path = if k == 1 {
                save_instance_mask(&inst_path, &mask)?;
                Some(inst_path)
            } else {
                None
            };
            pairs.push(PairRef {
                image_path,
                mask_path,
                instance_path,
            });
        }
        classes.insert(name.clone(), ClassEntry { name, pairs });
    }

    let hierarchy = build_hierarchy(n_classes);
    hierarchy.save(&out_path.join("hierarchy.json"))?;
    Ok(DatasetRegistry::new(classes, hierarchy, out_path))
}

fn save_instance_mask(path: &Path, mask: &ndarray::Array2<u8>) -> Result<(), DatasetError> {
    let (h, w) = mask.dim();
    let mut img = image::GrayImage::new(w as u32, h as u32);
    for (x, y, pixel) in img.enumerate_pixels_mut() {
        pixel.0[0] = mask[(y as usize, x as usize)];
    }
    img.save(path).map_err(|source| DatasetError::Decode {
        path: path.to_path_buf(),
        source,
    })
}

// ---------------------------------------------------------------------------
// rendering

struct ShapeSpec {
    kind: usize,
    cx: f32,
    cy: f32,
    r: f32,
    aux: f32,
    aux2: f32,
    polygon: Vec<(f32, f32)>,
}

fn golden_hue(class_idx: usize) -> f32 {
    (class_idx as f32 * 0.618_034).fract()
}

fn hsv_to_rgb(h: f32, s: f32, v: f32) -> [f32; 3] {
    let h = (h.fract() + 1.0).fract() * 6.0;
    let i = h.floor();
    let f = h - i;
    let p = v * (1.0 - s);
    let q = v * (1.0 - s * f);
    let t = v * (1.0 - s * (1.0 - f));
    match i as u32 % 6 {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

/// Hash-based value noise in [0, 1); avoids per-pixel RNG sequencing.
fn noise01(x: u32, y: u32, salt: u64) -> f32 {
    let h = splitmix64(salt ^ ((u64::from(x) << 32) | u64::from(y)));
    (h >> 11) as f32 / (1u64 << 53) as f32
}

fn regular_polygon(cx: f32, cy: f32, r: f32, sides: usize, phase: f32) -> Vec<(f32, f32)> {
    (0..sides)
        .map(|i| {
            let a = phase + std::f32::consts::TAU * i as f32 / sides as f32;
            (cx + r * a.cos(), cy + r * a.sin())
        })
        .collect()
}

fn star_polygon(cx: f32, cy: f32, r: f32, inner: f32) -> Vec<(f32, f32)> {
    (0..10)
        .map(|i| {
            let a = -std::f32::consts::FRAC_PI_2 + std::f32::consts::TAU * i as f32 / 10.0;
            let rr = if i % 2 == 0 { r } else { inner };
            (cx + rr * a.cos(), cy + rr * a.sin())
        })
        .collect()
}

fn point_in_polygon(px: f32, py: f32, polygon: &[(f32, f32)]) -> bool {
    let mut inside = false;
    let n = polygon.len();
    let mut j = n - 1;
    for i in 0..n {
        let (xi, yi) = polygon[i];
        let (xj, yj) = polygon[j];
        if ((yi > py) != (yj > py)) && (px < (xj - xi) * (py - yi) / (yj - yi) + xi) {
            inside = !inside;
        }
        j = i;
    }
    inside
}

fn sample_shape(kind_name: &str, rng: &mut ChaCha8Rng) -> ShapeSpec {
    let side = IMAGE_SIDE as f32;
    let r = rng.random_range(22.0..72.0f32);
    let cx = rng.random_range(r + 4.0..side - r - 4.0);
    let cy = rng.random_range(r + 4.0..side - r - 4.0);
    let kind = SHAPE_KINDS
        .iter()
        .position(|s| *s == kind_name)
        .expect("known shape");
    let mut aux = 0.0;
    let mut aux2 = 0.0;
    let mut polygon = Vec::new();
    match kind_name {
        "bar" => aux = rng.random_range(0.22..0.4f32),
        "crescent" => {
            aux = rng.random_range(0.78..0.9f32); // inner radius factor
            aux2 = rng.random_range(0.45..0.6f32); // inner center offset factor
        }
        "cross" => aux = rng.random_range(0.24..0.38f32),
        "ellipse" => aux = rng.random_range(0.4..0.68f32),
        "ring" => aux = rng.random_range(0.45..0.65f32),
        "triangle" => polygon = regular_polygon(cx, cy, r, 3, -std::f32::consts::FRAC_PI_2),
        "pentagon" => polygon = regular_polygon(cx, cy, r, 5, -std::f32::consts::FRAC_PI_2),
        "hexagon" => polygon = regular_polygon(cx, cy, r, 6, 0.0),
        "star" => polygon = star_polygon(cx, cy, r, 0.45 * r),
        _ => {}
    }
    ShapeSpec {
        kind,
        cx,
        cy,
        r,
        aux,
        aux2,
        polygon,
    }
}

fn shape_contains(spec: &ShapeSpec, x: u32, y: u32) -> bool {
    let px = x as f32 + 0.5;
    let py = y as f32 + 0.5;
    let dx = px - spec.cx;
    let dy = py - spec.cy;
    let r = spec.r;
    match SHAPE_KINDS[spec.kind] {
        "circle" => dx * dx + dy * dy <= r * r,
        "ellipse" => {
            let b = r * spec.aux;
            (dx / r).powi(2) + (dy / b).powi(2) <= 1.0
        }
        "ring" => {
            let d2 = dx * dx + dy * dy;
            let inner = r * spec.aux;
            d2 <= r * r && d2 >= inner * inner
        }
        "crescent" => {
            let in_outer = dx * dx + dy * dy <= r * r;
            let bx = dx - spec.aux2 * r;
            let inner = r * spec.aux;
            in_outer && (bx * bx + dy * dy > inner * inner)
        }
        "square" => dx.abs() <= r * 0.86 && dy.abs() <= r * 0.86,
        "diamond" => dx.abs() + dy.abs() <= r,
        "bar" => dx.abs() <= r && dy.abs() <= r * spec.aux,
        "cross" => {
            let w = r * spec.aux;
            (dx.abs() <= w && dy.abs() <= r) || (dy.abs() <= w && dx.abs() <= r)
        }
        _ => point_in_polygon(px, py, &spec.polygon),
    }
}

struct FillStyle {
    primary: [f32; 3],
    secondary: [f32; 3],
    period: f32,
    phase_x: f32,
    phase_y: f32,
}

fn fill_color(pattern: &str, style: &FillStyle, x: u32, y: u32) -> [f32; 3] {
    let fx = x as f32 + style.phase_x;
    let fy = y as f32 + style.phase_y;
    let p = style.period;
    let use_secondary = match pattern {
        "solid" => false,
        "hstripes" => (fy / p).floor() as i64 % 2 == 0,
        "vstripes" => (fx / p).floor() as i64 % 2 == 0,
        "checker" => ((fx / p).floor() + (fy / p).floor()) as i64 % 2 == 0,
        "diag" => ((fx + fy) / p).floor() as i64 % 2 == 0,
        "dots" => {
            let g = p * 2.0;
            let mx = fx.rem_euclid(g) - g / 2.0;
            let my = fy.rem_euclid(g) - g / 2.0;
            mx * mx + my * my <= (p * 0.55).powi(2)
        }
        _ => false,
    };
    if use_secondary {
        style.secondary
    } else {
        style.primary
    }
}

fn render_example(
    class_idx: usize,
    shape: &str,
    pattern: &str,
    rng: &mut ChaCha8Rng,
) -> (image::RgbImage, ndarray::Array2<u8>) {
    let side = IMAGE_SIDE as u32;
    let hue = golden_hue(class_idx);
    let v_jitter = rng.random_range(-0.05..0.05f32);
    let style = FillStyle {
        primary: hsv_to_rgb(hue, 0.78, 0.92 + v_jitter),
        secondary: hsv_to_rgb(hue + 0.33, 0.85, 0.78 + v_jitter),
        period: rng.random_range(6.0..13.0f32),
        phase_x: rng.random_range(0.0..32.0f32),
        phase_y: rng.random_range(0.0..32.0f32),
    };

    // muted background far from the foreground hue, with a soft gradient
    // and hash noise for texture
    let bg_hue = hue + 0.5 + rng.random_range(-0.07..0.07f32);
    let bg_sat = rng.random_range(0.08..0.25f32);
    let bg_val = rng.random_range(0.35..0.62f32);
    let base = hsv_to_rgb(bg_hue, bg_sat, bg_val);
    let grad_x = rng.random_range(-0.1..0.1f32);
    let grad_y = rng.random_range(-0.1..0.1f32);
    let noise_amp = rng.random_range(0.02..0.07f32);
    let noise_salt = rng.random::<u64>();

    let spec = sample_shape(shape, rng);

    let mut mask = ndarray::Array2::<u8>::zeros((side as usize, side as usize));
    let img = image::RgbImage::from_fn(side, side, |x, y| {
        let fg = shape_contains(&spec, x, y);
        let rgb = if fg {
            mask[(y as usize, x as usize)] = 1;
            fill_color(pattern, &style, x, y)
        } else {
            let t = (x as f32 / side as f32 - 0.5) * grad_x + (y as f32 / side as f32 - 0.5) * grad_y;
            let n = (noise01(x, y, noise_salt) - 0.5) * 2.0 * noise_amp;
            [base[0] + t + n, base[1] + t + n, base[2] + t + n]
        };
        image::Rgb([
            (rgb[0].clamp(0.0, 1.0) * 255.0).round() as u8,
            (rgb[1].clamp(0.0, 1.0) * 255.0).round() as u8,
            (rgb[2].clamp(0.0, 1.0) * 255.0).round() as u8,
        ])
    });
    debug_assert!(mask.iter().any(|&m| m == 1), "{shape} rendered empty");
    (img, mask)
}
