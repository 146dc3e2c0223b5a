//! Deterministic synthetic dataset: colored geometric shapes on textured
//! backgrounds.
//!
//! Five classes — the textured background plus circle, cross, square, and
//! triangle — drawn with per-class colors so that feature similarity across
//! images is informative. The default 60-image, 64x64 set is what the smoke
//! tests and the command-line fixture generator emit; trees written from
//! the same seed are byte-identical.

use std::fs;
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::dataset::{Dataset, Label, LabeledImage};
use crate::error::{Error, Result};
use crate::rng::{derive_seed, rng_from_seed};
use crate::tensor::Tensor;

pub const CLASS_NAMES: [&str; 5] = ["background", "circle", "cross", "square", "triangle"];
pub const DEFAULT_IMAGES: usize = 60;
pub const DEFAULT_SIZE: usize = 64;

#[derive(Clone, Copy)]
enum Shape {
    Circle,
    Cross,
    Square,
    Triangle,
}

impl Shape {
    fn class(self) -> u8 {
        match self {
            Shape::Circle => 1,
            Shape::Cross => 2,
            Shape::Square => 3,
            Shape::Triangle => 4,
        }
    }

    fn base_color(self) -> [f64; 3] {
        match self {
            Shape::Circle => [0.85, 0.25, 0.25],
            Shape::Cross => [0.85, 0.80, 0.25],
            Shape::Square => [0.25, 0.35, 0.85],
            Shape::Triangle => [0.25, 0.75, 0.35],
        }
    }

    fn contains(self, dx: f64, dy: f64, r: f64) -> bool {
        match self {
            Shape::Circle => dx * dx + dy * dy <= r * r,
            Shape::Cross => {
                (dx.abs() <= r / 3.0 && dy.abs() <= r) || (dy.abs() <= r / 3.0 && dx.abs() <= r)
            }
            Shape::Square => dx.abs().max(dy.abs()) <= 0.8 * r,
            Shape::Triangle => {
                dy >= -r && dy <= r && dx.abs() <= 0.9 * r * (dy + r) / (2.0 * r)
            }
        }
    }
}

fn pick_shape(rng: &mut ChaCha8Rng) -> Shape {
    match rng.gen_range(0u8..4) {
        0 => Shape::Circle,
        1 => Shape::Cross,
        2 => Shape::Square,
        _ => Shape::Triangle,
    }
}

/// Quantize to the 8-bit grid so in-memory data matches a PNG round trip.
fn q8(v: f64) -> f64 {
    (v.clamp(0.0, 1.0) * 255.0).round() / 255.0
}

fn generate_image(seed: u64, size: usize) -> (Tensor, Label) {
    let mut rng = rng_from_seed(seed);
    let s = size as f64;

    // textured background: base gray + two sinusoidal gratings + grain
    let base = rng.gen_range(0.35..0.55);
    let (a1, a2) = (rng.gen_range(0.03..0.07), rng.gen_range(0.03..0.07));
    let (fx1, fy1) = (rng.gen_range(-3.0..3.0), rng.gen_range(-3.0..3.0));
    let (fx2, fy2) = (rng.gen_range(-5.0..5.0), rng.gen_range(-5.0..5.0));
    let (p1, p2) = (
        rng.gen_range(0.0..std::f64::consts::TAU),
        rng.gen_range(0.0..std::f64::consts::TAU),
    );
    let mut image = Tensor::zeros(size, size, 3);
    let mut label = vec![0u8; size * size];
    for y in 0..size {
        for x in 0..size {
            let (xf, yf) = (x as f64 / s, y as f64 / s);
            let tex = base
                + a1 * (std::f64::consts::TAU * (fx1 * xf + fy1 * yf) + p1).sin()
                + a2 * (std::f64::consts::TAU * (fx2 * xf + fy2 * yf) + p2).sin()
                + rng.gen_range(-0.02..0.02);
            for ch in 0..3 {
                *image.at_mut(y, x, ch) = tex + rng.gen_range(-0.01..0.01);
            }
        }
    }

    // 2..=4 shapes, later shapes painted over earlier ones
    let n_shapes = rng.gen_range(2usize..=4);
    let margin = 12.0 * s / 64.0;
    for _ in 0..n_shapes {
        let shape = pick_shape(&mut rng);
        let cx = rng.gen_range(margin..s - margin);
        let cy = rng.gen_range(margin..s - margin);
        let r = rng.gen_range(6.0..13.0) * s / 64.0;
        let mut color = shape.base_color();
        for c in &mut color {
            *c += rng.gen_range(-0.08..0.08);
        }
        let y_lo = ((cy - r).floor().max(0.0)) as usize;
        let y_hi = ((cy + r).ceil().min(s - 1.0)) as usize;
        let x_lo = ((cx - r).floor().max(0.0)) as usize;
        let x_hi = ((cx + r).ceil().min(s - 1.0)) as usize;
        for y in y_lo..=y_hi {
            for x in x_lo..=x_hi {
                if shape.contains(x as f64 - cx, y as f64 - cy, r) {
                    for ch in 0..3 {
                        *image.at_mut(y, x, ch) = color[ch] + rng.gen_range(-0.03..0.03);
                    }
                    label[y * size + x] = shape.class();
                }
            }
        }
    }

    for v in image.data_mut() {
        *v = q8(*v);
    }
    let label = Label::from_vec(size, size, label).expect("label sized with image");
    (image, label)
}

/// Build the synthetic dataset in memory.
pub fn generate(seed: u64, n_images: usize, size: usize) -> Dataset {
    let items = (0..n_images)
        .map(|i| {
            let (image, label) = generate_image(derive_seed(seed, i as u64), size);
            LabeledImage::new(format!("synth{i:03}"), image, label)
                .expect("generated pair is consistent")
        })
        .collect();
    Dataset {
        items,
        class_names: CLASS_NAMES.iter().map(|s| s.to_string()).collect(),
    }
}

/// Write a dataset to the standard on-disk layout.
pub fn write_dataset(dataset: &Dataset, root: &Path) -> Result<()> {
    let images_dir = root.join("images");
    let labels_dir = root.join("labels");
    fs::create_dir_all(&images_dir).map_err(|e| Error::io(&images_dir, e))?;
    fs::create_dir_all(&labels_dir).map_err(|e| Error::io(&labels_dir, e))?;

    let classes = dataset.class_names.join("\n") + "\n";
    let classes_path = root.join("classes.txt");
    fs::write(&classes_path, classes).map_err(|e| Error::io(&classes_path, e))?;

    for item in &dataset.items {
        let (h, w, _) = item.image.shape();
        let mut rgb = image::RgbImage::new(w as u32, h as u32);
        for y in 0..h {
            for x in 0..w {
                let px = item.image.pixel(y, x);
                rgb.put_pixel(
                    x as u32,
                    y as u32,
                    image::Rgb([
                        (px[0].clamp(0.0, 1.0) * 255.0).round() as u8,
                        (px[1].clamp(0.0, 1.0) * 255.0).round() as u8,
                        (px[2].clamp(0.0, 1.0) * 255.0).round() as u8,
                    ]),
                );
            }
        }
        let img_path = images_dir.join(format!("{}.png", item.id));
        rgb.save(&img_path).map_err(|e| Error::Image {
            path: img_path.clone(),
            source: e,
        })?;

        let gray = image::GrayImage::from_raw(w as u32, h as u32, item.label.data().to_vec())
            .expect("label buffer sized with image");
        let label_path = labels_dir.join(format!("{}.png", item.id));
        gray.save(&label_path).map_err(|e| Error::Image {
            path: label_path.clone(),
            source: e,
        })?;
    }
    Ok(())
}

/// Generate and write in one step; the standard fixture entry point.
pub fn make_fixture(root: &Path, seed: u64, n_images: usize, size: usize) -> Result<Dataset> {
    let dataset = generate(seed, n_images, size);
    write_dataset(&dataset, root)?;
    Ok(dataset)
}
