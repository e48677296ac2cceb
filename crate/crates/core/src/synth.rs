//! Procedural dataset of coloured shapes on plain backgrounds, with short
//! captions such as `"red circle"`.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::Rng;

use crate::image::ImageTensor;

pub const COLORS: [(&str, [f64; 3]); 6] = [
    ("red", [0.9, -0.8, -0.8]),
    ("green", [-0.8, 0.8, -0.8]),
    ("blue", [-0.8, -0.6, 0.9]),
    ("yellow", [0.9, 0.8, -0.9]),
    ("white", [0.95, 0.95, 0.95]),
    ("purple", [0.4, -0.8, 0.6]),
];

pub const SHAPES: [&str; 4] = ["circle", "square", "triangle", "cross"];

const BACKGROUNDS: [[f64; 3]; 4] = [[-0.9, -0.9, -0.9], [-0.4, -0.4, -0.2], [-0.7, -0.2, -0.5], [0.1, 0.0, -0.3]];

#[derive(Clone, Debug, PartialEq)]
pub struct SynthSample {
    pub image: ImageTensor,
    pub caption: String,
    pub color: usize,
    pub shape: usize,
}

fn inside(shape: usize, dx: f64, dy: f64, r: f64) -> bool {
    match shape {
        0 => dx * dx + dy * dy <= r * r,
        1 => dx.abs() <= r * 0.85 && dy.abs() <= r * 0.85,
        2 => dy >= -r && dy <= r && dx.abs() <= (dy + r) * 0.5,
        _ => (dx.abs() <= r * 0.3 && dy.abs() <= r) || (dy.abs() <= r * 0.3 && dx.abs() <= r),
    }
}

/// Draws one RGB sample of side `resolution`.
pub fn sample<R: Rng + ?Sized>(rng: &mut R, resolution: usize) -> SynthSample {
    let color = rng.random_range(0..COLORS.len());
    let shape = rng.random_range(0..SHAPES.len());
    let bg = BACKGROUNDS[rng.random_range(0..BACKGROUNDS.len())];
    let s = resolution as f64;
    let r = s * rng.random_range(0.18..0.32);
    let cx = rng.random_range(r..s - r);
    let cy = rng.random_range(r..s - r);
    let fg = COLORS[color].1;
    let mut image = ImageTensor::zeros(3, resolution, resolution);
    for y in 0..resolution {
        for x in 0..resolution {
            let on = inside(shape, x as f64 + 0.5 - cx, y as f64 + 0.5 - cy, r);
            for c in 0..3 {
                image.set(c, y, x, if on { fg[c] } else { bg[c] });
            }
        }
    }
    SynthSample { image, caption: format!("{} {}", COLORS[color].0, SHAPES[shape]), color, shape }
}

pub fn dataset<R: Rng + ?Sized>(rng: &mut R, count: usize, resolution: usize) -> Vec<SynthSample> {
    (0..count).map(|_| sample(rng, resolution)).collect()
}
