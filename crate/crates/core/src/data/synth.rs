use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::Dataset;
use crate::error::{Error, Result};
use crate::patching::ImageTensor;

/// Parameters of the built-in textured-shapes corpus.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SynthSpec {
    pub classes: usize,
    pub count: usize,
    pub side: usize,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            classes: 10,
            count: 2000,
            side: 64,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy)]
enum Shape {
    Disk,
    Square,
    Triangle,
    Ring,
    Cross,
}

const SHAPES: [Shape; 5] = [Shape::Disk, Shape::Square, Shape::Triangle, Shape::Ring, Shape::Cross];

impl Shape {
    /// `(dx, dy)` are offsets from the centre in units of the radius.
    fn contains(self, dx: f64, dy: f64) -> bool {
        let r = (dx * dx + dy * dy).sqrt();
        match self {
            Shape::Disk => r < 1.0,
            Shape::Square => dx.abs().max(dy.abs()) < 0.85,
            Shape::Triangle => dy < 0.75 && dy > -1.0 && dx.abs() < (dy + 1.0) * 0.6,
            Shape::Ring => r < 1.0 && r > 0.55,
            Shape::Cross => (dx.abs() < 0.35 && dy.abs() < 1.0) || (dy.abs() < 0.35 && dx.abs() < 1.0),
        }
    }
}

fn hsv(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h6 = (h.rem_euclid(1.0)) * 6.0;
    let i = h6.floor() as usize % 6;
    let f = h6 - h6.floor();
    let (p, q, t) = (v * (1.0 - s), v * (1.0 - s * f), v * (1.0 - s * (1.0 - f)));
    match i {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

struct ClassStyle {
    shape: Shape,
    colour: [f64; 3],
    stripe_angle: f64,
    stripe_period: f64,
}

fn class_style(class: usize, classes: usize) -> ClassStyle {
    let hue = (class as f64 * 0.618_033_988_75).fract();
    let value = 0.55 + 0.4 * ((class * 7) % classes) as f64 / classes as f64;
    ClassStyle {
        shape: SHAPES[class % SHAPES.len()],
        colour: hsv(hue, 0.85, value),
        stripe_angle: PI * ((class / SHAPES.len()) as f64 * 0.37).fract(),
        stripe_period: 4.0 + 2.0 * ((class / SHAPES.len()) % 3) as f64,
    }
}

fn quantize(v: f64) -> f32 {
    (v.clamp(0.0, 1.0) * 255.0).round() as f32 / 255.0
}

/// One image of `class` plus its binary foreground mask (1 = shape).
pub fn synth_image(class: usize, classes: usize, side: usize, rng: &mut impl Rng) -> (ImageTensor, ImageTensor) {
    let style = class_style(class, classes);
    let s = side as f64;
    let cx = s * (0.5 + rng.random_range(-0.12..0.12));
    let cy = s * (0.5 + rng.random_range(-0.12..0.12));
    let radius = s * rng.random_range(0.26..0.38);

    // background: desaturated random hue with a few low-frequency waves
    let bg = hsv(rng.random::<f64>(), 0.3, rng.random_range(0.3..0.6));
    let waves: Vec<(f64, f64, f64)> = (0..3)
        .map(|_| {
            let ang = rng.random_range(0.0..PI);
            let freq = rng.random_range(1.0..4.0) * 2.0 * PI / s;
            (ang.cos() * freq, ang.sin() * freq, rng.random_range(0.0..2.0 * PI))
        })
        .collect();
    let (sa, ca) = style.stripe_angle.sin_cos();
    let phase = rng.random_range(0.0..2.0 * PI);

    let mut values = Vec::with_capacity(side * side * 3);
    let mut mask = Vec::with_capacity(side * side);
    for y in 0..side {
        for x in 0..side {
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            let inside = style.shape.contains((px - cx) / radius, (py - cy) / radius);
            let noise = rng.random_range(-0.03..0.03);
            let rgb = if inside {
                let stripe = 0.75 + 0.25 * (2.0 * PI * (px * ca + py * sa) / style.stripe_period + phase).sin();
                style.colour.map(|c| c * stripe + noise)
            } else {
                let w: f64 = waves.iter().map(|&(fx, fy, ph)| (fx * px + fy * py + ph).sin()).sum::<f64>() / 3.0;
                bg.map(|c| c * (1.0 + 0.3 * w) + noise)
            };
            values.extend(rgb.map(quantize));
            mask.push(if inside { 1.0 } else { 0.0 });
        }
    }
    (
        ImageTensor::new(side, 3, values).expect("synthetic buffer has the right size"),
        ImageTensor::new(side, 1, mask).expect("synthetic mask has the right size"),
    )
}

/// Generates the whole corpus. Image `i` has label `i % classes` and its own
/// random stream, so a prefix of a larger corpus equals the smaller corpus.
pub fn generate(spec: &SynthSpec) -> Result<Dataset> {
    if spec.classes < 1 || spec.count < 1 || spec.side < 8 {
        return Err(Error::config(format!(
            "synthetic corpus needs classes >= 1, count >= 1 and side >= 8, got {spec:?}"
        )));
    }
    let mut images = Vec::with_capacity(spec.count);
    let mut masks = Vec::with_capacity(spec.count);
    let mut labels = Vec::with_capacity(spec.count);
    for i in 0..spec.count {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        rng.set_stream(i as u64);
        let label = i % spec.classes;
        let (img, mask) = synth_image(label, spec.classes, spec.side, &mut rng);
        images.push(img);
        masks.push(mask);
        labels.push(label);
    }
    Dataset::new(images, labels, Some(masks))
}
