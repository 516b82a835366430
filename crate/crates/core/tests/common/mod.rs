#![allow(dead_code)]

use multiedit::dms::InstanceEdit;
use multiedit::io::PixelMask;
use multiedit::predictor::{GaussianTarget, ToyGaussianPredictor};
use multiedit::schedule::{LatentSequence, LatentShape};

pub const SHAPE: LatentShape = LatentShape::new(3, 8, 8, 2);
pub const SOURCE_MU: f64 = -0.2;

/// Left and right boxes, disjoint, on every frame.
pub fn two_masks(shape: LatentShape) -> [Vec<PixelMask>; 2] {
    let (h, w) = (shape.height, shape.width);
    [
        vec![PixelMask::rect(h, w, 1, h - 1, 0, w / 2 - 1); shape.frames],
        vec![PixelMask::rect(h, w, 2, h - 2, w / 2 + 1, w); shape.frames],
    ]
}

/// Empty caption at `SOURCE_MU`, plus one constant target per caption.
pub fn gaussian(shape: LatentShape, sigma: f64, targets: &[(&str, f64)]) -> ToyGaussianPredictor {
    let mut p = ToyGaussianPredictor::new()
        .with_target("", GaussianTarget::constant(shape, SOURCE_MU, sigma))
        .unwrap();
    for (caption, mu) in targets {
        p = p
            .with_target(caption, GaussianTarget::constant(shape, *mu, sigma))
            .unwrap();
    }
    p
}

pub fn edits(shape: LatentShape, captions: [&str; 2]) -> Vec<InstanceEdit> {
    let [m1, m2] = two_masks(shape);
    vec![
        InstanceEdit::new("one", captions[0], m1),
        InstanceEdit::new("two", captions[1], m2),
    ]
}

/// Deterministic off-manifold source: a smooth ramp per channel.
pub fn ramp(shape: LatentShape) -> LatentSequence {
    let data = (0..shape.len())
        .map(|i| ((i * 37 % 101) as f64 / 101.0 - 0.5) * 1.6)
        .collect();
    LatentSequence::new(shape, data, 0).unwrap()
}

/// Values of `z` under `masks`, frame by frame, every channel.
pub fn masked_values(z: &LatentSequence, masks: &[PixelMask]) -> Vec<f64> {
    let c = z.shape().channels;
    let mut out = Vec::new();
    for (k, m) in masks.iter().enumerate() {
        let f = z.frame(k);
        for (px, &b) in m.bits().iter().enumerate() {
            if b {
                out.extend_from_slice(&f[px * c..(px + 1) * c]);
            }
        }
    }
    out
}

pub fn max_abs(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

pub fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}
