//! Procedural glyph corpus: a small MNIST-like image source generated from
//! per-class templates (a centred ring for class 0, random strokes for the
//! rest). Each sample is a jittered, noised copy of its class template, so
//! classes are linearly separable while every individual sample carries
//! unique pixel noise (which is what membership inference feeds on).

use rand::Rng;

use crate::datagen::{DataPoint, Group};
use crate::error::{Error, Result};
use crate::stream::{self, tag};

const STROKES_PER_GLYPH: usize = 4;
const MAX_JITTER: i64 = 4;
const NOISE_AMPLITUDE: f64 = 0.5;

/// Generates `count` labeled glyph images of `side` x `side` pixels.
pub fn glyph_corpus(count: usize, side: usize, num_classes: usize, seed: u64) -> Result<Vec<DataPoint>> {
    if side < 8 {
        return Err(Error::input("glyph side must be at least 8"));
    }
    if num_classes < 2 {
        return Err(Error::input("glyph corpus needs at least 2 classes"));
    }
    let templates: Vec<Vec<f64>> =
        (0..num_classes).map(|c| class_template(side, seed, c as u64)).collect();

    Ok((0..count)
        .map(|i| {
            let label = i % num_classes;
            let mut rng = stream::rng(seed, &[tag::GLYPH_SAMPLE, i as u64]);
            let dx = rng.gen_range(-MAX_JITTER..=MAX_JITTER);
            let dy = rng.gen_range(-MAX_JITTER..=MAX_JITTER);
            let mut features = translate(&templates[label], side, dx, dy);
            for v in &mut features {
                *v = (*v + rng.gen_range(-NOISE_AMPLITUDE..NOISE_AMPLITUDE)).clamp(0.0, 1.0);
            }
            DataPoint { features, label, group: Group::Majority, source_index: i }
        })
        .collect())
}

fn class_template(side: usize, seed: u64, class: u64) -> Vec<f64> {
    let mut canvas = vec![0.0; side * side];
    if class == 0 {
        // Class 0 is a centred ring, like the digit it stands in for: it reads
        // the same under rotation, so the positive class stays recognisable
        // across deformation ranges while the stroke classes do not.
        let mid = (side as f64 - 1.0) / 2.0;
        let radius = side as f64 * 0.3;
        for r in 0..side {
            for c in 0..side {
                let d = ((r as f64 - mid).powi(2) + (c as f64 - mid).powi(2)).sqrt();
                if (d - radius).abs() <= 1.2 {
                    canvas[r * side + c] = 1.0;
                }
            }
        }
    } else {
        let mut rng = stream::rng(seed, &[tag::GLYPH_TEMPLATE, class]);
        let lo = 2.0;
        let hi = (side - 3) as f64;
        for _ in 0..STROKES_PER_GLYPH {
            let (r0, c0) = (rng.gen_range(lo..hi), rng.gen_range(lo..hi));
            let (r1, c1) = (rng.gen_range(lo..hi), rng.gen_range(lo..hi));
            let steps = 3 * side;
            for s in 0..=steps {
                let t = s as f64 / steps as f64;
                let r = (r0 + t * (r1 - r0)).round() as usize;
                let c = (c0 + t * (c1 - c0)).round() as usize;
                canvas[r * side + c] = 1.0;
            }
        }
    }
    let blurred = box_blur(&canvas, side);
    let max = blurred.iter().cloned().fold(0.0, f64::max);
    blurred.iter().map(|v| v / max).collect()
}

fn box_blur(img: &[f64], side: usize) -> Vec<f64> {
    let mut out = vec![0.0; img.len()];
    for r in 0..side {
        for c in 0..side {
            let mut sum = 0.0;
            for dr in -1i64..=1 {
                for dc in -1i64..=1 {
                    let rr = r as i64 + dr;
                    let cc = c as i64 + dc;
                    if rr >= 0 && cc >= 0 && (rr as usize) < side && (cc as usize) < side {
                        sum += img[rr as usize * side + cc as usize];
                    }
                }
            }
            out[r * side + c] = sum / 9.0;
        }
    }
    out
}

fn translate(img: &[f64], side: usize, dx: i64, dy: i64) -> Vec<f64> {
    let mut out = vec![0.0; img.len()];
    for r in 0..side {
        for c in 0..side {
            let sr = r as i64 - dy;
            let sc = c as i64 - dx;
            if sr >= 0 && sc >= 0 && (sr as usize) < side && (sc as usize) < side {
                out[r * side + c] = img[sr as usize * side + sc as usize];
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn corpus_is_deterministic_and_balanced() {
        let a = glyph_corpus(100, 16, 10, 5).unwrap();
        let b = glyph_corpus(100, 16, 10, 5).unwrap();
        assert_eq!(a.len(), 100);
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.features, y.features);
            assert_eq!(x.label, y.label);
        }
        for c in 0..10 {
            assert_eq!(a.iter().filter(|p| p.label == c).count(), 10);
        }
    }

    #[test]
    fn pixels_are_in_unit_range() {
        let pts = glyph_corpus(50, 12, 4, 9).unwrap();
        for p in &pts {
            assert_eq!(p.features.len(), 144);
            assert!(p.features.iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }

    #[test]
    fn samples_of_one_class_differ_individually() {
        let pts = glyph_corpus(20, 16, 2, 3).unwrap();
        assert_ne!(pts[0].features, pts[2].features);
    }

    #[test]
    fn tiny_side_is_rejected() {
        assert!(matches!(glyph_corpus(10, 4, 2, 0), Err(Error::Input(_))));
    }
}
