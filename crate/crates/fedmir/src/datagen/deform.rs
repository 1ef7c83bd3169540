//! Image deformations applied per client.

use crate::error::{Error, Result};

fn square_side(len: usize) -> Result<usize> {
    let side = (len as f64).sqrt().round() as usize;
    if side * side != len {
        return Err(Error::input(format!("image length {len} is not a perfect square")));
    }
    Ok(side)
}

/// Nearest-neighbor rotation about the image center; pixels mapped from
/// outside the frame become 0. Values stay in `[0,1]`.
pub fn rotate_image(image: &[f64], angle_degrees: f64) -> Result<Vec<f64>> {
    if !angle_degrees.is_finite() {
        return Err(Error::input("rotation angle must be finite"));
    }
    let side = square_side(image.len())?;
    let ctr = (side as f64 - 1.0) / 2.0;
    let theta = angle_degrees.to_radians();
    let (sin, cos) = theta.sin_cos();
    let mut out = vec![0.0; image.len()];
    for r in 0..side {
        let dy = r as f64 - ctr;
        for c in 0..side {
            let dx = c as f64 - ctr;
            let sx = (cos * dx + sin * dy + ctr).round();
            let sy = (-sin * dx + cos * dy + ctr).round();
            if sx >= 0.0 && sy >= 0.0 && (sx as usize) < side && (sy as usize) < side {
                out[r * side + c] = image[sy as usize * side + sx as usize];
            }
        }
    }
    Ok(out)
}

/// Scales every value by `factor`, clamping at 1. Factor 1 is the identity.
pub fn adjust_brightness(image: &[f64], factor: f64) -> Result<Vec<f64>> {
    if !factor.is_finite() || factor <= 0.0 {
        return Err(Error::input("brightness factor must be positive"));
    }
    Ok(image.iter().map(|&v| (v * factor).min(1.0)).collect())
}
