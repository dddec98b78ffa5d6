//! Geometric preprocessing: bilinear resize and the random affine
//! augmentation (zoom, rotation, shear, translation).

use rand::Rng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::data::DataError;
use crate::tensor::Tensor;

/// Bilinear resize of a `[3,H,W]` image with corner-aligned sampling:
/// source coordinate `= dst · (in−1)/(out−1)` for `out > 1`, and the
/// center `(in−1)/2` for `out == 1`. Matching dimensions return the input
/// bit-identically.
pub fn resize_bilinear(image: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor, DataError> {
    let shape = image.shape();
    if shape.len() != 3 || shape[0] != 3 || out_h == 0 || out_w == 0 {
        return Err(DataError::Decode(format!(
            "resize expects [3,H,W] and positive extents, got {shape:?} -> ({out_h},{out_w})"
        )));
    }
    let (h, w) = (shape[1], shape[2]);
    if h == out_h && w == out_w {
        return Ok(image.clone());
    }
    let src_y = |y: usize| -> f32 {
        if out_h > 1 {
            y as f32 * (h - 1) as f32 / (out_h - 1) as f32
        } else {
            (h - 1) as f32 / 2.0
        }
    };
    let src_x = |x: usize| -> f32 {
        if out_w > 1 {
            x as f32 * (w - 1) as f32 / (out_w - 1) as f32
        } else {
            (w - 1) as f32 / 2.0
        }
    };
    let plane = h * w;
    let mut data = vec![0.0f32; 3 * out_h * out_w];
    for y in 0..out_h {
        let sy = src_y(y);
        let y0 = sy.floor() as usize;
        let y1 = (y0 + 1).min(h - 1);
        let fy = sy - y0 as f32;
        for x in 0..out_w {
            let sx = src_x(x);
            let x0 = sx.floor() as usize;
            let x1 = (x0 + 1).min(w - 1);
            let fx = sx - x0 as f32;
            for c in 0..3 {
                let p = &image.data()[c * plane..(c + 1) * plane];
                let v = p[y0 * w + x0] * (1.0 - fy) * (1.0 - fx)
                    + p[y0 * w + x1] * (1.0 - fy) * fx
                    + p[y1 * w + x0] * fy * (1.0 - fx)
                    + p[y1 * w + x1] * fy * fx;
                data[(c * out_h + y) * out_w + x] = v;
            }
        }
    }
    Ok(Tensor::new(vec![3, out_h, out_w], data).expect("length computed"))
}

/// Augmentation parameter ranges; all zero means identity.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentConfig {
    pub rotate_deg_max: f32,
    pub shear_max: f32,
    pub translate_frac_max: f32,
    pub zoom_range: f32,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            rotate_deg_max: 15.0,
            shear_max: 0.08,
            translate_frac_max: 0.08,
            zoom_range: 0.10,
        }
    }
}

impl AugmentConfig {
    pub fn identity() -> Self {
        AugmentConfig {
            rotate_deg_max: 0.0,
            shear_max: 0.0,
            translate_frac_max: 0.0,
            zoom_range: 0.0,
        }
    }

    pub fn is_identity(&self) -> bool {
        self.rotate_deg_max == 0.0
            && self.shear_max == 0.0
            && self.translate_frac_max == 0.0
            && self.zoom_range == 0.0
    }
}

/// Single deterministic affine transform composed in the order
/// zoom -> rotate -> shear -> translate, about the image center, with
/// bilinear resampling and nearest-border fill. Output stays in `[0,1]`.
pub fn affine_transform(
    image: &Tensor,
    zoom: f32,
    rotate_deg: f32,
    shear: f32,
    translate_x_frac: f32,
    translate_y_frac: f32,
) -> Result<Tensor, DataError> {
    let shape = image.shape();
    if shape.len() != 3 || shape[0] != 3 {
        return Err(DataError::Decode(format!("affine expects [3,H,W], got {shape:?}")));
    }
    if zoom == 1.0
        && rotate_deg == 0.0
        && shear == 0.0
        && translate_x_frac == 0.0
        && translate_y_frac == 0.0
    {
        return Ok(image.clone());
    }
    let (h, w) = (shape[1], shape[2]);
    let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    // Transform math in f64 so a 360-degree rotation lands back on the
    // pixel grid to well within the resampling tolerance.
    let theta = (rotate_deg as f64).to_radians();
    let (sin, cos) = theta.sin_cos();
    let (zoom, shear) = (zoom as f64, shear as f64);

    // Forward linear map M = Shear * Rot * Zoom on centered coordinates,
    // then translation. Resampling inverts it per output pixel.
    let m00 = zoom * (cos + shear * sin);
    let m01 = zoom * (-sin + shear * cos);
    let m10 = zoom * sin;
    let m11 = zoom * cos;
    let det = m00 * m11 - m01 * m10;
    if det.abs() < 1e-12 {
        return Err(DataError::Decode("degenerate affine transform".to_string()));
    }
    let (i00, i01, i10, i11) = (m11 / det, -m01 / det, -m10 / det, m00 / det);
    let tx = translate_x_frac as f64 * w as f64;
    let ty = translate_y_frac as f64 * h as f64;

    let plane = h * w;
    let mut data = vec![0.0f32; 3 * plane];
    for y in 0..h {
        for x in 0..w {
            let ox = x as f64 - cx - tx;
            let oy = y as f64 - cy - ty;
            let sx = i00 * ox + i01 * oy + cx;
            let sy = i10 * ox + i11 * oy + cy;
            // Nearest-border fill: clamp the sample point into the image.
            let sx = (sx.clamp(0.0, (w - 1) as f64)) as f32;
            let sy = (sy.clamp(0.0, (h - 1) as f64)) as f32;
            let x0 = sx.floor() as usize;
            let y0 = sy.floor() as usize;
            let x1 = (x0 + 1).min(w - 1);
            let y1 = (y0 + 1).min(h - 1);
            let fx = sx - x0 as f32;
            let fy = sy - y0 as f32;
            for c in 0..3 {
                let p = &image.data()[c * plane..(c + 1) * plane];
                let v = p[y0 * w + x0] * (1.0 - fy) * (1.0 - fx)
                    + p[y0 * w + x1] * (1.0 - fy) * fx
                    + p[y1 * w + x0] * fy * (1.0 - fx)
                    + p[y1 * w + x1] * fy * fx;
                data[(c * h + y) * w + x] = v.clamp(0.0, 1.0);
            }
        }
    }
    Ok(Tensor::new(vec![3, h, w], data).expect("length computed"))
}

/// One random affine draw from the configured ranges.
pub fn augment(
    image: &Tensor,
    config: &AugmentConfig,
    rng: &mut ChaCha20Rng,
) -> Result<Tensor, DataError> {
    if config.is_identity() {
        return Ok(image.clone());
    }
    let range = |rng: &mut ChaCha20Rng, r: f32| -> f32 {
        if r == 0.0 {
            0.0
        } else {
            rng.random_range(-r..=r)
        }
    };
    let zoom = 1.0 + range(rng, config.zoom_range);
    let rot = range(rng, config.rotate_deg_max);
    let shear = range(rng, config.shear_max);
    let tx = range(rng, config.translate_frac_max);
    let ty = range(rng, config.translate_frac_max);
    affine_transform(image, zoom, rot, shear, tx, ty)
}
