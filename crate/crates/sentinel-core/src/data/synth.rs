//! Synthetic blood-smear-like dataset: smooth pink elliptical blobs on a
//! dark background, with small dark dots inside for the "parasitized"
//! class. The OOD variant shifts background texture, hue, and blob
//! eccentricity while keeping the same label semantics.

use rand::Rng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::data::LabeledDataset;
use crate::rng::{derive_seed, seeded};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub n_per_class: usize,
    pub img_size: usize,
    pub seed: u64,
    pub ood: bool,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig { n_per_class: 150, img_size: 125, seed: 0, ood: false }
    }
}

fn sigmoid(x: f32) -> f32 {
    1.0 / (1.0 + (-x).exp())
}

struct Palette {
    bg_base: [f32; 3],
    bg_wave_amp: f32,
    bg_wave_freq: f32,
    cell: [f32; 3],
    dot: [f32; 3],
    // (min, max) of minor/major radius ratio.
    squash: (f32, f32),
}

const IN_DIST: Palette = Palette {
    bg_base: [0.10, 0.06, 0.08],
    bg_wave_amp: 0.025,
    bg_wave_freq: 2.0,
    cell: [0.88, 0.60, 0.64],
    dot: [0.22, 0.10, 0.26],
    squash: (0.82, 1.0),
};

const OOD: Palette = Palette {
    bg_base: [0.33, 0.37, 0.34],
    bg_wave_amp: 0.06,
    bg_wave_freq: 9.0,
    cell: [0.54, 0.52, 0.78],
    dot: [0.15, 0.08, 0.20],
    squash: (0.48, 0.64),
};

fn render_cell(size: usize, class: usize, pal: &Palette, rng: &mut ChaCha20Rng) -> Tensor {
    let s = size as f32;
    let plane = size * size;
    let mut data = vec![0.0f32; 3 * plane];

    let wave_dir: f32 = rng.random_range(0.0..std::f32::consts::PI);
    let wave_phase: f32 = rng.random_range(0.0..std::f32::consts::TAU);
    let (wdy, wdx) = wave_dir.sin_cos();

    let cx = s * 0.5 + s * rng.random_range(-0.06..0.06);
    let cy = s * 0.5 + s * rng.random_range(-0.06..0.06);
    let major = s * rng.random_range(0.26..0.34);
    let minor = major * rng.random_range(pal.squash.0..pal.squash.1);
    let ori: f32 = rng.random_range(0.0..std::f32::consts::PI);
    let (osin, ocos) = ori.sin_cos();
    let edge = 14.0;

    let mut cell_color = pal.cell;
    for c in cell_color.iter_mut() {
        *c += rng.random_range(-0.04..0.04);
    }

    // Parasite dots, placed well inside the blob.
    let n_dots = if class == 1 { rng.random_range(1..=3usize) } else { 0 };
    let dots: Vec<(f32, f32, f32)> = (0..n_dots)
        .map(|_| {
            let ang: f32 = rng.random_range(0.0..std::f32::consts::TAU);
            let rad: f32 = rng.random_range(0.0..0.55);
            let dx = ang.cos() * rad * major;
            let dy = ang.sin() * rad * minor;
            let radius = s * rng.random_range(0.05..0.08);
            (cx + dx * ocos - dy * osin, cy + dx * osin + dy * ocos, radius)
        })
        .collect();

    let freq = pal.bg_wave_freq * std::f32::consts::TAU / s;
    for y in 0..size {
        for x in 0..size {
            let i = y * size + x;
            let fx = x as f32;
            let fy = y as f32;
            let wave = (freq * (fx * wdx + fy * wdy) + wave_phase).sin() * pal.bg_wave_amp;
            let grain: f32 = rng.random_range(-0.015..0.015);

            // Elliptical radius in the blob frame.
            let rx = (fx - cx) * ocos + (fy - cy) * osin;
            let ry = -(fx - cx) * osin + (fy - cy) * ocos;
            let re = ((rx / major).powi(2) + (ry / minor).powi(2)).sqrt();
            let alpha = sigmoid(edge * (1.0 - re));

            let mut dot_alpha = 0.0f32;
            for &(dxc, dyc, radius) in &dots {
                let rd = ((fx - dxc).powi(2) + (fy - dyc).powi(2)).sqrt() / radius;
                dot_alpha = dot_alpha.max(sigmoid(10.0 * (1.0 - rd)));
            }

            for c in 0..3 {
                let bg = pal.bg_base[c] + wave + grain;
                let shade = 1.0 - 0.12 * re.min(1.0);
                let mut v = bg * (1.0 - alpha) + cell_color[c] * shade * alpha;
                v = v * (1.0 - dot_alpha) + pal.dot[c] * dot_alpha;
                data[c * plane + i] = v.clamp(0.0, 1.0);
            }
        }
    }
    Tensor::new(vec![3, size, size], data).expect("length computed")
}

/// Generate the synthetic two-class dataset. Class 0 is "healthy" (blob
/// only), class 1 is "parasitized" (blob plus 1-3 dark dots). Fully
/// deterministic in the seed.
pub fn synth_cells(config: &SynthConfig) -> LabeledDataset {
    let pal = if config.ood { &OOD } else { &IN_DIST };
    let mut items = Vec::with_capacity(config.n_per_class * 2);
    for class in 0..2usize {
        for i in 0..config.n_per_class {
            let tag = format!("synth/{}/{class}/{i}", u8::from(config.ood));
            let mut rng = seeded(derive_seed(config.seed, &tag));
            items.push((render_cell(config.img_size, class, pal, &mut rng), class));
        }
    }
    LabeledDataset::new(items, vec!["healthy".to_string(), "parasitized".to_string()])
        .expect("generator emits consistent shapes and labels")
}
