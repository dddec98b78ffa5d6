//! Desk-scale convolutional classifier with per-layer feature taps.
//!
//! Three conv blocks (3->16->32->64, each 3x3 with relu; the first two
//! max-pool by 2, the last global-average-pools to a 64-vector) and a
//! final linear layer to class logits. The tap manifest names the
//! activation points whose features feed the Gaussian statistics; spatial
//! maps are reduced to per-channel vectors by global average pooling.

pub mod checkpoint;
pub mod train;

use std::fmt;

use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::rng::{derive_seed, seeded};
use crate::tensor::{io as ten_io, Tape, Tensor, TensorError, Val};

/// Feature tap points, one entry per ensemble layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TapPoint {
    Block1Pool,
    Block2Pool,
    Block3Pool,
    Penultimate,
}

impl TapPoint {
    pub fn feature_dim(self) -> usize {
        match self {
            TapPoint::Block1Pool => 16,
            TapPoint::Block2Pool => 32,
            TapPoint::Block3Pool | TapPoint::Penultimate => 64,
        }
    }
}

/// The default four-tap manifest: after each block's pooling, plus the
/// penultimate vector feeding the classifier head.
pub fn default_tap_manifest() -> Vec<TapPoint> {
    vec![
        TapPoint::Block1Pool,
        TapPoint::Block2Pool,
        TapPoint::Block3Pool,
        TapPoint::Penultimate,
    ]
}

#[derive(Debug)]
pub enum ModelError {
    Tensor(TensorError),
    /// Batch shape does not match `[N,3,size,size]`.
    BadInput { expected: Vec<usize>, got: Vec<usize> },
    BadConfig(String),
}

impl fmt::Display for ModelError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Tensor(e) => write!(f, "{e}"),
            Self::BadInput { expected, got } => {
                write!(f, "bad input shape {got:?}, expected {expected:?}")
            }
            Self::BadConfig(msg) => write!(f, "{msg}"),
        }
    }
}

impl std::error::Error for ModelError {}

impl From<TensorError> for ModelError {
    fn from(e: TensorError) -> Self {
        ModelError::Tensor(e)
    }
}

/// Handles into a tape holding one recorded forward pass.
pub struct TapedForward {
    pub logits: Val,
    pub taps: Vec<Val>,
    pub params: Vec<Val>,
}

const PARAM_NAMES: [&str; 8] = [
    "conv1.weight",
    "conv1.bias",
    "conv2.weight",
    "conv2.bias",
    "conv3.weight",
    "conv3.bias",
    "fc.weight",
    "fc.bias",
];

/// The classifier. Parameters are owned tensors in a fixed canonical
/// order; a trained model is immutable and safe for concurrent forward
/// passes (each builds its own tape).
#[derive(Debug, Clone)]
pub struct SmallCnn {
    num_classes: usize,
    input_size: usize,
    taps: Vec<TapPoint>,
    params: Vec<Tensor>,
}

impl SmallCnn {
    /// Kaiming-uniform (fan-in, relu gain) initialization, zero biases,
    /// fully determined by the seed.
    pub fn new(num_classes: usize, input_size: usize, seed: u64) -> Result<Self, ModelError> {
        if num_classes < 2 {
            return Err(ModelError::BadConfig(format!(
                "need at least 2 classes, got {num_classes}"
            )));
        }
        if input_size < 8 {
            return Err(ModelError::BadConfig(format!(
                "input size {input_size} too small for three pooling stages"
            )));
        }
        let shapes: [(&str, Vec<usize>); 8] = [
            ("conv1.weight", vec![16, 3, 3, 3]),
            ("conv1.bias", vec![16]),
            ("conv2.weight", vec![32, 16, 3, 3]),
            ("conv2.bias", vec![32]),
            ("conv3.weight", vec![64, 32, 3, 3]),
            ("conv3.bias", vec![64]),
            ("fc.weight", vec![num_classes, 64]),
            ("fc.bias", vec![num_classes]),
        ];
        let params = shapes
            .into_iter()
            .map(|(name, shape)| {
                let t = if name.ends_with("bias") {
                    Tensor::zeros(shape)
                } else {
                    let fan_in: usize = shape[1..].iter().product();
                    let bound = (6.0f32 / fan_in as f32).sqrt();
                    let mut rng = seeded(derive_seed(seed, &format!("init/{name}")));
                    Tensor::from_fn(shape, |_| rng.random_range(-bound..bound))
                };
                t.with_requires_grad(true)
            })
            .collect();
        Ok(SmallCnn {
            num_classes,
            input_size,
            taps: default_tap_manifest(),
            params,
        })
    }

    pub fn with_taps(mut self, taps: Vec<TapPoint>) -> Self {
        self.taps = taps;
        self
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn input_size(&self) -> usize {
        self.input_size
    }

    pub fn taps(&self) -> &[TapPoint] {
        &self.taps
    }

    pub fn num_taps(&self) -> usize {
        self.taps.len()
    }

    /// `smallcnn(3-16-32-64)->C@S` style descriptor; persisted in
    /// checkpoints and checked on load.
    pub fn descriptor(&self) -> String {
        format!("smallcnn-16-32-64-c{}-in{}", self.num_classes, self.input_size)
    }

    pub fn param_names(&self) -> &'static [&'static str] {
        &PARAM_NAMES
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    pub(crate) fn set_params(&mut self, params: Vec<Tensor>) {
        debug_assert_eq!(params.len(), self.params.len());
        self.params = params;
    }

    /// SHA-256 over the canonical parameter serialization; identifies the
    /// exact weights a detector was fitted against.
    pub fn digest(&self) -> String {
        let mut hasher = Sha256::new();
        for (name, t) in PARAM_NAMES.iter().zip(&self.params) {
            hasher.update(name.as_bytes());
            hasher.update(ten_io::encode(t));
        }
        let out = hasher.finalize();
        out.iter().map(|b| format!("{b:02x}")).collect()
    }

    fn check_input(&self, batch: &Tensor) -> Result<(), ModelError> {
        let s = batch.shape();
        if s.len() != 4 || s[1] != 3 || s[2] != self.input_size || s[3] != self.input_size {
            return Err(ModelError::BadInput {
                expected: vec![0, 3, self.input_size, self.input_size],
                got: s.to_vec(),
            });
        }
        Ok(())
    }

    /// Record the forward pass on `tape` starting from an already-recorded
    /// input value. Returns the logits, the tap features (each tap reduced
    /// to an `[N, dim]` vector, spatial maps via global average pooling),
    /// and the parameter leaf handles in canonical order.
    pub fn forward_on_tape(
        &self,
        tape: &mut Tape,
        input: Val,
    ) -> Result<TapedForward, ModelError> {
        let p: Vec<Val> = self.params.iter().map(|t| tape.leaf(t)).collect();

        let c1 = tape.conv2d(input, p[0], 1, 1)?;
        let c1b = tape.add_bias(c1, p[1])?;
        let a1 = tape.relu(c1b)?;
        let b1 = tape.maxpool2d(a1, 2)?;

        let c2 = tape.conv2d(b1, p[2], 1, 1)?;
        let c2b = tape.add_bias(c2, p[3])?;
        let a2 = tape.relu(c2b)?;
        let b2 = tape.maxpool2d(a2, 2)?;

        let c3 = tape.conv2d(b2, p[4], 1, 1)?;
        let c3b = tape.add_bias(c3, p[5])?;
        let a3 = tape.relu(c3b)?;
        let b3 = tape.global_avg_pool(a3)?;

        let logits = tape.linear(b3, p[6], Some(p[7]))?;

        let mut taps = Vec::with_capacity(self.taps.len());
        for tap in &self.taps {
            let v = match tap {
                TapPoint::Block1Pool => tape.global_avg_pool(b1)?,
                TapPoint::Block2Pool => tape.global_avg_pool(b2)?,
                TapPoint::Block3Pool | TapPoint::Penultimate => b3,
            };
            taps.push(v);
        }
        Ok(TapedForward { logits, taps, params: p })
    }

    /// Forward pass with feature taps on a private tape.
    pub fn forward_with_taps(&self, batch: &Tensor) -> Result<(Tensor, Vec<Tensor>), ModelError> {
        self.check_input(batch)?;
        let mut tape = Tape::new();
        let x = tape.constant(batch);
        let fwd = self.forward_on_tape(&mut tape, x)?;
        Ok((
            tape.tensor(fwd.logits),
            fwd.taps.iter().map(|&v| tape.tensor(v)).collect(),
        ))
    }

    /// Logits only.
    pub fn logits(&self, batch: &Tensor) -> Result<Tensor, ModelError> {
        Ok(self.forward_with_taps(batch)?.0)
    }

    /// Predicted class per sample.
    pub fn predict(&self, batch: &Tensor) -> Result<Vec<usize>, ModelError> {
        Ok(self.logits(batch)?.argmax_rows()?)
    }
}

/// Stack dataset items `[start, end)` into a `[B,3,S,S]` batch plus labels.
pub fn batch_of(items: &[(Tensor, usize)]) -> Result<(Tensor, Vec<usize>), TensorError> {
    let images: Vec<Tensor> = items.iter().map(|(t, _)| t.clone()).collect();
    let labels = items.iter().map(|(_, l)| *l).collect();
    Ok((Tensor::stack(&images)?, labels))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_parameters_give_uniform_probabilities() {
        let mut model = SmallCnn::new(4, 16, 1).unwrap();
        let zeroed: Vec<Tensor> = model
            .params()
            .iter()
            .map(|t| Tensor::zeros(t.shape().to_vec()).with_requires_grad(true))
            .collect();
        model.set_params(zeroed);
        let x = Tensor::zeros(vec![2, 3, 16, 16]);
        let (logits, taps) = model.forward_with_taps(&x).unwrap();
        assert!(logits.data().iter().all(|&v| v == 0.0));
        for tap in &taps {
            assert!(tap.data().iter().all(|&v| v == 0.0));
        }
        let probs = logits.softmax_rows().unwrap();
        assert!(probs.data().iter().all(|&p| (p - 0.25).abs() < 1e-7));
    }

    #[test]
    fn batch_independence_per_sample() {
        let model = SmallCnn::new(2, 16, 7).unwrap();
        let single = Tensor::from_fn(vec![1, 3, 16, 16], |i| ((i * 31) % 97) as f32 / 97.0);
        let mut big = Tensor::from_fn(vec![8, 3, 16, 16], |i| ((i * 17) % 89) as f32 / 89.0);
        // Plant the single sample at batch position 3.
        let n = single.numel();
        big.data_mut()[3 * n..4 * n].copy_from_slice(single.data());

        let (l1, t1) = model.forward_with_taps(&single).unwrap();
        let (l8, t8) = model.forward_with_taps(&big).unwrap();
        for (a, b) in l1.data().iter().zip(&l8.data()[3 * 2..4 * 2]) {
            assert!((a - b).abs() < 1e-6);
        }
        for (tap1, tap8) in t1.iter().zip(&t8) {
            let d = tap1.numel();
            for (a, b) in tap1.data().iter().zip(&tap8.data()[3 * d..4 * d]) {
                assert!((a - b).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn last_tap_matches_reference_forward() {
        // Straight-line re-implementation of the forward pass for the last
        // tap (penultimate vector), independent of the tape.
        let model = SmallCnn::new(2, 8, 3).unwrap();
        let x = Tensor::from_fn(vec![1, 3, 8, 8], |i| ((i * 7) % 23) as f32 / 23.0);
        let (_, taps) = model.forward_with_taps(&x).unwrap();
        let got = taps.last().unwrap();

        let conv = |inp: &Tensor, w: &Tensor, b: &Tensor| -> Tensor {
            let (c_in, h, wd) = (inp.shape()[1], inp.shape()[2], inp.shape()[3]);
            let f = w.shape()[0];
            let mut out = Tensor::zeros(vec![1, f, h, wd]);
            for of in 0..f {
                for y in 0..h {
                    for xx in 0..wd {
                        let mut acc = b.data()[of] as f64;
                        for ic in 0..c_in {
                            for ky in 0..3usize {
                                for kx in 0..3usize {
                                    let iy = y as isize + ky as isize - 1;
                                    let ix = xx as isize + kx as isize - 1;
                                    if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                        continue;
                                    }
                                    acc += inp.data()[(ic * h + iy as usize) * wd + ix as usize]
                                        as f64
                                        * w.data()[((of * c_in + ic) * 3 + ky) * 3 + kx] as f64;
                                }
                            }
                        }
                        out.data_mut()[(of * h + y) * wd + xx] = (acc as f32).max(0.0);
                    }
                }
            }
            out
        };
        let pool = |inp: &Tensor| -> Tensor {
            let (c, h, w) = (inp.shape()[1], inp.shape()[2], inp.shape()[3]);
            let (oh, ow) = (h / 2, w / 2);
            Tensor::from_fn(vec![1, c, oh, ow], |i| {
                let (ch, rest) = (i / (oh * ow), i % (oh * ow));
                let (y, x) = (rest / ow, rest % ow);
                let mut best = f32::NEG_INFINITY;
                for dy in 0..2 {
                    for dx in 0..2 {
                        best = best.max(inp.data()[(ch * h + 2 * y + dy) * w + 2 * x + dx]);
                    }
                }
                best
            })
        };
        let p = model.params();
        let b1 = pool(&conv(&x, &p[0], &p[1]));
        let b2 = pool(&conv(&b1, &p[2], &p[3]));
        let a3 = conv(&b2, &p[4], &p[5]);
        let (c, h, w) = (a3.shape()[1], a3.shape()[2], a3.shape()[3]);
        let expected = Tensor::from_fn(vec![1, c], |ch| {
            let acc: f64 = a3.data()[ch * h * w..(ch + 1) * h * w]
                .iter()
                .map(|&v| v as f64)
                .sum();
            (acc / (h * w) as f64) as f32
        });
        for (g, e) in got.data().iter().zip(expected.data()) {
            assert!((g - e).abs() < 1e-5, "{g} vs {e}");
        }
    }

    #[test]
    fn wrong_input_shape_is_an_error() {
        let model = SmallCnn::new(2, 16, 0).unwrap();
        let x = Tensor::zeros(vec![1, 1, 16, 16]);
        assert!(matches!(model.logits(&x), Err(ModelError::BadInput { .. })));
    }

    #[test]
    fn tap_dims_match_manifest() {
        let model = SmallCnn::new(2, 16, 5).unwrap();
        let x = Tensor::zeros(vec![2, 3, 16, 16]);
        let (_, taps) = model.forward_with_taps(&x).unwrap();
        assert_eq!(taps.len(), model.num_taps());
        for (tap, point) in taps.iter().zip(model.taps()) {
            assert_eq!(tap.shape(), &[2, point.feature_dim()]);
        }
    }

    #[test]
    fn logit_argmax_invariant_under_positive_rescale() {
        let model = SmallCnn::new(3, 16, 9).unwrap();
        let x = Tensor::from_fn(vec![2, 3, 16, 16], |i| ((i * 13) % 31) as f32 / 31.0);
        let logits = model.logits(&x).unwrap();
        let scaled = logits.scale(3.7).unwrap();
        assert_eq!(logits.argmax_rows().unwrap(), scaled.argmax_rows().unwrap());
        assert_eq!(
            logits.argmax_rows().unwrap(),
            logits.softmax_rows().unwrap().argmax_rows().unwrap()
        );
    }

    #[test]
    fn digest_tracks_parameters() {
        let a = SmallCnn::new(2, 16, 1).unwrap();
        let b = SmallCnn::new(2, 16, 1).unwrap();
        let c = SmallCnn::new(2, 16, 2).unwrap();
        assert_eq!(a.digest(), b.digest());
        assert_ne!(a.digest(), c.digest());
    }
}
