//! Dense layers, tanh MLPs and the 1-D convolutional goal-window encoder.

use std::ops::Range;

use rand::Rng;

use crate::error::{Error, Result};

use super::params::{ParamId, ParamStore};
use super::tape::{Tape, Var};

#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub inputs: usize,
    pub outputs: usize,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        inputs: usize,
        outputs: usize,
        gain: f64,
        rng: &mut R,
    ) -> Self {
        let weight = store.add_uniform(format!("{name}.w"), inputs, outputs, gain, rng);
        let bias = store.add(format!("{name}.b"), super::Tensor::zeros(1, outputs));
        Self {
            weight,
            bias,
            inputs,
            outputs,
        }
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Var {
        let w = tape.param(self.weight);
        let b = tape.param(self.bias);
        let y = tape.matmul(x, w);
        tape.add_bias(y, b)
    }
}

/// Fully connected network with tanh hidden activations and a linear output.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

impl Mlp {
    /// `sizes` lists every width from input to output. The last layer's
    /// initial weights are multiplied by `out_gain`.
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        sizes: &[usize],
        out_gain: f64,
        rng: &mut R,
    ) -> Self {
        assert!(sizes.len() >= 2, "an MLP needs input and output sizes");
        let n = sizes.len() - 1;
        let layers = (0..n)
            .map(|i| {
                let gain = if i + 1 == n { out_gain } else { 1.0 };
                Linear::new(store, &format!("{name}.{i}"), sizes[i], sizes[i + 1], gain, rng)
            })
            .collect();
        Self { layers }
    }

    pub fn inputs(&self) -> usize {
        self.layers[0].inputs
    }

    pub fn outputs(&self) -> usize {
        self.layers.last().unwrap().outputs
    }

    pub fn forward(&self, tape: &mut Tape, mut x: Var) -> Var {
        let n = self.layers.len();
        for (i, layer) in self.layers.iter().enumerate() {
            x = layer.forward(tape, x);
            if i + 1 < n {
                x = tape.tanh(x);
            }
        }
        x
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvSpec {
    pub kernel: usize,
    pub stride: usize,
    pub channels: usize,
}

/// Strided 1-D convolutions over the time axis of a `W × F` goal window,
/// each followed by tanh, then a linear map of the flattened result to the
/// latent size.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowEncoder {
    pub window: usize,
    pub features: usize,
    pub convs: Vec<(ConvSpec, Linear)>,
    pub head: Linear,
}

pub fn conv_output_len(len: usize, kernel: usize, stride: usize) -> Option<usize> {
    (kernel <= len && stride > 0).then(|| (len - kernel) / stride + 1)
}

impl WindowEncoder {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        window: usize,
        features: usize,
        convs: &[ConvSpec],
        latent: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let mut len = window;
        let mut ch = features;
        let mut layers = Vec::new();
        for (i, spec) in convs.iter().enumerate() {
            len = conv_output_len(len, spec.kernel, spec.stride).ok_or_else(|| {
                Error::Config(format!(
                    "conv layer {i} (kernel {}, stride {}) does not fit a length-{len} input",
                    spec.kernel, spec.stride
                ))
            })?;
            let lin = Linear::new(store, &format!("{name}.conv{i}"), spec.kernel * ch, spec.channels, 1.0, rng);
            layers.push((*spec, lin));
            ch = spec.channels;
        }
        let head = Linear::new(store, &format!("{name}.head"), len * ch, latent, 1.0, rng);
        Ok(Self {
            window,
            features,
            convs: layers,
            head,
        })
    }

    pub fn latent(&self) -> usize {
        self.head.outputs
    }

    /// Time length after each conv layer.
    pub fn lengths(&self) -> Vec<usize> {
        let mut len = self.window;
        self.convs
            .iter()
            .map(|(s, _)| {
                len = (len - s.kernel) / s.stride + 1;
                len
            })
            .collect()
    }

    /// Input frames that can influence position `pos` of conv layer `layer`.
    pub fn receptive_field(&self, layer: usize, pos: usize) -> Range<usize> {
        let (mut lo, mut hi) = (pos, pos);
        for (s, _) in self.convs[..=layer].iter().rev() {
            lo *= s.stride;
            hi = hi * s.stride + s.kernel - 1;
        }
        lo..hi + 1
    }

    /// Output of the last conv layer, `(batch·L) × C`.
    pub fn conv_features(&self, tape: &mut Tape, windows: Var, batch: usize) -> Result<Var> {
        let shape = tape.value(windows).shape();
        if shape != (batch * self.window, self.features) {
            return Err(Error::DimensionMismatch {
                what: "goal window".into(),
                expected: batch * self.window * self.features,
                found: shape.0 * shape.1,
            });
        }
        let mut x = windows;
        let mut len = self.window;
        for (spec, lin) in &self.convs {
            let patches = tape.im2col(x, batch, len, spec.kernel, spec.stride);
            let y = lin.forward(tape, patches);
            x = tape.tanh(y);
            len = (len - spec.kernel) / spec.stride + 1;
        }
        Ok(x)
    }

    /// `windows` stacks `batch` windows as `(batch·W) × F`; returns `batch × latent`.
    pub fn forward(&self, tape: &mut Tape, windows: Var, batch: usize) -> Result<Var> {
        let x = self.conv_features(tape, windows, batch)?;
        let flat_len = tape.value(x).len() / batch.max(1);
        let flat = tape.reshape(x, batch, flat_len);
        Ok(self.head.forward(tape, flat))
    }
}
