use serde::{Deserialize, Serialize};

use super::params::{linear, normal, ParamSet};
use crate::codebook::FeatureGrid;
use crate::rng::substream;
use crate::tensor::{Graph, Result, Tensor, TensorError, Var};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub input_dim: usize,
    pub hidden: usize,
    pub dim: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self { input_dim: 16, hidden: 32, dim: 16 }
    }
}

/// Patch encoder: per-patch MLP with a linear skip path, one token-mixing
/// self-attention layer over `[CLS; patches]`, and an output layer.
///
/// At initialization the skip path and output layer are identities and the
/// MLP/attention outputs are zeroed, so patches pass through unchanged when
/// `input_dim == dim`.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchEncoder {
    config: EncoderConfig,
    params: ParamSet,
}

const W1: usize = 0;
const B1: usize = 1;
const W2: usize = 2;
const B2: usize = 3;
const W_SKIP: usize = 4;
const CLS: usize = 5;
const LN_G: usize = 6;
const LN_B: usize = 7;
const WQ: usize = 8;
const WK: usize = 9;
const WV: usize = 10;
const WO: usize = 11;
const W_OUT: usize = 12;
const B_OUT: usize = 13;

/// Encoder output on a graph: patch features and the penultimate [CLS] row.
#[derive(Debug, Clone, Copy)]
pub struct EncodedVars {
    pub patches: Var,
    pub cls: Var,
}

impl PatchEncoder {
    pub fn new(config: EncoderConfig, seed: u64) -> Self {
        let EncoderConfig { input_dim: din, hidden, dim: d } = config;
        let mut rng = substream(seed, "encoder-init");
        let mut p = ParamSet::new();
        p.push("w1", normal(&[din, hidden], 1.0 / (din as f64).sqrt(), &mut rng));
        p.push("b1", Tensor::zeros(&[hidden]));
        p.push("w2", Tensor::zeros(&[hidden, d]));
        p.push("b2", Tensor::zeros(&[d]));
        let mut skip = Tensor::zeros(&[din, d]);
        for i in 0..din.min(d) {
            skip.data_mut()[i * d + i] = 1.0;
        }
        p.push("w_skip", skip);
        p.push("cls", normal(&[1, d], 0.5, &mut rng));
        p.push("ln_g", Tensor::filled(&[d], 1.0));
        p.push("ln_b", Tensor::zeros(&[d]));
        p.push("wq", normal(&[d, d], 1.0 / (d as f64).sqrt(), &mut rng));
        p.push("wk", normal(&[d, d], 1.0 / (d as f64).sqrt(), &mut rng));
        p.push("wv", normal(&[d, d], 1.0 / (d as f64).sqrt(), &mut rng));
        p.push("wo", Tensor::zeros(&[d, d]));
        p.push("w_out", Tensor::identity(d));
        p.push("b_out", Tensor::zeros(&[d]));
        Self { config, params: p }
    }

    /// Randomize the zero-initialized blocks, e.g. for gradient checks that
    /// need every path active.
    pub fn perturbed(mut self, std: f64, seed: u64) -> Self {
        let mut rng = substream(seed, "encoder-perturb");
        for t in self.params.values_mut() {
            let noise = normal(t.shape(), std, &mut rng);
            for (v, n) in t.data_mut().iter_mut().zip(noise.data()) {
                *v += n;
            }
        }
        self
    }

    pub fn config(&self) -> EncoderConfig {
        self.config
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    pub fn forward(&self, g: &mut Graph, p: &[Var], input: &FeatureGrid) -> Result<EncodedVars> {
        if input.dim != self.config.input_dim {
            return Err(TensorError::Dim {
                op: "encoder",
                detail: format!("input dim {} != {}", input.dim, self.config.input_dim),
            });
        }
        let x = g.constant(input.to_tensor())?;
        let h = linear(g, x, p[W1], p[B1])?;
        let h = g.gelu(h)?;
        let mlp = linear(g, h, p[W2], p[B2])?;
        let skip = g.matmul(x, p[W_SKIP])?;
        let u = g.add(skip, mlp)?;
        let seq = g.concat_rows(&[p[CLS], u])?;
        let normed = g.layer_norm(seq, p[LN_G], p[LN_B])?;
        let q = g.matmul(normed, p[WQ])?;
        let k = g.matmul(normed, p[WK])?;
        let v = g.matmul(normed, p[WV])?;
        let att = g.attention_weights(q, k, false)?;
        let mixed = g.matmul(att, v)?;
        let mixed = g.matmul(mixed, p[WO])?;
        let penultimate = g.add(seq, mixed)?;
        let n = input.len();
        let cls = g.slice_rows(penultimate, 0, 1)?;
        let rows = g.slice_rows(penultimate, 1, n + 1)?;
        let patches = linear(g, rows, p[W_OUT], p[B_OUT])?;
        Ok(EncodedVars { patches, cls })
    }

    /// Tapeless encode: output grid plus its pre-quantization [CLS] vector.
    pub fn encode(&self, input: &FeatureGrid) -> Result<FeatureGrid> {
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, false)?;
        let out = self.forward(&mut g, &p, input)?;
        let data = g.value(out.patches).data().to_vec();
        Ok(FeatureGrid {
            width: input.width,
            height: input.height,
            dim: self.config.dim,
            data,
            cls: Some(g.value(out.cls).data().to_vec()),
        })
    }
}
