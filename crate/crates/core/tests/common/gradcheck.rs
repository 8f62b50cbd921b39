//! Finite-difference checks of the adaptation losses with respect to encoder
//! parameters. Each check returns measurements; callers decide what passes.

use craft_core::codebook::{commitment_loss_with, ste_quantize, Codebook, FeatureGrid};
use craft_core::losses::{composite_loss, sigmoid_contrastive, ContrastiveBatch, LossWeights};
use craft_core::model::{Backbone, EncoderConfig, LmConfig, PatchEncoder};
use craft_core::rng::substream;
use craft_core::tensor::{Graph, Tensor, Var};
use rand::Rng;

pub const H: f64 = 1e-5;
pub const TOL: f64 = 1e-5;

/// Worst relative error over the trials that were checked; trials where a
/// probe flipped a quantization index are counted, not checked.
#[derive(Debug, Clone, Copy, Default)]
pub struct GradReport {
    pub worst: f64,
    pub checked: usize,
    pub flipped: usize,
}

impl GradReport {
    fn add(&mut self, err: f64) {
        self.worst = self.worst.max(err);
        self.checked += 1;
    }
}

pub fn small_encoder(seed: u64) -> PatchEncoder {
    PatchEncoder::new(EncoderConfig { input_dim: 4, hidden: 4, dim: 4 }, seed).perturbed(0.3, seed)
}

fn small_backbone(codebook: &Codebook, seed: u64) -> Backbone {
    let lm = LmConfig {
        arch_id: "lm-grad".into(),
        vocab: 8,
        width: 8,
        heads: 2,
        blocks: 1,
        max_text: 8,
        max_visual: 8,
        tied_head: false,
    };
    Backbone::new(lm, codebook.dim(), codebook.crc(), seed)
}

fn random_grid(seed: u64, w: usize, h: usize, d: usize) -> FeatureGrid {
    let mut rng = substream(seed, "grid");
    FeatureGrid::new(w, h, d, (0..w * h * d).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn random_codebook(seed: u64, levels: usize, k: usize, d: usize) -> Codebook {
    let mut rng = substream(seed, "codebook");
    Codebook::new(levels, k, d, (0..levels * k * d).map(|_| rng.random_range(-1.0f32..1.0)).collect()).unwrap()
}

fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    diff / na.max(nb).max(1e-12)
}

/// Central differences of `f` over the flattened encoder parameters.
fn finite_difference(enc: &PatchEncoder, mut f: impl FnMut(&PatchEncoder) -> f64) -> Vec<f64> {
    let theta = enc.params().flatten();
    let mut probe = enc.clone();
    (0..theta.len())
        .map(|i| {
            let mut t = theta.clone();
            t[i] = theta[i] + H;
            probe.params_mut().set_flat(&t);
            let up = f(&probe);
            t[i] = theta[i] - H;
            probe.params_mut().set_flat(&t);
            let down = f(&probe);
            (up - down) / (2.0 * H)
        })
        .collect()
}

fn encoder_grad(enc: &PatchEncoder, build: impl Fn(&mut Graph, &[Var]) -> Var) -> Vec<f64> {
    let mut g = Graph::new();
    let p = enc.params().bind(&mut g, true).unwrap();
    let loss = build(&mut g, &p);
    g.backward(loss).unwrap();
    enc.params().grads(&g, &p).iter().flat_map(|t| t.data().to_vec()).collect()
}

fn codes(enc: &PatchEncoder, input: &FeatureGrid, cb: &Codebook) -> Vec<u32> {
    cb.rq_encode(&enc.encode(input).unwrap()).unwrap().indices
}

fn texts(seed: u64, b: usize, width: usize) -> Tensor {
    let mut rng = substream(seed, "texts");
    Tensor::matrix(b, width, (0..b * width).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

/// The quantizer is piecewise constant, so the oracle differentiates
/// `z(θ) + (q(z0) - z0)`: the straight-through surrogate with the
/// quantization offset frozen at the base point.
fn frozen_offset(enc: &PatchEncoder, input: &FeatureGrid, cb: &Codebook) -> Tensor {
    let z = enc.encode(input).unwrap();
    let q = cb.rq_encode(&z).unwrap();
    let off: Vec<f64> = q.summed.iter().zip(&z.data).map(|(a, b)| a - b).collect();
    Tensor::matrix(input.len(), z.dim, off).unwrap()
}

/// Commitment loss against the real, re-quantizing forward pass.
pub fn commitment(trials: u64) -> GradReport {
    let mut r = GradReport::default();
    for seed in 0..trials {
        let enc = small_encoder(seed);
        let input = random_grid(seed, 2, 2, 4);
        let cb = random_codebook(seed, 2, 6, 4);
        let base = codes(&enc, &input, &cb);
        let analytic = encoder_grad(&enc, |g, p| {
            let out = enc.forward(g, p, &input).unwrap();
            let (_, q) = ste_quantize(g, out.patches, 2, 2, &cb).unwrap();
            commitment_loss_with(g, out.patches, &q).unwrap()
        });
        let mut flipped = false;
        let fd = finite_difference(&enc, |e| {
            let z = e.encode(&input).unwrap();
            let q = cb.rq_encode(&z).unwrap();
            flipped |= q.indices != base;
            z.data.iter().zip(&q.summed).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / z.data.len() as f64
        });
        if flipped {
            r.flipped += 1;
        } else {
            r.add(rel_err(&analytic, &fd));
        }
    }
    r
}

pub fn contrastive(trials: u64) -> GradReport {
    let cb = random_codebook(1, 1, 4, 4);
    let backbone = small_backbone(&cb, 3);
    let mut r = GradReport::default();
    for seed in 0..trials {
        let enc = small_encoder(seed);
        let inputs: Vec<FeatureGrid> = (0..3).map(|i| random_grid(seed * 10 + i, 2, 2, 4)).collect();
        let text = texts(seed, 3, 8);
        let labels = [0, 1, 0];
        let loss_on = |g: &mut Graph, e: &PatchEncoder, p: &[Var]| {
            let bb = backbone.bind(g, false, false).unwrap();
            let cls: Vec<Var> = inputs.iter().map(|x| e.forward(g, p, x).unwrap().cls).collect();
            let cls = g.concat_rows(&cls).unwrap();
            let image = backbone.projector.forward(g, &bb.projector, cls).unwrap();
            let lt = g.leaf(Tensor::scalar(1.3), true).unwrap();
            sigmoid_contrastive(g, &ContrastiveBatch { image, text: &text, labels: &labels, log_tau: lt }).unwrap()
        };
        let analytic = encoder_grad(&enc, |g, p| loss_on(g, &enc, p));
        let fd = finite_difference(&enc, |e| {
            let mut g = Graph::new();
            let p = e.params().bind(&mut g, false).unwrap();
            let l = loss_on(&mut g, e, &p);
            g.value(l).item()
        });
        r.add(rel_err(&analytic, &fd));
    }
    r
}

/// Surrogate alignment loss through the straight-through quantizer.
pub fn sal(trials: u64) -> GradReport {
    let cb = random_codebook(2, 2, 5, 4);
    let backbone = small_backbone(&cb, 4);
    let prompt = [1, 2, 3];
    let target = [4, 5];
    let mut r = GradReport::default();
    for seed in 0..trials {
        let enc = small_encoder(seed + 20);
        let input = random_grid(seed + 20, 2, 2, 4);
        let analytic = encoder_grad(&enc, |g, p| {
            let bb = backbone.bind(g, false, false).unwrap();
            let out = enc.forward(g, p, &input).unwrap();
            let (zq, _) = ste_quantize(g, out.patches, 2, 2, &cb).unwrap();
            backbone.sal_loss(g, &bb, zq, &prompt, &target).unwrap()
        });
        let off = frozen_offset(&enc, &input, &cb);
        let fd = finite_difference(&enc, |e| {
            let mut g = Graph::new();
            let p = e.params().bind(&mut g, false).unwrap();
            let bb = backbone.bind(&mut g, false, false).unwrap();
            let out = e.forward(&mut g, &p, &input).unwrap();
            let o = g.constant(off.clone()).unwrap();
            let zq = g.add(out.patches, o).unwrap();
            let l = backbone.sal_loss(&mut g, &bb, zq, &prompt, &target).unwrap();
            g.value(l).item()
        });
        r.add(rel_err(&analytic, &fd));
    }
    r
}

/// Weighted sum of all three terms over a two-example batch.
pub fn composite(trials: u64) -> GradReport {
    let cb = random_codebook(5, 2, 5, 4);
    let backbone = small_backbone(&cb, 6);
    let prompt = [1, 2];
    let target = [6, 7];
    let weights = LossWeights::new(0.7, 0.3).unwrap();
    let labels = [0, 1];
    let mut r = GradReport::default();
    for t in 0..trials {
        let enc = small_encoder(40 + t);
        let inputs: Vec<FeatureGrid> = (0..2).map(|i| random_grid(40 + 7 * t + i, 2, 2, 4)).collect();
        let text = texts(40 + t, 2, 8);
        let build = |g: &mut Graph, e: &PatchEncoder, p: &[Var], offsets: Option<&[Tensor]>| {
            let bb = backbone.bind(g, false, false).unwrap();
            let mut sal = Vec::new();
            let mut commit = Vec::new();
            let mut cls = Vec::new();
            for (i, x) in inputs.iter().enumerate() {
                let out = e.forward(g, p, x).unwrap();
                cls.push(out.cls);
                let zq = match offsets {
                    None => ste_quantize(g, out.patches, 2, 2, &cb).unwrap().0,
                    Some(off) => {
                        let o = g.constant(off[i].clone()).unwrap();
                        g.add(out.patches, o).unwrap()
                    }
                };
                let q = cb.rq_encode(&FeatureGrid::new(2, 2, 4, g.value(out.patches).data().to_vec()).unwrap()).unwrap();
                commit.push(commitment_loss_with(g, out.patches, &q).unwrap());
                sal.push(backbone.sal_loss(g, &bb, zq, &prompt, &target).unwrap());
            }
            let s = g.add(sal[0], sal[1]).unwrap();
            let s = g.scale(s, 0.5).unwrap();
            let c = g.add(commit[0], commit[1]).unwrap();
            let c = g.scale(c, 0.5).unwrap();
            let cls = g.concat_rows(&cls).unwrap();
            let image = backbone.projector.forward(g, &bb.projector, cls).unwrap();
            let lt = g.leaf(Tensor::scalar(0.4), true).unwrap();
            let con = sigmoid_contrastive(g, &ContrastiveBatch { image, text: &text, labels: &labels, log_tau: lt }).unwrap();
            composite_loss(g, s, con, c, weights).unwrap()
        };
        let analytic = encoder_grad(&enc, |g, p| build(g, &enc, p, None));
        let offsets: Vec<Tensor> = inputs.iter().map(|x| frozen_offset(&enc, x, &cb)).collect();
        let base: Vec<Vec<u32>> = inputs.iter().map(|x| codes(&enc, x, &cb)).collect();
        let mut flipped = false;
        let fd = finite_difference(&enc, |e| {
            flipped |= inputs.iter().zip(&base).any(|(x, c)| &codes(e, x, &cb) != c);
            let mut g = Graph::new();
            let p = e.params().bind(&mut g, false).unwrap();
            let l = build(&mut g, e, &p, Some(&offsets));
            g.value(l).item()
        });
        // The commitment term re-quantizes, so a flipped probe invalidates the trial.
        if flipped {
            r.flipped += 1;
        } else {
            r.add(rel_err(&analytic, &fd));
        }
    }
    r
}

/// Backward through the quantizer passes the upstream adjoint unchanged and
/// the forward value is the codeword sum.
pub fn straight_through_is_identity(trials: u64) -> bool {
    (0..trials).all(|t| {
        let cb = random_codebook(9 + t, 2, 6, 4);
        let mut rng = substream(t, "seed-adjoint");
        let mut g = Graph::new();
        let z = g.leaf(Tensor::matrix(4, 4, (0..16).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap(), true).unwrap();
        let (zq, q) = ste_quantize(&mut g, z, 2, 2, &cb).unwrap();
        let seed = Tensor::matrix(4, 4, (0..16).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        g.backward_seeded(&[(zq, seed.clone())]).unwrap();
        g.value(zq).data() == q.summed.as_slice() && g.grad(z) == Some(&seed)
    })
}

pub fn max_encoder_params() -> usize {
    small_encoder(0).params().num_scalars()
}
