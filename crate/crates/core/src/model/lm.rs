use serde::{Deserialize, Serialize};

use super::params::{linear, normal, ParamSet};
use crate::rng::substream;
use crate::tensor::{Graph, Result, Tensor, TensorError, Var};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LmConfig {
    pub arch_id: String,
    pub vocab: usize,
    pub width: usize,
    pub heads: usize,
    pub blocks: usize,
    /// Maximum number of text tokens (prompt + answer).
    pub max_text: usize,
    /// Maximum number of visual tokens.
    pub max_visual: usize,
    pub tied_head: bool,
}

impl LmConfig {
    /// Backbone "A": the default surrogate.
    pub fn backbone_a(vocab: usize) -> Self {
        Self {
            arch_id: "lm-w32-h4-b2".into(),
            vocab,
            width: 32,
            heads: 4,
            blocks: 2,
            max_text: 24,
            max_visual: 64,
            tied_head: false,
        }
    }

    /// Backbone "B": narrower, fewer heads, one block, tied output head.
    pub fn backbone_b(vocab: usize) -> Self {
        Self {
            arch_id: "lm-w24-h2-b1".into(),
            vocab,
            width: 24,
            heads: 2,
            blocks: 1,
            max_text: 24,
            max_visual: 64,
            tied_head: true,
        }
    }
}

/// Linear map from codebook space into the language model's width.
#[derive(Debug, Clone, PartialEq)]
pub struct Projector {
    pub in_dim: usize,
    pub out_dim: usize,
    params: ParamSet,
}

impl Projector {
    pub fn new(in_dim: usize, out_dim: usize, seed: u64) -> Self {
        let mut rng = substream(seed, "projector-init");
        let mut params = ParamSet::new();
        params.push("w", normal(&[in_dim, out_dim], 1.0 / (in_dim as f64).sqrt(), &mut rng));
        params.push("b", Tensor::zeros(&[out_dim]));
        Self { in_dim, out_dim, params }
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    pub fn forward(&self, g: &mut Graph, p: &[Var], x: Var) -> Result<Var> {
        linear(g, x, p[0], p[1])
    }
}

/// Tiny decoder-only transformer. Visual tokens are prepended as a block that
/// carries a learned type embedding but no positions; text tokens get learned
/// positions counted from the first text token, so dropping visual tokens does
/// not move any text position.
#[derive(Debug, Clone, PartialEq)]
pub struct SurrogateLm {
    config: LmConfig,
    params: ParamSet,
    layout: Layout,
}

#[derive(Debug, Clone, PartialEq)]
struct Layout {
    tok: usize,
    pos: usize,
    vis: usize,
    blocks: Vec<[usize; 12]>,
    lnf_g: usize,
    lnf_b: usize,
    head: Option<usize>,
}

impl SurrogateLm {
    pub fn new(config: LmConfig, seed: u64) -> Self {
        assert!(config.width % config.heads == 0, "width must divide into heads");
        let mut rng = substream(seed, &format!("lm-init-{}", config.arch_id));
        let d = config.width;
        let std = 1.0 / (d as f64).sqrt();
        let mut p = ParamSet::new();
        let tok = p.push("tok_emb", normal(&[config.vocab, d], 0.5, &mut rng));
        let pos = p.push("pos_emb", normal(&[config.max_text, d], 0.1, &mut rng));
        let vis = p.push("vis_emb", normal(&[1, d], 0.1, &mut rng));
        let mut blocks = Vec::with_capacity(config.blocks);
        for b in 0..config.blocks {
            let pre = format!("block{b}.");
            blocks.push([
                p.push(&format!("{pre}ln1_g"), Tensor::filled(&[d], 1.0)),
                p.push(&format!("{pre}ln1_b"), Tensor::zeros(&[d])),
                p.push(&format!("{pre}w_qkv"), normal(&[d, 3 * d], std, &mut rng)),
                p.push(&format!("{pre}b_qkv"), Tensor::zeros(&[3 * d])),
                p.push(&format!("{pre}w_o"), normal(&[d, d], std / (2.0 * config.blocks as f64).sqrt(), &mut rng)),
                p.push(&format!("{pre}b_o"), Tensor::zeros(&[d])),
                p.push(&format!("{pre}ln2_g"), Tensor::filled(&[d], 1.0)),
                p.push(&format!("{pre}ln2_b"), Tensor::zeros(&[d])),
                p.push(&format!("{pre}w_1"), normal(&[d, 4 * d], std, &mut rng)),
                p.push(&format!("{pre}b_1"), Tensor::zeros(&[4 * d])),
                p.push(&format!("{pre}w_2"), normal(&[4 * d, d], 0.5 * std / (2.0 * config.blocks as f64).sqrt(), &mut rng)),
                p.push(&format!("{pre}b_2"), Tensor::zeros(&[d])),
            ]);
        }
        let lnf_g = p.push("lnf_g", Tensor::filled(&[d], 1.0));
        let lnf_b = p.push("lnf_b", Tensor::zeros(&[d]));
        let head = if config.tied_head {
            None
        } else {
            Some(p.push("head", normal(&[d, config.vocab], std, &mut rng)))
        };
        let layout = Layout { tok, pos, vis, blocks, lnf_g, lnf_b, head };
        Self { config, params: p, layout }
    }

    pub fn config(&self) -> &LmConfig {
        &self.config
    }

    pub fn arch_id(&self) -> &str {
        &self.config.arch_id
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    pub fn token_embedding(&self, id: usize) -> &[f64] {
        self.params.get(self.layout.tok).row(id)
    }

    /// Logits for every text position, `[text.len(), vocab]`. `visual` holds
    /// already-projected visual tokens `[n_visual, width]`.
    pub fn forward_text_logits(&self, g: &mut Graph, p: &[Var], visual: Var, text: &[usize]) -> Result<Var> {
        let cfg = &self.config;
        let nv = g.value(visual).rows();
        if text.is_empty() || text.len() > cfg.max_text || nv > cfg.max_visual {
            return Err(TensorError::Dim {
                op: "lm context",
                detail: format!(
                    "{nv} visual + {} text tokens exceed {} + {}",
                    text.len(),
                    cfg.max_visual,
                    cfg.max_text
                ),
            });
        }
        let l = &self.layout;
        let vis = g.add_row(visual, p[l.vis])?;
        let emb = g.embedding(p[l.tok], text)?;
        let pos = g.slice_rows(p[l.pos], 0, text.len())?;
        let txt = g.add(emb, pos)?;
        let mut x = if nv > 0 { g.concat_rows(&[vis, txt])? } else { txt };
        let d = cfg.width;
        let hd = d / cfg.heads;
        for blk in &l.blocks {
            let [ln1_g, ln1_b, w_qkv, b_qkv, w_o, b_o, ln2_g, ln2_b, w_1, b_1, w_2, b_2] = blk.map(|i| p[i]);
            let h = g.layer_norm(x, ln1_g, ln1_b)?;
            let qkv = linear(g, h, w_qkv, b_qkv)?;
            let mut heads = Vec::with_capacity(cfg.heads);
            for head in 0..cfg.heads {
                let q = g.slice_cols(qkv, head * hd, (head + 1) * hd)?;
                let k = g.slice_cols(qkv, d + head * hd, d + (head + 1) * hd)?;
                let v = g.slice_cols(qkv, 2 * d + head * hd, 2 * d + (head + 1) * hd)?;
                let att = g.attention_weights(q, k, true)?;
                heads.push(g.matmul(att, v)?);
            }
            let cat = if heads.len() == 1 { heads[0] } else { g.concat_cols(&heads)? };
            let o = linear(g, cat, w_o, b_o)?;
            x = g.add(x, o)?;
            let h = g.layer_norm(x, ln2_g, ln2_b)?;
            let h = linear(g, h, w_1, b_1)?;
            let h = g.gelu(h)?;
            let h = linear(g, h, w_2, b_2)?;
            x = g.add(x, h)?;
        }
        let total = nv + text.len();
        let x = g.slice_rows(x, nv, total)?;
        let x = g.layer_norm(x, p[l.lnf_g], p[l.lnf_b])?;
        match l.head {
            Some(h) => g.matmul(x, p[h]),
            None => g.matmul_nt(x, p[l.tok]),
        }
    }

    /// Summed `-log p(target_i | ...)` over the answer tokens only.
    /// `prompt` must end with the answer marker; `target` ends with the end marker.
    pub fn answer_nll(&self, g: &mut Graph, p: &[Var], visual: Var, prompt: &[usize], target: &[usize]) -> Result<Var> {
        if target.is_empty() {
            return Err(TensorError::Contract("empty target".into()));
        }
        let text: Vec<usize> = prompt.iter().chain(target).copied().collect();
        let logits = self.forward_text_logits(g, p, visual, &text)?;
        let targets = answer_targets(prompt.len(), &text);
        g.softmax_cross_entropy(logits, &targets)
    }
}

/// Next-token targets restricted to answer positions: row `r` predicts
/// `text[r + 1]` only when that token belongs to the answer.
pub fn answer_targets(prompt_len: usize, text: &[usize]) -> Vec<Option<usize>> {
    (0..text.len())
        .map(|r| if r + 1 >= prompt_len && r + 1 < text.len() { Some(text[r + 1]) } else { None })
        .collect()
}
