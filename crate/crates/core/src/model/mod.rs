//! Trainable patch encoder, frozen projector and tiny surrogate language models.

mod checkpoint;
mod encoder;
mod lm;
mod params;
pub mod pretrain;

pub use checkpoint::{Checkpoint, CheckpointError, Precision, CHECKPOINT_MAGIC};
pub use encoder::{EncodedVars, EncoderConfig, PatchEncoder};
pub use lm::{answer_targets, LmConfig, Projector, SurrogateLm};
pub use params::ParamSet;

use crate::tensor::{Graph, Result, Tensor, Var};
use crate::vocab::Vocab;

/// Projector plus language model, tagged with the CRC of the codebook whose
/// tokens it was trained to read.
#[derive(Debug, Clone, PartialEq)]
pub struct Backbone {
    pub lm: SurrogateLm,
    pub projector: Projector,
    pub codebook_crc: u32,
}

/// Backbone parameters registered on a graph.
#[derive(Debug, Clone)]
pub struct BoundBackbone {
    pub lm: Vec<Var>,
    pub projector: Vec<Var>,
}

impl Backbone {
    pub fn new(config: LmConfig, codebook_dim: usize, codebook_crc: u32, seed: u64) -> Self {
        let projector = Projector::new(codebook_dim, config.width, seed ^ 0x5052_4f4a);
        Self { lm: SurrogateLm::new(config, seed), projector, codebook_crc }
    }

    pub fn arch_id(&self) -> &str {
        self.lm.arch_id()
    }

    pub fn bind(&self, g: &mut Graph, train_lm: bool, train_projector: bool) -> Result<BoundBackbone> {
        Ok(BoundBackbone {
            lm: self.lm.params().bind(g, train_lm)?,
            projector: self.projector.params().bind(g, train_projector)?,
        })
    }

    /// Surrogate alignment loss: summed answer-token NLL given the quantized
    /// visual tokens `zq` (`[n_visual, codebook_dim]`) and the prompt.
    pub fn sal_loss(&self, g: &mut Graph, b: &BoundBackbone, zq: Var, prompt: &[usize], target: &[usize]) -> Result<Var> {
        let visual = self.projector.forward(g, &b.projector, zq)?;
        self.lm.answer_nll(g, &b.lm, visual, prompt, target)
    }

    /// Tapeless logits for every text position.
    pub fn text_logits(&self, visual_rows: &Tensor, text: &[usize]) -> Result<Tensor> {
        let mut g = Graph::new();
        let b = self.bind(&mut g, false, false)?;
        let zq = g.constant(visual_rows.clone())?;
        let visual = self.projector.forward(&mut g, &b.projector, zq)?;
        let logits = self.lm.forward_text_logits(&mut g, &b.lm, visual, text)?;
        Ok(g.value(logits).clone())
    }

    /// Greedy decoding; stops at the end marker (not emitted) or `max_tokens`.
    pub fn generate(&self, visual_rows: &Tensor, prompt: &[usize], max_tokens: usize, end_id: usize) -> Result<Vec<usize>> {
        let mut text = prompt.to_vec();
        let mut out = Vec::new();
        for _ in 0..max_tokens {
            let logits = self.text_logits(visual_rows, &text)?;
            let next = argmax(logits.row(text.len() - 1));
            if next == end_id {
                break;
            }
            out.push(next);
            text.push(next);
        }
        Ok(out)
    }

    /// Mean of the frozen token embeddings of a sentence.
    pub fn encode_text(&self, vocab: &Vocab, sentence: &str) -> Vec<f64> {
        let ids = vocab.encode(sentence);
        let ids = if ids.is_empty() { vec![vocab.id(crate::vocab::UNK)] } else { ids };
        let d = self.lm.config().width;
        let mut acc = vec![0.0; d];
        for &id in &ids {
            for (a, v) in acc.iter_mut().zip(self.lm.token_embedding(id)) {
                *a += v;
            }
        }
        acc.iter_mut().for_each(|a| *a /= ids.len() as f64);
        acc
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::new(self.arch_id(), self.codebook_crc);
        ck.metadata = serde_json::json!({
            "kind": "backbone",
            "lm_config": self.lm.config(),
            "projector": {"in_dim": self.projector.in_dim, "out_dim": self.projector.out_dim},
        });
        ck.push_all("lm.", self.lm.params().named());
        ck.push_all("projector.", self.projector.params().named());
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> std::result::Result<Self, CheckpointError> {
        let bad = |m: String| CheckpointError::Format(m);
        let config: LmConfig = serde_json::from_value(ck.metadata["lm_config"].clone())
            .map_err(|e| bad(format!("lm_config: {e}")))?;
        if config.arch_id != ck.arch_id {
            return Err(bad(format!("arch-id {} vs config {}", ck.arch_id, config.arch_id)));
        }
        let in_dim = ck.metadata["projector"]["in_dim"].as_u64().ok_or_else(|| bad("projector.in_dim".into()))? as usize;
        let mut b = Backbone::new(config, in_dim, ck.codebook_crc, 0);
        b.lm.params_mut().load_named(&ck.with_prefix("lm.")).map_err(bad)?;
        b.projector.params_mut().load_named(&ck.with_prefix("projector.")).map_err(bad)?;
        Ok(b)
    }
}

/// Index of the largest value; ties go to the smallest index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}
