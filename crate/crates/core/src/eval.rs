//! Exact-match evaluation of the encode → quantize → prune → generate
//! pipeline, plus report containers and the analytic FLOP model.

use serde::{Deserialize, Serialize};

use crate::codebook::{Codebook, QuantizedGrid};
use crate::data::Sample;
use crate::model::{Backbone, LmConfig, PatchEncoder};
use crate::pruner::{estimate_frequencies, prune, PruneRequest, Selection, TokenStats};
use crate::vocab::Vocab;
use crate::Error;

pub const MAX_NEW_TOKENS: usize = 5;

fn normalize(s: &str) -> String {
    s.to_lowercase().split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Case- and whitespace-insensitive string equality.
pub fn exact_match(pred: &str, gold: &str) -> bool {
    normalize(pred) == normalize(gold)
}

/// How visual tokens are reduced before the language model.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Pruning<'a> {
    /// Every token, no pruner involved.
    Bypass,
    Prune { stats: &'a TokenStats, request: PruneRequest },
}

impl<'a> Pruning<'a> {
    pub fn keep_ratio(stats: &'a TokenStats, ratio: f64) -> Self {
        Pruning::Prune { stats, request: PruneRequest::keep_ratio(ratio) }
    }

    pub fn with_selection(stats: &'a TokenStats, ratio: f64, selection: Selection, seed: u64) -> Self {
        Pruning::Prune { stats, request: PruneRequest::keep_ratio(ratio).with_selection(selection, seed) }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalOutcome {
    pub accuracy: f64,
    pub predictions: Vec<String>,
    pub correct: Vec<bool>,
    /// Visual tokens passed to the language model, per sample.
    pub kept_tokens: Vec<usize>,
    pub total_tokens: Vec<usize>,
}

impl EvalOutcome {
    pub fn mean_kept_fraction(&self) -> f64 {
        let kept: usize = self.kept_tokens.iter().sum();
        let total: usize = self.total_tokens.iter().sum();
        kept as f64 / total as f64
    }
}

/// Quantize a sample's features through an encoder.
pub fn quantize_sample(encoder: &PatchEncoder, codebook: &Codebook, sample: &Sample) -> Result<QuantizedGrid, Error> {
    let z = encoder.encode(&sample.features)?;
    Ok(codebook.rq_encode(&z)?)
}

/// First-level ID statistics of a sample set as seen through an encoder.
pub fn encoder_token_stats(
    encoder: &PatchEncoder,
    codebook: &Codebook,
    samples: &[Sample],
    source: &str,
) -> Result<TokenStats, Error> {
    let grids = samples.iter().map(|s| quantize_sample(encoder, codebook, s)).collect::<Result<Vec<_>, _>>()?;
    Ok(estimate_frequencies(&grids, codebook.entries(), source)?)
}

/// Answer one sample; returns the decoded prediction and the number of
/// visual tokens fed to the language model.
pub fn answer(
    encoder: &PatchEncoder,
    backbone: &Backbone,
    codebook: &Codebook,
    vocab: &Vocab,
    sample: &Sample,
    pruning: &Pruning<'_>,
) -> Result<(String, usize, usize), Error> {
    let q = quantize_sample(encoder, codebook, sample)?;
    let visual = match pruning {
        Pruning::Bypass => q.summed_tensor(),
        Pruning::Prune { stats, request } => q.summed_rows(&prune(&q, stats, request)?.kept),
    };
    let kept = visual.rows();
    let out = backbone.generate(&visual, &vocab.encode_prompt(&sample.prompt), MAX_NEW_TOKENS, vocab.end_id())?;
    Ok((vocab.decode(&out), kept, q.len()))
}

/// Mean exact-match accuracy over `samples`.
pub fn evaluate(
    encoder: &PatchEncoder,
    backbone: &Backbone,
    codebook: &Codebook,
    vocab: &Vocab,
    samples: &[Sample],
    pruning: &Pruning<'_>,
) -> Result<EvalOutcome, Error> {
    if backbone.codebook_crc != codebook.crc() {
        return Err(Error::CrcMismatch { expected: codebook.crc(), found: backbone.codebook_crc, what: "evaluation backbone".into() });
    }
    if samples.is_empty() {
        return Err(Error::Eval("empty test set".into()));
    }
    let mut out = EvalOutcome { accuracy: 0.0, predictions: vec![], correct: vec![], kept_tokens: vec![], total_tokens: vec![] };
    for s in samples {
        let (pred, kept, total) = answer(encoder, backbone, codebook, vocab, s, pruning)?;
        out.correct.push(exact_match(&pred, &s.target));
        out.predictions.push(pred);
        out.kept_tokens.push(kept);
        out.total_tokens.push(total);
    }
    out.accuracy = out.correct.iter().filter(|&&c| c).count() as f64 / samples.len() as f64;
    Ok(out)
}

/// Analytic forward cost of one language-model pass, as 2 × multiply-accumulates.
///
/// Per block: QKV and output projections `4 n d²`, attention scores and
/// mixing `2 n² d`, MLP `8 n d²`. Plus the projector on visual tokens and the
/// output head on text tokens. Embedding lookups are free.
pub fn flops_estimate(visual_tokens: usize, text_tokens: usize, lm: &LmConfig, visual_dim: usize) -> f64 {
    let n = (visual_tokens + text_tokens) as f64;
    let d = lm.width as f64;
    let per_block = 12.0 * n * d * d + 2.0 * n * n * d;
    let macs = lm.blocks as f64 * per_block + visual_tokens as f64 * visual_dim as f64 * d + text_tokens as f64 * d * lm.vocab as f64;
    2.0 * macs
}

/// One measured configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub task: String,
    pub encoder: String,
    pub backbone: String,
    pub keep_ratio: f64,
    pub variant: String,
    pub seed: u64,
    pub accuracy: f64,
    pub flops: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub name: String,
    pub metadata: serde_json::Value,
    pub cells: Vec<Cell>,
}

impl EvalReport {
    pub fn new(name: &str, metadata: serde_json::Value) -> Self {
        Self { name: name.to_string(), metadata, cells: Vec::new() }
    }

    pub fn seeds(&self) -> Vec<u64> {
        let mut s: Vec<u64> = self.cells.iter().map(|c| c.seed).collect();
        s.sort_unstable();
        s.dedup();
        s
    }

    /// Mean accuracy over the cells matching `filter`.
    pub fn mean_accuracy(&self, filter: impl Fn(&Cell) -> bool) -> Option<f64> {
        let xs: Vec<f64> = self.cells.iter().filter(|c| filter(c)).map(|c| c.accuracy).collect();
        if xs.is_empty() {
            None
        } else {
            Some(xs.iter().sum::<f64>() / xs.len() as f64)
        }
    }

    pub fn to_json(&self) -> Result<String, Error> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("task,encoder,backbone,keep_ratio,variant,seed,accuracy,flops\n");
        for c in &self.cells {
            s.push_str(&format!(
                "{},{},{},{},{},{},{},{}\n",
                c.task, c.encoder, c.backbone, c.keep_ratio, c.variant, c.seed, c.accuracy, c.flops
            ));
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exact_match_rules() {
        assert!(exact_match("  Red ", "red"));
        assert!(!exact_match("red car", "red"));
        assert!(exact_match("A\t B", "a b"));
        assert!(exact_match("", "  "));
    }

    #[test]
    fn flops_superlinear_and_identity() {
        let lm = LmConfig { width: 256, ..LmConfig::backbone_a(64) };
        let a = flops_estimate(512, 0, &lm, 16);
        let b = flops_estimate(1024, 0, &lm, 16);
        assert!(b > 2.0 * a);
        let small = LmConfig::backbone_a(64);
        assert_eq!(flops_estimate(64, 10, &small, 16), flops_estimate(64, 10, &small, 16));
        assert!(flops_estimate(51, 10, &small, 16) < flops_estimate(64, 10, &small, 16));
    }

    #[test]
    fn report_csv_and_means() {
        let mut r = EvalReport::new("t", serde_json::json!({}));
        for (seed, acc) in [(0, 0.5), (1, 0.7)] {
            r.cells.push(Cell {
                task: "cls".into(),
                encoder: "e".into(),
                backbone: "b".into(),
                keep_ratio: 1.0,
                variant: "full".into(),
                seed,
                accuracy: acc,
                flops: 1.0,
            });
        }
        assert!((r.mean_accuracy(|_| true).unwrap() - 0.6).abs() < 1e-12);
        assert_eq!(r.mean_accuracy(|c| c.seed == 9), None);
        assert_eq!(r.seeds(), vec![0, 1]);
        assert_eq!(r.to_csv().lines().count(), 3);
    }
}
