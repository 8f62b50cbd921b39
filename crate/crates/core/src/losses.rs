//! Caption augmentation, text targets, sigmoid contrastive loss and the
//! composite adaptation objective.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::{Graph, Result as TensorResult, Tensor, TensorError, Var};

#[derive(Debug, Error, PartialEq)]
pub enum LossError {
    #[error("empty argument: {0}")]
    EmptyArgument(&'static str),
    #[error("invalid loss weights: {0}")]
    Weights(String),
}

/// Weights on the contrastive and commitment terms; the alignment term has
/// weight 1.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub con: f64,
    pub commit: f64,
}

impl LossWeights {
    pub fn new(con: f64, commit: f64) -> Result<Self, LossError> {
        if !(con.is_finite() && commit.is_finite() && con >= 0.0 && commit >= 0.0) {
            return Err(LossError::Weights(format!("con={con}, commit={commit}")));
        }
        Ok(Self { con, commit })
    }

    /// Question-answering tasks.
    pub fn vqa() -> Self {
        Self { con: 0.1, commit: 0.1 }
    }

    /// Classification-style tasks.
    pub fn classification() -> Self {
        Self { con: 1.0, commit: 0.1 }
    }
}

const CAPTION_PREFIX: &str = "An image of a ";
const CAPTION_MIDDLE: &str = ", specifically a ";

pub fn augment_caption(domain: &str, label: &str) -> Result<String, LossError> {
    if domain.trim().is_empty() {
        return Err(LossError::EmptyArgument("domain"));
    }
    if label.trim().is_empty() {
        return Err(LossError::EmptyArgument("label"));
    }
    Ok(format!("{CAPTION_PREFIX}{domain}{CAPTION_MIDDLE}{label}"))
}

/// Inverse of [`augment_caption`]: the label after the last template separator.
pub fn caption_label(sentence: &str) -> Option<&str> {
    sentence.strip_prefix(CAPTION_PREFIX)?.rsplit_once(CAPTION_MIDDLE).map(|(_, l)| l)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Declarative {
    pub sentence: String,
    /// The question matched no grammar pattern.
    pub fallback: bool,
}

/// Rule-based QA rewrite over the synthetic task grammar.
pub fn qa_to_declarative(question: &str, answer: &str) -> Declarative {
    let q = question.trim();
    let a = answer.trim().to_lowercase();
    let ok = |sentence: String| Declarative { sentence, fallback: false };
    if let Some(x) = q.strip_prefix("What color is the ").and_then(|r| r.strip_suffix('?')) {
        return ok(format!("The {} is {a}", x.trim()));
    }
    if let Some(rest) = q.strip_prefix("Which ") {
        if let Some((domain, _options)) = rest.split_once(" is this?") {
            return ok(format!("This {} is a {a}", domain.trim()));
        }
    }
    if q == "What is in the image?" {
        return ok(format!("The image shows a {a}"));
    }
    if is_declarative(q) {
        return ok(q.to_string());
    }
    log::warn!("no rewrite rule for question {q:?}; using fallback");
    Declarative { sentence: format!("Q: {q} A: {answer}"), fallback: true }
}

fn is_declarative(s: &str) -> bool {
    if s.ends_with('?') {
        return false;
    }
    let is_pair = |rest: &str| rest.split_once(" is ").is_some_and(|(x, y)| !x.is_empty() && !y.is_empty());
    if let Some(rest) = s.strip_prefix("The image shows a ") {
        return !rest.is_empty();
    }
    s.strip_prefix("The ").is_some_and(is_pair) || s.strip_prefix("This ").is_some_and(is_pair)
}

/// Ground-truth sentence plus templated captions for one image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TextSet {
    sentences: Vec<String>,
}

impl TextSet {
    pub fn new(ground_truth: String, captions: Vec<String>) -> Self {
        let mut sentences = vec![ground_truth];
        sentences.extend(captions);
        Self { sentences }
    }

    pub fn ground_truth(&self) -> &str {
        &self.sentences[0]
    }

    pub fn sentences(&self) -> &[String] {
        &self.sentences
    }

    pub fn len(&self) -> usize {
        self.sentences.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// One sentence drawn uniformly.
    pub fn sample(&self, rng: &mut impl Rng) -> &str {
        &self.sentences[rng.random_range(0..self.sentences.len())]
    }
}

/// Inputs to the sigmoid contrastive loss. Image embeddings live on the graph;
/// text embeddings are frozen constants.
#[derive(Debug, Clone)]
pub struct ContrastiveBatch<'a> {
    pub image: Var,
    pub text: &'a Tensor,
    pub labels: &'a [usize],
    pub log_tau: Var,
}

/// Mean over anchors of `-log σ(s_ii) - Σ_{j: y_j ≠ y_i} log(1 - σ(s_ij))` with
/// `s_ij = τ cos(v_i, t_j)`. Same-label off-diagonal pairs are excluded.
pub fn sigmoid_contrastive(g: &mut Graph, batch: &ContrastiveBatch<'_>) -> TensorResult<Var> {
    let b = batch.labels.len();
    let (vi, tt) = (g.value(batch.image), batch.text);
    if vi.rows() != b || tt.rows() != b || vi.cols() != tt.cols() {
        return Err(TensorError::Dim {
            op: "sigmoid_contrastive",
            detail: format!("images {:?}, texts {:?}, {b} labels", vi.shape(), tt.shape()),
        });
    }
    let mut sign = vec![0.0; b * b];
    let mut include = vec![0.0; b * b];
    for i in 0..b {
        for j in 0..b {
            if i == j {
                sign[i * b + j] = 1.0;
                include[i * b + j] = 1.0;
            } else if batch.labels[i] != batch.labels[j] {
                sign[i * b + j] = -1.0;
                include[i * b + j] = 1.0;
            }
        }
    }
    let text = g.constant(tt.clone())?;
    let cos = g.cosine_similarity(batch.image, text)?;
    let tau = g.exp(batch.log_tau)?;
    let s = g.scale_by(cos, tau)?;
    let sign = g.constant(Tensor::matrix(b, b, sign)?)?;
    let signed = g.mul(s, sign)?;
    let ls = g.log_sigmoid(signed)?;
    let include = g.constant(Tensor::matrix(b, b, include)?)?;
    let kept = g.mul(ls, include)?;
    let total = g.sum(kept)?;
    g.scale(total, -1.0 / b as f64)
}

/// `λ_con · con + λ_commit · commit + sal`.
pub fn composite_loss(g: &mut Graph, sal: Var, con: Var, commit: Var, w: LossWeights) -> TensorResult<Var> {
    let c = g.scale(con, w.con)?;
    let m = g.scale(commit, w.commit)?;
    let cm = g.add(c, m)?;
    g.add(cm, sal)
}
