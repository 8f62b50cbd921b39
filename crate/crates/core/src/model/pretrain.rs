//! Two-stage backbone alignment on quantized generic-domain captions:
//! stage 1 trains the projector alone, stage 2 trains projector and LM.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::Backbone;
use crate::codebook::Codebook;
use crate::data::Sample;
use crate::rng::substream;
use crate::tensor::{Graph, Tensor};
use crate::trainer::{AdamW, CosineSchedule};
use crate::vocab::Vocab;
use crate::Error;

/// One training example: quantized visual tokens plus prompt/answer ids.
#[derive(Debug, Clone, PartialEq)]
pub struct VisualExample {
    pub visual: Tensor,
    pub prompt: Vec<usize>,
    pub target: Vec<usize>,
}

/// Examples quantized with the codebook whose CRC is recorded here.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedCorpus {
    pub codebook_crc: u32,
    pub examples: Vec<VisualExample>,
}

impl QuantizedCorpus {
    /// Samples quantized through the identity encoder.
    pub fn from_samples(samples: &[Sample], codebook: &Codebook, vocab: &Vocab) -> Result<Self, Error> {
        let mut examples = Vec::with_capacity(samples.len());
        for s in samples {
            let q = codebook.rq_encode(&s.features)?;
            examples.push(VisualExample {
                visual: q.summed_tensor(),
                prompt: vocab.encode_prompt(&s.prompt),
                target: vocab.encode_target(&s.target),
            });
        }
        Ok(Self { codebook_crc: codebook.crc(), examples })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainConfig {
    pub stage1_steps: usize,
    pub stage2_steps: usize,
    pub batch_size: usize,
    pub stage1_lr: f64,
    pub stage2_lr: f64,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self { stage1_steps: 60, stage2_steps: 600, batch_size: 16, stage1_lr: 3e-3, stage2_lr: 3e-3, seed: 0 }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct PretrainLog {
    pub stage1: Vec<f64>,
    pub stage2: Vec<f64>,
}

/// Deterministic epoch-shuffled batches.
pub(crate) struct BatchSampler {
    order: Vec<usize>,
    cursor: usize,
    rng: rand_chacha::ChaCha8Rng,
}

impl BatchSampler {
    pub(crate) fn new(len: usize, seed: u64, label: &str) -> Self {
        let mut s = Self { order: (0..len).collect(), cursor: len, rng: substream(seed, label) };
        s.reshuffle();
        s
    }

    fn reshuffle(&mut self) {
        self.order.shuffle(&mut self.rng);
        self.cursor = 0;
    }

    pub(crate) fn next_batch(&mut self, size: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(size);
        while out.len() < size {
            if self.cursor == self.order.len() {
                self.reshuffle();
            }
            out.push(self.order[self.cursor]);
            self.cursor += 1;
        }
        out
    }
}

fn run_stage(
    backbone: &mut Backbone,
    corpus: &QuantizedCorpus,
    steps: usize,
    lr: f64,
    batch_size: usize,
    train_lm: bool,
    seed: u64,
    label: &str,
) -> Result<Vec<f64>, Error> {
    let schedule = CosineSchedule::new(lr, steps);
    let mut opt_proj = AdamW::new(backbone.projector.params(), 0.0);
    let mut opt_lm = AdamW::new(backbone.lm.params(), 0.0);
    let mut sampler = BatchSampler::new(corpus.examples.len(), seed, label);
    let mut log = Vec::with_capacity(steps);
    for step in 0..steps {
        let batch = sampler.next_batch(batch_size);
        let mut g = Graph::new();
        let bound = backbone.bind(&mut g, train_lm, true)?;
        let mut terms = Vec::with_capacity(batch.len());
        for &i in &batch {
            let ex = &corpus.examples[i];
            let zq = g.constant(ex.visual.clone())?;
            terms.push(backbone.sal_loss(&mut g, &bound, zq, &ex.prompt, &ex.target)?);
        }
        let loss = mean_of_scalars(&mut g, &terms)?;
        log.push(g.value(loss).item());
        g.backward(loss)?;
        let lr_now = schedule.lr(step)?;
        let gp = backbone.projector.params().grads(&g, &bound.projector);
        opt_proj.update(backbone.projector.params_mut(), &gp, lr_now)?;
        if train_lm {
            let gl = backbone.lm.params().grads(&g, &bound.lm);
            opt_lm.update(backbone.lm.params_mut(), &gl, lr_now)?;
        }
    }
    Ok(log)
}

pub(crate) fn mean_of_scalars(g: &mut Graph, terms: &[crate::tensor::Var]) -> Result<crate::tensor::Var, crate::tensor::TensorError> {
    let mut total = terms[0];
    for &t in &terms[1..] {
        total = g.add(total, t)?;
    }
    g.scale(total, 1.0 / terms.len() as f64)
}

/// Align a backbone to a frozen codebook. Refuses corpora quantized with a
/// different codebook.
pub fn pretrain_backbone(
    backbone: &mut Backbone,
    codebook: &Codebook,
    corpus: &QuantizedCorpus,
    config: &PretrainConfig,
) -> Result<PretrainLog, Error> {
    let crc = codebook.crc();
    if corpus.codebook_crc != crc {
        return Err(Error::CrcMismatch { expected: crc, found: corpus.codebook_crc, what: "pretraining corpus".into() });
    }
    if corpus.examples.is_empty() {
        return Err(Error::Data("empty pretraining corpus".into()));
    }
    backbone.codebook_crc = crc;
    let stage1 = run_stage(backbone, corpus, config.stage1_steps, config.stage1_lr, config.batch_size, false, config.seed, "pretrain-stage1")?;
    let stage2 = run_stage(backbone, corpus, config.stage2_steps, config.stage2_lr, config.batch_size, true, config.seed, "pretrain-stage2")?;
    Ok(PretrainLog { stage1, stage2 })
}
