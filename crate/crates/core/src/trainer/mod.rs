//! Encoder adaptation: only the patch encoder and the contrastive temperature
//! are updated; projector, language model and codebook stay frozen.

mod optim;

pub use optim::{clip_grad_norm, grad_norm, AdamW, CosineSchedule, WARMUP_RATIO};

use serde::{Deserialize, Serialize};

use crate::codebook::{commitment_loss_with, ste_quantize, Codebook, FeatureGrid};
use crate::losses::{composite_loss, sigmoid_contrastive, ContrastiveBatch, LossWeights, TextSet};
use crate::model::pretrain::{mean_of_scalars, BatchSampler};
use crate::model::{Backbone, Checkpoint, EncoderConfig, ParamSet, PatchEncoder, Precision};
use crate::rng::substream;
use crate::tensor::{Graph, Tensor, Var};
use crate::vocab::Vocab;
use crate::Error;

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("schedule step {step} outside [0, {total}]")]
    Schedule { step: usize, total: usize },
    #[error("non-finite values: {0}")]
    NonFinite(String),
    #[error("invalid training configuration: {0}")]
    Config(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub peak_lr: f64,
    pub total_steps: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub weights: LossWeights,
    pub disable_sal: bool,
    pub disable_con: bool,
    pub disable_commit: bool,
    /// Diagnostic only; off unless set.
    pub max_grad_norm: Option<f64>,
    pub init_tau: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            peak_lr: 1e-3,
            total_steps: 200,
            batch_size: 24,
            seed: 0,
            weights: LossWeights::vqa(),
            disable_sal: false,
            disable_con: false,
            disable_commit: false,
            max_grad_norm: None,
            init_tau: 10.0,
        }
    }
}

impl TrainConfig {
    pub const WEIGHT_DECAY: f64 = 0.0;

    pub fn schedule(&self) -> CosineSchedule {
        CosineSchedule::new(self.peak_lr, self.total_steps)
    }

    pub fn hash(&self) -> String {
        crate::config_hash(self)
    }

    fn validate(&self) -> Result<(), TrainError> {
        if self.batch_size == 0 || self.total_steps == 0 {
            return Err(TrainError::Config("batch size and total steps must be positive".into()));
        }
        if !(self.peak_lr.is_finite() && self.peak_lr >= 0.0 && self.init_tau > 0.0) {
            return Err(TrainError::Config(format!("peak_lr={}, init_tau={}", self.peak_lr, self.init_tau)));
        }
        Ok(())
    }
}

/// One adaptation sample: raw patch features, tokenized prompt/answer, class
/// label and the sentences it may be contrasted against.
#[derive(Debug, Clone, PartialEq)]
pub struct AdaptExample {
    pub input: FeatureGrid,
    pub prompt: Vec<usize>,
    pub target: Vec<usize>,
    pub label: usize,
    pub texts: TextSet,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossRow {
    pub step: usize,
    pub lr: f64,
    pub sal: f64,
    pub con: f64,
    pub commit: f64,
    pub total: f64,
}

pub fn loss_log_csv(rows: &[LossRow]) -> String {
    let mut s = String::from("step,lr,sal,con,commit,total\n");
    for r in rows {
        s.push_str(&format!("{},{},{},{},{},{}\n", r.step, r.lr, r.sal, r.con, r.commit, r.total));
    }
    s
}

/// Everything needed to continue a run exactly where it stopped.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub encoder: PatchEncoder,
    pub log_tau: ParamSet,
    pub opt_encoder: AdamW,
    pub opt_tau: AdamW,
    pub step: usize,
}

impl TrainState {
    pub fn new(encoder: PatchEncoder, init_tau: f64) -> Self {
        let mut log_tau = ParamSet::new();
        log_tau.push("log_tau", Tensor::scalar(init_tau.ln()));
        let opt_encoder = AdamW::new(encoder.params(), TrainConfig::WEIGHT_DECAY);
        let opt_tau = AdamW::new(&log_tau, TrainConfig::WEIGHT_DECAY);
        Self { encoder, log_tau, opt_encoder, opt_tau, step: 0 }
    }

    pub fn tau(&self) -> f64 {
        self.log_tau.get(0).item().exp()
    }

    pub fn to_checkpoint(&self, config: &TrainConfig, codebook_crc: u32) -> Checkpoint {
        let mut ck = Checkpoint::new("patch-encoder", codebook_crc);
        ck.metadata = serde_json::json!({
            "kind": "encoder",
            "encoder_config": self.encoder.config(),
            "step": self.step,
            "seed": config.seed,
            "config_hash": config.hash(),
            "train_config": config,
            "adam_step": [self.opt_encoder.step, self.opt_tau.step],
        });
        ck.push_all("encoder.", self.encoder.params().named());
        ck.push_all("", self.log_tau.named());
        for (prefix, opt) in [("opt.encoder", &self.opt_encoder), ("opt.tau", &self.opt_tau)] {
            for (i, (m, v)) in opt.m.iter().zip(&opt.v).enumerate() {
                ck.blobs.push((format!("{prefix}.m.{i}"), m.clone()));
                ck.blobs.push((format!("{prefix}.v.{i}"), v.clone()));
            }
        }
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self, Error> {
        let bad = |m: String| Error::Checkpoint(crate::model::CheckpointError::Format(m));
        let cfg: EncoderConfig = serde_json::from_value(ck.metadata["encoder_config"].clone())
            .map_err(|e| bad(format!("encoder_config: {e}")))?;
        let mut encoder = PatchEncoder::new(cfg, 0);
        encoder.params_mut().load_named(&ck.with_prefix("encoder.")).map_err(bad)?;
        let log_tau = ck.blob("log_tau").ok_or_else(|| bad("missing log_tau".into()))?;
        let mut state = Self::new(encoder, log_tau.item().exp());
        state.log_tau.get_mut(0).data_mut()[0] = log_tau.item();
        state.step = ck.metadata["step"].as_u64().ok_or_else(|| bad("step".into()))? as usize;
        let steps = ck.metadata["adam_step"].as_array().ok_or_else(|| bad("adam_step".into()))?;
        for (k, (prefix, opt)) in [("opt.encoder", &mut state.opt_encoder), ("opt.tau", &mut state.opt_tau)]
            .into_iter()
            .enumerate()
        {
            opt.step = steps.get(k).and_then(|v| v.as_u64()).ok_or_else(|| bad("adam_step".into()))?;
            for i in 0..opt.m.len() {
                let get = |n: String| ck.blob(&n).cloned().ok_or_else(|| bad(format!("missing {n}")));
                opt.m[i] = get(format!("{prefix}.m.{i}"))?;
                opt.v[i] = get(format!("{prefix}.v.{i}"))?;
            }
        }
        Ok(state)
    }

    pub fn save(&self, path: &std::path::Path, config: &TrainConfig, codebook_crc: u32) -> Result<(), Error> {
        Ok(self.to_checkpoint(config, codebook_crc).save(path, Precision::Binary64)?)
    }
}

/// Scalar loss terms of one step, before weighting.
struct StepLosses {
    total: Var,
    sal: f64,
    con: f64,
    commit: f64,
}

/// Adapts a patch encoder against a frozen backbone and codebook.
pub struct Trainer<'a> {
    pub backbone: &'a Backbone,
    pub codebook: &'a Codebook,
    pub vocab: &'a Vocab,
    pub data: &'a [AdaptExample],
    pub config: &'a TrainConfig,
}

impl<'a> Trainer<'a> {
    pub fn new(
        backbone: &'a Backbone,
        codebook: &'a Codebook,
        vocab: &'a Vocab,
        data: &'a [AdaptExample],
        config: &'a TrainConfig,
    ) -> Result<Self, Error> {
        config.validate()?;
        let crc = codebook.crc();
        if backbone.codebook_crc != crc {
            return Err(Error::CrcMismatch { expected: crc, found: backbone.codebook_crc, what: "backbone".into() });
        }
        if data.is_empty() {
            return Err(Error::Data("empty adaptation set".into()));
        }
        Ok(Self { backbone, codebook, vocab, data, config })
    }

    fn batch_for(&self, step: usize) -> Vec<usize> {
        // Replaying the sampler makes every step a pure function of (seed, step).
        let mut sampler = BatchSampler::new(self.data.len(), self.config.seed, "adapt-batches");
        let mut batch = Vec::new();
        for _ in 0..=step {
            batch = sampler.next_batch(self.config.batch_size);
        }
        batch
    }

    fn losses(&self, g: &mut Graph, enc: &PatchEncoder, p_enc: &[Var], log_tau: Var, batch: &[usize], step: usize) -> Result<StepLosses, Error> {
        let cfg = self.config;
        let bound = self.backbone.bind(g, false, false)?;
        let mut sal_terms = Vec::with_capacity(batch.len());
        let mut commit_terms = Vec::with_capacity(batch.len());
        let mut cls_rows = Vec::with_capacity(batch.len());
        for &i in batch {
            let ex = &self.data[i];
            let out = enc.forward(g, p_enc, &ex.input)?;
            cls_rows.push(out.cls);
            if cfg.disable_sal && cfg.disable_commit {
                continue;
            }
            let (zq, q) = ste_quantize(g, out.patches, ex.input.width, ex.input.height, self.codebook)?;
            if !cfg.disable_commit {
                commit_terms.push(commitment_loss_with(g, out.patches, &q)?);
            }
            if !cfg.disable_sal {
                sal_terms.push(self.backbone.sal_loss(g, &bound, zq, &ex.prompt, &ex.target)?);
            }
        }
        let zero = g.constant(Tensor::scalar(0.0))?;
        let sal = if sal_terms.is_empty() { zero } else { mean_of_scalars(g, &sal_terms)? };
        let commit = if commit_terms.is_empty() { zero } else { mean_of_scalars(g, &commit_terms)? };
        let con = if cfg.disable_con {
            zero
        } else {
            let mut rng = substream(cfg.seed, &format!("adapt-text-{step}"));
            let width = self.backbone.lm.config().width;
            let mut text = Vec::with_capacity(batch.len() * width);
            let mut labels = Vec::with_capacity(batch.len());
            for &i in batch {
                let ex = &self.data[i];
                text.extend(self.backbone.encode_text(self.vocab, ex.texts.sample(&mut rng)));
                labels.push(ex.label);
            }
            let text = Tensor::matrix(batch.len(), width, text)?;
            let cls = if cls_rows.len() == 1 { cls_rows[0] } else { g.concat_rows(&cls_rows)? };
            let image = self.backbone.projector.forward(g, &bound.projector, cls)?;
            sigmoid_contrastive(g, &ContrastiveBatch { image, text: &text, labels: &labels, log_tau })?
        };
        let total = composite_loss(g, sal, con, commit, cfg.weights)?;
        let sal_v = g.value(sal).item();
        let con_v = g.value(con).item();
        let commit_v = g.value(commit).item();
        Ok(StepLosses { total, sal: sal_v, con: con_v, commit: commit_v })
    }

    /// Advance `state` until `until` steps have been taken in total.
    pub fn run(&self, state: &mut TrainState, until: usize) -> Result<Vec<LossRow>, Error> {
        let cfg = self.config;
        let schedule = cfg.schedule();
        let until = until.min(cfg.total_steps);
        let mut log = Vec::with_capacity(until.saturating_sub(state.step));
        while state.step < until {
            let step = state.step;
            let batch = self.batch_for(step);
            let mut g = Graph::new();
            let p_enc = state.encoder.params().bind(&mut g, true)?;
            let log_tau = state.log_tau.bind(&mut g, true)?[0];
            let l = self.losses(&mut g, &state.encoder, &p_enc, log_tau, &batch, step)?;
            let total = g.value(l.total).item();
            if !total.is_finite() {
                return Err(TrainError::NonFinite(format!("loss at step {step}")).into());
            }
            g.backward(l.total)?;
            let mut ge = state.encoder.params().grads(&g, &p_enc);
            let mut gt = state.log_tau.grads(&g, &[log_tau]);
            if let Some(max) = cfg.max_grad_norm {
                clip_grad_norm(&mut ge, max);
                clip_grad_norm(&mut gt, max);
            }
            let lr = schedule.lr(step)?;
            state.opt_encoder.update(state.encoder.params_mut(), &ge, lr)?;
            state.opt_tau.update(&mut state.log_tau, &gt, lr)?;
            log.push(LossRow { step, lr, sal: l.sal, con: l.con, commit: l.commit, total });
            state.step += 1;
        }
        Ok(log)
    }
}

/// Full adaptation run from a fresh state.
pub fn train_encoder(
    encoder: PatchEncoder,
    backbone: &Backbone,
    codebook: &Codebook,
    vocab: &Vocab,
    data: &[AdaptExample],
    config: &TrainConfig,
) -> Result<(TrainState, Vec<LossRow>), Error> {
    let trainer = Trainer::new(backbone, codebook, vocab, data, config)?;
    let mut state = TrainState::new(encoder, config.init_tau);
    let log = trainer.run(&mut state, config.total_steps)?;
    Ok((state, log))
}
