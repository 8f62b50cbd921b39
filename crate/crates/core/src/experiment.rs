//! The toy world used for end-to-end runs: a generic codebook, two surrogate
//! backbones aligned to it, a specialist domain to adapt to, and the sweeps
//! built on top.

use serde::{Deserialize, Serialize};

use crate::codebook::{fit_codebook, Codebook};
use crate::data::{generate_dataset, BankSpec, Dataset, DatasetSpec, Domain, FeatureBank, Sample, TaskKind};
use crate::eval::{encoder_token_stats, evaluate, flops_estimate, Cell, EvalOutcome, EvalReport, Pruning};
use crate::losses::LossWeights;
use crate::model::pretrain::{pretrain_backbone, PretrainConfig, QuantizedCorpus};
use crate::model::{Backbone, EncoderConfig, LmConfig, PatchEncoder};
use crate::pruner::Selection;
use crate::rng::derive_seed;
use crate::trainer::{train_encoder, LossRow, TrainConfig};
use crate::vocab::{Vocab, VOCAB_SIZE};
use crate::Error;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub world_seed: u64,
    pub bank: BankSpec,
    pub encoder: EncoderConfig,
    pub levels: usize,
    pub entries: usize,
    /// Template for the generic-domain data used to fit the codebook and
    /// align the backbones.
    pub generic: DatasetSpec,
    /// Template for the specialist-domain adaptation data.
    pub specialist: DatasetSpec,
    pub pretrain: PretrainConfig,
    pub adapt: TrainConfig,
    pub keep_ratio: f64,
    pub seeds: Vec<u64>,
    pub tasks: Vec<TaskKind>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            world_seed: 7,
            bank: BankSpec::default(),
            encoder: EncoderConfig::default(),
            levels: 2,
            entries: 64,
            generic: DatasetSpec { domain: Domain::Generic, held_out_fraction: 0.0, train_size: 600, test_size: 100, ..Default::default() },
            specialist: DatasetSpec { domain: Domain::Specialist, train_size: 300, test_size: 200, ..Default::default() },
            pretrain: PretrainConfig::default(),
            adapt: TrainConfig { peak_lr: 1e-2, total_steps: 150, batch_size: 16, ..Default::default() },
            keep_ratio: 0.8,
            seeds: vec![0, 1, 2],
            tasks: vec![TaskKind::Classification, TaskKind::AttributeVqa],
        }
    }
}

pub fn task_name(task: TaskKind) -> &'static str {
    match task {
        TaskKind::Classification => "classification",
        TaskKind::AttributeVqa => "attribute-vqa",
    }
}

/// Which loss terms an adaptation run uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LossTerms {
    pub sal: bool,
    pub con: bool,
    pub commit: bool,
}

impl LossTerms {
    pub const FULL: Self = Self { sal: true, con: true, commit: true };

    pub fn name(self) -> &'static str {
        match (self.sal, self.con, self.commit) {
            (true, true, true) => "full",
            (false, true, true) => "no-sal",
            (true, false, true) => "no-con",
            (true, true, false) => "no-commit",
            _ => "custom",
        }
    }

    /// The full objective and each single-term removal.
    pub fn ablations() -> [Self; 4] {
        [
            Self::FULL,
            Self { sal: false, ..Self::FULL },
            Self { con: false, ..Self::FULL },
            Self { commit: false, ..Self::FULL },
        ]
    }
}

/// An encoder plus the specialist dataset it belongs to.
#[derive(Debug, Clone)]
pub struct Run {
    pub task: TaskKind,
    pub seed: u64,
    pub variant: String,
    pub data: Dataset,
    pub encoder: PatchEncoder,
    pub log: Vec<LossRow>,
}

#[derive(Debug, Clone)]
pub struct World {
    pub config: ExperimentConfig,
    pub vocab: Vocab,
    pub bank: FeatureBank,
    pub codebook: Codebook,
    /// Backbone A (the adaptation surrogate) then backbone B.
    pub backbones: Vec<Backbone>,
    pub generic: Vec<Dataset>,
}

impl World {
    pub fn build(config: ExperimentConfig) -> Result<Self, Error> {
        let mut world = Self::unaligned(config)?;
        let a = world.pretrain(LmConfig::backbone_a(VOCAB_SIZE), &world.codebook, "backbone-a")?;
        let b = world.pretrain(LmConfig::backbone_b(VOCAB_SIZE), &world.codebook, "backbone-b")?;
        world.backbones = vec![a, b];
        Ok(world)
    }

    /// Rebuild a world from stored artifacts instead of pretraining.
    pub fn from_parts(config: ExperimentConfig, codebook: Codebook, backbones: Vec<Backbone>) -> Result<Self, Error> {
        let mut world = Self::unaligned(config)?;
        for b in &backbones {
            if b.codebook_crc != codebook.crc() {
                return Err(Error::CrcMismatch { expected: codebook.crc(), found: b.codebook_crc, what: b.arch_id().into() });
            }
        }
        world.codebook = codebook;
        world.backbones = backbones;
        Ok(world)
    }

    /// Data and codebook, no backbones yet.
    fn unaligned(config: ExperimentConfig) -> Result<Self, Error> {
        let vocab = Vocab::new();
        let bank = FeatureBank::new(&BankSpec { seed: derive_seed(config.world_seed, "bank"), ..config.bank });
        let generic = config
            .tasks
            .iter()
            .map(|&task| {
                let spec = DatasetSpec {
                    task,
                    domain: Domain::Generic,
                    seed: derive_seed(config.world_seed, &format!("generic-{}", task_name(task))),
                    ..config.generic.clone()
                };
                generate_dataset(&spec, &bank)
            })
            .collect::<Result<Vec<_>, _>>()?;
        let corpus: Vec<_> = generic.iter().flat_map(|d| d.train.iter().map(|s| s.features.clone())).collect();
        let codebook = fit_codebook(&corpus, config.levels, config.entries, derive_seed(config.world_seed, "codebook"))?;
        Ok(Self { config, vocab, bank, codebook, backbones: Vec::new(), generic })
    }

    /// Generic-domain examples quantized through the identity encoder.
    pub fn generic_corpus(&self, codebook: &Codebook) -> Result<QuantizedCorpus, Error> {
        let samples: Vec<Sample> = self.generic.iter().flat_map(|d| d.train.iter().cloned()).collect();
        QuantizedCorpus::from_samples(&samples, codebook, &self.vocab)
    }

    pub fn pretrain(&self, lm: LmConfig, codebook: &Codebook, label: &str) -> Result<Backbone, Error> {
        let seed = derive_seed(self.config.world_seed, label);
        let mut backbone = Backbone::new(lm, codebook.dim(), codebook.crc(), seed);
        let cfg = PretrainConfig { seed, ..self.config.pretrain.clone() };
        pretrain_backbone(&mut backbone, codebook, &self.generic_corpus(codebook)?, &cfg)?;
        Ok(backbone)
    }

    pub fn specialist(&self, task: TaskKind, seed: u64) -> Result<Dataset, Error> {
        let spec = DatasetSpec {
            task,
            domain: Domain::Specialist,
            seed: derive_seed(seed, &format!("specialist-{}", task_name(task))),
            ..self.config.specialist.clone()
        };
        generate_dataset(&spec, &self.bank)
    }

    /// Encoder before adaptation; passes features through unchanged.
    pub fn initial_encoder(&self, seed: u64) -> PatchEncoder {
        PatchEncoder::new(self.config.encoder, derive_seed(seed, "encoder-init"))
    }

    pub fn train_config(&self, task: TaskKind, seed: u64, terms: LossTerms) -> TrainConfig {
        let weights = match task {
            TaskKind::Classification => LossWeights::classification(),
            TaskKind::AttributeVqa => LossWeights::vqa(),
        };
        TrainConfig {
            seed: derive_seed(seed, "adapt"),
            weights,
            disable_sal: !terms.sal,
            disable_con: !terms.con,
            disable_commit: !terms.commit,
            ..self.config.adapt.clone()
        }
    }

    pub fn adapt(&self, data: &Dataset, backbone: &Backbone, codebook: &Codebook, seed: u64, terms: LossTerms) -> Result<Run, Error> {
        let examples = data.train.iter().map(|s| s.to_adapt_example(&self.vocab)).collect::<Result<Vec<_>, _>>()?;
        let cfg = self.train_config(data.spec.task, seed, terms);
        let (state, log) = train_encoder(self.initial_encoder(seed), backbone, codebook, &self.vocab, &examples, &cfg)?;
        Ok(Run { task: data.spec.task, seed, variant: terms.name().into(), data: data.clone(), encoder: state.encoder, log })
    }

    /// Zero-shot and adapted (with backbone A) runs for every task and seed.
    pub fn runs(&self, terms: LossTerms) -> Result<Vec<Run>, Error> {
        let mut out = Vec::new();
        for &task in &self.config.tasks {
            for &seed in &self.config.seeds {
                let data = self.specialist(task, seed)?;
                out.push(self.adapt(&data, &self.backbones[0], &self.codebook, seed, terms)?);
            }
        }
        Ok(out)
    }

    pub fn zero_shot_runs(&self) -> Result<Vec<Run>, Error> {
        let mut out = Vec::new();
        for &task in &self.config.tasks {
            for &seed in &self.config.seeds {
                out.push(Run {
                    task,
                    seed,
                    variant: "zero-shot".into(),
                    data: self.specialist(task, seed)?,
                    encoder: self.initial_encoder(seed),
                    log: Vec::new(),
                });
            }
        }
        Ok(out)
    }

    pub fn metadata(&self, extra: serde_json::Value) -> serde_json::Value {
        serde_json::json!({
            "config_hash": crate::config_hash(&self.config),
            "codebook_crc": format!("{:08x}", self.codebook.crc()),
            "seeds": self.config.seeds,
            "flop_model": "2 x multiply-accumulates of one forward pass; embedding lookups excluded",
            "extra": extra,
        })
    }
}

/// Evaluate one run on its test split with stats estimated from its train split.
pub fn evaluate_run(
    world: &World,
    run: &Run,
    backbone: &Backbone,
    codebook: &Codebook,
    keep_ratio: Option<f64>,
    selection: Selection,
) -> Result<EvalOutcome, Error> {
    match keep_ratio {
        None => evaluate(&run.encoder, backbone, codebook, &world.vocab, &run.data.test, &Pruning::Bypass),
        Some(r) => {
            let stats = encoder_token_stats(&run.encoder, codebook, &run.data.train, "specialist-train")?;
            let pruning = Pruning::with_selection(&stats, r, selection, run.seed);
            evaluate(&run.encoder, backbone, codebook, &world.vocab, &run.data.test, &pruning)
        }
    }
}

/// Mean estimated FLOPs per test sample of one evaluation.
pub fn mean_flops(outcome: &EvalOutcome, samples: &[Sample], vocab: &Vocab, backbone: &Backbone, dim: usize) -> f64 {
    let total: f64 = outcome
        .kept_tokens
        .iter()
        .zip(samples)
        .map(|(&k, s)| flops_estimate(k, vocab.encode_prompt(&s.prompt).len(), backbone.lm.config(), dim))
        .sum();
    total / samples.len() as f64
}

fn cell(world: &World, run: &Run, backbone: &Backbone, codebook: &Codebook, keep: f64, variant: &str) -> Result<Cell, Error> {
    let outcome = evaluate_run(world, run, backbone, codebook, Some(keep), Selection::Full)?;
    Ok(Cell {
        task: task_name(run.task).into(),
        encoder: run.variant.clone(),
        backbone: backbone.arch_id().into(),
        keep_ratio: keep,
        variant: variant.into(),
        seed: run.seed,
        accuracy: outcome.accuracy,
        flops: mean_flops(&outcome, &run.data.test, &world.vocab, backbone, codebook.dim()),
    })
}

/// Accuracy and FLOPs of each run at each keep ratio, on backbone A.
pub fn keep_ratio_sweep(world: &World, runs: &[Run], ratios: &[f64]) -> Result<EvalReport, Error> {
    let mut report = EvalReport::new("keep-ratio-sweep", world.metadata(serde_json::json!({ "ratios": ratios })));
    for run in runs {
        for &r in ratios {
            report.cells.push(cell(world, run, &world.backbones[0], &world.codebook, r, "sweep")?);
        }
    }
    Ok(report)
}

/// Every run against every backbone, without any re-alignment.
pub fn transfer_matrix(world: &World, runs: &[Run]) -> Result<EvalReport, Error> {
    let keep = world.config.keep_ratio;
    let mut report = EvalReport::new("transfer-matrix", world.metadata(serde_json::json!({ "keep_ratio": keep })));
    for run in runs {
        for b in &world.backbones {
            report.cells.push(cell(world, run, b, &world.codebook, keep, "transfer")?);
        }
    }
    Ok(report)
}

/// Runs trained with different loss terms, on backbone A.
pub fn loss_ablation(world: &World, runs: &[Run]) -> Result<EvalReport, Error> {
    let keep = world.config.keep_ratio;
    let mut report = EvalReport::new("loss-ablation", world.metadata(serde_json::json!({ "keep_ratio": keep })));
    for run in runs {
        report.cells.push(cell(world, run, &world.backbones[0], &world.codebook, keep, &run.variant)?);
    }
    Ok(report)
}

/// Re-align backbone A to a uniformly subsampled codebook per fraction, then
/// adapt and evaluate.
pub fn codebook_size_ablation(world: &World, fractions: &[f64], task: TaskKind) -> Result<EvalReport, Error> {
    let keep = world.config.keep_ratio;
    let mut report = EvalReport::new(
        "codebook-size-ablation",
        world.metadata(serde_json::json!({ "fractions": fractions, "task": task_name(task), "keep_ratio": keep })),
    );
    for &f in fractions {
        if !(f > 0.0 && f <= 1.0) {
            return Err(Error::Eval(format!("codebook fraction {f} outside (0, 1]")));
        }
        let cb = world.codebook.subsample(f, derive_seed(world.config.world_seed, "codebook-subsample"))?;
        let backbone = if cb.crc() == world.codebook.crc() {
            world.backbones[0].clone()
        } else {
            world.pretrain(LmConfig::backbone_a(VOCAB_SIZE), &cb, "backbone-a")?
        };
        for &seed in &world.config.seeds {
            let data = world.specialist(task, seed)?;
            let run = world.adapt(&data, &backbone, &cb, seed, LossTerms::FULL)?;
            report.cells.push(cell(world, &run, &backbone, &cb, keep, &format!("fraction={f}"))?);
        }
    }
    Ok(report)
}
