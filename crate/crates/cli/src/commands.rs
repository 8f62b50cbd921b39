use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use craft_core::codebook::{fit_codebook as fit, Codebook};
use craft_core::data::{generate_dataset, load_samples, BankSpec, Domain, FeatureBank, Sample, Split, TaskKind};
use craft_core::eval::{encoder_token_stats, evaluate, quantize_sample, Cell, EvalReport, Pruning};
use craft_core::experiment::{
    codebook_size_ablation, keep_ratio_sweep, loss_ablation, mean_flops, task_name, transfer_matrix, LossTerms, World,
};
use craft_core::losses::LossWeights;
use craft_core::model::pretrain::{pretrain_backbone, QuantizedCorpus};
use craft_core::model::{Backbone, Checkpoint, LmConfig, PatchEncoder, Precision};
use craft_core::pruner::{prune as prune_grid, PruneRequest, TokenStats};
use craft_core::rng::derive_seed;
use craft_core::trainer::{loss_log_csv, train_encoder, TrainState};
use craft_core::vocab::{Vocab, VOCAB_SIZE};
use log::info;
use serde_json::json;

use crate::artifacts::Outputs;
use crate::config::RunConfig;
use crate::{AblationArg, ArchArg, CliError, WorldArgs};

fn domain_label(d: Domain) -> &'static str {
    match d {
        Domain::Generic => "generic",
        Domain::Specialist => "specialist",
    }
}

fn bank(cfg: &RunConfig) -> FeatureBank {
    FeatureBank::new(&BankSpec { seed: derive_seed(cfg.seed, "bank"), ..cfg.experiment.bank })
}

fn read_samples(path: &Path) -> Result<Vec<Sample>> {
    let samples = load_samples(path).map_err(|e| match e {
        craft_core::Error::Data(m) => anyhow::Error::from(CliError::Format(format!("{}: {m}", path.display()))),
        other => anyhow::Error::from(other).context(path.display().to_string()),
    })?;
    if samples.is_empty() {
        return Err(CliError::Format(format!("{}: no samples", path.display())).into());
    }
    Ok(samples)
}

fn split(samples: &[Sample], which: Split) -> Vec<Sample> {
    samples.iter().filter(|s| s.split == which).cloned().collect()
}

fn load_codebook(path: &Path) -> Result<Codebook> {
    Codebook::load(path).with_context(|| path.display().to_string())
}

fn load_backbone(path: &Path, cb: &Codebook) -> Result<Backbone> {
    let ck = Checkpoint::load(path).with_context(|| path.display().to_string())?;
    let b = Backbone::from_checkpoint(&ck).with_context(|| path.display().to_string())?;
    if b.codebook_crc != cb.crc() {
        return Err(CliError::Crc { expected: cb.crc(), found: b.codebook_crc, what: path.display().to_string() }.into());
    }
    Ok(b)
}

fn identity_encoder(cfg: &RunConfig) -> PatchEncoder {
    PatchEncoder::new(cfg.experiment.encoder, derive_seed(cfg.seed, "encoder-init"))
}

/// The stored encoder, or the identity encoder when none is given.
fn load_encoder(cfg: &RunConfig, path: Option<&Path>, cb: &Codebook) -> Result<PatchEncoder> {
    let Some(path) = path else { return Ok(identity_encoder(cfg)) };
    let ck = Checkpoint::load(path).with_context(|| path.display().to_string())?;
    if ck.codebook_crc != cb.crc() {
        return Err(CliError::Crc { expected: cb.crc(), found: ck.codebook_crc, what: path.display().to_string() }.into());
    }
    Ok(TrainState::from_checkpoint(&ck).with_context(|| path.display().to_string())?.encoder)
}

fn inputs(paths: &[Option<&Path>]) -> Vec<PathBuf> {
    paths.iter().flatten().map(|p| p.to_path_buf()).collect()
}

fn check_ratio(r: f64) -> Result<f64> {
    if r > 0.0 && r <= 1.0 {
        Ok(r)
    } else {
        Err(CliError::Usage(format!("keep ratio {r} outside (0, 1]")).into())
    }
}

pub fn gen_data(cfg: &RunConfig, a: &crate::GenData) -> Result<()> {
    let task: TaskKind = a.task.into();
    let domain: Domain = a.domain.into();
    let template = match domain {
        Domain::Generic => &cfg.experiment.generic,
        Domain::Specialist => &cfg.experiment.specialist,
    };
    let mut spec = template.clone();
    spec.task = task;
    spec.domain = domain;
    spec.seed = derive_seed(cfg.seed, &format!("{}-{}", domain_label(domain), task_name(task)));
    spec.train_size = a.train_size.unwrap_or(spec.train_size);
    spec.test_size = a.test_size.unwrap_or(spec.test_size);
    let ds = generate_dataset(&spec, &bank(cfg))?;
    let mut out = Outputs::new();
    out.write(&a.out, ds.to_jsonl()?.as_bytes())?;
    out.commit("gen-data", cfg, &[], json!({ "spec": spec, "held_out": ds.held_out }))?;
    info!("wrote {} train and {} test samples to {}", ds.train.len(), ds.test.len(), a.out.display());
    Ok(())
}

pub fn fit_codebook(cfg: &RunConfig, a: &crate::FitCodebook) -> Result<()> {
    let mut corpus = Vec::new();
    for p in &a.data {
        corpus.extend(split(&read_samples(p)?, Split::Train).into_iter().map(|s| s.features));
    }
    let levels = a.levels.unwrap_or(cfg.experiment.levels);
    let entries = a.entries.unwrap_or(cfg.experiment.entries);
    let cb = fit(&corpus, levels, entries, derive_seed(cfg.seed, "codebook"))?;
    let mut out = Outputs::new();
    out.write(&a.out, &cb.to_bytes())?;
    let crc = format!("{:08x}", cb.crc());
    out.commit("fit-codebook", cfg, &a.data, json!({ "codebook_crc": crc, "levels": levels, "entries": entries }))?;
    info!("fitted L={levels} K={entries} codebook on {} grids, crc {crc}", corpus.len());
    Ok(())
}

pub fn freq_stats(cfg: &RunConfig, a: &crate::FreqStats) -> Result<()> {
    let cb = load_codebook(&a.codebook)?;
    let encoder = load_encoder(cfg, a.encoder.as_deref(), &cb)?;
    let train = split(&read_samples(&a.data)?, Split::Train);
    let source = a.data.file_stem().map(|s| s.to_string_lossy().replace(char::is_whitespace, "_")).unwrap_or_default();
    let stats = encoder_token_stats(&encoder, &cb, &train, &format!("{source}-train"))?;
    let mut out = Outputs::new();
    out.write(&a.out, stats.to_text().as_bytes())?;
    out.commit(
        "freq-stats",
        cfg,
        &inputs(&[Some(&a.data), Some(&a.codebook), a.encoder.as_deref()]),
        json!({ "codebook_crc": format!("{:08x}", cb.crc()), "total": stats.total() }),
    )?;
    Ok(())
}

pub fn pretrain(cfg: &RunConfig, a: &crate::Pretrain) -> Result<()> {
    let cb = load_codebook(&a.codebook)?;
    let train = split(&read_samples(&a.data)?, Split::Train);
    let (lm, label) = match a.arch {
        ArchArg::A => (LmConfig::backbone_a(VOCAB_SIZE), "backbone-a"),
        ArchArg::B => (LmConfig::backbone_b(VOCAB_SIZE), "backbone-b"),
    };
    let seed = derive_seed(cfg.seed, label);
    let mut backbone = Backbone::new(lm, cb.dim(), cb.crc(), seed);
    let corpus = QuantizedCorpus::from_samples(&train, &cb, &Vocab::new())?;
    let pcfg = craft_core::model::pretrain::PretrainConfig { seed, ..cfg.experiment.pretrain.clone() };
    let log = pretrain_backbone(&mut backbone, &cb, &corpus, &pcfg)?;
    let mut out = Outputs::new();
    out.write(&a.out, &backbone.to_checkpoint().to_bytes(Precision::Binary64))?;
    out.commit(
        "pretrain",
        cfg,
        &inputs(&[Some(&a.data), Some(&a.codebook)]),
        json!({
            "arch_id": backbone.arch_id(),
            "codebook_crc": format!("{:08x}", cb.crc()),
            "final_stage1_loss": log.stage1.last(),
            "final_stage2_loss": log.stage2.last(),
        }),
    )?;
    info!("aligned {} on {} examples", backbone.arch_id(), corpus.examples.len());
    Ok(())
}

pub fn adapt(cfg: &RunConfig, a: &crate::Adapt) -> Result<()> {
    let cb = load_codebook(&a.codebook)?;
    let backbone = load_backbone(&a.backbone, &cb)?;
    let vocab = Vocab::new();
    let train = split(&read_samples(&a.data)?, Split::Train);
    let task = train.first().map(|s| s.task).ok_or_else(|| CliError::Format("no train samples".into()))?;
    let examples = train.iter().map(|s| s.to_adapt_example(&vocab)).collect::<Result<Vec<_>, _>>()?;
    let mut tcfg = cfg.experiment.adapt.clone();
    tcfg.seed = derive_seed(cfg.seed, "adapt");
    tcfg.weights = match task {
        TaskKind::Classification => LossWeights::classification(),
        TaskKind::AttributeVqa => LossWeights::vqa(),
    };
    tcfg.disable_sal = a.no_sal;
    tcfg.disable_con = a.no_con;
    tcfg.disable_commit = a.no_commit;
    tcfg.total_steps = a.steps.unwrap_or(tcfg.total_steps);
    tcfg.peak_lr = a.lr.unwrap_or(tcfg.peak_lr);
    let terms = LossTerms { sal: !a.no_sal, con: !a.no_con, commit: !a.no_commit };
    let (state, log) = train_encoder(identity_encoder(cfg), &backbone, &cb, &vocab, &examples, &tcfg)?;
    let log_path = a.log.clone().unwrap_or_else(|| a.out.with_extension("csv"));
    let mut out = Outputs::new();
    out.write(&a.out, &state.to_checkpoint(&tcfg, cb.crc()).to_bytes(Precision::Binary64))?;
    out.write(&log_path, loss_log_csv(&log).as_bytes())?;
    out.commit(
        "adapt",
        cfg,
        &inputs(&[Some(&a.data), Some(&a.backbone), Some(&a.codebook)]),
        json!({
            "variant": terms.name(),
            "train_config": tcfg,
            "train_config_hash": tcfg.hash(),
            "codebook_crc": format!("{:08x}", cb.crc()),
            "final_total_loss": log.last().map(|r| r.total),
        }),
    )?;
    info!("adapted encoder ({}) for {} steps", terms.name(), log.len());
    Ok(())
}

pub fn prune(cfg: &RunConfig, a: &crate::Prune) -> Result<()> {
    let cb = load_codebook(&a.codebook)?;
    let encoder = load_encoder(cfg, a.encoder.as_deref(), &cb)?;
    let stats = TokenStats::load(&a.stats).with_context(|| a.stats.display().to_string())?;
    if stats.k() != cb.entries() {
        return Err(CliError::Format(format!("stats have K={}, codebook has K={}", stats.k(), cb.entries())).into());
    }
    let test = split(&read_samples(&a.data)?, Split::Test);
    let sample = test
        .get(a.index)
        .ok_or_else(|| CliError::Usage(format!("index {} outside the {} test samples", a.index, test.len())))?;
    let q = quantize_sample(&encoder, &cb, sample)?;
    let req = match a.tokens {
        Some(m) => PruneRequest::tokens(m),
        None => PruneRequest::keep_ratio(check_ratio(a.keep_ratio.unwrap_or(cfg.experiment.keep_ratio))?),
    }
    .with_selection(a.selection.into(), derive_seed(cfg.seed, "prune"));
    let result = prune_grid(&q, &stats, &req)?;
    let dump = json!({
        "index": a.index,
        "tokens": q.len(),
        "first_level_ids": q.first_level_ids(),
        "residual_energy": q.residual_energy,
        "request": req,
        "result": result,
    });
    let mut out = Outputs::new();
    out.write(&a.out, serde_json::to_string_pretty(&dump)?.as_bytes())?;
    out.commit("prune", cfg, &inputs(&[Some(&a.data), Some(&a.codebook), Some(&a.stats), a.encoder.as_deref()]), json!(null))?;
    Ok(())
}

fn write_report(out: &mut Outputs, path: &Path, report: &EvalReport) -> Result<()> {
    out.write(path, report.to_json()?.as_bytes())?;
    out.write(&path.with_extension("csv"), report.to_csv().as_bytes())?;
    Ok(())
}

pub fn eval(cfg: &RunConfig, a: &crate::Eval) -> Result<()> {
    let keep = check_ratio(a.keep_ratio.unwrap_or(cfg.experiment.keep_ratio))?;
    let cb = load_codebook(&a.codebook)?;
    let backbone = load_backbone(&a.backbone, &cb)?;
    let encoder = load_encoder(cfg, a.encoder.as_deref(), &cb)?;
    let vocab = Vocab::new();
    let samples = read_samples(&a.data)?;
    let test = split(&samples, Split::Test);
    if test.is_empty() {
        return Err(CliError::Format(format!("{}: no test samples", a.data.display())).into());
    }
    let stats = match &a.stats {
        Some(p) => TokenStats::load(p).with_context(|| p.display().to_string())?,
        None => encoder_token_stats(&encoder, &cb, &split(&samples, Split::Train), "train")?,
    };
    let outcome = evaluate(&encoder, &backbone, &cb, &vocab, &test, &Pruning::keep_ratio(&stats, keep))?;
    let mut report = EvalReport::new(
        "eval",
        json!({
            "config_hash": cfg.hash(),
            "codebook_crc": format!("{:08x}", cb.crc()),
            "seeds": [cfg.seed],
            "flop_model": "2 x multiply-accumulates of one forward pass; embedding lookups excluded",
            "mean_kept_fraction": outcome.mean_kept_fraction(),
        }),
    );
    report.cells.push(Cell {
        task: task_name(test[0].task).into(),
        encoder: if a.encoder.is_some() { "adapted" } else { "zero-shot" }.into(),
        backbone: backbone.arch_id().into(),
        keep_ratio: keep,
        variant: "eval".into(),
        seed: cfg.seed,
        accuracy: outcome.accuracy,
        flops: mean_flops(&outcome, &test, &vocab, &backbone, cb.dim()),
    });
    let mut out = Outputs::new();
    write_report(&mut out, &a.out, &report)?;
    out.commit(
        "eval",
        cfg,
        &inputs(&[Some(&a.data), Some(&a.backbone), Some(&a.codebook), a.encoder.as_deref(), a.stats.as_deref()]),
        json!(null),
    )?;
    info!("accuracy {:.4} at keep ratio {keep}", outcome.accuracy);
    Ok(())
}

fn world(cfg: &RunConfig, a: &WorldArgs) -> Result<World> {
    let Some(cb_path) = &a.codebook else {
        info!("building world: fitting codebook and pretraining both backbones");
        return Ok(World::build(cfg.experiment.clone())?);
    };
    let cb = load_codebook(cb_path)?;
    let backbones = a.backbone.iter().map(|p| load_backbone(p, &cb)).collect::<Result<Vec<_>>>()?;
    let mut w = World::from_parts(cfg.experiment.clone(), cb, backbones)?;
    if w.backbones.is_empty() {
        let alpha = w.pretrain(LmConfig::backbone_a(VOCAB_SIZE), &w.codebook, "backbone-a")?;
        let beta = w.pretrain(LmConfig::backbone_b(VOCAB_SIZE), &w.codebook, "backbone-b")?;
        w.backbones = vec![alpha, beta];
    }
    Ok(w)
}

fn world_inputs(a: &WorldArgs) -> Vec<PathBuf> {
    a.codebook.iter().chain(&a.backbone).cloned().collect()
}

pub fn sweep(cfg: RunConfig, a: &crate::Sweep) -> Result<()> {
    for &r in &a.ratios {
        check_ratio(r)?;
    }
    let w = world(&cfg, &a.world)?;
    let runs = w.runs(LossTerms::FULL)?;
    let report = keep_ratio_sweep(&w, &runs, &a.ratios)?;
    let mut out = Outputs::new();
    write_report(&mut out, &a.out, &report)?;
    out.commit("sweep", &cfg, &world_inputs(&a.world), json!(null))?;
    Ok(())
}

pub fn transfer(mut cfg: RunConfig, a: &crate::Transfer) -> Result<()> {
    if let Some(r) = a.keep_ratio {
        cfg.experiment.keep_ratio = check_ratio(r)?;
    }
    let w = world(&cfg, &a.world)?;
    let mut runs = w.zero_shot_runs()?;
    runs.extend(w.runs(LossTerms::FULL)?);
    let report = transfer_matrix(&w, &runs)?;
    let mut out = Outputs::new();
    write_report(&mut out, &a.out, &report)?;
    out.commit("transfer", &cfg, &world_inputs(&a.world), json!(null))?;
    Ok(())
}

pub fn ablate(mut cfg: RunConfig, a: &crate::Ablate) -> Result<()> {
    if let Some(r) = a.keep_ratio {
        cfg.experiment.keep_ratio = check_ratio(r)?;
    }
    let w = world(&cfg, &a.world)?;
    let report = match a.kind {
        AblationArg::Loss => {
            let mut runs = Vec::new();
            for terms in LossTerms::ablations() {
                runs.extend(w.runs(terms)?);
            }
            loss_ablation(&w, &runs)?
        }
        AblationArg::Codebook => {
            for &f in &a.fractions {
                if !(f > 0.0 && f <= 1.0) {
                    return Err(CliError::Usage(format!("codebook fraction {f} outside (0, 1]")).into());
                }
            }
            codebook_size_ablation(&w, &a.fractions, a.task.into())?
        }
    };
    let mut out = Outputs::new();
    write_report(&mut out, &a.out, &report)?;
    out.commit("ablate", &cfg, &world_inputs(&a.world), json!(null))?;
    Ok(())
}
