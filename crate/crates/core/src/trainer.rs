//! The training loop: label-gated generator/discriminator updates, batch-norm
//! strategy dispatch, per-step logging, epoch evaluation, checkpointing and
//! multi-seed orchestration.
//!
//! One step runs a single forward pass — `x̂ = G(x)`, `(y, z) = D(x)`,
//! `x̂' = G(x̂)`, `(ŷ, ẑ) = D(x̂)` per labeled subset — then derives both
//! objectives from that same tape and applies one Adam step to the generator
//! followed by one to the discriminator. Mixed batches are partitioned by
//! label; each subset flows through the composite objective that matches its
//! label.

use crate::checkpoint::{self, CheckpointMeta};
use crate::datasets::{BatchComposer, BatchSpec, Corpus, DataError, LabeledExample, OneClassSplit};
use crate::graph::{Tape, Var};
use crate::losses::{
    adversarial_loss, anomaly_loss, contextual_adversarial_loss, contextual_loss,
    discriminator_loss, final_loss, latent_loss, normality_loss, AnomalyTerms, BinaryTarget,
    LossBreakdown, LossError, LossWeights, NormalityTerms,
};
use crate::models::{
    BnStrategy, Discriminator, Generator, GeneratorSpec, ModelError, PassKind,
};
use crate::nn::Adam;
use crate::scalar::Scalar;
use crate::scoring::{mean_sd, score_split, ScoreError};
use crate::seeding::derive_rng;
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

/// Adam's numerical-stability constant; independent of the anomaly-loss
/// reciprocal guard in [`TrainConfig::eps`].
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("non-finite loss at step {step}: term {term}")]
    NonFinite { step: u64, term: &'static str },
    #[error("training config error: {0}")]
    Config(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Score(#[from] ScoreError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("serialization error: {0}")]
    Json(#[from] serde_json::Error),
}

/// Everything one training run needs to know.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    /// Guaranteed anomalies per batch when the split has any.
    pub min_anomalies: usize,
    pub epochs: usize,
    pub weights: LossWeights,
    pub bn_strategy: BnStrategy,
    pub backbone: GeneratorSpec,
    pub disc_width: usize,
    /// Contextual adversarial mechanism switch; when off, no second
    /// generator pass happens at all.
    pub adcon_enabled: bool,
    pub seed: u64,
    pub optimizer_betas: (f64, f64),
    /// Guard added to every reciprocal denominator of the anomaly loss.
    pub eps: f64,
    /// Accepted for configuration compatibility with the published training
    /// procedure, which declares a discriminator reset threshold but never
    /// applies it. No reset is performed.
    pub disc_reset_threshold: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 0.0002,
            batch_size: 256,
            min_anomalies: 32,
            epochs: 1,
            weights: LossWeights::default(),
            bn_strategy: BnStrategy::SHARED,
            backbone: GeneratorSpec::default(),
            disc_width: 64,
            adcon_enabled: true,
            seed: 7,
            optimizer_betas: (0.5, 0.999),
            eps: 1e-8,
            disc_reset_threshold: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.learning_rate <= 0.0 {
            return Err(TrainError::Config(format!(
                "learning_rate must be > 0, got {}",
                self.learning_rate
            )));
        }
        if self.epochs == 0 {
            return Err(TrainError::Config("epochs must be >= 1".into()));
        }
        if self.batch_size == 0 {
            return Err(TrainError::Config("batch_size must be >= 1".into()));
        }
        if self.min_anomalies > self.batch_size {
            return Err(TrainError::Config(format!(
                "min_anomalies {} exceeds batch_size {}",
                self.min_anomalies, self.batch_size
            )));
        }
        self.weights.validate().map_err(TrainError::Loss)?;
        self.backbone.validate().map_err(TrainError::Model)?;
        Ok(())
    }

    /// Stable digest of the canonical (key-sorted) JSON encoding.
    pub fn hash(&self) -> String {
        let value = serde_json::to_value(self).expect("config serializes");
        let canonical = serde_json::to_string(&value).expect("canonical encoding");
        let digest = Sha256::digest(canonical.as_bytes());
        digest.iter().take(6).map(|b| format!("{b:02x}")).collect()
    }

    pub fn batch_spec(&self) -> BatchSpec {
        BatchSpec {
            batch_size: self.batch_size,
            min_anomalies: self.min_anomalies,
        }
    }
}

/// Models plus their optimizers.
pub struct TrainContext<T> {
    pub gen: Generator<T>,
    pub disc: Discriminator<T>,
    pub opt_g: Adam<T>,
    pub opt_d: Adam<T>,
}

impl<T: Scalar> TrainContext<T> {
    /// Builds fresh models and optimizers from the config seed.
    pub fn build(config: &TrainConfig) -> Result<Self, TrainError> {
        config.validate()?;
        let mut rng = derive_rng(config.seed, "init-generator");
        let gen = Generator::build(config.backbone, &mut rng)?;
        let mut rng = derive_rng(config.seed, "init-discriminator");
        let disc = Discriminator::build(config.backbone.in_channels, config.disc_width, &mut rng)?;
        let lr = T::cast(config.learning_rate);
        let betas = (
            T::cast(config.optimizer_betas.0),
            T::cast(config.optimizer_betas.1),
        );
        let opt_g = gen.new_optimizer(lr, betas, T::cast(ADAM_EPS));
        let opt_d = disc.new_optimizer(lr, betas, T::cast(ADAM_EPS));
        Ok(TrainContext {
            gen,
            disc,
            opt_g,
            opt_d,
        })
    }

    /// Restores a context from a checkpoint directory.
    pub fn load(dir: &Path, config: &TrainConfig) -> Result<(Self, CheckpointMeta), TrainError> {
        let lr = T::cast(config.learning_rate);
        let betas = (
            T::cast(config.optimizer_betas.0),
            T::cast(config.optimizer_betas.1),
        );
        let (gen, disc, opt_g, opt_d, meta) = checkpoint::load_bundle(dir, lr, betas, T::cast(ADAM_EPS))?;
        Ok((
            TrainContext {
                gen,
                disc,
                opt_g,
                opt_d,
            },
            meta,
        ))
    }
}

/// Forward graph of one step with both objectives and the logged values.
pub struct StepGraph<T> {
    pub tape: Tape<T>,
    pub loss_g: Var,
    pub loss_d: Var,
    pub breakdown: LossBreakdown,
    pub n_normal: usize,
    pub n_anomaly: usize,
}

fn stack_images<T: Scalar>(examples: &[&LabeledExample<T>]) -> Tensor<T> {
    let tensors: Vec<&Tensor<T>> = examples.iter().map(|e| e.image.tensor()).collect();
    Tensor::stack(&tensors)
}

/// Builds the per-step computation graph: both subsets forwarded, both
/// objectives formed, nothing updated yet.
pub fn forward_losses<T: Scalar>(
    gen: &mut Generator<T>,
    disc: &mut Discriminator<T>,
    batch: &[LabeledExample<T>],
    config: &TrainConfig,
) -> Result<StepGraph<T>, TrainError> {
    let normals: Vec<&LabeledExample<T>> = batch.iter().filter(|e| e.y == 0).collect();
    let anomalies: Vec<&LabeledExample<T>> = batch.iter().filter(|e| e.y == 1).collect();
    if normals.is_empty() && anomalies.is_empty() {
        return Err(TrainError::Loss(LossError::EmptyBatch));
    }
    let strategy = config.bn_strategy;
    let weights = &config.weights;
    let mut tape = Tape::new();
    let mut breakdown = LossBreakdown::default();

    let scalar = |tape: &Tape<T>, v: Var| tape.value(v).item().to_f64_lossy();

    // normal subset: reconstruct well, fail the second pass
    let mut l_n = None;
    let mut disc_normal = None;
    if !normals.is_empty() {
        let x = tape.leaf(stack_images(&normals));
        let x_hat = gen.forward_train(&mut tape, x, PassKind::Real, strategy)?;
        let d_real = disc.forward_train(&mut tape, x, false, strategy)?;
        let x_hat_prime = config
            .adcon_enabled
            .then(|| gen.forward_train(&mut tape, x_hat, PassKind::Pseudo, strategy))
            .transpose()?;
        let d_fake = disc.forward_train(&mut tape, x_hat, false, strategy)?;

        let l_adv = adversarial_loss(&mut tape, d_fake.y, BinaryTarget::Real)?;
        let l_con = contextual_loss(&mut tape, x, x_hat)?;
        let l_adcon = x_hat_prime
            .map(|xp| contextual_adversarial_loss(&mut tape, x_hat, xp))
            .transpose()?;
        let l_lat = latent_loss(&mut tape, d_real.z, d_fake.z)?;
        let terms = NormalityTerms {
            l_adv,
            l_con,
            l_adcon,
            l_lat,
        };
        let composite = normality_loss(&mut tape, &terms, weights);

        breakdown.l_adv = scalar(&tape, l_adv);
        breakdown.l_con = scalar(&tape, l_con);
        breakdown.l_adcon = l_adcon.map(|v| scalar(&tape, v)).unwrap_or(0.0);
        breakdown.l_lat = scalar(&tape, l_lat);
        breakdown.l_normality = scalar(&tape, composite);
        l_n = Some(composite);
        disc_normal = Some((d_real.y, d_fake.y));
    }

    // anomalous subset: reward failed reconstruction through reciprocals
    let mut l_a = None;
    let mut disc_anomaly = None;
    if !anomalies.is_empty() {
        let x = tape.leaf(stack_images(&anomalies));
        let x_hat = gen.forward_train(&mut tape, x, PassKind::Real, strategy)?;
        let d_real = disc.forward_train(&mut tape, x, true, strategy)?;
        let x_hat_prime = config
            .adcon_enabled
            .then(|| gen.forward_train(&mut tape, x_hat, PassKind::Pseudo, strategy))
            .transpose()?;
        let d_fake = disc.forward_train(&mut tape, x_hat, false, strategy)?;

        let l_adv = adversarial_loss(&mut tape, d_fake.y, BinaryTarget::Fake)?;
        let l_adcon = x_hat_prime
            .map(|xp| contextual_adversarial_loss(&mut tape, x_hat, xp))
            .transpose()?;
        let l_lat = latent_loss(&mut tape, d_real.z, d_fake.z)?;
        let terms = AnomalyTerms {
            l_adv,
            l_adcon,
            l_lat,
        };
        let composite = anomaly_loss(&mut tape, &terms, weights, config.eps);
        breakdown.l_anomaly = scalar(&tape, composite);
        l_a = Some(composite);
        disc_anomaly = Some(d_real.y);
    }

    let loss_g = final_loss(&mut tape, l_n, l_a)?;
    let loss_d = discriminator_loss(&mut tape, disc_normal, disc_anomaly)?;
    breakdown.l_total = scalar(&tape, loss_g);
    breakdown.l_disc = scalar(&tape, loss_d);

    Ok(StepGraph {
        tape,
        loss_g,
        loss_d,
        breakdown,
        n_normal: normals.len(),
        n_anomaly: anomalies.len(),
    })
}

/// One optimizer step: forward, non-finite guard, generator update, then
/// discriminator update, both from the same forward pass.
pub fn train_step<T: Scalar>(
    ctx: &mut TrainContext<T>,
    batch: &[LabeledExample<T>],
    config: &TrainConfig,
    step: u64,
) -> Result<LossBreakdown, TrainError> {
    let graph = forward_losses(&mut ctx.gen, &mut ctx.disc, batch, config)?;
    if let Some(term) = graph.breakdown.non_finite_term() {
        return Err(TrainError::NonFinite { step, term });
    }
    let grads_g = graph.tape.backward(graph.loss_g);
    ctx.opt_g.step(ctx.gen.params_mut(), &graph.tape, &grads_g);
    let grads_d = graph.tape.backward(graph.loss_d);
    ctx.opt_d.step(ctx.disc.params_mut(), &graph.tape, &grads_d);
    Ok(graph.breakdown)
}

/// One per-step line of the JSON-lines training log.
#[derive(Debug, Clone, Serialize)]
pub struct StepLogRecord {
    pub kind: &'static str,
    pub epoch: usize,
    pub step: u64,
    pub n_normal: usize,
    pub n_anomaly: usize,
    #[serde(flatten)]
    pub losses: LossBreakdown,
}

/// Per-epoch summary line of the training log.
#[derive(Debug, Clone, Serialize)]
pub struct EpochLogRecord {
    pub kind: &'static str,
    pub epoch: usize,
    pub mean: LossBreakdown,
    pub test_auroc: f64,
}

/// Per-epoch entry of the run record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub mean: LossBreakdown,
    pub test_auroc: f64,
}

/// Summary of one completed training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub seed: u64,
    pub config_hash: String,
    pub dtype: String,
    pub steps_per_epoch: usize,
    pub epochs: Vec<EpochRecord>,
    /// Last-epoch test AUROC; the headline number.
    pub final_auroc: f64,
    pub best_auroc: f64,
    pub best_epoch: usize,
    pub last_checkpoint: String,
    pub best_checkpoint: String,
    pub wall_clock_secs: f64,
}

impl RunRecord {
    pub fn save(&self, path: &Path) -> Result<(), TrainError> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, TrainError> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }
}

pub const TRAIN_LOG_FILE: &str = "train.log.jsonl";
pub const RUN_RECORD_FILE: &str = "run.json";
pub const CHECKPOINTS_DIR: &str = "checkpoints";

fn mean_breakdown(steps: &[LossBreakdown]) -> LossBreakdown {
    let n = steps.len().max(1) as f64;
    let mut mean = LossBreakdown::default();
    for b in steps {
        mean.l_adv += b.l_adv;
        mean.l_con += b.l_con;
        mean.l_adcon += b.l_adcon;
        mean.l_lat += b.l_lat;
        mean.l_normality += b.l_normality;
        mean.l_anomaly += b.l_anomaly;
        mean.l_total += b.l_total;
        mean.l_disc += b.l_disc;
    }
    mean.l_adv /= n;
    mean.l_con /= n;
    mean.l_adcon /= n;
    mean.l_lat /= n;
    mean.l_normality /= n;
    mean.l_anomaly /= n;
    mean.l_total /= n;
    mean.l_disc /= n;
    mean
}

/// Runs the full training loop and writes the run directory: one JSON-lines
/// log record per step plus an epoch summary, `last`/`best` checkpoints, and
/// the final run record. `resume_from` restarts from a saved checkpoint at
/// its recorded epoch boundary.
pub fn train_run<T: Scalar>(
    corpus: &Corpus<T>,
    split: &OneClassSplit,
    config: &TrainConfig,
    out_dir: &Path,
    resume_from: Option<&Path>,
) -> Result<RunRecord, TrainError> {
    config.validate()?;
    if corpus.channels() != config.backbone.in_channels {
        return Err(TrainError::Config(format!(
            "corpus has {} channels but the generator expects {}",
            corpus.channels(),
            config.backbone.in_channels
        )));
    }
    config
        .backbone
        .check_size(corpus.image_size())
        .map_err(TrainError::Model)?;

    std::fs::create_dir_all(out_dir)?;
    let start = Instant::now();
    let config_hash = config.hash();

    let (mut ctx, start_epoch) = match resume_from {
        Some(dir) => {
            let (ctx, meta) = TrainContext::<T>::load(dir, config)?;
            if meta.epoch >= config.epochs {
                return Err(TrainError::Config(format!(
                    "checkpoint is already at epoch {} of {}",
                    meta.epoch, config.epochs
                )));
            }
            (ctx, meta.epoch + 1)
        }
        None => (TrainContext::build(config)?, 1),
    };

    let mut log = std::io::BufWriter::new(std::fs::File::create(out_dir.join(TRAIN_LOG_FILE))?);
    let ckpt_root = out_dir.join(CHECKPOINTS_DIR);
    let mut epochs = Vec::new();
    let mut best = (0usize, f64::NEG_INFINITY);
    let mut global_step: u64 = 0;
    let mut steps_per_epoch = 0usize;

    for epoch in start_epoch..=config.epochs {
        let rng = derive_rng(config.seed, &format!("epoch-{epoch}"));
        let mut composer = BatchComposer::new(corpus, split, config.batch_spec(), rng)?;
        steps_per_epoch = composer.batches_per_pass();
        let mut step_breakdowns = Vec::with_capacity(steps_per_epoch);
        for _ in 0..steps_per_epoch {
            let batch = composer.next_batch();
            global_step += 1;
            let breakdown = match train_step(&mut ctx, &batch, config, global_step) {
                Ok(b) => b,
                Err(e) => {
                    // leave the diagnostic in the log before surfacing it
                    writeln!(
                        log,
                        "{}",
                        serde_json::json!({
                            "kind": "abort",
                            "epoch": epoch,
                            "step": global_step,
                            "error": e.to_string(),
                        })
                    )?;
                    log.flush()?;
                    return Err(e);
                }
            };
            let record = StepLogRecord {
                kind: "step",
                epoch,
                step: global_step,
                n_normal: batch.iter().filter(|e| e.y == 0).count(),
                n_anomaly: batch.iter().filter(|e| e.y == 1).count(),
                losses: breakdown,
            };
            writeln!(log, "{}", serde_json::to_string(&record)?)?;
            step_breakdowns.push(breakdown);
        }

        let report = score_split(&mut ctx.gen, corpus, split, config.batch_size)?;
        let mean = mean_breakdown(&step_breakdowns);
        writeln!(
            log,
            "{}",
            serde_json::to_string(&EpochLogRecord {
                kind: "epoch",
                epoch,
                mean,
                test_auroc: report.auroc,
            })?
        )?;
        log.flush()?;
        epochs.push(EpochRecord {
            epoch,
            mean,
            test_auroc: report.auroc,
        });

        let meta = CheckpointMeta {
            epoch,
            seed: config.seed,
            config_hash: config_hash.clone(),
            spec: *ctx.gen.spec(),
            disc_width: ctx.disc.width(),
            bn_strategy: config.bn_strategy,
            dtype: T::DTYPE.to_string(),
            test_auroc: report.auroc,
        };
        checkpoint::save_bundle(
            &ckpt_root.join("last"),
            &ctx.gen,
            &ctx.disc,
            &ctx.opt_g,
            &ctx.opt_d,
            &meta,
        )?;
        if report.auroc > best.1 {
            best = (epoch, report.auroc);
            checkpoint::save_bundle(
                &ckpt_root.join("best"),
                &ctx.gen,
                &ctx.disc,
                &ctx.opt_g,
                &ctx.opt_d,
                &meta,
            )?;
        }
    }

    let final_auroc = epochs.last().map(|e| e.test_auroc).unwrap_or(f64::NAN);
    let record = RunRecord {
        seed: config.seed,
        config_hash,
        dtype: T::DTYPE.to_string(),
        steps_per_epoch,
        epochs,
        final_auroc,
        best_auroc: best.1,
        best_epoch: best.0,
        last_checkpoint: format!("{CHECKPOINTS_DIR}/last"),
        best_checkpoint: format!("{CHECKPOINTS_DIR}/best"),
        wall_clock_secs: start.elapsed().as_secs_f64(),
    };
    record.save(&out_dir.join(RUN_RECORD_FILE))?;
    Ok(record)
}

/// Aggregate over independent seed runs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MultiSeedRecord {
    pub seeds: Vec<u64>,
    pub final_aurocs: Vec<f64>,
    pub mean_final_auroc: f64,
    /// Population standard deviation across seeds.
    pub sd_final_auroc: f64,
    /// True when at least one seed run failed.
    pub partial: bool,
    pub failures: Vec<(u64, String)>,
}

/// Runs `train_run` once per seed (out_root/seed-N) and aggregates the final
/// AUROCs. Failed seeds are recorded and mark the aggregate partial.
pub fn train_multi_seed<T: Scalar>(
    corpus: &Corpus<T>,
    split: &OneClassSplit,
    config: &TrainConfig,
    seeds: &[u64],
    out_root: &Path,
) -> Result<MultiSeedRecord, TrainError> {
    if seeds.is_empty() {
        return Err(TrainError::Config("train_multi_seed needs >= 1 seed".into()));
    }
    let mut final_aurocs = Vec::new();
    let mut failures = Vec::new();
    for &seed in seeds {
        let run_config = TrainConfig {
            seed,
            ..config.clone()
        };
        let dir: PathBuf = out_root.join(format!("seed-{seed}"));
        match train_run(corpus, split, &run_config, &dir, None) {
            Ok(record) => final_aurocs.push(record.final_auroc),
            Err(e) => failures.push((seed, e.to_string())),
        }
    }
    let (mean, sd) = mean_sd(&final_aurocs);
    Ok(MultiSeedRecord {
        seeds: seeds.to_vec(),
        final_aurocs,
        mean_final_auroc: mean,
        sd_final_auroc: sd,
        partial: !failures.is_empty(),
        failures,
    })
}
