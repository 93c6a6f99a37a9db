//! Training loop: augmentation, the four-term objective, Adam, per-epoch
//! checkpoints and a CSV loss log.
//!
//! Random streams: `RngState::new(seed)` first splits off the initialization
//! stream; what remains is the trainer stream. Each epoch draws a shuffle seed
//! from it and splits an epoch stream, from which every step splits its own
//! generator for augmentation and reparameterization noise. Checkpoints store
//! the trainer stream position, so resuming replays the same schedule.
//!
//! Batch preparation runs one step ahead on a helper thread; because each
//! step's generator is fixed before any work starts, the overlap cannot change
//! results.

mod adam;
mod checkpoint;
mod config;

use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::mpsc::sync_channel;

pub use adam::{adam_step, AdamConfig, OptimizerState};
pub use checkpoint::{
    checkpoint_load, checkpoint_save, decode_checkpoint, encode_checkpoint, Checkpoint, DSCK_MAGIC,
    DSCK_VERSION,
};
pub(crate) use config::parse_value;
pub use config::TrainConfig;

use crate::augment::{compose_augmentations, AugmentationOutcome};
use crate::data::{batch_indices, FactorDataset};
use crate::diffcore::{self, Mode, Tape, Tensor};
use crate::error::{config_err, Error, Result};
use crate::model::{sample_eps, ModelParams};
use crate::objective::{
    aug_consistency_loss_on, center_loss_on, kl_loss_on, recon_loss_on, total_loss_on, LossReport, LossVars,
};
use crate::rng::RngState;

pub const LOG_HEADER: &str = "epoch,step,l_r,l_kl,l_cen,l_a,total";
pub const LOG_FILE: &str = "loss_log.csv";
pub const LAST_CHECKPOINT: &str = "last.dsck";

/// Everything random a step needs, drawn up front.
#[derive(Debug, Clone, PartialEq)]
pub struct PreparedBatch {
    pub x: Tensor,
    pub aug: AugmentationOutcome,
    pub eps_x: Tensor,
    pub eps_a: Tensor,
}

pub fn prepare_batch(x: Tensor, config: &TrainConfig, rng: &mut RngState) -> Result<PreparedBatch> {
    let aug = compose_augmentations(&x, &config.augmentation, rng)?;
    let b = x.shape()[0];
    let d = config.model.latent_dim;
    let eps_x = sample_eps(rng, b, d);
    let eps_a = sample_eps(rng, b, d);
    Ok(PreparedBatch { x, aug, eps_x, eps_a })
}

/// Forward, backward and one Adam update on a prepared batch.
pub fn apply_step(
    prepared: &PreparedBatch,
    params: &mut ModelParams,
    opt: &mut OptimizerState,
    config: &TrainConfig,
) -> Result<LossReport> {
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape);
    let buffers = &mut params.buffers;
    let x = tape.constant(prepared.x.clone());
    let xa = tape.constant(prepared.aug.x_aug.clone());
    let code = bound.encode(&mut tape, buffers, x, &prepared.eps_x, Mode::Train)?;
    let acode = bound.encode(&mut tape, buffers, xa, &prepared.eps_a, Mode::Train)?;
    let x_hat = bound.decode(&mut tape, buffers, code.z_f, code.z_u, Mode::Train)?;
    let c = bound.context_of_batch(&mut tape, code.z_f)?;
    let p = bound.context_per_sample(&mut tape, code.z_f)?;

    let parts = LossVars {
        l_r: recon_loss_on(&mut tape, x_hat, x)?,
        l_kl: kl_loss_on(&mut tape, code.mu_u, code.logvar_u)?,
        l_cen: center_loss_on(&mut tape, p, c)?,
        l_a: aug_consistency_loss_on(&mut tape, code.z_f, acode.z_f, code.z_u, acode.z_u, &prepared.aug.mask)?,
    };
    let (total, report) = total_loss_on(&mut tape, parts, &config.weights)?;
    if !report.is_finite() || !tape.scalar(total).is_finite() {
        return Err(Error::NonFinite(format!(
            "loss at step {}: l_r={} l_kl={} l_cen={} l_a={} total={}",
            opt.step + 1,
            report.l_r,
            report.l_kl,
            report.l_cen,
            report.l_a,
            report.total
        )));
    }
    let [e, d, ctx] = params.stores_mut();
    diffcore::backward(&tape, total, &mut [&mut *e, &mut *d, &mut *ctx])?;
    adam_step(&mut [e, d, ctx], opt, &config.adam)?;
    Ok(report)
}

/// One full training step on `batch`, drawing randomness from `rng`.
pub fn train_step(
    batch: &Tensor,
    params: &mut ModelParams,
    opt: &mut OptimizerState,
    config: &TrainConfig,
    rng: &mut RngState,
) -> Result<LossReport> {
    let expect = [config.batch_size, 3, config.model.image_size, config.model.image_size];
    if batch.shape() != expect {
        return Err(Error::Dimension(format!(
            "batch shape {:?} does not match the configured {expect:?}",
            batch.shape()
        )));
    }
    let prepared = prepare_batch(batch.clone(), config, rng)?;
    apply_step(&prepared, params, opt, config)
}

/// Fresh parameters and the trainer stream for `config.seed`.
pub fn initial_checkpoint(config: &TrainConfig) -> Result<Checkpoint> {
    config.validate()?;
    let mut root = RngState::new(config.seed);
    let mut init = root.split();
    Ok(Checkpoint {
        config: config.without_paths(),
        params: ModelParams::init(config.model, &mut init)?,
        optimizer: OptimizerState::new(),
        epoch: 0,
        rng: root.snapshot(),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochSummary {
    pub epoch: usize,
    pub steps: usize,
    pub mean: LossReport,
}

#[derive(Debug, Clone)]
pub struct FitOutcome {
    pub checkpoint: Checkpoint,
    pub epochs: Vec<EpochSummary>,
    pub log_path: PathBuf,
}

fn mean_report(reports: &[LossReport]) -> LossReport {
    let n = reports.len().max(1) as f64;
    let avg = |f: fn(&LossReport) -> f64| reports.iter().map(f).sum::<f64>() / n;
    LossReport {
        l_r: avg(|r| r.l_r),
        l_kl: avg(|r| r.l_kl),
        l_cen: avg(|r| r.l_cen),
        l_a: avg(|r| r.l_a),
        weighted_kl: avg(|r| r.weighted_kl),
        weighted_cen: avg(|r| r.weighted_cen),
        weighted_a: avg(|r| r.weighted_a),
        total: avg(|r| r.total),
    }
}

fn io<T>(path: &Path, r: std::io::Result<T>) -> Result<T> {
    r.map_err(|e| Error::io(path, e))
}

/// Trains from scratch for `config.epochs` epochs.
pub fn fit(dataset: &FactorDataset, config: &TrainConfig) -> Result<FitOutcome> {
    fit_with(dataset, config, None, |_| {})
}

/// Trains until `config.epochs` epochs are complete, optionally continuing
/// from `resume`. `progress` is called after every epoch.
pub fn fit_with(
    dataset: &FactorDataset,
    config: &TrainConfig,
    resume: Option<Checkpoint>,
    mut progress: impl FnMut(&EpochSummary),
) -> Result<FitOutcome> {
    config.validate()?;
    let s = config.model.image_size;
    if dataset.is_empty() || dataset.len() < config.batch_size {
        return Err(config_err!(
            "dataset has {} images, fewer than one batch of {}",
            dataset.len(),
            config.batch_size
        ));
    }
    if dataset.image_size() != (s, s) {
        return Err(config_err!(
            "dataset images are {:?}, config image_size is {s}",
            dataset.image_size()
        ));
    }
    let mut ck = match resume {
        Some(mut ck) => {
            let differs: Vec<&str> = ck
                .config
                .entries()
                .into_iter()
                .zip(config.entries())
                .filter(|(a, b)| a.1 != b.1 && a.0 != "epochs" && a.0 != "checkpoint_history")
                .map(|(a, _)| a.0)
                .collect();
            if !differs.is_empty() {
                return Err(config_err!(
                    "resume checkpoint was trained with different settings: {}",
                    differs.join(", ")
                ));
            }
            ck.config = config.without_paths();
            ck
        }
        None => initial_checkpoint(config)?,
    };

    let out = &config.output_dir;
    io(out, fs::create_dir_all(out))?;
    let log_path = out.join(LOG_FILE);
    let mut log = if ck.epoch == 0 {
        let mut f = BufWriter::new(io(&log_path, File::create(&log_path))?);
        io(&log_path, writeln!(f, "{LOG_HEADER}"))?;
        f
    } else {
        BufWriter::new(io(&log_path, OpenOptions::new().append(true).open(&log_path))?)
    };
    if ck.epoch == 0 {
        save_epoch(&ck, config)?;
    }

    let mut master = RngState::restore(&ck.rng);
    let mut summaries = Vec::new();
    while ck.epoch < config.epochs {
        let epoch = ck.epoch + 1;
        let shuffle_seed = master.next_u64();
        let mut epoch_rng = master.split();
        let batches = batch_indices(dataset.len(), config.batch_size, shuffle_seed)?;
        let step_rngs: Vec<RngState> = batches.iter().map(|_| epoch_rng.split()).collect();

        let reports = std::thread::scope(|scope| -> Result<Vec<LossReport>> {
            let (tx, rx) = sync_channel::<Result<PreparedBatch>>(1);
            scope.spawn(move || {
                for (rows, mut rng) in batches.into_iter().zip(step_rngs) {
                    let prepared = dataset
                        .images
                        .select_rows(&rows)
                        .and_then(|x| prepare_batch(x, config, &mut rng));
                    let failed = prepared.is_err();
                    if tx.send(prepared).is_err() || failed {
                        break;
                    }
                }
            });
            let mut reports = Vec::new();
            for prepared in rx {
                let report = apply_step(&prepared?, &mut ck.params, &mut ck.optimizer, config)?;
                let line = format!(
                    "{epoch},{},{},{},{},{},{}",
                    ck.optimizer.step, report.l_r, report.l_kl, report.l_cen, report.l_a, report.total
                );
                io(&log_path, writeln!(log, "{line}"))?;
                reports.push(report);
            }
            Ok(reports)
        })?;

        ck.epoch = epoch;
        ck.rng = master.snapshot();
        io(&log_path, log.flush())?;
        save_epoch(&ck, config)?;
        let summary = EpochSummary {
            epoch,
            steps: reports.len(),
            mean: mean_report(&reports),
        };
        progress(&summary);
        summaries.push(summary);
    }
    io(&log_path, log.flush())?;
    Ok(FitOutcome {
        checkpoint: ck,
        epochs: summaries,
        log_path,
    })
}

fn save_epoch(ck: &Checkpoint, config: &TrainConfig) -> Result<()> {
    let out = &config.output_dir;
    checkpoint_save(ck, &out.join(LAST_CHECKPOINT))?;
    if config.checkpoint_history {
        checkpoint_save(ck, &out.join(format!("epoch_{:04}.dsck", ck.epoch)))?;
    }
    Ok(())
}
