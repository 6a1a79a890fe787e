use serde::{Deserialize, Serialize};

use crate::client::augment::{augment, AugmentConfig};
use crate::client::history::{select_best_model, CandidateSource, CheckpointStore, HistoryRecord, TrainHistory};
use crate::client::sampler::balanced_batches;
use crate::data::{SiteDataset, Split};
use crate::error::{Error, Result};
use crate::eval::site_kappa;
use crate::nn::{adam_step, loss_and_grad_with, AdamState, LrSchedule, ModelSpec, ParamVector, Tensor};
use crate::par::Parallelism;
use crate::rng::Stream;

/// Optimizer, sampling and augmentation settings shared by every client.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub weight_decay: f64,
    pub schedule: LrSchedule,
    pub augment: AugmentConfig,
    pub finetune_epochs: u32,
    pub finetune_lr_factor: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 32,
            weight_decay: 1e-5,
            schedule: LrSchedule::default(),
            augment: AugmentConfig::default(),
            finetune_epochs: 30,
            finetune_lr_factor: 0.1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.schedule.validate()?;
        self.augment.validate()?;
        if self.batch_size == 0 || !(self.weight_decay >= 0.0) || !(self.finetune_lr_factor > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "batch_size {}, weight_decay {}, finetune_lr_factor {}",
                self.batch_size, self.weight_decay, self.finetune_lr_factor
            )));
        }
        Ok(())
    }
}

/// Result of one round of local training.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalUpdate {
    pub delta: ParamVector,
    pub n_k: u64,
    pub epoch_loss: f64,
}

// Stream domains keep federated rounds and fine-tuning epochs apart.
const DOMAIN_ROUND: u64 = 0;
const DOMAIN_FINETUNE: u64 = 1;

struct Epoch {
    params: ParamVector,
    steps: u64,
    mean_loss: f64,
}

#[allow(clippy::too_many_arguments)]
fn run_epoch(
    par: Parallelism,
    spec: &ModelSpec,
    mut params: ParamVector,
    state: &mut AdamState,
    site: &SiteDataset,
    cfg: &TrainConfig,
    lr: f64,
    seed: u64,
    key: [u64; 2],
) -> Result<Epoch> {
    let train = site.indices(Split::Train);
    if train.is_empty() {
        return Err(Error::EmptySplit(format!("{} train", site.site_id)));
    }
    let labels: Vec<usize> = train.iter().map(|&i| site.labels[i] as usize).collect();
    let batches = balanced_batches(&labels, cfg.batch_size, &mut Stream::derived(seed, "batches", &key))?;
    let mut loss_sum = 0.0;
    for (b, batch) in batches.iter().enumerate() {
        let images: Vec<Tensor> = batch
            .iter()
            .enumerate()
            .map(|(slot, &i)| {
                let mut rng = Stream::derived(seed, "augment", &[key[0], key[1], b as u64, slot as u64]);
                augment(&site.images[train[i]], &cfg.augment, &mut rng)
            })
            .collect();
        let y: Vec<usize> = batch.iter().map(|&i| labels[i]).collect();
        let (loss, grad) = loss_and_grad_with(par, spec, &params, &Tensor::stack(&images)?, &y)?;
        let (next, next_state) = adam_step(&params, &grad, state, lr, cfg.weight_decay)?;
        params = next;
        *state = next_state;
        loss_sum += loss;
    }
    Ok(Epoch {
        params,
        steps: batches.len() as u64,
        mean_loss: loss_sum / batches.len() as f64,
    })
}

/// One epoch of balanced, augmented mini-batch training from `phi_in` with
/// a fresh optimizer state. Rounds count from 1; the learning rate is the
/// schedule's value at `round - 1`.
pub fn local_training(
    par: Parallelism,
    spec: &ModelSpec,
    phi_in: &ParamVector,
    site: &SiteDataset,
    cfg: &TrainConfig,
    round: u32,
    seed: u64,
) -> Result<LocalUpdate> {
    phi_in.check(spec)?;
    let lr = cfg.schedule.lr_at(round.saturating_sub(1));
    let mut state = AdamState::new(phi_in.len());
    let epoch = run_epoch(par, spec, phi_in.clone(), &mut state, site, cfg, lr, seed, [DOMAIN_ROUND, round as u64])?;
    Ok(LocalUpdate {
        delta: ParamVector::delta(phi_in, &epoch.params)?,
        n_k: epoch.steps,
        epoch_loss: epoch.mean_loss,
    })
}

/// Validation kappa; `None` when kappa is undefined.
pub fn validation_kappa(par: Parallelism, spec: &ModelSpec, params: &ParamVector, site: &SiteDataset) -> Result<Option<f64>> {
    match site_kappa(par, spec, params, site, Split::Val) {
        Ok(k) => Ok(Some(k)),
        Err(Error::DegenerateMarginals) => Ok(None),
        Err(e) => Err(e),
    }
}

/// Stores `params`, scores it on validation data and appends it to `history`.
pub fn record_candidate(
    par: Parallelism,
    spec: &ModelSpec,
    params: &ParamVector,
    site: &SiteDataset,
    round: u32,
    source: CandidateSource,
    history: &mut TrainHistory,
    store: &mut CheckpointStore,
) -> Result<HistoryRecord> {
    let record = HistoryRecord {
        round,
        val_kappa: validation_kappa(par, spec, params, site)?,
        params_digest: store.put(params)?,
        source,
    };
    history.push(record.clone());
    Ok(record)
}

/// Local-only baseline: `rounds` successive one-epoch updates, each
/// applied exactly as a single-client federation would apply it. Every
/// epoch's model is a selection candidate.
#[allow(clippy::too_many_arguments)]
pub fn train_local(
    par: Parallelism,
    spec: &ModelSpec,
    init: &ParamVector,
    site: &SiteDataset,
    cfg: &TrainConfig,
    rounds: u32,
    seed: u64,
    store: &mut CheckpointStore,
) -> Result<TrainHistory> {
    let mut history = TrainHistory::default();
    let mut phi = init.clone();
    for t in 1..=rounds {
        let update = local_training(par, spec, &phi, site, cfg, t, seed)?;
        phi = phi.apply_delta(&update.delta)?;
        let r = record_candidate(par, spec, &phi, site, t, CandidateSource::LocalIntermediate, &mut history, store)?;
        log::debug!("{} local epoch {t}: loss {:.4}, val kappa {:?}", site.site_id, update.epoch_loss, r.val_kappa);
    }
    Ok(history)
}

/// Continues training from `best` for `epochs` epochs at the scaled base
/// learning rate and returns the validation-best checkpoint, `best` itself
/// included as a candidate.
pub fn fine_tune(
    par: Parallelism,
    spec: &ModelSpec,
    best: &ParamVector,
    site: &SiteDataset,
    epochs: u32,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<(ParamVector, TrainHistory)> {
    best.check(spec)?;
    if site.count(Split::Train) == 0 {
        return Err(Error::EmptySplit(format!("{} train", site.site_id)));
    }
    let mut store = CheckpointStore::in_memory();
    let mut history = TrainHistory::default();
    record_candidate(par, spec, best, site, 0, CandidateSource::Initial, &mut history, &mut store)?;
    let lr = cfg.schedule.base_lr * cfg.finetune_lr_factor;
    let mut state = AdamState::new(best.len());
    let mut params = best.clone();
    for e in 1..=epochs {
        let epoch = run_epoch(par, spec, params, &mut state, site, cfg, lr, seed, [DOMAIN_FINETUNE, e as u64])?;
        params = epoch.params;
        record_candidate(par, spec, &params, site, e, CandidateSource::LocalIntermediate, &mut history, &mut store)?;
    }
    let (selected, _, _) = select_best_model(&history, &store, spec)?;
    Ok((selected, history))
}
