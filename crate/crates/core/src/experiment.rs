//! The desk-scale study: generate sites, train local baselines, federate,
//! fine-tune, then evaluate all three model sets across sites.

use std::time::Instant;

use crate::client::{client_seed, fine_tune, select_best_model, train_local, CheckpointStore};
use crate::config::FederationConfig;
use crate::data::{default_seven_site_profiles, generate_sites, reseed, SiteDataset};
use crate::error::Result;
use crate::eval::{build_summary, cross_site_matrix, KappaMatrix, ReportSummary};
use crate::nn::ParamVector;
use crate::par::Parallelism;
use crate::protocol::{initial_params, simulate, FederationOutcome};

#[derive(Debug, Clone)]
pub struct ExperimentOutcome {
    pub local: KappaMatrix,
    pub federated: KappaMatrix,
    pub finetuned: KappaMatrix,
    pub summary: ReportSummary,
    pub federation: FederationOutcome,
    pub seconds: f64,
}

/// Seven default sites at `scale`, seeded from `seed`.
pub fn desk_sites(par: Parallelism, scale: u32, seed: u64) -> Result<Vec<SiteDataset>> {
    let mut profiles = default_seven_site_profiles(scale);
    reseed(&mut profiles, seed);
    generate_sites(par, &profiles)
}

/// Per-site local baselines with the same starting model and epoch budget
/// as the federation; returns each site's validation-best model.
pub fn local_baselines(par: Parallelism, config: &FederationConfig, sites: &[SiteDataset]) -> Result<Vec<ParamVector>> {
    let init = initial_params(config);
    par.try_map_range(sites.len(), |i| {
        let site = &sites[i];
        let mut store = CheckpointStore::in_memory();
        let seed = client_seed(config.seed, &site.site_id);
        let history = train_local(par, &config.model, &init, site, &config.train, config.rounds, seed, &mut store)?;
        Ok(select_best_model(&history, &store, &config.model)?.0)
    })
}

/// Fine-tunes each model on its own site.
pub fn fine_tune_all(
    par: Parallelism,
    config: &FederationConfig,
    models: &[ParamVector],
    sites: &[SiteDataset],
) -> Result<Vec<ParamVector>> {
    par.try_map_range(sites.len(), |i| {
        let seed = client_seed(config.seed, &sites[i].site_id);
        let epochs = config.train.finetune_epochs;
        Ok(fine_tune(par, &config.model, &models[i], &sites[i], epochs, &config.train, seed)?.0)
    })
}

/// Runs the whole study in memory.
pub fn run_experiment(par: Parallelism, config: &FederationConfig, sites: &[SiteDataset]) -> Result<ExperimentOutcome> {
    let start = Instant::now();
    let local_models = local_baselines(par, config, sites)?;
    log::info!("local baselines done after {:.1}s", start.elapsed().as_secs_f64());
    let sim = simulate(par, config, sites, None, &|_| Ok(CheckpointStore::in_memory()))?;
    log::info!("federation done after {:.1}s", start.elapsed().as_secs_f64());
    let fed_models: Vec<ParamVector> = sim.clients.iter().map(|c| c.best.clone()).collect();
    let tuned = fine_tune_all(par, config, &fed_models, sites)?;
    log::info!("fine-tuning done after {:.1}s", start.elapsed().as_secs_f64());
    let spec = &config.model;
    let local = cross_site_matrix(par, spec, &local_models, sites, None)?;
    let federated = cross_site_matrix(par, spec, &fed_models, sites, Some(&sim.federation.global))?;
    let finetuned = cross_site_matrix(par, spec, &tuned, sites, None)?;
    let summary = build_summary(&local, &federated, Some(&finetuned))?;
    Ok(ExperimentOutcome {
        local,
        federated,
        finetuned,
        summary,
        federation: sim.federation,
        seconds: start.elapsed().as_secs_f64(),
    })
}

/// Sites whose fine-tuned test kappa is at least the post-federation one.
pub fn finetune_wins(outcome: &ExperimentOutcome) -> usize {
    let f = outcome.federated.diagonal();
    let t = outcome.finetuned.diagonal();
    t.iter().zip(&f).filter(|(t, f)| matches!((t, f), (Some(t), Some(f)) if t >= f)).count()
}
