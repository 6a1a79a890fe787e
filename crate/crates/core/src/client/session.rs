use crate::client::history::{select_best_model, CandidateSource, CheckpointStore, TrainHistory};
use crate::client::train::{local_training, record_candidate};
use crate::config::FederationConfig;
use crate::data::SiteDataset;
use crate::error::{Error, Result};
use crate::nn::ParamVector;
use crate::par::Parallelism;
use crate::protocol::ClientUpdate;
use crate::rng::derive;

/// Training seed of client `id` under a master seed.
pub fn client_seed(master: u64, id: &str) -> u64 {
    derive(master, &format!("client/{id}"), &[])
}

/// One participant's protocol-independent state.
pub struct FedClient<'a> {
    pub id: String,
    site: &'a SiteDataset,
    master_seed: Option<u64>,
    seed: u64,
    par: Parallelism,
    config: Option<FederationConfig>,
    history: TrainHistory,
    store: CheckpointStore,
    final_global: Option<ParamVector>,
}

/// What a client keeps after the federation ends.
#[derive(Debug, Clone)]
pub struct ClientOutcome {
    pub client_id: String,
    pub history: TrainHistory,
    pub best: ParamVector,
    pub best_round: u32,
    pub best_val_kappa: Option<f64>,
    pub final_global: ParamVector,
}

impl<'a> FedClient<'a> {
    /// `master_seed` overrides the seed announced in the server's config.
    pub fn new(id: &str, site: &'a SiteDataset, master_seed: Option<u64>, par: Parallelism, store: CheckpointStore) -> Self {
        FedClient {
            id: id.to_string(),
            site,
            master_seed,
            seed: 0,
            par,
            config: None,
            history: TrainHistory::default(),
            store,
            final_global: None,
        }
    }

    pub fn configure(&mut self, config: FederationConfig) -> Result<()> {
        config.validate()?;
        if !config.roster.contains(&self.id) {
            return Err(Error::UnknownClient(self.id.clone()));
        }
        if config.model.input_resolution != self.site.resolution {
            return Err(Error::InvalidShape(format!(
                "model expects {}px images, site {} has {}px",
                config.model.input_resolution, self.site.site_id, self.site.resolution
            )));
        }
        self.seed = client_seed(self.master_seed.unwrap_or(config.seed), &self.id);
        self.config = Some(config);
        Ok(())
    }

    pub fn is_finished(&self) -> bool {
        self.final_global.is_some()
    }

    /// Last round this client has seen a broadcast for.
    pub fn last_round(&self) -> u32 {
        self.history.records.last().map_or(0, |r| r.round)
    }

    /// Handles `MODEL_BROADCAST{round, global}`: records the incoming global
    /// model as a candidate, then trains one epoch unless the federation is over.
    pub fn on_broadcast(&mut self, round: u32, global: &ParamVector) -> Result<Option<ClientUpdate>> {
        let cfg = self.config.as_ref().ok_or(Error::UnexpectedMessage {
            msg: "MODEL_BROADCAST",
            phase: "before JOIN_ACK",
        })?;
        let spec = &cfg.model;
        global.check(spec)?;
        if round > 1 {
            record_candidate(
                self.par,
                spec,
                global,
                self.site,
                round - 1,
                CandidateSource::GlobalAfterAggregation,
                &mut self.history,
                &mut self.store,
            )?;
        }
        if round > cfg.rounds {
            self.final_global = Some(global.clone());
            return Ok(None);
        }
        let update = local_training(self.par, spec, global, self.site, &cfg.train, round, self.seed)?;
        let local = global.apply_delta(&update.delta)?;
        let r = record_candidate(
            self.par,
            spec,
            &local,
            self.site,
            round,
            CandidateSource::LocalIntermediate,
            &mut self.history,
            &mut self.store,
        )?;
        log::info!(
            "{} round {round}: {} steps, loss {:.4}, val kappa {}",
            self.id,
            update.n_k,
            update.epoch_loss,
            r.val_kappa.map_or("undefined".into(), |k| format!("{k:.4}"))
        );
        self.store.release_memory();
        Ok(Some(ClientUpdate { client_id: self.id.clone(), delta: update.delta, n_k: update.n_k }))
    }

    pub fn finish(self) -> Result<ClientOutcome> {
        let cfg = self.config.ok_or(Error::NoCandidates)?;
        let final_global = self.final_global.ok_or_else(|| Error::FederationAborted {
            round: self.history.records.last().map_or(0, |r| r.round),
            reason: format!("client {} never received the final model", self.id),
        })?;
        let (best, best_round, best_val_kappa) = select_best_model(&self.history, &self.store, &cfg.model)?;
        Ok(ClientOutcome { client_id: self.id, history: self.history, best, best_round, best_val_kappa, final_global })
    }
}
