use std::collections::{BTreeMap, BTreeSet};

use serde::Serialize;

use crate::config::FederationConfig;
use crate::error::{Error, Result};
use crate::nn::ParamVector;
use crate::protocol::aggregate::{aggregate, ClientUpdate};
use crate::protocol::message::{Message, PROTOCOL_VERSION};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Joining,
    Round,
    Finished,
}

impl Phase {
    pub fn name(self) -> &'static str {
        match self {
            Phase::Joining => "joining",
            Phase::Round => "round",
            Phase::Finished => "finished",
        }
    }
}

/// Server state between messages.
#[derive(Debug, Clone)]
pub struct RoundState {
    pub config: FederationConfig,
    pub phase: Phase,
    /// Current round, 1-based; 0 while joining.
    pub round: u32,
    /// The model broadcast at the start of the current round.
    pub global: ParamVector,
    pub joined: BTreeSet<String>,
    pub pending: BTreeSet<String>,
    pub received: BTreeMap<String, ClientUpdate>,
}

impl RoundState {
    pub fn new(config: FederationConfig, initial: ParamVector) -> Result<Self> {
        config.validate()?;
        initial.check(&config.model)?;
        Ok(RoundState {
            config,
            phase: Phase::Joining,
            round: 0,
            global: initial,
            joined: BTreeSet::new(),
            pending: BTreeSet::new(),
            received: BTreeMap::new(),
        })
    }

    fn knows(&self, id: &str) -> bool {
        self.config.roster.iter().any(|r| r == id)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Outbound {
    To(String, Message),
    Broadcast(Message),
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClientAudit {
    pub client_id: String,
    pub n_k: u64,
    pub delta_norm: f64,
}

/// One line of the audit log, written when a round is aggregated.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RoundAudit {
    pub round: u32,
    pub clients: Vec<ClientAudit>,
    pub optimizer_steps: u64,
    pub global_digest: String,
}

/// One accepted state-machine transition.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Transition {
    pub round: u32,
    pub phase: Phase,
    pub message: &'static str,
    pub client_id: Option<String>,
    pub pending_before: usize,
    pub pending_after: usize,
    pub aggregated: bool,
}

#[derive(Debug, Clone)]
pub struct StepOutcome {
    pub state: RoundState,
    pub outbound: Vec<Outbound>,
    pub transition: Transition,
    pub audit: Option<RoundAudit>,
}

/// Applies one inbound message. On error the caller keeps its old state.
pub fn server_step(state: &RoundState, msg: &Message) -> Result<StepOutcome> {
    let unexpected = || Error::UnexpectedMessage { msg: msg.name(), phase: state.phase.name() };
    let mut next = state.clone();
    let mut outbound = Vec::new();
    let mut audit = None;
    let client_id = match msg {
        Message::Join { client_id, protocol_version } => {
            if state.phase != Phase::Joining {
                return Err(unexpected());
            }
            if *protocol_version != PROTOCOL_VERSION {
                return Err(Error::VersionMismatch { got: *protocol_version, expected: PROTOCOL_VERSION });
            }
            if !state.knows(client_id) {
                return Err(Error::UnknownClient(client_id.clone()));
            }
            if state.joined.contains(client_id) {
                return Err(Error::DuplicateClient(client_id.clone()));
            }
            next.joined.insert(client_id.clone());
            outbound.push(Outbound::To(client_id.clone(), Message::JoinAck { config: state.config.clone() }));
            if next.joined.len() == state.config.roster.len() {
                next.phase = Phase::Round;
                next.round = 1;
                next.pending = state.config.roster.iter().cloned().collect();
                outbound.push(Outbound::Broadcast(Message::ModelBroadcast { round: 1, params: state.global.clone() }));
            }
            client_id.clone()
        }
        Message::DeltaSubmit { round, update } => {
            if state.phase != Phase::Round {
                return Err(unexpected());
            }
            let id = &update.client_id;
            if !state.knows(id) {
                return Err(Error::UnknownClient(id.clone()));
            }
            if *round != state.round {
                return Err(Error::StaleUpdate { got: *round, expected: state.round });
            }
            if state.received.contains_key(id) {
                return Err(Error::DuplicateClient(id.clone()));
            }
            state.global.check_compatible(&update.delta)?;
            if update.n_k == 0 {
                return Err(Error::Malformed(format!("client {id} reported zero iterations")));
            }
            next.pending.remove(id);
            next.received.insert(id.clone(), update.clone());
            if next.pending.is_empty() {
                let ordered: Vec<ClientUpdate> =
                    state.config.roster.iter().map(|r| next.received[r].clone()).collect();
                let global = aggregate(&state.global, &ordered)?;
                audit = Some(RoundAudit {
                    round: state.round,
                    clients: ordered
                        .iter()
                        .map(|u| ClientAudit { client_id: u.client_id.clone(), n_k: u.n_k, delta_norm: u.delta.l2_norm() })
                        .collect(),
                    optimizer_steps: ordered.iter().map(|u| u.n_k).sum(),
                    global_digest: global.digest(),
                });
                outbound.push(Outbound::Broadcast(Message::RoundComplete { round: state.round }));
                outbound.push(Outbound::Broadcast(Message::ModelBroadcast {
                    round: state.round + 1,
                    params: global.clone(),
                }));
                next.received.clear();
                next.global = global;
                if state.round < state.config.rounds {
                    next.round = state.round + 1;
                    next.pending = state.config.roster.iter().cloned().collect();
                } else {
                    next.phase = Phase::Finished;
                    outbound.push(Outbound::Broadcast(Message::Shutdown { reason: "federation complete".into() }));
                }
            }
            id.clone()
        }
        _ => return Err(unexpected()),
    };
    let transition = Transition {
        round: state.round,
        phase: state.phase,
        message: msg.name(),
        client_id: Some(client_id),
        pending_before: state.pending.len(),
        pending_after: if audit.is_some() { 0 } else { next.pending.len() },
        aggregated: audit.is_some(),
    };
    Ok(StepOutcome { state: next, outbound, transition, audit })
}
