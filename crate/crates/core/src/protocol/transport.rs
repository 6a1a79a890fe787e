use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::net::{Shutdown, TcpListener, TcpStream, ToSocketAddrs};
use std::path::Path;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::mpsc::{channel, Receiver, Sender};
use std::sync::Arc;
use std::time::Duration;

use serde::Serialize;

use crate::client::{append_jsonl, CheckpointStore, ClientOutcome, FedClient};
use crate::config::FederationConfig;
use crate::data::SiteDataset;
use crate::error::{Error, Result};
use crate::nn::ParamVector;
use crate::par::Parallelism;
use crate::protocol::message::{read_frame, write_frame, Message, PROTOCOL_VERSION};
use crate::protocol::server::{server_step, Outbound, Phase, RoundAudit, RoundState, Transition};
use crate::rng::derive;

/// Server-to-client half of a connection.
pub trait Link: Send {
    fn send(&mut self, msg: &Message) -> Result<()>;
    fn close(&mut self) {}
}

/// Client-side connection.
pub trait ClientLink {
    fn send(&mut self, msg: &Message) -> Result<()>;
    /// `Ok(None)` once the server has gone away.
    fn recv(&mut self) -> Result<Option<Message>>;
}

/// Inbound traffic for the server, tagged by connection number.
pub enum Event {
    Connected(usize, Box<dyn Link>),
    Frame(usize, Message),
    Malformed(usize, Error),
    Closed(usize),
}

/// A message the server refused; the federation carried on.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Rejection {
    pub round: u32,
    pub connection: usize,
    pub client_id: Option<String>,
    pub message: String,
    pub error: String,
}

#[derive(Debug, Clone)]
pub struct FederationOutcome {
    pub global: ParamVector,
    pub audit: Vec<RoundAudit>,
    pub transitions: Vec<Transition>,
    pub rejections: Vec<Rejection>,
}

/// The model every federation starts from.
pub fn initial_params(config: &FederationConfig) -> ParamVector {
    config.model.init_params(derive(config.seed, "init", &[]))
}

struct Driver {
    state: RoundState,
    links: BTreeMap<usize, Box<dyn Link>>,
    client_of: BTreeMap<usize, String>,
    conn_of: BTreeMap<String, usize>,
    audit: Vec<RoundAudit>,
    transitions: Vec<Transition>,
    rejections: Vec<Rejection>,
    audit_file: Option<(File, std::path::PathBuf)>,
}

impl Driver {
    fn reject(&mut self, conn: usize, msg: &str, err: &Error) {
        log::warn!("rejected {msg} on connection {conn}: {err}");
        self.rejections.push(Rejection {
            round: self.state.round,
            connection: conn,
            client_id: self.client_of.get(&conn).cloned(),
            message: msg.to_string(),
            error: err.to_string(),
        });
    }

    fn drop_conn(&mut self, conn: usize, reason: &str) {
        if let Some(mut link) = self.links.remove(&conn) {
            let _ = link.send(&Message::Shutdown { reason: reason.to_string() });
            link.close();
        }
    }

    fn abort(&mut self, reason: String) -> Error {
        log::error!("aborting federation in round {}: {reason}", self.state.round);
        for link in self.links.values_mut() {
            let _ = link.send(&Message::Shutdown { reason: reason.clone() });
            link.close();
        }
        self.links.clear();
        Error::FederationAborted { round: self.state.round, reason }
    }

    fn deliver(&mut self, outbound: Vec<Outbound>) -> Result<()> {
        for o in outbound {
            let targets: Vec<String> = match &o {
                Outbound::To(id, _) => vec![id.clone()],
                Outbound::Broadcast(_) => self.state.config.roster.clone(),
            };
            let msg = match o {
                Outbound::To(_, m) | Outbound::Broadcast(m) => m,
            };
            for id in targets {
                let conn = self.conn_of[&id];
                let sent = match self.links.get_mut(&conn) {
                    Some(link) => link.send(&msg),
                    None => Err(Error::Malformed("connection gone".into())),
                };
                if let Err(e) = sent {
                    return Err(self.abort(format!("could not reach client {id}: {e}")));
                }
            }
        }
        Ok(())
    }

    fn on_frame(&mut self, conn: usize, msg: Message) -> Result<()> {
        match (&msg, self.client_of.get(&conn)) {
            (Message::Join { .. }, Some(_)) => {
                let err = Error::UnexpectedMessage { msg: "JOIN", phase: "already joined" };
                self.reject(conn, msg.name(), &err);
                return Ok(());
            }
            (Message::Join { .. }, None) => {}
            (_, None) => {
                let err = Error::UnexpectedMessage { msg: msg.name(), phase: "before JOIN" };
                self.reject(conn, msg.name(), &err);
                self.drop_conn(conn, &err.to_string());
                return Ok(());
            }
            (Message::DeltaSubmit { update, .. }, Some(bound)) if &update.client_id != bound => {
                let err = Error::UnknownClient(update.client_id.clone());
                self.reject(conn, msg.name(), &err);
                return Ok(());
            }
            _ => {}
        }
        match server_step(&self.state, &msg) {
            Ok(step) => {
                if let Message::Join { client_id, .. } = &msg {
                    self.client_of.insert(conn, client_id.clone());
                    self.conn_of.insert(client_id.clone(), conn);
                }
                self.state = step.state;
                self.transitions.push(step.transition);
                if let Some(a) = step.audit {
                    log::info!("round {} aggregated, {} optimizer steps", a.round, a.optimizer_steps);
                    if let Some((file, path)) = &mut self.audit_file {
                        append_jsonl(file, path, &a)?;
                    }
                    self.audit.push(a);
                }
                self.deliver(step.outbound)
            }
            Err(e) => {
                self.reject(conn, msg.name(), &e);
                if matches!(msg, Message::Join { .. }) {
                    self.drop_conn(conn, &e.to_string());
                }
                Ok(())
            }
        }
    }

    fn run(mut self, events: Receiver<Event>) -> Result<FederationOutcome> {
        while self.state.phase != Phase::Finished {
            let Ok(event) = events.recv() else {
                return Err(self.abort("all connections closed".into()));
            };
            match event {
                Event::Connected(conn, link) => {
                    self.links.insert(conn, link);
                }
                Event::Frame(conn, msg) => self.on_frame(conn, msg)?,
                Event::Malformed(conn, e) => match self.client_of.get(&conn).cloned() {
                    Some(id) => {
                        self.reject(conn, "frame", &e);
                        return Err(self.abort(format!("malformed frame from client {id}: {e}")));
                    }
                    None => {
                        self.reject(conn, "frame", &e);
                        self.drop_conn(conn, &e.to_string());
                    }
                },
                Event::Closed(conn) => match self.client_of.get(&conn).cloned() {
                    Some(id) => return Err(self.abort(format!("client {id} disconnected"))),
                    None => {
                        self.links.remove(&conn);
                    }
                },
            }
        }
        for link in self.links.values_mut() {
            link.close();
        }
        Ok(FederationOutcome {
            global: self.state.global,
            audit: self.audit,
            transitions: self.transitions,
            rejections: self.rejections,
        })
    }
}

/// Runs the server until round `config.rounds` has been aggregated and the
/// final model broadcast, or until a rostered client is lost.
pub fn serve(config: &FederationConfig, events: Receiver<Event>, audit_path: Option<&Path>) -> Result<FederationOutcome> {
    let state = RoundState::new(config.clone(), initial_params(config))?;
    let audit_file = match audit_path {
        Some(p) => Some((File::create(p).map_err(|e| Error::io(p, e))?, p.to_path_buf())),
        None => None,
    };
    let driver = Driver {
        state,
        links: BTreeMap::new(),
        client_of: BTreeMap::new(),
        conn_of: BTreeMap::new(),
        audit: Vec::new(),
        transitions: Vec::new(),
        rejections: Vec::new(),
        audit_file,
    };
    driver.run(events)
}

/// Client protocol loop: JOIN, then train on every broadcast until SHUTDOWN.
pub fn run_client(link: &mut dyn ClientLink, client: &mut FedClient<'_>) -> Result<()> {
    link.send(&Message::Join { client_id: client.id.clone(), protocol_version: PROTOCOL_VERSION })?;
    loop {
        let aborted = |client: &FedClient<'_>, reason: String| Error::FederationAborted { round: client.last_round(), reason };
        let Some(msg) = link.recv()? else {
            return if client.is_finished() { Ok(()) } else { Err(aborted(client, "server went away".into())) };
        };
        match msg {
            Message::JoinAck { config } => client.configure(config)?,
            Message::ModelBroadcast { round, params } => {
                if let Some(update) = client.on_broadcast(round, &params)? {
                    link.send(&Message::DeltaSubmit { round, update })?;
                }
            }
            Message::RoundComplete { round } => log::debug!("{}: round {round} complete", client.id),
            Message::Shutdown { reason } => {
                return if client.is_finished() { Ok(()) } else { Err(aborted(client, reason)) };
            }
            other => return Err(Error::UnexpectedMessage { msg: other.name(), phase: "client" }),
        }
    }
}

struct ChannelLink(Sender<Message>);

impl Link for ChannelLink {
    fn send(&mut self, msg: &Message) -> Result<()> {
        self.0.send(msg.clone()).map_err(|_| Error::Malformed("in-process client hung up".into()))
    }
}

/// Client end of an in-process connection; reports `Closed` when dropped.
pub struct ChannelClient {
    conn: usize,
    to_server: Sender<Event>,
    from_server: Receiver<Message>,
}

impl ChannelClient {
    /// Registers a new connection with the server's event queue.
    pub fn connect(conn: usize, events: &Sender<Event>) -> Self {
        let (tx, rx) = channel();
        let _ = events.send(Event::Connected(conn, Box::new(ChannelLink(tx))));
        ChannelClient { conn, to_server: events.clone(), from_server: rx }
    }
}

impl ClientLink for ChannelClient {
    fn send(&mut self, msg: &Message) -> Result<()> {
        self.to_server
            .send(Event::Frame(self.conn, msg.clone()))
            .map_err(|_| Error::Malformed("server hung up".into()))
    }

    fn recv(&mut self) -> Result<Option<Message>> {
        Ok(self.from_server.recv().ok())
    }
}

impl Drop for ChannelClient {
    fn drop(&mut self) {
        let _ = self.to_server.send(Event::Closed(self.conn));
    }
}

/// Final federation state plus every client's selection outcome, in roster order.
#[derive(Debug, Clone)]
pub struct SimulationOutcome {
    pub federation: FederationOutcome,
    pub clients: Vec<ClientOutcome>,
}

/// Runs server and clients in this process, one thread per client.
/// `sites` must contain a dataset for every roster id; `store_for` supplies
/// each client's checkpoint store.
pub fn simulate(
    par: Parallelism,
    config: &FederationConfig,
    sites: &[SiteDataset],
    audit_path: Option<&Path>,
    store_for: &dyn Fn(&str) -> Result<CheckpointStore>,
) -> Result<SimulationOutcome> {
    config.validate()?;
    let mut assigned = Vec::new();
    for id in &config.roster {
        let site = sites
            .iter()
            .find(|s| &s.site_id == id)
            .ok_or_else(|| Error::InvalidConfig(format!("no dataset for client {id}")))?;
        assigned.push((id.clone(), site, store_for(id)?));
    }
    let (tx, rx) = channel();
    std::thread::scope(|scope| {
        let handles: Vec<_> = assigned
            .into_iter()
            .enumerate()
            .map(|(conn, (id, site, store))| {
                let mut link = ChannelClient::connect(conn, &tx);
                scope.spawn(move || {
                    let mut client = FedClient::new(&id, site, None, par, store);
                    run_client(&mut link, &mut client)?;
                    drop(link);
                    client.finish()
                })
            })
            .collect();
        drop(tx);
        let federation = serve(config, rx, audit_path);
        let clients: Vec<Result<ClientOutcome>> =
            handles.into_iter().map(|h| h.join().expect("client thread panicked")).collect();
        let federation = federation?;
        let clients = clients.into_iter().collect::<Result<Vec<_>>>()?;
        Ok(SimulationOutcome { federation, clients })
    })
}

struct TcpLink(TcpStream);

impl Link for TcpLink {
    fn send(&mut self, msg: &Message) -> Result<()> {
        write_frame(&mut BufWriter::new(&mut self.0), msg)
    }

    fn close(&mut self) {
        let _ = self.0.shutdown(Shutdown::Write);
    }
}

fn spawn_reader(conn: usize, stream: TcpStream, events: Sender<Event>) {
    std::thread::spawn(move || {
        let mut reader = BufReader::new(stream);
        loop {
            let event = match read_frame(&mut reader) {
                Ok(Some(msg)) => Event::Frame(conn, msg),
                Ok(None) | Err(Error::Transport(_)) => Event::Closed(conn),
                Err(e) => Event::Malformed(conn, e),
            };
            let last = !matches!(event, Event::Frame(..));
            if events.send(event).is_err() || last {
                if last {
                    let _ = reader.get_ref().shutdown(Shutdown::Read);
                }
                break;
            }
        }
    });
}

/// Serves a federation over TCP on an already-bound listener.
pub fn serve_tcp(listener: TcpListener, config: &FederationConfig, audit_path: Option<&Path>) -> Result<FederationOutcome> {
    listener.set_nonblocking(true)?;
    let (tx, rx) = channel();
    let stop = Arc::new(AtomicBool::new(false));
    let acceptor = {
        let stop = stop.clone();
        std::thread::spawn(move || {
            let mut conn = 0;
            while !stop.load(Ordering::Relaxed) {
                match listener.accept() {
                    Ok((stream, peer)) => {
                        log::debug!("connection {conn} from {peer}");
                        let setup = stream
                            .set_nonblocking(false)
                            .and_then(|_| stream.set_nodelay(true))
                            .and_then(|_| stream.try_clone());
                        let Ok(read_half) = setup else { continue };
                        if tx.send(Event::Connected(conn, Box::new(TcpLink(stream)))).is_err() {
                            break;
                        }
                        spawn_reader(conn, read_half, tx.clone());
                        conn += 1;
                    }
                    Err(e) if e.kind() == std::io::ErrorKind::WouldBlock => std::thread::sleep(Duration::from_millis(5)),
                    Err(e) => log::warn!("accept failed: {e}"),
                }
            }
        })
    };
    let outcome = serve(config, rx, audit_path);
    stop.store(true, Ordering::Relaxed);
    let _ = acceptor.join();
    outcome
}

/// Client end of a TCP connection.
pub struct TcpClient {
    reader: BufReader<TcpStream>,
    writer: TcpStream,
}

impl TcpClient {
    /// Connects, retrying until `patience` has elapsed so clients may start
    /// before the server.
    pub fn connect(addr: impl ToSocketAddrs + Clone, patience: Duration) -> Result<Self> {
        let start = std::time::Instant::now();
        loop {
            match TcpStream::connect(addr.clone()) {
                Ok(stream) => {
                    stream.set_nodelay(true)?;
                    return Ok(TcpClient { reader: BufReader::new(stream.try_clone()?), writer: stream });
                }
                Err(e) if start.elapsed() < patience => {
                    log::debug!("connect failed ({e}), retrying");
                    std::thread::sleep(Duration::from_millis(100));
                }
                Err(e) => return Err(Error::Transport(e)),
            }
        }
    }
}

impl ClientLink for TcpClient {
    fn send(&mut self, msg: &Message) -> Result<()> {
        write_frame(&mut BufWriter::new(&mut self.writer), msg)
    }

    fn recv(&mut self) -> Result<Option<Message>> {
        match read_frame(&mut self.reader) {
            Err(Error::Transport(_)) => Ok(None),
            other => other,
        }
    }
}

/// Joins a TCP federation as `client_id`, training on `site`.
pub fn join_tcp(
    addr: &str,
    client_id: &str,
    site: &SiteDataset,
    master_seed: Option<u64>,
    par: Parallelism,
    store: CheckpointStore,
    patience: Duration,
) -> Result<ClientOutcome> {
    let mut link = TcpClient::connect(addr, patience)?;
    let mut client = FedClient::new(client_id, site, master_seed, par, store);
    run_client(&mut link, &mut client)?;
    client.finish()
}
