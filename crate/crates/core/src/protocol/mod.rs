//! Server side of the federation: iteration-weighted averaging, the
//! synchronous round state machine, the binary wire format and transports.
//!
//! Frame layout (little-endian): `"FKFL"`, `u16` version, `u16` message
//! type, `u32` payload length, payload. Types: 1 JOIN, 2 JOIN_ACK,
//! 3 MODEL_BROADCAST, 4 DELTA_SUBMIT, 5 ROUND_COMPLETE, 6 SHUTDOWN.
//! Parameter vectors inside payloads use the `FKPV` file layout.

mod aggregate;
mod message;
mod server;
mod transport;

pub use aggregate::{aggregate, ClientUpdate};
pub use message::{
    decode_header, decode_message, decode_payload, encode_message, read_frame, write_frame, FrameHeader, Message,
    FRAME_MAGIC, HEADER_LEN, MAX_PAYLOAD, PROTOCOL_VERSION,
};
pub use server::{server_step, ClientAudit, Outbound, Phase, RoundAudit, RoundState, StepOutcome, Transition};
pub use transport::{
    initial_params, join_tcp, run_client, serve, serve_tcp, simulate, ChannelClient, ClientLink, Event,
    FederationOutcome, Link, Rejection, SimulationOutcome, TcpClient,
};
