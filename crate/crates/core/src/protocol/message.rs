use crate::config::FederationConfig;
use crate::error::{Error, Result};
use crate::nn::ParamVector;
use crate::protocol::aggregate::ClientUpdate;

pub const FRAME_MAGIC: &[u8; 4] = b"FKFL";
pub const PROTOCOL_VERSION: u16 = 1;
pub const HEADER_LEN: usize = 12;
/// Frames declaring a larger payload are rejected before reading it.
pub const MAX_PAYLOAD: u32 = 1 << 28;

#[derive(Debug, Clone, PartialEq)]
pub enum Message {
    Join { client_id: String, protocol_version: u16 },
    JoinAck { config: FederationConfig },
    ModelBroadcast { round: u32, params: ParamVector },
    DeltaSubmit { round: u32, update: ClientUpdate },
    RoundComplete { round: u32 },
    Shutdown { reason: String },
}

impl Message {
    pub fn type_code(&self) -> u16 {
        match self {
            Message::Join { .. } => 1,
            Message::JoinAck { .. } => 2,
            Message::ModelBroadcast { .. } => 3,
            Message::DeltaSubmit { .. } => 4,
            Message::RoundComplete { .. } => 5,
            Message::Shutdown { .. } => 6,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Message::Join { .. } => "JOIN",
            Message::JoinAck { .. } => "JOIN_ACK",
            Message::ModelBroadcast { .. } => "MODEL_BROADCAST",
            Message::DeltaSubmit { .. } => "DELTA_SUBMIT",
            Message::RoundComplete { .. } => "ROUND_COMPLETE",
            Message::Shutdown { .. } => "SHUTDOWN",
        }
    }
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u16).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

fn payload(msg: &Message) -> Vec<u8> {
    let mut out = Vec::new();
    match msg {
        Message::Join { client_id, protocol_version } => {
            out.extend_from_slice(&protocol_version.to_le_bytes());
            put_str(&mut out, client_id);
        }
        Message::JoinAck { config } => out = serde_json::to_vec(config).expect("config serializes"),
        Message::ModelBroadcast { round, params } => {
            out.extend_from_slice(&round.to_le_bytes());
            params.write_into(&mut out);
        }
        Message::DeltaSubmit { round, update } => {
            out.extend_from_slice(&round.to_le_bytes());
            put_str(&mut out, &update.client_id);
            out.extend_from_slice(&update.n_k.to_le_bytes());
            update.delta.write_into(&mut out);
        }
        Message::RoundComplete { round } => out.extend_from_slice(&round.to_le_bytes()),
        Message::Shutdown { reason } => out.extend_from_slice(reason.as_bytes()),
    }
    out
}

/// Header plus payload. Panics only if a string field exceeds 65535 bytes.
pub fn encode_message(msg: &Message) -> Vec<u8> {
    let body = payload(msg);
    if let Message::Join { client_id: s, .. } | Message::DeltaSubmit { update: ClientUpdate { client_id: s, .. }, .. } = msg {
        assert!(s.len() <= u16::MAX as usize, "client id too long");
    }
    let mut out = Vec::with_capacity(HEADER_LEN + body.len());
    out.extend_from_slice(FRAME_MAGIC);
    out.extend_from_slice(&PROTOCOL_VERSION.to_le_bytes());
    out.extend_from_slice(&msg.type_code().to_le_bytes());
    out.extend_from_slice(&(body.len() as u32).to_le_bytes());
    out.extend_from_slice(&body);
    out
}

/// Validated frame header: message type and payload length.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FrameHeader {
    pub msg_type: u16,
    pub payload_len: u32,
}

pub fn decode_header(bytes: &[u8]) -> Result<FrameHeader> {
    if bytes.len() < HEADER_LEN {
        // A short prefix that already disagrees with the magic is reported as such.
        let n = bytes.len().min(4);
        if bytes[..n] != FRAME_MAGIC[..n] {
            return Err(Error::BadMagic(bytes[..n].to_vec()));
        }
        return Err(Error::Truncated { needed: HEADER_LEN, available: bytes.len() });
    }
    if &bytes[..4] != FRAME_MAGIC {
        return Err(Error::BadMagic(bytes[..4].to_vec()));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != PROTOCOL_VERSION {
        return Err(Error::VersionMismatch { got: version, expected: PROTOCOL_VERSION });
    }
    let msg_type = u16::from_le_bytes([bytes[6], bytes[7]]);
    let payload_len = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if !(1..=6).contains(&msg_type) {
        return Err(Error::Malformed(format!("unknown message type {msg_type}")));
    }
    if payload_len > MAX_PAYLOAD {
        return Err(Error::Malformed(format!("payload of {payload_len} bytes exceeds limit")));
    }
    Ok(FrameHeader { msg_type, payload_len })
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Truncated { needed: self.pos + n, available: self.bytes.len() });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u16()? as usize;
        utf8(self.take(n)?)
    }

    fn params(&mut self) -> Result<ParamVector> {
        let (p, used) = ParamVector::read_from(&self.bytes[self.pos..])?;
        self.pos += used;
        Ok(p)
    }

    fn rest(&mut self) -> &'a [u8] {
        let s = &self.bytes[self.pos..];
        self.pos = self.bytes.len();
        s
    }
}

fn utf8(bytes: &[u8]) -> Result<String> {
    String::from_utf8(bytes.to_vec()).map_err(|_| Error::Malformed("string is not UTF-8".into()))
}

/// Decodes the payload of a frame whose header has already been validated.
pub fn decode_payload(header: FrameHeader, payload: &[u8]) -> Result<Message> {
    let mut r = Reader { bytes: payload, pos: 0 };
    let msg = match header.msg_type {
        1 => {
            let protocol_version = r.u16()?;
            Message::Join { client_id: r.string()?, protocol_version }
        }
        2 => {
            let config = serde_json::from_slice(r.rest()).map_err(|e| Error::Malformed(format!("JOIN_ACK config: {e}")))?;
            Message::JoinAck { config }
        }
        3 => Message::ModelBroadcast { round: r.u32()?, params: r.params()? },
        4 => {
            let round = r.u32()?;
            let client_id = r.string()?;
            let n_k = r.u64()?;
            let delta = r.params()?;
            Message::DeltaSubmit { round, update: ClientUpdate { client_id, delta, n_k } }
        }
        5 => Message::RoundComplete { round: r.u32()? },
        6 => Message::Shutdown { reason: utf8(r.rest())? },
        t => return Err(Error::Malformed(format!("unknown message type {t}"))),
    };
    if r.pos != payload.len() {
        return Err(Error::Malformed(format!("{} trailing payload bytes", payload.len() - r.pos)));
    }
    Ok(msg)
}

/// Decodes one frame from the front of `bytes`; returns the message and
/// the number of bytes it occupied.
pub fn decode_message(bytes: &[u8]) -> Result<(Message, usize)> {
    let header = decode_header(bytes)?;
    let end = HEADER_LEN + header.payload_len as usize;
    if bytes.len() < end {
        return Err(Error::Truncated { needed: end, available: bytes.len() });
    }
    Ok((decode_payload(header, &bytes[HEADER_LEN..end])?, end))
}

/// Reads one frame. `Ok(None)` means the peer closed cleanly between frames.
pub fn read_frame(reader: &mut impl std::io::Read) -> Result<Option<Message>> {
    let mut header = [0u8; HEADER_LEN];
    let mut got = 0;
    while got < HEADER_LEN {
        match reader.read(&mut header[got..]) {
            Ok(0) if got == 0 => return Ok(None),
            Ok(0) => return decode_header(&header[..got]).map(|_| None),
            Ok(n) => got += n,
            Err(e) if e.kind() == std::io::ErrorKind::Interrupted => {}
            Err(e) => return Err(Error::Transport(e)),
        }
    }
    let h = decode_header(&header)?;
    let mut payload = vec![0u8; h.payload_len as usize];
    let mut got = 0;
    while got < payload.len() {
        match reader.read(&mut payload[got..]) {
            Ok(0) => {
                return Err(Error::Truncated { needed: HEADER_LEN + payload.len(), available: HEADER_LEN + got })
            }
            Ok(n) => got += n,
            Err(e) if e.kind() == std::io::ErrorKind::Interrupted => {}
            Err(e) => return Err(Error::Transport(e)),
        }
    }
    decode_payload(h, &payload).map(Some)
}

pub fn write_frame(writer: &mut impl std::io::Write, msg: &Message) -> Result<()> {
    writer.write_all(&encode_message(msg))?;
    writer.flush()?;
    Ok(())
}
