//! Datagram framing shared by the messaging and data ports.
//!
//! ```text
//! 0      2             6             10            14
//! +------+-------------+-------------+-------------+----------------+
//! | type | session_id  | seq         | payload len | payload ...    |
//! +------+-------------+-------------+-------------+----------------+
//! ```
//! All fields big-endian. Types at or above `0x8000` belong to data channels;
//! on the data port the session slot carries the channel id.

use super::TransportError;

pub const HEADER_LEN: usize = 14;
/// Largest payload a single message may carry.
pub const MAX_PAYLOAD: usize = 64 * 1024;
/// Largest payload in one data-channel chunk.
pub const MAX_CHUNK: usize = 32 * 1024;

pub const DATA_TYPE_BASE: u16 = 0x8000;

/// Reserved messaging control codes.
pub mod control {
    /// Cumulative acknowledgement; `seq` is the highest in-order sequence delivered.
    pub const ACK: u16 = 0x0001;
    /// Starts a sender flow; payload is the sender's incarnation (u64).
    pub const SYN: u16 = 0x0002;
    /// First code available to applications.
    pub const FIRST_APP: u16 = 0x0010;
}

/// Data channel packet codes.
pub mod chan {
    pub const HELLO: u16 = 0x8001;
    pub const HELLO_ACK: u16 = 0x8002;
    pub const DATA: u16 = 0x8003;
    /// `seq` = next expected chunk; payload = u64 bitmap of chunks received beyond it.
    pub const SACK: u16 = 0x8004;
    /// `seq` = total chunk count; payload = total bytes (u64).
    pub const FIN: u16 = 0x8005;
    pub const FIN_ACK: u16 = 0x8006;
    pub const ABORT: u16 = 0x8007;
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Frame {
    pub msg_type: u16,
    pub session_id: u32,
    pub seq: u32,
    pub payload: Vec<u8>,
}

impl Frame {
    pub fn new(msg_type: u16, session_id: u32, seq: u32, payload: Vec<u8>) -> Self {
        Self {
            msg_type,
            session_id,
            seq,
            payload,
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN + self.payload.len());
        encode_into(&mut out, self.msg_type, self.session_id, self.seq, &self.payload);
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, TransportError> {
        if bytes.len() < HEADER_LEN {
            return Err(TransportError::Malformed(format!(
                "datagram of {} bytes is shorter than the header",
                bytes.len()
            )));
        }
        let msg_type = u16::from_be_bytes([bytes[0], bytes[1]]);
        let session_id = u32::from_be_bytes(bytes[2..6].try_into().expect("4 bytes"));
        let seq = u32::from_be_bytes(bytes[6..10].try_into().expect("4 bytes"));
        let len = u32::from_be_bytes(bytes[10..14].try_into().expect("4 bytes")) as usize;
        if len > MAX_PAYLOAD {
            return Err(TransportError::PayloadTooLarge(len));
        }
        if bytes.len() - HEADER_LEN != len {
            return Err(TransportError::Malformed(format!(
                "header declares {len} payload bytes, datagram carries {}",
                bytes.len() - HEADER_LEN
            )));
        }
        Ok(Frame {
            msg_type,
            session_id,
            seq,
            payload: bytes[HEADER_LEN..].to_vec(),
        })
    }
}

pub fn encode_into(out: &mut Vec<u8>, msg_type: u16, session_id: u32, seq: u32, payload: &[u8]) {
    out.extend_from_slice(&msg_type.to_be_bytes());
    out.extend_from_slice(&session_id.to_be_bytes());
    out.extend_from_slice(&seq.to_be_bytes());
    out.extend_from_slice(&(payload.len() as u32).to_be_bytes());
    out.extend_from_slice(payload);
}
