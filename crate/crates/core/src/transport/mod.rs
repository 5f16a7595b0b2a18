//! Broadcast transports and the framed wire format.
//!
//! A frame is a 4-byte big-endian payload length followed by the UTF-8 JSON
//! encoding of a [`ModelMessage`]:
//! `{"worker_id":..,"seq":..,"bound":..,"model":{"lineage":..,"rules":[..]}}`.

use std::io::{self, Read, Write};

use crate::error::{Error, Result};
use crate::protocol::ModelMessage;

pub mod inproc;
pub mod tcp;

pub use inproc::{FaultPlan, InProcBus, InProcEndpoint};
pub use tcp::TcpEndpoint;

/// Largest payload accepted from the wire.
pub const MAX_FRAME: usize = 64 << 20;

/// One worker's connection to the broadcast channel. Implementations accept
/// concurrent `broadcast` and `poll` calls.
pub trait Endpoint: Send + Sync {
    fn worker_id(&self) -> usize;

    /// Best-effort delivery to every peer except the sender.
    fn broadcast(&self, msg: &ModelMessage) -> Result<()>;

    /// Messages that have arrived since the last poll, in per-sender order.
    fn poll(&self) -> Result<Vec<ModelMessage>>;

    /// Counts one worker event; fault plans may halt the worker on it.
    fn note_event(&self) {}

    fn is_alive(&self) -> bool {
        true
    }

    fn close(&self) {}
}

pub fn encode(msg: &ModelMessage) -> Result<Vec<u8>> {
    let payload = serde_json::to_vec(msg)?;
    if payload.len() > MAX_FRAME {
        return Err(Error::Transport(format!("message of {} bytes exceeds frame limit", payload.len())));
    }
    let mut frame = Vec::with_capacity(payload.len() + 4);
    frame.extend_from_slice(&(payload.len() as u32).to_be_bytes());
    frame.extend_from_slice(&payload);
    Ok(frame)
}

/// Decodes one complete frame.
pub fn decode(frame: &[u8]) -> Result<ModelMessage> {
    if frame.len() < 4 {
        return Err(Error::Decode(format!("frame of {} bytes has no length prefix", frame.len())));
    }
    let len = u32::from_be_bytes([frame[0], frame[1], frame[2], frame[3]]) as usize;
    let payload = &frame[4..];
    if payload.len() != len {
        return Err(Error::Decode(format!(
            "length prefix says {len} bytes, frame carries {}",
            payload.len()
        )));
    }
    decode_payload(payload)
}

pub fn decode_payload(payload: &[u8]) -> Result<ModelMessage> {
    serde_json::from_slice(payload).map_err(|e| Error::Decode(e.to_string()))
}

pub fn write_frame(w: &mut impl Write, frame: &[u8]) -> io::Result<()> {
    w.write_all(frame)?;
    w.flush()
}

/// Reads one frame's payload. `Ok(None)` on a clean end of stream.
pub fn read_payload(r: &mut impl Read) -> io::Result<Option<Vec<u8>>> {
    let mut len = [0u8; 4];
    match r.read_exact(&mut len) {
        Ok(()) => {}
        Err(e) if e.kind() == io::ErrorKind::UnexpectedEof => return Ok(None),
        Err(e) => return Err(e),
    }
    let len = u32::from_be_bytes(len) as usize;
    if len > MAX_FRAME {
        return Err(io::Error::new(
            io::ErrorKind::InvalidData,
            format!("frame length {len} exceeds limit"),
        ));
    }
    let mut payload = vec![0u8; len];
    r.read_exact(&mut payload)?;
    Ok(Some(payload))
}
