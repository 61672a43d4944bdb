use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Evaluation;
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MessageKind {
    /// Walking model handed to the next device.
    Hop,
    /// Contributor-to-aggregator transfer.
    Aggregate,
    /// Server-to-device transfer (FedAvg).
    Broadcast,
    /// Device-to-server transfer (FedAvg).
    Upload,
}

impl MessageKind {
    pub fn is_update(&self) -> bool {
        matches!(self, MessageKind::Hop)
    }
}

/// One transmitted message. In FedAvg the server is node `n`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MessageRecord {
    pub round: u64,
    pub step: Option<u64>,
    pub from: usize,
    pub to: usize,
    pub bits: u64,
    pub kind: MessageKind,
}

/// Traffic of the device that sent the most bits in a round.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub struct BusiestDevice {
    pub device: usize,
    pub bits_sent: u64,
    /// Update traffic: hop messages sent or received.
    pub c_upd: u64,
    /// Aggregation traffic: aggregation, broadcast and upload messages sent or received.
    pub c_agg: u64,
    pub c_r: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundMetrics {
    pub round: u64,
    /// Bits sent per node, indexed by device id (plus the server in FedAvg).
    pub bits_sent: Vec<u64>,
    /// Node id of the FedAvg server, excluded from the busiest-device choice.
    pub server: Option<usize>,
    pub busiest: BusiestDevice,
    /// Devices at which each chain took its gradient steps, in order.
    pub visits: Vec<Vec<usize>>,
    pub gradient_steps: usize,
    /// Mean mini-batch loss over the round's gradient steps.
    pub train_loss: f64,
    pub aggregated: bool,
    pub messages: Vec<MessageRecord>,
    pub evaluation: Option<Evaluation>,
}

impl RoundMetrics {
    pub fn total_bits(&self) -> u64 {
        self.bits_sent.iter().sum()
    }
}

/// Busiest among devices `0..devices`; a server node (if any) is never chosen.
pub(crate) fn busiest_of(devices: usize, messages: &[MessageRecord]) -> BusiestDevice {
    let mut sent = vec![0u64; devices.max(1)];
    for msg in messages.iter().filter(|m| m.from < devices) {
        sent[msg.from] += msg.bits;
    }
    // Ties resolve to the lowest id.
    let device = sent
        .iter()
        .enumerate()
        .fold(0, |best, (i, &b)| if b > sent[best] { i } else { best });
    let (mut c_upd, mut c_agg) = (0, 0);
    for msg in messages.iter().filter(|m| m.from == device || m.to == device) {
        let legs = u64::from(msg.from == device) + u64::from(msg.to == device);
        if msg.kind.is_update() {
            c_upd += legs * msg.bits;
        } else {
            c_agg += legs * msg.bits;
        }
    }
    BusiestDevice {
        device,
        bits_sent: sent[device],
        c_upd,
        c_agg,
        c_r: c_upd + c_agg,
    }
}

/// Recomputes the per-round busiest-device split from each round's message trace.
pub fn busiest_device_report(metrics: &[RoundMetrics]) -> Vec<(u64, BusiestDevice)> {
    metrics
        .iter()
        .map(|m| {
            let devices = m.bits_sent.len() - usize::from(m.server.is_some());
            (m.round, busiest_of(devices, &m.messages))
        })
        .collect()
}

/// Header of a full-precision message: `u32` dimension and `u32` reserved word.
pub const FULL_MESSAGE_HEADER_BYTES: usize = 8;

/// Full-precision parameter message: header followed by `d` little-endian `f32`s.
/// The accounted payload is the `32·d` bits of values; the header is framing.
pub fn encode_full_message<T: Scalar>(values: &[T]) -> Vec<u8> {
    let mut out = Vec::with_capacity(FULL_MESSAGE_HEADER_BYTES + 4 * values.len());
    out.extend_from_slice(&(values.len() as u32).to_le_bytes());
    out.extend_from_slice(&0u32.to_le_bytes());
    for v in values {
        out.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
    }
    out
}

pub fn decode_full_message<T: Scalar>(bytes: &[u8]) -> Result<Vec<T>> {
    if bytes.len() < FULL_MESSAGE_HEADER_BYTES {
        return Err(Error::format(bytes.len() as u64, "truncated message header"));
    }
    let d = u32::from_le_bytes(bytes[0..4].try_into().expect("4 bytes")) as usize;
    let body = &bytes[FULL_MESSAGE_HEADER_BYTES..];
    if body.len() != 4 * d {
        return Err(Error::format(
            bytes.len() as u64,
            format!("expected {} payload bytes, found {}", 4 * d, body.len()),
        ));
    }
    Ok(body
        .chunks_exact(4)
        .map(|c| T::from_f64_lossy(f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn msg(from: usize, to: usize, bits: u64, kind: MessageKind) -> MessageRecord {
        MessageRecord { round: 1, step: None, from, to, bits, kind }
    }

    #[test]
    fn busiest_counts_both_legs() {
        let trace = [
            msg(0, 1, 10, MessageKind::Hop),
            msg(1, 2, 10, MessageKind::Hop),
            msg(1, 0, 10, MessageKind::Aggregate),
            msg(2, 1, 10, MessageKind::Aggregate),
        ];
        let b = busiest_of(3, &trace);
        assert_eq!(b.device, 1);
        assert_eq!(b.bits_sent, 20);
        assert_eq!(b.c_upd, 20);
        assert_eq!(b.c_agg, 20);
        assert_eq!(b.c_r, b.c_upd + b.c_agg);
    }

    #[test]
    fn server_is_never_busiest() {
        let trace = [msg(3, 0, 50, MessageKind::Broadcast), msg(0, 3, 50, MessageKind::Upload)];
        let b = busiest_of(3, &trace);
        assert_eq!(b.device, 0);
        assert_eq!(b.c_agg, 100);
        assert_eq!(b.c_upd, 0);
    }

    #[test]
    fn ties_go_to_lowest_id() {
        let trace = [msg(2, 0, 5, MessageKind::Hop), msg(1, 0, 5, MessageKind::Hop)];
        assert_eq!(busiest_of(3, &trace).device, 1);
        assert_eq!(busiest_of(3, &[]).device, 0);
    }

    #[test]
    fn full_message_roundtrip() {
        let v = [0.5f64, -1.25, 3.0];
        let bytes = encode_full_message(&v);
        assert_eq!(bytes.len(), FULL_MESSAGE_HEADER_BYTES + 12);
        assert_eq!((bytes.len() - FULL_MESSAGE_HEADER_BYTES) * 8, 32 * 3);
        assert_eq!(decode_full_message::<f64>(&bytes).unwrap(), v.to_vec());
        assert!(decode_full_message::<f64>(&bytes[..10]).is_err());
    }
}
