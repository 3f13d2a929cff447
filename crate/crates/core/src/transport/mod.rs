//! Messaging and bulk-data transport.
//!
//! Every node owns exactly two datagram endpoints: one messaging port carrying
//! reliable control messages ([`MessageEndpoint`]) and one data port carrying
//! every bulk channel the node takes part in ([`DataEndpoint`]). Both are
//! sans-IO state machines; the runtime moves datagrams between them and either
//! the OS network or the simulated one.

mod channel;
mod messaging;
pub mod wire;

use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use channel::{ChannelConfig, ChannelError, ChannelEvent, ChannelId, ChannelState, ChannelStats, DataEndpoint};
pub use messaging::{Message, MessageEndpoint, MessagingConfig, MessagingStats, MsgEvent, MsgToken};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TransportError {
    #[error("payload of {0} bytes exceeds the message limit")]
    PayloadTooLarge(usize),
    #[error("message type {0:#06x} is reserved")]
    ReservedType(u16),
    #[error("malformed datagram: {0}")]
    Malformed(String),
    #[error(transparent)]
    Channel(#[from] ChannelError),
}

/// Faults the simulated network injects on a link.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NetFaultPlan {
    pub drop: f64,
    pub duplicate: f64,
    /// Datagrams sent back to back may overtake up to this many predecessors.
    pub reorder_window: u32,
    /// One-way latency override for the link; `None` uses the topology model.
    #[serde(with = "opt_duration_ms")]
    pub latency: Option<Duration>,
}

impl Default for NetFaultPlan {
    fn default() -> Self {
        Self {
            drop: 0.0,
            duplicate: 0.0,
            reorder_window: 0,
            latency: None,
        }
    }
}

impl NetFaultPlan {
    pub fn lossy(drop: f64) -> Self {
        Self {
            drop,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        for (name, p) in [("drop", self.drop), ("duplicate", self.duplicate)] {
            if !(0.0..=1.0).contains(&p) || p.is_nan() {
                return Err(format!("{name} probability {p} outside [0, 1]"));
            }
        }
        Ok(())
    }
}

mod opt_duration_ms {
    use std::time::Duration;

    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(d: &Option<Duration>, s: S) -> Result<S::Ok, S::Error> {
        match d {
            Some(d) => s.serialize_some(&(d.as_secs_f64() * 1000.0)),
            None => s.serialize_none(),
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<Duration>, D::Error> {
        let ms: Option<f64> = Option::deserialize(d)?;
        Ok(ms.map(|ms| Duration::from_secs_f64(ms / 1000.0)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fault_plan_validation() {
        assert!(NetFaultPlan::lossy(0.3).validate().is_ok());
        assert!(NetFaultPlan::lossy(1.5).validate().is_err());
        assert!(NetFaultPlan { duplicate: -0.1, ..Default::default() }.validate().is_err());
    }
}
