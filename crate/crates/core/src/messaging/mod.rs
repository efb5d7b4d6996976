//! Messages, ports and connections.
//!
//! Components only talk through ports. A port owns an incoming and an
//! outgoing bounded buffer; a connection pulls messages out of the outgoing
//! buffers it serves and deposits them into the destination's incoming
//! buffer. Every buffer entry is stamped with the time it was inserted and a
//! reader at time `t` only sees entries inserted before `t`, so handlers
//! running at the same timestamp cannot observe each other.

mod buffer;
mod connection;
mod port;

use std::any::Any;
use std::fmt;
use std::sync::Arc;

use serde::Serialize;

use crate::time::VTime;
use crate::trace::TaskId;

pub use buffer::{Buffer, BufferStats};
pub use connection::{Connection, Link};
pub use port::{Port, PortCounters, SendResult};

/// Index of a port in its simulation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
#[serde(transparent)]
pub struct PortId(pub u32);

/// Message ids are unique per simulation: the sending port's id in the high
/// bits and a per-port counter in the low 40 bits.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct MsgId(pub u64);

impl MsgId {
    pub const COUNTER_BITS: u32 = 40;

    pub fn new(port: PortId, n: u64) -> MsgId {
        MsgId(((port.0 as u64) << Self::COUNTER_BITS) | n)
    }

    pub fn port(self) -> PortId {
        PortId((self.0 >> Self::COUNTER_BITS) as u32)
    }

    pub fn counter(self) -> u64 {
        self.0 & ((1 << Self::COUNTER_BITS) - 1)
    }
}

impl fmt::Display for MsgId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.port().0, self.counter())
    }
}

#[derive(Clone)]
pub enum Payload {
    Ping {
        seq: u64,
    },
    Pong {
        seq: u64,
    },
    Read {
        addr: u64,
    },
    ReadDone {
        request: MsgId,
        addr: u64,
    },
    /// Anything a third-party model needs.
    Opaque(Arc<dyn Any + Send + Sync>),
}

impl fmt::Debug for Payload {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Payload::Ping { seq } => write!(f, "Ping({seq})"),
            Payload::Pong { seq } => write!(f, "Pong({seq})"),
            Payload::Read { addr } => write!(f, "Read({addr:#x})"),
            Payload::ReadDone { request, addr } => write!(f, "ReadDone({request}, {addr:#x})"),
            Payload::Opaque(_) => f.write_str("Opaque"),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Message {
    pub id: MsgId,
    pub src: PortId,
    pub dst: PortId,
    /// Set when the source port accepts the message.
    pub enqueue_time: VTime,
    pub size_bytes: u32,
    /// Task on whose behalf the message travels, for tracing.
    pub task: Option<TaskId>,
    pub payload: Payload,
}
