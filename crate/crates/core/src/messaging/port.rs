use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex, OnceLock};

use rustc_hash::FxHashMap;
use serde::Serialize;

use super::{Buffer, Link, Message, MsgId, Payload, PortId};
use crate::error::SimError;
use crate::ticking::TickHandle;
use crate::time::VTime;
use crate::trace::TaskId;

#[derive(Debug)]
pub enum SendResult {
    Accepted,
    /// The outgoing buffer is full. The message is handed back untouched.
    Rejected(Message),
}

impl SendResult {
    pub fn is_accepted(&self) -> bool {
        matches!(self, SendResult::Accepted)
    }
}

/// Whole-run traffic counters.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct PortCounters {
    pub in_msgs: u64,
    pub in_bytes: u64,
    pub out_msgs: u64,
    pub out_bytes: u64,
    pub retrieved: u64,
}

#[derive(Default)]
struct Counters {
    in_msgs: AtomicU64,
    in_bytes: AtomicU64,
    out_msgs: AtomicU64,
    out_bytes: AtomicU64,
    retrieved: AtomicU64,
}

/// Per-source ordering check on retrieval, enabled for property testing.
#[derive(Default)]
struct Audit {
    last_from: FxHashMap<PortId, u64>,
    fifo_violations: u64,
}

pub struct Port {
    id: PortId,
    name: Arc<str>,
    incoming: Buffer,
    outgoing: Buffer,
    owner: OnceLock<Arc<TickHandle>>,
    link: OnceLock<Arc<Link>>,
    next_msg: AtomicU64,
    counters: Counters,
    audit: Option<Mutex<Audit>>,
}

impl Port {
    pub fn new(id: PortId, name: &str, in_capacity: usize, out_capacity: usize) -> Port {
        Port {
            id,
            name: Arc::from(name),
            incoming: Buffer::new(format!("{name}.in"), in_capacity),
            outgoing: Buffer::new(format!("{name}.out"), out_capacity),
            owner: OnceLock::new(),
            link: OnceLock::new(),
            next_msg: AtomicU64::new(0),
            counters: Counters::default(),
            audit: None,
        }
    }

    /// Turns on per-source FIFO checking of retrieved messages.
    pub fn with_audit(mut self) -> Port {
        self.audit = Some(Mutex::new(Audit::default()));
        self
    }

    pub fn id(&self) -> PortId {
        self.id
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn incoming(&self) -> &Buffer {
        &self.incoming
    }

    pub fn outgoing(&self) -> &Buffer {
        &self.outgoing
    }

    pub fn owner(&self) -> Option<&Arc<TickHandle>> {
        self.owner.get()
    }

    pub fn link(&self) -> Option<&Arc<Link>> {
        self.link.get()
    }

    pub(crate) fn set_owner(&self, owner: Arc<TickHandle>) {
        let _ = self.owner.set(owner);
    }

    pub(crate) fn plug(&self, link: Arc<Link>) -> Result<(), SimError> {
        self.link
            .set(link)
            .map_err(|_| SimError::DoublePlug(self.name.to_string()))
    }

    /// A fresh message from this port. Ids are consumed even if the message
    /// is never sent.
    pub fn message(&self, dst: PortId, size_bytes: u32, payload: Payload) -> Message {
        let n = self.next_msg.fetch_add(1, Ordering::Relaxed);
        Message {
            id: MsgId::new(self.id, n),
            src: self.id,
            dst,
            enqueue_time: VTime::ZERO,
            size_bytes,
            task: None,
            payload,
        }
    }

    pub fn message_for(
        &self,
        dst: PortId,
        size_bytes: u32,
        payload: Payload,
        task: Option<TaskId>,
    ) -> Message {
        let mut m = self.message(dst, size_bytes, payload);
        m.task = task;
        m
    }

    /// Whether a send at `now` would be accepted.
    pub fn can_send(&self, now: VTime) -> bool {
        self.outgoing.can_push(now)
    }

    pub fn send(&self, mut msg: Message, now: VTime) -> Result<SendResult, SimError> {
        let link = self
            .link
            .get()
            .ok_or_else(|| SimError::Unplugged(self.name.to_string()))?;
        if msg.src != self.id {
            return Err(SimError::config(
                self.name.to_string(),
                format!("message {} has source port {}", msg.id, msg.src.0),
            ));
        }
        if msg.dst == self.id || !link.serves(msg.dst) {
            return Err(SimError::Unreachable {
                connection: link.name().to_string(),
                dst: msg.dst.0,
            });
        }
        let stamp = std::mem::replace(&mut msg.enqueue_time, now);
        let size = msg.size_bytes as u64;
        match self.outgoing.try_push(msg, now) {
            Ok(()) => {
                self.counters.out_msgs.fetch_add(1, Ordering::Relaxed);
                self.counters.out_bytes.fetch_add(size, Ordering::Relaxed);
                link.handle().tick_later(now);
                Ok(SendResult::Accepted)
            }
            Err(mut msg) => {
                msg.enqueue_time = stamp;
                Ok(SendResult::Rejected(msg))
            }
        }
    }

    /// Takes the oldest visible incoming message.
    pub fn retrieve(&self, now: VTime) -> Option<Message> {
        let (msg, freed) = self.incoming.pop(now)?;
        self.counters.retrieved.fetch_add(1, Ordering::Relaxed);
        if let Some(audit) = &self.audit {
            let mut a = audit.lock().unwrap();
            let n = msg.id.counter();
            if let Some(prev) = a.last_from.insert(msg.src, n) {
                if prev >= n {
                    a.fifo_violations += 1;
                }
            }
        }
        if freed {
            if let Some(link) = self.link.get() {
                link.handle().tick_later(now);
            }
        }
        Some(msg)
    }

    pub fn peek(&self, now: VTime) -> Option<Message> {
        self.incoming.peek(now)
    }

    /// Connection side: destination of the visible outgoing head.
    pub(crate) fn head_dst(&self, now: VTime) -> Option<PortId> {
        self.outgoing.peek_with(now, |m| m.dst)
    }

    /// Connection side: removes the outgoing head, waking the owner if that
    /// frees a full buffer.
    pub(crate) fn pick_up(&self, now: VTime) -> Option<Message> {
        let (msg, freed) = self.outgoing.pop(now)?;
        if freed {
            if let Some(owner) = self.owner.get() {
                owner.tick_later(now);
            }
        }
        Some(msg)
    }

    /// Connection side: delivers into the incoming buffer and wakes the owner.
    pub(crate) fn deposit(&self, msg: Message, now: VTime) -> Result<(), Message> {
        let size = msg.size_bytes as u64;
        self.incoming.try_push(msg, now)?;
        self.counters.in_msgs.fetch_add(1, Ordering::Relaxed);
        self.counters.in_bytes.fetch_add(size, Ordering::Relaxed);
        if let Some(owner) = self.owner.get() {
            owner.tick_later(now);
        }
        Ok(())
    }

    pub fn counters(&self) -> PortCounters {
        PortCounters {
            in_msgs: self.counters.in_msgs.load(Ordering::Relaxed),
            in_bytes: self.counters.in_bytes.load(Ordering::Relaxed),
            out_msgs: self.counters.out_msgs.load(Ordering::Relaxed),
            out_bytes: self.counters.out_bytes.load(Ordering::Relaxed),
            retrieved: self.counters.retrieved.load(Ordering::Relaxed),
        }
    }

    /// FIFO violations seen by the audit, if enabled.
    pub fn fifo_violations(&self) -> Option<u64> {
        self.audit
            .as_ref()
            .map(|a| a.lock().unwrap().fifo_violations)
    }
}
