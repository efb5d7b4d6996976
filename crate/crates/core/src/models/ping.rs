use std::collections::HashMap;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use serde_json::json;

use super::burn;
use crate::error::Fault;
use crate::messaging::{Payload, Port, PortId};
use crate::ticking::{Component, TickCtx};
use crate::time::VTime;
use crate::trace::{Instrument, Task, TaskId};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PingRole {
    #[default]
    Initiator,
    Responder,
}

#[derive(Clone, Debug)]
pub struct PingAgentBuilder {
    role: PingRole,
    pings: u64,
    peer: Option<PortId>,
    drain: bool,
    size_bytes: u32,
    compute_cost: u32,
}

impl Default for PingAgentBuilder {
    fn default() -> Self {
        PingAgentBuilder {
            role: PingRole::Initiator,
            pings: 1,
            peer: None,
            drain: true,
            size_bytes: 8,
            compute_cost: 0,
        }
    }
}

impl PingAgentBuilder {
    pub fn role(mut self, role: PingRole) -> Self {
        self.role = role;
        self
    }

    pub fn pings(mut self, n: u64) -> Self {
        self.pings = n;
        self
    }

    pub fn peer(mut self, peer: PortId) -> Self {
        self.peer = Some(peer);
        self
    }

    /// A responder that does not drain never retrieves anything.
    pub fn drain(mut self, drain: bool) -> Self {
        self.drain = drain;
        self
    }

    pub fn size_bytes(mut self, size: u32) -> Self {
        self.size_bytes = size;
        self
    }

    pub fn compute_cost(mut self, iterations: u32) -> Self {
        self.compute_cost = iterations;
        self
    }

    pub fn build(self, port: Arc<Port>, ins: Instrument) -> PingAgent {
        PingAgent {
            cfg: self,
            port,
            ins,
            sent: 0,
            pongs: 0,
            answered: 0,
            rtt_total: 0,
            in_flight: HashMap::new(),
            held: None,
        }
    }
}

struct Held {
    dst: PortId,
    seq: u64,
    task: Option<TaskId>,
}

/// Exchanges pings and pongs with a peer: the initiator sends one ping per
/// cycle and counts pongs; the responder turns each ping into a pong.
pub struct PingAgent {
    cfg: PingAgentBuilder,
    port: Arc<Port>,
    ins: Instrument,
    sent: u64,
    pongs: u64,
    answered: u64,
    rtt_total: u64,
    in_flight: HashMap<u64, (VTime, Option<TaskId>)>,
    held: Option<Held>,
}

impl PingAgent {
    pub fn builder() -> PingAgentBuilder {
        PingAgentBuilder::default()
    }

    fn initiator(&mut self, ctx: &TickCtx<'_>) -> Result<bool, Fault> {
        let now = ctx.now;
        let mut progress = false;
        if let Some(msg) = self.port.retrieve(now) {
            let Payload::Pong { seq } = msg.payload else {
                return Err(Fault::new(format!(
                    "{}: expected a pong, got {:?}",
                    ctx.name(),
                    msg.payload
                )));
            };
            let (sent_at, task) = self
                .in_flight
                .remove(&seq)
                .ok_or_else(|| Fault::new(format!("{}: pong {seq} matches no ping", ctx.name())))?;
            self.rtt_total += now.0 - sent_at.0;
            self.pongs += 1;
            if let Some(task) = task {
                self.ins.end_task(&task, now)?;
            }
            progress = true;
        }
        if self.sent < self.cfg.pings && self.port.can_send(now) {
            let peer = self
                .cfg
                .peer
                .ok_or_else(|| Fault::new(format!("{}: initiator has no peer", ctx.name())))?;
            let seq = self.sent;
            let task = if self.ins.enabled() {
                let id = self.ins.next_id();
                self.ins.start_task(
                    Task::new(id.clone(), "Ping", "Ping", self.ins.location().clone(), now)
                        .with_details(json!({ "seq": seq })),
                )?;
                Some(id)
            } else {
                None
            };
            let msg = self.port.message_for(
                peer,
                self.cfg.size_bytes,
                Payload::Ping { seq },
                task.clone(),
            );
            self.port.send(msg, now)?;
            self.in_flight.insert(seq, (now, task));
            self.sent += 1;
            progress = true;
        }
        Ok(progress)
    }

    fn responder(&mut self, ctx: &TickCtx<'_>) -> Result<bool, Fault> {
        if !self.cfg.drain {
            return Ok(false);
        }
        let now = ctx.now;
        let mut progress = false;
        if self.held.is_none() {
            if let Some(msg) = self.port.retrieve(now) {
                let Payload::Ping { seq } = msg.payload else {
                    return Err(Fault::new(format!(
                        "{}: expected a ping, got {:?}",
                        ctx.name(),
                        msg.payload
                    )));
                };
                let task = if self.ins.enabled() {
                    let id = self.ins.next_id();
                    self.ins.start_task(
                        Task::new(id.clone(), "Ping", "Pong", self.ins.location().clone(), now)
                            .with_parent(msg.task.clone()),
                    )?;
                    Some(id)
                } else {
                    None
                };
                self.held = Some(Held {
                    dst: msg.src,
                    seq,
                    task,
                });
                progress = true;
            }
        }
        if self.held.is_some() && self.port.can_send(now) {
            let held = self.held.take().unwrap();
            let msg = self.port.message_for(
                held.dst,
                self.cfg.size_bytes,
                Payload::Pong { seq: held.seq },
                held.task.clone(),
            );
            self.port.send(msg, now)?;
            if let Some(task) = held.task {
                self.ins.end_task(&task, now)?;
            }
            self.answered += 1;
            progress = true;
        }
        Ok(progress)
    }
}

impl Component for PingAgent {
    fn kind(&self) -> &'static str {
        "ping_agent"
    }

    fn tick(&mut self, ctx: &mut TickCtx<'_>) -> Result<bool, Fault> {
        burn(self.cfg.compute_cost);
        match self.cfg.role {
            PingRole::Initiator => self.initiator(ctx),
            PingRole::Responder => self.responder(ctx),
        }
    }

    fn ports(&self) -> Vec<Arc<Port>> {
        vec![self.port.clone()]
    }

    fn inspect(&self) -> Vec<(String, serde_json::Value)> {
        vec![
            ("role".into(), json!(self.cfg.role)),
            ("sent".into(), json!(self.sent)),
            ("pongs".into(), json!(self.pongs)),
            ("answered".into(), json!(self.answered)),
            ("drain".into(), json!(self.cfg.drain)),
        ]
    }

    fn initially_active(&self) -> bool {
        self.cfg.role == PingRole::Initiator && self.cfg.pings > 0
    }

    fn counters(&self) -> Vec<(&'static str, u64)> {
        match self.cfg.role {
            PingRole::Initiator => vec![
                ("pings_sent", self.sent),
                ("pongs_received", self.pongs),
                ("rtt_total_ticks", self.rtt_total),
            ],
            PingRole::Responder => vec![("pongs_sent", self.answered)],
        }
    }

    fn leftovers(&self) -> Vec<String> {
        let mut out = Vec::new();
        if !self.in_flight.is_empty() {
            out.push(format!("{} pings without a pong", self.in_flight.len()));
        }
        if self.held.is_some() {
            out.push("a pong waiting to be sent".into());
        }
        out
    }
}
