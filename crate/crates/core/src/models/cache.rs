use std::collections::VecDeque;
use std::sync::Arc;

use rustc_hash::FxHashMap;
use serde::{Deserialize, Serialize};
use serde_json::json;

use super::burn;
use crate::error::Fault;
use crate::messaging::{MsgId, Payload, Port, PortId};
use crate::ticking::{Component, TickCtx};
use crate::time::VTime;
use crate::trace::{Instrument, Task, TaskId};

const HIT_TIMER: u64 = 1;

/// Repeating outcome sequence: `hits` hits followed by `misses` misses.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HitPattern {
    pub hits: u64,
    pub misses: u64,
}

impl HitPattern {
    pub fn is_hit(&self, n: u64) -> bool {
        n % (self.hits + self.misses) < self.hits
    }
}

impl Default for HitPattern {
    fn default() -> Self {
        HitPattern { hits: 3, misses: 1 }
    }
}

#[derive(Clone, Debug)]
pub struct CacheStubBuilder {
    hit_latency_cycles: u64,
    pattern: HitPattern,
    downstream: Option<PortId>,
    response_bytes: u32,
    compute_cost: u32,
}

impl Default for CacheStubBuilder {
    fn default() -> Self {
        CacheStubBuilder {
            hit_latency_cycles: 2,
            pattern: HitPattern::default(),
            downstream: None,
            response_bytes: 64,
            compute_cost: 0,
        }
    }
}

impl CacheStubBuilder {
    pub fn hit_latency_cycles(mut self, c: u64) -> Self {
        self.hit_latency_cycles = c;
        self
    }

    pub fn pattern(mut self, p: HitPattern) -> Self {
        self.pattern = p;
        self
    }

    /// Where misses are forwarded.
    pub fn downstream(mut self, port: PortId) -> Self {
        self.downstream = Some(port);
        self
    }

    pub fn response_bytes(mut self, b: u32) -> Self {
        self.response_bytes = b;
        self
    }

    pub fn compute_cost(mut self, iterations: u32) -> Self {
        self.compute_cost = iterations;
        self
    }

    pub fn build(self, top: Arc<Port>, bottom: Arc<Port>, ins: Instrument) -> CacheStub {
        CacheStub {
            cfg: self,
            top,
            bottom,
            ins,
            seen: 0,
            hits: 0,
            misses: 0,
            responded: 0,
            ready: VecDeque::new(),
            returned: VecDeque::new(),
            missing: FxHashMap::default(),
        }
    }
}

struct Reply {
    ready: VTime,
    to: PortId,
    request: MsgId,
    addr: u64,
    task: Option<TaskId>,
}

/// A cache with a scripted hit pattern. Hits are answered after a fixed
/// latency; misses are forwarded downstream and answered when the
/// downstream response comes back.
pub struct CacheStub {
    cfg: CacheStubBuilder,
    top: Arc<Port>,
    bottom: Arc<Port>,
    ins: Instrument,
    seen: u64,
    hits: u64,
    misses: u64,
    responded: u64,
    /// Hit replies in ready-time order.
    ready: VecDeque<Reply>,
    /// Miss replies whose data has arrived.
    returned: VecDeque<Reply>,
    /// Forwarded request id to the reply owed upstream.
    missing: FxHashMap<MsgId, Reply>,
}

impl CacheStub {
    pub fn builder() -> CacheStubBuilder {
        CacheStubBuilder::default()
    }

    fn collect_downstream(&mut self, ctx: &TickCtx<'_>) -> Result<bool, Fault> {
        let Some(msg) = self.bottom.retrieve(ctx.now) else {
            return Ok(false);
        };
        let Payload::ReadDone { request, .. } = msg.payload else {
            return Err(Fault::new(format!(
                "{}: unexpected {:?}",
                ctx.name(),
                msg.payload
            )));
        };
        let mut reply = self.missing.remove(&request).ok_or_else(|| {
            Fault::new(format!(
                "{}: downstream answer to unknown request {request}",
                ctx.name()
            ))
        })?;
        reply.ready = ctx.now;
        self.returned.push_back(reply);
        Ok(true)
    }

    fn accept(&mut self, ctx: &TickCtx<'_>) -> Result<bool, Fault> {
        let now = ctx.now;
        let hit = self.cfg.pattern.is_hit(self.seen);
        if !hit && !self.bottom.can_send(now) {
            return Ok(false);
        }
        let Some(msg) = self.top.retrieve(now) else {
            return Ok(false);
        };
        let Payload::Read { addr } = msg.payload else {
            return Err(Fault::new(format!(
                "{}: unexpected {:?}",
                ctx.name(),
                msg.payload
            )));
        };
        self.seen += 1;
        let task = if self.ins.enabled() {
            let id = self.ins.next_id();
            self.ins.start_task(
                Task::new(
                    id.clone(),
                    "Cache",
                    "Read",
                    self.ins.location().clone(),
                    now,
                )
                .with_parent(msg.task.clone())
                .with_details(json!({ "addr": addr })),
            )?;
            self.ins
                .tag_task(&id, now, if hit { "cache hit" } else { "cache miss" })?;
            Some(id)
        } else {
            None
        };
        let mut reply = Reply {
            ready: now + ctx.period().cycles(self.cfg.hit_latency_cycles),
            to: msg.src,
            request: msg.id,
            addr,
            task,
        };
        if hit {
            self.hits += 1;
            if self.cfg.hit_latency_cycles > 1 {
                ctx.schedule_timer(reply.ready.saturating_sub(ctx.period().ticks()), HIT_TIMER)?;
            }
            self.ready.push_back(reply);
        } else {
            self.misses += 1;
            let down = self
                .cfg
                .downstream
                .ok_or_else(|| Fault::new(format!("{}: miss with no downstream", ctx.name())))?;
            let fwd = self.bottom.message_for(
                down,
                msg.size_bytes,
                Payload::Read { addr },
                reply.task.clone(),
            );
            let id = fwd.id;
            self.bottom.send(fwd, now)?;
            reply.ready = VTime(u64::MAX);
            self.missing.insert(id, reply);
        }
        Ok(true)
    }

    fn respond(&mut self, ctx: &TickCtx<'_>) -> Result<bool, Fault> {
        let now = ctx.now;
        let mut sent = false;
        loop {
            let from_hits = match (self.returned.front(), self.ready.front()) {
                (Some(_), _) => false,
                (None, Some(r)) if r.ready <= now => true,
                _ => break,
            };
            if !self.top.can_send(now) {
                break;
            }
            let reply = if from_hits {
                self.ready.pop_front()
            } else {
                self.returned.pop_front()
            }
            .unwrap();
            let msg = self.top.message_for(
                reply.to,
                self.cfg.response_bytes,
                Payload::ReadDone {
                    request: reply.request,
                    addr: reply.addr,
                },
                reply.task.clone(),
            );
            self.top.send(msg, now)?;
            if let Some(task) = reply.task {
                self.ins.end_task(&task, now)?;
            }
            self.responded += 1;
            sent = true;
        }
        Ok(sent)
    }
}

impl Component for CacheStub {
    fn kind(&self) -> &'static str {
        "cache_stub"
    }

    fn tick(&mut self, ctx: &mut TickCtx<'_>) -> Result<bool, Fault> {
        burn(self.cfg.compute_cost);
        let collected = self.collect_downstream(ctx)?;
        let accepted = self.accept(ctx)?;
        let responded = self.respond(ctx)?;
        Ok(collected || accepted || responded)
    }

    fn on_timer(&mut self, token: u64, ctx: &mut TickCtx<'_>) -> Result<(), Fault> {
        if token == HIT_TIMER {
            ctx.tick_later();
        }
        Ok(())
    }

    fn ports(&self) -> Vec<Arc<Port>> {
        vec![self.top.clone(), self.bottom.clone()]
    }

    fn inspect(&self) -> Vec<(String, serde_json::Value)> {
        vec![
            ("hits".into(), json!(self.hits)),
            ("misses".into(), json!(self.misses)),
            ("responded".into(), json!(self.responded)),
            ("pending_hits".into(), json!(self.ready.len())),
            ("pending_misses".into(), json!(self.missing.len())),
        ]
    }

    fn counters(&self) -> Vec<(&'static str, u64)> {
        vec![
            ("hits", self.hits),
            ("misses", self.misses),
            ("responses_sent", self.responded),
        ]
    }

    fn leftovers(&self) -> Vec<String> {
        let owed = self.ready.len() + self.returned.len() + self.missing.len();
        if owed > 0 {
            vec![format!("{owed} requests not answered")]
        } else {
            Vec::new()
        }
    }
}
