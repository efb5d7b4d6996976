use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rustc_hash::FxHashMap;
use serde::{Deserialize, Serialize};
use serde_json::json;

use super::burn;
use crate::error::Fault;
use crate::messaging::{MsgId, Payload, Port, PortId};
use crate::ticking::{Component, TickCtx};
use crate::time::VTime;
use crate::trace::{Instrument, Task, TaskId};

const ISSUE_TIMER: u64 = 1;

/// When requests are issued. Gaps are counted in the generator's cycles
/// from the previous issue.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Pattern {
    /// `rate` requests per cycle on average, spaced as evenly as whole
    /// cycles allow. `rate` is in (0, 1].
    Uniform { rate: f64 },
    /// `length` back-to-back requests, then `gap` idle cycles.
    Burst { length: u64, gap: u64 },
    /// Each cycle is idle with probability `fraction`.
    IdleFraction { fraction: f64 },
}

impl Pattern {
    pub fn validate(&self) -> Result<(), String> {
        match *self {
            Pattern::Uniform { rate } if !(rate > 0.0 && rate <= 1.0) => {
                Err(format!("rate must be in (0, 1], got {rate}"))
            }
            Pattern::Burst { length: 0, .. } => Err("burst length must be positive".into()),
            Pattern::IdleFraction { fraction } if !(0.0..1.0).contains(&fraction) => {
                Err(format!("fraction must be in [0, 1), got {fraction}"))
            }
            _ => Ok(()),
        }
    }
}

#[derive(Clone, Debug)]
pub struct TrafficGeneratorBuilder {
    pattern: Pattern,
    total_requests: u64,
    destinations: Vec<PortId>,
    payload_bytes: u32,
    max_outstanding: usize,
    compute_cost: u32,
    seed: u64,
}

impl Default for TrafficGeneratorBuilder {
    fn default() -> Self {
        TrafficGeneratorBuilder {
            pattern: Pattern::Uniform { rate: 1.0 },
            total_requests: 0,
            destinations: Vec::new(),
            payload_bytes: 64,
            max_outstanding: 4,
            compute_cost: 0,
            seed: 0,
        }
    }
}

impl TrafficGeneratorBuilder {
    pub fn pattern(mut self, p: Pattern) -> Self {
        self.pattern = p;
        self
    }

    pub fn total_requests(mut self, n: u64) -> Self {
        self.total_requests = n;
        self
    }

    /// Requests go to these ports in turn.
    pub fn destinations(mut self, d: Vec<PortId>) -> Self {
        self.destinations = d;
        self
    }

    pub fn payload_bytes(mut self, b: u32) -> Self {
        self.payload_bytes = b;
        self
    }

    pub fn max_outstanding(mut self, n: usize) -> Self {
        self.max_outstanding = n;
        self
    }

    pub fn compute_cost(mut self, iterations: u32) -> Self {
        self.compute_cost = iterations;
        self
    }

    pub fn seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn build(self, port: Arc<Port>, ins: Instrument) -> TrafficGenerator {
        TrafficGenerator {
            rng: ChaCha8Rng::seed_from_u64(self.seed),
            cfg: self,
            port,
            ins,
            issued: 0,
            completed: 0,
            latency_total: 0,
            next_issue: VTime::ZERO,
            burst_pos: 0,
            credit: 0.0,
            dst_rr: 0,
            outstanding: FxHashMap::default(),
        }
    }
}

/// Issues read requests by pattern and matches the responses.
pub struct TrafficGenerator {
    cfg: TrafficGeneratorBuilder,
    port: Arc<Port>,
    ins: Instrument,
    rng: ChaCha8Rng,
    issued: u64,
    completed: u64,
    latency_total: u64,
    next_issue: VTime,
    burst_pos: u64,
    credit: f64,
    dst_rr: usize,
    outstanding: FxHashMap<MsgId, (VTime, Option<TaskId>)>,
}

impl TrafficGenerator {
    pub fn builder() -> TrafficGeneratorBuilder {
        TrafficGeneratorBuilder::default()
    }

    /// Cycles until the next request may be issued, at least 1.
    fn next_gap(&mut self) -> u64 {
        match self.cfg.pattern {
            Pattern::Uniform { rate } => {
                self.credit += 1.0 / rate;
                let gap = (self.credit.floor() as u64).max(1);
                self.credit -= gap as f64;
                gap
            }
            Pattern::Burst { length, gap } => {
                self.burst_pos += 1;
                if self.burst_pos == length {
                    self.burst_pos = 0;
                    1 + gap
                } else {
                    1
                }
            }
            Pattern::IdleFraction { fraction } => {
                let mut gap = 1;
                while self.rng.random_bool(fraction) {
                    gap += 1;
                }
                gap
            }
        }
    }

    fn collect(&mut self, ctx: &TickCtx<'_>) -> Result<bool, Fault> {
        let Some(msg) = self.port.retrieve(ctx.now) else {
            return Ok(false);
        };
        let Payload::ReadDone { request, .. } = msg.payload else {
            return Err(Fault::new(format!(
                "{}: unexpected {:?}",
                ctx.name(),
                msg.payload
            )));
        };
        let (sent_at, task) = self.outstanding.remove(&request).ok_or_else(|| {
            Fault::new(format!(
                "{}: response to unknown request {request}",
                ctx.name()
            ))
        })?;
        self.latency_total += ctx.now.0 - sent_at.0;
        self.completed += 1;
        if let Some(task) = task {
            self.ins.end_task(&task, ctx.now)?;
        }
        Ok(true)
    }

    fn issue(&mut self, ctx: &TickCtx<'_>) -> Result<bool, Fault> {
        let now = ctx.now;
        if self.issued >= self.cfg.total_requests
            || self.outstanding.len() >= self.cfg.max_outstanding
            || now < self.next_issue
            || !self.port.can_send(now)
        {
            return Ok(false);
        }
        let dst = self.cfg.destinations[self.dst_rr];
        self.dst_rr = (self.dst_rr + 1) % self.cfg.destinations.len();
        let addr = self.issued * 64;
        let task = if self.ins.enabled() {
            let id = self.ins.next_id();
            self.ins.start_task(
                Task::new(
                    id.clone(),
                    "Request",
                    "Read",
                    self.ins.location().clone(),
                    now,
                )
                .with_details(json!({ "addr": addr })),
            )?;
            Some(id)
        } else {
            None
        };
        let msg = self.port.message_for(
            dst,
            self.cfg.payload_bytes,
            Payload::Read { addr },
            task.clone(),
        );
        let id = msg.id;
        self.port.send(msg, now)?;
        self.outstanding.insert(id, (now, task));
        self.issued += 1;
        let gap = self.next_gap();
        self.next_issue = now + ctx.period().cycles(gap);
        if gap > 1 && self.issued < self.cfg.total_requests {
            // Wake one cycle early so the tick lands on the issue cycle.
            ctx.schedule_timer(
                self.next_issue.saturating_sub(ctx.period().ticks()),
                ISSUE_TIMER,
            )?;
        }
        Ok(true)
    }
}

impl Component for TrafficGenerator {
    fn kind(&self) -> &'static str {
        "traffic_generator"
    }

    fn tick(&mut self, ctx: &mut TickCtx<'_>) -> Result<bool, Fault> {
        burn(self.cfg.compute_cost);
        let collected = self.collect(ctx)?;
        let issued = self.issue(ctx)?;
        Ok(collected || issued)
    }

    fn on_timer(&mut self, token: u64, ctx: &mut TickCtx<'_>) -> Result<(), Fault> {
        if token == ISSUE_TIMER {
            ctx.tick_later();
        }
        Ok(())
    }

    fn ports(&self) -> Vec<Arc<Port>> {
        vec![self.port.clone()]
    }

    fn inspect(&self) -> Vec<(String, serde_json::Value)> {
        vec![
            ("issued".into(), json!(self.issued)),
            ("completed".into(), json!(self.completed)),
            ("outstanding".into(), json!(self.outstanding.len())),
            ("total_requests".into(), json!(self.cfg.total_requests)),
            ("next_issue_ticks".into(), json!(self.next_issue.0)),
        ]
    }

    fn initially_active(&self) -> bool {
        self.cfg.total_requests > 0
    }

    fn counters(&self) -> Vec<(&'static str, u64)> {
        vec![
            ("requests_issued", self.issued),
            ("responses_received", self.completed),
            ("latency_total_ticks", self.latency_total),
        ]
    }

    fn leftovers(&self) -> Vec<String> {
        let mut out = Vec::new();
        if !self.outstanding.is_empty() {
            out.push(format!(
                "{} requests without a response",
                self.outstanding.len()
            ));
        }
        if self.issued < self.cfg.total_requests {
            out.push(format!(
                "{} of {} requests issued",
                self.issued, self.cfg.total_requests
            ));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gaps(p: Pattern, n: usize) -> Vec<u64> {
        let port = Arc::new(Port::new(PortId(0), "G.Port", 4, 4));
        let mut g = TrafficGenerator::builder()
            .pattern(p)
            .seed(7)
            .build(port, Instrument::disabled("G"));
        (0..n).map(|_| g.next_gap()).collect()
    }

    #[test]
    fn uniform_rate_spaces_evenly() {
        assert_eq!(gaps(Pattern::Uniform { rate: 1.0 }, 4), [1, 1, 1, 1]);
        assert_eq!(gaps(Pattern::Uniform { rate: 0.5 }, 3), [2, 2, 2]);
        let g = gaps(Pattern::Uniform { rate: 0.4 }, 10);
        assert_eq!(g.iter().sum::<u64>(), 25);
    }

    #[test]
    fn burst_inserts_gap_after_length() {
        assert_eq!(
            gaps(Pattern::Burst { length: 3, gap: 5 }, 6),
            [1, 1, 6, 1, 1, 6]
        );
    }

    #[test]
    fn idle_fraction_mean_gap() {
        let g = gaps(Pattern::IdleFraction { fraction: 0.9 }, 20_000);
        let mean = g.iter().sum::<u64>() as f64 / g.len() as f64;
        assert!((mean - 10.0).abs() < 0.5, "mean gap {mean}");
        assert_eq!(g, gaps(Pattern::IdleFraction { fraction: 0.9 }, 20_000));
    }

    #[test]
    fn invalid_patterns_are_rejected() {
        assert!(Pattern::Uniform { rate: 0.0 }.validate().is_err());
        assert!(Pattern::IdleFraction { fraction: 1.0 }.validate().is_err());
        assert!(Pattern::Burst { length: 0, gap: 1 }.validate().is_err());
    }
}
