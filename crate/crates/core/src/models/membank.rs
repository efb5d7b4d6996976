use std::collections::VecDeque;
use std::sync::Arc;

use serde_json::json;

use super::burn;
use crate::error::Fault;
use crate::messaging::{MsgId, Payload, Port, PortId};
use crate::ticking::{Component, TickCtx};
use crate::time::VTime;
use crate::trace::{Instrument, Task, TaskId};

const SERVICE_TIMER: u64 = 1;

#[derive(Clone, Debug)]
pub struct MemBankBuilder {
    latency_cycles: u64,
    max_in_flight: usize,
    response_bytes: u32,
    fault_on_request: Option<u64>,
    compute_cost: u32,
}

impl Default for MemBankBuilder {
    fn default() -> Self {
        MemBankBuilder {
            latency_cycles: 10,
            max_in_flight: 4,
            response_bytes: 64,
            fault_on_request: None,
            compute_cost: 0,
        }
    }
}

impl MemBankBuilder {
    pub fn latency_cycles(mut self, l: u64) -> Self {
        self.latency_cycles = l;
        self
    }

    pub fn max_in_flight(mut self, w: usize) -> Self {
        self.max_in_flight = w;
        self
    }

    pub fn response_bytes(mut self, b: u32) -> Self {
        self.response_bytes = b;
        self
    }

    /// Fails the run when admitting the `n`-th request (1-based).
    pub fn fault_on_request(mut self, n: Option<u64>) -> Self {
        self.fault_on_request = n;
        self
    }

    pub fn compute_cost(mut self, iterations: u32) -> Self {
        self.compute_cost = iterations;
        self
    }

    pub fn build(self, port: Arc<Port>, ins: Instrument) -> MemBank {
        MemBank {
            cfg: self,
            port,
            ins,
            admitted: 0,
            served: 0,
            in_service: VecDeque::new(),
        }
    }
}

struct Slot {
    done: VTime,
    to: PortId,
    request: MsgId,
    addr: u64,
    task: Option<TaskId>,
}

/// A fixed-latency memory with `W` service slots. A request admitted at
/// cycle `t` is answered no earlier than `t + L`.
pub struct MemBank {
    cfg: MemBankBuilder,
    port: Arc<Port>,
    ins: Instrument,
    admitted: u64,
    served: u64,
    in_service: VecDeque<Slot>,
}

impl MemBank {
    pub fn builder() -> MemBankBuilder {
        MemBankBuilder::default()
    }
}

impl Component for MemBank {
    fn kind(&self) -> &'static str {
        "mem_bank"
    }

    fn tick(&mut self, ctx: &mut TickCtx<'_>) -> Result<bool, Fault> {
        burn(self.cfg.compute_cost);
        let now = ctx.now;
        let mut progress = false;
        while self.in_service.front().is_some_and(|s| s.done <= now) && self.port.can_send(now) {
            let slot = self.in_service.pop_front().unwrap();
            let msg = self.port.message_for(
                slot.to,
                self.cfg.response_bytes,
                Payload::ReadDone {
                    request: slot.request,
                    addr: slot.addr,
                },
                slot.task.clone(),
            );
            self.port.send(msg, now)?;
            if let Some(task) = slot.task {
                self.ins.end_task(&task, now)?;
            }
            self.served += 1;
            progress = true;
        }
        if self.in_service.len() < self.cfg.max_in_flight {
            if let Some(msg) = self.port.retrieve(now) {
                let Payload::Read { addr } = msg.payload else {
                    return Err(Fault::new(format!(
                        "{}: unexpected {:?}",
                        ctx.name(),
                        msg.payload
                    )));
                };
                self.admitted += 1;
                let task = if self.ins.enabled() {
                    let id = self.ins.next_id();
                    self.ins.start_task(
                        Task::new(
                            id.clone(),
                            "Memory",
                            "Read",
                            self.ins.location().clone(),
                            now,
                        )
                        .with_parent(msg.task.clone())
                        .with_details(json!({ "addr": addr })),
                    )?;
                    Some(id)
                } else {
                    None
                };
                if self.cfg.fault_on_request == Some(self.admitted) {
                    let mut fault = Fault::new(format!(
                        "{}: injected fault on request {} (addr {addr:#x})",
                        ctx.name(),
                        self.admitted
                    ));
                    if let Some(t) = task {
                        fault = fault.with_task(t);
                    }
                    return Err(fault);
                }
                let done = now + ctx.period().cycles(self.cfg.latency_cycles);
                if self.cfg.latency_cycles > 1 {
                    // Sleep through the service time; wake the cycle before.
                    ctx.schedule_timer(done.saturating_sub(ctx.period().ticks()), SERVICE_TIMER)?;
                }
                self.in_service.push_back(Slot {
                    done,
                    to: msg.src,
                    request: msg.id,
                    addr,
                    task,
                });
                progress = true;
            }
        }
        Ok(progress)
    }

    fn on_timer(&mut self, token: u64, ctx: &mut TickCtx<'_>) -> Result<(), Fault> {
        if token == SERVICE_TIMER {
            ctx.tick_later();
        }
        Ok(())
    }

    fn ports(&self) -> Vec<Arc<Port>> {
        vec![self.port.clone()]
    }

    fn inspect(&self) -> Vec<(String, serde_json::Value)> {
        vec![
            ("in_flight".into(), json!(self.in_service.len())),
            ("admitted".into(), json!(self.admitted)),
            ("served".into(), json!(self.served)),
            ("max_in_flight".into(), json!(self.cfg.max_in_flight)),
        ]
    }

    fn counters(&self) -> Vec<(&'static str, u64)> {
        vec![
            ("requests_admitted", self.admitted),
            ("responses_sent", self.served),
        ]
    }

    fn leftovers(&self) -> Vec<String> {
        if self.in_service.is_empty() {
            Vec::new()
        } else {
            vec![format!("{} requests in service", self.in_service.len())]
        }
    }
}
