use std::collections::VecDeque;
use std::sync::atomic::{AtomicU64, AtomicUsize, Ordering};
use std::sync::Arc;

use serde_json::json;

use super::{Message, Port, PortId};
use crate::error::{Fault, SimError};
use crate::ticking::{Component, TickCtx, TickHandle};
use crate::time::VTime;

/// The part of a connection that ports and observers can see.
pub struct Link {
    name: Arc<str>,
    handle: Arc<TickHandle>,
    members: Vec<PortId>,
    in_flight: AtomicUsize,
    delivered: AtomicU64,
}

impl Link {
    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn handle(&self) -> &Arc<TickHandle> {
        &self.handle
    }

    pub fn serves(&self, port: PortId) -> bool {
        self.members.binary_search(&port).is_ok()
    }

    /// Messages picked up but not yet deposited.
    pub fn in_flight(&self) -> usize {
        self.in_flight.load(Ordering::Relaxed)
    }

    pub fn delivered(&self) -> u64 {
        self.delivered.load(Ordering::Relaxed)
    }
}

struct Flight {
    msg: Message,
    deliver: VTime,
    dst: usize,
}

/// A round-robin arbitrated crossbar over two or more ports.
///
/// Each tick first deposits every in-flight message whose delivery time has
/// come, then visits the sources once in ring order starting at the
/// round-robin pointer and moves at most one visible head per source into
/// flight. A message is only picked up if a slot at its destination is
/// still free after counting everything already heading there, so
/// deposits never fail and back-pressure reaches the sender's outgoing
/// buffer.
pub struct Connection {
    link: Arc<Link>,
    ports: Vec<Arc<Port>>,
    /// Position in `ports` by port id.
    index: Vec<Option<usize>>,
    latency_ticks: u64,
    rr: usize,
    in_flight: VecDeque<Flight>,
    reserved: Vec<usize>,
}

impl Connection {
    /// Plugs `ports` into a new connection driven by `handle`.
    pub fn plug(
        name: &str,
        handle: Arc<TickHandle>,
        latency_cycles: u64,
        ports: Vec<Arc<Port>>,
    ) -> Result<Connection, SimError> {
        let mut members: Vec<PortId> = ports.iter().map(|p| p.id()).collect();
        members.sort();
        if let Some(w) = members.windows(2).find(|w| w[0] == w[1]) {
            let dup = ports.iter().find(|p| p.id() == w[0]).unwrap();
            return Err(SimError::DoublePlug(dup.name().to_string()));
        }
        let latency_ticks = handle.period().cycles(latency_cycles);
        let link = Arc::new(Link {
            name: Arc::from(name),
            handle,
            members,
            in_flight: AtomicUsize::new(0),
            delivered: AtomicU64::new(0),
        });
        let max_id = ports.iter().map(|p| p.id().0 as usize).max().unwrap_or(0);
        let mut index = vec![None; max_id + 1];
        for (i, p) in ports.iter().enumerate() {
            p.plug(link.clone())?;
            index[p.id().0 as usize] = Some(i);
        }
        Ok(Connection {
            link,
            reserved: vec![0; ports.len()],
            ports,
            index,
            latency_ticks,
            rr: 0,
            in_flight: VecDeque::new(),
        })
    }

    pub fn link(&self) -> &Arc<Link> {
        &self.link
    }

    fn slot_of(&self, port: PortId) -> Option<usize> {
        self.index.get(port.0 as usize).copied().flatten()
    }

    fn deposit_due(&mut self, now: VTime) -> bool {
        let mut moved = false;
        while self.in_flight.front().is_some_and(|f| f.deliver <= now) {
            let f = self.in_flight.pop_front().unwrap();
            match self.ports[f.dst].deposit(f.msg, now) {
                Ok(()) => {
                    self.reserved[f.dst] -= 1;
                    self.link.delivered.fetch_add(1, Ordering::Relaxed);
                    moved = true;
                }
                Err(msg) => {
                    // Unreachable with reservations in place; keep the
                    // message rather than lose it.
                    self.in_flight.push_front(Flight { msg, ..f });
                    break;
                }
            }
        }
        moved
    }

    fn arbitrate(&mut self, now: VTime) -> bool {
        let n = self.ports.len();
        let mut picked = false;
        for k in 0..n {
            let src = (self.rr + k) % n;
            let Some(dst_id) = self.ports[src].head_dst(now) else {
                continue;
            };
            let Some(dst) = self.slot_of(dst_id) else {
                continue;
            };
            let dst_in = self.ports[dst].incoming();
            if dst_in.occupancy(now) + self.reserved[dst] >= dst_in.capacity() {
                continue;
            }
            let msg = self.ports[src]
                .pick_up(now)
                .expect("visible head vanished during arbitration");
            self.reserved[dst] += 1;
            self.in_flight.push_back(Flight {
                msg,
                deliver: now + self.latency_ticks,
                dst,
            });
            picked = true;
        }
        if picked {
            self.rr = (self.rr + 1) % n;
        }
        picked
    }
}

impl Component for Connection {
    fn kind(&self) -> &'static str {
        "connection"
    }

    fn tick(&mut self, ctx: &mut TickCtx<'_>) -> Result<bool, Fault> {
        let deposited = self.deposit_due(ctx.now);
        let picked = self.arbitrate(ctx.now);
        self.link
            .in_flight
            .store(self.in_flight.len(), Ordering::Relaxed);
        Ok(deposited || picked || !self.in_flight.is_empty())
    }

    fn inspect(&self) -> Vec<(String, serde_json::Value)> {
        vec![
            ("in_flight".into(), json!(self.in_flight.len())),
            ("rr_pointer".into(), json!(self.rr)),
            ("delivered".into(), json!(self.link.delivered())),
            (
                "ports".into(),
                json!(self.ports.iter().map(|p| p.name()).collect::<Vec<_>>()),
            ),
        ]
    }

    fn counters(&self) -> Vec<(&'static str, u64)> {
        vec![("delivered", self.link.delivered())]
    }

    fn leftovers(&self) -> Vec<String> {
        self.in_flight
            .iter()
            .map(|f| {
                format!(
                    "message {} in flight to {}",
                    f.msg.id,
                    self.ports[f.dst].name()
                )
            })
            .collect()
    }
}
