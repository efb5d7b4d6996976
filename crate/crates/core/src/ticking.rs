//! Smart Ticking.
//!
//! A [`Component`] only implements `tick`, which does at most one cycle of
//! work and reports whether it made progress. The framework decides when to
//! call it:
//!
//! 1. a message arriving at one of the component's ports schedules a tick in
//!    the next cycle;
//! 2. an outgoing buffer going from full to not-full does the same;
//! 3. a tick that made progress schedules the next one; a tick that did not
//!    puts the component to sleep;
//! 4. an element never has more than one tick pending.
//!
//! [`TickMode::Always`] ticks every cycle regardless and exists to measure
//! what the skipping buys. In that mode the smart bookkeeping still runs in
//! the background, which is what decides when the simulation is over.

use std::sync::atomic::{AtomicI32, AtomicU64, Ordering};
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};

use crate::error::{Fault, SimError};
use crate::event::{Event, EventCtx, EventKind, Handler, HandlerId, Scheduler};
use crate::messaging::Port;
use crate::time::{Period, VTime};
use crate::trace::{Instrument, Task, TaskId};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TickMode {
    #[default]
    Smart,
    Always,
}

#[derive(Default)]
struct TickState {
    /// Time of the tick that smart mode would run next.
    pending: Option<VTime>,
    /// A wake arrived at the pending tick's own timestamp before it ran.
    rearm: bool,
    forced: bool,
    /// Next queued tick of the always-mode chain.
    chain: Option<VTime>,
}

#[derive(Default)]
pub struct TickStats {
    pub ticks: AtomicU64,
    pub wasted: AtomicU64,
    /// Always-mode ticks that smart mode would have skipped but that still
    /// reported progress. Any non-zero value means a model broke the tick
    /// contract.
    pub stray_progress: AtomicU64,
    pub rule4_violations: AtomicU64,
    queued: AtomicI32,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct TickCounts {
    pub ticks: u64,
    pub wasted: u64,
    pub stray_progress: u64,
    pub rule4_violations: u64,
}

impl std::ops::AddAssign for TickCounts {
    fn add_assign(&mut self, o: TickCounts) {
        self.ticks += o.ticks;
        self.wasted += o.wasted;
        self.stray_progress += o.stray_progress;
        self.rule4_violations += o.rule4_violations;
    }
}

/// The wake-up end of a ticking element. Shared with the ports the element
/// owns and the connections that serve them.
pub struct TickHandle {
    id: HandlerId,
    name: Arc<str>,
    period: Period,
    mode: TickMode,
    sched: Arc<Scheduler>,
    state: Mutex<TickState>,
    stats: TickStats,
}

impl TickHandle {
    pub fn new(
        id: HandlerId,
        name: impl Into<Arc<str>>,
        period: Period,
        mode: TickMode,
        sched: Arc<Scheduler>,
    ) -> TickHandle {
        TickHandle {
            id,
            name: name.into(),
            period,
            mode,
            sched,
            state: Mutex::new(TickState::default()),
            stats: TickStats::default(),
        }
    }

    pub fn id(&self) -> HandlerId {
        self.id
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn period(&self) -> Period {
        self.period
    }

    pub fn mode(&self) -> TickMode {
        self.mode
    }

    /// The smart-mode pending tick, if any.
    pub fn pending(&self) -> Option<VTime> {
        self.state.lock().unwrap().pending
    }

    pub fn counts(&self) -> TickCounts {
        TickCounts {
            ticks: self.stats.ticks.load(Ordering::Relaxed),
            wasted: self.stats.wasted.load(Ordering::Relaxed),
            stray_progress: self.stats.stray_progress.load(Ordering::Relaxed),
            rule4_violations: self.stats.rule4_violations.load(Ordering::Relaxed),
        }
    }

    /// Ensures a tick at the next cycle boundary after `now`.
    pub fn tick_later(&self, now: VTime) {
        let mut st = self.state.lock().unwrap();
        self.arm(&mut st, now, false);
    }

    /// Monitor-initiated tick. Never creates a second pending tick; if one
    /// is already pending it is marked forced instead.
    pub fn force(&self, now: VTime) {
        let mut st = self.state.lock().unwrap();
        st.forced = true;
        self.arm(&mut st, now, true);
    }

    fn arm(&self, st: &mut TickState, now: VTime, forced: bool) {
        let target = self.period.next_after(now);
        match st.pending {
            Some(p) if p >= target => {}
            Some(p) if p == now => st.rearm = true,
            Some(p) => {
                // A pending tick strictly between now and the next boundary
                // cannot exist: pending ticks sit on boundaries and never
                // precede the current time.
                unreachable!("{}: pending tick at {p} while arming at {now}", self.name)
            }
            None => {
                st.pending = Some(target);
                self.sched.retain();
                match self.mode {
                    TickMode::Smart => self.push(target, forced),
                    TickMode::Always if st.chain.is_none() => {
                        st.chain = Some(target);
                        self.push(target, false);
                    }
                    TickMode::Always => {}
                }
            }
        }
    }

    fn push(&self, at: VTime, forced: bool) {
        if self.stats.queued.fetch_add(1, Ordering::AcqRel) >= 1 {
            self.stats.rule4_violations.fetch_add(1, Ordering::Relaxed);
        }
        let mut ev = Event::new(at, self.id, EventKind::Tick);
        ev.forced = forced;
        self.sched
            .schedule(ev)
            .expect("tick targets are always in the future");
    }

    /// Starts always-mode ticking at the first boundary after `now`.
    pub(crate) fn start_chain(&self, now: VTime) {
        let mut st = self.state.lock().unwrap();
        if self.mode == TickMode::Always && st.chain.is_none() {
            let at = self.period.next_after(now);
            st.chain = Some(at);
            self.push(at, false);
        }
    }

    /// Called as a tick event begins. Returns (smart, forced): whether smart
    /// mode would have run this tick, and whether it was forced.
    fn begin(&self, ev: &Event) -> (bool, bool) {
        let mut st = self.state.lock().unwrap();
        let now = ev.time;
        let was_chain = st.chain == Some(now);
        if was_chain || self.mode == TickMode::Smart {
            self.stats.queued.fetch_sub(1, Ordering::AcqRel);
        }
        if was_chain {
            let next = now + self.period.ticks();
            st.chain = Some(next);
            self.push(next, false);
        }
        if st.pending == Some(now) {
            st.pending = None;
            self.sched.release();
            let forced = std::mem::take(&mut st.forced) || ev.forced;
            (true, forced)
        } else {
            (false, false)
        }
    }

    fn end(&self, now: VTime, smart: bool, progressed: bool) {
        self.stats.ticks.fetch_add(1, Ordering::Relaxed);
        if !progressed {
            self.stats.wasted.fetch_add(1, Ordering::Relaxed);
        }
        let mut st = self.state.lock().unwrap();
        if smart {
            let rearm = std::mem::take(&mut st.rearm);
            if progressed || rearm {
                self.arm(&mut st, now, false);
            }
        } else if progressed {
            if self.mode == TickMode::Always {
                self.stats.stray_progress.fetch_add(1, Ordering::Relaxed);
            }
            self.arm(&mut st, now, false);
        }
    }
}

/// What a component sees during a tick or timer callback.
pub struct TickCtx<'a> {
    pub now: VTime,
    handle: &'a TickHandle,
    sched: &'a Scheduler,
    forced_task: Option<TaskId>,
}

impl<'a> TickCtx<'a> {
    pub fn period(&self) -> Period {
        self.handle.period
    }

    /// Index of the current cycle of this component's clock.
    pub fn cycle(&self) -> u64 {
        self.now.0 / self.handle.period.ticks()
    }

    pub fn name(&self) -> &str {
        &self.handle.name
    }

    /// Requests a tick in the next cycle.
    pub fn tick_later(&self) {
        self.handle.tick_later(self.now);
    }

    /// Schedules [`Component::on_timer`] with `token` at `at`.
    pub fn schedule_timer(&self, at: VTime, token: u64) -> Result<(), SimError> {
        self.sched
            .schedule(Event::new(at, self.handle.id, EventKind::Custom(token)))
            .map(|_| ())
    }

    /// Task recording this tick, when it was forced from the monitor.
    pub fn forced_task(&self) -> Option<&TaskId> {
        self.forced_task.as_ref()
    }
}

/// A cycle-based model.
pub trait Component: Send {
    fn kind(&self) -> &'static str;

    /// One cycle of work. Must return false only if it changed nothing.
    fn tick(&mut self, ctx: &mut TickCtx<'_>) -> Result<bool, Fault>;

    fn on_timer(&mut self, _token: u64, _ctx: &mut TickCtx<'_>) -> Result<(), Fault> {
        Ok(())
    }

    fn ports(&self) -> Vec<Arc<Port>> {
        Vec::new()
    }

    fn inspect(&self) -> Vec<(String, serde_json::Value)> {
        Vec::new()
    }

    /// Whether the component has work before any message arrives.
    fn initially_active(&self) -> bool {
        false
    }

    /// Deterministic counters for the run summary.
    fn counters(&self) -> Vec<(&'static str, u64)> {
        Vec::new()
    }

    /// Problems that remain once the run is over, such as unanswered
    /// requests.
    fn leftovers(&self) -> Vec<String> {
        Vec::new()
    }
}

/// Adapts a [`Component`] to the event engine.
pub struct TickingElement {
    name: String,
    component: Box<dyn Component>,
    handle: Arc<TickHandle>,
    forced: Instrument,
}

impl TickingElement {
    pub fn new(
        component: Box<dyn Component>,
        handle: Arc<TickHandle>,
        forced: Instrument,
    ) -> TickingElement {
        TickingElement {
            name: handle.name.to_string(),
            component,
            handle,
            forced,
        }
    }

    pub fn component(&self) -> &dyn Component {
        self.component.as_ref()
    }

    fn on_tick(&mut self, ev: &Event, ctx: &EventCtx<'_>) -> Result<(), Fault> {
        let (smart, forced) = self.handle.begin(ev);
        let now = ev.time;
        let forced_task = if forced && self.forced.enabled() {
            let id = self.forced.next_id();
            self.forced.start_task(Task::new(
                id.clone(),
                "Tick",
                "Forced Tick",
                self.forced.location().clone(),
                now,
            ))?;
            self.forced.tag_task(&id, now, "forced")?;
            Some(id)
        } else {
            None
        };
        let mut tctx = TickCtx {
            now,
            handle: &self.handle,
            sched: ctx.scheduler(),
            forced_task: forced_task.clone(),
        };
        let progressed = self.component.tick(&mut tctx)?;
        if let Some(id) = forced_task {
            self.forced.end_task(&id, now)?;
        }
        self.handle.end(now, smart, progressed);
        Ok(())
    }
}

impl Handler for TickingElement {
    fn name(&self) -> &str {
        &self.name
    }

    fn kind(&self) -> &str {
        self.component.kind()
    }

    fn handle(&mut self, ev: &Event, ctx: &EventCtx<'_>) -> Result<(), Fault> {
        match ev.kind {
            EventKind::Tick => self.on_tick(ev, ctx),
            EventKind::Custom(token) => {
                let mut tctx = TickCtx {
                    now: ev.time,
                    handle: &self.handle,
                    sched: ctx.scheduler(),
                    forced_task: None,
                };
                self.component.on_timer(token, &mut tctx)
            }
            EventKind::Sampler => Ok(()),
        }
    }

    fn inspect(&self) -> Vec<(String, serde_json::Value)> {
        self.component.inspect()
    }

    fn counters(&self) -> Vec<(&'static str, u64)> {
        self.component.counters()
    }

    fn leftovers(&self) -> Vec<String> {
        self.component.leftovers()
    }
}

/// Registers `component` with its handle: ties its ports to the handle and
/// kicks off initial ticks.
pub(crate) fn activate(component: &dyn Component, handle: &Arc<TickHandle>) {
    for port in component.ports() {
        port.set_owner(handle.clone());
    }
    handle.start_chain(VTime::ZERO);
    if component.initially_active() {
        handle.tick_later(VTime::ZERO);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::event::Engine;
    use crate::time::{Freq, TimeBase};

    /// Progresses while it has budget; records the cycles it ran in.
    struct Busy {
        budget: u32,
        ran: Arc<Mutex<Vec<u64>>>,
        active: bool,
    }

    impl Component for Busy {
        fn kind(&self) -> &'static str {
            "busy"
        }

        fn tick(&mut self, ctx: &mut TickCtx<'_>) -> Result<bool, Fault> {
            self.ran.lock().unwrap().push(ctx.cycle());
            if self.budget > 0 {
                self.budget -= 1;
                Ok(true)
            } else {
                Ok(false)
            }
        }

        fn initially_active(&self) -> bool {
            self.active
        }
    }

    fn element(
        engine: &mut Engine,
        mode: TickMode,
        budget: u32,
        active: bool,
    ) -> (Arc<TickHandle>, Arc<Mutex<Vec<u64>>>) {
        let ran = Arc::new(Mutex::new(Vec::new()));
        let id = engine.reserve_handler();
        let period = engine.scheduler().base().period(Freq::ghz(1)).unwrap();
        let handle = Arc::new(TickHandle::new(
            id,
            "E",
            period,
            mode,
            engine.scheduler().clone(),
        ));
        let comp = Busy {
            budget,
            ran: ran.clone(),
            active,
        };
        activate(&comp, &handle);
        engine.install(
            id,
            Box::new(TickingElement::new(
                Box::new(comp),
                handle.clone(),
                Instrument::disabled("E"),
            )),
        );
        (handle, ran)
    }

    fn tick_events(engine: &Engine) -> Vec<u64> {
        engine
            .scheduler()
            .snapshot()
            .iter()
            .filter(|e| e.kind == EventKind::Tick)
            .map(|e| e.time.0)
            .collect()
    }

    #[test]
    fn repeated_wakes_in_one_cycle_queue_one_tick() {
        let mut e = Engine::new(TimeBase::default());
        let (h, _) = element(&mut e, TickMode::Smart, 0, false);
        h.tick_later(VTime(3000));
        h.tick_later(VTime(3000));
        h.tick_later(VTime(3500));
        assert_eq!(tick_events(&e), vec![4000]);
        assert_eq!(h.pending(), Some(VTime(4000)));
    }

    #[test]
    fn progress_rearms_and_idleness_sleeps() {
        let mut e = Engine::new(TimeBase::default());
        let (h, ran) = element(&mut e, TickMode::Smart, 2, true);
        assert_eq!(e.run().unwrap(), VTime(3000));
        assert_eq!(*ran.lock().unwrap(), vec![1, 2, 3]);
        assert_eq!(h.pending(), None);
        let c = h.counts();
        assert_eq!((c.ticks, c.wasted, c.rule4_violations), (3, 1, 0));
    }

    #[test]
    fn always_mode_ticks_every_cycle_but_ends_with_smart_state() {
        let mut e = Engine::new(TimeBase::default());
        let (h, ran) = element(&mut e, TickMode::Always, 2, true);
        assert_eq!(e.run().unwrap(), VTime(3000));
        assert_eq!(*ran.lock().unwrap(), vec![1, 2, 3]);
        assert_eq!(h.counts().stray_progress, 0);
    }

    #[test]
    fn always_mode_runs_ticks_smart_mode_skips() {
        let mut e = Engine::new(TimeBase::default());
        let (_, quiet_ran) = element(&mut e, TickMode::Always, 0, false);
        let (_, busy_ran) = element(&mut e, TickMode::Smart, 4, true);
        assert_eq!(e.run().unwrap(), VTime(5000));
        assert_eq!(busy_ran.lock().unwrap().len(), 5);
        // The always element ran at every cycle up to the end even though it
        // never had anything to do.
        assert_eq!(*quiet_ran.lock().unwrap(), vec![1, 2, 3, 4, 5]);
    }

    #[test]
    fn wake_during_own_timestamp_before_tick_rearms() {
        let mut e = Engine::new(TimeBase::default());
        let (h, ran) = element(&mut e, TickMode::Smart, 0, false);
        h.tick_later(VTime::ZERO);
        // Simulate another handler waking this element at 1000 before its
        // tick at 1000 runs.
        e.scheduler().set_now(VTime(1000));
        h.tick_later(VTime(1000));
        assert_eq!(tick_events(&e), vec![1000]);
        e.run().unwrap();
        assert_eq!(*ran.lock().unwrap(), vec![1, 2]);
    }

    #[test]
    fn forced_tick_on_pending_element_adds_nothing() {
        let mut e = Engine::new(TimeBase::default());
        let (h, _) = element(&mut e, TickMode::Smart, 0, false);
        h.tick_later(VTime::ZERO);
        h.force(VTime::ZERO);
        assert_eq!(tick_events(&e), vec![1000]);
    }

    #[test]
    fn forced_tick_on_sleeping_element_runs_once() {
        let mut e = Engine::new(TimeBase::default());
        let (h, ran) = element(&mut e, TickMode::Smart, 0, false);
        h.force(VTime::ZERO);
        e.run().unwrap();
        assert_eq!(*ran.lock().unwrap(), vec![1]);
        assert_eq!(h.pending(), None);
    }
}
