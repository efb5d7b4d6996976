//! The serial event-driven engine.
//!
//! Events pop in strict `(time, handler, seq)` order. `seq` is assigned at
//! schedule time from a shared counter, so the order is total and a serial
//! run is fully reproducible.

use std::cmp::{Ordering as CmpOrdering, Reverse};
use std::collections::BinaryHeap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::atomic::{AtomicBool, AtomicI64, AtomicU64, AtomicU8, Ordering};
use std::sync::{Arc, Condvar, Mutex};
use std::time::{Duration, Instant};

use crate::error::{Fault, FaultReport, SimError};
use crate::time::{TimeBase, VTime};
use crate::trace::{Frame, TaskRegistry};

/// Handler ids at or above this value belong to exclusive handlers. They sort
/// after every ordinary handler at the same time, so they always observe a
/// timestamp after all of its ordinary events have completed.
pub const EXCLUSIVE_BASE: u32 = 1 << 31;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct HandlerId(pub u32);

impl HandlerId {
    pub fn is_exclusive(self) -> bool {
        self.0 >= EXCLUSIVE_BASE
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum EventKind {
    Tick,
    Sampler,
    Custom(u64),
}

#[derive(Clone, Copy, Debug)]
pub struct Event {
    pub time: VTime,
    pub handler: HandlerId,
    pub seq: u64,
    pub kind: EventKind,
    pub forced: bool,
}

impl Event {
    pub fn new(time: VTime, handler: HandlerId, kind: EventKind) -> Event {
        Event {
            time,
            handler,
            seq: 0,
            kind,
            forced: false,
        }
    }

    fn key(&self) -> (u64, u32, u64) {
        (self.time.0, self.handler.0, self.seq)
    }

    /// Custom events keep the engine alive on their own. Tick liveness is
    /// accounted by the ticking layer; sampler events never keep a run alive.
    pub(crate) fn counted(&self) -> bool {
        matches!(self.kind, EventKind::Custom(_))
    }
}

impl PartialEq for Event {
    fn eq(&self, other: &Self) -> bool {
        self.key() == other.key()
    }
}

impl Eq for Event {}

impl PartialOrd for Event {
    fn partial_cmp(&self, other: &Self) -> Option<CmpOrdering> {
        Some(self.cmp(other))
    }
}

impl Ord for Event {
    fn cmp(&self, other: &Self) -> CmpOrdering {
        self.key().cmp(&other.key())
    }
}

#[derive(Default)]
pub struct EventQueue {
    heap: BinaryHeap<Reverse<Event>>,
}

impl EventQueue {
    pub fn push(&mut self, event: Event) {
        self.heap.push(Reverse(event));
    }

    pub fn pop(&mut self) -> Option<Event> {
        self.heap.pop().map(|Reverse(e)| e)
    }

    pub fn peek_time(&self) -> Option<VTime> {
        self.heap.peek().map(|Reverse(e)| e.time)
    }

    /// Moves every event at exactly `time` into `out`, in pop order.
    pub fn drain_at(&mut self, time: VTime, out: &mut Vec<Event>) {
        while let Some(Reverse(e)) = self.heap.peek() {
            if e.time != time {
                break;
            }
            out.push(self.heap.pop().unwrap().0);
        }
    }

    pub fn len(&self) -> usize {
        self.heap.len()
    }

    pub fn is_empty(&self) -> bool {
        self.heap.is_empty()
    }

    pub fn clear(&mut self) {
        self.heap.clear();
    }
}

/// The shared scheduling surface. Safe to call from any handler on any
/// worker thread.
pub struct Scheduler {
    queue: Mutex<EventQueue>,
    seq: AtomicU64,
    now: AtomicU64,
    live: AtomicI64,
    base: TimeBase,
}

impl Scheduler {
    pub fn new(base: TimeBase) -> Scheduler {
        Scheduler {
            queue: Mutex::new(EventQueue::default()),
            seq: AtomicU64::new(0),
            now: AtomicU64::new(0),
            live: AtomicI64::new(0),
            base,
        }
    }

    pub fn base(&self) -> TimeBase {
        self.base
    }

    pub fn now(&self) -> VTime {
        VTime(self.now.load(Ordering::Acquire))
    }

    pub(crate) fn set_now(&self, t: VTime) {
        self.now.store(t.0, Ordering::Release);
    }

    /// Enqueues `event` with a fresh sequence number, which is returned.
    pub fn schedule(&self, mut event: Event) -> Result<u64, SimError> {
        let now = self.now();
        if event.time < now {
            return Err(SimError::PastEvent {
                at: event.time.0,
                now: now.0,
            });
        }
        event.seq = self.seq.fetch_add(1, Ordering::Relaxed);
        if event.counted() {
            self.retain();
        }
        self.queue.lock().unwrap().push(event);
        Ok(event.seq)
    }

    pub(crate) fn retain(&self) {
        self.live.fetch_add(1, Ordering::AcqRel);
    }

    pub(crate) fn release(&self) {
        self.live.fetch_sub(1, Ordering::AcqRel);
    }

    /// Number of outstanding reasons for the run to continue.
    pub fn live(&self) -> i64 {
        self.live.load(Ordering::Acquire)
    }

    pub fn queued(&self) -> usize {
        self.queue.lock().unwrap().len()
    }

    /// Every queued event in pop order. Intended for inspection in tests and
    /// tooling; it copies the whole queue.
    pub fn snapshot(&self) -> Vec<Event> {
        let q = self.queue.lock().unwrap();
        let mut events: Vec<Event> = q.heap.iter().map(|Reverse(e)| *e).collect();
        events.sort();
        events
    }

    pub(crate) fn pop(&self) -> Option<Event> {
        self.queue.lock().unwrap().pop()
    }

    pub(crate) fn drain_next_window(&self, out: &mut Vec<Event>) -> Option<VTime> {
        let mut q = self.queue.lock().unwrap();
        let t = q.peek_time()?;
        q.drain_at(t, out);
        Some(t)
    }

    /// Drains events at exactly `t`; returns how many were moved.
    pub(crate) fn drain_next_window_at(&self, t: VTime, out: &mut Vec<Event>) -> usize {
        let before = out.len();
        self.queue.lock().unwrap().drain_at(t, out);
        out.len() - before
    }

    pub(crate) fn peek_time(&self) -> Option<VTime> {
        self.queue.lock().unwrap().peek_time()
    }

    pub(crate) fn clear(&self) {
        self.queue.lock().unwrap().clear();
    }
}

/// What a handler sees while it runs.
pub struct EventCtx<'a> {
    pub now: VTime,
    pub handler: HandlerId,
    sched: &'a Scheduler,
}

impl<'a> EventCtx<'a> {
    pub fn new(now: VTime, handler: HandlerId, sched: &'a Scheduler) -> EventCtx<'a> {
        EventCtx {
            now,
            handler,
            sched,
        }
    }

    pub fn scheduler(&self) -> &'a Scheduler {
        self.sched
    }

    /// Schedules an event for this same handler.
    pub fn schedule(&self, time: VTime, kind: EventKind) -> Result<u64, SimError> {
        self.sched.schedule(Event::new(time, self.handler, kind))
    }
}

pub trait Handler: Send {
    fn name(&self) -> &str;

    fn kind(&self) -> &str {
        "handler"
    }

    fn handle(&mut self, event: &Event, ctx: &EventCtx<'_>) -> Result<(), Fault>;

    /// Declared inspectable fields, rendered for the monitor.
    fn inspect(&self) -> Vec<(String, serde_json::Value)> {
        Vec::new()
    }

    /// Whole-run counters reported in the summary.
    fn counters(&self) -> Vec<(&'static str, u64)> {
        Vec::new()
    }

    /// Unfinished work left once the run is over.
    fn leftovers(&self) -> Vec<String> {
        Vec::new()
    }
}

pub struct HandlerSlot {
    pub id: HandlerId,
    pub name: Arc<str>,
    cell: Mutex<Box<dyn Handler>>,
}

impl HandlerSlot {
    /// Runs `f` with the handler locked. The engine holds the same lock while
    /// dispatching, so `f` always sees the handler between two events.
    pub fn with<R>(&self, f: impl FnOnce(&dyn Handler) -> R) -> R {
        let guard = self.cell.lock().unwrap_or_else(|p| p.into_inner());
        f(guard.as_ref())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum HookPhase {
    Before,
    After,
}

/// Observer called around every dispatch. Under the parallel engine hooks
/// are called from worker threads.
pub trait Hook: Send + Sync {
    fn on_event(&self, phase: HookPhase, event: &Event);
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize)]
#[serde(rename_all = "lowercase")]
#[repr(u8)]
pub enum EngineState {
    Ready = 0,
    Running = 1,
    Paused = 2,
    Lingering = 3,
    Finished = 4,
}

impl EngineState {
    fn from_u8(v: u8) -> EngineState {
        match v {
            0 => EngineState::Ready,
            1 => EngineState::Running,
            2 => EngineState::Paused,
            3 => EngineState::Lingering,
            _ => EngineState::Finished,
        }
    }
}

/// Counters the engine publishes for observers on other threads.
pub struct Progress {
    now: AtomicU64,
    events: AtomicU64,
    state: AtomicU8,
    started: Instant,
}

impl Default for Progress {
    fn default() -> Self {
        Progress {
            now: AtomicU64::new(0),
            events: AtomicU64::new(0),
            state: AtomicU8::new(EngineState::Ready as u8),
            started: Instant::now(),
        }
    }
}

impl Progress {
    pub fn now(&self) -> VTime {
        VTime(self.now.load(Ordering::Relaxed))
    }

    pub fn events(&self) -> u64 {
        self.events.load(Ordering::Relaxed)
    }

    pub fn state(&self) -> EngineState {
        EngineState::from_u8(self.state.load(Ordering::Acquire))
    }

    pub fn wall_elapsed(&self) -> Duration {
        self.started.elapsed()
    }

    pub(crate) fn record(&self, now: VTime, events: u64) {
        self.now.store(now.0, Ordering::Relaxed);
        self.events.fetch_add(events, Ordering::Relaxed);
    }

    fn set_state(&self, s: EngineState) {
        self.state.store(s as u8, Ordering::Release);
    }
}

type ControlAction = Box<dyn FnOnce(VTime) + Send>;

#[derive(Default)]
struct ControlState {
    pause_requested: bool,
    resume_requested: bool,
    actions: Vec<ControlAction>,
    paused_at: Option<VTime>,
}

/// Requests from other threads, consumed by the engine between events.
#[derive(Default)]
pub struct Control {
    attention: AtomicBool,
    state: Mutex<ControlState>,
    cv: Condvar,
}

impl Control {
    pub fn request_pause(&self) {
        let mut st = self.state.lock().unwrap();
        st.pause_requested = true;
        self.attention.store(true, Ordering::Release);
        self.cv.notify_all();
    }

    /// Wakes a driver blocked in [`Control::wait_for_resume`].
    pub fn request_resume(&self) {
        let mut st = self.state.lock().unwrap();
        st.pause_requested = false;
        st.resume_requested = true;
        self.cv.notify_all();
    }

    /// Withdraws a pause the engine has not acted on yet.
    pub fn cancel_pause(&self) -> bool {
        let mut st = self.state.lock().unwrap();
        std::mem::take(&mut st.pause_requested)
    }

    /// Queues `action` to run on the engine thread at the next event
    /// boundary, with the engine's current time.
    pub fn submit(&self, action: impl FnOnce(VTime) + Send + 'static) {
        let mut st = self.state.lock().unwrap();
        st.actions.push(Box::new(action));
        self.attention.store(true, Ordering::Release);
        self.cv.notify_all();
    }

    pub fn paused_at(&self) -> Option<VTime> {
        self.state.lock().unwrap().paused_at
    }

    /// Blocks until the engine reports paused, up to `timeout`.
    pub fn wait_paused(&self, timeout: Duration) -> Option<VTime> {
        let st = self.state.lock().unwrap();
        let (st, _) = self
            .cv
            .wait_timeout_while(st, timeout, |s| s.paused_at.is_none())
            .unwrap();
        st.paused_at
    }

    /// Blocks a paused driver until someone requests a resume.
    pub fn wait_for_resume(&self) {
        let st = self.state.lock().unwrap();
        let mut st = self.cv.wait_while(st, |s| !s.resume_requested).unwrap();
        st.resume_requested = false;
    }

    pub(crate) fn needs_attention(&self) -> bool {
        self.attention.load(Ordering::Acquire)
    }

    /// Runs queued actions; returns whether a pause was requested.
    pub(crate) fn service(&self, now: VTime) -> bool {
        let (actions, pause) = {
            let mut st = self.state.lock().unwrap();
            self.attention.store(false, Ordering::Release);
            let pause = std::mem::take(&mut st.pause_requested);
            (std::mem::take(&mut st.actions), pause)
        };
        for action in actions {
            action(now);
        }
        pause
    }

    fn mark_paused(&self, at: Option<VTime>) {
        let mut st = self.state.lock().unwrap();
        if at.is_some() {
            // A resume sent before the pause took effect is stale.
            st.resume_requested = false;
        }
        st.paused_at = at;
        self.cv.notify_all();
    }

    /// Waits up to `timeout` for a request while the engine is idle. Returns
    /// whether one arrived.
    fn wait_request(&self, timeout: Duration) -> bool {
        let st = self.state.lock().unwrap();
        let (_st, res) = self
            .cv
            .wait_timeout_while(st, timeout, |_| !self.attention.load(Ordering::Acquire))
            .unwrap();
        !res.timed_out()
    }
}

/// The event engine. [`Engine::run`] dispatches serially;
/// [`Engine::run_parallel`] runs same-time events on a worker pool.
pub struct Engine {
    pub(crate) sched: Arc<Scheduler>,
    pub(crate) handlers: Vec<Option<Arc<HandlerSlot>>>,
    pub(crate) exclusive: Vec<Arc<HandlerSlot>>,
    pub(crate) hooks: Vec<Arc<dyn Hook>>,
    pub(crate) control: Arc<Control>,
    pub(crate) progress: Arc<Progress>,
    pub(crate) state: EngineState,
    pub(crate) last: VTime,
    pub(crate) registry: Option<Arc<TaskRegistry>>,
    pub(crate) linger: Option<Duration>,
    /// An event at `last` has been dispatched, so the rest of that timestamp
    /// runs regardless of liveness.
    pub(crate) open: bool,
}

impl Engine {
    pub fn new(base: TimeBase) -> Engine {
        Engine::with_scheduler(Arc::new(Scheduler::new(base)))
    }

    pub fn with_scheduler(sched: Arc<Scheduler>) -> Engine {
        Engine {
            sched,
            handlers: Vec::new(),
            exclusive: Vec::new(),
            hooks: Vec::new(),
            control: Arc::new(Control::default()),
            progress: Arc::new(Progress::default()),
            state: EngineState::Ready,
            last: VTime::ZERO,
            registry: None,
            linger: None,
            open: false,
        }
    }

    pub fn scheduler(&self) -> &Arc<Scheduler> {
        &self.sched
    }

    pub fn control(&self) -> &Arc<Control> {
        &self.control
    }

    pub fn progress(&self) -> &Arc<Progress> {
        &self.progress
    }

    pub fn state(&self) -> EngineState {
        self.state
    }

    pub fn now(&self) -> VTime {
        self.last
    }

    /// Registry used to resolve task chains when a handler faults.
    pub fn set_task_registry(&mut self, registry: Arc<TaskRegistry>) {
        self.registry = Some(registry);
    }

    /// When set, an engine with nothing left to do waits this long for
    /// control requests (e.g. a forced tick) before finishing.
    pub fn set_linger(&mut self, linger: Option<Duration>) {
        self.linger = linger;
    }

    /// Reserves an ordinary handler id to be filled by [`Engine::install`].
    pub fn reserve_handler(&mut self) -> HandlerId {
        self.handlers.push(None);
        HandlerId((self.handlers.len() - 1) as u32)
    }

    pub fn install(&mut self, id: HandlerId, handler: Box<dyn Handler>) -> Arc<HandlerSlot> {
        let slot = Arc::new(HandlerSlot {
            id,
            name: Arc::from(handler.name()),
            cell: Mutex::new(handler),
        });
        let entry = &mut self.handlers[id.0 as usize];
        assert!(entry.is_none(), "handler {id:?} installed twice");
        *entry = Some(slot.clone());
        slot
    }

    pub fn add_handler(&mut self, handler: Box<dyn Handler>) -> HandlerId {
        let id = self.reserve_handler();
        self.install(id, handler);
        id
    }

    /// Adds a handler that runs only after every ordinary event at its
    /// timestamp has completed.
    pub fn add_exclusive_handler(&mut self, handler: Box<dyn Handler>) -> HandlerId {
        let id = HandlerId(EXCLUSIVE_BASE + self.exclusive.len() as u32);
        self.exclusive.push(Arc::new(HandlerSlot {
            id,
            name: Arc::from(handler.name()),
            cell: Mutex::new(handler),
        }));
        id
    }

    pub fn slot(&self, id: HandlerId) -> Option<&Arc<HandlerSlot>> {
        if id.is_exclusive() {
            self.exclusive.get((id.0 - EXCLUSIVE_BASE) as usize)
        } else {
            self.handlers.get(id.0 as usize).and_then(|s| s.as_ref())
        }
    }

    pub fn register_hook(&mut self, hook: Arc<dyn Hook>) {
        self.hooks.push(hook);
    }

    pub fn schedule(&self, event: Event) -> Result<u64, SimError> {
        self.sched.schedule(event)
    }

    /// Requests a pause at the next event boundary.
    pub fn pause(&self) {
        self.control.request_pause();
    }

    pub fn resume(&mut self) -> Result<(), SimError> {
        match self.state {
            EngineState::Finished => Err(SimError::Terminal),
            EngineState::Paused => {
                self.state = EngineState::Ready;
                self.control.mark_paused(None);
                self.progress.set_state(EngineState::Ready);
                Ok(())
            }
            _ => Ok(()),
        }
    }

    pub(crate) fn begin(&mut self) -> Result<(), SimError> {
        if self.state == EngineState::Finished {
            return Err(SimError::Terminal);
        }
        if let Some(pos) = self.handlers.iter().position(|h| h.is_none()) {
            return Err(SimError::config(
                format!("handler[{pos}]"),
                "reserved handler id was never installed",
            ));
        }
        self.set_state(EngineState::Running);
        Ok(())
    }

    pub(crate) fn set_state(&mut self, s: EngineState) {
        self.state = s;
        self.progress.set_state(s);
    }

    pub(crate) fn enter_pause(&mut self) -> VTime {
        self.set_state(EngineState::Paused);
        self.control.mark_paused(Some(self.last));
        self.last
    }

    pub(crate) fn finish(&mut self) -> VTime {
        self.sched.clear();
        self.set_state(EngineState::Finished);
        self.last
    }

    /// Called when nothing is live. Returns true if a control request
    /// arrived within the linger window.
    pub(crate) fn linger_wait(&mut self) -> bool {
        let Some(linger) = self.linger else {
            return false;
        };
        self.set_state(EngineState::Lingering);
        let got = self.control.wait_request(linger);
        self.set_state(EngineState::Running);
        got
    }

    pub(crate) fn fault_report(&self, fault: Fault, handler: &str, time: VTime) -> SimError {
        let frames = match (&fault.task, &self.registry) {
            (Some(task), Some(reg)) => reg.backtrace(task),
            (Some(task), None) => vec![Frame::unknown(task)],
            (None, _) => Vec::new(),
        };
        SimError::Fault(Box::new(FaultReport {
            time,
            handler: handler.to_string(),
            message: fault.message.clone(),
            frames,
            native: fault.native_backtrace(),
        }))
    }

    /// Dispatches events in queue order until nothing is live or a pause is
    /// requested. Liveness is checked between timestamps; once a timestamp
    /// has started, all of its events run. Returns the time of the last
    /// dispatched event.
    pub fn run(&mut self) -> Result<VTime, SimError> {
        self.begin()?;
        loop {
            if self.control.needs_attention() && self.control.service(self.last) {
                return Ok(self.enter_pause());
            }
            let within = self.open && self.sched.peek_time() == Some(self.last);
            if !within && self.sched.live() <= 0 {
                if self.linger_wait() {
                    continue;
                }
                return Ok(self.finish());
            }
            let Some(ev) = self.sched.pop() else {
                return Ok(self.finish());
            };
            self.sched.set_now(ev.time);
            self.last = ev.time;
            self.open = true;
            if ev.counted() {
                self.sched.release();
            }
            let slot = self
                .slot(ev.handler)
                .cloned()
                .unwrap_or_else(|| panic!("event for unknown handler {:?}", ev.handler));
            if let Err(fault) = dispatch(&slot, &ev, &self.sched, &self.hooks) {
                self.set_state(EngineState::Finished);
                return Err(self.fault_report(fault, &slot.name, ev.time));
            }
            self.progress.record(ev.time, 1);
        }
    }
}

/// Runs one event on its handler, with hooks around it. Panics inside the
/// handler become faults.
pub(crate) fn dispatch(
    slot: &HandlerSlot,
    ev: &Event,
    sched: &Scheduler,
    hooks: &[Arc<dyn Hook>],
) -> Result<(), Fault> {
    for h in hooks {
        h.on_event(HookPhase::Before, ev);
    }
    let ctx = EventCtx::new(ev.time, ev.handler, sched);
    let result = {
        let mut guard = slot.cell.lock().unwrap_or_else(|p| p.into_inner());
        catch_unwind(AssertUnwindSafe(|| guard.handle(ev, &ctx)))
    };
    let result = match result {
        Ok(r) => r,
        Err(panic) => {
            let msg = panic
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| panic.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "handler panicked".to_string());
            Err(Fault::new(format!("panic: {msg}")))
        }
    };
    for h in hooks {
        h.on_event(HookPhase::After, ev);
    }
    result
}
