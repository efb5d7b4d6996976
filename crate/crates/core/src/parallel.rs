//! Conservative parallel execution.
//!
//! All events at the current minimum time form a window. Events of one
//! handler stay together and run in `seq` order on one thread; distinct
//! handlers run concurrently. Time only advances once the whole window,
//! including events it scheduled at the same time, has completed.
//! Exclusive handlers run serially after that.

use std::sync::atomic::{AtomicBool, AtomicU64, AtomicUsize, Ordering};
use std::sync::{Arc, Condvar, Mutex, RwLock};
use std::thread;
use std::time::Duration;

use crate::error::{Fault, SimError};
use crate::event::{dispatch, Engine, EngineState, Event, HandlerSlot, Hook, Scheduler};
use crate::time::VTime;

const SPIN_LIMIT: u32 = 1 << 14;

struct Group {
    slot: Arc<HandlerSlot>,
    start: usize,
    end: usize,
}

#[derive(Default)]
struct Window {
    events: Vec<Event>,
    groups: Vec<Group>,
}

struct Failure {
    group: usize,
    handler: String,
    time: VTime,
    fault: Fault,
}

struct Shared {
    window: RwLock<Window>,
    generation: AtomicU64,
    remaining: AtomicUsize,
    shutdown: AtomicBool,
    participants: usize,
    spin: bool,
    sched: Arc<Scheduler>,
    hooks: Vec<Arc<dyn Hook>>,
    failures: Mutex<Vec<Failure>>,
    processed: AtomicU64,
    wake: Mutex<()>,
    wake_cv: Condvar,
    done: Mutex<()>,
    done_cv: Condvar,
}

impl Shared {
    /// Runs every group assigned to participant `me`.
    fn work(&self, me: usize) {
        let window = self.window.read().unwrap();
        let mut processed = 0;
        for (gi, g) in window
            .groups
            .iter()
            .enumerate()
            .skip(me)
            .step_by(self.participants)
        {
            for ev in &window.events[g.start..g.end] {
                processed += 1;
                if let Err(fault) = dispatch(&g.slot, ev, &self.sched, &self.hooks) {
                    self.failures.lock().unwrap().push(Failure {
                        group: gi,
                        handler: g.slot.name.to_string(),
                        time: ev.time,
                        fault,
                    });
                    break;
                }
            }
        }
        self.processed.fetch_add(processed, Ordering::Relaxed);
    }

    fn finish_share(&self) {
        if self.remaining.fetch_sub(1, Ordering::AcqRel) == 1 {
            let _g = self.done.lock().unwrap();
            self.done_cv.notify_all();
        }
    }

    fn worker_loop(&self, me: usize) {
        let mut seen = 0u64;
        loop {
            let mut spins = 0;
            let gen = loop {
                if self.shutdown.load(Ordering::Acquire) {
                    return;
                }
                let g = self.generation.load(Ordering::Acquire);
                if g != seen {
                    break g;
                }
                if self.spin && spins < SPIN_LIMIT {
                    spins += 1;
                    std::hint::spin_loop();
                    continue;
                }
                let guard = self.wake.lock().unwrap();
                if self.generation.load(Ordering::Acquire) == seen
                    && !self.shutdown.load(Ordering::Acquire)
                {
                    let _ = self
                        .wake_cv
                        .wait_timeout(guard, Duration::from_millis(50))
                        .unwrap();
                }
            };
            seen = gen;
            self.work(me);
            self.finish_share();
        }
    }

    /// Publishes the current window to the workers and joins in as
    /// participant 0. Returns once every participant is done.
    fn run_window(&self) {
        self.remaining.store(self.participants, Ordering::Release);
        {
            let _g = self.wake.lock().unwrap();
            self.generation.fetch_add(1, Ordering::AcqRel);
            self.wake_cv.notify_all();
        }
        self.work(0);
        self.finish_share();
        let mut spins = 0;
        while self.remaining.load(Ordering::Acquire) != 0 {
            if self.spin && spins < SPIN_LIMIT {
                spins += 1;
                std::hint::spin_loop();
                continue;
            }
            let guard = self.done.lock().unwrap();
            if self.remaining.load(Ordering::Acquire) != 0 {
                let _ = self
                    .done_cv
                    .wait_timeout(guard, Duration::from_millis(50))
                    .unwrap();
            }
        }
    }
}

impl Engine {
    /// Runs with `workers` threads (the calling thread included). Results are
    /// identical to [`Engine::run`].
    pub fn run_parallel(&mut self, workers: usize) -> Result<VTime, SimError> {
        let workers = workers.max(1);
        self.begin()?;
        let cores = thread::available_parallelism().map_or(1, |n| n.get());
        let shared = Arc::new(Shared {
            window: RwLock::new(Window::default()),
            generation: AtomicU64::new(0),
            remaining: AtomicUsize::new(0),
            shutdown: AtomicBool::new(false),
            participants: workers,
            spin: workers <= cores,
            sched: self.sched.clone(),
            hooks: self.hooks.clone(),
            failures: Mutex::new(Vec::new()),
            processed: AtomicU64::new(0),
            wake: Mutex::new(()),
            wake_cv: Condvar::new(),
            done: Mutex::new(()),
            done_cv: Condvar::new(),
        });
        thread::scope(|scope| {
            for me in 1..workers {
                let shared = shared.clone();
                scope.spawn(move || shared.worker_loop(me));
            }
            let result = self.parallel_loop(&shared);
            shared.shutdown.store(true, Ordering::Release);
            {
                let _g = shared.wake.lock().unwrap();
                shared.wake_cv.notify_all();
            }
            result
        })
    }

    fn parallel_loop(&mut self, shared: &Shared) -> Result<VTime, SimError> {
        let mut drained = Vec::new();
        let mut exclusive = Vec::new();
        loop {
            if self.control.needs_attention() && self.control.service(self.last) {
                return Ok(self.enter_pause());
            }
            if self.sched.live() <= 0 {
                if self.linger_wait() {
                    continue;
                }
                return Ok(self.finish());
            }
            let Some(t) = self.sched.drain_next_window(&mut drained) else {
                return Ok(self.finish());
            };
            self.sched.set_now(t);
            self.last = t;
            self.open = true;
            exclusive.clear();
            // Same-time events scheduled by the window join a follow-up
            // window before time moves on.
            loop {
                let events = self.fill_window(shared, &mut drained, &mut exclusive);
                if events > 0 {
                    self.execute_window(shared)?;
                    self.progress.record(t, events as u64);
                }
                drained.clear();
                if self.sched.drain_next_window_at(t, &mut drained) == 0 {
                    break;
                }
            }
            for ev in exclusive.drain(..) {
                let slot = self
                    .slot(ev.handler)
                    .cloned()
                    .expect("unknown exclusive handler");
                if let Err(fault) = dispatch(&slot, &ev, &self.sched, &self.hooks) {
                    self.set_state(EngineState::Finished);
                    return Err(self.fault_report(fault, &slot.name, ev.time));
                }
                self.progress.record(t, 1);
            }
        }
    }

    /// Moves the ordinary events of `drained` into the shared window, grouped
    /// by handler. Returns the number of ordinary events.
    fn fill_window(
        &mut self,
        shared: &Shared,
        drained: &mut Vec<Event>,
        exclusive: &mut Vec<Event>,
    ) -> usize {
        let mut w = shared.window.write().unwrap();
        w.events.clear();
        w.groups.clear();
        for ev in drained.drain(..) {
            if ev.counted() {
                self.sched.release();
            }
            if ev.handler.is_exclusive() {
                exclusive.push(ev);
            } else {
                w.events.push(ev);
            }
        }
        // Drained events arrive in (handler, seq) order, so each handler's
        // events are contiguous.
        let mut start = 0;
        while start < w.events.len() {
            let h = w.events[start].handler;
            let mut end = start + 1;
            while end < w.events.len() && w.events[end].handler == h {
                end += 1;
            }
            let slot = self
                .slot(h)
                .cloned()
                .unwrap_or_else(|| panic!("event for unknown handler {h:?}"));
            w.groups.push(Group { slot, start, end });
            start = end;
        }
        w.events.len()
    }

    fn execute_window(&mut self, shared: &Shared) -> Result<(), SimError> {
        let groups = shared.window.read().unwrap().groups.len();
        if groups == 1 || shared.participants == 1 {
            // Not worth waking anyone.
            let w = shared.window.read().unwrap();
            for (gi, g) in w.groups.iter().enumerate() {
                for ev in &w.events[g.start..g.end] {
                    if let Err(fault) = dispatch(&g.slot, ev, &self.sched, &self.hooks) {
                        shared.failures.lock().unwrap().push(Failure {
                            group: gi,
                            handler: g.slot.name.to_string(),
                            time: ev.time,
                            fault,
                        });
                        break;
                    }
                }
            }
        } else {
            shared.run_window();
        }
        let mut failures = std::mem::take(&mut *shared.failures.lock().unwrap());
        if failures.is_empty() {
            return Ok(());
        }
        failures.sort_by_key(|f| f.group);
        let first = failures.swap_remove(0);
        self.set_state(EngineState::Finished);
        Err(self.fault_report(first.fault, &first.handler, first.time))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::event::{EventCtx, EventKind, Handler, HandlerId};
    use crate::time::TimeBase;

    /// (time, handler, seq) of every dispatched event.
    type Log = Arc<Mutex<Vec<(u64, u32, u64)>>>;

    struct Spawner {
        name: String,
        log: Log,
        spawn_same_time: bool,
    }

    impl Handler for Spawner {
        fn name(&self) -> &str {
            &self.name
        }

        fn handle(&mut self, ev: &Event, ctx: &EventCtx<'_>) -> Result<(), Fault> {
            self.log
                .lock()
                .unwrap()
                .push((ev.time.0, ev.handler.0, ev.seq));
            if std::mem::take(&mut self.spawn_same_time) {
                ctx.schedule(ev.time, EventKind::Custom(9))?;
            }
            Ok(())
        }
    }

    fn engine_with(n: usize, log: &Log) -> (Engine, Vec<HandlerId>) {
        let mut e = Engine::new(TimeBase::default());
        let ids = (0..n)
            .map(|i| {
                e.add_handler(Box::new(Spawner {
                    name: format!("h{i}"),
                    log: log.clone(),
                    spawn_same_time: i == 0,
                }))
            })
            .collect();
        (e, ids)
    }

    #[test]
    fn same_time_spawns_complete_before_time_advances() {
        let log = Arc::new(Mutex::new(Vec::new()));
        let (mut e, ids) = engine_with(3, &log);
        for &h in &ids {
            e.schedule(Event::new(VTime(10), h, EventKind::Custom(0)))
                .unwrap();
        }
        e.schedule(Event::new(VTime(20), ids[1], EventKind::Custom(0)))
            .unwrap();
        assert_eq!(e.run_parallel(3).unwrap(), VTime(20));
        let log = log.lock().unwrap();
        let at_10 = log.iter().filter(|(t, _, _)| *t == 10).count();
        assert_eq!(at_10, 4);
        assert_eq!(log.last().unwrap().0, 20);
    }

    #[test]
    fn empty_queue_finishes() {
        let mut e = Engine::new(TimeBase::default());
        assert_eq!(e.run_parallel(4).unwrap(), VTime::ZERO);
        assert_eq!(e.state(), EngineState::Finished);
    }

    #[test]
    fn per_handler_events_keep_seq_order() {
        let log = Arc::new(Mutex::new(Vec::new()));
        let (mut e, ids) = engine_with(4, &log);
        for round in 0..5 {
            for &h in &ids {
                e.schedule(Event::new(VTime(7), h, EventKind::Custom(round)))
                    .unwrap();
            }
        }
        e.run_parallel(4).unwrap();
        let log = log.lock().unwrap();
        for &h in &ids {
            let seqs: Vec<u64> = log.iter().filter(|l| l.1 == h.0).map(|l| l.2).collect();
            let mut sorted = seqs.clone();
            sorted.sort();
            assert_eq!(seqs, sorted);
        }
    }

    #[test]
    fn fault_reported_from_lowest_handler_group() {
        struct Fails(String);
        impl Handler for Fails {
            fn name(&self) -> &str {
                &self.0
            }
            fn handle(&mut self, _: &Event, _: &EventCtx<'_>) -> Result<(), Fault> {
                Err(Fault::new(format!("{} failed", self.0)))
            }
        }
        for _ in 0..20 {
            let mut e = Engine::new(TimeBase::default());
            let ids: Vec<_> = (0..6)
                .map(|i| e.add_handler(Box::new(Fails(format!("f{i}")))))
                .collect();
            for &h in ids.iter().rev() {
                e.schedule(Event::new(VTime(3), h, EventKind::Custom(0)))
                    .unwrap();
            }
            match e.run_parallel(3) {
                Err(SimError::Fault(r)) => assert_eq!(r.handler, "f0"),
                other => panic!("expected fault, got {other:?}"),
            }
        }
    }
}
