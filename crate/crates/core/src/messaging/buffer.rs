use std::collections::VecDeque;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Mutex;

use super::Message;
use crate::time::VTime;

struct State {
    entries: VecDeque<(Message, VTime)>,
    /// Timestamp the two counters below refer to.
    epoch: VTime,
    pushed_now: usize,
    popped_now: usize,
    high: usize,
    pushed: u64,
}

impl State {
    fn roll(&mut self, now: VTime) {
        if self.epoch != now {
            self.epoch = now;
            self.pushed_now = 0;
            self.popped_now = 0;
        }
    }

    /// Level at the start of the current timestamp.
    fn start_len(&self) -> usize {
        self.entries.len() + self.popped_now - self.pushed_now
    }
}

/// Sampler-derived statistics, shared with the monitor.
#[derive(Default)]
pub struct BufferStats {
    pub samples: AtomicU64,
    pub full_samples: AtomicU64,
    pub level_sum: AtomicU64,
}

/// A bounded FIFO with same-timestamp isolation.
///
/// * a consumer at `t` only sees entries inserted before `t`;
/// * a slot freed at `t` can be refilled from `t + 1` on;
/// * the full to not-full transition is reported by the first pop at a
///   timestamp that started full.
///
/// Together these make the outcome of a timestamp independent of the order
/// in which producer and consumer run within it.
pub struct Buffer {
    name: String,
    capacity: usize,
    state: Mutex<State>,
    pub stats: BufferStats,
}

impl Buffer {
    pub fn new(name: impl Into<String>, capacity: usize) -> Buffer {
        assert!(capacity > 0, "buffer capacity must be positive");
        Buffer {
            name: name.into(),
            capacity,
            state: Mutex::new(State {
                entries: VecDeque::with_capacity(capacity),
                epoch: VTime::ZERO,
                pushed_now: 0,
                popped_now: 0,
                high: 0,
                pushed: 0,
            }),
            stats: BufferStats::default(),
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.state.lock().unwrap().entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Highest occupancy ever reached, counting slots freed at the same
    /// timestamp.
    pub fn high_watermark(&self) -> usize {
        self.state.lock().unwrap().high
    }

    pub fn total_pushed(&self) -> u64 {
        self.state.lock().unwrap().pushed
    }

    /// Slots a producer at `now` must consider taken.
    pub fn occupancy(&self, now: VTime) -> usize {
        let mut st = self.state.lock().unwrap();
        st.roll(now);
        st.entries.len() + st.popped_now
    }

    pub fn can_push(&self, now: VTime) -> bool {
        self.occupancy(now) < self.capacity
    }

    pub fn try_push(&self, msg: Message, now: VTime) -> Result<(), Message> {
        let mut st = self.state.lock().unwrap();
        st.roll(now);
        if st.entries.len() + st.popped_now >= self.capacity {
            return Err(msg);
        }
        st.entries.push_back((msg, now));
        st.pushed_now += 1;
        st.pushed += 1;
        // Slots popped at this timestamp stay counted so the mark does not
        // depend on producer and consumer order.
        st.high = st.high.max(st.entries.len() + st.popped_now);
        Ok(())
    }

    /// Head entry visible at `now`, unchanged.
    pub fn peek(&self, now: VTime) -> Option<Message> {
        let st = self.state.lock().unwrap();
        match st.entries.front() {
            Some((m, at)) if *at < now => Some(m.clone()),
            _ => None,
        }
    }

    /// Applies `f` to the visible head without removing it.
    pub fn peek_with<R>(&self, now: VTime, f: impl FnOnce(&Message) -> R) -> Option<R> {
        let st = self.state.lock().unwrap();
        match st.entries.front() {
            Some((m, at)) if *at < now => Some(f(m)),
            _ => None,
        }
    }

    /// Pops the visible head. The flag is true when this pop is the
    /// buffer's full to not-full transition.
    pub fn pop(&self, now: VTime) -> Option<(Message, bool)> {
        let mut st = self.state.lock().unwrap();
        st.roll(now);
        match st.entries.front() {
            Some((_, at)) if *at < now => {}
            _ => return None,
        }
        let freed = st.popped_now == 0 && st.start_len() == self.capacity;
        let (msg, _) = st.entries.pop_front().unwrap();
        st.popped_now += 1;
        Some((msg, freed))
    }

    /// Feeds one sampler observation into the shared statistics.
    pub fn record_sample(&self) -> usize {
        let level = self.len();
        self.stats.samples.fetch_add(1, Ordering::Relaxed);
        self.stats
            .level_sum
            .fetch_add(level as u64, Ordering::Relaxed);
        if level == self.capacity {
            self.stats.full_samples.fetch_add(1, Ordering::Relaxed);
        }
        level
    }

    /// Mean sampled level, 0 before the first sample.
    pub fn average_level(&self) -> f64 {
        let n = self.stats.samples.load(Ordering::Relaxed);
        if n == 0 {
            0.0
        } else {
            self.stats.level_sum.load(Ordering::Relaxed) as f64 / n as f64
        }
    }

    pub fn full_samples(&self) -> u64 {
        self.stats.full_samples.load(Ordering::Relaxed)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::messaging::{MsgId, Payload, PortId};

    fn msg(n: u64) -> Message {
        Message {
            id: MsgId::new(PortId(0), n),
            src: PortId(0),
            dst: PortId(1),
            enqueue_time: VTime::ZERO,
            size_bytes: 8,
            task: None,
            payload: Payload::Ping { seq: n },
        }
    }

    #[test]
    fn capacity_is_enforced() {
        let b = Buffer::new("b", 4);
        for i in 0..4 {
            assert!(b.try_push(msg(i), VTime(1)).is_ok());
        }
        assert!(b.try_push(msg(4), VTime(1)).is_err());
        assert_eq!(b.len(), 4);
    }

    #[test]
    fn entries_are_invisible_at_their_own_timestamp() {
        let b = Buffer::new("b", 2);
        b.try_push(msg(0), VTime(5)).unwrap();
        assert!(b.peek(VTime(5)).is_none());
        assert!(b.pop(VTime(5)).is_none());
        assert_eq!(b.pop(VTime(6)).unwrap().0.id, MsgId::new(PortId(0), 0));
    }

    #[test]
    fn freed_slot_is_usable_only_later() {
        let b = Buffer::new("b", 1);
        b.try_push(msg(0), VTime(1)).unwrap();
        let (_, freed) = b.pop(VTime(2)).unwrap();
        assert!(freed);
        assert!(b.try_push(msg(1), VTime(2)).is_err());
        assert!(b.try_push(msg(1), VTime(3)).is_ok());
    }

    #[test]
    fn only_a_full_to_not_full_pop_reports_freeing() {
        let b = Buffer::new("b", 3);
        for i in 0..3 {
            b.try_push(msg(i), VTime(1)).unwrap();
        }
        assert!(b.pop(VTime(2)).unwrap().1);
        assert!(!b.pop(VTime(2)).unwrap().1);
        assert!(!b.pop(VTime(3)).unwrap().1);
    }

    #[test]
    fn pop_order_is_fifo() {
        let b = Buffer::new("b", 4);
        b.try_push(msg(1), VTime(1)).unwrap();
        b.try_push(msg(2), VTime(1)).unwrap();
        assert_eq!(b.pop(VTime(2)).unwrap().0.id.counter(), 1);
        assert_eq!(b.pop(VTime(2)).unwrap().0.id.counter(), 2);
    }

    #[test]
    fn producer_view_does_not_depend_on_consumer_order() {
        // Consumer first.
        let a = Buffer::new("a", 2);
        a.try_push(msg(0), VTime(1)).unwrap();
        a.try_push(msg(1), VTime(1)).unwrap();
        a.pop(VTime(2));
        let a_push = a.try_push(msg(2), VTime(2)).is_ok();
        // Producer first.
        let b = Buffer::new("b", 2);
        b.try_push(msg(0), VTime(1)).unwrap();
        b.try_push(msg(1), VTime(1)).unwrap();
        let b_push = b.try_push(msg(2), VTime(2)).is_ok();
        b.pop(VTime(2));
        assert_eq!(a_push, b_push);
        assert_eq!(a.len(), b.len());
    }
}
