//! First-party example models.
//!
//! Every model is created through a builder and follows the tick contract:
//! a tick that returns false has changed nothing. Models check for buffer
//! space before building a message, so a send never fails once attempted.

mod cache;
mod generator;
mod membank;
mod ping;

use std::hint::black_box;

pub use cache::{CacheStub, CacheStubBuilder, HitPattern};
pub use generator::{Pattern, TrafficGenerator, TrafficGeneratorBuilder};
pub use membank::{MemBank, MemBankBuilder};
pub use ping::{PingAgent, PingAgentBuilder, PingRole};

/// Stand-in for the work a detailed model does per tick.
#[inline]
pub(crate) fn burn(iterations: u32) {
    let mut x = 0x9e37_79b9_7f4a_7c15u64;
    for i in 0..iterations {
        x = black_box(x.rotate_left(5) ^ i as u64).wrapping_mul(0x2545_f491_4f6c_dd1d);
    }
    black_box(x);
}
