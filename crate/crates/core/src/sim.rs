//! Deterministic discrete-event engine.
//!
//! Virtual time is an integer count of nanoseconds. Events fire in `(fire_at, seq)` order, so two
//! events scheduled for the same instant dispatch in the order they were scheduled.

use std::cmp::Reverse;
use std::collections::BinaryHeap;

use thiserror::Error;

/// Virtual time in nanoseconds.
pub type Nanos = u64;

/// Virtual time in picoseconds. Used for sub-nanosecond charges that are summed before being
/// rounded onto the clock.
pub type Picos = u64;

pub const NS_PER_US: Nanos = 1_000;
pub const NS_PER_MS: Nanos = 1_000_000;

/// Default cap on dispatched events per run.
pub const DEFAULT_EVENT_CAP: u64 = 1_000_000_000;

/// Rounds a picosecond amount up to whole nanoseconds.
pub fn ps_to_ns_ceil(ps: Picos) -> Nanos {
    ps.div_ceil(1_000)
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum SimError {
    #[error("event cap of {cap} exceeded at t={now}ns (possible livelock)")]
    EventCapExceeded { cap: u64, now: Nanos },
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct SimClock {
    now: Nanos,
}

impl SimClock {
    pub fn now(&self) -> Nanos {
        self.now
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct EventId(pub u64);

#[derive(Debug, Clone)]
pub struct Event<E> {
    pub fire_at: Nanos,
    pub seq: u64,
    pub kind: E,
}

/// Event queue plus clock. `E` carries both the event tag and its payload.
#[derive(Debug)]
pub struct Simulator<E> {
    clock: SimClock,
    heap: BinaryHeap<Reverse<(Nanos, u64)>>,
    pending: std::collections::HashMap<u64, E>,
    next_seq: u64,
    dispatched: u64,
    event_cap: u64,
}

impl<E> Default for Simulator<E> {
    fn default() -> Self {
        Self::new()
    }
}

impl<E> Simulator<E> {
    pub fn new() -> Self {
        Self::with_event_cap(DEFAULT_EVENT_CAP)
    }

    pub fn with_event_cap(event_cap: u64) -> Self {
        Self {
            clock: SimClock::default(),
            heap: BinaryHeap::new(),
            pending: std::collections::HashMap::new(),
            next_seq: 0,
            dispatched: 0,
            event_cap,
        }
    }

    pub fn now(&self) -> Nanos {
        self.clock.now
    }

    pub fn clock(&self) -> SimClock {
        self.clock
    }

    /// Number of events dispatched so far.
    pub fn dispatched(&self) -> u64 {
        self.dispatched
    }

    pub fn is_idle(&self) -> bool {
        self.heap.is_empty()
    }

    /// Enqueues `kind` to fire `delay` ns from now.
    pub fn schedule(&mut self, delay: Nanos, kind: E) -> EventId {
        let fire_at = self.clock.now + delay;
        self.schedule_at(fire_at, kind)
    }

    /// Enqueues `kind` at an absolute time. Times in the past are clamped to `now`.
    pub fn schedule_at(&mut self, fire_at: Nanos, kind: E) -> EventId {
        let fire_at = fire_at.max(self.clock.now);
        let seq = self.next_seq;
        self.next_seq += 1;
        self.heap.push(Reverse((fire_at, seq)));
        self.pending.insert(seq, kind);
        EventId(seq)
    }

    /// Removes a pending event. Returns false if it already fired or was cancelled.
    pub fn cancel(&mut self, id: EventId) -> bool {
        self.pending.remove(&id.0).is_some()
    }

    /// Pops the next event and advances the clock to its fire time.
    pub fn next_event(&mut self) -> Result<Option<Event<E>>, SimError> {
        while let Some(Reverse((fire_at, seq))) = self.heap.pop() {
            let Some(kind) = self.pending.remove(&seq) else {
                continue;
            };
            if self.dispatched >= self.event_cap {
                return Err(SimError::EventCapExceeded {
                    cap: self.event_cap,
                    now: self.clock.now,
                });
            }
            debug_assert!(fire_at >= self.clock.now, "causality violated");
            self.clock.now = fire_at;
            self.dispatched += 1;
            return Ok(Some(Event { fire_at, seq, kind }));
        }
        Ok(None)
    }

    /// Dispatches every pending event (and anything the handler schedules) and returns the final
    /// clock value.
    pub fn run_until_idle<F>(&mut self, mut handler: F) -> Result<Nanos, SimError>
    where
        F: FnMut(&mut Self, Event<E>),
    {
        while let Some(ev) = self.next_event()? {
            handler(self, ev);
        }
        Ok(self.clock.now)
    }
}

/// Seeded 64-bit generator.
///
/// The state is initialised from the seed with one SplitMix64 step
/// (`z = seed + 0x9E3779B97F4A7C15; z = (z ^ z>>30) * 0xBF58476D1CE4E5B9;
/// z = (z ^ z>>27) * 0x94D049BB133111EB; z ^= z>>31`), replaced by `0x9E3779B97F4A7C15` if zero.
/// Each output is one xorshift64* step:
///
/// ```text
/// x ^= x >> 12; x ^= x << 25; x ^= x >> 27; out = x * 0x2545F4914F6CDD1D   (wrapping)
/// ```
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SeededRng {
    seed: u64,
    state: u64,
}

impl SeededRng {
    pub fn new(seed: u64) -> Self {
        let mut z = seed.wrapping_add(0x9E37_79B9_7F4A_7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^= z >> 31;
        if z == 0 {
            z = 0x9E37_79B9_7F4A_7C15;
        }
        Self { seed, state: z }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn next_u64(&mut self) -> u64 {
        let mut x = self.state;
        x ^= x >> 12;
        x ^= x << 25;
        x ^= x >> 27;
        self.state = x;
        x.wrapping_mul(0x2545_F491_4F6C_DD1D)
    }

    pub fn next_u32(&mut self) -> u32 {
        (self.next_u64() >> 32) as u32
    }

    /// Uniform value in `0..bound` via the multiply-high reduction. `bound` must be nonzero.
    pub fn below(&mut self, bound: u64) -> u64 {
        assert!(bound > 0, "below(0)");
        ((self.next_u64() as u128 * bound as u128) >> 64) as u64
    }

    /// True with probability `num / den`.
    pub fn chance(&mut self, num: u64, den: u64) -> bool {
        self.below(den) < num
    }

    pub fn fill_bytes(&mut self, out: &mut [u8]) {
        for chunk in out.chunks_mut(8) {
            let v = self.next_u64().to_le_bytes();
            chunk.copy_from_slice(&v[..chunk.len()]);
        }
    }

    /// Derives an independent stream, e.g. one per subsystem.
    pub fn fork(&mut self, salt: u64) -> SeededRng {
        SeededRng::new(self.next_u64() ^ salt.rotate_left(17))
    }
}
