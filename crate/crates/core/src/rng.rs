//! Counter-based random streams.
//!
//! A stream is the triple `(seed, stream_id, counter)`; the `n`-th output is
//! Philox-4x32-10 applied to the 128-bit block `(n, stream_id)` under the
//! 64-bit key `seed`. Saving a stream is copying the triple, and restoring
//! it replays the same outputs on any platform.

use crate::error::{Error, Result};

const PHILOX_M0: u32 = 0xD251_1F53;
const PHILOX_M1: u32 = 0xCD9E_8D57;
const PHILOX_W0: u32 = 0x9E37_79B9;
const PHILOX_W1: u32 = 0xBB67_AE85;

#[inline]
fn mulhilo(a: u32, b: u32) -> (u32, u32) {
    let p = u64::from(a) * u64::from(b);
    ((p >> 32) as u32, p as u32)
}

#[inline]
fn philox_round(ctr: [u32; 4], key: [u32; 2]) -> [u32; 4] {
    let (hi0, lo0) = mulhilo(PHILOX_M0, ctr[0]);
    let (hi1, lo1) = mulhilo(PHILOX_M1, ctr[2]);
    [hi1 ^ ctr[1] ^ key[0], lo1, hi0 ^ ctr[3] ^ key[1], lo0]
}

/// The Philox-4x32 bijection with 10 rounds.
pub fn philox4x32_10(ctr: [u32; 4], key: [u32; 2]) -> [u32; 4] {
    let mut ctr = philox_round(ctr, key);
    let mut key = key;
    for _ in 1..10 {
        key = [key[0].wrapping_add(PHILOX_W0), key[1].wrapping_add(PHILOX_W1)];
        ctr = philox_round(ctr, key);
    }
    ctr
}

/// Saved position of an [`RngStream`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct RngState {
    pub seed: u64,
    pub stream_id: u64,
    pub counter: u64,
}

/// Deterministic random stream; see the module docs.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RngStream {
    seed: u64,
    stream_id: u64,
    counter: u64,
}

impl RngStream {
    pub fn new(seed: u64, stream_id: u64) -> Self {
        RngStream {
            seed,
            stream_id,
            counter: 0,
        }
    }

    pub fn from_state(state: RngState) -> Self {
        RngStream {
            seed: state.seed,
            stream_id: state.stream_id,
            counter: state.counter,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream_id(&self) -> u64 {
        self.stream_id
    }

    pub fn counter(&self) -> u64 {
        self.counter
    }

    pub fn save_state(&self) -> RngState {
        RngState {
            seed: self.seed,
            stream_id: self.stream_id,
            counter: self.counter,
        }
    }

    /// Rewind (or advance) to a snapshot taken from this same stream.
    pub fn restore_state(&mut self, snapshot: RngState) -> Result<()> {
        if snapshot.stream_id != self.stream_id || snapshot.seed != self.seed {
            return Err(Error::usage(format!(
                "snapshot of stream {:#x} (seed {}) cannot restore stream {:#x} (seed {})",
                snapshot.stream_id, snapshot.seed, self.stream_id, self.seed
            )));
        }
        self.counter = snapshot.counter;
        Ok(())
    }

    /// Output at an arbitrary position without moving the stream.
    pub fn peek_at(&self, counter: u64) -> u64 {
        let ctr = [
            counter as u32,
            (counter >> 32) as u32,
            self.stream_id as u32,
            (self.stream_id >> 32) as u32,
        ];
        let key = [self.seed as u32, (self.seed >> 32) as u32];
        let out = philox4x32_10(ctr, key);
        u64::from(out[0]) | (u64::from(out[1]) << 32)
    }

    pub fn next_u64(&mut self) -> u64 {
        let v = self.peek_at(self.counter);
        self.counter = self.counter.wrapping_add(1);
        v
    }
}

impl RandomSource for RngStream {
    fn next_u64(&mut self) -> u64 {
        RngStream::next_u64(self)
    }
}

/// Derived draws on top of a stream of 64-bit outputs.
pub trait RandomSource {
    fn next_u64(&mut self) -> u64;

    /// Uniform in `[0, 1)` with 53 bits of resolution.
    fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform in the open interval `(0, 1)`.
    fn uniform_open(&mut self) -> f64 {
        ((self.next_u64() >> 11) as f64 + 0.5) * (1.0 / (1u64 << 53) as f64)
    }

    fn uniform_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Uniform integer in `[0, n)`; unbiased (Lemire's multiply-and-reject).
    fn below(&mut self, n: u64) -> u64 {
        assert!(n > 0, "below(0)");
        let threshold = n.wrapping_neg() % n;
        loop {
            let m = u128::from(self.next_u64()) * u128::from(n);
            if (m as u64) >= threshold {
                return (m >> 64) as u64;
            }
        }
    }

    fn bernoulli(&mut self, p: f64) -> bool {
        self.uniform() < p
    }

    /// Standard normal via Box-Muller (consumes two outputs).
    fn normal(&mut self) -> f64 {
        let u1 = self.uniform_open();
        let u2 = self.uniform();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    /// In-place Fisher-Yates shuffle.
    fn shuffle<T>(&mut self, items: &mut [T])
    where
        Self: Sized,
    {
        for i in (1..items.len()).rev() {
            let j = self.below(i as u64 + 1) as usize;
            items.swap(i, j);
        }
    }
}

/// Stream ids for the purposes that draw randomness.
pub mod streams {
    pub const MASK: u64 = 0x6d61_736b;
    pub const DROPOUT: u64 = 0x6472_6f70;
    pub const GUMBEL: u64 = 0x6775_6d62;
    pub const DISTRACTOR: u64 = 0x6469_7374;
    pub const INIT: u64 = 0x696e_6974;
    pub const SHUFFLE: u64 = 0x7368_7566;
    pub const SYNTH: u64 = 0x7379_6e74;

    /// Order of the training utterances in `epoch`.
    pub fn shuffle(epoch: u64) -> u64 {
        SHUFFLE | ((epoch & 0x7fff_ffff) << 32)
    }

    /// Per-visit data stream for utterance `utt` in `epoch`.
    pub fn data(utt: u64, epoch: u64) -> u64 {
        (1u64 << 63) | ((epoch & 0x7fff_ffff) << 32) | (utt & 0xffff_ffff)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    // Known-answer vectors published with the Random123 reference implementation.
    #[test]
    fn philox_known_answers() {
        assert_eq!(
            philox4x32_10([0; 4], [0; 2]),
            [0x6627_e8d5, 0xe169_c58d, 0xbc57_ac4c, 0x9b00_dbd8]
        );
        assert_eq!(
            philox4x32_10([u32::MAX; 4], [u32::MAX; 2]),
            [0x408f_276d, 0x41c8_3b0e, 0xa20b_c7c6, 0x6d54_51fd]
        );
        assert_eq!(
            philox4x32_10(
                [0x243f_6a88, 0x85a3_08d3, 0x1319_8a2e, 0x0370_7344],
                [0xa409_3822, 0x299f_31d0]
            ),
            [0xd16c_fe09, 0x94fd_cceb, 0x5001_e420, 0x2412_6ea1]
        );
    }

    #[test]
    fn save_draw_restore_replays() {
        let mut s = RngStream::new(7, streams::MASK);
        let snap = s.save_state();
        assert_eq!(snap, s.save_state());
        let u = s.uniform();
        s.restore_state(snap).unwrap();
        assert_eq!(u.to_bits(), s.uniform().to_bits());
    }

    #[test]
    fn restore_is_idempotent_and_noop_without_draws() {
        let mut s = RngStream::new(1, 2);
        let snap = s.save_state();
        s.restore_state(snap).unwrap();
        assert_eq!(s.save_state(), snap);
        s.next_u64();
        s.restore_state(snap).unwrap();
        s.restore_state(snap).unwrap();
        assert_eq!(s.save_state(), snap);
    }

    #[test]
    fn restore_rejects_foreign_snapshot() {
        let a = RngStream::new(1, streams::MASK);
        let mut b = RngStream::new(1, streams::DROPOUT);
        assert!(matches!(b.restore_state(a.save_state()), Err(Error::Usage(_))));
    }

    #[test]
    fn below_stays_in_range() {
        let mut s = RngStream::new(3, 4);
        for n in [1u64, 2, 3, 7, 1000] {
            for _ in 0..200 {
                assert!(s.below(n) < n);
            }
        }
    }

    #[test]
    fn uniform_open_never_hits_endpoints() {
        let mut s = RngStream::new(0, 0);
        for _ in 0..10_000 {
            let u = s.uniform_open();
            assert!(u > 0.0 && u < 1.0);
        }
    }
}
