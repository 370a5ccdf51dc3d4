//! Multiply-accumulate and auxiliary-storage tallies.
//!
//! One multiply-accumulate is one MAC. Exponentials, divisions, softmax
//! and vector normalization are not counted. `aux_peak` is the largest
//! number of auxiliary elements live at once inside a counted call;
//! operation inputs and the final output are never auxiliary.

use std::ops::{Add, AddAssign};

use serde::Serialize;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct OpCounter {
    macs: u64,
    aux_peak: u64,
    #[serde(skip)]
    live: u64,
}

impl OpCounter {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn macs(&self) -> u64 {
        self.macs
    }

    pub fn aux_peak(&self) -> u64 {
        self.aux_peak
    }

    pub fn record_macs(&mut self, n: u64) {
        self.macs += n;
    }

    /// Marks `n` auxiliary elements as live.
    pub fn alloc_aux(&mut self, n: u64) {
        self.live += n;
        self.aux_peak = self.aux_peak.max(self.live);
    }

    pub fn free_aux(&mut self, n: u64) {
        debug_assert!(n <= self.live, "freeing more auxiliary storage than live");
        self.live -= n.min(self.live);
    }

    /// Folds in the tally of a completed call. Both counters add, so a
    /// chain of calls reports the sum of its parts.
    pub fn absorb(&mut self, other: OpCounter) {
        debug_assert_eq!(other.live, 0, "absorbing a counter with live storage");
        self.macs += other.macs;
        self.aux_peak += other.aux_peak;
    }
}

impl Add for OpCounter {
    type Output = OpCounter;

    fn add(mut self, rhs: OpCounter) -> OpCounter {
        self.absorb(rhs);
        self
    }
}

impl AddAssign for OpCounter {
    fn add_assign(&mut self, rhs: OpCounter) {
        self.absorb(rhs);
    }
}
