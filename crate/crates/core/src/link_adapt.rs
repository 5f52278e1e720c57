//! BLER tracking over a sliding feedback window and MCS stepping toward a target.

use crate::channel::NUM_MCS;
use crate::sched::{HarqFeedback, Verdict};
use serde::{Deserialize, Serialize};
use std::collections::VecDeque;

#[derive(Debug, Clone, PartialEq)]
pub struct BlerWindow {
    window_len: usize,
    outcomes: VecDeque<bool>,
    nacks: usize,
    since_eval: usize,
}

impl BlerWindow {
    pub fn new(window_len: usize) -> Self {
        let window_len = window_len.max(1);
        Self { window_len, outcomes: VecDeque::with_capacity(window_len), nacks: 0, since_eval: 0 }
    }

    pub fn window_len(&self) -> usize {
        self.window_len
    }

    pub fn len(&self) -> usize {
        self.outcomes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.outcomes.is_empty()
    }

    /// Records one outcome; `true` means NACK.
    pub fn record(&mut self, nack: bool) {
        if self.outcomes.len() == self.window_len && self.outcomes.pop_front() == Some(true) {
            self.nacks -= 1;
        }
        self.outcomes.push_back(nack);
        self.nacks += usize::from(nack);
        self.since_eval += 1;
    }

    /// Deadline misses arrive as NACKs and count as such.
    pub fn record_outcome(&mut self, fb: &HarqFeedback) {
        self.record(fb.verdict == Verdict::Nack);
    }

    pub fn current_bler(&self) -> f64 {
        if self.outcomes.is_empty() {
            0.0
        } else {
            self.nacks as f64 / self.outcomes.len() as f64
        }
    }

    /// True once a full window of fresh outcomes has accumulated since the
    /// last call that returned true.
    pub fn take_evaluation(&mut self) -> bool {
        if self.since_eval >= self.window_len && self.outcomes.len() == self.window_len {
            self.since_eval = 0;
            true
        } else {
            false
        }
    }

    pub fn clear(&mut self) {
        self.outcomes.clear();
        self.nacks = 0;
        self.since_eval = 0;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LinkAdaptConfig {
    pub target_bler: f64,
    pub hysteresis: f64,
    /// Consecutive low-BLER evaluations required before stepping up.
    pub hold_windows: usize,
    pub window_len: usize,
}

impl Default for LinkAdaptConfig {
    fn default() -> Self {
        Self { target_bler: 0.05, hysteresis: 0.01, hold_windows: 2, window_len: 100 }
    }
}

/// Count of consecutive evaluations below the lower band edge.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct HoldState {
    pub low_streak: usize,
}

/// One controller step.
pub fn adapt_mcs(bler: f64, current_mcs: usize, cfg: &LinkAdaptConfig, hold: &mut HoldState) -> usize {
    let top = NUM_MCS - 1;
    let mcs = current_mcs.min(top);
    if bler > cfg.target_bler + cfg.hysteresis {
        hold.low_streak = 0;
        mcs.saturating_sub(1)
    } else if bler < cfg.target_bler - cfg.hysteresis {
        hold.low_streak += 1;
        if hold.low_streak >= cfg.hold_windows {
            hold.low_streak = 0;
            (mcs + 1).min(top)
        } else {
            mcs
        }
    } else {
        hold.low_streak = 0;
        mcs
    }
}

/// Per-UE loop state: window, hold counter and current MCS.
#[derive(Debug, Clone, PartialEq)]
pub struct LinkAdapter {
    pub window: BlerWindow,
    pub hold: HoldState,
    pub mcs: usize,
}

impl LinkAdapter {
    pub fn new(mcs: usize, cfg: &LinkAdaptConfig) -> Self {
        Self { window: BlerWindow::new(cfg.window_len), hold: HoldState::default(), mcs: mcs.min(NUM_MCS - 1) }
    }

    /// Feeds one outcome and returns the MCS for the next grant.
    pub fn on_feedback(&mut self, nack: bool, cfg: &LinkAdaptConfig) -> usize {
        self.window.record(nack);
        if self.window.take_evaluation() {
            let next = adapt_mcs(self.window.current_bler(), self.mcs, cfg, &mut self.hold);
            if next != self.mcs {
                self.mcs = next;
                self.window.clear();
            }
        }
        self.mcs
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn window_examples() {
        let mut w = BlerWindow::new(100);
        (0..100).for_each(|_| w.record(false));
        assert_eq!(w.current_bler(), 0.0);
        (0..95).for_each(|_| w.record(false));
        (0..5).for_each(|_| w.record(true));
        assert!((w.current_bler() - 0.05).abs() < 1e-12);
        (0..100).for_each(|i| w.record(i % 2 == 0));
        assert!((w.current_bler() - 0.5).abs() < 1e-12);
    }

    #[test]
    fn rule_examples() {
        let cfg = LinkAdaptConfig::default();
        let mut h = HoldState::default();
        assert_eq!(adapt_mcs(0.08, 10, &cfg, &mut h), 9);
        assert_eq!(adapt_mcs(0.05, 10, &cfg, &mut h), 10);
        assert_eq!(adapt_mcs(0.9, 0, &cfg, &mut h), 0);
        for _ in 1..cfg.hold_windows {
            assert_eq!(adapt_mcs(0.0, 10, &cfg, &mut h), 10);
        }
        assert_eq!(adapt_mcs(0.0, 10, &cfg, &mut h), 11);
        for _ in 0..cfg.hold_windows {
            adapt_mcs(0.0, NUM_MCS - 1, &cfg, &mut h);
        }
        assert_eq!(adapt_mcs(0.0, NUM_MCS - 1, &cfg, &mut HoldState { low_streak: cfg.hold_windows - 1 }), NUM_MCS - 1);
    }

    #[test]
    fn adapter_steps_once_per_window() {
        let cfg = LinkAdaptConfig::default();
        let mut a = LinkAdapter::new(12, &cfg);
        for i in 0..99 {
            assert_eq!(a.on_feedback(i % 5 == 0, &cfg), 12);
        }
        assert_eq!(a.on_feedback(false, &cfg), 11);
        assert!(a.window.is_empty());
    }

    proptest! {
        #[test]
        fn mcs_stays_in_table(bler in 0.0f64..1.0, mcs in 0usize..40, streak in 0usize..10) {
            let mut h = HoldState { low_streak: streak };
            let next = adapt_mcs(bler, mcs, &LinkAdaptConfig::default(), &mut h);
            prop_assert!(next < NUM_MCS);
        }

        #[test]
        fn higher_bler_never_steps_higher(b1 in 0.0f64..1.0, b2 in 0.0f64..1.0, mcs in 0usize..28, streak in 0usize..10) {
            let (lo, hi) = if b1 <= b2 { (b1, b2) } else { (b2, b1) };
            let cfg = LinkAdaptConfig::default();
            let a = adapt_mcs(lo, mcs, &cfg, &mut HoldState { low_streak: streak });
            let b = adapt_mcs(hi, mcs, &cfg, &mut HoldState { low_streak: streak });
            prop_assert!(b <= a);
        }
    }
}
