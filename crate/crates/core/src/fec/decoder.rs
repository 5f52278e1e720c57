//! Iterative belief-propagation decoding with per-iteration state access.

use super::code::LdpcCode;
use super::crc::crc_check;
use crate::{Error, Result};
use serde::{Deserialize, Serialize};

/// Message magnitude cap; keeps noiseless inputs finite.
pub const LLR_CLAMP: f32 = 1.0e4;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BpVariant {
    /// Normalized min-sum with the given scale on check-to-variable messages.
    MinSum { scale: f32 },
    SumProduct,
}

impl Default for BpVariant {
    fn default() -> Self {
        BpVariant::MinSum { scale: 0.75 }
    }
}

/// Message-passing order within one iteration.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Schedule {
    /// All checks update from the previous iteration's posteriors.
    Flooding,
    /// Checks update in row order, each seeing the posteriors left by the previous one.
    #[default]
    Layered,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DecoderConfig {
    pub variant: BpVariant,
    #[serde(default)]
    pub schedule: Schedule,
    /// Iteration cap.
    pub i_max: usize,
    /// Nominal iteration count of a full decode for the cost model.
    pub i_ref: usize,
    /// Decoding rate of one core, information bits per microsecond.
    pub per_core_rate: f64,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self { variant: BpVariant::default(), schedule: Schedule::default(), i_max: 20, i_ref: 8, per_core_rate: 250.0 }
    }
}

impl DecoderConfig {
    /// Virtual cost of one iteration over `bits` information bits.
    ///
    /// A full decode at `i_ref` iterations costs `bits / per_core_rate`.
    pub fn iteration_cost_us(&self, bits: usize) -> f64 {
        bits as f64 / (self.per_core_rate * self.i_ref as f64)
    }
}

/// Decoding context of one code block.
#[derive(Debug, Clone, PartialEq)]
pub struct DecoderState {
    /// Posterior LLRs, one per codeword bit (positive favours 0).
    pub llr: Vec<f32>,
    pub iteration: usize,
    pub hard_decision: Vec<u8>,
    /// Code-block CRC over the information hard decisions; an information bit
    /// with LLR exactly zero counts as erased and fails it.
    pub crc_passed: bool,
    pub cumulative_cost_us: f64,
    channel: Vec<f32>,
    c2v: Vec<f32>,
}

impl DecoderState {
    /// Fresh state from channel LLRs. CRC is first checked after an iteration.
    pub fn new(channel_llr: Vec<f32>, code: &LdpcCode) -> Self {
        let mut s = Self::resume(channel_llr, 0, 0.0, code);
        s.crc_passed = false;
        s
    }

    /// Starts a new message-passing run from `llr` while keeping the
    /// iteration count and cost already spent elsewhere.
    pub fn resume(llr: Vec<f32>, iteration: usize, cost_us: f64, code: &LdpcCode) -> Self {
        assert_eq!(llr.len(), code.n(), "LLR vector length must equal n");
        let mut s = Self {
            hard_decision: Vec::new(),
            crc_passed: false,
            iteration,
            cumulative_cost_us: cost_us,
            c2v: vec![0.0; code.edge_var.len()],
            channel: llr.clone(),
            llr,
        };
        s.refresh(code);
        s
    }

    fn refresh(&mut self, code: &LdpcCode) {
        self.hard_decision = self.llr.iter().map(|&l| u8::from(l < 0.0)).collect();
        let erased = code.info_positions().iter().any(|&p| self.llr[p] == 0.0);
        self.crc_passed = !erased && crc_check(&code.extract_info(&self.hard_decision));
    }

    pub fn mean_abs_llr(&self) -> f64 {
        self.llr.iter().map(|l| f64::from(l.abs())).sum::<f64>() / self.llr.len() as f64
    }

    /// Information-bit hard decisions (payload followed by CRC).
    pub fn info_bits(&self, code: &LdpcCode) -> Vec<u8> {
        code.extract_info(&self.hard_decision)
    }

    /// One full check/variable message pass.
    pub fn iterate(&mut self, code: &LdpcCode, cfg: &DecoderConfig) -> Result<()> {
        if self.iteration >= cfg.i_max {
            return Err(Error::Precondition(format!(
                "iteration {} already at cap {}",
                self.iteration, cfg.i_max
            )));
        }
        let mut scratch: Vec<f32> = Vec::with_capacity(32);
        let layered = cfg.schedule == Schedule::Layered;
        for c in 0..code.check_start.len() - 1 {
            let (s, t) = (code.check_start[c] as usize, code.check_start[c + 1] as usize);
            scratch.clear();
            scratch.extend((s..t).map(|e| self.llr[code.edge_var[e] as usize] - self.c2v[e]));
            match cfg.variant {
                BpVariant::MinSum { scale } => min_sum_check(&scratch, &mut self.c2v[s..t], scale),
                BpVariant::SumProduct => sum_product_check(&scratch, &mut self.c2v[s..t]),
            }
            if layered {
                for (j, e) in (s..t).enumerate() {
                    self.llr[code.edge_var[e] as usize] =
                        (scratch[j] + self.c2v[e]).clamp(-LLR_CLAMP, LLR_CLAMP);
                }
            }
        }
        if !layered {
            self.llr.copy_from_slice(&self.channel);
            for (e, &v) in code.edge_var.iter().enumerate() {
                self.llr[v as usize] += self.c2v[e];
            }
        }
        self.iteration += 1;
        self.cumulative_cost_us += cfg.iteration_cost_us(code.k());
        self.refresh(code);
        Ok(())
    }

    /// Iterates until CRC passes or the cap is hit; returns whether it passed.
    pub fn run_to_completion(&mut self, code: &LdpcCode, cfg: &DecoderConfig) -> bool {
        while !self.crc_passed && self.iteration < cfg.i_max {
            self.iterate(code, cfg).expect("below cap");
        }
        self.crc_passed
    }
}

/// Functional form of [`DecoderState::iterate`].
pub fn run_iteration(mut state: DecoderState, code: &LdpcCode, cfg: &DecoderConfig) -> Result<DecoderState> {
    state.iterate(code, cfg)?;
    Ok(state)
}

fn min_sum_check(v2c: &[f32], out: &mut [f32], scale: f32) {
    let mut min1 = f32::INFINITY;
    let mut min2 = f32::INFINITY;
    let mut at = 0;
    let mut neg = false;
    for (i, &m) in v2c.iter().enumerate() {
        let a = m.abs();
        neg ^= m < 0.0;
        if a < min1 {
            min2 = min1;
            min1 = a;
            at = i;
        } else if a < min2 {
            min2 = a;
        }
    }
    for (i, (o, &m)) in out.iter_mut().zip(v2c).enumerate() {
        let mag = if i == at { min2 } else { min1 };
        let sign_neg = neg ^ (m < 0.0);
        let v = (scale * mag).min(LLR_CLAMP);
        *o = if sign_neg { -v } else { v };
    }
}

fn sum_product_check(v2c: &[f32], out: &mut [f32]) {
    const T_MAX: f64 = 1.0 - 1e-12;
    let t: Vec<f64> = v2c
        .iter()
        .map(|&m| (f64::from(m) / 2.0).tanh().clamp(-T_MAX, T_MAX))
        .collect();
    for (i, o) in out.iter_mut().enumerate() {
        let p: f64 = t.iter().enumerate().filter(|&(j, _)| j != i).map(|(_, x)| x).product();
        let v = 2.0 * p.clamp(-T_MAX, T_MAX).atanh();
        *o = (v as f32).clamp(-LLR_CLAMP, LLR_CLAMP);
    }
}
