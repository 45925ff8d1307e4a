//! Repeater power consumption and sleep control.
//!
//! Per-block power-minimizing gains over an observation window are
//! thresholded into activation indicators, which an OR or majority rule turns
//! into a long-horizon active/sleep state per repeater. Active repeaters then
//! either amplify at full gain (long-term control) or have their gains
//! re-optimized every block (short-term control).

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::channel::ChannelRealization;
use crate::mimo;
use crate::optimizer::{self, CcpSettings, MinPowOutcome};
use crate::scenario::ScenarioConfig;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PowerModel {
    pub p_stat: f64,
    pub delta_p: f64,
    pub p_sleep: f64,
}

impl Default for PowerModel {
    fn default() -> Self {
        Self { p_stat: 24.26, delta_p: 2.0, p_sleep: 4.72 }
    }
}

impl PowerModel {
    pub fn from_config(config: &ScenarioConfig) -> Self {
        Self { p_stat: config.p_stat_w, delta_p: config.delta_p, p_sleep: config.p_sleep_w }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RepeaterState {
    Active,
    Sleep,
}

impl RepeaterState {
    pub fn is_active(self) -> bool {
        self == RepeaterState::Active
    }
}

/// Consumption of one repeater transmitting `p_out` watts.
pub fn repeater_power(state: RepeaterState, p_out: f64, model: &PowerModel) -> f64 {
    match state {
        RepeaterState::Active => model.p_stat + model.delta_p * p_out,
        RepeaterState::Sleep => model.p_sleep,
    }
}

pub fn activation_indicator(alpha: f64, alpha_thr: f64) -> bool {
    alpha > alpha_thr
}

/// Active iff the repeater was in use in any block.
pub fn or_rule(column: &[bool]) -> RepeaterState {
    if column.iter().any(|b| *b) {
        RepeaterState::Active
    } else {
        RepeaterState::Sleep
    }
}

/// Active iff the repeater was in use in strictly more than half the blocks.
pub fn majority_rule(column: &[bool]) -> RepeaterState {
    let on = column.iter().filter(|b| **b).count();
    if 2 * on > column.len() {
        RepeaterState::Active
    } else {
        RepeaterState::Sleep
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DecisionRule {
    Or,
    Majority,
}

impl DecisionRule {
    pub fn apply(self, column: &[bool]) -> RepeaterState {
        match self {
            DecisionRule::Or => or_rule(column),
            DecisionRule::Majority => majority_rule(column),
        }
    }
}

/// `T x L` indicator matrix, one row per observed block.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ActivationIndicators {
    rows: Vec<Vec<bool>>,
    repeaters: usize,
}

impl ActivationIndicators {
    pub fn new(rows: Vec<Vec<bool>>, repeaters: usize) -> Result<Self> {
        if let Some(bad) = rows.iter().find(|r| r.len() != repeaters) {
            return Err(Error::Dimension(format!("indicator row has {} entries, expected {repeaters}", bad.len())));
        }
        Ok(Self { rows, repeaters })
    }

    /// Thresholds per-block gains against per-block, per-repeater thresholds.
    pub fn from_gains(gains: &[Vec<f64>], thresholds: &[Vec<f64>], repeaters: usize) -> Result<Self> {
        let rows = gains
            .iter()
            .zip(thresholds)
            .map(|(a, thr)| a.iter().zip(thr).map(|(a, t)| activation_indicator(*a, *t)).collect())
            .collect();
        Self::new(rows, repeaters)
    }

    pub fn window(&self) -> usize {
        self.rows.len()
    }

    pub fn num_repeaters(&self) -> usize {
        self.repeaters
    }

    pub fn get(&self, t: usize, l: usize) -> bool {
        self.rows[t][l]
    }

    pub fn column(&self, l: usize) -> Vec<bool> {
        self.rows.iter().map(|r| r[l]).collect()
    }

    pub fn decide(&self, rule: DecisionRule) -> Vec<RepeaterState> {
        (0..self.repeaters).map(|l| rule.apply(&self.column(l))).collect()
    }
}

/// Gain limits shared by every schedule of one setup.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GainLimits {
    pub alpha_max: f64,
    pub p_max: f64,
}

impl GainLimits {
    pub fn from_config(config: &ScenarioConfig) -> Result<Self> {
        Ok(Self { alpha_max: config.alpha_max()?, p_max: config.p_max_w })
    }

    pub fn upper(&self, real: &ChannelRealization, active: Option<&[bool]>) -> Vec<f64> {
        mimo::gain_upper_bounds(real, self.alpha_max, self.p_max, active)
    }
}

/// Runs power minimization on every observed block with all repeaters
/// available and thresholds the gains at `thr_fraction` of each box bound.
pub fn collect_indicators(
    blocks: &[ChannelRealization],
    limits: &GainLimits,
    settings: &CcpSettings,
    sinr_thresholds: &[f64],
    thr_fraction: f64,
) -> Result<(ActivationIndicators, Vec<MinPowOutcome>)> {
    let repeaters = blocks.first().map_or(0, |b| b.num_repeaters());
    let runs: Vec<(Vec<f64>, MinPowOutcome)> = blocks
        .par_iter()
        .map(|real| {
            let upper = limits.upper(real, None);
            let out = optimizer::minpow_fpp(real, settings, &upper, sinr_thresholds)?;
            Ok((upper, out))
        })
        .collect::<Result<_>>()?;
    let gains: Vec<Vec<f64>> = runs.iter().map(|(_, o)| o.alpha.clone()).collect();
    let thresholds: Vec<Vec<f64>> = runs.iter().map(|(u, _)| u.iter().map(|x| x * thr_fraction).collect()).collect();
    let indicators = ActivationIndicators::from_gains(&gains, &thresholds, repeaters)?;
    Ok((indicators, runs.into_iter().map(|(_, o)| o).collect()))
}

/// Repeater states plus the gains used in every evaluated block.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SleepSchedule {
    pub states: Vec<RepeaterState>,
    /// One gain vector per block; sleeping repeaters are 0 throughout.
    pub alpha: Vec<Vec<f64>>,
    /// False where the block's optimization was infeasible and fell back to
    /// full gain on the active set.
    pub feasible: Vec<bool>,
    /// False where the block's optimization hit its iteration cap.
    #[serde(default)]
    pub converged: Vec<bool>,
}

impl SleepSchedule {
    pub fn num_active(&self) -> usize {
        self.states.iter().filter(|s| s.is_active()).count()
    }

    pub fn active_mask(&self) -> Vec<bool> {
        self.states.iter().map(|s| s.is_active()).collect()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }
}

/// Every active repeater amplifies at its largest feasible gain.
pub fn long_term_schedule(states: &[RepeaterState], blocks: &[ChannelRealization], limits: &GainLimits) -> SleepSchedule {
    let mask: Vec<bool> = states.iter().map(|s| s.is_active()).collect();
    SleepSchedule {
        states: states.to_vec(),
        alpha: blocks.iter().map(|b| limits.upper(b, Some(&mask))).collect(),
        feasible: vec![true; blocks.len()],
        converged: vec![true; blocks.len()],
    }
}

/// All repeaters active at full gain.
pub fn maxpow_schedule(blocks: &[ChannelRealization], limits: &GainLimits) -> SleepSchedule {
    let l = blocks.first().map_or(0, |b| b.num_repeaters());
    long_term_schedule(&vec![RepeaterState::Active; l], blocks, limits)
}

/// Gains of the active repeaters re-optimized per block by power
/// minimization; sleeping repeaters are held at zero gain.
pub fn short_term_schedule(
    states: &[RepeaterState],
    blocks: &[ChannelRealization],
    sinr_thresholds: &[f64],
    limits: &GainLimits,
    settings: &CcpSettings,
) -> Result<SleepSchedule> {
    let mask: Vec<bool> = states.iter().map(|s| s.is_active()).collect();
    let per_block: Vec<(Vec<f64>, bool, bool)> = blocks
        .par_iter()
        .map(|real| {
            let upper = limits.upper(real, Some(&mask));
            let out = optimizer::minpow_fpp(real, settings, &upper, sinr_thresholds)?;
            Ok(if out.feasible { (out.alpha, true, out.converged) } else { (upper, false, out.converged) })
        })
        .collect::<Result<_>>()?;
    let mut schedule =
        SleepSchedule { states: states.to_vec(), alpha: Vec::new(), feasible: Vec::new(), converged: Vec::new() };
    for (a, f, c) in per_block {
        schedule.alpha.push(a);
        schedule.feasible.push(f);
        schedule.converged.push(c);
    }
    Ok(schedule)
}

/// Total consumption of all repeaters in one block.
pub fn block_power(states: &[RepeaterState], alpha: &[f64], real: &ChannelRealization, model: &PowerModel) -> f64 {
    states
        .iter()
        .enumerate()
        .map(|(l, s)| {
            let p_out = if s.is_active() { mimo::repeater_output_power(real, alpha, l) } else { 0.0 };
            repeater_power(*s, p_out, model)
        })
        .sum()
}

/// Mean over blocks of the total repeater consumption.
pub fn total_power(schedule: &SleepSchedule, blocks: &[ChannelRealization], model: &PowerModel) -> Result<f64> {
    if schedule.alpha.len() != blocks.len() {
        return Err(Error::Dimension(format!(
            "schedule covers {} blocks, got {} realizations",
            schedule.alpha.len(),
            blocks.len()
        )));
    }
    if blocks.is_empty() {
        return Ok(0.0);
    }
    let sum: f64 = schedule
        .alpha
        .iter()
        .zip(blocks)
        .map(|(a, b)| block_power(&schedule.states, a, b, model))
        .sum();
    Ok(sum / blocks.len() as f64)
}

/// Per-block minimum SINR over UEs under a schedule.
pub fn schedule_min_sinrs(schedule: &SleepSchedule, blocks: &[ChannelRealization]) -> Result<Vec<f64>> {
    schedule
        .alpha
        .iter()
        .zip(blocks)
        .map(|(a, b)| Ok(mimo::lmmse_sinrs(b, a)?.into_iter().fold(f64::INFINITY, f64::min)))
        .collect()
}
