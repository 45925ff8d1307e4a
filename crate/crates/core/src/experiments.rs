//! Monte-Carlo experiment drivers, configuration and result emission.
//!
//! Every experiment is a pure function of its [`ExperimentConfig`]: UE drops,
//! large-scale parameters and per-block fading come from seed substreams keyed
//! by `(purpose, drop[, block])`, and drops are evaluated in parallel and
//! reassembled in order.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::channel::{draw_channels, draw_large_scale, ChannelRealization, LargeScale};
use crate::energy::{self, DecisionRule, GainLimits, PowerModel, SleepSchedule};
use crate::mimo;
use crate::optimizer::{self, CcpSettings, TraceRow};
use crate::scenario::{self, Deployment, Point3, ScenarioConfig};
use crate::seeding::{purpose, stream};
use crate::{linear_to_db, sinr_for_se, spectral_efficiency, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExperimentKind {
    SinrCdf,
    PruningSweep,
    MaxminEdge,
    EnergyTradeoff,
}

impl ExperimentKind {
    pub fn name(self) -> &'static str {
        match self {
            ExperimentKind::SinrCdf => "sinr-cdf",
            ExperimentKind::PruningSweep => "pruning-sweep",
            ExperimentKind::MaxminEdge => "maxmin-edge",
            ExperimentKind::EnergyTradeoff => "energy-tradeoff",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum UePlacement {
    Uniform,
    CellEdge,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OutageMode {
    /// A setup is in outage when its block-averaged minimum SE misses the target.
    PerSetup,
    /// Fraction of blocks whose minimum SE misses the target.
    PerBlock,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub experiment: ExperimentKind,
    pub preset: String,
    pub scenario: ScenarioConfig,
    pub drops: usize,
    pub blocks_per_drop: usize,
    /// Repeater counts compared by the SINR CDF experiment.
    pub repeater_counts: Vec<usize>,
    /// Target fractions of repeaters removed by the pruning sweep.
    pub prune_fractions: Vec<f64>,
    /// Observation window T of the sleep decision.
    pub window: usize,
    pub se_target: f64,
    pub lambda: Option<f64>,
    /// Activation threshold as a fraction of each repeater's gain bound.
    pub alpha_thr_fraction: f64,
    pub ue_placement: UePlacement,
    pub outage: OutageMode,
    pub include_cellfree: bool,
    pub write_traces: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            experiment: ExperimentKind::SinrCdf,
            preset: "custom".into(),
            scenario: ScenarioConfig::default(),
            drops: 100,
            blocks_per_drop: 50,
            repeater_counts: vec![64],
            prune_fractions: vec![0.0, 0.18, 0.5],
            window: 5,
            se_target: 1.5,
            lambda: None,
            alpha_thr_fraction: 1e-4,
            ue_placement: UePlacement::Uniform,
            outage: OutageMode::PerSetup,
            include_cellfree: true,
            write_traces: false,
        }
    }
}

pub const PRESETS: [&str; 8] = [
    "paper-fig1",
    "desk-fig1",
    "paper-fig2",
    "desk-fig2",
    "paper-fig3",
    "desk-fig3",
    "paper-fig4",
    "desk-fig4",
];

impl ExperimentConfig {
    pub fn preset(name: &str) -> Result<Self> {
        let full = ScenarioConfig::default();
        let desk = ScenarioConfig::preset("desk")?;
        let base = Self { preset: name.to_string(), ..Self::default() };
        let cfg = match name {
            "paper-fig1" => Self { repeater_counts: vec![16, 64, 100, 400], scenario: full, ..base },
            "desk-fig1" => Self { repeater_counts: vec![16], scenario: desk, drops: 20, blocks_per_drop: 10, ..base },
            "paper-fig2" | "desk-fig2" => {
                let desk_scale = name == "desk-fig2";
                Self {
                    experiment: ExperimentKind::PruningSweep,
                    prune_fractions: vec![0.0, 0.18, 0.5, 0.75, 1.0],
                    scenario: if desk_scale { desk } else { full },
                    drops: if desk_scale { 20 } else { 100 },
                    blocks_per_drop: if desk_scale { 10 } else { 50 },
                    ..base
                }
            }
            "paper-fig3" | "desk-fig3" => {
                let desk_scale = name == "desk-fig3";
                Self {
                    experiment: ExperimentKind::MaxminEdge,
                    ue_placement: UePlacement::CellEdge,
                    scenario: if desk_scale { desk } else { full },
                    drops: if desk_scale { 20 } else { 100 },
                    blocks_per_drop: 1,
                    ..base
                }
            }
            "paper-fig4" => Self {
                experiment: ExperimentKind::EnergyTradeoff,
                scenario: ScenarioConfig { num_ues: 4, ..full },
                include_cellfree: false,
                ..base
            },
            "desk-fig4" => Self {
                experiment: ExperimentKind::EnergyTradeoff,
                scenario: desk,
                drops: 10,
                blocks_per_drop: 10,
                include_cellfree: false,
                ..base
            },
            other => return Err(Error::Config(format!("unknown experiment preset `{other}`"))),
        };
        Ok(cfg)
    }

    /// Default preset for an experiment kind.
    pub fn default_preset(kind: ExperimentKind) -> &'static str {
        match kind {
            ExperimentKind::SinrCdf => "desk-fig1",
            ExperimentKind::PruningSweep => "desk-fig2",
            ExperimentKind::MaxminEdge => "desk-fig3",
            ExperimentKind::EnergyTradeoff => "desk-fig4",
        }
    }

    /// Repeater counts swept by the SINR CDF experiment.
    pub fn repeater_list(&self) -> Vec<usize> {
        if self.repeater_counts.is_empty() {
            vec![self.scenario.num_repeaters]
        } else {
            self.repeater_counts.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.drops == 0 {
            return fail("drops must be at least 1".into());
        }
        if self.blocks_per_drop == 0 {
            return fail("blocks_per_drop must be at least 1".into());
        }
        if !(self.se_target > 0.0 && self.se_target.is_finite()) {
            return fail(format!("se_target must be positive, got {}", self.se_target));
        }
        if self.window == 0
            || (self.experiment == ExperimentKind::EnergyTradeoff && self.window > self.blocks_per_drop)
        {
            return fail(format!("window must be in 1..={}, got {}", self.blocks_per_drop, self.window));
        }
        if let Some(l) = self.lambda {
            if !(l > 0.0 && l.is_finite()) {
                return fail(format!("lambda must be positive, got {l}"));
            }
        }
        if !(0.0..1.0).contains(&self.alpha_thr_fraction) {
            return fail(format!("alpha_thr_fraction must be in [0, 1), got {}", self.alpha_thr_fraction));
        }
        if self.prune_fractions.iter().any(|f| !(0.0..=1.0).contains(f)) {
            return fail("prune_fractions must lie in [0, 1]".into());
        }
        if self.scenario.num_ues == 0 {
            return fail("num_ues must be at least 1".into());
        }
        self.scenario.validate()?;
        if self.experiment == ExperimentKind::SinrCdf {
            for l in self.repeater_list() {
                self.scenario_with(l).validate()?;
            }
        }
        if self.include_cellfree {
            mimo::cellfree_ap_grid(&self.scenario)?;
        }
        Ok(())
    }

    fn scenario_with(&self, repeaters: usize) -> ScenarioConfig {
        ScenarioConfig { num_repeaters: repeaters, ..self.scenario.clone() }
    }

    pub fn ccp_settings(&self) -> CcpSettings {
        CcpSettings { lambda: self.lambda, ..CcpSettings::from_config(&self.scenario) }
    }

    /// Applies a `key=value` override. Keys are dotted paths into the
    /// configuration (`scenario.num_ues`) or one of the short aliases
    /// `L`, `K`, `M`, `T`, `seed`, `lambda`, `alpha_thr`. Values are parsed as
    /// JSON when possible and taken as strings otherwise.
    pub fn set(&mut self, assignment: &str) -> Result<()> {
        let (key, raw) = assignment
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override `{assignment}` is not of the form key=value")))?;
        let (key, raw) = (key.trim(), raw.trim());
        let value: Value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
        let mut tree = serde_json::to_value(&*self)?;
        let targets: Vec<(&str, Value)> = match key {
            "L" => vec![("scenario.num_repeaters", value.clone()), ("repeater_counts", Value::Array(vec![value]))],
            "K" => vec![("scenario.num_ues", value)],
            "M" => vec![("scenario.num_bs_antennas", value)],
            "T" => vec![("window", value)],
            "seed" => vec![("scenario.rng_seed", value)],
            "alpha_thr" => vec![("alpha_thr_fraction", value)],
            other => vec![(other, value)],
        };
        for (path, v) in targets {
            set_path(&mut tree, path, v)?;
        }
        *self = serde_json::from_value(tree).map_err(|e| Error::Config(format!("override `{assignment}`: {e}")))?;
        Ok(())
    }

    /// Parses TOML or JSON text. A `preset` key selects the base
    /// configuration that the remaining keys are merged into; a manifest
    /// written by [`emit_manifest`] is accepted as well.
    pub fn from_text(text: &str) -> Result<Self> {
        let mut value: Value = match serde_json::from_str(text) {
            Ok(v) => v,
            Err(_) => toml::from_str(text).map_err(|e| Error::Config(format!("config parse error: {e}")))?,
        };
        if let Some(inner) = value.get("config").filter(|v| v.is_object()) {
            value = inner.clone();
        }
        let base = match value.get("preset").and_then(Value::as_str) {
            Some(name) if PRESETS.contains(&name) => Self::preset(name)?,
            _ => Self::default(),
        };
        let mut tree = serde_json::to_value(base)?;
        merge(&mut tree, value);
        serde_json::from_value(tree).map_err(|e| Error::Config(format!("invalid config: {e}")))
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        Self::from_text(&fs::read_to_string(path)?)
    }
}

fn set_path(tree: &mut Value, path: &str, value: Value) -> Result<()> {
    let mut node = tree;
    for part in path.split('.') {
        node = node
            .as_object_mut()
            .and_then(|o| o.get_mut(part))
            .ok_or_else(|| Error::Config(format!("unknown config key `{path}`")))?;
    }
    *node = value;
    Ok(())
}

fn merge(base: &mut Value, patch: Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

/// Fixed geometry and large-scale state of one drop.
#[derive(Debug, Clone)]
pub struct DropContext {
    pub scenario: ScenarioConfig,
    pub deployment: Deployment,
    pub large_scale: LargeScale,
    pub drop: u64,
}

impl DropContext {
    pub fn new(scenario: &ScenarioConfig, ues: Vec<Point3>, drop: u64) -> Result<Self> {
        let deployment = Deployment::grid(scenario, ues)?;
        let mut rng = stream(scenario.rng_seed, &[purpose::LARGE_SCALE, drop]);
        let large_scale = draw_large_scale(scenario, &deployment, &mut rng);
        Ok(Self { scenario: scenario.clone(), deployment, large_scale, drop })
    }

    pub fn block(&self, block: u64) -> ChannelRealization {
        let mut rng = stream(self.scenario.rng_seed, &[purpose::SMALL_SCALE, self.drop, block]);
        draw_channels(&self.scenario, &self.deployment, &self.large_scale, &mut rng)
    }

    pub fn blocks(&self, count: usize) -> Vec<ChannelRealization> {
        (0..count as u64).map(|b| self.block(b)).collect()
    }
}

/// UE positions of drop `drop`.
pub fn drop_ues(config: &ExperimentConfig, drop: u64) -> Vec<Point3> {
    let s = &config.scenario;
    let mut rng = stream(s.rng_seed, &[purpose::UE_DROP, drop]);
    match config.ue_placement {
        UePlacement::Uniform => scenario::uniform_ue_drop(s.num_ues, s.area_side_m, s.ue_height_m, &mut rng),
        UePlacement::CellEdge => scenario::cell_edge_ue_drop(s.num_ues, s.area_side_m, s.ue_height_m, &mut rng),
    }
}

/// Per-block cell-free SINRs of one drop.
pub fn cellfree_blocks(scenario: &ScenarioConfig, ues: &[Point3], drop: u64, blocks: usize) -> Result<Vec<Vec<f64>>> {
    let aps = mimo::cellfree_ap_grid(scenario)?;
    let mut rng = stream(scenario.rng_seed, &[purpose::CELL_FREE_LARGE, drop]);
    let ls = mimo::draw_cellfree_large_scale(scenario, &aps, ues, &mut rng)?;
    (0..blocks as u64)
        .map(|b| {
            let mut rng = stream(scenario.rng_seed, &[purpose::CELL_FREE_SMALL, drop, b]);
            let h = mimo::draw_cellfree_channels(scenario, &ls, &mut rng);
            mimo::mmse_sinrs(&h, scenario.uplink_power_w, scenario.noise_power_w())
        })
        .collect()
}

/// Rows of an emitted CSV file.
pub trait CsvRow: Serialize {
    const HEADER: &'static [&'static str];
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CdfRow {
    pub system: String,
    #[serde(rename = "L")]
    pub repeaters: usize,
    pub sinr_db: f64,
}

impl CsvRow for CdfRow {
    const HEADER: &'static [&'static str] = &["system", "L", "sinr_db"];
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PruneRow {
    pub system: String,
    pub fraction_target: f64,
    pub fraction_removed: f64,
    pub threshold_m: f64,
    pub active: usize,
    pub sinr_db: f64,
}

impl CsvRow for PruneRow {
    const HEADER: &'static [&'static str] =
        &["system", "fraction_target", "fraction_removed", "threshold_m", "active", "sinr_db"];
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EdgeRow {
    pub system: String,
    pub drop: usize,
    pub block: usize,
    pub min_sinr_db: f64,
}

impl CsvRow for EdgeRow {
    const HEADER: &'static [&'static str] = &["system", "drop", "block", "min_sinr_db"];
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SetupRow {
    pub policy: String,
    pub setup: usize,
    pub power_w: f64,
    /// Block-averaged minimum SE over UEs.
    pub min_se: f64,
    pub outage: f64,
    pub active: usize,
    pub infeasible_blocks: usize,
}

impl CsvRow for SetupRow {
    const HEADER: &'static [&'static str] =
        &["policy", "setup", "power_w", "min_se", "outage", "active", "infeasible_blocks"];
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicySummary {
    pub policy: String,
    pub mean_power_w: f64,
    pub mean_min_se: f64,
    pub outage_probability: f64,
    /// `1 - mean_power / mean_power(MaxPow)`.
    pub power_reduction: f64,
}

impl CsvRow for PolicySummary {
    const HEADER: &'static [&'static str] =
        &["policy", "mean_power_w", "mean_min_se", "outage_probability", "power_reduction"];
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceEntry {
    pub run: String,
    pub iteration: usize,
    pub objective: f64,
    pub max_slack: f64,
    pub relative_change: f64,
}

impl CsvRow for TraceEntry {
    const HEADER: &'static [&'static str] = &["run", "iteration", "objective", "max_slack", "relative_change"];
}

fn trace_entries(run: String, rows: &[TraceRow]) -> Vec<TraceEntry> {
    rows.iter()
        .map(|r| TraceEntry {
            run: run.clone(),
            iteration: r.iteration,
            objective: r.objective,
            max_slack: r.max_slack,
            relative_change: r.relative_change,
        })
        .collect()
}

/// Everything an experiment produces.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub experiment: ExperimentKind,
    pub cdf: Vec<CdfRow>,
    pub pruning: Vec<PruneRow>,
    pub edge: Vec<EdgeRow>,
    pub setups: Vec<SetupRow>,
    pub summary: Vec<PolicySummary>,
    pub traces: Vec<TraceEntry>,
    pub stage_seconds: BTreeMap<String, f64>,
    pub optimizer_runs: usize,
    pub nonconverged_runs: usize,
}

impl MetricRecord {
    pub fn empty(experiment: ExperimentKind) -> Self {
        Self {
            experiment,
            cdf: Vec::new(),
            pruning: Vec::new(),
            edge: Vec::new(),
            setups: Vec::new(),
            summary: Vec::new(),
            traces: Vec::new(),
            stage_seconds: BTreeMap::new(),
            optimizer_runs: 0,
            nonconverged_runs: 0,
        }
    }

    /// Fraction of optimizer runs that hit the iteration cap.
    pub fn nonconvergence_rate(&self) -> f64 {
        if self.optimizer_runs == 0 {
            0.0
        } else {
            self.nonconverged_runs as f64 / self.optimizer_runs as f64
        }
    }

    /// SINR samples (dB) of one system in the CDF experiment.
    pub fn cdf_samples(&self, system: &str, repeaters: usize) -> Vec<f64> {
        self.cdf.iter().filter(|r| r.system == system && r.repeaters == repeaters).map(|r| r.sinr_db).collect()
    }

    pub fn edge_samples(&self, system: &str) -> Vec<f64> {
        self.edge.iter().filter(|r| r.system == system).map(|r| r.min_sinr_db).collect()
    }

    pub fn policy(&self, name: &str) -> Option<&PolicySummary> {
        self.summary.iter().find(|p| p.policy == name)
    }
}

pub const MMIMO: &str = "mMIMO";
pub const CFMMIMO: &str = "cfmMIMO";
pub const RA_MAXPOW: &str = "RA-MIMO-MaxPow";
pub const RA_MAXMIN: &str = "RA-MIMO-MaxMin";

pub fn run(config: &ExperimentConfig) -> Result<MetricRecord> {
    config.validate()?;
    let start = Instant::now();
    let mut record = match config.experiment {
        ExperimentKind::SinrCdf => run_sinr_cdf(config)?,
        ExperimentKind::PruningSweep => run_pruning_sweep(config)?,
        ExperimentKind::MaxminEdge => run_maxmin_edge(config)?,
        ExperimentKind::EnergyTradeoff => run_energy_tradeoff(config)?,
    };
    record.stage_seconds.insert("total".into(), start.elapsed().as_secs_f64());
    Ok(record)
}

fn db_rows(sinrs: &[f64]) -> impl Iterator<Item = f64> + '_ {
    sinrs.iter().map(|s| linear_to_db(*s))
}

fn min_of(v: &[f64]) -> f64 {
    v.iter().copied().fold(f64::INFINITY, f64::min)
}

/// SINR samples of mMIMO, RA-MIMO with full gains at every configured
/// repeater count, and optionally cell-free MIMO.
pub fn run_sinr_cdf(config: &ExperimentConfig) -> Result<MetricRecord> {
    let counts = config.repeater_list();
    let blocks = config.blocks_per_drop;
    let per_drop: Vec<Vec<CdfRow>> = (0..config.drops as u64)
        .into_par_iter()
        .map(|d| -> Result<Vec<CdfRow>> {
            let ues = drop_ues(config, d);
            let mut rows = Vec::new();
            let mut direct = Vec::new();
            for (i, &l) in counts.iter().enumerate() {
                let scn = config.scenario_with(l);
                let ctx = DropContext::new(&scn, ues.clone(), d)?;
                let alpha_max = scn.alpha_max()?;
                for b in 0..blocks as u64 {
                    let real = ctx.block(b);
                    if i == 0 {
                        direct.extend(db_rows(&mimo::lmmse_sinrs(&real, &vec![0.0; l])?));
                    }
                    let upper = mimo::gain_upper_bounds(&real, alpha_max, scn.p_max_w, None);
                    rows.extend(db_rows(&mimo::lmmse_sinrs(&real, &upper)?).map(|s| CdfRow {
                        system: RA_MAXPOW.into(),
                        repeaters: l,
                        sinr_db: s,
                    }));
                }
            }
            let mut out: Vec<CdfRow> =
                direct.into_iter().map(|s| CdfRow { system: MMIMO.into(), repeaters: 0, sinr_db: s }).collect();
            out.extend(rows);
            if config.include_cellfree {
                for block in cellfree_blocks(&config.scenario, &ues, d, blocks)? {
                    out.extend(db_rows(&block).map(|s| CdfRow {
                        system: CFMMIMO.into(),
                        repeaters: config.scenario.num_bs_antennas,
                        sinr_db: s,
                    }));
                }
            }
            Ok(out)
        })
        .collect::<Result<_>>()?;
    let mut record = MetricRecord::empty(ExperimentKind::SinrCdf);
    record.cdf = per_drop.into_iter().flatten().collect();
    Ok(record)
}

/// SINR samples with repeaters nearest the BS removed, at full gains.
pub fn run_pruning_sweep(config: &ExperimentConfig) -> Result<MetricRecord> {
    let scn = &config.scenario;
    let alpha_max = scn.alpha_max()?;
    let per_drop: Vec<Vec<PruneRow>> = (0..config.drops as u64)
        .into_par_iter()
        .map(|d| -> Result<Vec<PruneRow>> {
            let ctx = DropContext::new(scn, drop_ues(config, d), d)?;
            let l = ctx.deployment.num_repeaters();
            let real_blocks = ctx.blocks(config.blocks_per_drop);
            let mut rows = Vec::new();
            for real in &real_blocks {
                rows.extend(db_rows(&mimo::lmmse_sinrs(real, &vec![0.0; l])?).map(|s| PruneRow {
                    system: MMIMO.into(),
                    fraction_target: 1.0,
                    fraction_removed: 1.0,
                    threshold_m: f64::INFINITY,
                    active: 0,
                    sinr_db: s,
                }));
            }
            for &frac in &config.prune_fractions {
                let threshold = scenario::threshold_for_fraction(&ctx.deployment, frac);
                let pruned = scenario::prune_by_bs_distance(&ctx.deployment, threshold);
                let active = pruned.num_active();
                let removed = if l == 0 { 0.0 } else { (l - active) as f64 / l as f64 };
                for real in &real_blocks {
                    let upper = mimo::gain_upper_bounds(real, alpha_max, scn.p_max_w, Some(&pruned.active_mask));
                    rows.extend(db_rows(&mimo::lmmse_sinrs(real, &upper)?).map(|s| PruneRow {
                        system: RA_MAXPOW.into(),
                        fraction_target: frac,
                        fraction_removed: removed,
                        threshold_m: threshold,
                        active,
                        sinr_db: s,
                    }));
                }
            }
            Ok(rows)
        })
        .collect::<Result<_>>()?;
    let mut record = MetricRecord::empty(ExperimentKind::PruningSweep);
    record.pruning = per_drop.into_iter().flatten().collect();
    Ok(record)
}

struct EdgeDrop {
    rows: Vec<EdgeRow>,
    traces: Vec<TraceEntry>,
    runs: usize,
    nonconverged: usize,
}

/// Minimum UE SINR per block under mMIMO, full gains, max-min control and
/// optionally cell-free MIMO.
pub fn run_maxmin_edge(config: &ExperimentConfig) -> Result<MetricRecord> {
    let scn = &config.scenario;
    let alpha_max = scn.alpha_max()?;
    let settings = config.ccp_settings();
    let per_drop: Vec<EdgeDrop> = (0..config.drops as u64)
        .into_par_iter()
        .map(|d| -> Result<EdgeDrop> {
            let ues = drop_ues(config, d);
            let ctx = DropContext::new(scn, ues.clone(), d)?;
            let l = ctx.deployment.num_repeaters();
            let mut out = EdgeDrop { rows: Vec::new(), traces: Vec::new(), runs: 0, nonconverged: 0 };
            let row = |system: &str, b: u64, sinr: f64| EdgeRow {
                system: system.into(),
                drop: d as usize,
                block: b as usize,
                min_sinr_db: linear_to_db(sinr),
            };
            for b in 0..config.blocks_per_drop as u64 {
                let real = ctx.block(b);
                let upper = mimo::gain_upper_bounds(&real, alpha_max, scn.p_max_w, None);
                out.rows.push(row(MMIMO, b, min_of(&mimo::lmmse_sinrs(&real, &vec![0.0; l])?)));
                out.rows.push(row(RA_MAXPOW, b, min_of(&mimo::lmmse_sinrs(&real, &upper)?)));
                let mm = optimizer::maxmin_ccp(&real, &settings, &upper)?;
                out.runs += 1;
                out.nonconverged += usize::from(!mm.converged);
                if config.write_traces {
                    out.traces.extend(trace_entries(format!("drop{d}-block{b}"), &mm.trace));
                }
                out.rows.push(row(RA_MAXMIN, b, mm.sinr_floor));
            }
            if config.include_cellfree {
                for (b, sinrs) in cellfree_blocks(scn, &ues, d, config.blocks_per_drop)?.iter().enumerate() {
                    out.rows.push(row(CFMMIMO, b as u64, min_of(sinrs)));
                }
            }
            Ok(out)
        })
        .collect::<Result<_>>()?;
    let mut record = MetricRecord::empty(ExperimentKind::MaxminEdge);
    for d in per_drop {
        record.rows_from_edge(d);
    }
    Ok(record)
}

impl MetricRecord {
    fn rows_from_edge(&mut self, d: EdgeDrop) {
        self.edge.extend(d.rows);
        self.traces.extend(d.traces);
        self.optimizer_runs += d.runs;
        self.nonconverged_runs += d.nonconverged;
    }
}

pub const POLICIES: [&str; 5] =
    ["MaxPow", "MinPow-long-OR", "MinPow-long-majority", "MinPow-short-OR", "MinPow-short-majority"];

/// Outcome of every policy on one setup.
#[derive(Debug, Clone)]
pub struct SetupOutcome {
    pub rows: Vec<SetupRow>,
    pub schedules: Vec<SleepSchedule>,
    pub traces: Vec<TraceEntry>,
    pub runs: usize,
    pub nonconverged: usize,
}

/// Evaluates the five control policies on one setup's blocks. The first
/// `window` blocks are observed to make the sleep decisions.
pub fn evaluate_setup(config: &ExperimentConfig, blocks: &[ChannelRealization], setup: usize) -> Result<SetupOutcome> {
    let scn = &config.scenario;
    let limits = GainLimits::from_config(scn)?;
    let settings = config.ccp_settings();
    let model = PowerModel::from_config(scn);
    let thresholds = vec![sinr_for_se(config.se_target); scn.num_ues];

    let (indicators, observed) =
        energy::collect_indicators(&blocks[..config.window], &limits, &settings, &thresholds, config.alpha_thr_fraction)?;
    let mut runs = observed.len();
    let mut nonconverged = observed.iter().filter(|o| !o.converged).count();
    let traces = if config.write_traces {
        observed.iter().enumerate().flat_map(|(t, o)| trace_entries(format!("setup{setup}-obs{t}"), &o.trace)).collect()
    } else {
        Vec::new()
    };
    let or_states = indicators.decide(DecisionRule::Or);
    let maj_states = indicators.decide(DecisionRule::Majority);

    let schedules = vec![
        energy::maxpow_schedule(blocks, &limits),
        energy::long_term_schedule(&or_states, blocks, &limits),
        energy::long_term_schedule(&maj_states, blocks, &limits),
        energy::short_term_schedule(&or_states, blocks, &thresholds, &limits, &settings)?,
        energy::short_term_schedule(&maj_states, blocks, &thresholds, &limits, &settings)?,
    ];
    runs += 2 * blocks.len();
    nonconverged += schedules[3..].iter().flat_map(|s| &s.converged).filter(|c| !**c).count();

    let target = config.se_target;
    let mut rows = Vec::with_capacity(POLICIES.len());
    for (name, schedule) in POLICIES.iter().zip(&schedules) {
        let power_w = energy::total_power(schedule, blocks, &model)?;
        let se: Vec<f64> =
            energy::schedule_min_sinrs(schedule, blocks)?.into_iter().map(spectral_efficiency).collect();
        let min_se = se.iter().sum::<f64>() / se.len() as f64;
        let outage = match config.outage {
            OutageMode::PerSetup => f64::from(u8::from(min_se < target)),
            OutageMode::PerBlock => se.iter().filter(|s| **s < target).count() as f64 / se.len() as f64,
        };
        rows.push(SetupRow {
            policy: (*name).into(),
            setup,
            power_w,
            min_se,
            outage,
            active: schedule.num_active(),
            infeasible_blocks: schedule.feasible.iter().filter(|f| !**f).count(),
        });
    }
    Ok(SetupOutcome { rows, schedules, traces, runs, nonconverged })
}

/// Power consumption, minimum SE and outage of the five control policies.
pub fn run_energy_tradeoff(config: &ExperimentConfig) -> Result<MetricRecord> {
    let per_setup: Vec<SetupOutcome> = (0..config.drops as u64)
        .into_par_iter()
        .map(|d| {
            let ctx = DropContext::new(&config.scenario, drop_ues(config, d), d)?;
            evaluate_setup(config, &ctx.blocks(config.blocks_per_drop), d as usize)
        })
        .collect::<Result<_>>()?;
    let mut record = MetricRecord::empty(ExperimentKind::EnergyTradeoff);
    for s in per_setup {
        record.setups.extend(s.rows);
        record.traces.extend(s.traces);
        record.optimizer_runs += s.runs;
        record.nonconverged_runs += s.nonconverged;
    }
    record.summary = summarize_policies(&record.setups);
    Ok(record)
}

pub fn summarize_policies(setups: &[SetupRow]) -> Vec<PolicySummary> {
    let mean = |name: &str, f: fn(&SetupRow) -> f64| {
        let v: Vec<f64> = setups.iter().filter(|r| r.policy == name).map(f).collect();
        if v.is_empty() {
            f64::NAN
        } else {
            v.iter().sum::<f64>() / v.len() as f64
        }
    };
    let base = mean(POLICIES[0], |r| r.power_w);
    POLICIES
        .iter()
        .map(|name| {
            let p = mean(name, |r| r.power_w);
            PolicySummary {
                policy: (*name).into(),
                mean_power_w: p,
                mean_min_se: mean(name, |r| r.min_se),
                outage_probability: mean(name, |r| r.outage),
                power_reduction: 1.0 - p / base,
            }
        })
        .collect()
}

/// Writes rows with an explicit header, so an empty table still has one.
pub fn write_csv<R: CsvRow>(path: &Path, rows: &[R]) -> Result<()> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_path(path).map_err(csv_error)?;
    w.write_record(R::HEADER).map_err(csv_error)?;
    for r in rows {
        w.serialize(r).map_err(csv_error)?;
    }
    w.flush()?;
    Ok(())
}

fn csv_error(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::Config(format!("csv error: {other:?}")),
    }
}

/// Writes `results.csv` (plus `summary.csv` for the energy experiment and
/// `trace.csv` when traces were recorded) and returns the written paths.
pub fn emit_csv(record: &MetricRecord, dir: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir)?;
    let results = dir.join("results.csv");
    match record.experiment {
        ExperimentKind::SinrCdf => write_csv(&results, &record.cdf)?,
        ExperimentKind::PruningSweep => write_csv(&results, &record.pruning)?,
        ExperimentKind::MaxminEdge => write_csv(&results, &record.edge)?,
        ExperimentKind::EnergyTradeoff => write_csv(&results, &record.setups)?,
    }
    let mut paths = vec![results];
    if record.experiment == ExperimentKind::EnergyTradeoff {
        let p = dir.join("summary.csv");
        write_csv(&p, &record.summary)?;
        paths.push(p);
    }
    if !record.traces.is_empty() {
        let p = dir.join("trace.csv");
        write_csv(&p, &record.traces)?;
        paths.push(p);
    }
    Ok(paths)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub config: ExperimentConfig,
    pub seed: u64,
    pub version: String,
    pub git_describe: String,
    pub stage_seconds: BTreeMap<String, f64>,
    pub optimizer_runs: usize,
    pub nonconverged_runs: usize,
    pub files: Vec<String>,
}

pub fn git_describe() -> String {
    std::process::Command::new("git")
        .args(["describe", "--always", "--dirty", "--tags"])
        .output()
        .ok()
        .filter(|o| o.status.success())
        .and_then(|o| String::from_utf8(o.stdout).ok())
        .map(|s| s.trim().to_string())
        .unwrap_or_else(|| "unknown".into())
}

pub fn emit_manifest(record: &MetricRecord, config: &ExperimentConfig, files: &[PathBuf], dir: &Path) -> Result<PathBuf> {
    fs::create_dir_all(dir)?;
    let manifest = Manifest {
        config: config.clone(),
        seed: config.scenario.rng_seed,
        version: env!("CARGO_PKG_VERSION").into(),
        git_describe: git_describe(),
        stage_seconds: record.stage_seconds.clone(),
        optimizer_runs: record.optimizer_runs,
        nonconverged_runs: record.nonconverged_runs,
        files: files.iter().filter_map(|p| p.file_name()).map(|n| n.to_string_lossy().into_owned()).collect(),
    };
    let path = dir.join("manifest.json");
    fs::write(&path, serde_json::to_string_pretty(&manifest)?)?;
    Ok(path)
}
