//! Deployments: base station, repeater grid, UE drops and pruning.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::{dbm_to_watts, Error, Result};

/// Stability caps on the repeater gain for square grid deployments,
/// as `(L, 10 log10 alpha_max)`.
const STABILITY_CAPS_DB: [(usize, f64); 4] = [(16, 70.0), (64, 58.0), (100, 54.0), (400, 42.0)];

/// Width of the cell-edge band used for edge UE drops, in meters.
const EDGE_BAND_M: f64 = 200.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Point2 {
    pub x: f64,
    pub y: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Point3 {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Point3 {
    pub fn new(x: f64, y: f64, z: f64) -> Self {
        Self { x, y, z }
    }

    pub fn ground(&self) -> Point2 {
        Point2 { x: self.x, y: self.y }
    }

    /// Horizontal (2D) distance.
    pub fn distance_2d(&self, other: &Point3) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }
}

/// Geometry, radio and power-model parameters of one scenario.
///
/// Powers are stored in watts; `alpha_max_db` is the gain cap in dB,
/// converted to the linear `alpha_max` as `10^(dB / 10)`. When it is `None`
/// the cap is looked up from the stability table for the current repeater
/// count.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScenarioConfig {
    pub area_side_m: f64,
    pub bs_height_m: f64,
    pub num_bs_antennas: usize,
    pub num_repeaters: usize,
    pub num_ues: usize,
    pub repeater_height_m: f64,
    pub ue_height_m: f64,
    pub uplink_power_w: f64,
    pub p_max_w: f64,
    pub alpha_max_db: Option<f64>,
    pub bandwidth_hz: f64,
    pub carrier_hz: f64,
    pub noise_figure_db: f64,
    pub k_factor_db: f64,
    pub p_stat_w: f64,
    pub delta_p: f64,
    pub p_sleep_w: f64,
    pub epsilon: f64,
    pub ccp_max_iter: usize,
    pub solver_max_iter: u32,
    pub rng_seed: u64,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            area_side_m: 2000.0,
            bs_height_m: 25.0,
            num_bs_antennas: 64,
            num_repeaters: 64,
            num_ues: 8,
            repeater_height_m: 15.0,
            ue_height_m: 1.5,
            uplink_power_w: dbm_to_watts(20.0),
            p_max_w: dbm_to_watts(38.0),
            alpha_max_db: None,
            bandwidth_hz: 20e6,
            carrier_hz: 3.5e9,
            noise_figure_db: 5.0,
            k_factor_db: 9.0,
            p_stat_w: 24.26,
            delta_p: 2.0,
            p_sleep_w: 4.72,
            epsilon: 1e-5,
            ccp_max_iter: 50,
            solver_max_iter: 100,
            rng_seed: 1,
        }
    }
}

impl ScenarioConfig {
    /// Named presets. `full` is the full-size parameter set; `desk` shrinks
    /// the array and the UE count for quick runs.
    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "full" => Ok(Self::default()),
            "desk" => Ok(Self {
                num_bs_antennas: 16,
                num_repeaters: 16,
                num_ues: 4,
                ..Self::default()
            }),
            other => Err(Error::Config(format!("unknown scenario preset `{other}`"))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("area_side_m", self.area_side_m),
            ("uplink_power_w", self.uplink_power_w),
            ("p_max_w", self.p_max_w),
            ("bandwidth_hz", self.bandwidth_hz),
            ("carrier_hz", self.carrier_hz),
            ("epsilon", self.epsilon),
            ("p_stat_w", self.p_stat_w),
            ("p_sleep_w", self.p_sleep_w),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        if self.num_bs_antennas == 0 {
            return Err(Error::Config("num_bs_antennas must be at least 1".into()));
        }
        if self.delta_p < 0.0 {
            return Err(Error::Config("delta_p must be nonnegative".into()));
        }
        if self.p_sleep_w >= self.p_stat_w {
            return Err(Error::Config("p_sleep_w must be below p_stat_w".into()));
        }
        if self.alpha_max()? <= 0.0 {
            return Err(Error::Config("alpha_max must be positive".into()));
        }
        Ok(())
    }

    /// Linear cap on the repeater gains.
    pub fn alpha_max(&self) -> Result<f64> {
        let db = match self.alpha_max_db {
            Some(db) => db,
            // No repeaters: the cap is never used.
            None if self.num_repeaters == 0 => 0.0,
            None => alpha_max_lookup(self.num_repeaters)?,
        };
        Ok(crate::db_to_linear(db))
    }

    pub fn k_factor(&self) -> f64 {
        crate::db_to_linear(self.k_factor_db)
    }

    pub fn bs_position(&self) -> Point3 {
        Point3::new(self.area_side_m / 2.0, self.area_side_m / 2.0, self.bs_height_m)
    }

    pub fn noise_power_w(&self) -> f64 {
        crate::channel::noise_power(self.bandwidth_hz, self.noise_figure_db)
    }
}

/// Cell centers of a `sqrt(L) x sqrt(L)` grid over a square of the given side,
/// in row-major order (x fastest).
pub fn grid_positions(count: usize, area_side: f64) -> Result<Vec<Point2>> {
    let n = (count as f64).sqrt().round() as usize;
    if n * n != count {
        return Err(Error::GridNotSquare(count));
    }
    let spacing = area_side / n as f64;
    let mut points = Vec::with_capacity(count);
    for row in 0..n {
        for col in 0..n {
            points.push(Point2 {
                x: spacing * (col as f64 + 0.5),
                y: spacing * (row as f64 + 0.5),
            });
        }
    }
    Ok(points)
}

/// Tabulated stability cap (dB) for a grid of `count` repeaters.
pub fn alpha_max_lookup(count: usize) -> Result<f64> {
    STABILITY_CAPS_DB
        .iter()
        .find(|(l, _)| *l == count)
        .map(|(_, db)| *db)
        .ok_or(Error::NoStabilityCap(count))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Deployment {
    pub bs_position: Point3,
    pub repeater_positions: Vec<Point3>,
    pub ue_positions: Vec<Point3>,
    pub active_mask: Vec<bool>,
}

impl Deployment {
    /// Grid repeater deployment with every repeater active.
    pub fn grid(config: &ScenarioConfig, ue_positions: Vec<Point3>) -> Result<Self> {
        let repeater_positions = grid_positions(config.num_repeaters, config.area_side_m)?
            .into_iter()
            .map(|p| Point3::new(p.x, p.y, config.repeater_height_m))
            .collect::<Vec<_>>();
        Ok(Self {
            bs_position: config.bs_position(),
            active_mask: vec![true; repeater_positions.len()],
            repeater_positions,
            ue_positions,
        })
    }

    pub fn num_repeaters(&self) -> usize {
        self.repeater_positions.len()
    }

    pub fn num_ues(&self) -> usize {
        self.ue_positions.len()
    }

    pub fn num_active(&self) -> usize {
        self.active_mask.iter().filter(|a| **a).count()
    }

    /// Ground distance from every repeater to the BS.
    pub fn repeater_bs_distances(&self) -> Vec<f64> {
        self.repeater_positions
            .iter()
            .map(|p| p.distance_2d(&self.bs_position))
            .collect()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }
}

/// Deactivates every repeater closer to the BS (2D) than `threshold_m`.
/// Positions and the stability cap are left untouched.
pub fn prune_by_bs_distance(deployment: &Deployment, threshold_m: f64) -> Deployment {
    let mut pruned = deployment.clone();
    for (active, d) in pruned
        .active_mask
        .iter_mut()
        .zip(deployment.repeater_bs_distances())
    {
        if d < threshold_m {
            *active = false;
        }
    }
    pruned
}

/// Smallest pruning threshold that removes at least `round(fraction * L)`
/// repeaters. Ties in BS distance are removed together.
pub fn threshold_for_fraction(deployment: &Deployment, fraction: f64) -> f64 {
    let mut d = deployment.repeater_bs_distances();
    if d.is_empty() {
        return 0.0;
    }
    d.sort_by(|a, b| a.total_cmp(b));
    let target = (fraction.clamp(0.0, 1.0) * d.len() as f64).round() as usize;
    if target == 0 {
        return 0.0;
    }
    if target >= d.len() {
        return d[d.len() - 1] + 1.0;
    }
    let cut = d[target - 1];
    match d[target..].iter().find(|x| **x > cut + 1e-9) {
        Some(next) => 0.5 * (cut + next),
        None => cut + 1.0,
    }
}

/// `count` UEs uniformly over the whole square.
pub fn uniform_ue_drop<R: Rng + ?Sized>(count: usize, area_side: f64, ue_height: f64, rng: &mut R) -> Vec<Point3> {
    (0..count)
        .map(|_| {
            Point3::new(
                rng.random::<f64>() * area_side,
                rng.random::<f64>() * area_side,
                ue_height,
            )
        })
        .collect()
}

/// `count` UEs uniformly over the corner square `[side - 200, side]^2`.
pub fn cell_edge_ue_drop<R: Rng + ?Sized>(count: usize, area_side: f64, ue_height: f64, rng: &mut R) -> Vec<Point3> {
    let lo = (area_side - EDGE_BAND_M).max(0.0);
    let width = area_side - lo;
    (0..count)
        .map(|_| {
            Point3::new(
                lo + rng.random::<f64>() * width,
                lo + rng.random::<f64>() * width,
                ue_height,
            )
        })
        .collect()
}
