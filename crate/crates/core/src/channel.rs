//! Large-scale gains (3GPP TR 38.901 UMa) and Rician small-scale fading.
//!
//! Three link classes exist: UE to repeater (scalar), repeater to BS and UE to
//! BS (both `M`-vectors through a half-wavelength ULA). LOS states and log-normal
//! shadowing are large-scale quantities drawn once per UE drop; the fading is
//! redrawn per coherence block.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::scenario::{Deployment, Point3, ScenarioConfig};
use crate::{Error, Result};

const SPEED_OF_LIGHT: f64 = 3.0e8;
/// Effective environment height in the UMa breakpoint distance.
const ENV_HEIGHT_M: f64 = 1.0;
const MIN_DISTANCE_M: f64 = 1.0;
const SHADOW_STD_LOS_DB: f64 = 4.0;
const SHADOW_STD_NLOS_DB: f64 = 6.0;
const THERMAL_NOISE_DBM_PER_HZ: f64 = -174.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LinkClass {
    UeToBs,
    UeToRepeater,
    RepeaterToBs,
    UeToAccessPoint,
}

/// UMa pathloss in dB (positive loss). `h_tx` is the elevated end (BS,
/// repeater or AP), `h_rx` the lower end.
pub fn uma_pathloss(d2d: f64, h_tx: f64, h_rx: f64, carrier_hz: f64, los: bool) -> f64 {
    let d2d = d2d.max(MIN_DISTANCE_M);
    let d3d = d2d.hypot(h_tx - h_rx);
    let fc_ghz = carrier_hz / 1e9;
    let bp = 4.0 * (h_tx - ENV_HEIGHT_M) * (h_rx - ENV_HEIGHT_M) * carrier_hz / SPEED_OF_LIGHT;

    let pl_los = if d2d <= bp {
        28.0 + 22.0 * d3d.log10() + 20.0 * fc_ghz.log10()
    } else {
        28.0 + 40.0 * d3d.log10() + 20.0 * fc_ghz.log10()
            - 9.0 * (bp * bp + (h_tx - h_rx).powi(2)).log10()
    };
    if los {
        return pl_los;
    }
    let pl_nlos = 13.54 + 39.08 * d3d.log10() + 20.0 * fc_ghz.log10() - 0.6 * (h_rx - 1.5);
    pl_los.max(pl_nlos)
}

/// UMa LOS probability for a receiver at height `h_rx`.
pub fn uma_los_probability(d2d: f64, h_rx: f64) -> f64 {
    if d2d <= 18.0 {
        return 1.0;
    }
    let c = if h_rx <= 13.0 { 0.0 } else { ((h_rx - 13.0) / 10.0).powf(1.5) };
    let base = 18.0 / d2d + (-d2d / 63.0).exp() * (1.0 - 18.0 / d2d);
    (base * (1.0 + c * 1.25 * (d2d / 100.0).powi(3) * (-d2d / 150.0).exp())).min(1.0)
}

/// LOS probability per link class. Repeater-to-BS links are always LOS.
pub fn los_probability(d2d: f64, class: LinkClass, ue_height: f64) -> f64 {
    match class {
        LinkClass::RepeaterToBs => 1.0,
        _ => uma_los_probability(d2d, ue_height),
    }
}

/// Thermal noise power in watts for a bandwidth and receiver noise figure.
pub fn noise_power(bandwidth_hz: f64, noise_figure_db: f64) -> f64 {
    let dbm = THERMAL_NOISE_DBM_PER_HZ + 10.0 * bandwidth_hz.log10() + noise_figure_db;
    crate::dbm_to_watts(dbm)
}

/// Half-wavelength ULA response for a source at `azimuth` radians from
/// broadside. Every entry has unit modulus.
pub fn array_response(azimuth: f64, m: usize) -> DVector<Complex64> {
    let phase = std::f64::consts::PI * azimuth.sin();
    DVector::from_fn(m, |i, _| Complex64::from_polar(1.0, phase * i as f64))
}

/// Azimuth from broadside of a ULA along the x axis located at `array`.
pub fn azimuth(array: &Point3, source: &Point3) -> f64 {
    (source.x - array.x).atan2(source.y - array.y)
}

pub fn complex_gaussian<R: Rng + ?Sized>(rng: &mut R) -> Complex64 {
    let re: f64 = StandardNormal.sample(rng);
    let im: f64 = StandardNormal.sample(rng);
    Complex64::new(re, im) * std::f64::consts::FRAC_1_SQRT_2
}

/// One Rician vector `sqrt(beta) (sqrt(k/(1+k)) e^{j phi} a + sqrt(1/(1+k)) w)`.
/// `k_factor = inf` gives the pure LOS component.
pub fn rician_draw<R: Rng + ?Sized>(
    beta: f64,
    k_factor: f64,
    steering: &DVector<Complex64>,
    rng: &mut R,
) -> DVector<Complex64> {
    let (los_w, nlos_w) = if k_factor.is_infinite() {
        (1.0, 0.0)
    } else {
        ((k_factor / (1.0 + k_factor)).sqrt(), (1.0 / (1.0 + k_factor)).sqrt())
    };
    let phi = rng.random::<f64>() * std::f64::consts::TAU;
    let rot = Complex64::from_polar(los_w, phi);
    let amp = beta.sqrt();
    DVector::from_fn(steering.len(), |i, _| {
        let scatter = if nlos_w > 0.0 { complex_gaussian(rng) * nlos_w } else { Complex64::new(0.0, 0.0) };
        (steering[i] * rot + scatter) * amp
    })
}

/// Linear power gains and LOS states for one UE drop.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LargeScale {
    /// L x K, UE k to repeater l.
    pub beta_ue_rep: DMatrix<f64>,
    pub beta_rep_bs: DVector<f64>,
    pub beta_ue_bs: DVector<f64>,
    pub los_ue_rep: DMatrix<bool>,
    pub los_rep_bs: Vec<bool>,
    pub los_ue_bs: Vec<bool>,
}

/// Shadowed gain of one link plus its LOS state.
fn link_gain<R: Rng + ?Sized>(
    d2d: f64,
    h_tx: f64,
    h_rx: f64,
    class: LinkClass,
    carrier_hz: f64,
    rng: &mut R,
) -> (f64, bool) {
    let los = rng.random::<f64>() < los_probability(d2d, class, h_rx);
    let std = if los { SHADOW_STD_LOS_DB } else { SHADOW_STD_NLOS_DB };
    let shadow: f64 = StandardNormal.sample(rng);
    let loss = (uma_pathloss(d2d, h_tx, h_rx, carrier_hz, los) + std * shadow).max(0.0);
    (crate::db_to_linear(-loss), los)
}

/// Draws LOS states and shadowing for every link of a deployment. UE-to-BS
/// links are drawn first so that they do not depend on the repeater count.
pub fn draw_large_scale<R: Rng + ?Sized>(
    config: &ScenarioConfig,
    deployment: &Deployment,
    rng: &mut R,
) -> LargeScale {
    let bs = &deployment.bs_position;
    let (l, k) = (deployment.num_repeaters(), deployment.num_ues());
    let fc = config.carrier_hz;

    let mut beta_ue_bs = DVector::zeros(k);
    let mut los_ue_bs = vec![false; k];
    for (i, ue) in deployment.ue_positions.iter().enumerate() {
        let (b, los) = link_gain(ue.distance_2d(bs), bs.z, ue.z, LinkClass::UeToBs, fc, rng);
        beta_ue_bs[i] = b;
        los_ue_bs[i] = los;
    }
    let mut beta_rep_bs = DVector::zeros(l);
    let mut los_rep_bs = vec![true; l];
    for (j, rep) in deployment.repeater_positions.iter().enumerate() {
        let (b, los) = link_gain(rep.distance_2d(bs), bs.z, rep.z, LinkClass::RepeaterToBs, fc, rng);
        beta_rep_bs[j] = b;
        los_rep_bs[j] = los;
    }
    let mut beta_ue_rep = DMatrix::zeros(l, k);
    let mut los_ue_rep = DMatrix::from_element(l, k, false);
    for (i, ue) in deployment.ue_positions.iter().enumerate() {
        for (j, rep) in deployment.repeater_positions.iter().enumerate() {
            let (b, los) = link_gain(ue.distance_2d(rep), rep.z, ue.z, LinkClass::UeToRepeater, fc, rng);
            beta_ue_rep[(j, i)] = b;
            los_ue_rep[(j, i)] = los;
        }
    }
    LargeScale { beta_ue_rep, beta_rep_bs, beta_ue_bs, los_ue_rep, los_rep_bs, los_ue_bs }
}

/// Channels of one coherence block.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelRealization {
    /// L x K, entry `(l, k)` is UE k to repeater l.
    pub h: DMatrix<Complex64>,
    /// M x L, column l is repeater l to the BS.
    pub g: DMatrix<Complex64>,
    /// M x K, column k is UE k to the BS.
    pub h_bar: DMatrix<Complex64>,
    pub noise_rep: f64,
    pub noise_bs: f64,
    pub uplink_power: f64,
}

impl ChannelRealization {
    pub fn num_antennas(&self) -> usize {
        self.h_bar.nrows()
    }

    pub fn num_repeaters(&self) -> usize {
        self.h.nrows()
    }

    pub fn num_ues(&self) -> usize {
        self.h.ncols()
    }

    /// Keeps only the listed repeaters, in the given order.
    pub fn select_repeaters(&self, keep: &[usize]) -> Self {
        let h = DMatrix::from_fn(keep.len(), self.num_ues(), |r, c| self.h[(keep[r], c)]);
        let g = DMatrix::from_fn(self.num_antennas(), keep.len(), |r, c| self.g[(r, keep[c])]);
        Self { h, g, ..self.clone() }
    }

    /// Multiplies every channel coefficient by `factor`.
    pub fn scaled(&self, factor: Complex64) -> Self {
        Self {
            h: self.h.map(|x| x * factor),
            g: self.g.map(|x| x * factor),
            h_bar: self.h_bar.map(|x| x * factor),
            ..self.clone()
        }
    }

    pub fn is_finite(&self) -> bool {
        let fin = |m: &DMatrix<Complex64>| m.iter().all(|c| c.re.is_finite() && c.im.is_finite());
        fin(&self.h) && fin(&self.g) && fin(&self.h_bar)
    }

    pub fn to_dump(&self) -> RealizationDump {
        let flat = |m: &DMatrix<Complex64>| {
            (0..m.nrows())
                .flat_map(|r| (0..m.ncols()).map(move |c| (r, c)))
                .map(|(r, c)| [m[(r, c)].re, m[(r, c)].im])
                .collect()
        };
        RealizationDump {
            antennas: self.num_antennas(),
            repeaters: self.num_repeaters(),
            ues: self.num_ues(),
            noise_rep: self.noise_rep,
            noise_bs: self.noise_bs,
            uplink_power: self.uplink_power,
            h: flat(&self.h),
            g: flat(&self.g),
            h_bar: flat(&self.h_bar),
        }
    }
}

/// JSON bundle of a realization. Matrices are row-major lists of
/// `[re, im]` pairs: `h` is L x K, `g` is M x L, `h_bar` is M x K.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RealizationDump {
    pub antennas: usize,
    pub repeaters: usize,
    pub ues: usize,
    pub noise_rep: f64,
    pub noise_bs: f64,
    pub uplink_power: f64,
    pub h: Vec<[f64; 2]>,
    pub g: Vec<[f64; 2]>,
    pub h_bar: Vec<[f64; 2]>,
}

impl RealizationDump {
    pub fn into_realization(self) -> Result<ChannelRealization> {
        let unflat = |v: &[[f64; 2]], rows: usize, cols: usize, name: &str| {
            if v.len() != rows * cols {
                return Err(Error::Dimension(format!("{name}: expected {} entries, got {}", rows * cols, v.len())));
            }
            Ok(DMatrix::from_fn(rows, cols, |r, c| {
                let [re, im] = v[r * cols + c];
                Complex64::new(re, im)
            }))
        };
        let (m, l, k) = (self.antennas, self.repeaters, self.ues);
        Ok(ChannelRealization {
            h: unflat(&self.h, l, k, "h")?,
            g: unflat(&self.g, m, l, "g")?,
            h_bar: unflat(&self.h_bar, m, k, "h_bar")?,
            noise_rep: self.noise_rep,
            noise_bs: self.noise_bs,
            uplink_power: self.uplink_power,
        })
    }
}

/// Draws one coherence block. Inactive repeaters still get channels.
///
/// Draw order is UE-to-BS, repeater-to-BS, UE-to-repeater, so the direct
/// channels for a given stream do not depend on the repeater count.
pub fn draw_channels<R: Rng + ?Sized>(
    config: &ScenarioConfig,
    deployment: &Deployment,
    large_scale: &LargeScale,
    rng: &mut R,
) -> ChannelRealization {
    let m = config.num_bs_antennas;
    let (l, k) = (deployment.num_repeaters(), deployment.num_ues());
    let kappa = config.k_factor();
    let bs = &deployment.bs_position;
    let fading = |los: bool| if los { kappa } else { 0.0 };

    let mut h_bar = DMatrix::zeros(m, k);
    for (i, ue) in deployment.ue_positions.iter().enumerate() {
        let a = array_response(azimuth(bs, ue), m);
        let col = rician_draw(large_scale.beta_ue_bs[i], fading(large_scale.los_ue_bs[i]), &a, rng);
        h_bar.set_column(i, &col);
    }
    let mut g = DMatrix::zeros(m, l);
    for (j, rep) in deployment.repeater_positions.iter().enumerate() {
        let a = array_response(azimuth(bs, rep), m);
        let col = rician_draw(large_scale.beta_rep_bs[j], fading(large_scale.los_rep_bs[j]), &a, rng);
        g.set_column(j, &col);
    }
    let unit = DVector::from_element(1, Complex64::new(1.0, 0.0));
    let mut h = DMatrix::zeros(l, k);
    for i in 0..k {
        for j in 0..l {
            let kf = fading(large_scale.los_ue_rep[(j, i)]);
            h[(j, i)] = rician_draw(large_scale.beta_ue_rep[(j, i)], kf, &unit, rng)[0];
        }
    }
    let noise = config.noise_power_w();
    ChannelRealization {
        h,
        g,
        h_bar,
        noise_rep: noise,
        noise_bs: noise,
        uplink_power: config.uplink_power_w,
    }
}
