//! Uplink simulator for repeater-assisted massive MIMO (RA-MIMO).
//!
//! A multi-antenna base station is helped by a grid of single-antenna
//! amplify-and-forward repeaters. The crate covers:
//!
//! - deployments, UE drops and repeater pruning ([`scenario`]),
//! - 3GPP UMa large-scale gains and Rician small-scale fading ([`channel`]),
//! - composite channels, colored-noise covariances and LMMSE SINRs, plus the
//!   co-located and cell-free baselines ([`mimo`]),
//! - max-min and power-minimizing amplification control via the
//!   convex-concave procedure ([`optimizer`]) on top of a second-order-cone
//!   subproblem contract ([`conic`]),
//! - repeater power consumption and sleep scheduling ([`energy`]),
//! - Monte-Carlo experiment drivers with CSV/JSON output ([`experiments`]).

pub mod channel;
pub mod conic;
pub mod energy;
mod error;
pub mod experiments;
pub mod mimo;
pub mod optimizer;
pub mod scenario;
pub mod seeding;

pub use error::{Error, Result};

/// Linear power ratio from decibels.
pub fn db_to_linear(db: f64) -> f64 {
    10f64.powf(db / 10.0)
}

/// Decibels from a linear power ratio.
pub fn linear_to_db(lin: f64) -> f64 {
    10.0 * lin.log10()
}

/// Watts from dBm.
pub fn dbm_to_watts(dbm: f64) -> f64 {
    10f64.powf((dbm - 30.0) / 10.0)
}

/// Spectral efficiency in bit/s/Hz for a linear SINR.
pub fn spectral_efficiency(sinr: f64) -> f64 {
    (1.0 + sinr).log2()
}

/// SINR needed to reach a spectral-efficiency target, `2^se - 1`.
pub fn sinr_for_se(se: f64) -> f64 {
    se.exp2() - 1.0
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unit_conversions() {
        assert!((dbm_to_watts(20.0) - 0.1).abs() < 1e-15);
        assert!((dbm_to_watts(38.0) - 6.309_573_444_801_933).abs() < 1e-12);
        assert!((linear_to_db(db_to_linear(-7.25)) + 7.25).abs() < 1e-12);
    }

    #[test]
    fn se_inversion() {
        assert!((sinr_for_se(1.5) - 1.828_427_124_746_19).abs() < 1e-12);
        assert!((spectral_efficiency(sinr_for_se(1.5)) - 1.5).abs() < 1e-12);
    }
}
