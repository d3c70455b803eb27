//! Sinusoidal position and angle encodings of relative poses.
//!
//! The position encoding multiplies its input by `omega^(2i/D)`, so with
//! `omega > 1` the frequency grows with the channel index. That is the
//! opposite of the usual inverse-frequency convention; both variants are
//! supported through [`PeExponentSign`], and the growing-frequency form is
//! the default.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::RelPose;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EncodingError {
    #[error("encoding dimension must be even and positive, got {0}")]
    OddDimension(usize),
    #[error("base frequency must be positive, got {0}")]
    NonPositiveOmega(f64),
}

/// Sign of the exponent applied to the base frequency.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum PeExponentSign {
    /// `x * omega^(2i/D)`: frequency grows with the channel index.
    #[default]
    Positive,
    /// `x * omega^(-2i/D)`: the common inverse-frequency convention.
    Negative,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EncodingConfig {
    pub dim_d: usize,
    pub omega: f64,
    pub pe_exponent_sign: PeExponentSign,
}

impl EncodingConfig {
    pub fn new(dim_d: usize, omega: f64) -> Result<Self, EncodingError> {
        if dim_d == 0 || !dim_d.is_multiple_of(2) {
            return Err(EncodingError::OddDimension(dim_d));
        }
        if omega.is_nan() || omega <= 0.0 {
            return Err(EncodingError::NonPositiveOmega(omega));
        }
        Ok(Self {
            dim_d,
            omega,
            pe_exponent_sign: PeExponentSign::default(),
        })
    }

    fn frequency(&self, i: usize) -> f64 {
        let e = 2.0 * i as f64 / self.dim_d as f64;
        match self.pe_exponent_sign {
            PeExponentSign::Positive => self.omega.powf(e),
            PeExponentSign::Negative => self.omega.powf(-e),
        }
    }
}

/// Position encoding of a 1D offset: interleaved `sin`/`cos` pairs over
/// `D/2` frequencies.
pub fn pe(x: f64, cfg: &EncodingConfig) -> Vec<f64> {
    let mut out = Vec::with_capacity(cfg.dim_d);
    for i in 0..cfg.dim_d / 2 {
        let arg = x * cfg.frequency(i);
        out.push(arg.sin());
        out.push(arg.cos());
    }
    out
}

/// Angular encoding: integer harmonics `theta * (i+1)`, which keep the
/// encoding exactly 2-pi periodic.
pub fn ae(theta: f64, cfg: &EncodingConfig) -> Vec<f64> {
    let mut out = Vec::with_capacity(cfg.dim_d);
    for i in 0..cfg.dim_d / 2 {
        let arg = theta * (i + 1) as f64;
        out.push(arg.sin());
        out.push(arg.cos());
    }
    out
}

/// Relative pose encoding: `[pe(dx); pe(dy); ae(dtheta)]`, length `3D`.
pub fn rpe(r: &RelPose, cfg: &EncodingConfig) -> Vec<f64> {
    let mut out = Vec::with_capacity(3 * cfg.dim_d);
    out.extend(pe(r.dx, cfg));
    out.extend(pe(r.dy, cfg));
    out.extend(ae(r.dtheta, cfg));
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::PI;

    fn cfg(d: usize) -> EncodingConfig {
        EncodingConfig::new(d, 1000.0).unwrap()
    }

    #[test]
    fn config_validation() {
        assert!(EncodingConfig::new(7, 1000.0).is_err());
        assert!(EncodingConfig::new(0, 1000.0).is_err());
        assert!(EncodingConfig::new(8, 0.0).is_err());
        assert!(EncodingConfig::new(8, -3.0).is_err());
    }

    #[test]
    fn pe_at_zero_alternates_zero_one() {
        let v = pe(0.0, &cfg(8));
        for pair in v.chunks(2) {
            assert_eq!(pair, &[0.0, 1.0]);
        }
    }

    #[test]
    fn pe_first_pair_is_unit_frequency() {
        let x = 0.73;
        let v = pe(x, &cfg(8));
        assert!((v[0] - x.sin()).abs() < 1e-15);
        assert!((v[1] - x.cos()).abs() < 1e-15);
    }

    #[test]
    fn pe_matches_scalar_loop_oracle() {
        let c = cfg(8);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..50 {
            let x = (rng.gen::<f64>() - 0.5) * 60.0;
            let v = pe(x, &c);
            for i in 0..4 {
                let freq = 1000f64.powf(2.0 * i as f64 / 8.0);
                assert!((v[2 * i] - (x * freq).sin()).abs() < 1e-12);
                assert!((v[2 * i + 1] - (x * freq).cos()).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn pe_negative_exponent_variant() {
        let mut c = cfg(8);
        c.pe_exponent_sign = PeExponentSign::Negative;
        let x = 2.1;
        let v = pe(x, &c);
        let freq = 1000f64.powf(-2.0 / 8.0);
        assert!((v[2] - (x * freq).sin()).abs() < 1e-12);
    }

    #[test]
    fn ae_values_and_periodicity() {
        let v0 = ae(0.0, &cfg(6));
        for pair in v0.chunks(2) {
            assert_eq!(pair, &[0.0, 1.0]);
        }
        let v = ae(PI, &cfg(4));
        assert!(v[0].abs() < 1e-12 && (v[1] + 1.0).abs() < 1e-12);
        assert!(v[2].abs() < 1e-12 && (v[3] - 1.0).abs() < 1e-12);

        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..50 {
            let t = (rng.gen::<f64>() - 0.5) * 6.0;
            let a = ae(t, &cfg(16));
            let b = ae(t + 2.0 * PI, &cfg(16));
            for (x, y) in a.iter().zip(&b) {
                assert!((x - y).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn rpe_is_the_concatenation_and_bounded() {
        let c = cfg(8);
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        for _ in 0..50 {
            let r = RelPose {
                dx: (rng.gen::<f64>() - 0.5) * 40.0,
                dy: (rng.gen::<f64>() - 0.5) * 40.0,
                dtheta: (rng.gen::<f64>() - 0.5) * 6.0,
            };
            let v = rpe(&r, &c);
            assert_eq!(v.len(), 3 * c.dim_d);
            let mut want = pe(r.dx, &c);
            want.extend(pe(r.dy, &c));
            want.extend(ae(r.dtheta, &c));
            assert_eq!(v, want); // bit-exact composition
            assert!(v.iter().all(|x| (-1.0..=1.0).contains(x)));
        }
    }

    #[test]
    fn rpe_at_identity() {
        let v = rpe(
            &RelPose {
                dx: 0.0,
                dy: 0.0,
                dtheta: 0.0,
            },
            &cfg(4),
        );
        assert_eq!(
            v,
            vec![0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0]
        );
    }

    #[test]
    fn equal_relative_poses_encode_identically() {
        let c = cfg(32);
        let r = RelPose {
            dx: 3.25,
            dy: -1.5,
            dtheta: 0.7,
        };
        assert_eq!(rpe(&r, &c), rpe(&r.clone(), &c));
    }
}
