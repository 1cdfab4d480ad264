//! Near-field line-of-sight channels for a uniform linear array.
//!
//! Per-element distances use the second-order (Fresnel) expansion
//! `r_n ≈ r - x_n d cos α + x_n² d² sin² α / (2 r)` where `α` is the angle
//! from the array axis. Channels are `h_m = β_m e^{j 2π f_m r / c} a_m` with
//! `β_m = c / (4π f_m r)` and steering entries `e^{-j 2π f_m (r_n - r) / c}`.

use ndarray::Array2;
use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

use crate::config::{AngleConvention, DerivedGrids, SystemConfig};
use crate::error::{Error, Result};

/// One user, in polar form relative to the array center.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UserPosition {
    /// Angle in the configured [`AngleConvention`].
    pub angle_rad: f64,
    pub range_m: f64,
}

impl UserPosition {
    pub fn new(angle_rad: f64, range_m: f64) -> Result<Self> {
        if !angle_rad.is_finite() || !range_m.is_finite() {
            return Err(Error::NonFinite("user position".into()));
        }
        if range_m <= 0.0 {
            return Err(Error::InvalidArgument(format!("range must be positive, got {range_m}")));
        }
        Ok(Self { angle_rad, range_m })
    }

    pub fn from_degrees(angle_deg: f64, range_m: f64) -> Result<Self> {
        Self::new(angle_deg.to_radians(), range_m)
    }

    /// `(r cos θ, r sin θ)`.
    pub fn cartesian(&self) -> (f64, f64) {
        (self.range_m * self.angle_rad.cos(), self.range_m * self.angle_rad.sin())
    }

    pub fn within(&self, cfg: &SystemConfig) -> bool {
        self.angle_rad.abs() <= cfg.angle_bound_rad + 1e-12
            && self.range_m >= cfg.range_min_m
            && self.range_m <= cfg.range_max_m
    }
}

/// Channel of one user over all subcarriers, kept in factored form.
///
/// `h[m][n] = common[m] * steering[m][n]` with `common[m] = β_m e^{j 2π f_m r / c}`.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelMatrix {
    pub beta: Vec<f64>,
    pub common: Vec<Complex64>,
    /// Array response, `M × N`.
    pub steering: Array2<Complex64>,
}

impl ChannelMatrix {
    pub fn entry(&self, m: usize, n: usize) -> Complex64 {
        self.common[m] * self.steering[[m, n]]
    }

    pub fn to_dense(&self) -> Array2<Complex64> {
        let mut h = self.steering.clone();
        for (mut row, c) in h.rows_mut().into_iter().zip(&self.common) {
            row.mapv_inplace(|a| a * c);
        }
        h
    }

    pub fn num_subcarriers(&self) -> usize {
        self.steering.nrows()
    }

    pub fn num_antennas(&self) -> usize {
        self.steering.ncols()
    }
}

/// Second-order distance from an element at signed offset `offset_m` along
/// the array axis to a point at `axis_angle` (from the axis) and `range_m`.
pub fn near_field_distance(axis_angle: f64, range_m: f64, offset_m: f64) -> f64 {
    let s = axis_angle.sin();
    range_m - offset_m * axis_angle.cos() + offset_m * offset_m * s * s / (2.0 * range_m)
}

/// Exact Euclidean distance, the reference for [`near_field_distance`].
pub fn exact_distance(axis_angle: f64, range_m: f64, offset_m: f64) -> f64 {
    let ux = range_m * axis_angle.cos() - offset_m;
    let uy = range_m * axis_angle.sin();
    ux.hypot(uy)
}

/// Distance from antenna `n` (zero-based) to the user.
pub fn element_distance_approx(
    pos: &UserPosition,
    n: usize,
    cfg: &SystemConfig,
    grids: &DerivedGrids,
) -> f64 {
    let offset = grids.antenna_offsets[n] * cfg.antenna_spacing_m();
    near_field_distance(cfg.angle_convention.axis_angle(pos.angle_rad), pos.range_m, offset)
}

/// `r_n - r` for every antenna.
pub fn path_differences(pos: &UserPosition, cfg: &SystemConfig, grids: &DerivedGrids) -> Vec<f64> {
    path_differences_raw(cfg.angle_convention, pos, cfg.antenna_spacing_m(), &grids.antenna_offsets)
}

fn path_differences_raw(
    conv: AngleConvention,
    pos: &UserPosition,
    spacing: f64,
    offsets: &[f64],
) -> Vec<f64> {
    let axis = conv.axis_angle(pos.angle_rad);
    offsets
        .iter()
        .map(|x| near_field_distance(axis, pos.range_m, x * spacing) - pos.range_m)
        .collect()
}

/// Array response on subcarrier `m` (zero-based), evaluated directly.
pub fn array_response(
    pos: &UserPosition,
    m: usize,
    cfg: &SystemConfig,
    grids: &DerivedGrids,
) -> Vec<Complex64> {
    let k = 2.0 * PI * grids.subcarrier_freqs_hz[m] / cfg.speed_of_light_m_per_s;
    path_differences(pos, cfg, grids)
        .into_iter()
        .map(|dr| Complex64::from_polar(1.0, -k * dr))
        .collect()
}

/// Fills `out` (row-major `M × N`) with the steering matrix of one user.
///
/// Consecutive subcarriers differ by a constant per-antenna rotation, so rows
/// are produced by a running complex product rather than one `sin_cos` per
/// entry. Rounding drift stays around `M · ε`.
pub fn fill_steering(
    pos: &UserPosition,
    cfg: &SystemConfig,
    grids: &DerivedGrids,
    out_re: &mut [f64],
    out_im: &mut [f64],
) {
    let n_ant = grids.num_antennas();
    let m_sub = grids.num_subcarriers();
    debug_assert_eq!(out_re.len(), n_ant * m_sub);
    let c = cfg.speed_of_light_m_per_s;
    let f1 = grids.subcarrier_freqs_hz[0];
    let dr = path_differences(pos, cfg, grids);
    let mut state_re = vec![0.0; n_ant];
    let mut state_im = vec![0.0; n_ant];
    let mut step_re = vec![0.0; n_ant];
    let mut step_im = vec![0.0; n_ant];
    for n in 0..n_ant {
        let (s, co) = (-2.0 * PI * f1 * dr[n] / c).sin_cos();
        state_re[n] = co;
        state_im[n] = s;
        let (s, co) = (-2.0 * PI * cfg.subcarrier_spacing_hz * dr[n] / c).sin_cos();
        step_re[n] = co;
        step_im[n] = s;
    }
    for m in 0..m_sub {
        let row_re = &mut out_re[m * n_ant..(m + 1) * n_ant];
        let row_im = &mut out_im[m * n_ant..(m + 1) * n_ant];
        row_re.copy_from_slice(&state_re);
        row_im.copy_from_slice(&state_im);
        for n in 0..n_ant {
            let (ar, ai) = (state_re[n], state_im[n]);
            state_re[n] = ar * step_re[n] - ai * step_im[n];
            state_im[n] = ar * step_im[n] + ai * step_re[n];
        }
    }
}

/// Path loss `β_m` and common phase term `β_m e^{j 2π f_m r / c}`.
pub fn common_terms(
    pos: &UserPosition,
    cfg: &SystemConfig,
    grids: &DerivedGrids,
) -> (Vec<f64>, Vec<Complex64>) {
    let c = cfg.speed_of_light_m_per_s;
    let beta: Vec<f64> = grids
        .subcarrier_freqs_hz
        .iter()
        .map(|f| c / (4.0 * PI * f * pos.range_m))
        .collect();
    let common = grids
        .subcarrier_freqs_hz
        .iter()
        .zip(&beta)
        .map(|(f, b)| Complex64::from_polar(*b, 2.0 * PI * f * pos.range_m / c))
        .collect();
    (beta, common)
}

pub fn channel_matrix(
    pos: &UserPosition,
    cfg: &SystemConfig,
    grids: &DerivedGrids,
) -> Result<ChannelMatrix> {
    if !(pos.range_m > 0.0) {
        return Err(Error::InvalidArgument(format!("range must be positive, got {}", pos.range_m)));
    }
    let (m_sub, n_ant) = (grids.num_subcarriers(), grids.num_antennas());
    let mut re = vec![0.0; m_sub * n_ant];
    let mut im = vec![0.0; m_sub * n_ant];
    fill_steering(pos, cfg, grids, &mut re, &mut im);
    let steering = Array2::from_shape_vec(
        (m_sub, n_ant),
        re.into_iter().zip(im).map(|(r, i)| Complex64::new(r, i)).collect(),
    )
    .expect("shape matches buffer");
    let (beta, common) = common_terms(pos, cfg, grids);
    Ok(ChannelMatrix { beta, common, steering })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::derive_grids;
    use proptest::prelude::*;

    fn axis_cfg() -> SystemConfig {
        SystemConfig { angle_convention: AngleConvention::Axis, ..SystemConfig::full() }
    }

    #[test]
    fn broadside_distance_example() {
        let approx = near_field_distance(PI / 2.0, 100.0, 1.0);
        assert!((approx - 100.005).abs() < 1e-12);
        let exact = exact_distance(PI / 2.0, 100.0, 1.0);
        assert!((exact - 100.004_999_875).abs() < 1e-8);
        assert!((approx - exact).abs() < 2e-5);
    }

    #[test]
    fn center_element_and_endfire() {
        assert_eq!(near_field_distance(0.3, 42.0, 0.0), 42.0);
        assert!((near_field_distance(0.0, 42.0, 0.25) - (42.0 - 0.25)).abs() < 1e-14);
    }

    #[test]
    fn element_distance_uses_convention() {
        let cfg = axis_cfg();
        let grids = derive_grids(&cfg);
        let pos = UserPosition::new(PI / 2.0, 30.0).unwrap();
        let n = 10;
        let off = grids.antenna_offsets[n] * cfg.antenna_spacing_m();
        let got = element_distance_approx(&pos, n, &cfg, &grids);
        assert!((got - (30.0 + off * off / 60.0)).abs() < 1e-12);

        let bore = SystemConfig::full();
        let p0 = UserPosition::new(0.0, 30.0).unwrap();
        assert!((element_distance_approx(&p0, n, &bore, &grids) - got).abs() < 1e-12);
    }

    #[test]
    fn mirrored_geometry() {
        // x_{N+1-n} = -x_n and cos(π - α) = -cos α: mirroring the user across
        // broadside is the same as mirroring the element index.
        let cfg = SystemConfig::full();
        let grids = derive_grids(&cfg);
        let n_ant = cfg.num_antennas;
        for &(deg, r) in &[(17.0, 12.0), (-45.0, 80.0), (59.0, 5.0)] {
            let a = UserPosition::from_degrees(deg, r).unwrap();
            let b = UserPosition::from_degrees(-deg, r).unwrap();
            for n in [0, 5, 100, n_ant - 1] {
                let lhs = element_distance_approx(&a, n, &cfg, &grids);
                let rhs = element_distance_approx(&b, n_ant - 1 - n, &cfg, &grids);
                assert!((lhs - rhs).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn far_field_phases_approach_plane_wave() {
        let cfg = axis_cfg();
        let grids = derive_grids(&cfg);
        let pos = UserPosition::new(1.1, 1e6).unwrap();
        let m = 700;
        let a = array_response(&pos, m, &cfg, &grids);
        let f = grids.subcarrier_freqs_hz[m];
        let d = cfg.antenna_spacing_m();
        let mut worst: f64 = 0.0;
        for (n, v) in a.iter().enumerate() {
            let plane = 2.0 * PI * f * grids.antenna_offsets[n] * d * pos.angle_rad.cos()
                / cfg.speed_of_light_m_per_s;
            let diff = (v * Complex64::from_polar(1.0, -plane)).arg().abs();
            worst = worst.max(diff);
        }
        assert!(worst < 1e-3, "{worst}");
    }

    #[test]
    fn steering_recurrence_matches_direct_evaluation() {
        let cfg = SystemConfig::full();
        let grids = derive_grids(&cfg);
        let pos = UserPosition::from_degrees(-37.0, 8.5).unwrap();
        let h = channel_matrix(&pos, &cfg, &grids).unwrap();
        for m in [0, 1, 800, 1583] {
            let direct = array_response(&pos, m, &cfg, &grids);
            for n in 0..cfg.num_antennas {
                assert!((h.steering[[m, n]] - direct[n]).norm() < 1e-9);
            }
        }
    }

    #[test]
    fn path_loss_and_modulus() {
        let cfg = SystemConfig::desk();
        let grids = derive_grids(&cfg);
        let pos = UserPosition::new(0.2, 100.0).unwrap();
        let h = channel_matrix(&pos, &cfg, &grids).unwrap();
        let beta_fc = 3e8 / (4.0 * PI * 28e9 * 100.0);
        assert!((beta_fc - 8.526e-6).abs() < 1e-9);
        for m in 0..cfg.num_subcarriers {
            let expected = 3e8 / (4.0 * PI * grids.subcarrier_freqs_hz[m] * 100.0);
            assert!((h.beta[m] - expected).abs() < 1e-18);
            for n in 0..cfg.num_antennas {
                assert!((h.entry(m, n).norm() - h.beta[m]).abs() < 1e-12 * h.beta[m]);
            }
        }
        let far = channel_matrix(&UserPosition::new(0.2, 200.0).unwrap(), &cfg, &grids).unwrap();
        for m in 0..cfg.num_subcarriers {
            assert!((far.entry(m, 3).norm() * 2.0 - h.entry(m, 3).norm()).abs() < 1e-15);
        }
    }

    #[test]
    fn non_positive_range_rejected() {
        assert!(UserPosition::new(0.0, 0.0).is_err());
        let cfg = SystemConfig::desk();
        let grids = derive_grids(&cfg);
        let bad = UserPosition { angle_rad: 0.0, range_m: -1.0 };
        assert!(channel_matrix(&bad, &cfg, &grids).is_err());
    }

    #[test]
    fn cartesian_matches_polar() {
        let p = UserPosition::from_degrees(33.0, 17.0).unwrap();
        let (x, y) = p.cartesian();
        assert!(((x * x + y * y).sqrt() - 17.0).abs() < 1e-12);
        assert!((y.atan2(x) - 33f64.to_radians()).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn fresnel_error_is_small_in_service_region(deg in -60.0f64..60.0, r in 5.0f64..300.0, frac in 0.0f64..1.0) {
            let cfg = SystemConfig::full();
            let half = (cfg.num_antennas as f64 - 1.0) / 2.0 * cfg.antenna_spacing_m();
            let off = (2.0 * frac - 1.0) * half;
            let axis = cfg.angle_convention.axis_angle(deg.to_radians());
            let err = (near_field_distance(axis, r, off) - exact_distance(axis, r, off)).abs();
            prop_assert!(err < 5e-3);
        }

        #[test]
        fn steering_is_unit_modulus(deg in -60.0f64..60.0, r in 5.0f64..50.0, m in 0usize..256) {
            let cfg = SystemConfig::desk();
            let grids = derive_grids(&cfg);
            let pos = UserPosition::from_degrees(deg, r).unwrap();
            for v in array_response(&pos, m, &cfg, &grids) {
                prop_assert!((v.norm() - 1.0).abs() < 1e-12);
            }
        }
    }
}
