//! Analytic rainbow beam and the non-learned lookup estimator.
//!
//! The design matches the ideal focusing phase of a start point on the lowest
//! subcarrier and of an end point on the highest one. With weight phase
//! `φ_n - 2π f t_n` that is a 2×2 linear system per antenna. In between, the
//! per-antenna phase interpolates linearly in frequency, so every subcarrier
//! focuses somewhere along a trajectory joining the two points.

use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

use crate::autodiff::mod_const;
use crate::beamformer::{ProjectedPta, SignalEvaluator};
use crate::config::{watts_to_dbm, DerivedGrids, SystemConfig};
use crate::error::{Error, Result};
use crate::estimator::PositionEstimate;
use crate::feedback::FeedbackMessage;
use crate::geometry::{path_differences, UserPosition};

/// Phase of the matched (focusing) weight for `pos` on frequency `f`:
/// `-(2π f / c)(r_n - r)`. The closed form is continuous in `n`, so it is
/// already unwrapped across the aperture.
pub fn ideal_phase(pos: &UserPosition, f_hz: f64, cfg: &SystemConfig, grids: &DerivedGrids) -> Vec<f64> {
    let k = 2.0 * PI * f_hz / cfg.speed_of_light_m_per_s;
    path_differences(pos, cfg, grids).into_iter().map(|d| -k * d).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CbsDesign {
    pub start: UserPosition,
    pub end: UserPosition,
    pub beam: ProjectedPta,
}

/// Endpoint-matched design from `start` (lowest subcarrier) to `end`
/// (highest subcarrier).
pub fn cbs_design(start: UserPosition, end: UserPosition, cfg: &SystemConfig, grids: &DerivedGrids) -> Result<CbsDesign> {
    let f1 = grids.subcarrier_freqs_hz[0];
    let fm = *grids.subcarrier_freqs_hz.last().expect("M ≥ 2");
    if !(fm > f1) {
        return Err(Error::InvalidArgument("endpoint frequencies coincide".into()));
    }
    if !start.within(cfg) || !end.within(cfg) {
        return Err(Error::InvalidArgument("anchor outside the service region".into()));
    }
    let psi1 = ideal_phase(&start, f1, cfg, grids);
    let psim = ideal_phase(&end, fm, cfg, grids);
    let t_max = cfg.max_delay_s();
    // Wrapping a delay by whole multiples of 1/f_scs shifts subcarrier m by
    // 2π f_m k / f_scs, and (f_m - f_1) / f_scs is an integer, so rebuilding
    // φ from the wrapped delay keeps both endpoints matched.
    let mut phi = Vec::with_capacity(psi1.len());
    let mut delays = Vec::with_capacity(psi1.len());
    for (p1, pm) in psi1.iter().zip(&psim) {
        let t = (p1 - pm) / (2.0 * PI * (fm - f1));
        let t_proj = mod_const(t - (t / t_max).floor() * t_max, t_max);
        phi.push(mod_const(p1 + 2.0 * PI * f1 * t_proj, 2.0 * PI));
        delays.push(t_proj);
    }
    Ok(CbsDesign { start, end, beam: ProjectedPta { phi, delays } })
}

/// Largest deviation (radians, mod 2π) between the design's weight phase and
/// the ideal focusing phase at both endpoints.
pub fn endpoint_phase_error(design: &CbsDesign, cfg: &SystemConfig, grids: &DerivedGrids) -> f64 {
    let m_last = grids.num_subcarriers() - 1;
    let mut worst = 0.0f64;
    for (m, pos) in [(0, &design.start), (m_last, &design.end)] {
        let f = grids.subcarrier_freqs_hz[m];
        let ideal = ideal_phase(pos, f, cfg, grids);
        for n in 0..ideal.len() {
            let synth = design.beam.phi[n] - 2.0 * PI * f * design.beam.delays[n];
            let d = mod_const(synth - ideal[n] + PI, 2.0 * PI) - PI;
            worst = worst.max(d.abs());
        }
    }
    worst
}

/// Focal point of every subcarrier.
///
/// On subcarrier `m` the design's phase profile is the mix
/// `(1 - λ) ψ_start + λ ψ_end` with `λ = (f_m - f_1)/(f_M - f_1)`, a
/// quadratic `c1 x + c2 x²` in the element position `x`. Matching it to the
/// focusing profile `k x cos α - k x² sin² α / (2 r)` gives the focus.
pub fn trajectory(design: &CbsDesign, cfg: &SystemConfig, grids: &DerivedGrids) -> Vec<UserPosition> {
    let c = cfg.speed_of_light_m_per_s;
    let conv = cfg.angle_convention;
    let f1 = grids.subcarrier_freqs_hz[0];
    let fm = *grids.subcarrier_freqs_hz.last().expect("M ≥ 2");
    let coeffs = |pos: &UserPosition, f: f64| {
        let k = 2.0 * PI * f / c;
        let a = conv.axis_angle(pos.angle_rad);
        (k * a.cos(), -k * a.sin().powi(2) / (2.0 * pos.range_m))
    };
    let (s1, s2) = coeffs(&design.start, f1);
    let (e1, e2) = coeffs(&design.end, fm);
    let far = 1e3 * cfg.range_max_m;
    grids
        .subcarrier_freqs_hz
        .iter()
        .map(|f| {
            let lam = (f - f1) / (fm - f1);
            let c1 = (1.0 - lam) * s1 + lam * e1;
            let c2 = (1.0 - lam) * s2 + lam * e2;
            let k = 2.0 * PI * f / c;
            let cos_a = (c1 / k).clamp(-1.0, 1.0);
            let axis = cos_a.acos();
            let sin2 = 1.0 - cos_a * cos_a;
            let range = if c2 < 0.0 { (k * sin2 / (-2.0 * c2)).min(far) } else { far };
            UserPosition { angle_rad: conv.from_axis_angle(axis), range_m: range.max(f64::MIN_POSITIVE) }
        })
        .collect()
}

/// Anchor range of the fixed rainbow beam used as a baseline: 10 m when the
/// service region ends within 50 m, otherwise two thirds of the maximum range.
pub fn default_anchor_range(cfg: &SystemConfig) -> f64 {
    if cfg.range_max_m <= 50.0 {
        10.0f64.clamp(cfg.range_min_m, cfg.range_max_m)
    } else {
        2.0 / 3.0 * cfg.range_max_m
    }
}

/// Rainbow beam sweeping the full angular sector at [`default_anchor_range`].
pub fn default_design(cfg: &SystemConfig, grids: &DerivedGrids) -> Result<CbsDesign> {
    let r = default_anchor_range(cfg);
    let b = cfg.angle_bound_rad;
    cbs_design(UserPosition::new(-b, r)?, UserPosition::new(b, r)?, cfg, grids)
}

/// Strongest subcarrier (one-based, noiseless) at each range along `angle_rad`.
pub fn index_distance_curve(
    beam: &ProjectedPta,
    angle_rad: f64,
    ranges_m: &[f64],
    cfg: &SystemConfig,
    grids: &DerivedGrids,
) -> Result<Vec<(f64, usize)>> {
    let mut ev = SignalEvaluator::new(beam, cfg, grids);
    ranges_m
        .iter()
        .map(|r| {
            let p = ev.powers(&UserPosition::new(angle_rad, *r)?, None);
            let best = p.iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1)).expect("M ≥ 2").0;
            Ok((*r, best + 1))
        })
        .collect()
}

/// Central-difference slope (subcarriers per meter) of a curve at `r`,
/// using the nearest sampled points `r ± h`.
pub fn curve_slope(curve: &[(f64, usize)], r: f64, h: f64) -> f64 {
    let at = |x: f64| {
        curve
            .iter()
            .min_by(|a, b| (a.0 - x).abs().total_cmp(&(b.0 - x).abs()))
            .map(|p| (p.0, p.1 as f64))
            .expect("non-empty curve")
    };
    let (r0, i0) = at(r - h);
    let (r1, i1) = at(r + h);
    ((i1 - i0) / (r1 - r0)).abs()
}

/// Pool-adjacent-violators fit of a non-increasing sequence.
pub fn isotonic_non_increasing(y: &[f64]) -> Vec<f64> {
    let mut blocks: Vec<(f64, usize)> = Vec::with_capacity(y.len());
    for &v in y {
        blocks.push((v, 1));
        while blocks.len() > 1 {
            let (b, nb) = blocks[blocks.len() - 1];
            let (a, na) = blocks[blocks.len() - 2];
            if a >= b {
                break;
            }
            blocks.pop();
            let merged = (a * na as f64 + b * nb as f64) / (na + nb) as f64;
            *blocks.last_mut().expect("len > 1") = (merged, na + nb);
        }
    }
    blocks.into_iter().flat_map(|(v, n)| std::iter::repeat_n(v, n)).collect()
}

/// Power-to-range table of one angle bin, with power non-increasing in range.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LookupBin {
    pub center_rad: f64,
    /// Increasing calibration ranges.
    pub ranges_m: Vec<f64>,
    /// Isotonic power fit (dBm) at each range.
    pub power_dbm: Vec<f64>,
}

impl LookupBin {
    /// Range whose fitted power equals `p`, by linear interpolation.
    pub fn range_for(&self, p: f64) -> Result<f64> {
        let n = self.ranges_m.len();
        if n == 0 {
            return Err(Error::InvalidArgument("empty lookup bin".into()));
        }
        if p >= self.power_dbm[0] {
            return Ok(self.ranges_m[0]);
        }
        if p <= self.power_dbm[n - 1] {
            return Ok(self.ranges_m[n - 1]);
        }
        for i in 0..n - 1 {
            let (p0, p1) = (self.power_dbm[i], self.power_dbm[i + 1]);
            if p <= p0 && p >= p1 {
                if p0 == p1 {
                    return Ok(self.ranges_m[i]);
                }
                let t = (p0 - p) / (p0 - p1);
                return Ok(self.ranges_m[i] + t * (self.ranges_m[i + 1] - self.ranges_m[i]));
            }
        }
        Ok(self.ranges_m[n - 1])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LookupTable {
    pub bin_width_rad: f64,
    pub bins: Vec<LookupBin>,
    /// Focus angle of every subcarrier (zero-based).
    pub trajectory_angles: Vec<f64>,
    pub range_min_m: f64,
    pub range_max_m: f64,
    pub angle_bound_rad: f64,
}

/// Calibrates a table for `design`: noiseless sweeps at each 2° bin center
/// in 1 m range steps, recording the power the deployed feedback reports.
pub fn build_lookup(design: &CbsDesign, cfg: &SystemConfig, grids: &DerivedGrids) -> Result<LookupTable> {
    let bin_width = 2f64.to_radians();
    let bound = cfg.angle_bound_rad;
    let n_bins = ((2.0 * bound / bin_width).round() as usize).max(1);
    let mut ranges = Vec::new();
    let mut r = cfg.range_min_m;
    while r <= cfg.range_max_m + 1e-9 {
        ranges.push(r);
        r += 1.0;
    }
    let mut ev = SignalEvaluator::new(&design.beam, cfg, grids);
    let mut bins = Vec::with_capacity(n_bins);
    for b in 0..n_bins {
        let center = -bound + (b as f64 + 0.5) * bin_width;
        let raw: Vec<f64> = ranges
            .iter()
            .map(|r| {
                let p = ev.powers(&UserPosition::new(center, *r)?, None);
                Ok(FeedbackMessage::from_powers(&p, cfg.softmax_temperature, None)?.power_dbm)
            })
            .collect::<Result<_>>()?;
        bins.push(LookupBin { center_rad: center, ranges_m: ranges.clone(), power_dbm: isotonic_non_increasing(&raw) });
    }
    Ok(LookupTable {
        bin_width_rad: bin_width,
        bins,
        trajectory_angles: trajectory(design, cfg, grids).iter().map(|p| p.angle_rad).collect(),
        range_min_m: cfg.range_min_m,
        range_max_m: cfg.range_max_m,
        angle_bound_rad: bound,
    })
}

/// Angle from the trajectory at the reported index, range from the nearest
/// angle bin's inverted power curve.
pub fn lookup_estimate(msg: &FeedbackMessage, table: &LookupTable) -> Result<PositionEstimate> {
    let m = msg.subcarrier_index.clamp(1, table.trajectory_angles.len());
    let angle = table.trajectory_angles[m - 1].clamp(-table.angle_bound_rad, table.angle_bound_rad);
    let bin = table
        .bins
        .iter()
        .min_by(|a, b| (a.center_rad - angle).abs().total_cmp(&(b.center_rad - angle).abs()))
        .ok_or_else(|| Error::InvalidArgument("lookup table has no bins".into()))?;
    let range = bin.range_for(msg.power_dbm)?.clamp(table.range_min_m, table.range_max_m);
    Ok(PositionEstimate { angle_rad: angle, range_m: range })
}

/// Noiseless received power in dBm at `pos`, on every subcarrier.
pub fn received_power_dbm(beam: &ProjectedPta, pos: &UserPosition, cfg: &SystemConfig, grids: &DerivedGrids) -> Vec<f64> {
    SignalEvaluator::new(beam, cfg, grids).powers(pos, None).into_iter().map(watts_to_dbm).collect()
}
