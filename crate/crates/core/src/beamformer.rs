//! Phase–time array transmit weights and the received OFDM signal.
//!
//! Antenna `n` applies a phase `φ_n` and a true-time delay `t_n`, so its
//! weight on subcarrier `m` is `e^{j(φ_n - 2π f_m t_n)}`. The delay makes the
//! beam frequency dependent.

use ndarray::{Array2, ArrayD, IxDyn};
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;
use std::sync::Arc;

use crate::autodiff::{cis, dot_conj, mod_const, ComplexLinearMap, Tape, Tensor, Var};
use crate::config::{watts_to_dbm, DerivedGrids, SystemConfig};
use crate::error::{Error, Result};
use crate::geometry::{common_terms, fill_steering, ChannelMatrix, UserPosition};

/// Unconstrained phase and delay parameters, one per antenna.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PtaParams {
    pub theta_phi: Vec<f64>,
    pub theta_t: Vec<f64>,
}

/// Carrier-referenced coordinates of a [`PtaParams`]:
/// `carrier_phase = Θ_Φ - 2π f_c Θ_T` and `delay_units = Θ_T · B`.
///
/// Both coordinates move the per-subcarrier phases by `O(1)` radians per
/// unit, which is the scale the optimizer works on.
#[derive(Debug, Clone, PartialEq)]
pub struct BeamCoords {
    pub carrier_phase: Vec<f64>,
    pub delay_units: Vec<f64>,
}

impl PtaParams {
    pub fn new(theta_phi: Vec<f64>, theta_t: Vec<f64>) -> Result<Self> {
        if theta_phi.len() != theta_t.len() {
            return Err(Error::DimensionMismatch {
                expected: format!("{} delays", theta_phi.len()),
                got: format!("{}", theta_t.len()),
            });
        }
        let p = Self { theta_phi, theta_t };
        p.check_finite()?;
        Ok(p)
    }

    pub fn num_antennas(&self) -> usize {
        self.theta_phi.len()
    }

    pub fn check_finite(&self) -> Result<()> {
        if self.theta_phi.iter().chain(&self.theta_t).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("phase/delay parameters".into()));
        }
        Ok(())
    }

    /// Random phases and a linear delay ramp `n τ₀` (`τ₀ = 1/(M f_scs)`)
    /// with up to `0.1 / f_scs` of jitter.
    pub fn random_init(cfg: &SystemConfig, rng: &mut impl Rng) -> Self {
        let n = cfg.num_antennas;
        let tau0 = 1.0 / (cfg.num_subcarriers as f64 * cfg.subcarrier_spacing_hz);
        let jitter = 0.1 / cfg.subcarrier_spacing_hz;
        let theta_phi = (0..n).map(|_| rng.random_range(0.0..2.0 * PI)).collect();
        let theta_t = (0..n).map(|i| i as f64 * tau0 + rng.random_range(0.0..jitter)).collect();
        Self { theta_phi, theta_t }
    }

    pub fn to_coords(&self, cfg: &SystemConfig) -> BeamCoords {
        BeamCoords {
            carrier_phase: self
                .theta_phi
                .iter()
                .zip(&self.theta_t)
                .map(|(p, t)| p - 2.0 * PI * cfg.carrier_freq_hz * t)
                .collect(),
            delay_units: self.theta_t.iter().map(|t| t * cfg.bandwidth_hz).collect(),
        }
    }

    pub fn from_coords(coords: &BeamCoords, cfg: &SystemConfig) -> Self {
        // Same operation order as `taped_weights`, so both paths agree exactly.
        let theta_t: Vec<f64> = coords.delay_units.iter().map(|d| d * (1.0 / cfg.bandwidth_hz)).collect();
        let theta_phi = coords
            .carrier_phase
            .iter()
            .zip(&theta_t)
            .map(|(a, t)| a + t * (2.0 * PI * cfg.carrier_freq_hz))
            .collect();
        Self { theta_phi, theta_t }
    }
}

/// Physical phases in `[0, 2π)` and delays in `[0, 1/f_scs)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProjectedPta {
    pub phi: Vec<f64>,
    pub delays: Vec<f64>,
}

impl ProjectedPta {
    pub fn num_antennas(&self) -> usize {
        self.phi.len()
    }

    /// The same values viewed as unconstrained parameters.
    pub fn as_params(&self) -> PtaParams {
        PtaParams { theta_phi: self.phi.clone(), theta_t: self.delays.clone() }
    }
}

/// `φ = Θ_Φ mod 2π`, `t = Θ_T mod 1/f_scs`.
pub fn project_params(params: &PtaParams, cfg: &SystemConfig) -> Result<ProjectedPta> {
    params.check_finite()?;
    let t_max = cfg.max_delay_s();
    Ok(ProjectedPta {
        phi: params.theta_phi.iter().map(|p| mod_const(*p, 2.0 * PI)).collect(),
        delays: params.theta_t.iter().map(|t| mod_const(*t, t_max)).collect(),
    })
}

/// Weight phase `φ_n - 2π f_m t_n`, evaluated as `(-2π f_m) t_n + φ_n`.
fn weight_phase(neg_omega: f64, t: f64, phi: f64) -> f64 {
    neg_omega * t + phi
}

fn neg_omegas(grids: &DerivedGrids) -> Vec<f64> {
    grids.subcarrier_freqs_hz.iter().map(|f| -2.0 * PI * f).collect()
}

/// Transmit weights on subcarrier `m` (zero-based).
pub fn beam_weights(proj: &ProjectedPta, m: usize, grids: &DerivedGrids) -> Vec<Complex64> {
    let w = -2.0 * PI * grids.subcarrier_freqs_hz[m];
    proj.phi
        .iter()
        .zip(&proj.delays)
        .map(|(phi, t)| cis(weight_phase(w, *t, *phi)))
        .collect()
}

/// All weights as split real/imaginary `M × N` row-major buffers.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightRows {
    pub re: Vec<f64>,
    pub im: Vec<f64>,
    pub num_antennas: usize,
}

impl WeightRows {
    pub fn from_projected(proj: &ProjectedPta, grids: &DerivedGrids) -> Self {
        let n = proj.num_antennas();
        let mut re = Vec::with_capacity(n * grids.num_subcarriers());
        let mut im = Vec::with_capacity(n * grids.num_subcarriers());
        for w in neg_omegas(grids) {
            for (phi, t) in proj.phi.iter().zip(&proj.delays) {
                let z = cis(weight_phase(w, *t, *phi));
                re.push(z.re);
                im.push(z.im);
            }
        }
        Self { re, im, num_antennas: n }
    }

    fn from_complex(w: &ArrayD<Complex64>) -> Self {
        let n = w.shape()[1];
        let ws = w.as_standard_layout();
        let sl = ws.as_slice().expect("standard layout");
        Self { re: sl.iter().map(|z| z.re).collect(), im: sl.iter().map(|z| z.im).collect(), num_antennas: n }
    }

    fn row(&self, m: usize) -> (&[f64], &[f64]) {
        let n = self.num_antennas;
        (&self.re[m * n..(m + 1) * n], &self.im[m * n..(m + 1) * n])
    }
}

/// Noiseless `y_m = conj(c_m) (Σ_n conj(a_mn) w_mn) s_m` from a steering
/// matrix held as split buffers; `c_m` is the channel's common term.
fn noiseless_from_steering(
    common: &[Complex64],
    amp: &[f64],
    a_re: &[f64],
    a_im: &[f64],
    w: &WeightRows,
    out: &mut [Complex64],
) {
    let n = w.num_antennas;
    for m in 0..common.len() {
        let (w_re, w_im) = w.row(m);
        let dot = dot_conj(&a_re[m * n..(m + 1) * n], &a_im[m * n..(m + 1) * n], w_re, w_im);
        out[m] = common[m].conj() * dot * amp[m];
    }
}

/// Per-subcarrier complex Gaussian noise with variance `σ² f_scs`.
pub fn noise_vector(seed: u64, grids: &DerivedGrids) -> Vec<Complex64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    grids
        .per_subcarrier_noise_power_w
        .iter()
        .map(|var| {
            let s = (var / 2.0).sqrt();
            let re: f64 = rng.sample(StandardNormal);
            let im: f64 = rng.sample(StandardNormal);
            Complex64::new(re * s, im * s)
        })
        .collect()
}

/// `y_m = h_mᴴ w(m) s_m + n_m`; noise is omitted when `noise_seed` is `None`.
pub fn received_signal(
    h: &ChannelMatrix,
    proj: &ProjectedPta,
    grids: &DerivedGrids,
    noise_seed: Option<u64>,
) -> Result<Vec<Complex64>> {
    let (m_sub, n_ant) = (grids.num_subcarriers(), proj.num_antennas());
    if h.num_subcarriers() != m_sub || h.num_antennas() != n_ant || grids.num_antennas() != n_ant {
        return Err(Error::DimensionMismatch {
            expected: format!("{m_sub}x{}", grids.num_antennas()),
            got: format!("channel {}x{}, beam {n_ant}", h.num_subcarriers(), h.num_antennas()),
        });
    }
    let w = WeightRows::from_projected(proj, grids);
    let st = h.steering.as_standard_layout();
    let sl = st.as_slice().expect("standard layout");
    let a_re: Vec<f64> = sl.iter().map(|z| z.re).collect();
    let a_im: Vec<f64> = sl.iter().map(|z| z.im).collect();
    let mut y = vec![Complex64::new(0.0, 0.0); m_sub];
    noiseless_from_steering(&h.common, &grids.per_subcarrier_tx_amplitude, &a_re, &a_im, &w, &mut y);
    if let Some(seed) = noise_seed {
        for (y, n) in y.iter_mut().zip(noise_vector(seed, grids)) {
            *y += n;
        }
    }
    Ok(y)
}

/// Reusable buffers for evaluating many users against one beam.
pub struct SignalEvaluator<'a> {
    cfg: &'a SystemConfig,
    grids: &'a DerivedGrids,
    weights: WeightRows,
    a_re: Vec<f64>,
    a_im: Vec<f64>,
}

impl<'a> SignalEvaluator<'a> {
    pub fn new(proj: &ProjectedPta, cfg: &'a SystemConfig, grids: &'a DerivedGrids) -> Self {
        let len = grids.num_subcarriers() * grids.num_antennas();
        Self {
            cfg,
            grids,
            weights: WeightRows::from_projected(proj, grids),
            a_re: vec![0.0; len],
            a_im: vec![0.0; len],
        }
    }

    /// Received signal of one user; matches [`received_signal`] bit for bit.
    pub fn signal(&mut self, pos: &UserPosition, noise_seed: Option<u64>) -> Vec<Complex64> {
        fill_steering(pos, self.cfg, self.grids, &mut self.a_re, &mut self.a_im);
        let (_, common) = common_terms(pos, self.cfg, self.grids);
        let mut y = vec![Complex64::new(0.0, 0.0); self.grids.num_subcarriers()];
        noiseless_from_steering(
            &common,
            &self.grids.per_subcarrier_tx_amplitude,
            &self.a_re,
            &self.a_im,
            &self.weights,
            &mut y,
        );
        if let Some(seed) = noise_seed {
            for (y, n) in y.iter_mut().zip(noise_vector(seed, self.grids)) {
                *y += n;
            }
        }
        y
    }

    /// `|y_m|²` in watts.
    pub fn powers(&mut self, pos: &UserPosition, noise_seed: Option<u64>) -> Vec<f64> {
        self.signal(pos, noise_seed).iter().map(|z| z.norm_sqr()).collect()
    }
}

fn check_grid(angles: &[f64], ranges: &[f64]) -> Result<()> {
    if angles.is_empty() || ranges.is_empty() {
        return Err(Error::InvalidArgument("beam pattern grid must be non-empty".into()));
    }
    Ok(())
}

/// Max-over-subcarrier noiseless received power (dBm) on an angle × range grid.
pub fn beam_pattern_map(
    proj: &ProjectedPta,
    angles_rad: &[f64],
    ranges_m: &[f64],
    cfg: &SystemConfig,
    grids: &DerivedGrids,
) -> Result<Array2<f64>> {
    check_grid(angles_rad, ranges_m)?;
    let mut ev = SignalEvaluator::new(proj, cfg, grids);
    let mut out = Array2::zeros((angles_rad.len(), ranges_m.len()));
    for (i, th) in angles_rad.iter().enumerate() {
        for (j, r) in ranges_m.iter().enumerate() {
            let pos = UserPosition::new(*th, *r)?;
            let best = ev.powers(&pos, None).into_iter().fold(0.0, f64::max);
            out[[i, j]] = watts_to_dbm(best);
        }
    }
    Ok(out)
}

/// What a single-subcarrier map measures.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PowerMetric {
    /// Noiseless received power `|h_mᴴ w s_m|²` in dBm.
    ReceivedDbm,
    /// Array gain `|a_mᴴ w|²` in dB, free of path loss.
    ArrayGainDb,
}

/// Map of one subcarrier's response on an angle × range grid.
pub fn subcarrier_map(
    proj: &ProjectedPta,
    m: usize,
    metric: PowerMetric,
    angles_rad: &[f64],
    ranges_m: &[f64],
    cfg: &SystemConfig,
    grids: &DerivedGrids,
) -> Result<Array2<f64>> {
    check_grid(angles_rad, ranges_m)?;
    let w = beam_weights(proj, m, grids);
    let w_re: Vec<f64> = w.iter().map(|z| z.re).collect();
    let w_im: Vec<f64> = w.iter().map(|z| z.im).collect();
    let f = grids.subcarrier_freqs_hz[m];
    let k = 2.0 * PI * f / cfg.speed_of_light_m_per_s;
    let amp = grids.per_subcarrier_tx_amplitude[m];
    let mut out = Array2::zeros((angles_rad.len(), ranges_m.len()));
    for (i, th) in angles_rad.iter().enumerate() {
        for (j, r) in ranges_m.iter().enumerate() {
            let pos = UserPosition::new(*th, *r)?;
            let dr = crate::geometry::path_differences(&pos, cfg, grids);
            let (a_re, a_im): (Vec<f64>, Vec<f64>) = dr.iter().map(|d| (-k * d).sin_cos()).map(|(s, c)| (c, s)).unzip();
            let g = dot_conj(&a_re, &a_im, &w_re, &w_im).norm_sqr();
            out[[i, j]] = match metric {
                PowerMetric::ArrayGainDb => 10.0 * g.log10(),
                PowerMetric::ReceivedDbm => {
                    let beta = cfg.speed_of_light_m_per_s / (4.0 * PI * f * r);
                    watts_to_dbm(g * beta * beta * amp * amp)
                }
            };
        }
    }
    Ok(out)
}

/// Noiseless received signals of a batch of users as a linear map of the
/// `M × N` weight matrix. Steering matrices are regenerated on every call
/// so memory stays `O(M N)` regardless of batch size.
pub struct ChannelBatch {
    positions: Vec<UserPosition>,
    commons: Vec<Vec<Complex64>>,
    cfg: Arc<SystemConfig>,
    grids: Arc<DerivedGrids>,
}

impl ChannelBatch {
    pub fn new(positions: &[UserPosition], cfg: Arc<SystemConfig>, grids: Arc<DerivedGrids>) -> Self {
        let commons = positions.iter().map(|p| common_terms(p, &cfg, &grids).1).collect();
        Self { positions: positions.to_vec(), commons, cfg, grids }
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }
}

impl ComplexLinearMap for ChannelBatch {
    fn input_shape(&self) -> Vec<usize> {
        vec![self.grids.num_subcarriers(), self.grids.num_antennas()]
    }

    fn apply(&self, w: &ArrayD<Complex64>) -> ArrayD<Complex64> {
        let m_sub = self.grids.num_subcarriers();
        let wr = WeightRows::from_complex(w);
        let len = m_sub * self.grids.num_antennas();
        let (mut a_re, mut a_im) = (vec![0.0; len], vec![0.0; len]);
        let mut out = vec![Complex64::new(0.0, 0.0); self.len() * m_sub];
        for (b, pos) in self.positions.iter().enumerate() {
            fill_steering(pos, &self.cfg, &self.grids, &mut a_re, &mut a_im);
            noiseless_from_steering(
                &self.commons[b],
                &self.grids.per_subcarrier_tx_amplitude,
                &a_re,
                &a_im,
                &wr,
                &mut out[b * m_sub..(b + 1) * m_sub],
            );
        }
        ArrayD::from_shape_vec(IxDyn(&[self.len(), m_sub]), out).expect("shape")
    }

    fn apply_transpose(&self, _w: &ArrayD<Complex64>, g: &ArrayD<Complex64>) -> ArrayD<Complex64> {
        let (m_sub, n_ant) = (self.grids.num_subcarriers(), self.grids.num_antennas());
        let len = m_sub * n_ant;
        let (mut a_re, mut a_im) = (vec![0.0; len], vec![0.0; len]);
        let (mut g_re, mut g_im) = (vec![0.0; len], vec![0.0; len]);
        let gs = g.as_standard_layout();
        let gsl = gs.as_slice().expect("standard layout");
        for (b, pos) in self.positions.iter().enumerate() {
            fill_steering(pos, &self.cfg, &self.grids, &mut a_re, &mut a_im);
            for m in 0..m_sub {
                // ∂y_bm/∂w_mn = conj(c_bm) s_m conj(a_bmn)
                let coef = gsl[b * m_sub + m] * self.commons[b][m].conj() * self.grids.per_subcarrier_tx_amplitude[m];
                let (cr, ci) = (coef.re, coef.im);
                let row = m * n_ant..(m + 1) * n_ant;
                let (ar, ai) = (&a_re[row.clone()], &a_im[row.clone()]);
                let (gr, gi) = (&mut g_re[row.clone()], &mut g_im[row]);
                for n in 0..n_ant {
                    gr[n] += cr * ar[n] + ci * ai[n];
                    gi[n] += ci * ar[n] - cr * ai[n];
                }
            }
        }
        let out: Vec<Complex64> = g_re.into_iter().zip(g_im).map(|(r, i)| Complex64::new(r, i)).collect();
        ArrayD::from_shape_vec(IxDyn(&[m_sub, n_ant]), out).expect("shape")
    }
}

/// Tape handles for a beam built from carrier-referenced coordinates.
#[derive(Debug, Clone, Copy)]
pub struct TapedBeam {
    pub carrier_phase: Var,
    pub delay_units: Var,
    /// `M × N` complex weights.
    pub weights: Var,
}

/// Records `W[m, n] = exp(j((-2π f_m) t_n + φ_n))` with projected `φ, t`
/// computed from the two coordinate leaves.
pub fn taped_weights(
    tape: &mut Tape,
    coords: &BeamCoords,
    trainable: bool,
    cfg: &SystemConfig,
    grids: &DerivedGrids,
) -> Result<TapedBeam> {
    let leaf = |tape: &mut Tape, v: &[f64]| {
        let t = Tensor::vector(v.to_vec());
        if trainable {
            tape.param(t)
        } else {
            tape.constant(t)
        }
    };
    let carrier_phase = leaf(tape, &coords.carrier_phase);
    let delay_units = leaf(tape, &coords.delay_units);
    let theta_t = tape.scale(delay_units, 1.0 / cfg.bandwidth_hz);
    let carrier_shift = tape.scale(theta_t, 2.0 * PI * cfg.carrier_freq_hz);
    let theta_phi = tape.add(carrier_phase, carrier_shift)?;
    let phi = tape.mod_const(theta_phi, 2.0 * PI)?;
    let t = tape.mod_const(theta_t, cfg.max_delay_s())?;
    let omegas = tape.constant(Tensor::vector(neg_omegas(grids)));
    let ramp = tape.outer(omegas, t)?;
    let phase = tape.bias_add(ramp, phi)?;
    let weights = tape.complex_exp(phase)?;
    Ok(TapedBeam { carrier_phase, delay_units, weights })
}
