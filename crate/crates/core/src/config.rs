//! Physical constants, array geometry and the derived frequency/spatial grids.
//!
//! Everything downstream reads its constants from a validated [`SystemConfig`].
//! Configs are written as flat `key = value` files (TOML syntax); see
//! [`build_config`] and the README for the key list.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::f64::consts::PI;

use crate::error::{Error, Result};

/// Relative tolerance on the `M * f_scs == B` identity.
const GRID_TOLERANCE: f64 = 1e-9;

/// How user angles are measured.
///
/// `Boresight` measures the angle from the array normal, so the service
/// sector `[-60°, 60°]` is centered on broadside. `Axis` measures it from the
/// array axis as in `u = [r cos θ, r sin θ]` with the array on the x-axis,
/// where `θ = 90°` is broadside. Internally `axis = boresight + 90°`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum AngleConvention {
    #[default]
    Boresight,
    Axis,
}

impl AngleConvention {
    /// Angle from the array axis for a user angle in this convention.
    pub fn axis_angle(self, angle_rad: f64) -> f64 {
        match self {
            AngleConvention::Boresight => angle_rad + PI / 2.0,
            AngleConvention::Axis => angle_rad,
        }
    }

    /// Inverse of [`AngleConvention::axis_angle`].
    pub fn from_axis_angle(self, axis_rad: f64) -> f64 {
        match self {
            AngleConvention::Boresight => axis_rad - PI / 2.0,
            AngleConvention::Axis => axis_rad,
        }
    }
}

/// All physical and array constants of one simulation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SystemConfig {
    pub carrier_freq_hz: f64,
    pub bandwidth_hz: f64,
    pub subcarrier_spacing_hz: f64,
    pub num_antennas: usize,
    pub num_subcarriers: usize,
    pub noise_psd_dbm_per_hz: f64,
    pub tx_power_dbm: f64,
    pub speed_of_light_m_per_s: f64,
    pub angle_bound_rad: f64,
    pub range_min_m: f64,
    pub range_max_m: f64,
    pub softmax_temperature: f64,
    #[serde(default)]
    pub quantization_bits: Option<u32>,
    pub rng_seed: u64,
    #[serde(default)]
    pub angle_convention: AngleConvention,
}

impl SystemConfig {
    /// Full-size setup: 28 GHz carrier, 256 antennas, 1584 subcarriers at
    /// 240 kHz spacing, users within 5–300 m.
    pub fn full() -> Self {
        Self {
            carrier_freq_hz: 28e9,
            bandwidth_hz: 380.16e6,
            subcarrier_spacing_hz: 240e3,
            num_antennas: 256,
            num_subcarriers: 1584,
            noise_psd_dbm_per_hz: -174.0,
            tx_power_dbm: 40.0,
            speed_of_light_m_per_s: 3e8,
            angle_bound_rad: PI / 3.0,
            range_min_m: 5.0,
            range_max_m: 300.0,
            softmax_temperature: 20.0,
            quantization_bits: None,
            rng_seed: 0,
            angle_convention: AngleConvention::Boresight,
        }
    }

    /// Desk-scale setup used for CI: 64 antennas, 256 subcarriers, 5–50 m.
    pub fn desk() -> Self {
        Self {
            bandwidth_hz: 256.0 * 240e3,
            num_antennas: 64,
            num_subcarriers: 256,
            range_max_m: 50.0,
            ..Self::full()
        }
    }

    /// Checks every construction invariant.
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("carrier_freq_hz", self.carrier_freq_hz),
            ("bandwidth_hz", self.bandwidth_hz),
            ("subcarrier_spacing_hz", self.subcarrier_spacing_hz),
            ("speed_of_light_m_per_s", self.speed_of_light_m_per_s),
            ("angle_bound_rad", self.angle_bound_rad),
            ("range_min_m", self.range_min_m),
            ("softmax_temperature", self.softmax_temperature),
        ];
        for (name, v) in positive {
            if !v.is_finite() || v <= 0.0 {
                return Err(Error::Config(format!("{name} must be positive and finite, got {v}")));
            }
        }
        for (name, v) in [
            ("noise_psd_dbm_per_hz", self.noise_psd_dbm_per_hz),
            ("tx_power_dbm", self.tx_power_dbm),
            ("range_max_m", self.range_max_m),
        ] {
            if !v.is_finite() {
                return Err(Error::Config(format!("{name} must be finite")));
            }
        }
        if self.num_antennas < 2 {
            return Err(Error::Config("num_antennas must be at least 2".into()));
        }
        if self.num_subcarriers < 2 {
            return Err(Error::Config("num_subcarriers must be at least 2".into()));
        }
        if self.range_max_m <= self.range_min_m {
            return Err(Error::Config(format!(
                "range_max_m ({}) must exceed range_min_m ({})",
                self.range_max_m, self.range_min_m
            )));
        }
        if self.angle_bound_rad > PI / 2.0 {
            return Err(Error::Config("angle_bound_rad must not exceed pi/2".into()));
        }
        let grid = self.num_subcarriers as f64 * self.subcarrier_spacing_hz;
        if ((grid - self.bandwidth_hz) / self.bandwidth_hz).abs() > GRID_TOLERANCE {
            return Err(Error::Config(format!(
                "subcarrier grid mismatch: M * f_scs = {grid} Hz but bandwidth is {} Hz",
                self.bandwidth_hz
            )));
        }
        if let Some(b) = self.quantization_bits {
            if !(1..=16).contains(&b) {
                return Err(Error::Config(format!("quantization_bits must be in 1..=16, got {b}")));
            }
        }
        Ok(())
    }

    /// Antenna spacing `d = c / (2 f_c)`.
    pub fn antenna_spacing_m(&self) -> f64 {
        self.speed_of_light_m_per_s / (2.0 * self.carrier_freq_hz)
    }

    pub fn wavelength_m(&self) -> f64 {
        self.speed_of_light_m_per_s / self.carrier_freq_hz
    }

    /// Largest realizable delay, one OFDM symbol `1 / f_scs`.
    pub fn max_delay_s(&self) -> f64 {
        1.0 / self.subcarrier_spacing_hz
    }

    pub fn tx_power_w(&self) -> f64 {
        dbm_to_watts(self.tx_power_dbm)
    }

    /// Noise power in one subcarrier, `σ² f_scs` in watts.
    pub fn noise_power_per_subcarrier_w(&self) -> f64 {
        dbm_to_watts(self.noise_psd_dbm_per_hz) * self.subcarrier_spacing_hz
    }

    /// Stable identifier of everything that changes channels or datasets.
    ///
    /// The temperature, quantization bits and seed are excluded: they do not
    /// change the geometry a dataset or checkpoint was built for.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        let fields = [
            self.carrier_freq_hz,
            self.bandwidth_hz,
            self.subcarrier_spacing_hz,
            self.num_antennas as f64,
            self.num_subcarriers as f64,
            self.noise_psd_dbm_per_hz,
            self.tx_power_dbm,
            self.speed_of_light_m_per_s,
            self.angle_bound_rad,
            self.range_min_m,
            self.range_max_m,
        ];
        for f in fields {
            h.update(f.to_le_bytes());
        }
        h.update([self.angle_convention as u8]);
        hex::encode(&h.finalize()[..16])
    }

    /// Copy of this config with a different user range.
    pub fn with_range(&self, range_min_m: f64, range_max_m: f64) -> Result<Self> {
        let cfg = Self { range_min_m, range_max_m, ..self.clone() };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Grids derived from a [`SystemConfig`].
#[derive(Debug, Clone, PartialEq)]
pub struct DerivedGrids {
    /// `f_m` for `m = 1..=M`, stored at index `m - 1`.
    pub subcarrier_freqs_hz: Vec<f64>,
    /// `x_n = n - (N + 1) / 2` for `n = 1..=N`.
    pub antenna_offsets: Vec<f64>,
    /// `|s_m|`, equal power split of the transmit power.
    pub per_subcarrier_tx_amplitude: Vec<f64>,
    pub per_subcarrier_noise_power_w: Vec<f64>,
}

impl DerivedGrids {
    pub fn num_subcarriers(&self) -> usize {
        self.subcarrier_freqs_hz.len()
    }

    pub fn num_antennas(&self) -> usize {
        self.antenna_offsets.len()
    }
}

/// Parses a flat `key = value` config and validates it.
pub fn build_config(raw: &str) -> Result<SystemConfig> {
    let cfg: SystemConfig = toml::from_str(raw)?;
    cfg.validate()?;
    Ok(cfg)
}

/// Renders a config in the same flat format [`build_config`] accepts.
pub fn render_config(cfg: &SystemConfig) -> String {
    toml::to_string(cfg).expect("flat config always serializes")
}

pub fn derive_grids(cfg: &SystemConfig) -> DerivedGrids {
    let m_total = cfg.num_subcarriers;
    let n_total = cfg.num_antennas;
    let subcarrier_freqs_hz = (1..=m_total)
        .map(|m| {
            let k = (2 * m) as f64 - 1.0 - m_total as f64;
            cfg.carrier_freq_hz + k / 2.0 * cfg.subcarrier_spacing_hz
        })
        .collect();
    let antenna_offsets = (1..=n_total)
        .map(|n| n as f64 - (n_total as f64 + 1.0) / 2.0)
        .collect();
    let amp = (cfg.tx_power_w() / m_total as f64).sqrt();
    let noise = cfg.noise_power_per_subcarrier_w();
    DerivedGrids {
        subcarrier_freqs_hz,
        antenna_offsets,
        per_subcarrier_tx_amplitude: vec![amp; m_total],
        per_subcarrier_noise_power_w: vec![noise; m_total],
    }
}

/// Rayleigh distance `2 D² / λ` with aperture `D = (N - 1) d`.
pub fn rayleigh_distance(cfg: &SystemConfig) -> f64 {
    let aperture = (cfg.num_antennas as f64 - 1.0) * cfg.antenna_spacing_m();
    2.0 * aperture * aperture / cfg.wavelength_m()
}

pub fn dbm_to_watts(dbm: f64) -> f64 {
    10f64.powf((dbm - 30.0) / 10.0)
}

pub fn watts_to_dbm(w: f64) -> f64 {
    10.0 * w.log10() + 30.0
}
