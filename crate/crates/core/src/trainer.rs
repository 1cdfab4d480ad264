//! End-to-end training of the beam and the estimator, evaluation, and
//! checkpoints.
//!
//! Training runs in two phases. The joint phase optimizes beam and
//! estimator through the soft feedback path: the reported index is the
//! softmax-weighted mean index and the reported power is the
//! softmax-weighted mean power, so the whole chain is differentiable. The
//! estimator phase then freezes the beam and fits the estimator on the hard
//! features the deployed protocol actually sends. Evaluation always uses the
//! hard path.

use ndarray::{Array2, ArrayD, IxDyn};
use num_complex::Complex64;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::path::Path;
use std::sync::Arc;

use crate::autodiff::{Gradients, Tape, Tensor, Var};
use crate::beamformer::{
    noise_vector, project_params, taped_weights, BeamCoords, ChannelBatch, ProjectedPta, PtaParams, SignalEvaluator,
};
use crate::cbs::{default_design, lookup_estimate, CbsDesign, LookupTable};
use crate::config::{watts_to_dbm, DerivedGrids, SystemConfig};
use crate::dataset::{derive_seed, provenance_header, Dataset};
use crate::error::{Error, Result};
use crate::estimator::{mlp_forward, taped_forward, FeatureNorm, MlpParams, MlpVars, PositionEstimate, DEFAULT_DIMS};
use crate::feedback::{calibrate_range, FeedbackMessage, Quantizer};
use crate::geometry::UserPosition;

/// Checkpoint format version.
pub const CHECKPOINT_VERSION: u32 = 1;

/// Noise stream of the frozen-beam training features.
pub const ESTIMATOR_STREAM: u64 = u64::MAX - 1;
/// Noise stream used by [`evaluate`].
pub const EVAL_STREAM: u64 = u64::MAX - 2;
/// Noise stream of the power-range calibration pass.
pub const CALIBRATION_STREAM: u64 = u64::MAX - 3;
/// Noise stream of soft-path validation.
pub const VALIDATION_STREAM: u64 = u64::MAX - 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BeamInit {
    /// Start from the analytic rainbow beam of [`default_design`].
    Cbs,
    /// Random phases and a jittered delay ramp.
    Random,
}

/// Optimizer and schedule settings. Every field has a default.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub seed: u64,
    /// Epoch budget of the joint phase.
    pub joint_epochs: usize,
    /// Epoch budget of the frozen-beam estimator phase.
    pub estimator_epochs: usize,
    /// Joint epochs per bit width when fine-tuning with a quantizer.
    pub qat_joint_epochs: usize,
    pub batch_size: usize,
    pub lr_estimator: f64,
    pub lr_beam: f64,
    /// Epochs without validation improvement before the learning rate drops.
    pub plateau_patience: usize,
    pub lr_decay: f64,
    /// Epochs without validation improvement before a phase stops.
    pub early_stop_patience: usize,
    /// Add receiver noise to training samples.
    pub train_noise: bool,
    pub beam_init: BeamInit,
    pub dims: Vec<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            joint_epochs: 300,
            estimator_epochs: 300,
            qat_joint_epochs: 20,
            batch_size: 256,
            lr_estimator: 1e-3,
            lr_beam: 1e-2,
            plateau_patience: 10,
            lr_decay: 0.5,
            early_stop_patience: 30,
            train_noise: true,
            beam_init: BeamInit::Cbs,
            dims: DEFAULT_DIMS.to_vec(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        for (name, v) in [("lr_estimator", self.lr_estimator), ("lr_beam", self.lr_beam)] {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return Err(Error::Config("lr_decay must be in (0, 1]".into()));
        }
        if self.dims.first() != Some(&2) || self.dims.last() != Some(&2) {
            return Err(Error::Config("estimator dims must start and end with 2".into()));
        }
        Ok(())
    }
}

/// Parses a TOML training config; missing keys take their defaults.
pub fn build_train_config(raw: &str) -> Result<TrainConfig> {
    let tc: TrainConfig = toml::from_str(raw)?;
    tc.validate()?;
    Ok(tc)
}

/// 2D error summary of a set of estimates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub rmse_2d_m: f64,
    pub angle_rmse_rad: f64,
    pub range_rmse_m: f64,
    /// Squared Cartesian error of every sample.
    pub squared_errors: Vec<f64>,
}

/// `sqrt(mean((x̂ - x)² + (ŷ - y)²))` plus per-coordinate RMSEs.
pub fn loss_rmse(estimates: &[PositionEstimate], truths: &[UserPosition]) -> Result<LossReport> {
    if estimates.is_empty() {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    if estimates.len() != truths.len() {
        return Err(Error::DimensionMismatch {
            expected: format!("{} truths", estimates.len()),
            got: truths.len().to_string(),
        });
    }
    let k = estimates.len() as f64;
    let (mut ang, mut rng) = (0.0, 0.0);
    let squared_errors: Vec<f64> = estimates
        .iter()
        .zip(truths)
        .map(|(e, t)| {
            ang += (e.angle_rad - t.angle_rad).powi(2);
            rng += (e.range_m - t.range_m).powi(2);
            let ((xe, ye), (xt, yt)) = (e.cartesian(), t.cartesian());
            (xe - xt).powi(2) + (ye - yt).powi(2)
        })
        .collect();
    Ok(LossReport {
        rmse_2d_m: (squared_errors.iter().sum::<f64>() / k).sqrt(),
        angle_rmse_rad: (ang / k).sqrt(),
        range_rmse_m: (rng / k).sqrt(),
        squared_errors,
    })
}

/// Adam with bias correction over a list of flat parameter blocks.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: i32,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(lr: f64, sizes: &[usize]) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: sizes.iter().map(|n| vec![0.0; *n]).collect(),
            v: sizes.iter().map(|n| vec![0.0; *n]).collect(),
        }
    }

    pub fn step(&mut self, params: &mut [&mut Vec<f64>], grads: &[&[f64]]) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for (k, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            for i in 0..p.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                p[i] -= self.lr * (m[i] / c1) / ((v[i] / c2).sqrt() + self.eps);
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    /// Beam and estimator trained together.
    Joint,
    /// Analytic beam, trained estimator.
    FixedBeam,
    /// Analytic beam alone, no estimator.
    Analytic,
}

/// Everything needed to localize from feedback: one checkpoint file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Model {
    pub format_version: u32,
    pub config_hash: String,
    pub kind: ModelKind,
    pub beam: PtaParams,
    pub mlp: MlpParams,
    pub norm: FeatureNorm,
    /// Present when the feedback power is quantized.
    pub quantizer: Option<Quantizer>,
    pub alpha: f64,
}

impl Model {
    pub fn projected_beam(&self, cfg: &SystemConfig) -> Result<ProjectedPta> {
        project_params(&self.beam, cfg)
    }

    pub fn estimate(&self, msgs: &[FeedbackMessage], cfg: &SystemConfig) -> Vec<PositionEstimate> {
        mlp_forward(&self.mlp, &feature_matrix(msgs, &self.norm), cfg.angle_bound_rad)
    }

    pub fn check_config(&self, cfg: &SystemConfig) -> Result<()> {
        let expected = cfg.hash();
        if self.config_hash != expected {
            return Err(Error::HashMismatch { expected, found: self.config_hash.clone() });
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    /// Loads a checkpoint and checks version, shapes and config hash.
    pub fn load(path: &Path, cfg: &SystemConfig) -> Result<Self> {
        let m: Model = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        if m.format_version != CHECKPOINT_VERSION {
            return Err(Error::Corrupt(format!("unsupported checkpoint version {}", m.format_version)));
        }
        m.mlp.validate()?;
        m.beam.check_finite()?;
        if m.beam.num_antennas() != cfg.num_antennas || m.norm.num_subcarriers != cfg.num_subcarriers {
            return Err(Error::DimensionMismatch {
                expected: format!("{} antennas, {} subcarriers", cfg.num_antennas, cfg.num_subcarriers),
                got: format!("{} antennas, {} subcarriers", m.beam.num_antennas(), m.norm.num_subcarriers),
            });
        }
        m.check_config(cfg)?;
        Ok(m)
    }
}

/// Checkpoint of an analytic rainbow design. Shares the header fields of
/// [`Model`] and is marked [`ModelKind::Analytic`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DesignCheckpoint {
    pub format_version: u32,
    pub config_hash: String,
    pub kind: ModelKind,
    pub beam: PtaParams,
    pub start: UserPosition,
    pub end: UserPosition,
}

impl DesignCheckpoint {
    pub fn new(design: &CbsDesign, cfg: &SystemConfig) -> Self {
        Self {
            format_version: CHECKPOINT_VERSION,
            config_hash: cfg.hash(),
            kind: ModelKind::Analytic,
            beam: design.beam.as_params(),
            start: design.start,
            end: design.end,
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }
}

#[derive(Deserialize)]
struct Header {
    format_version: u32,
    config_hash: String,
    kind: ModelKind,
    beam: PtaParams,
}

/// Beam of any checkpoint (trained model or analytic design), after the
/// version, shape and config-hash checks.
pub fn load_beam(path: &Path, cfg: &SystemConfig) -> Result<PtaParams> {
    let text = std::fs::read_to_string(path)?;
    let h: Header = serde_json::from_str(&text)?;
    if h.kind != ModelKind::Analytic {
        return Ok(Model::load(path, cfg)?.beam);
    }
    if h.format_version != CHECKPOINT_VERSION {
        return Err(Error::Corrupt(format!("unsupported checkpoint version {}", h.format_version)));
    }
    h.beam.check_finite()?;
    if h.beam.num_antennas() != cfg.num_antennas {
        return Err(Error::DimensionMismatch {
            expected: format!("{} antennas", cfg.num_antennas),
            got: format!("{} antennas", h.beam.num_antennas()),
        });
    }
    let expected = cfg.hash();
    if h.config_hash != expected {
        return Err(Error::HashMismatch { expected, found: h.config_hash });
    }
    Ok(h.beam)
}

/// `B × 2` normalized (power, index) features.
pub fn feature_matrix(msgs: &[FeedbackMessage], norm: &FeatureNorm) -> Array2<f64> {
    let mut f = Array2::zeros((msgs.len(), 2));
    for (i, m) in msgs.iter().enumerate() {
        f[[i, 0]] = norm.power(m.power_dbm);
        f[[i, 1]] = norm.index(m.subcarrier_index as f64);
    }
    f
}

/// Hard-path feedback of every user, with receiver noise from `stream`
/// (`None` for noiseless).
pub fn hard_feedback(
    beam: &ProjectedPta,
    ds: &Dataset,
    stream: Option<u64>,
    quantizer: Option<&Quantizer>,
    cfg: &SystemConfig,
    grids: &DerivedGrids,
) -> Result<Vec<FeedbackMessage>> {
    let mut ev = SignalEvaluator::new(beam, cfg, grids);
    ds.positions
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let powers = ev.powers(p, stream.map(|s| ds.noise_seed(s, i)));
            FeedbackMessage::from_powers(&powers, cfg.softmax_temperature, quantizer)
        })
        .collect()
}

/// Feature normalization from the 0.5/99.5 percentiles of reported power.
pub fn calibrate_norm(beam: &ProjectedPta, ds: &Dataset, cfg: &SystemConfig, grids: &DerivedGrids) -> Result<FeatureNorm> {
    let msgs = hard_feedback(beam, ds, Some(CALIBRATION_STREAM), None, cfg, grids)?;
    let powers: Vec<f64> = msgs.iter().map(|m| m.power_dbm).collect();
    let (lo, hi) = calibrate_range(&powers)?;
    Ok(FeatureNorm { power_lo_dbm: lo, power_hi_dbm: hi, num_subcarriers: cfg.num_subcarriers })
}

/// Hard-path evaluation on the deployed protocol, with noise from
/// [`EVAL_STREAM`] and the model's quantizer.
pub fn evaluate(model: &Model, ds: &Dataset, cfg: &SystemConfig, grids: &DerivedGrids) -> Result<LossReport> {
    evaluate_with(model, model.quantizer.as_ref(), ds, cfg, grids)
}

/// Like [`evaluate`] with an explicit quantizer (post-hoc quantization).
pub fn evaluate_with(
    model: &Model,
    quantizer: Option<&Quantizer>,
    ds: &Dataset,
    cfg: &SystemConfig,
    grids: &DerivedGrids,
) -> Result<LossReport> {
    model.check_config(cfg)?;
    ds.check_config(cfg)?;
    let beam = model.projected_beam(cfg)?;
    let msgs = hard_feedback(&beam, ds, Some(EVAL_STREAM), quantizer, cfg, grids)?;
    loss_rmse(&model.estimate(&msgs, cfg), &ds.positions)
}

/// Lookup-table estimator on the beam `beam`, same noise as [`evaluate`].
pub fn evaluate_lookup(
    table: &LookupTable,
    beam: &ProjectedPta,
    ds: &Dataset,
    cfg: &SystemConfig,
    grids: &DerivedGrids,
) -> Result<LossReport> {
    ds.check_config(cfg)?;
    let msgs = hard_feedback(beam, ds, Some(EVAL_STREAM), None, cfg, grids)?;
    let est = msgs.iter().map(|m| lookup_estimate(m, table)).collect::<Result<Vec<_>>>()?;
    loss_rmse(&est, &ds.positions)
}

/// RMSE of always answering the training centroid (in Cartesian space).
pub fn centroid_rmse(train: &Dataset, eval: &Dataset) -> f64 {
    let k = train.len() as f64;
    let (cx, cy) = train.positions.iter().map(|p| p.cartesian()).fold((0.0, 0.0), |a, c| (a.0 + c.0 / k, a.1 + c.1 / k));
    let se: f64 = eval
        .positions
        .iter()
        .map(|p| {
            let (x, y) = p.cartesian();
            (x - cx).powi(2) + (y - cy).powi(2)
        })
        .sum();
    (se / eval.len() as f64).sqrt()
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub phase: String,
    pub epoch: usize,
    pub train_rmse: f64,
    pub val_rmse: f64,
    pub lr: f64,
}

pub fn write_log_csv(log: &[EpochLog], config_hash: &str, seed: u64, out: &mut impl Write) -> Result<()> {
    out.write_all(provenance_header(config_hash, seed).as_bytes())?;
    let mut w = csv::Writer::from_writer(out);
    for row in log {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: Model,
    pub log: Vec<EpochLog>,
    /// Hard-path validation RMSE of the returned model.
    pub val_rmse: f64,
}

/// Shared handles for building soft-path graphs.
struct Context<'a> {
    cfg: &'a SystemConfig,
    grids: &'a DerivedGrids,
    cfg_arc: Arc<SystemConfig>,
    grids_arc: Arc<DerivedGrids>,
}

impl<'a> Context<'a> {
    fn new(cfg: &'a SystemConfig, grids: &'a DerivedGrids) -> Self {
        Self { cfg, grids, cfg_arc: Arc::new(cfg.clone()), grids_arc: Arc::new(grids.clone()) }
    }
}

/// `sqrt(mean((r̂ cos θ̂ - x)² + (r̂ sin θ̂ - y)²))` on the tape.
fn taped_rmse(tape: &mut Tape, angle: Var, range: Var, truths: &[UserPosition]) -> Result<Var> {
    let (xs, ys): (Vec<f64>, Vec<f64>) = truths.iter().map(|p| p.cartesian()).unzip();
    let c = tape.cos(angle)?;
    let s = tape.sin(angle)?;
    let xh = tape.mul(range, c)?;
    let yh = tape.mul(range, s)?;
    let xt = tape.constant(Tensor::vector(xs));
    let yt = tape.constant(Tensor::vector(ys));
    let dx = tape.sub(xh, xt)?;
    let dy = tape.sub(yh, yt)?;
    let dx2 = tape.mul(dx, dx)?;
    let dy2 = tape.mul(dy, dy)?;
    let se = tape.add(dx2, dy2)?;
    let mse = tape.mean(se)?;
    tape.sqrt(mse)
}

struct JointGraph {
    loss: Var,
    carrier_phase: Var,
    delay_units: Var,
    mlp: MlpVars,
}

/// Soft-path graph for one batch: channel, beam, soft selection, optional
/// quantizer, estimator and RMSE.
#[allow(clippy::too_many_arguments)]
fn joint_graph(
    tape: &mut Tape,
    ctx: &Context<'_>,
    coords: &BeamCoords,
    mlp: &MlpParams,
    trainable: bool,
    batch: &[UserPosition],
    noise_seeds: Option<&[u64]>,
    norm: &FeatureNorm,
    quantizer: Option<Quantizer>,
) -> Result<JointGraph> {
    let (cfg, grids) = (ctx.cfg, ctx.grids);
    let m_sub = grids.num_subcarriers();
    let beam = taped_weights(tape, coords, trainable, cfg, grids)?;
    let map = Arc::new(ChannelBatch::new(batch, ctx.cfg_arc.clone(), ctx.grids_arc.clone()));
    let mut y = tape.linear(map, beam.weights)?;
    if let Some(seeds) = noise_seeds {
        let mut noise = Vec::with_capacity(batch.len() * m_sub);
        for s in seeds {
            noise.extend(noise_vector(*s, grids));
        }
        let n = tape.constant(Tensor::Complex(
            ArrayD::<Complex64>::from_shape_vec(IxDyn(&[batch.len(), m_sub]), noise).expect("shape"),
        ));
        y = tape.add(y, n)?;
    }
    let powers = tape.abs_squared(y)?;
    let weights = tape.softmax_scaled(powers, cfg.softmax_temperature)?;
    let idx = tape.constant(Tensor::Real(
        ArrayD::from_shape_vec(IxDyn(&[m_sub, 1]), (1..=m_sub).map(|m| m as f64).collect()).expect("shape"),
    ));
    let soft_m = tape.matmul(weights, idx)?;
    let soft_m = tape.reshape(soft_m, &[batch.len()])?;
    let wp = tape.mul(weights, powers)?;
    let soft_p = tape.sum_rows(wp)?;
    let lg = tape.log10(soft_p)?;
    let lg = tape.scale(lg, 10.0);
    let mut dbm = tape.offset(lg, 30.0)?;
    if let Some(q) = quantizer {
        dbm = tape.quantize(dbm, q)?;
    }
    let pf = tape.offset(dbm, -norm.power_center())?;
    let pf = tape.scale(pf, 1.0 / norm.power_half_span());
    let mf = tape.offset(soft_m, -norm.index_center())?;
    let mf = tape.scale(mf, 1.0 / norm.index_half_span());
    let features = tape.concat_cols(&[pf, mf])?;
    let vars = MlpVars::record(tape, mlp, trainable);
    let (angle, range) = taped_forward(tape, &vars, features, cfg.angle_bound_rad)?;
    let loss = taped_rmse(tape, angle, range, batch)?;
    Ok(JointGraph { loss, carrier_phase: beam.carrier_phase, delay_units: beam.delay_units, mlp: vars })
}

/// Soft-path loss of one batch and its gradient with respect to every
/// trainable parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftPathGradients {
    pub loss: f64,
    pub carrier_phase: Vec<f64>,
    pub delay_units: Vec<f64>,
    pub mlp_weights: Vec<Vec<f64>>,
    pub mlp_biases: Vec<Vec<f64>>,
}

/// Evaluates the training loss on `batch` (noiseless, unquantized) and
/// backpropagates it.
pub fn soft_path_gradients(
    cfg: &SystemConfig,
    grids: &DerivedGrids,
    coords: &BeamCoords,
    mlp: &MlpParams,
    batch: &[UserPosition],
    norm: &FeatureNorm,
) -> Result<SoftPathGradients> {
    let ctx = Context::new(cfg, grids);
    let mut tape = Tape::new();
    let g = joint_graph(&mut tape, &ctx, coords, mlp, true, batch, None, norm, None)?;
    let grads = tape.backward(g.loss)?;
    let flat = |vs: &[Var]| vs.iter().map(|v| flat_grad(&grads, *v)).collect::<Result<Vec<_>>>();
    Ok(SoftPathGradients {
        loss: tape.scalar(g.loss)?,
        carrier_phase: flat_grad(&grads, g.carrier_phase)?,
        delay_units: flat_grad(&grads, g.delay_units)?,
        mlp_weights: flat(&g.mlp.weights)?,
        mlp_biases: flat(&g.mlp.biases)?,
    })
}

fn flat_grad(g: &Gradients, v: Var) -> Result<Vec<f64>> {
    let a = g.real(v)?;
    Ok(a.as_standard_layout().iter().copied().collect())
}

fn check_step(loss: f64, epoch: usize, phase: &str) -> Result<()> {
    if !loss.is_finite() {
        return Err(Error::Diverged { epoch, detail: format!("{phase} loss became {loss}") });
    }
    Ok(())
}

/// Learning-rate plateau and early-stopping bookkeeping.
struct Schedule {
    best: f64,
    since_best: usize,
    since_decay: usize,
    patience: usize,
    stop_after: usize,
    decay: f64,
}

impl Schedule {
    fn new(tc: &TrainConfig) -> Self {
        Self {
            best: f64::INFINITY,
            since_best: 0,
            since_decay: 0,
            patience: tc.plateau_patience,
            stop_after: tc.early_stop_patience,
            decay: tc.lr_decay,
        }
    }

    /// Records a validation score; returns `(improved, lr_factor, stop)`.
    fn observe(&mut self, val: f64) -> (bool, f64, bool) {
        if val < self.best {
            self.best = val;
            self.since_best = 0;
            self.since_decay = 0;
            return (true, 1.0, false);
        }
        self.since_best += 1;
        self.since_decay += 1;
        let mut factor = 1.0;
        if self.patience > 0 && self.since_decay >= self.patience {
            factor = self.decay;
            self.since_decay = 0;
        }
        (false, factor, self.stop_after > 0 && self.since_best >= self.stop_after)
    }
}

fn shuffled(n: usize, seed: u64) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    idx
}

/// Soft-path RMSE of a fixed model (no parameter gradients).
#[allow(clippy::too_many_arguments)]
fn soft_rmse(
    ctx: &Context<'_>,
    coords: &BeamCoords,
    mlp: &MlpParams,
    ds: &Dataset,
    stream: Option<u64>,
    norm: &FeatureNorm,
    quantizer: Option<Quantizer>,
    batch_size: usize,
) -> Result<f64> {
    let mut se = 0.0;
    for (c, chunk) in ds.positions.chunks(batch_size).enumerate() {
        let seeds: Option<Vec<u64>> =
            stream.map(|s| (0..chunk.len()).map(|i| ds.noise_seed(s, c * batch_size + i)).collect());
        let mut tape = Tape::new();
        let g = joint_graph(&mut tape, ctx, coords, mlp, false, chunk, seeds.as_deref(), norm, quantizer)?;
        se += tape.scalar(g.loss)?.powi(2) * chunk.len() as f64;
    }
    Ok((se / ds.len() as f64).sqrt())
}

/// Joint phase: beam and estimator on the soft path. Returns the best
/// (by soft validation RMSE) beam coordinates and estimator.
#[allow(clippy::too_many_arguments)]
fn joint_phase(
    ctx: &Context<'_>,
    tc: &TrainConfig,
    mut coords: BeamCoords,
    mut mlp: MlpParams,
    norm: &FeatureNorm,
    quantizer: Option<Quantizer>,
    epochs: usize,
    train: &Dataset,
    val: &Dataset,
    log: &mut Vec<EpochLog>,
) -> Result<(BeamCoords, MlpParams)> {
    let mlp_sizes: Vec<usize> = mlp.weights.iter().chain(&mlp.biases).map(Vec::len).collect();
    let n = coords.carrier_phase.len();
    let mut opt_beam = Adam::new(tc.lr_beam, &[n, n]);
    let mut opt_mlp = Adam::new(tc.lr_estimator, &mlp_sizes);
    let mut sched = Schedule::new(tc);
    let mut best = (coords.clone(), mlp.clone());
    for epoch in 0..epochs {
        let order = shuffled(train.len(), derive_seed(tc.seed, 1, epoch as u64));
        let mut se = 0.0;
        for chunk in order.chunks(tc.batch_size) {
            let batch: Vec<UserPosition> = chunk.iter().map(|i| train.positions[*i]).collect();
            let seeds: Option<Vec<u64>> =
                tc.train_noise.then(|| chunk.iter().map(|i| train.noise_seed(epoch as u64, *i)).collect());
            let mut tape = Tape::new();
            let g = joint_graph(&mut tape, ctx, &coords, &mlp, true, &batch, seeds.as_deref(), norm, quantizer)?;
            let loss = tape.scalar(g.loss)?;
            check_step(loss, epoch, "joint")?;
            se += loss * loss * batch.len() as f64;
            let grads = tape.backward(g.loss)?;
            let ga = flat_grad(&grads, g.carrier_phase)?;
            let gd = flat_grad(&grads, g.delay_units)?;
            opt_beam.step(&mut [&mut coords.carrier_phase, &mut coords.delay_units], &[&ga, &gd]);
            let gm = g.mlp.all().into_iter().map(|v| flat_grad(&grads, v)).collect::<Result<Vec<_>>>()?;
            let gm_refs: Vec<&[f64]> = gm.iter().map(Vec::as_slice).collect();
            let mut ps: Vec<&mut Vec<f64>> = mlp.weights.iter_mut().chain(mlp.biases.iter_mut()).collect();
            opt_mlp.step(&mut ps, &gm_refs);
        }
        let train_rmse = (se / train.len() as f64).sqrt();
        let val_rmse = soft_rmse(ctx, &coords, &mlp, val, Some(VALIDATION_STREAM), norm, quantizer, tc.batch_size)?;
        check_step(val_rmse, epoch, "joint validation")?;
        log.push(EpochLog { phase: "joint".into(), epoch, train_rmse, val_rmse, lr: opt_mlp.lr });
        log::debug!("joint epoch {epoch}: train {train_rmse:.4} m, val {val_rmse:.4} m");
        let (improved, factor, stop) = sched.observe(val_rmse);
        if improved {
            best = (coords.clone(), mlp.clone());
        }
        opt_beam.lr *= factor;
        opt_mlp.lr *= factor;
        if stop {
            break;
        }
    }
    Ok(best)
}

/// Estimator-only fitting on fixed features; returns the best estimator by
/// validation RMSE and that RMSE.
#[allow(clippy::too_many_arguments)]
fn estimator_phase(
    tc: &TrainConfig,
    mut mlp: MlpParams,
    train_x: &Array2<f64>,
    train: &Dataset,
    val_x: &Array2<f64>,
    val: &Dataset,
    epochs: usize,
    angle_bound: f64,
    log: &mut Vec<EpochLog>,
) -> Result<(MlpParams, f64)> {
    let sizes: Vec<usize> = mlp.weights.iter().chain(&mlp.biases).map(Vec::len).collect();
    let mut opt = Adam::new(tc.lr_estimator, &sizes);
    let mut sched = Schedule::new(tc);
    let eval_val = |p: &MlpParams| -> Result<f64> { Ok(loss_rmse(&mlp_forward(p, val_x, angle_bound), &val.positions)?.rmse_2d_m) };
    let mut best_val = eval_val(&mlp)?;
    sched.best = best_val;
    let mut best = mlp.clone();
    for epoch in 0..epochs {
        let order = shuffled(train.len(), derive_seed(tc.seed, 2, epoch as u64));
        let mut se = 0.0;
        for chunk in order.chunks(tc.batch_size) {
            let batch: Vec<UserPosition> = chunk.iter().map(|i| train.positions[*i]).collect();
            let mut feats = Array2::zeros((chunk.len(), 2));
            for (r, i) in chunk.iter().enumerate() {
                feats.row_mut(r).assign(&train_x.row(*i));
            }
            let mut tape = Tape::new();
            let x = tape.constant(Tensor::matrix(feats));
            let vars = MlpVars::record(&mut tape, &mlp, true);
            let (angle, range) = taped_forward(&mut tape, &vars, x, angle_bound)?;
            let loss = taped_rmse(&mut tape, angle, range, &batch)?;
            let lv = tape.scalar(loss)?;
            check_step(lv, epoch, "estimator")?;
            se += lv * lv * batch.len() as f64;
            let grads = tape.backward(loss)?;
            let gm = vars.all().into_iter().map(|v| flat_grad(&grads, v)).collect::<Result<Vec<_>>>()?;
            let gm_refs: Vec<&[f64]> = gm.iter().map(Vec::as_slice).collect();
            let mut ps: Vec<&mut Vec<f64>> = mlp.weights.iter_mut().chain(mlp.biases.iter_mut()).collect();
            opt.step(&mut ps, &gm_refs);
        }
        let train_rmse = (se / train.len() as f64).sqrt();
        let val_rmse = eval_val(&mlp)?;
        check_step(val_rmse, epoch, "estimator validation")?;
        log.push(EpochLog { phase: "estimator".into(), epoch, train_rmse, val_rmse, lr: opt.lr });
        let (improved, factor, stop) = sched.observe(val_rmse);
        if improved {
            best = mlp.clone();
            best_val = val_rmse;
        }
        opt.lr *= factor;
        if stop {
            break;
        }
    }
    Ok((best, best_val))
}

/// Hard features of `train` (noise stream [`ESTIMATOR_STREAM`]) and `val`
/// (stream [`EVAL_STREAM`]).
fn hard_features(
    beam: &ProjectedPta,
    norm: &FeatureNorm,
    quantizer: Option<&Quantizer>,
    train: &Dataset,
    val: &Dataset,
    noise: bool,
    cfg: &SystemConfig,
    grids: &DerivedGrids,
) -> Result<(Array2<f64>, Array2<f64>)> {
    let tr = hard_feedback(beam, train, noise.then_some(ESTIMATOR_STREAM), quantizer, cfg, grids)?;
    let va = hard_feedback(beam, val, Some(EVAL_STREAM), quantizer, cfg, grids)?;
    Ok((feature_matrix(&tr, norm), feature_matrix(&va, norm)))
}

fn check_inputs(cfg: &SystemConfig, tc: &TrainConfig, train: &Dataset, val: &Dataset) -> Result<()> {
    cfg.validate()?;
    tc.validate()?;
    train.check_config(cfg)?;
    val.check_config(cfg)?;
    if train.is_empty() || val.is_empty() {
        return Err(Error::InvalidArgument("training and validation sets must be non-empty".into()));
    }
    Ok(())
}

fn initial_beam(tc: &TrainConfig, cfg: &SystemConfig, grids: &DerivedGrids) -> Result<PtaParams> {
    Ok(match tc.beam_init {
        BeamInit::Cbs => default_design(cfg, grids)?.beam.as_params(),
        BeamInit::Random => PtaParams::random_init(cfg, &mut ChaCha8Rng::seed_from_u64(derive_seed(tc.seed, 3, 0))),
    })
}

fn initial_mlp(tc: &TrainConfig, train: &Dataset) -> Result<MlpParams> {
    MlpParams::init(&tc.dims, train.mean_range(), &mut ChaCha8Rng::seed_from_u64(derive_seed(tc.seed, 4, 0)))
}

/// Trains beam and estimator end to end, then refits the estimator on the
/// hard features of the learned beam.
pub fn train_joint(
    cfg: &SystemConfig,
    grids: &DerivedGrids,
    tc: &TrainConfig,
    train: &Dataset,
    val: &Dataset,
) -> Result<TrainOutcome> {
    check_inputs(cfg, tc, train, val)?;
    let ctx = Context::new(cfg, grids);
    let beam0 = initial_beam(tc, cfg, grids)?;
    let norm0 = calibrate_norm(&project_params(&beam0, cfg)?, train, cfg, grids)?;
    let mut log = Vec::new();
    let (coords, mlp) = joint_phase(
        &ctx,
        tc,
        beam0.to_coords(cfg),
        initial_mlp(tc, train)?,
        &norm0,
        None,
        tc.joint_epochs,
        train,
        val,
        &mut log,
    )?;
    let beam = PtaParams::from_coords(&coords, cfg);
    finish(cfg, grids, tc, ModelKind::Joint, beam, mlp, norm0, None, train, val, log)
}

/// Freezes `beam` and trains only the estimator, with the same epoch budget
/// as [`train_joint`] spends on the estimator overall.
pub fn train_fixed_beam(
    cfg: &SystemConfig,
    grids: &DerivedGrids,
    tc: &TrainConfig,
    beam: PtaParams,
    train: &Dataset,
    val: &Dataset,
) -> Result<TrainOutcome> {
    check_inputs(cfg, tc, train, val)?;
    let proj = project_params(&beam, cfg)?;
    let norm = calibrate_norm(&proj, train, cfg, grids)?;
    let mut tc_fixed = tc.clone();
    tc_fixed.estimator_epochs = tc.joint_epochs + tc.estimator_epochs;
    finish(cfg, grids, &tc_fixed, ModelKind::FixedBeam, beam, initial_mlp(tc, train)?, norm, None, train, val, Vec::new())
}

/// Frozen-beam estimator phase shared by every training entry point.
#[allow(clippy::too_many_arguments)]
fn finish(
    cfg: &SystemConfig,
    grids: &DerivedGrids,
    tc: &TrainConfig,
    kind: ModelKind,
    beam: PtaParams,
    mlp: MlpParams,
    old_norm: FeatureNorm,
    quantizer: Option<Quantizer>,
    train: &Dataset,
    val: &Dataset,
    mut log: Vec<EpochLog>,
) -> Result<TrainOutcome> {
    let proj = project_params(&beam, cfg)?;
    let norm = match quantizer {
        Some(q) => FeatureNorm { power_lo_dbm: q.lo, power_hi_dbm: q.hi, num_subcarriers: cfg.num_subcarriers },
        None if kind == ModelKind::Joint => calibrate_norm(&proj, train, cfg, grids)?,
        None => old_norm,
    };
    let mlp = rescale_input(mlp, &old_norm, &norm);
    let (tx, vx) = hard_features(&proj, &norm, quantizer.as_ref(), train, val, tc.train_noise, cfg, grids)?;
    let (mlp, val_rmse) =
        estimator_phase(tc, mlp, &tx, train, &vx, val, tc.estimator_epochs, cfg.angle_bound_rad, &mut log)?;
    let model = Model {
        format_version: CHECKPOINT_VERSION,
        config_hash: cfg.hash(),
        kind,
        beam,
        mlp,
        norm,
        quantizer,
        alpha: cfg.softmax_temperature,
    };
    Ok(TrainOutcome { model, log, val_rmse })
}

/// Folds a change of power normalization into the first layer so the
/// network computes the same function of raw dBm.
fn rescale_input(mut mlp: MlpParams, old: &FeatureNorm, new: &FeatureNorm) -> MlpParams {
    // old feature u = (p - c0)/h0 = a v + b with v = (p - c1)/h1.
    let a = new.power_half_span() / old.power_half_span();
    let b = (new.power_center() - old.power_center()) / old.power_half_span();
    if a == 1.0 && b == 0.0 {
        return mlp;
    }
    let width = mlp.dims[1];
    for j in 0..width {
        let w0 = mlp.weights[0][j];
        mlp.biases[0][j] += w0 * b;
        mlp.weights[0][j] = w0 * a;
    }
    mlp
}

/// Quantizer for `bits` calibrated on the hard powers of `beam` over `train`.
pub fn calibrated_quantizer(
    beam: &ProjectedPta,
    train: &Dataset,
    bits: u32,
    cfg: &SystemConfig,
    grids: &DerivedGrids,
) -> Result<Quantizer> {
    let norm = calibrate_norm(beam, train, cfg, grids)?;
    Quantizer::new(norm.power_lo_dbm, norm.power_hi_dbm, bits)
}

/// Quantization-aware fine-tuning of `base` for a `bits`-bit power report.
/// Joint models fine-tune beam and estimator with the quantizer in the soft
/// path, then refit the estimator; fixed-beam models refit the estimator.
pub fn train_quantized(
    cfg: &SystemConfig,
    grids: &DerivedGrids,
    tc: &TrainConfig,
    base: &Model,
    bits: u32,
    train: &Dataset,
    val: &Dataset,
) -> Result<TrainOutcome> {
    check_inputs(cfg, tc, train, val)?;
    base.check_config(cfg)?;
    let proj = base.projected_beam(cfg)?;
    let q = calibrated_quantizer(&proj, train, bits, cfg, grids)?;
    let qnorm = FeatureNorm { power_lo_dbm: q.lo, power_hi_dbm: q.hi, num_subcarriers: cfg.num_subcarriers };
    let mlp = rescale_input(base.mlp.clone(), &base.norm, &qnorm);
    let mut log = Vec::new();
    let (beam, mlp) = match base.kind {
        ModelKind::Joint if tc.qat_joint_epochs > 0 => {
            let ctx = Context::new(cfg, grids);
            let (coords, mlp) = joint_phase(
                &ctx,
                tc,
                base.beam.to_coords(cfg),
                mlp,
                &qnorm,
                Some(q),
                tc.qat_joint_epochs,
                train,
                val,
                &mut log,
            )?;
            (PtaParams::from_coords(&coords, cfg), mlp)
        }
        _ => (base.beam.clone(), mlp),
    };
    // The learned beam may shift the power distribution; keep the quantizer
    // range that training saw.
    finish(cfg, grids, tc, base.kind, beam, mlp, qnorm, Some(q), train, val, log)
}

/// Noiseless per-subcarrier received power (dBm) of `model`'s beam at `pos`.
pub fn model_powers_dbm(model: &Model, pos: &UserPosition, cfg: &SystemConfig, grids: &DerivedGrids) -> Result<Vec<f64>> {
    let proj = model.projected_beam(cfg)?;
    Ok(SignalEvaluator::new(&proj, cfg, grids).powers(pos, None).into_iter().map(watts_to_dbm).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::derive_grids;
    use crate::dataset::{sample_users, Split};

    fn toy() -> (SystemConfig, DerivedGrids) {
        let mut cfg = SystemConfig::desk();
        cfg.num_antennas = 8;
        cfg.num_subcarriers = 16;
        cfg.bandwidth_hz = cfg.subcarrier_spacing_hz * 16.0;
        let grids = derive_grids(&cfg);
        (cfg, grids)
    }

    #[test]
    fn loss_examples() {
        let t = [UserPosition { angle_rad: 0.0, range_m: 1.0 }];
        let e = [PositionEstimate { angle_rad: 0.0, range_m: 1.0 }];
        assert_eq!(loss_rmse(&e, &t).unwrap().rmse_2d_m, 0.0);
        let e0 = [PositionEstimate { angle_rad: 0.0, range_m: 0.0 }];
        assert!((loss_rmse(&e0, &t).unwrap().rmse_2d_m - 1.0).abs() < 1e-15);
        let t2 = [UserPosition { angle_rad: 0.0, range_m: 2.0 }, UserPosition { angle_rad: 0.0, range_m: 4.0 }];
        let e2 = [PositionEstimate { angle_rad: 0.0, range_m: 3.0 }, PositionEstimate { angle_rad: 0.0, range_m: 4.0 + 3f64.sqrt() }];
        assert!((loss_rmse(&e2, &t2).unwrap().rmse_2d_m - 2f64.sqrt()).abs() < 1e-12);
        assert!(loss_rmse(&[], &[]).is_err());
        assert!(loss_rmse(&e, &t2).is_err());
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut p = vec![1.0, -2.0];
        let mut opt = Adam::new(0.1, &[2]);
        opt.step(&mut [&mut p], &[&[3.0, -0.5]]);
        assert!((p[0] - 0.9).abs() < 1e-8 && (p[1] + 1.9).abs() < 1e-8, "{p:?}");
    }

    #[test]
    fn schedule_decays_and_stops() {
        let tc = TrainConfig { plateau_patience: 2, early_stop_patience: 4, ..TrainConfig::default() };
        let mut s = Schedule::new(&tc);
        assert_eq!(s.observe(1.0), (true, 1.0, false));
        assert_eq!(s.observe(2.0), (false, 1.0, false));
        assert_eq!(s.observe(2.0), (false, 0.5, false));
        assert_eq!(s.observe(2.0), (false, 1.0, false));
        assert_eq!(s.observe(2.0), (false, 0.5, true));
    }

    #[test]
    fn rescaled_input_preserves_function() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mlp = MlpParams::init(&[2, 8, 2], 10.0, &mut rng).unwrap();
        let old = FeatureNorm { power_lo_dbm: -80.0, power_hi_dbm: -20.0, num_subcarriers: 16 };
        let new = FeatureNorm { power_lo_dbm: -70.0, power_hi_dbm: -40.0, num_subcarriers: 16 };
        let moved = rescale_input(mlp.clone(), &old, &new);
        let msgs = [FeedbackMessage { subcarrier_index: 3, power_dbm: -55.0, bits_used: None }];
        let a = mlp_forward(&mlp, &feature_matrix(&msgs, &old), 1.0)[0];
        let b = mlp_forward(&moved, &feature_matrix(&msgs, &new), 1.0)[0];
        assert!((a.angle_rad - b.angle_rad).abs() < 1e-12 && (a.range_m - b.range_m).abs() < 1e-12);
    }

    #[test]
    fn short_training_improves_and_is_reproducible() {
        let (cfg, grids) = toy();
        let train = sample_users(300, &cfg, 1, Split::Train).unwrap();
        let val = sample_users(100, &cfg, 1, Split::Val).unwrap();
        let tc = TrainConfig { joint_epochs: 3, estimator_epochs: 3, batch_size: 64, ..TrainConfig::default() };
        let a = train_joint(&cfg, &grids, &tc, &train, &val).unwrap();
        let b = train_joint(&cfg, &grids, &tc, &train, &val).unwrap();
        assert_eq!(a.model, b.model);
        assert_eq!(a.log, b.log);
        assert_eq!(a.log.len(), 6);
        let untrained = Model { mlp: initial_mlp(&tc, &train).unwrap(), ..a.model.clone() };
        let before = evaluate(&untrained, &train, &cfg, &grids).unwrap().rmse_2d_m;
        let after = evaluate(&a.model, &train, &cfg, &grids).unwrap().rmse_2d_m;
        assert!(after <= before, "{after} > {before}");
    }

    #[test]
    fn checkpoint_round_trip_and_hash_check() {
        let (cfg, grids) = toy();
        let train = sample_users(64, &cfg, 2, Split::Train).unwrap();
        let val = sample_users(32, &cfg, 2, Split::Val).unwrap();
        let tc = TrainConfig { joint_epochs: 1, estimator_epochs: 1, batch_size: 32, ..TrainConfig::default() };
        let out = train_joint(&cfg, &grids, &tc, &train, &val).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.json");
        out.model.save(&path).unwrap();
        assert_eq!(Model::load(&path, &cfg).unwrap(), out.model);
        let other = cfg.with_range(5.0, 40.0).unwrap();
        assert!(matches!(Model::load(&path, &other), Err(Error::HashMismatch { .. })));
    }
}
