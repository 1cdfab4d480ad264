//! Experiment drivers that produce the CSV tables and heatmaps.
//!
//! Every table starts with a `# config_hash=..., seed=...` comment line and
//! contains only deterministic values, so reruns are byte-identical.

use image::{Rgb, RgbImage};
use ndarray::Array2;
use serde::{Deserialize, Serialize};
use std::path::Path;

use crate::beamformer::{beam_pattern_map, subcarrier_map, PowerMetric, ProjectedPta};
use crate::cbs::{build_lookup, cbs_design, default_design, index_distance_curve};
use crate::config::{derive_grids, DerivedGrids, SystemConfig};
use crate::dataset::{generate_splits, provenance_header};
use crate::error::{Error, Result};
use crate::estimator::flops_count;
use crate::feedback::feedback_bits_per_user;
use crate::geometry::UserPosition;
use crate::trainer::{
    calibrated_quantizer, evaluate, evaluate_lookup, evaluate_with, train_fixed_beam, train_joint, train_quantized,
    LossReport, Model, TrainConfig,
};

/// A CSV table with a provenance comment.
#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub config_hash: String,
    pub seed: u64,
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    pub fn new(config_hash: &str, seed: u64, header: &[&str]) -> Self {
        Self {
            config_hash: config_hash.to_string(),
            seed,
            header: header.iter().map(|s| s.to_string()).collect(),
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, row: Vec<String>) -> Result<()> {
        if row.len() != self.header.len() {
            return Err(Error::DimensionMismatch {
                expected: format!("{} columns", self.header.len()),
                got: row.len().to_string(),
            });
        }
        self.rows.push(row);
        Ok(())
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut out = provenance_header(&self.config_hash, self.seed).into_bytes();
        {
            let mut w = csv::Writer::from_writer(&mut out);
            w.write_record(&self.header)?;
            for r in &self.rows {
                w.write_record(r)?;
            }
            w.flush()?;
        }
        String::from_utf8(out).map_err(|e| Error::Corrupt(e.to_string()))
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()?)?;
        Ok(())
    }

    /// Values of column `name`.
    pub fn column(&self, name: &str) -> Result<Vec<&str>> {
        let j = self
            .header
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::InvalidArgument(format!("no column {name}")))?;
        Ok(self.rows.iter().map(|r| r[j].as_str()).collect())
    }
}

/// Dataset sizes and seed shared by the training experiments.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSetup {
    pub seed: u64,
    pub train: usize,
    pub val: usize,
    pub test: usize,
    pub train_config: TrainConfig,
}

/// Evenly spaced values from `lo` to `hi` inclusive with the given step.
pub fn grid(lo: f64, hi: f64, step: f64) -> Result<Vec<f64>> {
    if !(step > 0.0) || hi < lo {
        return Err(Error::InvalidArgument(format!("bad grid {lo}..{hi} step {step}")));
    }
    let n = ((hi - lo) / step + 1e-9).floor() as usize;
    Ok((0..=n).map(|i| lo + i as f64 * step).collect())
}

/// Long-format heatmap table `(angle_deg, range_m, value)`.
fn map_table(cfg: &SystemConfig, seed: u64, value: &str, angles_deg: &[f64], ranges: &[f64], map: &Array2<f64>) -> Result<Table> {
    let mut t = Table::new(&cfg.hash(), seed, &["angle_deg", "range_m", value]);
    for (i, a) in angles_deg.iter().enumerate() {
        for (j, r) in ranges.iter().enumerate() {
            t.push(vec![a.to_string(), r.to_string(), map[[i, j]].to_string()])?;
        }
    }
    Ok(t)
}

/// Max-over-subcarrier received power on an angle × range grid.
pub fn beam_pattern(
    beam: &ProjectedPta,
    angles_deg: &[f64],
    ranges_m: &[f64],
    cfg: &SystemConfig,
    grids: &DerivedGrids,
    seed: u64,
) -> Result<(Table, Array2<f64>)> {
    let rad: Vec<f64> = angles_deg.iter().map(|a| a.to_radians()).collect();
    let map = beam_pattern_map(beam, &rad, ranges_m, cfg, grids)?;
    Ok((map_table(cfg, seed, "power_dbm", angles_deg, ranges_m, &map)?, map))
}

/// One subcarrier's map under `metric`.
pub fn subcarrier_pattern(
    beam: &ProjectedPta,
    m: usize,
    metric: PowerMetric,
    angles_deg: &[f64],
    ranges_m: &[f64],
    cfg: &SystemConfig,
    grids: &DerivedGrids,
    seed: u64,
) -> Result<(Table, Array2<f64>)> {
    let rad: Vec<f64> = angles_deg.iter().map(|a| a.to_radians()).collect();
    let map = subcarrier_map(beam, m, metric, &rad, ranges_m, cfg, grids)?;
    let name = match metric {
        PowerMetric::ReceivedDbm => "power_dbm",
        PowerMetric::ArrayGainDb => "gain_db",
    };
    Ok((map_table(cfg, seed, name, angles_deg, ranges_m, &map)?, map))
}

/// Grid position `(angle, range)` of the largest map entry.
pub fn map_argmax(map: &Array2<f64>, angles: &[f64], ranges: &[f64]) -> (f64, f64) {
    let mut best = (f64::NEG_INFINITY, 0, 0);
    for ((i, j), v) in map.indexed_iter() {
        if *v > best.0 {
            best = (*v, i, j);
        }
    }
    (angles[best.1], ranges[best.2])
}

/// Writes a heatmap PNG: angles along x, ranges along y (near at the
/// bottom), values mapped linearly from the map's minimum to maximum.
pub fn write_heatmap(map: &Array2<f64>, path: &Path) -> Result<()> {
    let (na, nr) = map.dim();
    if na == 0 || nr == 0 {
        return Err(Error::InvalidArgument("empty heatmap".into()));
    }
    let finite = map.iter().filter(|v| v.is_finite());
    let lo = finite.clone().fold(f64::INFINITY, |a, b| a.min(*b));
    let hi = finite.fold(f64::NEG_INFINITY, |a, b| a.max(*b));
    let span = if hi > lo { hi - lo } else { 1.0 };
    let mut img = RgbImage::new(na as u32, nr as u32);
    for ((i, j), v) in map.indexed_iter() {
        let t = if v.is_finite() { ((v - lo) / span).clamp(0.0, 1.0) } else { 0.0 };
        img.put_pixel(i as u32, (nr - 1 - j) as u32, colormap(t));
    }
    img.save(path)?;
    Ok(())
}

/// Dark blue through teal and green to yellow.
fn colormap(t: f64) -> Rgb<u8> {
    const STOPS: [[f64; 3]; 5] =
        [[68.0, 1.0, 84.0], [59.0, 82.0, 139.0], [33.0, 145.0, 140.0], [94.0, 201.0, 98.0], [253.0, 231.0, 37.0]];
    let x = t * (STOPS.len() - 1) as f64;
    let k = (x.floor() as usize).min(STOPS.len() - 2);
    let f = x - k as f64;
    let c = |i: usize| (STOPS[k][i] + f * (STOPS[k + 1][i] - STOPS[k][i])).round() as u8;
    Rgb([c(0), c(1), c(2)])
}

/// Strongest subcarrier against range for a design from `(angle, r0)` to
/// `(angle, r1)`.
pub fn index_curve(
    angle_deg: f64,
    r0: f64,
    r1: f64,
    ranges_m: &[f64],
    cfg: &SystemConfig,
    grids: &DerivedGrids,
    seed: u64,
) -> Result<(Table, Vec<(f64, usize)>)> {
    let design = cbs_design(
        UserPosition::from_degrees(angle_deg, r0)?,
        UserPosition::from_degrees(angle_deg, r1)?,
        cfg,
        grids,
    )?;
    let curve = index_distance_curve(&design.beam, angle_deg.to_radians(), ranges_m, cfg, grids)?;
    let mut t = Table::new(&cfg.hash(), seed, &["range_m", "subcarrier_index"]);
    for (r, m) in &curve {
        t.push(vec![r.to_string(), m.to_string()])?;
    }
    Ok((t, curve))
}

/// Per-user feedback bits and estimator operation count.
pub fn overhead(cfg: &SystemConfig, bits: u32, dims: &[usize]) -> Result<Table> {
    let mut t = Table::new(&cfg.hash(), 0, &["num_subcarriers", "power_bits", "feedback_bits_per_user", "estimator_flops"]);
    t.push(vec![
        cfg.num_subcarriers.to_string(),
        bits.to_string(),
        feedback_bits_per_user(cfg.num_subcarriers, bits).to_string(),
        flops_count(dims).to_string(),
    ])?;
    Ok(t)
}

fn report_cells(r: &LossReport) -> [String; 3] {
    [r.rmse_2d_m.to_string(), r.angle_rmse_rad.to_string(), r.range_rmse_m.to_string()]
}

/// Models and scores of one trained configuration.
#[derive(Debug, Clone)]
pub struct ComparisonRun {
    pub joint: Model,
    pub fixed: Model,
    pub joint_report: LossReport,
    pub fixed_report: LossReport,
    pub lookup_report: LossReport,
}

/// Trains the joint model and the fixed-beam model, builds the lookup
/// table, and scores all three on the test split.
pub fn compare_methods(cfg: &SystemConfig, setup: &ExperimentSetup) -> Result<ComparisonRun> {
    let grids = derive_grids(cfg);
    let (train, val, test) = generate_splits(cfg, setup.seed, (setup.train, setup.val, setup.test))?;
    let mut tc = setup.train_config.clone();
    tc.seed = setup.seed;
    let design = default_design(cfg, &grids)?;
    let joint = train_joint(cfg, &grids, &tc, &train, &val)?.model;
    let fixed = train_fixed_beam(cfg, &grids, &tc, design.beam.as_params(), &train, &val)?.model;
    let table = build_lookup(&design, cfg, &grids)?;
    Ok(ComparisonRun {
        joint_report: evaluate(&joint, &test, cfg, &grids)?,
        fixed_report: evaluate(&fixed, &test, cfg, &grids)?,
        lookup_report: evaluate_lookup(&table, &design.beam, &test, cfg, &grids)?,
        joint,
        fixed,
    })
}

pub const METHOD_JOINT: &str = "joint";
pub const METHOD_FIXED: &str = "fixed_cbs_trained";
pub const METHOD_LOOKUP: &str = "cbs_lookup";

/// RMSE against maximum user distance: one trained model per grid point
/// and method. The base config's minimum range is kept.
pub fn sweep_distance(base: &SystemConfig, max_distances: &[f64], setup: &ExperimentSetup) -> Result<Table> {
    if max_distances.is_empty() {
        return Err(Error::InvalidArgument("empty distance grid".into()));
    }
    let mut t = Table::new(
        &base.hash(),
        setup.seed,
        &["max_distance_m", "method", "rmse_2d_m", "angle_rmse_rad", "range_rmse_m"],
    );
    for d in max_distances {
        let cfg = base.with_range(base.range_min_m, *d)?;
        let run = compare_methods(&cfg, setup)?;
        for (name, r) in [(METHOD_JOINT, &run.joint_report), (METHOD_FIXED, &run.fixed_report), (METHOD_LOOKUP, &run.lookup_report)]
        {
            let [a, b, c] = report_cells(r);
            t.push(vec![d.to_string(), name.to_string(), a, b, c])?;
        }
    }
    Ok(t)
}

pub const METHOD_JOINT_Q: &str = "joint_q";
pub const METHOD_FIXED_Q: &str = "fixed_q";
pub const METHOD_JOINT_POSTHOC: &str = "joint_posthoc";
pub const METHOD_FIXED_POSTHOC: &str = "fixed_posthoc";

/// RMSE against power bit width. Rows with `bits = none` are the
/// unquantized references. Quantized rows come from per-width fine-tuned
/// models (`*_q`) and from quantizing the unquantized models post hoc.
pub fn sweep_bits(cfg: &SystemConfig, setup: &ExperimentSetup, run: &ComparisonRun, bits: &[u32]) -> Result<Table> {
    if bits.is_empty() {
        return Err(Error::InvalidArgument("empty bit grid".into()));
    }
    let grids = derive_grids(cfg);
    let (train, val, test) = generate_splits(cfg, setup.seed, (setup.train, setup.val, setup.test))?;
    let mut tc = setup.train_config.clone();
    tc.seed = setup.seed;
    let mut t = Table::new(&cfg.hash(), setup.seed, &["bits", "method", "rmse_2d_m"]);
    t.push(vec!["none".into(), METHOD_JOINT.into(), run.joint_report.rmse_2d_m.to_string()])?;
    t.push(vec!["none".into(), METHOD_FIXED.into(), run.fixed_report.rmse_2d_m.to_string()])?;
    for b in bits {
        let jq = train_quantized(cfg, &grids, &tc, &run.joint, *b, &train, &val)?.model;
        let fq = train_quantized(cfg, &grids, &tc, &run.fixed, *b, &train, &val)?.model;
        let posthoc = |m: &Model| -> Result<f64> {
            let q = calibrated_quantizer(&m.projected_beam(cfg)?, &train, *b, cfg, &grids)?;
            Ok(evaluate_with(m, Some(&q), &test, cfg, &grids)?.rmse_2d_m)
        };
        let rows = [
            (METHOD_JOINT_Q, evaluate(&jq, &test, cfg, &grids)?.rmse_2d_m),
            (METHOD_FIXED_Q, evaluate(&fq, &test, cfg, &grids)?.rmse_2d_m),
            (METHOD_JOINT_POSTHOC, posthoc(&run.joint)?),
            (METHOD_FIXED_POSTHOC, posthoc(&run.fixed)?),
        ];
        for (name, v) in rows {
            t.push(vec![b.to_string(), name.to_string(), v.to_string()])?;
        }
    }
    Ok(t)
}

/// Scores of the three methods for each seed.
pub fn ablation(cfg: &SystemConfig, setup: &ExperimentSetup, seeds: &[u64]) -> Result<(Table, Vec<ComparisonRun>)> {
    if seeds.is_empty() {
        return Err(Error::InvalidArgument("no seeds".into()));
    }
    let mut t = Table::new(&cfg.hash(), seeds[0], &["seed", "method", "rmse_2d_m", "angle_rmse_rad", "range_rmse_m"]);
    let mut runs = Vec::with_capacity(seeds.len());
    for s in seeds {
        let run = compare_methods(cfg, &ExperimentSetup { seed: *s, ..setup.clone() })?;
        for (name, r) in [(METHOD_JOINT, &run.joint_report), (METHOD_FIXED, &run.fixed_report), (METHOD_LOOKUP, &run.lookup_report)]
        {
            let [a, b, c] = report_cells(r);
            t.push(vec![s.to_string(), name.to_string(), a, b, c])?;
        }
        runs.push(run);
    }
    Ok((t, runs))
}

/// Median of a non-empty slice.
pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_is_inclusive() {
        assert_eq!(grid(50.0, 300.0, 50.0).unwrap(), vec![50.0, 100.0, 150.0, 200.0, 250.0, 300.0]);
        assert_eq!(grid(1.0, 1.0, 1.0).unwrap(), vec![1.0]);
        assert!(grid(2.0, 1.0, 1.0).is_err());
        assert!(grid(0.0, 1.0, 0.0).is_err());
    }

    #[test]
    fn table_rejects_ragged_rows_and_has_header() {
        let mut t = Table::new("abc", 7, &["a", "b"]);
        assert!(t.push(vec!["1".into()]).is_err());
        t.push(vec!["1".into(), "x".into()]).unwrap();
        assert_eq!(t.to_csv().unwrap(), "# config_hash=abc, seed=7\na,b\n1,x\n");
        assert_eq!(t.column("b").unwrap(), vec!["x"]);
    }

    #[test]
    fn median_examples() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0]), 2.5);
    }

    #[test]
    fn overhead_row() {
        let t = overhead(&SystemConfig::full(), 8, &crate::estimator::DEFAULT_DIMS).unwrap();
        assert_eq!(t.column("feedback_bits_per_user").unwrap(), vec!["19"]);
        assert_eq!(t.column("estimator_flops").unwrap(), vec!["33794"]);
    }

    #[test]
    fn colormap_endpoints() {
        assert_eq!(colormap(0.0), Rgb([68, 1, 84]));
        assert_eq!(colormap(1.0), Rgb([253, 231, 37]));
    }
}
