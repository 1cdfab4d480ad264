//! User-position datasets: seeded sampling, binary files and CSV export.
//!
//! Binary layout (little endian):
//!
//! | offset | size | field                                   |
//! |--------|------|-----------------------------------------|
//! | 0      | 4    | magic `PTLD`                            |
//! | 4      | 2    | format version (1)                      |
//! | 6      | 1    | split tag (0 train, 1 val, 2 test)      |
//! | 7      | 1    | reserved, zero                          |
//! | 8      | 8    | generator seed                          |
//! | 16     | 32   | config hash, ASCII hex                  |
//! | 48     | 8    | record count `K`                        |
//! | 56     | 16 K | records: angle (rad, f64), range (m, f64) |

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::fmt;
use std::io::Write;
use std::path::Path;

use crate::config::SystemConfig;
use crate::error::{Error, Result};
use crate::geometry::UserPosition;

const MAGIC: &[u8; 4] = b"PTLD";
const VERSION: u16 = 1;
const HEADER_LEN: usize = 56;
const HASH_LEN: usize = 32;
/// Users generated per independently seeded block.
const BLOCK: usize = 4096;

/// SplitMix64 finalizer, used to derive independent stream seeds.
pub fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed for stream `(a, b)` under `base`.
pub fn derive_seed(base: u64, a: u64, b: u64) -> u64 {
    mix64(mix64(mix64(base) ^ a) ^ b)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn tag(self) -> u8 {
        match self {
            Split::Train => 0,
            Split::Val => 1,
            Split::Test => 2,
        }
    }

    pub fn from_tag(tag: u8) -> Result<Self> {
        match tag {
            0 => Ok(Split::Train),
            1 => Ok(Split::Val),
            2 => Ok(Split::Test),
            t => Err(Error::Corrupt(format!("unknown split tag {t}"))),
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

/// Users of one split plus the provenance needed to regenerate them.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub positions: Vec<UserPosition>,
    pub split: Split,
    pub seed: u64,
    pub config_hash: String,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    /// Noise seed of user `i` for a given stream (e.g. an epoch number).
    pub fn noise_seed(&self, stream: u64, i: usize) -> u64 {
        derive_seed(self.seed ^ ((self.split.tag() as u64) << 56), stream, i as u64)
    }

    pub fn check_config(&self, cfg: &SystemConfig) -> Result<()> {
        let expected = cfg.hash();
        if self.config_hash != expected {
            return Err(Error::HashMismatch { expected, found: self.config_hash.clone() });
        }
        Ok(())
    }

    pub fn mean_range(&self) -> f64 {
        self.positions.iter().map(|p| p.range_m).sum::<f64>() / self.len().max(1) as f64
    }
}

/// Uniform users over `[-bound, bound] × [range_min, range_max]`.
///
/// Users are drawn in blocks of 4096 from per-block seeds, so any block can
/// be produced independently of the others.
pub fn sample_users(count: usize, cfg: &SystemConfig, seed: u64, split: Split) -> Result<Dataset> {
    if count == 0 {
        return Err(Error::InvalidArgument("dataset must contain at least one user".into()));
    }
    cfg.validate()?;
    let bound = cfg.angle_bound_rad;
    let mut positions = Vec::with_capacity(count);
    for block in 0..count.div_ceil(BLOCK) {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, split.tag() as u64, block as u64));
        let n = BLOCK.min(count - block * BLOCK);
        for _ in 0..n {
            let angle = rng.random_range(-bound..=bound);
            let range = rng.random_range(cfg.range_min_m..=cfg.range_max_m);
            positions.push(UserPosition { angle_rad: angle, range_m: range });
        }
    }
    Ok(Dataset { positions, split, seed, config_hash: cfg.hash() })
}

/// Train, validation and test splits from one seed.
pub fn generate_splits(
    cfg: &SystemConfig,
    seed: u64,
    counts: (usize, usize, usize),
) -> Result<(Dataset, Dataset, Dataset)> {
    Ok((
        sample_users(counts.0, cfg, seed, Split::Train)?,
        sample_users(counts.1, cfg, seed, Split::Val)?,
        sample_users(counts.2, cfg, seed, Split::Test)?,
    ))
}

pub fn to_bytes(ds: &Dataset) -> Result<Vec<u8>> {
    if ds.config_hash.len() != HASH_LEN || !ds.config_hash.is_ascii() {
        return Err(Error::InvalidArgument(format!("config hash must be {HASH_LEN} hex characters")));
    }
    let mut out = Vec::with_capacity(HEADER_LEN + 16 * ds.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.push(ds.split.tag());
    out.push(0);
    out.extend_from_slice(&ds.seed.to_le_bytes());
    out.extend_from_slice(ds.config_hash.as_bytes());
    out.extend_from_slice(&(ds.len() as u64).to_le_bytes());
    for p in &ds.positions {
        out.extend_from_slice(&p.angle_rad.to_le_bytes());
        out.extend_from_slice(&p.range_m.to_le_bytes());
    }
    Ok(out)
}

fn f64_at(bytes: &[u8], at: usize) -> f64 {
    f64::from_le_bytes(bytes[at..at + 8].try_into().expect("8 bytes"))
}

pub fn from_bytes(bytes: &[u8]) -> Result<Dataset> {
    if bytes.len() < HEADER_LEN {
        return Err(Error::Corrupt(format!("header needs {HEADER_LEN} bytes, file has {}", bytes.len())));
    }
    if &bytes[0..4] != MAGIC {
        return Err(Error::Corrupt("bad magic bytes".into()));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != VERSION {
        return Err(Error::Corrupt(format!("unsupported format version {version}")));
    }
    let split = Split::from_tag(bytes[6])?;
    let seed = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes"));
    let config_hash = std::str::from_utf8(&bytes[16..48])
        .map_err(|_| Error::Corrupt("config hash is not ASCII".into()))?
        .to_string();
    let count = u64::from_le_bytes(bytes[48..56].try_into().expect("8 bytes")) as usize;
    let expected = count
        .checked_mul(16)
        .and_then(|n| n.checked_add(HEADER_LEN))
        .ok_or_else(|| Error::Corrupt("record count overflows".into()))?;
    if bytes.len() != expected {
        return Err(Error::Corrupt(format!("expected {expected} bytes for {count} records, found {}", bytes.len())));
    }
    let mut positions = Vec::with_capacity(count);
    for i in 0..count {
        let at = HEADER_LEN + 16 * i;
        let (angle_rad, range_m) = (f64_at(bytes, at), f64_at(bytes, at + 8));
        if !angle_rad.is_finite() || !(range_m > 0.0) || !range_m.is_finite() {
            return Err(Error::Corrupt(format!("record {i} is not a valid position")));
        }
        positions.push(UserPosition { angle_rad, range_m });
    }
    Ok(Dataset { positions, split, seed, config_hash })
}

pub fn save(ds: &Dataset, path: &Path) -> Result<()> {
    std::fs::write(path, to_bytes(ds)?)?;
    Ok(())
}

/// Loads a dataset and checks that it was generated under `cfg`.
pub fn load(path: &Path, cfg: &SystemConfig) -> Result<Dataset> {
    let ds = load_unchecked(path)?;
    ds.check_config(cfg)?;
    Ok(ds)
}

pub fn load_unchecked(path: &Path) -> Result<Dataset> {
    from_bytes(&std::fs::read(path)?)
}

/// `# key=value, ...` line placed at the top of every emitted CSV.
pub fn provenance_header(config_hash: &str, seed: u64) -> String {
    format!("# config_hash={config_hash}, seed={seed}\n")
}

/// CSV mirror with columns `angle_deg, range_m, x_m, y_m`.
pub fn write_csv(ds: &Dataset, out: &mut impl Write) -> Result<()> {
    out.write_all(provenance_header(&ds.config_hash, ds.seed).as_bytes())?;
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["angle_deg", "range_m", "x_m", "y_m"])?;
    for p in &ds.positions {
        let (x, y) = p.cartesian();
        w.write_record([
            p.angle_rad.to_degrees().to_string(),
            p.range_m.to_string(),
            x.to_string(),
            y.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}
