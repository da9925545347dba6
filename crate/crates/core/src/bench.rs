//! Tiling benchmark: seeded random 2D splats binned by every strategy.

use std::fmt::Write as _;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::binning::BinningStrategy;
use crate::projection::{Conic, SplatBatch};

pub const STRATEGIES: [BinningStrategy; 3] = [BinningStrategy::Aabb, BinningStrategy::SnugSeq, BinningStrategy::SnugLb];

#[derive(Clone, Debug, PartialEq)]
pub struct BenchSpec {
    pub n_splats: usize,
    /// Major over minor axis length.
    pub anisotropy: f64,
    /// Rotation in radians; `None` draws it uniformly.
    pub angle: Option<f64>,
    /// Range of the minor standard deviation in pixels.
    pub sigma_range: (f64, f64),
    pub width: u32,
    pub height: u32,
    pub seed: u64,
}

impl BenchSpec {
    pub fn new(n_splats: usize, anisotropy: f64, seed: u64) -> Self {
        Self {
            n_splats,
            anisotropy,
            angle: Some(std::f64::consts::FRAC_PI_4),
            sigma_range: (0.5, 4.0),
            width: 1920,
            height: 1080,
            seed,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BenchResult {
    pub strategy: BinningStrategy,
    pub splats: usize,
    pub pairs: usize,
    /// Zero in deterministic mode.
    pub millis: u64,
    pub checksum: u64,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum BenchError {
    #[error("n_splats must be positive")]
    Empty,
    #[error("anisotropy must be at least 1, got {0}")]
    Anisotropy(String),
    #[error("snug strategies disagree: checksums {0:016x} and {1:016x}")]
    ChecksumMismatch(u64, u64),
}

pub fn random_batch(spec: &BenchSpec) -> SplatBatch {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut batch = SplatBatch {
        width: spec.width,
        height: spec.height,
        ..Default::default()
    };
    let (lo, hi) = spec.sigma_range;
    for i in 0..spec.n_splats {
        let mean = [rng.random_range(0.0..spec.width as f64), rng.random_range(0.0..spec.height as f64)];
        let minor = (rng.random_range(lo.ln()..=hi.ln())).exp();
        let angle = spec.angle.unwrap_or_else(|| rng.random_range(0.0..std::f64::consts::PI));
        let conic = Conic::from_axes(minor * spec.anisotropy, minor, angle);
        let opacity = rng.random_range(0.05..0.99);
        let depth = rng.random_range(0.5..50.0);
        batch.push_2d(i as u32, mean, conic, opacity, depth, [1.0; 3]);
    }
    batch
}

/// Bins one random batch with every strategy.
pub fn run(spec: &BenchSpec, deterministic: bool) -> Result<Vec<BenchResult>, BenchError> {
    if spec.n_splats == 0 {
        return Err(BenchError::Empty);
    }
    if !(spec.anisotropy >= 1.0) {
        return Err(BenchError::Anisotropy(spec.anisotropy.to_string()));
    }
    let batch = random_batch(spec);
    let results: Vec<BenchResult> = STRATEGIES
        .iter()
        .map(|&strategy| {
            let t0 = Instant::now();
            let index = strategy.bin(&batch);
            let millis = if deterministic { 0 } else { t0.elapsed().as_millis() as u64 };
            BenchResult {
                strategy,
                splats: batch.len(),
                pairs: index.num_pairs(),
                millis,
                checksum: index.checksum(),
            }
        })
        .collect();
    let (seq, lb) = (results[1].checksum, results[2].checksum);
    if seq != lb {
        return Err(BenchError::ChecksumMismatch(seq, lb));
    }
    Ok(results)
}

pub fn to_csv(results: &[BenchResult]) -> String {
    let mut s = String::from("strategy,splats,pairs,millis,checksum\n");
    for r in results {
        let _ = writeln!(s, "{},{},{},{},{:016x}", r.strategy.name(), r.splats, r.pairs, r.millis, r.checksum);
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn isotropic_sub_tile_splats_give_equal_counts() {
        // Centers near tile centers with radii well inside the tile.
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut batch = SplatBatch {
            width: 512,
            height: 512,
            ..Default::default()
        };
        for i in 0..2000 {
            let mean = [
                16.0 * rng.random_range(0..32) as f64 + 8.0 + rng.random_range(-3.0..3.0),
                16.0 * rng.random_range(0..32) as f64 + 8.0 + rng.random_range(-3.0..3.0),
            ];
            let s: f64 = rng.random_range(0.3..1.0);
            batch.push_2d(i, mean, Conic::from_axes(s, s, 0.0), 0.9, 1.0, [1.0; 3]);
        }
        let counts: Vec<usize> = STRATEGIES.iter().map(|s| s.bin(&batch).num_pairs()).collect();
        assert_eq!(counts, vec![2000; 3]);
    }

    #[test]
    fn anisotropic_diagonal_splats_are_compacted() {
        let r = run(&BenchSpec::new(2000, 10.0, 3), true).unwrap();
        assert!(r[1].pairs < r[0].pairs);
        assert_eq!(r[1].pairs, r[2].pairs);
    }

    #[test]
    fn deterministic_csv_repeats() {
        let spec = BenchSpec {
            angle: None,
            ..BenchSpec::new(500, 4.0, 9)
        };
        let a = to_csv(&run(&spec, true).unwrap());
        assert_eq!(a, to_csv(&run(&spec, true).unwrap()));
        assert_eq!(a.lines().count(), 4);
        assert!(a.starts_with("strategy,splats,pairs,millis,checksum\naabb,500,"));
    }

    #[test]
    fn rejects_bad_specs() {
        assert_eq!(run(&BenchSpec::new(0, 2.0, 0), true), Err(BenchError::Empty));
        assert!(matches!(run(&BenchSpec::new(5, 0.5, 0), true), Err(BenchError::Anisotropy(_))));
    }
}
