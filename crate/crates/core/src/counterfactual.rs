//! Latent-space counterfactuals: shift representations along classifier
//! weight directions, invert back to embedding space, and quantify how much
//! sensitive-attribute information leaks along a label direction.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::{gaussian, EmbeddingDataset, Split};
use crate::error::{Error, Result};
use crate::flow::{Block, FlowModel};
use crate::losses::LinearProbe;
use crate::tensor::Tensor;

/// Default shift magnitudes, up to three unit vectors in either direction.
pub const DEFAULT_ALPHA_GRID: [f64; 5] = [-3.0, -1.5, 0.0, 1.5, 3.0];

/// A unit direction supported on one partition block, embedded in full-d
/// latent coordinates (zeros elsewhere).
#[derive(Clone, Debug)]
pub struct Direction {
    pub block: Block,
    h: Vec<f64>,
}

impl Direction {
    /// Builds a direction from block-local coordinates and normalizes it.
    pub fn new(model: &FlowModel, block: Block, local: &[f64]) -> Result<Self> {
        let range = model.partition.range(block);
        if local.len() != range.len() {
            return Err(Error::Shape(format!(
                "direction: {} coordinates for a width-{} block",
                local.len(),
                range.len()
            )));
        }
        let norm = local.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm < 1e-12 {
            return Err(Error::DegenerateProbe);
        }
        let mut h = vec![0.0; model.dim()];
        for (k, &v) in local.iter().enumerate() {
            h[range.start + k] = v / norm;
        }
        Ok(Direction { block, h })
    }

    /// Full-d coordinates of the unit vector.
    pub fn coords(&self) -> &[f64] {
        &self.h
    }
}

/// Direction of a binary probe's decision boundary: positive-class weight
/// row minus negative-class row, normalized.
pub fn direction_from_probe(
    model: &FlowModel,
    block: Block,
    probe: &LinearProbe,
) -> Result<Direction> {
    if probe.classes() != 2 {
        return Err(Error::Contract(
            "direction_from_probe needs a binary probe".into(),
        ));
    }
    let local: Vec<f64> = (0..probe.width())
        .map(|j| probe.weight.at(1, j) - probe.weight.at(0, j))
        .collect();
    Direction::new(model, block, &local)
}

/// z' = z + α·ĥ applied to every row; coordinates outside the direction's
/// block are untouched.
pub fn shift(z: &Tensor, dir: &Direction, alpha: f64) -> Tensor {
    let mut out = z.clone();
    for i in 0..out.rows() {
        for (j, &h) in dir.h.iter().enumerate() {
            if h != 0.0 {
                out.set(i, j, out.at(i, j) + alpha * h);
            }
        }
    }
    out
}

#[derive(Clone, Debug)]
pub struct TrajectoryPoint {
    pub alpha: f64,
    pub z: Tensor,
    pub e_prime: Tensor,
    /// Binary logit margin (class 1 minus class 0) of the label probe.
    pub label_score: f64,
    /// Same margin for the sensitive probe.
    pub sensitive_score: f64,
}

#[derive(Clone, Debug)]
pub struct CounterfactualTrajectory {
    pub points: Vec<TrajectoryPoint>,
}

fn margin(probe: &LinearProbe, block: &Tensor) -> Result<f64> {
    let logits = probe.logits(block)?;
    Ok(logits.at(0, 1) - logits.at(0, 0))
}

fn block_of(model: &FlowModel, z: &Tensor, block: Block) -> Result<Tensor> {
    let r = model.partition.range(block);
    let rows: Vec<Vec<f64>> = (0..z.rows())
        .map(|i| r.clone().map(|j| z.at(i, j)).collect())
        .collect();
    Tensor::from_rows(&rows)
}

/// Shifts one embedding's latent along `dir` for every α, inverts each
/// shifted latent, and records both probes' scores.
pub fn trajectory(
    model: &FlowModel,
    e: &Tensor,
    dir: &Direction,
    alpha_grid: &[f64],
    probe_y: &LinearProbe,
    probe_s: &LinearProbe,
) -> Result<CounterfactualTrajectory> {
    if e.rows() != 1 {
        return Err(Error::Shape("trajectory expects a single embedding row".into()));
    }
    let (z, _) = model.forward(e)?;
    let mut points = Vec::with_capacity(alpha_grid.len());
    for &alpha in alpha_grid {
        let z_shift = shift(&z, dir, alpha);
        let e_prime = model.inverse(&z_shift)?;
        let label_score = margin(probe_y, &block_of(model, &z_shift, Block::Label)?)?;
        let sensitive_score = margin(probe_s, &block_of(model, &z_shift, Block::Sensitive)?)?;
        points.push(TrajectoryPoint {
            alpha,
            z: z_shift,
            e_prime,
            label_score,
            sensitive_score,
        });
    }
    Ok(CounterfactualTrajectory { points })
}

/// For each α, shifts every test latent along the label direction and scores
/// the result with a sensitive probe over the full latent, reporting the
/// misclassification rate against the true attribute.
pub fn misclassification_vs_shift(
    model: &FlowModel,
    dataset: &EmbeddingDataset,
    label_dir: &Direction,
    sensitive_probe: &LinearProbe,
    alpha_grid: &[f64],
) -> Result<Vec<(f64, f64)>> {
    if sensitive_probe.width() != model.dim() {
        return Err(Error::Contract(
            "misclassification_vs_shift needs a full-latent sensitive probe".into(),
        ));
    }
    let split = if dataset.indices_of(Split::Test).is_empty() {
        Split::Val
    } else {
        Split::Test
    };
    let (e, ann) = dataset.split_batch(split)?;
    let (z, _) = model.forward(&e)?;
    let mut out = Vec::with_capacity(alpha_grid.len());
    for &alpha in alpha_grid {
        let z_shift = shift(&z, label_dir, alpha);
        let pred = sensitive_probe.predict(&z_shift)?;
        let wrong = pred.iter().zip(&ann.s).filter(|(p, s)| p != s).count();
        out.push((alpha, wrong as f64 / pred.len() as f64));
    }
    Ok(out)
}

#[derive(Clone, Debug)]
pub struct ShiftRatioTable {
    /// (α, positive-attribute proportion) rows.
    pub rows: Vec<(f64, f64)>,
    /// OLS slope of the proportion in percentage points per unit α.
    pub slope: f64,
    pub intercept: f64,
    pub slope_stderr: f64,
}

/// Draws n_samples from N(α·ĥ, I) in latent space for each α, inverts to
/// embeddings, classifies the sensitive attribute with an embedding-space
/// probe, and fits the proportion-vs-α slope in percentage points.
pub fn generative_shift_ratio(
    model: &FlowModel,
    label_dir: &Direction,
    alpha_grid: &[f64],
    n_samples: usize,
    sensitive_probe: &LinearProbe,
    seed: u64,
) -> Result<ShiftRatioTable> {
    if sensitive_probe.width() != model.dim() {
        return Err(Error::Contract(
            "generative_shift_ratio needs an embedding-space probe".into(),
        ));
    }
    if n_samples == 0 {
        return Err(Error::Config("n_samples must be positive".into()));
    }
    let d = model.dim();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rows = Vec::with_capacity(alpha_grid.len());
    for &alpha in alpha_grid {
        let mut z_rows = Vec::with_capacity(n_samples);
        for _ in 0..n_samples {
            let row: Vec<f64> = (0..d)
                .map(|j| alpha * label_dir.h[j] + gaussian(&mut rng))
                .collect();
            z_rows.push(row);
        }
        let z = Tensor::from_rows(&z_rows)?;
        let e_prime = model.inverse(&z)?;
        let pred = sensitive_probe.predict(&e_prime)?;
        let positive = pred.iter().filter(|&&p| p == 1).count();
        rows.push((alpha, positive as f64 / n_samples as f64));
    }
    let points: Vec<(f64, f64)> = rows.iter().map(|&(a, p)| (a, p * 100.0)).collect();
    let (slope, intercept, slope_stderr) = linfit(&points)?;
    Ok(ShiftRatioTable {
        rows,
        slope,
        intercept,
        slope_stderr,
    })
}

/// Ordinary least squares on (x, y) points: (slope, intercept, slope
/// standard error). With exactly two points the standard error is zero.
pub fn linfit(points: &[(f64, f64)]) -> Result<(f64, f64, f64)> {
    let n = points.len();
    if n < 2 {
        return Err(Error::Underdetermined("fewer than two points".into()));
    }
    let nf = n as f64;
    let mx = points.iter().map(|p| p.0).sum::<f64>() / nf;
    let my = points.iter().map(|p| p.1).sum::<f64>() / nf;
    let sxx: f64 = points.iter().map(|p| (p.0 - mx).powi(2)).sum();
    if sxx < 1e-300 {
        return Err(Error::Underdetermined("fewer than two points".into()));
    }
    let sxy: f64 = points.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let stderr = if n == 2 {
        0.0
    } else {
        let ss_res: f64 = points
            .iter()
            .map(|p| (p.1 - (intercept + slope * p.0)).powi(2))
            .sum();
        (ss_res / (nf - 2.0) / sxx).sqrt()
    };
    Ok((slope, intercept, stderr))
}
