//! Embedding datasets: binary FLE1 persistence, CSV import, deterministic
//! batch sampling, and a synthetic biased-embedding generator that stands in
//! for frozen encoder latents.
//!
//! FLE1 layout (little-endian): magic "FLE1", version u32, n u64, d u32,
//! attr_count u32, n·d f32 embeddings row-major, n label bytes, attr_count
//! blocks of n attribute bytes, n split-tag bytes (0=train, 1=val, 2=test).

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::io::{Cursor, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::losses::BatchAnnotations;
use crate::tensor::Tensor;

pub const FLE1_MAGIC: &[u8; 4] = b"FLE1";
pub const FLE1_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
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

    pub fn from_tag(tag: u8) -> Option<Split> {
        match tag {
            0 => Some(Split::Train),
            1 => Some(Split::Val),
            2 => Some(Split::Test),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingDataset {
    d: usize,
    /// n×d row-major, stored at file precision.
    e: Vec<f32>,
    y: Vec<u8>,
    /// One block of n values per sensitive attribute.
    s: Vec<Vec<u8>>,
    split: Vec<Split>,
}

impl EmbeddingDataset {
    pub fn new(d: usize, e: Vec<f32>, y: Vec<u8>, s: Vec<Vec<u8>>, split: Vec<Split>) -> Result<Self> {
        let n = y.len();
        if d == 0 || n == 0 {
            return Err(Error::Config("dataset needs n >= 1 and d >= 1".into()));
        }
        if e.len() != n * d {
            return Err(Error::Shape(format!(
                "embeddings: {} values for n={n}, d={d}",
                e.len()
            )));
        }
        if s.is_empty() || s.iter().any(|a| a.len() != n) || split.len() != n {
            return Err(Error::Shape("attribute/split blocks mismatch n".into()));
        }
        if e.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("dataset embeddings"));
        }
        Ok(EmbeddingDataset { d, e, y, s, split })
    }

    pub fn n(&self) -> usize {
        self.y.len()
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn attr_count(&self) -> usize {
        self.s.len()
    }

    pub fn label(&self, i: usize) -> usize {
        self.y[i] as usize
    }

    pub fn label_cardinality(&self) -> usize {
        self.y.iter().map(|&v| v as usize).max().unwrap_or(0) + 1
    }

    /// Sensitive attributes collapsed to a joint group index, attribute k
    /// contributing s_k · 2^k.
    pub fn group(&self, i: usize) -> usize {
        self.s
            .iter()
            .enumerate()
            .map(|(k, a)| (a[i] as usize) << k)
            .sum()
    }

    pub fn group_cardinality(&self) -> usize {
        (0..self.n()).map(|i| self.group(i)).max().unwrap_or(0) + 1
    }

    pub fn split_of(&self, i: usize) -> Split {
        self.split[i]
    }

    pub fn indices_of(&self, split: Split) -> Vec<usize> {
        (0..self.n()).filter(|&i| self.split[i] == split).collect()
    }

    pub fn embedding_row(&self, i: usize) -> Vec<f64> {
        self.e[i * self.d..(i + 1) * self.d]
            .iter()
            .map(|&v| v as f64)
            .collect()
    }

    pub fn raw_embeddings(&self) -> &[f32] {
        &self.e
    }

    /// Gather rows into an f64 batch with their annotations.
    pub fn batch(&self, indices: &[usize]) -> Result<(Tensor, BatchAnnotations)> {
        let rows: Vec<Vec<f64>> = indices.iter().map(|&i| self.embedding_row(i)).collect();
        let ann = BatchAnnotations {
            y: indices.iter().map(|&i| self.label(i)).collect(),
            s: indices.iter().map(|&i| self.group(i)).collect(),
        };
        Ok((Tensor::from_rows(&rows)?, ann))
    }

    /// Whole-split batch.
    pub fn split_batch(&self, split: Split) -> Result<(Tensor, BatchAnnotations)> {
        let idx = self.indices_of(split);
        if idx.is_empty() {
            return Err(Error::Config(format!("empty split {split:?}")));
        }
        self.batch(&idx)
    }

    /// Checks the trainer's preconditions: both cardinalities at least two
    /// and nonempty train/val splits.
    pub fn validate_for_training(&self) -> Result<()> {
        if self.label_cardinality() < 2 {
            return Err(Error::DegenerateData("label cardinality < 2".into()));
        }
        if self.group_cardinality() < 2 {
            return Err(Error::DegenerateData("sensitive cardinality < 2".into()));
        }
        if self.indices_of(Split::Train).is_empty() || self.indices_of(Split::Val).is_empty() {
            return Err(Error::Config("dataset needs train and val splits".into()));
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = Vec::new();
        out.write_all(FLE1_MAGIC)?;
        out.write_u32::<LittleEndian>(FLE1_VERSION)?;
        out.write_u64::<LittleEndian>(self.n() as u64)?;
        out.write_u32::<LittleEndian>(self.d as u32)?;
        out.write_u32::<LittleEndian>(self.s.len() as u32)?;
        for &v in &self.e {
            out.write_f32::<LittleEndian>(v)?;
        }
        out.write_all(&self.y)?;
        for block in &self.s {
            out.write_all(block)?;
        }
        for &sp in &self.split {
            out.push(sp.tag());
        }
        std::fs::write(path, out)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        Self::from_bytes(&bytes)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut cur = Cursor::new(bytes);
        let fmt = |cur: &Cursor<&[u8]>, message: &str| Error::Format {
            offset: cur.position(),
            message: message.into(),
        };
        let mut magic = [0u8; 4];
        cur.read_exact(&mut magic)
            .map_err(|_| fmt(&cur, "truncated magic"))?;
        if &magic != FLE1_MAGIC {
            return Err(Error::Format {
                offset: 0,
                message: format!("bad magic {magic:?}"),
            });
        }
        let version = cur
            .read_u32::<LittleEndian>()
            .map_err(|_| fmt(&cur, "truncated version"))?;
        if version != FLE1_VERSION {
            return Err(Error::Format {
                offset: 4,
                message: format!("unsupported version {version}"),
            });
        }
        let n = cur
            .read_u64::<LittleEndian>()
            .map_err(|_| fmt(&cur, "truncated sample count"))? as usize;
        let d = cur
            .read_u32::<LittleEndian>()
            .map_err(|_| fmt(&cur, "truncated width"))? as usize;
        let attr_count = cur
            .read_u32::<LittleEndian>()
            .map_err(|_| fmt(&cur, "truncated attribute count"))? as usize;
        let mut e = vec![0f32; n * d];
        for v in e.iter_mut() {
            *v = cur
                .read_f32::<LittleEndian>()
                .map_err(|_| fmt(&cur, "truncated embeddings"))?;
        }
        let mut y = vec![0u8; n];
        cur.read_exact(&mut y)
            .map_err(|_| fmt(&cur, "truncated labels"))?;
        let mut s = Vec::with_capacity(attr_count);
        for _ in 0..attr_count {
            let mut block = vec![0u8; n];
            cur.read_exact(&mut block)
                .map_err(|_| fmt(&cur, "truncated attributes"))?;
            s.push(block);
        }
        let mut tags = vec![0u8; n];
        cur.read_exact(&mut tags)
            .map_err(|_| fmt(&cur, "truncated split tags"))?;
        let split: Vec<Split> = tags
            .iter()
            .map(|&t| {
                Split::from_tag(t).ok_or(Error::Format {
                    offset: cur.position(),
                    message: format!("bad split tag {t}"),
                })
            })
            .collect::<Result<_>>()?;
        EmbeddingDataset::new(d, e, y, s, split)
    }

    /// CSV import with header `e0..e{d-1},y,s0[,s1...]` and an optional
    /// trailing `split` column (train/val/test).
    pub fn from_csv(path: &Path) -> Result<Self> {
        let mut reader = csv::Reader::from_path(path).map_err(csv_err)?;
        let headers = reader.headers().map_err(csv_err)?.clone();
        let mut d = 0;
        let mut attr_count = 0;
        let mut has_split = false;
        let mut y_col = None;
        for (i, h) in headers.iter().enumerate() {
            if let Some(rest) = h.strip_prefix('e') {
                if rest.parse::<usize>().map(|k| k == d).unwrap_or(false) {
                    d += 1;
                    continue;
                }
            }
            if h == "y" {
                y_col = Some(i);
            } else if h == "split" {
                has_split = true;
            } else if let Some(rest) = h.strip_prefix('s') {
                if rest.parse::<usize>().map(|k| k == attr_count).unwrap_or(false) {
                    attr_count += 1;
                    continue;
                }
                return Err(Error::Format {
                    offset: 0,
                    message: format!("unexpected column {h}"),
                });
            } else if y_col != Some(i) {
                return Err(Error::Format {
                    offset: 0,
                    message: format!("unexpected column {h}"),
                });
            }
        }
        if d == 0 || attr_count == 0 || y_col != Some(d) {
            return Err(Error::Format {
                offset: 0,
                message: "header must be e0..e{d-1},y,s0[,s1...][,split]".into(),
            });
        }
        let mut e = Vec::new();
        let mut y = Vec::new();
        let mut s: Vec<Vec<u8>> = vec![Vec::new(); attr_count];
        let mut split = Vec::new();
        for record in reader.records() {
            let record = record.map_err(csv_err)?;
            for j in 0..d {
                let v: f32 = record[j].trim().parse().map_err(|_| Error::Format {
                    offset: 0,
                    message: format!("bad embedding value {:?}", &record[j]),
                })?;
                e.push(v);
            }
            y.push(parse_small(&record[d])?);
            for k in 0..attr_count {
                s[k].push(parse_small(&record[d + 1 + k])?);
            }
            split.push(if has_split {
                match record[d + 1 + attr_count].trim() {
                    "train" => Split::Train,
                    "val" => Split::Val,
                    "test" => Split::Test,
                    other => {
                        return Err(Error::Format {
                            offset: 0,
                            message: format!("bad split value {other:?}"),
                        })
                    }
                }
            } else {
                Split::Train
            });
        }
        EmbeddingDataset::new(d, e, y, s, split)
    }
}

fn parse_small(field: &str) -> Result<u8> {
    field.trim().parse().map_err(|_| Error::Format {
        offset: 0,
        message: format!("bad categorical value {field:?}"),
    })
}

fn csv_err(e: csv::Error) -> Error {
    Error::Format {
        offset: 0,
        message: e.to_string(),
    }
}

/// Synthetic biased-embedding generator configuration.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct SynthConfig {
    pub n: usize,
    pub d: usize,
    pub signal_y: f64,
    pub signal_s: f64,
    /// Correlation between the label and the sensitive attribute.
    pub rho: f64,
    /// Noise scale on the remaining coordinates.
    pub sigma: f64,
    /// Seed for the entangling linear map.
    pub map_seed: u64,
    /// Seed for sampling.
    pub seed: u64,
    /// Fractions assigned to val and test; the rest is train.
    pub val_fraction: f64,
    pub test_fraction: f64,
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if !(-1.0..=1.0).contains(&self.rho) {
            return Err(Error::Config(format!("rho {} outside [-1, 1]", self.rho)));
        }
        if self.sigma <= 0.0 {
            return Err(Error::Config("sigma must be positive".into()));
        }
        if self.d < 4 {
            return Err(Error::Config("synthetic generator needs d >= 4".into()));
        }
        if self.n < 4 {
            return Err(Error::Config("synthetic generator needs n >= 4".into()));
        }
        let held = self.val_fraction + self.test_fraction;
        if !(0.0..1.0).contains(&self.val_fraction)
            || !(0.0..1.0).contains(&self.test_fraction)
            || held >= 1.0
        {
            return Err(Error::Config("bad split fractions".into()));
        }
        Ok(())
    }
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n: 8192,
            d: 16,
            signal_y: 1.0,
            signal_s: 1.0,
            rho: 0.8,
            sigma: 0.5,
            map_seed: 1,
            seed: 7,
            val_fraction: 0.15,
            test_fraction: 0.15,
        }
    }
}

pub(crate) fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    // Box-Muller on open-interval uniforms.
    let u1: f64 = loop {
        let u = rng.gen::<f64>();
        if u > 0.0 {
            break u;
        }
    };
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

fn random_orthogonal(d: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    loop {
        let mut m: Vec<Vec<f64>> = (0..d)
            .map(|_| (0..d).map(|_| rng.gen::<f64>() * 2.0 - 1.0).collect())
            .collect();
        if gram_schmidt_rows(&mut m) {
            return m;
        }
    }
}

fn gram_schmidt_rows(m: &mut [Vec<f64>]) -> bool {
    let d = m.len();
    for i in 0..d {
        for j in 0..i {
            let dot: f64 = (0..d).map(|k| m[i][k] * m[j][k]).sum();
            for k in 0..d {
                m[i][k] -= dot * m[j][k];
            }
        }
        let norm: f64 = (0..d).map(|k| m[i][k] * m[i][k]).sum::<f64>().sqrt();
        if norm < 1e-8 {
            return false;
        }
        for k in 0..d {
            m[i][k] /= norm;
        }
    }
    true
}

/// Smooth entangling nonlinearity applied elementwise after the linear map.
fn smooth(x: f64) -> f64 {
    x + 0.5 * x.tanh()
}

/// Draws (y, s) from a joint Bernoulli with correlation rho, builds noisy
/// signal source vectors, and entangles them through a seeded orthogonal map
/// followed by a smooth elementwise nonlinearity.
///
/// The label signal carries unit noise, so y is not perfectly recoverable
/// and a correlated sensitive signal acts as a shortcut: linear probes on
/// the raw embeddings pick it up and inherit group-dependent errors.
pub fn generate_synthetic(cfg: &SynthConfig) -> Result<EmbeddingDataset> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let map = random_orthogonal(cfg.d, cfg.map_seed);
    let (n, d) = (cfg.n, cfg.d);
    let mut e = Vec::with_capacity(n * d);
    let mut y = Vec::with_capacity(n);
    let mut s = vec![Vec::with_capacity(n)];
    let p_same = (1.0 + cfg.rho) / 2.0;
    for _ in 0..n {
        let yi: u8 = if rng.gen::<f64>() < 0.5 { 0 } else { 1 };
        let si: u8 = if rng.gen::<f64>() < p_same { yi } else { 1 - yi };
        let mut source = vec![0.0f64; d];
        source[0] = cfg.signal_y * (2.0 * yi as f64 - 1.0) + gaussian(&mut rng);
        source[1] = cfg.signal_s * (2.0 * si as f64 - 1.0) + gaussian(&mut rng);
        for v in source.iter_mut().skip(2) {
            *v = cfg.sigma * gaussian(&mut rng);
        }
        for row in &map {
            let dot: f64 = row.iter().zip(&source).map(|(a, b)| a * b).sum();
            e.push(smooth(dot) as f32);
        }
        y.push(yi);
        s[0].push(si);
    }
    let n_val = (n as f64 * cfg.val_fraction).round() as usize;
    let n_test = (n as f64 * cfg.test_fraction).round() as usize;
    let split: Vec<Split> = (0..n)
        .map(|i| {
            if i < n - n_val - n_test {
                Split::Train
            } else if i < n - n_test {
                Split::Val
            } else {
                Split::Test
            }
        })
        .collect();
    EmbeddingDataset::new(d, e, y, s, split)
}

/// Seeded per-epoch shuffled index batches. A final short batch is kept only
/// if it has at least two samples (batch statistics need n >= 2).
pub fn batches(n: usize, batch_size: usize, seed: u64, epoch: usize) -> Vec<Vec<usize>> {
    assert!(batch_size >= 2, "batch_size must be at least 2");
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng =
        ChaCha8Rng::seed_from_u64(seed ^ (epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    // Fisher-Yates.
    for i in (1..n).rev() {
        let j = rng.gen_range(0..=i);
        order.swap(i, j);
    }
    let mut out: Vec<Vec<usize>> = order.chunks(batch_size).map(|c| c.to_vec()).collect();
    if let Some(last) = out.last() {
        if last.len() < 2 {
            out.pop();
        }
    }
    out
}
