//! Invertible flow mapping embeddings to latents with exact log-det-Jacobian.
//!
//! Each block is actnorm → PLU-parameterized invertible linear → affine
//! coupling, which is the flat-vector reduction of Glow. The coupling
//! log-scales pass through tanh and a clamp constant so inverses cannot
//! explode. Couplings alternate which half of the coordinates they transform.
//!
//! Training differentiates through [`FlowModel::forward_tape`]; evaluation
//! and inversion run a plain numeric path generic over f32/f64.

use num_traits::Float;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tape::{Tape, VarId};
use crate::tensor::Tensor;

/// Index split Z = [Z^Y, Z^S] of the flow output.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LatentPartition {
    pub d_y: usize,
    pub d_s: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Block {
    Label,
    Sensitive,
}

impl LatentPartition {
    pub fn new(d_y: usize, d_s: usize, d: usize) -> Result<Self> {
        if d_y < 1 || d_s < 1 || d_y + d_s > d {
            return Err(Error::Config(format!(
                "partition d_y={d_y}, d_s={d_s} incompatible with d={d}"
            )));
        }
        Ok(LatentPartition { d_y, d_s })
    }

    /// Even split between the label and sensitive blocks.
    pub fn half(d: usize) -> Result<Self> {
        LatentPartition::new(d / 2, d - d / 2, d)
    }

    pub fn range(&self, block: Block) -> std::ops::Range<usize> {
        match block {
            Block::Label => 0..self.d_y,
            Block::Sensitive => self.d_y..self.d_y + self.d_s,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FlowConfig {
    pub dim: usize,
    pub blocks: usize,
    pub hidden: usize,
    pub depth: usize,
    pub clamp: f64,
}

impl FlowConfig {
    /// Paper-scale defaults: 12 blocks, subnet depth 2, hidden width 512.
    pub fn full(dim: usize) -> Self {
        FlowConfig {
            dim,
            blocks: 12,
            hidden: 512,
            depth: 2,
            clamp: 2.0,
        }
    }

    /// Desk-scale profile used by tests and the acceptance runs.
    pub fn small(dim: usize) -> Self {
        FlowConfig {
            dim,
            blocks: 4,
            hidden: 64,
            depth: 2,
            clamp: 2.0,
        }
    }
}

#[derive(Clone, Debug)]
struct ActNorm {
    log_scale: Tensor,
    bias: Tensor,
    initialized: bool,
}

#[derive(Clone, Debug)]
struct InvLinear {
    /// Row permutation: W = P·L·U with (P x)_i = x_{perm[i]}.
    perm: Vec<usize>,
    /// Fixed signs of the U diagonal.
    sign: Vec<f64>,
    lower: Tensor,
    upper: Tensor,
    log_diag: Tensor,
}

#[derive(Clone, Debug)]
struct Dense {
    w: Tensor,
    b: Tensor,
}

#[derive(Clone, Debug)]
struct Coupling {
    /// Even blocks transform the second half, odd blocks the first.
    transform_second: bool,
    clamp: f64,
    layers: Vec<Dense>,
}

#[derive(Clone, Debug)]
pub struct FlowBlock {
    actnorm: ActNorm,
    invlinear: InvLinear,
    coupling: Coupling,
}

#[derive(Clone, Debug)]
pub struct FlowModel {
    pub config: FlowConfig,
    pub partition: LatentPartition,
    blocks: Vec<FlowBlock>,
}

fn split_point(d: usize) -> usize {
    d / 2
}

impl FlowModel {
    /// Exact identity map: actnorm identity, PLU identity, couplings zeroed.
    pub fn identity(config: FlowConfig, partition: LatentPartition) -> Result<Self> {
        Self::build(config, partition, None)
    }

    /// Random init: permutations and orthogonal PLU factors from the seed,
    /// random hidden layers, zero-initialized coupling output layer so the
    /// initial map is actnorm∘linear only.
    pub fn random(config: FlowConfig, partition: LatentPartition, seed: u64) -> Result<Self> {
        Self::build(config, partition, Some(seed))
    }

    fn build(config: FlowConfig, partition: LatentPartition, seed: Option<u64>) -> Result<Self> {
        let d = config.dim;
        if d < 2 {
            return Err(Error::Config("flow needs dim >= 2".into()));
        }
        LatentPartition::new(partition.d_y, partition.d_s, d)?;
        let mut rng = seed.map(|s| ChaCha8Rng::seed_from_u64(s));
        let mut blocks = Vec::with_capacity(config.blocks);
        for b in 0..config.blocks {
            let actnorm = ActNorm {
                log_scale: Tensor::zeros(1, d),
                bias: Tensor::zeros(1, d),
                initialized: rng.is_none(),
            };
            let invlinear = match &mut rng {
                None => InvLinear {
                    perm: (0..d).collect(),
                    sign: vec![1.0; d],
                    lower: Tensor::zeros(d, d),
                    upper: Tensor::zeros(d, d),
                    log_diag: Tensor::zeros(1, d),
                },
                Some(rng) => random_plu(d, rng)?,
            };
            let transform_second = b % 2 == 0;
            let split = split_point(d);
            let (m_in, m_out) = if transform_second {
                (split, d - split)
            } else {
                (d - split, split)
            };
            let mut layers = Vec::new();
            let mut fan_in = m_in;
            for _ in 0..config.depth {
                layers.push(dense(fan_in, config.hidden, rng.as_mut()));
                fan_in = config.hidden;
            }
            // Final layer always zero so the coupling starts as identity.
            layers.push(dense(fan_in, 2 * m_out, None));
            let coupling = Coupling {
                transform_second,
                clamp: config.clamp,
                layers,
            };
            blocks.push(FlowBlock {
                actnorm,
                invlinear,
                coupling,
            });
        }
        Ok(FlowModel {
            config,
            partition,
            blocks,
        })
    }

    pub fn dim(&self) -> usize {
        self.config.dim
    }

    pub fn actnorm_initialized(&self) -> bool {
        self.blocks.iter().all(|b| b.actnorm.initialized)
    }

    /// Data-dependent actnorm init: after it, each actnorm output on
    /// `first_batch` is standardized per dimension (population variance).
    pub fn init_actnorm(&mut self, first_batch: &Tensor) -> Result<()> {
        let n = first_batch.rows();
        if n < 2 {
            return Err(Error::InsufficientBatch { need: 2, got: n });
        }
        if first_batch.cols() != self.dim() {
            return Err(Error::Shape(format!(
                "init_actnorm: batch width {} vs dim {}",
                first_batch.cols(),
                self.dim()
            )));
        }
        let d = self.dim();
        let mut x = first_batch.clone();
        for block in &mut self.blocks {
            for j in 0..d {
                let mean: f64 = (0..n).map(|i| x.at(i, j)).sum::<f64>() / n as f64;
                let var: f64 =
                    (0..n).map(|i| (x.at(i, j) - mean).powi(2)).sum::<f64>() / n as f64;
                if var <= 0.0 {
                    return Err(Error::DegenerateData(format!(
                        "zero variance in dimension {j} during actnorm init"
                    )));
                }
                block.actnorm.bias.set(0, 0 + j, -mean);
                block.actnorm.log_scale.set(0, j, -0.5 * var.ln());
            }
            block.actnorm.initialized = true;
            // Push the batch through the freshly initialized block so the
            // next block sees its real input.
            let (next, _) = block_forward_f64(block, &x)?;
            x = next;
        }
        Ok(())
    }

    /// Forward f64 eval: z = f(e) and per-sample log|det J|.
    pub fn forward(&self, e: &Tensor) -> Result<(Tensor, Vec<f64>)> {
        self.check_ready(e.cols())?;
        let mut x = e.clone();
        let mut logdet = vec![0.0; e.rows()];
        for block in &self.blocks {
            let (next, ld) = block_forward_f64(block, &x)?;
            for (acc, v) in logdet.iter_mut().zip(ld) {
                *acc += v;
            }
            x = next;
        }
        x.check_finite("flow forward")?;
        Ok((x, logdet))
    }

    /// Inverse f64 eval.
    pub fn inverse(&self, z: &Tensor) -> Result<Tensor> {
        self.check_ready(z.cols())?;
        let n = z.rows();
        let d = self.dim();
        let mut rows: Vec<Vec<f64>> = (0..n)
            .map(|i| (0..d).map(|j| z.at(i, j)).collect())
            .collect();
        for row in &mut rows {
            self.inverse_sample(row)?;
        }
        Tensor::from_rows(&rows)
    }

    /// Single-precision forward; parameters are rounded to f32 and all
    /// arithmetic runs in f32.
    pub fn forward_f32(&self, e: &[f32], n: usize) -> Result<(Vec<f32>, Vec<f32>)> {
        let d = self.dim();
        self.check_ready(if n > 0 { e.len() / n } else { d })?;
        let mut out = Vec::with_capacity(e.len());
        let mut lds = Vec::with_capacity(n);
        for i in 0..n {
            let mut x: Vec<f32> = e[i * d..(i + 1) * d].to_vec();
            let mut ld = 0.0f32;
            for block in &self.blocks {
                ld += block_forward_sample::<f32>(block, &mut x)?;
            }
            out.extend_from_slice(&x);
            lds.push(ld);
        }
        Ok((out, lds))
    }

    pub fn inverse_f32(&self, z: &[f32], n: usize) -> Result<Vec<f32>> {
        let d = self.dim();
        let mut out = Vec::with_capacity(z.len());
        for i in 0..n {
            let mut x: Vec<f32> = z[i * d..(i + 1) * d].to_vec();
            for block in self.blocks.iter().rev() {
                block_inverse_sample::<f32>(block, &mut x)?;
            }
            out.extend_from_slice(&x);
        }
        Ok(out)
    }

    fn inverse_sample(&self, x: &mut [f64]) -> Result<()> {
        for block in self.blocks.iter().rev() {
            block_inverse_sample::<f64>(block, x)?;
        }
        Ok(())
    }

    fn check_ready(&self, width: usize) -> Result<()> {
        if width != self.dim() {
            return Err(Error::Shape(format!(
                "flow input width {width} vs dim {}",
                self.dim()
            )));
        }
        if !self.actnorm_initialized() {
            return Err(Error::State("actnorm not initialized".into()));
        }
        Ok(())
    }

    /// Canonical parameter order shared by [`Self::tape_vars`],
    /// [`Self::param_tensors`], and the checkpoint writer.
    pub fn param_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        for (i, block) in self.blocks.iter().enumerate() {
            names.push(format!("flow.block{i}.actnorm.log_scale"));
            names.push(format!("flow.block{i}.actnorm.bias"));
            names.push(format!("flow.block{i}.invlinear.lower"));
            names.push(format!("flow.block{i}.invlinear.upper"));
            names.push(format!("flow.block{i}.invlinear.log_diag"));
            for (l, _) in block.coupling.layers.iter().enumerate() {
                names.push(format!("flow.block{i}.coupling.layer{l}.weight"));
                names.push(format!("flow.block{i}.coupling.layer{l}.bias"));
            }
        }
        names
    }

    pub fn param_tensors(&self) -> Vec<&Tensor> {
        let mut out = Vec::new();
        for block in &self.blocks {
            out.push(&block.actnorm.log_scale);
            out.push(&block.actnorm.bias);
            out.push(&block.invlinear.lower);
            out.push(&block.invlinear.upper);
            out.push(&block.invlinear.log_diag);
            for layer in &block.coupling.layers {
                out.push(&layer.w);
                out.push(&layer.b);
            }
        }
        out
    }

    pub fn param_tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        for block in &mut self.blocks {
            out.push(&mut block.actnorm.log_scale);
            out.push(&mut block.actnorm.bias);
            out.push(&mut block.invlinear.lower);
            out.push(&mut block.invlinear.upper);
            out.push(&mut block.invlinear.log_diag);
            for layer in &mut block.coupling.layers {
                out.push(&mut layer.w);
                out.push(&mut layer.b);
            }
        }
        out
    }

    /// Non-parameter block state that a checkpoint must also carry.
    pub fn structure_state(&self) -> Vec<(String, Vec<f64>)> {
        let mut out = Vec::new();
        for (i, block) in self.blocks.iter().enumerate() {
            out.push((
                format!("flow.block{i}.invlinear.perm"),
                block.invlinear.perm.iter().map(|&p| p as f64).collect(),
            ));
            out.push((
                format!("flow.block{i}.invlinear.sign"),
                block.invlinear.sign.clone(),
            ));
        }
        out
    }

    pub fn load_structure_state(&mut self, state: &[(String, Vec<f64>)]) -> Result<()> {
        for (name, vals) in state {
            let Some(rest) = name.strip_prefix("flow.block") else {
                continue;
            };
            let (idx, field) = rest
                .split_once('.')
                .ok_or_else(|| Error::Config(format!("bad state key {name}")))?;
            let i: usize = idx
                .parse()
                .map_err(|_| Error::Config(format!("bad state key {name}")))?;
            let block = self
                .blocks
                .get_mut(i)
                .ok_or_else(|| Error::Config(format!("state key {name} out of range")))?;
            match field {
                "invlinear.perm" => {
                    block.invlinear.perm = vals.iter().map(|&v| v as usize).collect();
                }
                "invlinear.sign" => block.invlinear.sign = vals.clone(),
                _ => return Err(Error::Config(format!("unknown state key {name}"))),
            }
        }
        for block in &mut self.blocks {
            block.actnorm.initialized = true;
        }
        Ok(())
    }

    /// Put every parameter on the tape as a differentiable leaf, in the
    /// canonical order.
    pub fn tape_vars(&self, tape: &mut Tape) -> Result<FlowVars> {
        let mut all = Vec::new();
        let mut blocks = Vec::new();
        for block in &self.blocks {
            let an_log_scale = tape.leaf(block.actnorm.log_scale.clone(), true)?;
            let an_bias = tape.leaf(block.actnorm.bias.clone(), true)?;
            let lower = tape.leaf(block.invlinear.lower.clone(), true)?;
            let upper = tape.leaf(block.invlinear.upper.clone(), true)?;
            let log_diag = tape.leaf(block.invlinear.log_diag.clone(), true)?;
            all.extend([an_log_scale, an_bias, lower, upper, log_diag]);
            let mut mlp = Vec::new();
            for layer in &block.coupling.layers {
                let w = tape.leaf(layer.w.clone(), true)?;
                let b = tape.leaf(layer.b.clone(), true)?;
                all.push(w);
                all.push(b);
                mlp.push((w, b));
            }
            blocks.push(BlockVars {
                an_log_scale,
                an_bias,
                lower,
                upper,
                log_diag,
                mlp,
            });
        }
        Ok(FlowVars { blocks, all })
    }

    /// Differentiable forward: returns (z n×d, logdet n×1).
    pub fn forward_tape(
        &self,
        tape: &mut Tape,
        vars: &FlowVars,
        e: VarId,
    ) -> Result<(VarId, VarId)> {
        let n = tape.value(e).rows();
        let d = self.dim();
        self.check_ready(tape.value(e).cols())?;
        let ones_n1 = tape.constant(Tensor::matrix(n, 1, vec![1.0; n])?)?;
        let mut x = e;
        let mut logdet: Option<VarId> = None;
        for (block, bv) in self.blocks.iter().zip(&vars.blocks) {
            // actnorm: y = exp(log_scale) ⊙ (x + bias)
            let shifted = tape.add_row(x, bv.an_bias)?;
            let scale_row = tape.exp(bv.an_log_scale)?;
            let scale_full = tape.matmul(ones_n1, scale_row)?;
            x = tape.mul(shifted, scale_full)?;
            let an_ld = tape.sum(bv.an_log_scale)?;
            let an_ld_col = tape.scale_by_scalar(ones_n1, an_ld)?;
            logdet = Some(match logdet {
                None => an_ld_col,
                Some(acc) => tape.add(acc, an_ld_col)?,
            });

            // PLU linear: W = P·(I + L◦M_l)·(U◦M_u + diag(sign ⊙ exp(log_diag)))
            let inv = &block.invlinear;
            let ml = tape.constant(strict_lower_mask(d))?;
            let mu = tape.constant(strict_upper_mask(d))?;
            let eye = tape.constant(identity_matrix(d))?;
            let l_masked = tape.mul(bv.lower, ml)?;
            let l_mat = tape.add(l_masked, eye)?;
            let u_masked = tape.mul(bv.upper, mu)?;
            let expd = tape.exp(bv.log_diag)?;
            let sign_row = tape.constant(Tensor::row(inv.sign.clone())?)?;
            let signed = tape.mul(expd, sign_row)?;
            let ones_d1 = tape.constant(Tensor::matrix(d, 1, vec![1.0; d])?)?;
            let signed_full = tape.matmul(ones_d1, signed)?;
            let diag_mat = tape.mul(signed_full, eye)?;
            let u_mat = tape.add(u_masked, diag_mat)?;
            let p_mat = tape.constant(perm_matrix(&inv.perm))?;
            let lu = tape.matmul(l_mat, u_mat)?;
            let w = tape.matmul(p_mat, lu)?;
            let wt = tape.transpose(w)?;
            x = tape.matmul(x, wt)?;
            let lin_ld = tape.sum(bv.log_diag)?;
            let lin_ld_col = tape.scale_by_scalar(ones_n1, lin_ld)?;
            logdet = Some(tape.add(logdet.unwrap(), lin_ld_col)?);

            // affine coupling
            let split = split_point(d);
            let coup = &block.coupling;
            let (a_range, b_range) = if coup.transform_second {
                ((0, split), (split, d))
            } else {
                ((split, d), (0, split))
            };
            let xa = tape.slice_cols(x, a_range.0, a_range.1)?;
            let xb = tape.slice_cols(x, b_range.0, b_range.1)?;
            let mut h = xa;
            for (l, (w, b)) in bv.mlp.iter().enumerate() {
                let lin = tape.matmul(h, *w)?;
                h = tape.add_row(lin, *b)?;
                if l + 1 < bv.mlp.len() {
                    h = tape.tanh(h)?;
                }
            }
            let m_out = b_range.1 - b_range.0;
            let s_raw = tape.slice_cols(h, 0, m_out)?;
            let shift = tape.slice_cols(h, m_out, 2 * m_out)?;
            let s_t = tape.tanh(s_raw)?;
            let s = tape.scalar_mul(s_t, coup.clamp)?;
            let es = tape.exp(s)?;
            let scaled = tape.mul(xb, es)?;
            let yb = tape.add(scaled, shift)?;
            x = if coup.transform_second {
                tape.concat_cols(xa, yb)?
            } else {
                tape.concat_cols(yb, xa)?
            };
            let ones_m1 = tape.constant(Tensor::matrix(m_out, 1, vec![1.0; m_out])?)?;
            let coup_ld = tape.matmul(s, ones_m1)?;
            logdet = Some(tape.add(logdet.unwrap(), coup_ld)?);
        }
        Ok((x, logdet.expect("at least one block")))
    }
}

pub struct FlowVars {
    blocks: Vec<BlockVars>,
    pub all: Vec<VarId>,
}

struct BlockVars {
    an_log_scale: VarId,
    an_bias: VarId,
    lower: VarId,
    upper: VarId,
    log_diag: VarId,
    mlp: Vec<(VarId, VarId)>,
}

fn dense(fan_in: usize, fan_out: usize, rng: Option<&mut ChaCha8Rng>) -> Dense {
    let mut w = Tensor::zeros(fan_in, fan_out);
    if let Some(rng) = rng {
        let scale = 1.0 / (fan_in as f64).sqrt();
        for v in w.data_mut() {
            *v = (rng.gen::<f64>() * 2.0 - 1.0) * scale;
        }
    }
    Dense {
        w,
        b: Tensor::zeros(1, fan_out),
    }
}

/// Random orthogonal matrix (Gram-Schmidt on a Gaussian-free uniform draw)
/// decomposed as P·L·U with partial pivoting.
fn random_plu(d: usize, rng: &mut ChaCha8Rng) -> Result<InvLinear> {
    let mut m = vec![vec![0.0f64; d]; d];
    loop {
        for row in m.iter_mut() {
            for v in row.iter_mut() {
                *v = rng.gen::<f64>() * 2.0 - 1.0;
            }
        }
        if gram_schmidt(&mut m) {
            break;
        }
    }
    let (perm, l, u) = lu_decompose(&m)?;
    let mut lower = Tensor::zeros(d, d);
    let mut upper = Tensor::zeros(d, d);
    let mut log_diag = Tensor::zeros(1, d);
    let mut sign = vec![1.0; d];
    for i in 0..d {
        for j in 0..i {
            lower.set(i, j, l[i][j]);
        }
        for j in i + 1..d {
            upper.set(i, j, u[i][j]);
        }
        sign[i] = if u[i][i] >= 0.0 { 1.0 } else { -1.0 };
        log_diag.set(0, i, u[i][i].abs().ln());
    }
    Ok(InvLinear {
        perm,
        sign,
        lower,
        upper,
        log_diag,
    })
}

fn gram_schmidt(m: &mut [Vec<f64>]) -> bool {
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

/// LU with partial pivoting: returns perm such that (P a)_i = a_{perm[i]},
/// unit-lower L and upper U with m = P⁻¹ applied, i.e. P·L·U reproduces m.
fn lu_decompose(m: &[Vec<f64>]) -> Result<(Vec<usize>, Vec<Vec<f64>>, Vec<Vec<f64>>)> {
    let d = m.len();
    let mut a: Vec<Vec<f64>> = m.to_vec();
    let mut piv: Vec<usize> = (0..d).collect();
    for k in 0..d {
        let (mut best, mut best_abs) = (k, a[k][k].abs());
        for i in k + 1..d {
            if a[i][k].abs() > best_abs {
                best = i;
                best_abs = a[i][k].abs();
            }
        }
        if best_abs < 1e-12 {
            return Err(Error::DegenerateData("singular matrix in LU".into()));
        }
        a.swap(k, best);
        piv.swap(k, best);
        for i in k + 1..d {
            a[i][k] /= a[k][k];
            for j in k + 1..d {
                let delta = a[i][k] * a[k][j];
                a[i][j] -= delta;
            }
        }
    }
    let mut l = vec![vec![0.0; d]; d];
    let mut u = vec![vec![0.0; d]; d];
    for i in 0..d {
        l[i][i] = 1.0;
        for j in 0..i {
            l[i][j] = a[i][j];
        }
        for j in i..d {
            u[i][j] = a[i][j];
        }
    }
    // piv maps pivoted row i to original row piv[i]; we want perm with
    // (P x)_i = x_{perm[i]} such that P·(L·U) = m, i.e. row perm[i] of m is
    // row i of L·U. Invert piv.
    let mut perm = vec![0usize; d];
    for (i, &p) in piv.iter().enumerate() {
        perm[p] = i;
    }
    Ok((perm, l, u))
}

fn strict_lower_mask(d: usize) -> Tensor {
    let mut m = Tensor::zeros(d, d);
    for i in 0..d {
        for j in 0..i {
            m.set(i, j, 1.0);
        }
    }
    m
}

fn strict_upper_mask(d: usize) -> Tensor {
    let mut m = Tensor::zeros(d, d);
    for i in 0..d {
        for j in i + 1..d {
            m.set(i, j, 1.0);
        }
    }
    m
}

fn identity_matrix(d: usize) -> Tensor {
    let mut m = Tensor::zeros(d, d);
    for i in 0..d {
        m.set(i, i, 1.0);
    }
    m
}

fn perm_matrix(perm: &[usize]) -> Tensor {
    let d = perm.len();
    let mut m = Tensor::zeros(d, d);
    for (i, &p) in perm.iter().enumerate() {
        m.set(i, p, 1.0);
    }
    m
}

/// Compose W = P·L·U in plain f64.
fn build_w(inv: &InvLinear) -> Vec<Vec<f64>> {
    let d = inv.perm.len();
    let mut l = vec![vec![0.0; d]; d];
    let mut u = vec![vec![0.0; d]; d];
    for i in 0..d {
        l[i][i] = 1.0;
        for j in 0..i {
            l[i][j] = inv.lower.at(i, j);
        }
        for j in i + 1..d {
            u[i][j] = inv.upper.at(i, j);
        }
        u[i][i] = inv.sign[i] * inv.log_diag.at(0, i).exp();
    }
    let mut lu = vec![vec![0.0; d]; d];
    for i in 0..d {
        for k in 0..d {
            if l[i][k] == 0.0 {
                continue;
            }
            for j in 0..d {
                lu[i][j] += l[i][k] * u[k][j];
            }
        }
    }
    let mut w = vec![vec![0.0; d]; d];
    for i in 0..d {
        w[i] = lu[inv.perm[i]].clone();
    }
    w
}

fn block_forward_f64(block: &FlowBlock, x: &Tensor) -> Result<(Tensor, Vec<f64>)> {
    let n = x.rows();
    let d = x.cols();
    let mut out = Tensor::zeros(n, d);
    let mut lds = Vec::with_capacity(n);
    for i in 0..n {
        let mut row: Vec<f64> = (0..d).map(|j| x.at(i, j)).collect();
        let ld = block_forward_sample::<f64>(block, &mut row)?;
        for j in 0..d {
            out.set(i, j, row[j]);
        }
        lds.push(ld);
    }
    out.check_finite("block forward")?;
    Ok((out, lds))
}

fn cast<T: Float>(v: f64) -> T {
    T::from(v).expect("f64 -> float cast")
}

fn subnet_eval<T: Float>(coup: &Coupling, input: &[T]) -> Vec<T> {
    let mut h: Vec<T> = input.to_vec();
    for (l, layer) in coup.layers.iter().enumerate() {
        let (fan_in, fan_out) = (layer.w.rows(), layer.w.cols());
        debug_assert_eq!(h.len(), fan_in);
        let mut next = vec![T::zero(); fan_out];
        for j in 0..fan_out {
            let mut acc = cast::<T>(layer.b.at(0, j));
            for i in 0..fan_in {
                acc = acc + h[i] * cast::<T>(layer.w.at(i, j));
            }
            next[j] = if l + 1 < coup.layers.len() {
                acc.tanh()
            } else {
                acc
            };
        }
        h = next;
    }
    h
}

fn block_forward_sample<T: Float>(block: &FlowBlock, x: &mut [T]) -> Result<T> {
    let d = x.len();
    let mut logdet = T::zero();
    // actnorm
    for j in 0..d {
        let ls = block.actnorm.log_scale.at(0, j);
        let b = cast::<T>(block.actnorm.bias.at(0, j));
        x[j] = (x[j] + b) * cast::<T>(ls.exp());
        logdet = logdet + cast::<T>(ls);
    }
    // PLU linear
    let w = build_w(&block.invlinear);
    let mut y = vec![T::zero(); d];
    for i in 0..d {
        let mut acc = T::zero();
        for j in 0..d {
            acc = acc + cast::<T>(w[i][j]) * x[j];
        }
        y[i] = acc;
    }
    x.copy_from_slice(&y);
    for j in 0..d {
        logdet = logdet + cast::<T>(block.invlinear.log_diag.at(0, j));
    }
    // coupling
    let split = split_point(d);
    let coup = &block.coupling;
    let (a_range, b_range) = if coup.transform_second {
        (0..split, split..d)
    } else {
        (split..d, 0..split)
    };
    let xa: Vec<T> = x[a_range].to_vec();
    let out = subnet_eval(coup, &xa);
    let m_out = b_range.len();
    let clamp = cast::<T>(coup.clamp);
    for (k, j) in b_range.enumerate() {
        let s = clamp * out[k].tanh();
        let t = out[m_out + k];
        x[j] = x[j] * s.exp() + t;
        logdet = logdet + s;
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("flow forward sample"));
    }
    Ok(logdet)
}

fn block_inverse_sample<T: Float>(block: &FlowBlock, x: &mut [T]) -> Result<()> {
    let d = x.len();
    // coupling inverse
    let split = split_point(d);
    let coup = &block.coupling;
    let (a_range, b_range) = if coup.transform_second {
        (0..split, split..d)
    } else {
        (split..d, 0..split)
    };
    let ya: Vec<T> = x[a_range].to_vec();
    let out = subnet_eval(coup, &ya);
    let m_out = b_range.len();
    let clamp = cast::<T>(coup.clamp);
    for (k, j) in b_range.enumerate() {
        let s = clamp * out[k].tanh();
        let t = out[m_out + k];
        x[j] = (x[j] - t) * (-s).exp();
    }
    // PLU inverse: solve P·L·U v = x
    let inv = &block.invlinear;
    let mut v = vec![T::zero(); d];
    for i in 0..d {
        v[inv.perm[i]] = x[i];
    }
    // unit-lower solve
    for i in 0..d {
        let mut acc = v[i];
        for j in 0..i {
            acc = acc - cast::<T>(inv.lower.at(i, j)) * v[j];
        }
        v[i] = acc;
    }
    // upper solve
    for i in (0..d).rev() {
        let mut acc = v[i];
        for j in i + 1..d {
            acc = acc - cast::<T>(inv.upper.at(i, j)) * v[j];
        }
        let diag = inv.sign[i] * inv.log_diag.at(0, i).exp();
        v[i] = acc / cast::<T>(diag);
    }
    x.copy_from_slice(&v);
    // actnorm inverse
    for j in 0..d {
        let ls = block.actnorm.log_scale.at(0, j);
        let b = cast::<T>(block.actnorm.bias.at(0, j));
        x[j] = x[j] * cast::<T>((-ls).exp()) - b;
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("flow inverse sample"));
    }
    Ok(())
}
