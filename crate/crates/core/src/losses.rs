//! Training objectives: covariance machinery, the diagonalizing loss L_dg,
//! the equalizing loss L_eq, the bounded-distance loss L_di, the combined
//! fair loss, flow NLL under a standard Gaussian base, probe cross-entropy,
//! and the total objective.
//!
//! Everything here exists twice where needed: a tape path for training and a
//! plain f64 path for evaluation. Batch statistics use population (1/n)
//! normalization throughout.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow::{Block, FlowModel, FlowVars};
use crate::tape::{Tape, VarId};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FairLossConfig {
    pub lambda_dg: f64,
    pub lambda_eq: f64,
    pub lambda_di: f64,
    /// Per-dimension variance target.
    pub c: f64,
    /// Variance floor inside the eq-loss square root.
    pub eps_eq: f64,
    /// Distance floor in the bounded distance.
    pub eps_d: f64,
    pub lambda_cls: f64,
}

impl Default for FairLossConfig {
    fn default() -> Self {
        FairLossConfig {
            lambda_dg: 1.0,
            lambda_eq: 10.0,
            lambda_di: 1.0,
            c: 1.0,
            eps_eq: 1e-4,
            eps_d: 1e-4,
            lambda_cls: 1.0,
        }
    }
}

impl FairLossConfig {
    pub fn validate(&self) -> Result<()> {
        if self.c <= 0.0 {
            return Err(Error::Config("variance target c must be positive".into()));
        }
        if self.eps_eq <= 0.0 || self.eps_eq >= 1.0 {
            return Err(Error::Config("eps_eq must lie in (0, 1)".into()));
        }
        if self.eps_d <= 0.0 || self.eps_d >= 1.0 {
            return Err(Error::Config("eps_d must lie in (0, 1)".into()));
        }
        if self.lambda_dg < 0.0 || self.lambda_eq < 0.0 || self.lambda_di < 0.0 {
            return Err(Error::Config("loss weights must be nonnegative".into()));
        }
        Ok(())
    }
}

/// Which loss components are active; mirrors the ablation rows.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblationFlags {
    pub use_dg: bool,
    pub use_eq: bool,
    pub use_di: bool,
    pub use_g: bool,
    /// With decomposition off, the fair loss runs on the full latent with
    /// label masks only.
    pub use_decompose: bool,
}

impl AblationFlags {
    pub fn all_on() -> Self {
        AblationFlags {
            use_dg: true,
            use_eq: true,
            use_di: true,
            use_g: true,
            use_decompose: true,
        }
    }

    pub fn inn_only() -> Self {
        AblationFlags {
            use_dg: false,
            use_eq: false,
            use_di: false,
            use_g: false,
            use_decompose: false,
        }
    }
}

/// Per-sample labels and (joint) sensitive group indices for one batch.
#[derive(Clone, Debug)]
pub struct BatchAnnotations {
    pub y: Vec<usize>,
    pub s: Vec<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TargetRole {
    Label,
    Sensitive,
}

/// One-layer linear classifier over a latent block: logits = z·Wᵀ + b.
#[derive(Clone, Debug)]
pub struct LinearProbe {
    /// classes × block-width.
    pub weight: Tensor,
    pub bias: Tensor,
}

impl LinearProbe {
    pub fn zeros(classes: usize, width: usize) -> Self {
        LinearProbe {
            weight: Tensor::zeros(classes, width),
            bias: Tensor::zeros(1, classes),
        }
    }

    pub fn classes(&self) -> usize {
        self.weight.rows()
    }

    pub fn width(&self) -> usize {
        self.weight.cols()
    }

    pub fn logits(&self, z: &Tensor) -> Result<Tensor> {
        let wt = self.weight.transpose();
        let mut out = z.matmul(&wt)?;
        for i in 0..out.rows() {
            for j in 0..out.cols() {
                let v = out.at(i, j) + self.bias.at(0, j);
                out.set(i, j, v);
            }
        }
        Ok(out)
    }

    pub fn predict(&self, z: &Tensor) -> Result<Vec<usize>> {
        let logits = self.logits(z)?;
        Ok((0..logits.rows())
            .map(|i| {
                (0..logits.cols())
                    .max_by(|&a, &b| logits.at(i, a).total_cmp(&logits.at(i, b)))
                    .unwrap()
            })
            .collect())
    }

    pub fn tape_vars(&self, tape: &mut Tape) -> Result<(VarId, VarId)> {
        let w = tape.leaf(self.weight.clone(), true)?;
        let b = tape.leaf(self.bias.clone(), true)?;
        Ok((w, b))
    }
}

/// Population covariance of an n×k batch (plain f64 path).
pub fn covariance(z: &Tensor) -> Result<Tensor> {
    let (n, k) = (z.rows(), z.cols());
    if n < 2 {
        return Err(Error::InsufficientBatch { need: 2, got: n });
    }
    let mut mean = vec![0.0; k];
    for j in 0..k {
        mean[j] = (0..n).map(|i| z.at(i, j)).sum::<f64>() / n as f64;
    }
    let mut c = Tensor::zeros(k, k);
    for i in 0..n {
        for a in 0..k {
            let da = z.at(i, a) - mean[a];
            for b in 0..k {
                let v = c.at(a, b) + da * (z.at(i, b) - mean[b]) / n as f64;
                c.set(a, b, v);
            }
        }
    }
    Ok(c)
}

/// Differentiable population covariance.
pub fn covariance_tape(tape: &mut Tape, z: VarId) -> Result<VarId> {
    let (n, _k) = (tape.value(z).rows(), tape.value(z).cols());
    if n < 2 {
        return Err(Error::InsufficientBatch { need: 2, got: n });
    }
    let ones = tape.constant(Tensor::matrix(1, n, vec![1.0 / n as f64; n])?)?;
    let mean = tape.matmul(ones, z)?;
    let neg_mean = tape.scalar_mul(mean, -1.0)?;
    let centered = tape.add_row(z, neg_mean)?;
    let ct = tape.transpose(centered)?;
    let outer = tape.matmul(ct, centered)?;
    tape.scalar_mul(outer, 1.0 / n as f64)
}

fn offdiag_mask(k: usize) -> Tensor {
    let mut m = Tensor::zeros(k, k);
    for i in 0..k {
        for j in 0..k {
            if i != j {
                m.set(i, j, 1.0);
            }
        }
    }
    m
}

/// L_dg: mean squared off-diagonal covariance entries, (1/k)·Σ_{i≠j} C_ij².
pub fn diag_loss_tape(tape: &mut Tape, cov: VarId) -> Result<VarId> {
    let k = tape.value(cov).rows();
    let mask = tape.constant(offdiag_mask(k))?;
    let off = tape.mul(cov, mask)?;
    let sq = tape.square(off)?;
    let s = tape.sum(sq)?;
    tape.scalar_mul(s, 1.0 / k as f64)
}

pub fn diag_loss(cov: &Tensor) -> f64 {
    let k = cov.rows();
    let mut s = 0.0;
    for i in 0..k {
        for j in 0..k {
            if i != j {
                s += cov.at(i, j).powi(2);
            }
        }
    }
    s / k as f64
}

/// L_eq: hinge pulling per-dimension standard deviation up to the target c.
pub fn eq_loss_tape(tape: &mut Tape, z: VarId, c: f64, eps_eq: f64) -> Result<VarId> {
    let (n, k) = (tape.value(z).rows(), tape.value(z).cols());
    if n < 2 {
        return Err(Error::InsufficientBatch { need: 2, got: n });
    }
    let ones = tape.constant(Tensor::matrix(1, n, vec![1.0 / n as f64; n])?)?;
    let mean = tape.matmul(ones, z)?;
    let neg_mean = tape.scalar_mul(mean, -1.0)?;
    let centered = tape.add_row(z, neg_mean)?;
    let sq = tape.square(centered)?;
    let var = tape.matmul(ones, sq)?; // 1×k per-dim population variance
    let eps = tape.constant(Tensor::row(vec![eps_eq; k])?)?;
    let shifted = tape.add(var, eps)?;
    let sd = tape.sqrt(shifted)?;
    let target = tape.constant(Tensor::row(vec![c; k])?)?;
    let gap = tape.sub(target, sd)?;
    let hinge = tape.relu(gap)?;
    let s = tape.sum(hinge)?;
    tape.scalar_mul(s, 1.0 / k as f64)
}

/// Bounded distance D(u, v) = log((‖u−v‖² + 1) / (‖u−v‖² + ε_D)).
pub fn bounded_distance(u: &[f64], v: &[f64], eps_d: f64) -> f64 {
    let d2: f64 = u.iter().zip(v).map(|(a, b)| (a - b).powi(2)).sum();
    ((d2 + 1.0) / (d2 + eps_d)).ln()
}

/// Pair masks for the distance loss. `M_max` selects pairs whose distance is
/// maximized in mutual information (same target, different nuisance);
/// `M_min` the reverse.
fn distance_masks(
    ann: &BatchAnnotations,
    target_role: TargetRole,
) -> (Tensor, Tensor, f64, f64) {
    let n = ann.y.len();
    let (t, o): (&[usize], &[usize]) = match target_role {
        TargetRole::Label => (&ann.y, &ann.s),
        TargetRole::Sensitive => (&ann.s, &ann.y),
    };
    let mut m_max = Tensor::zeros(n, n);
    let mut m_min = Tensor::zeros(n, n);
    let (mut sum_max, mut sum_min) = (0.0, 0.0);
    for i in 0..n {
        for j in 0..n {
            if i == j {
                continue;
            }
            if t[i] == t[j] && o[i] != o[j] {
                m_max.set(i, j, 1.0);
                sum_max += 1.0;
            } else if o[i] == o[j] && t[i] != t[j] {
                m_min.set(i, j, 1.0);
                sum_min += 1.0;
            }
        }
    }
    (m_max, m_min, sum_max, sum_min)
}

/// L_di over a latent block. A term whose mask is empty contributes zero.
pub fn distance_loss_tape(
    tape: &mut Tape,
    z: VarId,
    ann: &BatchAnnotations,
    target_role: TargetRole,
    eps_d: f64,
) -> Result<VarId> {
    let n = tape.value(z).rows();
    if ann.y.len() != n || ann.s.len() != n {
        return Err(Error::Shape(format!(
            "distance_loss: {n} rows vs {} labels / {} attrs",
            ann.y.len(),
            ann.s.len()
        )));
    }
    if n < 2 {
        return Err(Error::InsufficientBatch { need: 2, got: n });
    }
    let (m_max, m_min, sum_max, sum_min) = distance_masks(ann, target_role);
    if sum_max == 0.0 && sum_min == 0.0 {
        return tape.constant(Tensor::scalar(0.0));
    }

    // Pairwise squared distances through the Gram matrix.
    let zt = tape.transpose(z)?;
    let gram = tape.matmul(z, zt)?;
    let sq = tape.square(z)?;
    let k = tape.value(z).cols();
    let ones_k1 = tape.constant(Tensor::matrix(k, 1, vec![1.0; k])?)?;
    let norms = tape.matmul(sq, ones_k1)?; // n×1
    let ones_1n = tape.constant(Tensor::matrix(1, n, vec![1.0; n])?)?;
    let ones_n1 = tape.constant(Tensor::matrix(n, 1, vec![1.0; n])?)?;
    let rows = tape.matmul(norms, ones_1n)?;
    let norms_t = tape.transpose(norms)?;
    let cols = tape.matmul(ones_n1, norms_t)?;
    let sums = tape.add(rows, cols)?;
    let g2 = tape.scalar_mul(gram, -2.0)?;
    let d2_raw = tape.add(sums, g2)?;
    // Clamp tiny negative round-off before the logs.
    let d2 = tape.relu(d2_raw)?;
    let one_mat = tape.constant(Tensor::matrix(n, n, vec![1.0; n * n])?)?;
    let eps_mat = tape.constant(Tensor::matrix(n, n, vec![eps_d; n * n])?)?;
    let num = tape.add(d2, one_mat)?;
    let den = tape.add(d2, eps_mat)?;
    let log_num = tape.log(num)?;
    let log_den = tape.log(den)?;
    let dist = tape.sub(log_num, log_den)?;

    let mut total: Option<VarId> = None;
    if sum_max > 0.0 {
        let mm = tape.constant(m_max)?;
        let masked = tape.mul(dist, mm)?;
        let s = tape.sum(masked)?;
        let term = tape.scalar_mul(s, -1.0 / sum_max)?;
        total = Some(term);
    }
    if sum_min > 0.0 {
        let mm = tape.constant(m_min)?;
        let masked = tape.mul(dist, mm)?;
        let s = tape.sum(masked)?;
        let term = tape.scalar_mul(s, 1.0 / sum_min)?;
        total = Some(match total {
            None => term,
            Some(t) => tape.add(t, term)?,
        });
    }
    Ok(total.unwrap())
}

/// L_fair = λ_dg·L_dg + λ_eq·L_eq + λ_di·L_di on one latent block, with
/// per-component ablation switches.
pub fn fair_loss_tape(
    tape: &mut Tape,
    z_block: VarId,
    ann: &BatchAnnotations,
    cfg: &FairLossConfig,
    target_role: TargetRole,
    flags: &AblationFlags,
) -> Result<VarId> {
    let mut total = tape.constant(Tensor::scalar(0.0))?;
    if flags.use_dg && cfg.lambda_dg > 0.0 {
        let cov = covariance_tape(tape, z_block)?;
        let dg = diag_loss_tape(tape, cov)?;
        let w = tape.scalar_mul(dg, cfg.lambda_dg)?;
        total = tape.add(total, w)?;
    }
    if flags.use_eq && cfg.lambda_eq > 0.0 {
        let eq = eq_loss_tape(tape, z_block, cfg.c, cfg.eps_eq)?;
        let w = tape.scalar_mul(eq, cfg.lambda_eq)?;
        total = tape.add(total, w)?;
    }
    if flags.use_di && cfg.lambda_di > 0.0 {
        let di = distance_loss_tape(tape, z_block, ann, target_role, cfg.eps_d)?;
        let w = tape.scalar_mul(di, cfg.lambda_di)?;
        total = tape.add(total, w)?;
    }
    Ok(total)
}

/// Flow NLL under a standard Gaussian base:
/// (1/n)·Σ_i (½‖f(e_i)‖² − log|det J(e_i)|), from z and per-sample logdet.
pub fn nll_from_latent_tape(tape: &mut Tape, z: VarId, logdet: VarId) -> Result<VarId> {
    let n = tape.value(z).rows() as f64;
    let sq = tape.square(z)?;
    let s1 = tape.sum(sq)?;
    let half = tape.scalar_mul(s1, 0.5)?;
    let s2 = tape.sum(logdet)?;
    let diff = tape.sub(half, s2)?;
    tape.scalar_mul(diff, 1.0 / n)
}

/// Differentiable flow NLL.
pub fn nll_loss_tape(
    tape: &mut Tape,
    model: &FlowModel,
    vars: &FlowVars,
    e: VarId,
) -> Result<VarId> {
    let (z, ld) = model.forward_tape(tape, vars, e)?;
    nll_from_latent_tape(tape, z, ld)
}

/// Plain-eval flow NLL, for validation monitoring.
pub fn nll_eval(model: &FlowModel, e: &Tensor) -> Result<f64> {
    let (z, ld) = model.forward(e)?;
    let n = e.rows() as f64;
    let sq: f64 = z.data().iter().map(|v| v * v).sum();
    Ok((0.5 * sq - ld.iter().sum::<f64>()) / n)
}

/// The objective as literally printed, −(1/n)·Σ(‖z‖² + logdet). Minimizing
/// it drives ‖z‖² to infinity; exposed only as a diagnostic for comparison
/// against the standard Gaussian NLL.
pub fn nll_literal_eval(model: &FlowModel, e: &Tensor) -> Result<f64> {
    let (z, ld) = model.forward(e)?;
    let n = e.rows() as f64;
    let sq: f64 = z.data().iter().map(|v| v * v).sum();
    Ok(-(sq + ld.iter().sum::<f64>()) / n)
}

/// Mean softmax cross-entropy of a linear probe on a latent block.
pub fn probe_ce_tape(
    tape: &mut Tape,
    probe_w: VarId,
    probe_b: VarId,
    z_block: VarId,
    targets: &[usize],
) -> Result<VarId> {
    let wt = tape.transpose(probe_w)?;
    let lin = tape.matmul(z_block, wt)?;
    let logits = tape.add_row(lin, probe_b)?;
    tape.softmax_cross_entropy(logits, targets)
}

/// Plain-eval probe cross-entropy.
pub fn probe_ce_eval(probe: &LinearProbe, z_block: &Tensor, targets: &[usize]) -> Result<f64> {
    let logits = probe.logits(z_block)?;
    let (n, k) = (logits.rows(), logits.cols());
    if targets.len() != n {
        return Err(Error::Shape("probe_ce: target count mismatch".into()));
    }
    let mut total = 0.0;
    for i in 0..n {
        let row: Vec<f64> = (0..k).map(|j| logits.at(i, j)).collect();
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + row.iter().map(|&x| (x - m).exp()).sum::<f64>().ln();
        total += lse - row[targets[i]];
    }
    Ok(total / n as f64)
}

/// Variables for everything the total objective differentiates.
pub struct ObjectiveVars {
    pub flow: FlowVars,
    pub probe_y: (VarId, VarId),
    pub probe_s: (VarId, VarId),
}

pub fn objective_vars(
    tape: &mut Tape,
    model: &FlowModel,
    probe_y: &LinearProbe,
    probe_s: &LinearProbe,
) -> Result<ObjectiveVars> {
    Ok(ObjectiveVars {
        flow: model.tape_vars(tape)?,
        probe_y: probe_y.tape_vars(tape)?,
        probe_s: probe_s.tape_vars(tape)?,
    })
}

/// Total objective: L_fair(Z^Y) + L_fair(Z^S) + L_g + λ_cls·(L_cls(Z^Y, y)
/// + L_cls(Z^S, s)), with ablation switches zeroing components.
pub fn total_loss_tape(
    tape: &mut Tape,
    model: &FlowModel,
    vars: &ObjectiveVars,
    e: VarId,
    ann: &BatchAnnotations,
    cfg: &FairLossConfig,
    flags: &AblationFlags,
) -> Result<VarId> {
    cfg.validate()?;
    let (z, logdet) = model.forward_tape(tape, &vars.flow, e)?;
    let part = model.partition;
    let d = model.dim();
    let y_range = part.range(Block::Label);
    let s_range = part.range(Block::Sensitive);
    let z_y = tape.slice_cols(z, y_range.start, y_range.end)?;
    let z_s = tape.slice_cols(z, s_range.start, s_range.end)?;

    let mut total = tape.constant(Tensor::scalar(0.0))?;
    if flags.use_decompose {
        let fy = fair_loss_tape(tape, z_y, ann, cfg, TargetRole::Label, flags)?;
        let fs = fair_loss_tape(tape, z_s, ann, cfg, TargetRole::Sensitive, flags)?;
        total = tape.add(total, fy)?;
        total = tape.add(total, fs)?;
    } else {
        // No decomposition: one fair loss on the full latent, label masks.
        let z_full = tape.slice_cols(z, 0, d)?;
        let f = fair_loss_tape(tape, z_full, ann, cfg, TargetRole::Label, flags)?;
        total = tape.add(total, f)?;
    }
    if flags.use_g {
        let g = nll_from_latent_tape(tape, z, logdet)?;
        total = tape.add(total, g)?;
    }
    if cfg.lambda_cls > 0.0 {
        let cy = probe_ce_tape(tape, vars.probe_y.0, vars.probe_y.1, z_y, &ann.y)?;
        let cs = probe_ce_tape(tape, vars.probe_s.0, vars.probe_s.1, z_s, &ann.s)?;
        let csum = tape.add(cy, cs)?;
        let weighted = tape.scalar_mul(csum, cfg.lambda_cls)?;
        total = tape.add(total, weighted)?;
    }
    Ok(total)
}
