//! Joint optimization of the flow and the two linear probes with Adam,
//! checkpointing, divergence handling, and ablation grids.
//!
//! FLCK checkpoint layout (little-endian): magic "FLCK", version u32,
//! length-prefixed TOML metadata (config, epoch, step, history), record
//! count u32, then per tensor: name length u32, name bytes, rank u32, dims
//! as u64s, float payload at the configured precision.

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::io::{Cursor, Read, Write};
use std::path::Path;

use crate::data::{batches, EmbeddingDataset, Split};
use crate::error::{Error, Result};
use crate::flow::{Block, FlowConfig, FlowModel, LatentPartition};
use crate::losses::{
    nll_eval, objective_vars, probe_ce_tape, total_loss_tape, AblationFlags, BatchAnnotations,
    FairLossConfig, LinearProbe,
};
use crate::metrics::{report, FairnessReport, PredictionSet};
use crate::tape::Tape;
use crate::tensor::Tensor;

pub const FLCK_MAGIC: &[u8; 4] = b"FLCK";
pub const FLCK_VERSION: u32 = 1;

/// Float width used for checkpoint payloads. Training always runs in f64;
/// this only controls what a saved checkpoint retains.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum Precision {
    Single,
    #[default]
    Double,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub flow_lr: f64,
    pub flow_wd: f64,
    pub probe_lr: f64,
    pub probe_wd: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub loss: FairLossConfig,
    pub flags: AblationFlags,
    pub seed: u64,
    pub precision: Precision,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 50,
            batch_size: 32,
            flow_lr: 1e-4,
            flow_wd: 1e-4,
            probe_lr: 1e-5,
            probe_wd: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            loss: FairLossConfig::default(),
            flags: AblationFlags::all_on(),
            seed: 0,
            precision: Precision::Double,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be >= 1".into()));
        }
        if self.batch_size < 2 {
            return Err(Error::Config("batch_size must be >= 2".into()));
        }
        for (name, v) in [
            ("flow_lr", self.flow_lr),
            ("probe_lr", self.probe_lr),
            ("beta1", self.beta1),
            ("beta2", self.beta2),
            ("adam_eps", self.adam_eps),
        ] {
            if !(v > 0.0) {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.flow_wd < 0.0 || self.probe_wd < 0.0 {
            return Err(Error::Config("weight decay must be nonnegative".into()));
        }
        self.loss.validate()
    }
}

/// Per-parameter Adam moments.
#[derive(Clone, Debug)]
pub struct AdamState {
    pub m: Tensor,
    pub v: Tensor,
    pub t: u64,
}

impl AdamState {
    pub fn zeros_like(p: &Tensor) -> Self {
        let z = Tensor::new(p.shape().to_vec(), vec![0.0; p.numel()]).expect("zero tensor");
        AdamState {
            m: z.clone(),
            v: z,
            t: 0,
        }
    }
}

/// One Adam step with decoupled weight decay: the parameter is shrunk by
/// lr·wd before the bias-corrected moment update.
pub fn adam_step(
    param: &mut Tensor,
    grad: &Tensor,
    state: &mut AdamState,
    lr: f64,
    wd: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
) -> Result<()> {
    if !param.same_shape(grad) {
        return Err(Error::Shape("adam_step: grad shape mismatch".into()));
    }
    state.t += 1;
    let t = state.t as i32;
    let bc1 = 1.0 - beta1.powi(t);
    let bc2 = 1.0 - beta2.powi(t);
    let p = param.data_mut();
    let g = grad.data();
    let m = state.m.data_mut();
    let v = state.v.data_mut();
    for i in 0..p.len() {
        p[i] *= 1.0 - lr * wd;
        m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
        v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
        let mhat = m[i] / bc1;
        let vhat = v[i] / bc2;
        p[i] -= lr * mhat / (vhat.sqrt() + eps);
    }
    Ok(())
}

/// One row of the per-epoch validation log.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_nll: f64,
    /// Label probe on Z^Y, grouped by the sensitive attribute.
    pub label: FairnessReport,
    /// Sensitive probe accuracy on Z^S.
    pub sensitive_acc: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct CheckpointMeta {
    cfg: TrainConfig,
    flow_cfg: FlowConfig,
    partition: LatentPartition,
    epoch: usize,
    step: u64,
    history: Vec<EpochRecord>,
}

/// A training snapshot: model, probes, optimizer state, and metric history.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub cfg: TrainConfig,
    pub flow: FlowModel,
    pub probe_y: LinearProbe,
    pub probe_s: LinearProbe,
    /// Completed epochs.
    pub epoch: usize,
    pub history: Vec<EpochRecord>,
    adam: Vec<AdamState>,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    /// Set when a step produced a non-finite loss; the checkpoint is then the
    /// last good epoch snapshot.
    pub diverged: Option<(usize, usize)>,
}

impl Checkpoint {
    fn param_names(&self) -> Vec<String> {
        let mut names = self.flow.param_names();
        names.extend(
            ["probe_y.weight", "probe_y.bias", "probe_s.weight", "probe_s.bias"]
                .map(str::to_string),
        );
        names
    }

    fn param_tensors(&self) -> Vec<&Tensor> {
        let mut out = self.flow.param_tensors();
        out.push(&self.probe_y.weight);
        out.push(&self.probe_y.bias);
        out.push(&self.probe_s.weight);
        out.push(&self.probe_s.bias);
        out
    }

    fn param_tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = self.flow.param_tensors_mut();
        out.push(&mut self.probe_y.weight);
        out.push(&mut self.probe_y.bias);
        out.push(&mut self.probe_s.weight);
        out.push(&mut self.probe_s.bias);
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let meta = CheckpointMeta {
            cfg: self.cfg.clone(),
            flow_cfg: self.flow.config.clone(),
            partition: self.flow.partition,
            epoch: self.epoch,
            step: self.adam.first().map(|a| a.t).unwrap_or(0),
            history: self.history.clone(),
        };
        let meta_text =
            toml::to_string(&meta).map_err(|e| Error::Config(format!("meta encode: {e}")))?;
        let mut out = Vec::new();
        out.write_all(FLCK_MAGIC)?;
        out.write_u32::<LittleEndian>(FLCK_VERSION)?;
        out.write_u32::<LittleEndian>(meta_text.len() as u32)?;
        out.write_all(meta_text.as_bytes())?;

        let names = self.param_names();
        let tensors = self.param_tensors();
        let mut records: Vec<(String, Vec<u64>, Vec<f64>)> = Vec::new();
        for (name, t) in names.iter().zip(&tensors) {
            records.push((
                name.clone(),
                t.shape().iter().map(|&d| d as u64).collect(),
                t.data().to_vec(),
            ));
        }
        for (name, st) in names.iter().zip(&self.adam) {
            let dims: Vec<u64> = st.m.shape().iter().map(|&d| d as u64).collect();
            records.push((format!("adam.m.{name}"), dims.clone(), st.m.data().to_vec()));
            records.push((format!("adam.v.{name}"), dims, st.v.data().to_vec()));
        }
        for (name, vals) in self.flow.structure_state() {
            records.push((name, vec![vals.len() as u64], vals));
        }
        out.write_u32::<LittleEndian>(records.len() as u32)?;
        for (name, dims, payload) in &records {
            out.write_u32::<LittleEndian>(name.len() as u32)?;
            out.write_all(name.as_bytes())?;
            out.write_u32::<LittleEndian>(dims.len() as u32)?;
            for &d in dims {
                out.write_u64::<LittleEndian>(d)?;
            }
            match self.cfg.precision {
                Precision::Double => {
                    for &v in payload {
                        out.write_f64::<LittleEndian>(v)?;
                    }
                }
                Precision::Single => {
                    for &v in payload {
                        out.write_f32::<LittleEndian>(v as f32)?;
                    }
                }
            }
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
        if &magic != FLCK_MAGIC {
            return Err(Error::Format {
                offset: 0,
                message: format!("bad magic {magic:?}"),
            });
        }
        let version = cur
            .read_u32::<LittleEndian>()
            .map_err(|_| fmt(&cur, "truncated version"))?;
        if version != FLCK_VERSION {
            return Err(Error::Format {
                offset: 4,
                message: format!("unsupported version {version}"),
            });
        }
        let meta_len = cur
            .read_u32::<LittleEndian>()
            .map_err(|_| fmt(&cur, "truncated metadata length"))? as usize;
        let mut meta_bytes = vec![0u8; meta_len];
        cur.read_exact(&mut meta_bytes)
            .map_err(|_| fmt(&cur, "truncated metadata"))?;
        let meta: CheckpointMeta = toml::from_str(
            std::str::from_utf8(&meta_bytes).map_err(|_| fmt(&cur, "metadata not utf-8"))?,
        )
        .map_err(|e| Error::Format {
            offset: 12,
            message: format!("metadata decode: {e}"),
        })?;

        let count = cur
            .read_u32::<LittleEndian>()
            .map_err(|_| fmt(&cur, "truncated record count"))? as usize;
        let mut records: HashMap<String, (Vec<usize>, Vec<f64>)> = HashMap::new();
        for _ in 0..count {
            let name_len = cur
                .read_u32::<LittleEndian>()
                .map_err(|_| fmt(&cur, "truncated record name length"))? as usize;
            let mut name_bytes = vec![0u8; name_len];
            cur.read_exact(&mut name_bytes)
                .map_err(|_| fmt(&cur, "truncated record name"))?;
            let name = String::from_utf8(name_bytes).map_err(|_| fmt(&cur, "record name not utf-8"))?;
            let rank = cur
                .read_u32::<LittleEndian>()
                .map_err(|_| fmt(&cur, "truncated rank"))? as usize;
            let mut dims = Vec::with_capacity(rank);
            for _ in 0..rank {
                dims.push(
                    cur.read_u64::<LittleEndian>()
                        .map_err(|_| fmt(&cur, "truncated dims"))? as usize,
                );
            }
            let numel: usize = dims.iter().product();
            let mut payload = Vec::with_capacity(numel);
            for _ in 0..numel {
                let v = match meta.cfg.precision {
                    Precision::Double => cur
                        .read_f64::<LittleEndian>()
                        .map_err(|_| fmt(&cur, "truncated payload"))?,
                    Precision::Single => cur
                        .read_f32::<LittleEndian>()
                        .map_err(|_| fmt(&cur, "truncated payload"))?
                        as f64,
                };
                payload.push(v);
            }
            records.insert(name, (dims, payload));
        }

        let mut flow = FlowModel::identity(meta.flow_cfg.clone(), meta.partition)?;
        let structure: Vec<(String, Vec<f64>)> = flow
            .structure_state()
            .iter()
            .map(|(name, _)| {
                let (_, vals) = records
                    .get(name)
                    .ok_or_else(|| Error::Format {
                        offset: 0,
                        message: format!("missing record {name}"),
                    })?
                    .clone();
                Ok((name.clone(), vals))
            })
            .collect::<Result<_>>()?;
        flow.load_structure_state(&structure)?;

        let (classes_y, width_y) = record_shape(&records, "probe_y.weight")?;
        let (classes_s, width_s) = record_shape(&records, "probe_s.weight")?;
        let mut ckpt = Checkpoint {
            cfg: meta.cfg,
            flow,
            probe_y: LinearProbe::zeros(classes_y, width_y),
            probe_s: LinearProbe::zeros(classes_s, width_s),
            epoch: meta.epoch,
            history: meta.history,
            adam: Vec::new(),
        };
        let names = ckpt.param_names();
        for (name, t) in names.iter().zip(ckpt.param_tensors_mut()) {
            let (dims, payload) = records.get(name).ok_or_else(|| Error::Format {
                offset: 0,
                message: format!("missing record {name}"),
            })?;
            if dims != t.shape() {
                return Err(Error::Format {
                    offset: 0,
                    message: format!("record {name}: shape {dims:?} vs {:?}", t.shape()),
                });
            }
            *t = Tensor::new(dims.clone(), payload.clone())?;
        }
        let mut adam = Vec::new();
        for name in &names {
            let (dims, m) = records.get(&format!("adam.m.{name}")).ok_or_else(|| {
                Error::Format {
                    offset: 0,
                    message: format!("missing record adam.m.{name}"),
                }
            })?;
            let (_, v) = records.get(&format!("adam.v.{name}")).ok_or_else(|| {
                Error::Format {
                    offset: 0,
                    message: format!("missing record adam.v.{name}"),
                }
            })?;
            adam.push(AdamState {
                m: Tensor::new(dims.clone(), m.clone())?,
                v: Tensor::new(dims.clone(), v.clone())?,
                t: meta.step,
            });
        }
        ckpt.adam = adam;
        Ok(ckpt)
    }
}

fn record_shape(
    records: &HashMap<String, (Vec<usize>, Vec<f64>)>,
    name: &str,
) -> Result<(usize, usize)> {
    let (dims, _) = records.get(name).ok_or_else(|| Error::Format {
        offset: 0,
        message: format!("missing record {name}"),
    })?;
    if dims.len() != 2 {
        return Err(Error::Format {
            offset: 0,
            message: format!("record {name}: expected rank 2"),
        });
    }
    Ok((dims[0], dims[1]))
}

/// Forward a split through the flow and evaluate both probes on their
/// latent blocks.
#[derive(Clone, Debug)]
pub struct EvalReport {
    pub label: FairnessReport,
    pub sensitive: FairnessReport,
    pub nll: f64,
}

pub fn evaluate(ckpt: &Checkpoint, dataset: &EmbeddingDataset, split: Split) -> Result<EvalReport> {
    let (e, ann) = dataset.split_batch(split)?;
    let (z, _) = ckpt.flow.forward(&e)?;
    let (z_y, z_s) = split_latent(&ckpt.flow, &z)?;
    let pred_y = ckpt.probe_y.predict(&z_y)?;
    let pred_s = ckpt.probe_s.predict(&z_s)?;
    let set_y = PredictionSet::from_slices(&pred_y, &ann.y, &ann.s)?;
    let set_s = PredictionSet::from_slices(&pred_s, &ann.s, &ann.y)?;
    Ok(EvalReport {
        label: report(&set_y, 1)?,
        sensitive: report(&set_s, 1)?,
        nll: nll_eval(&ckpt.flow, &e)?,
    })
}

fn split_latent(flow: &FlowModel, z: &Tensor) -> Result<(Tensor, Tensor)> {
    let yr = flow.partition.range(Block::Label);
    let sr = flow.partition.range(Block::Sensitive);
    let slice = |r: std::ops::Range<usize>| -> Result<Tensor> {
        let rows: Vec<Vec<f64>> = (0..z.rows())
            .map(|i| r.clone().map(|j| z.at(i, j)).collect())
            .collect();
        Tensor::from_rows(&rows)
    };
    Ok((slice(yr)?, slice(sr)?))
}

/// Latent blocks of a split, for external analysis.
pub fn encode_split(
    ckpt: &Checkpoint,
    dataset: &EmbeddingDataset,
    split: Split,
) -> Result<(Tensor, Tensor, BatchAnnotations)> {
    let (e, ann) = dataset.split_batch(split)?;
    let (z, _) = ckpt.flow.forward(&e)?;
    let (z_y, z_s) = split_latent(&ckpt.flow, &z)?;
    Ok((z_y, z_s, ann))
}

/// Jointly trains the flow and both probes with Adam on the total objective.
/// Runs actnorm init on the first batch, logs val metrics each epoch, and is
/// deterministic given (seed, config, single thread). On a non-finite loss
/// the last epoch snapshot is returned with `diverged` set.
pub fn train(
    dataset: &EmbeddingDataset,
    partition: LatentPartition,
    flow_cfg: FlowConfig,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    dataset.validate_for_training()?;
    if flow_cfg.dim != dataset.d() {
        return Err(Error::Config(format!(
            "flow dim {} vs dataset d {}",
            flow_cfg.dim,
            dataset.d()
        )));
    }
    let flow = FlowModel::random(flow_cfg, partition, cfg.seed)?;
    let probe_y = LinearProbe::zeros(dataset.label_cardinality(), partition.range(Block::Label).len());
    let probe_s = LinearProbe::zeros(
        dataset.group_cardinality(),
        partition.range(Block::Sensitive).len(),
    );
    let mut ckpt = Checkpoint {
        cfg: cfg.clone(),
        flow,
        probe_y,
        probe_s,
        epoch: 0,
        history: Vec::new(),
        adam: Vec::new(),
    };
    ckpt.adam = ckpt
        .param_tensors()
        .iter()
        .map(|t| AdamState::zeros_like(t))
        .collect();
    run_epochs(dataset, ckpt)
}

/// Continues a checkpoint to its configured epoch count; with identical
/// per-epoch seeding this matches uninterrupted training.
pub fn resume(dataset: &EmbeddingDataset, ckpt: Checkpoint) -> Result<TrainOutcome> {
    dataset.validate_for_training()?;
    run_epochs(dataset, ckpt)
}

fn run_epochs(dataset: &EmbeddingDataset, mut ckpt: Checkpoint) -> Result<TrainOutcome> {
    let cfg = ckpt.cfg.clone();
    let train_idx = dataset.indices_of(Split::Train);
    let n_flow = ckpt.flow.param_tensors().len();

    if !ckpt.flow.actnorm_initialized() {
        let first = batches(train_idx.len(), cfg.batch_size, cfg.seed, ckpt.epoch)
            .into_iter()
            .next()
            .ok_or_else(|| Error::Config("train split smaller than one batch".into()))?;
        let picked: Vec<usize> = first.iter().map(|&i| train_idx[i]).collect();
        let (e, _) = dataset.batch(&picked)?;
        ckpt.flow.init_actnorm(&e)?;
    }

    let mut snapshot = ckpt.clone();
    for epoch in ckpt.epoch..cfg.epochs {
        let mut epoch_loss = 0.0;
        let mut n_batches = 0usize;
        for (b, batch) in batches(train_idx.len(), cfg.batch_size, cfg.seed, epoch)
            .into_iter()
            .enumerate()
        {
            let picked: Vec<usize> = batch.iter().map(|&i| train_idx[i]).collect();
            let (e, ann) = dataset.batch(&picked)?;
            match train_step(&mut ckpt, &e, &ann, n_flow) {
                Ok(loss) => {
                    epoch_loss += loss;
                    n_batches += 1;
                }
                Err(Error::NonFinite(_)) | Err(Error::Domain(_)) => {
                    return Ok(TrainOutcome {
                        checkpoint: snapshot,
                        diverged: Some((epoch, b)),
                    });
                }
                Err(e) => return Err(e),
            }
        }
        ckpt.epoch = epoch + 1;
        let val = evaluate(&ckpt, dataset, Split::Val)?;
        ckpt.history.push(EpochRecord {
            epoch: epoch + 1,
            train_loss: epoch_loss / n_batches.max(1) as f64,
            val_nll: val.nll,
            label: val.label,
            sensitive_acc: val.sensitive.acc,
        });
        snapshot = ckpt.clone();
    }
    Ok(TrainOutcome {
        checkpoint: ckpt,
        diverged: None,
    })
}

fn train_step(
    ckpt: &mut Checkpoint,
    e: &Tensor,
    ann: &BatchAnnotations,
    n_flow: usize,
) -> Result<f64> {
    let cfg = ckpt.cfg.clone();
    let mut tape = Tape::new();
    let vars = objective_vars(&mut tape, &ckpt.flow, &ckpt.probe_y, &ckpt.probe_s)?;
    let e_id = tape.constant(e.clone())?;
    let loss = total_loss_tape(&mut tape, &ckpt.flow, &vars, e_id, ann, &cfg.loss, &cfg.flags)?;
    let loss_val = tape.value(loss).scalar_value()?;
    if !loss_val.is_finite() {
        return Err(Error::NonFinite("training loss"));
    }
    let grads = tape.backward(loss)?;
    let mut ids = vars.flow.all.clone();
    ids.extend([vars.probe_y.0, vars.probe_y.1, vars.probe_s.0, vars.probe_s.1]);
    let mut adam = std::mem::take(&mut ckpt.adam);
    let step = |ckpt: &mut Checkpoint, adam: &mut Vec<AdamState>| -> Result<()> {
        for (i, (id, param)) in ids.iter().zip(ckpt.param_tensors_mut()).enumerate() {
            let g = grads.get(*id, param);
            let (lr, wd) = if i < n_flow {
                (cfg.flow_lr, cfg.flow_wd)
            } else {
                (cfg.probe_lr, cfg.probe_wd)
            };
            adam_step(
                param,
                &g,
                &mut adam[i],
                lr,
                wd,
                cfg.beta1,
                cfg.beta2,
                cfg.adam_eps,
            )?;
            if param.data().iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite("parameter after update"));
            }
        }
        Ok(())
    };
    let res = step(ckpt, &mut adam);
    ckpt.adam = adam;
    res?;
    Ok(loss_val)
}

/// Model-selection rule: lowest validation EO among epochs whose accuracy is
/// within 5 points of the reference. Returns an index into `history`.
pub fn select_best_epoch(history: &[EpochRecord], reference_acc: f64) -> Option<usize> {
    history
        .iter()
        .enumerate()
        .filter(|(_, r)| r.label.acc >= reference_acc - 0.05)
        .min_by(|(_, a), (_, b)| a.label.eo.total_cmp(&b.label.eo))
        .map(|(i, _)| i)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AblationRow {
    /// Probes on an NLL-free flow: classification loss only.
    Inn,
    /// Adds the diagonality and equal-variance terms.
    DgEq,
    /// Adds the distance term.
    Di,
    /// Adds the likelihood term: the full objective.
    Full,
}

impl AblationRow {
    pub fn name(self) -> &'static str {
        match self {
            AblationRow::Inn => "inn",
            AblationRow::DgEq => "dgeq",
            AblationRow::Di => "di",
            AblationRow::Full => "full",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        match name {
            "inn" => Some(AblationRow::Inn),
            "dgeq" => Some(AblationRow::DgEq),
            "di" => Some(AblationRow::Di),
            "full" => Some(AblationRow::Full),
            _ => None,
        }
    }

    pub fn flags(self) -> AblationFlags {
        let mut f = AblationFlags::inn_only();
        match self {
            AblationRow::Inn => {}
            AblationRow::DgEq => {
                f.use_dg = true;
                f.use_eq = true;
            }
            AblationRow::Di => {
                f.use_dg = true;
                f.use_eq = true;
                f.use_di = true;
            }
            AblationRow::Full => return AblationFlags::all_on(),
        }
        f
    }
}

/// The four cumulative rows of the component ablation.
pub fn table3_grid() -> Vec<(String, AblationFlags)> {
    [AblationRow::Inn, AblationRow::DgEq, AblationRow::Di, AblationRow::Full]
        .iter()
        .map(|r| (r.name().to_string(), r.flags()))
        .collect()
}

/// Decomposition on/off variants of the fair-loss combinations: each of
/// {dg, eq, dg+eq, dg+eq+di} with the latent split enabled and disabled.
pub fn table4_grid() -> Vec<(String, AblationFlags)> {
    let combos: [(&str, [bool; 3]); 4] = [
        ("dg", [true, false, false]),
        ("eq", [false, true, false]),
        ("dgeq", [true, true, false]),
        ("dgeqdi", [true, true, true]),
    ];
    let mut out = Vec::new();
    for de in [true, false] {
        for (name, [dg, eq, di]) in combos {
            let mut f = AblationFlags::inn_only();
            f.use_dg = dg;
            f.use_eq = eq;
            f.use_di = di;
            f.use_decompose = de;
            out.push((format!("{}-de-{}", name, if de { "on" } else { "off" }), f));
        }
    }
    out
}

/// Trains one run per grid row and reports the label probe on the test
/// split (validation split if no test rows exist).
pub fn ablation_grid(
    dataset: &EmbeddingDataset,
    partition: LatentPartition,
    flow_cfg: &FlowConfig,
    base: &TrainConfig,
    grid: &[(String, AblationFlags)],
) -> Result<Vec<(String, FairnessReport)>> {
    let split = if dataset.indices_of(Split::Test).is_empty() {
        Split::Val
    } else {
        Split::Test
    };
    let mut out = Vec::new();
    for (name, flags) in grid {
        let mut cfg = base.clone();
        cfg.flags = *flags;
        let outcome = train(dataset, partition, flow_cfg.clone(), &cfg)?;
        let eval = evaluate(&outcome.checkpoint, dataset, split)?;
        out.push((name.clone(), eval.label));
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug)]
pub struct ProbeTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub wd: f64,
    pub seed: u64,
}

impl Default for ProbeTrainConfig {
    fn default() -> Self {
        ProbeTrainConfig {
            epochs: 20,
            batch_size: 256,
            lr: 1e-2,
            wd: 0.0,
            seed: 0,
        }
    }
}

/// Trains a standalone linear probe on fixed inputs (raw embeddings or a
/// frozen latent block) with Adam on softmax cross-entropy.
pub fn train_probe(x: &Tensor, targets: &[usize], cfg: &ProbeTrainConfig) -> Result<LinearProbe> {
    if targets.len() != x.rows() {
        return Err(Error::Shape("train_probe: target count mismatch".into()));
    }
    let classes = targets.iter().max().map(|&m| m + 1).unwrap_or(0);
    if classes < 2 {
        return Err(Error::DegenerateData("probe targets need >= 2 classes".into()));
    }
    let mut probe = LinearProbe::zeros(classes, x.cols());
    let mut adam_w = AdamState::zeros_like(&probe.weight);
    let mut adam_b = AdamState::zeros_like(&probe.bias);
    for epoch in 0..cfg.epochs {
        for batch in batches(x.rows(), cfg.batch_size.min(x.rows()).max(2), cfg.seed, epoch) {
            let rows: Vec<Vec<f64>> = batch
                .iter()
                .map(|&i| (0..x.cols()).map(|j| x.at(i, j)).collect())
                .collect();
            let t: Vec<usize> = batch.iter().map(|&i| targets[i]).collect();
            let mut tape = Tape::new();
            let (w, b) = probe.tape_vars(&mut tape)?;
            let z = tape.constant(Tensor::from_rows(&rows)?)?;
            let loss = probe_ce_tape(&mut tape, w, b, z, &t)?;
            let grads = tape.backward(loss)?;
            let gw = grads.get(w, &probe.weight);
            let gb = grads.get(b, &probe.bias);
            adam_step(&mut probe.weight, &gw, &mut adam_w, cfg.lr, cfg.wd, 0.9, 0.999, 1e-8)?;
            adam_step(&mut probe.bias, &gb, &mut adam_b, cfg.lr, cfg.wd, 0.9, 0.999, 1e-8)?;
        }
    }
    Ok(probe)
}
