//! Command-line frontend: dataset synthesis, training, evaluation,
//! counterfactual analysis, and numerical diagnostics.
//!
//! Exit codes: 0 success, 1 numeric failure (divergence or a failed check),
//! 2 usage or configuration error, 3 file-format error.

use clap::{Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use fairlatent::counterfactual::{
    direction_from_probe, generative_shift_ratio, misclassification_vs_shift, trajectory,
    DEFAULT_ALPHA_GRID,
};
use fairlatent::data::{generate_synthetic, EmbeddingDataset, Split, SynthConfig};
use fairlatent::diagnostics::{
    i_nce, ib_estimate, jensen_gap, norm_concentration, thm2_monotonicity, PairedGroups,
};
use fairlatent::flow::{Block, FlowConfig, FlowModel, LatentPartition};
use fairlatent::losses::nll_loss_tape;
use fairlatent::tape::grad_check;
use fairlatent::trainer::{
    encode_split, evaluate, table3_grid, train, train_probe, AblationRow, Checkpoint,
    ProbeTrainConfig, TrainConfig,
};
use fairlatent::{Error, Tensor};

#[derive(Parser)]
#[command(name = "fairlatent", version, about = "Fair latent spaces on frozen embeddings")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum SplitArg {
    Train,
    Val,
    Test,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Split {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Val => Split::Val,
            SplitArg::Test => Split::Test,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum DirArg {
    Label,
    Sensitive,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum CfMode {
    Trajectory,
    #[value(name = "figure4-left")]
    Figure4Left,
    #[value(name = "figure4-right")]
    Figure4Right,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum DiagCheck {
    Gradcheck,
    Jensen,
    Nce,
    Ib,
    Norm,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic biased-embedding dataset.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 8192)]
        n: usize,
        #[arg(long, default_value_t = 16)]
        d: usize,
        #[arg(long, default_value_t = 0.8)]
        rho: f64,
        #[arg(long, default_value_t = 0.5)]
        sigma: f64,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        #[arg(long, default_value_t = 1.0)]
        signal_y: f64,
        #[arg(long, default_value_t = 1.0)]
        signal_s: f64,
        #[arg(long, default_value_t = 1)]
        map_seed: u64,
    },
    /// Train the flow and probes on a dataset.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// TOML run configuration; flags override its values.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Component ablation: inn, dgeq, di, or full.
        #[arg(long)]
        ablation: Option<String>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        epochs: Option<usize>,
        /// Run every component-ablation row instead of a single config.
        #[arg(long, default_value_t = false)]
        grid: bool,
    },
    /// Evaluate a checkpoint's probes on one split.
    Eval {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, value_enum, default_value_t = SplitArg::Test)]
        split: SplitArg,
    },
    /// Counterfactual analyses along a probe direction.
    Counterfact {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum, default_value_t = DirArg::Label)]
        dir: DirArg,
        /// Comma-separated shift magnitudes.
        #[arg(long)]
        alpha_grid: Option<String>,
        #[arg(long, value_enum, default_value_t = CfMode::Trajectory)]
        mode: CfMode,
        #[arg(long, default_value_t = 1000)]
        n_samples: usize,
        #[arg(long, default_value_t = 0)]
        index: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run a named numerical check.
    Diag {
        #[arg(long, value_enum)]
        check: DiagCheck,
        #[arg(long)]
        ckpt: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
    },
}

/// TOML run configuration mirroring the training types.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RunConfig {
    train: Option<TrainConfig>,
    flow: Option<FlowProfile>,
    partition: Option<PartitionConfig>,
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct FlowProfile {
    blocks: usize,
    hidden: usize,
    depth: usize,
    clamp: f64,
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PartitionConfig {
    d_y: usize,
    d_s: usize,
}

/// The fully resolved settings of a run, written beside its outputs.
#[derive(Clone, Debug, Serialize)]
struct ResolvedConfig<'a> {
    command: &'a str,
    #[serde(skip_serializing_if = "Option::is_none")]
    synth: Option<SynthConfig>,
    #[serde(skip_serializing_if = "Option::is_none")]
    train: Option<TrainConfig>,
    #[serde(skip_serializing_if = "Option::is_none")]
    flow: Option<FlowConfig>,
    #[serde(skip_serializing_if = "Option::is_none")]
    partition: Option<LatentPartition>,
}

fn write_resolved(out: &Path, resolved: &ResolvedConfig) -> fairlatent::Result<()> {
    let text = toml::to_string_pretty(resolved)
        .map_err(|e| Error::Config(format!("resolved config encode: {e}")))?;
    let mut path = out.as_os_str().to_owned();
    path.push(".resolved.toml");
    std::fs::write(PathBuf::from(path), text)?;
    Ok(())
}

fn exit_code_for(err: &Error) -> u8 {
    match err {
        Error::Format { .. } => 3,
        Error::Config(_) | Error::Shape(_) | Error::Contract(_) | Error::State(_) => 2,
        Error::Io(_) => 2,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code_for(&e))
        }
    }
}

fn run(command: Command) -> fairlatent::Result<ExitCode> {
    match command {
        Command::Synth {
            out,
            n,
            d,
            rho,
            sigma,
            seed,
            signal_y,
            signal_s,
            map_seed,
        } => {
            let cfg = SynthConfig {
                n,
                d,
                rho,
                sigma,
                seed,
                signal_y,
                signal_s,
                map_seed,
                ..SynthConfig::default()
            };
            let ds = generate_synthetic(&cfg)?;
            ds.save(&out)?;
            let corr = empirical_corr(&ds);
            write_resolved(
                &out,
                &ResolvedConfig {
                    command: "synth",
                    synth: Some(cfg),
                    train: None,
                    flow: None,
                    partition: None,
                },
            )?;
            println!("n={} d={} corr={:.4}", ds.n(), ds.d(), corr);
            Ok(ExitCode::SUCCESS)
        }
        Command::Train {
            data,
            out,
            config,
            ablation,
            seed,
            epochs,
            grid,
        } => {
            let ds = EmbeddingDataset::load(&data)?;
            let run_cfg: RunConfig = match config {
                None => RunConfig::default(),
                Some(path) => toml::from_str(&std::fs::read_to_string(&path)?)
                    .map_err(|e| Error::Config(format!("run config: {e}")))?,
            };
            let mut cfg = run_cfg.train.unwrap_or_default();
            if let Some(s) = seed {
                cfg.seed = s;
            }
            if let Some(e) = epochs {
                cfg.epochs = e;
            }
            if let Some(name) = &ablation {
                let row = AblationRow::from_name(name).ok_or_else(|| {
                    Error::Config(format!("unknown ablation {name:?}; use inn|dgeq|di|full"))
                })?;
                cfg.flags = row.flags();
            }
            let flow_cfg = match run_cfg.flow {
                Some(p) => FlowConfig {
                    dim: ds.d(),
                    blocks: p.blocks,
                    hidden: p.hidden,
                    depth: p.depth,
                    clamp: p.clamp,
                },
                None => FlowConfig::small(ds.d()),
            };
            let partition = match run_cfg.partition {
                Some(p) => LatentPartition::new(p.d_y, p.d_s, ds.d())?,
                None => LatentPartition::half(ds.d())?,
            };
            write_resolved(
                &out,
                &ResolvedConfig {
                    command: "train",
                    synth: None,
                    train: Some(cfg.clone()),
                    flow: Some(flow_cfg.clone()),
                    partition: Some(partition),
                },
            )?;
            if grid {
                let rows = fairlatent::trainer::ablation_grid(
                    &ds,
                    partition,
                    &flow_cfg,
                    &cfg,
                    &table3_grid(),
                )?;
                println!("row,eo,dp,wga,acc");
                for (name, rep) in rows {
                    println!(
                        "{name},{:.4},{:.4},{:.4},{:.4}",
                        rep.eo * 100.0,
                        rep.dp * 100.0,
                        rep.wga * 100.0,
                        rep.acc * 100.0
                    );
                }
                return Ok(ExitCode::SUCCESS);
            }
            let outcome = train(&ds, partition, flow_cfg, &cfg)?;
            outcome.checkpoint.save(&out)?;
            let mut log = String::from("epoch,train_loss,val_nll,eo,dp,wga,acc\n");
            for r in &outcome.checkpoint.history {
                log.push_str(&format!(
                    "{},{:.6},{:.6},{:.4},{:.4},{:.4},{:.4}\n",
                    r.epoch,
                    r.train_loss,
                    r.val_nll,
                    r.label.eo * 100.0,
                    r.label.dp * 100.0,
                    r.label.wga * 100.0,
                    r.label.acc * 100.0
                ));
            }
            let mut log_path = out.as_os_str().to_owned();
            log_path.push(".log.csv");
            std::fs::write(PathBuf::from(log_path), log)?;
            if let Some((epoch, batch)) = outcome.diverged {
                return Err(Error::Diverged { epoch, batch });
            }
            println!(
                "trained {} epochs; final val eo={:.4}",
                outcome.checkpoint.epoch,
                outcome
                    .checkpoint
                    .history
                    .last()
                    .map(|r| r.label.eo * 100.0)
                    .unwrap_or(f64::NAN)
            );
            Ok(ExitCode::SUCCESS)
        }
        Command::Eval { data, ckpt, split } => {
            let ds = EmbeddingDataset::load(&data)?;
            let ckpt = Checkpoint::load(&ckpt)?;
            let eval = evaluate(&ckpt, &ds, split.into())?;
            println!("label probe on Z^Y:");
            print!("{}", eval.label);
            println!("sensitive probe on Z^S:");
            print!("{}", eval.sensitive);
            println!("nll={:.6}", eval.nll);
            Ok(ExitCode::SUCCESS)
        }
        Command::Counterfact {
            ckpt,
            data,
            dir,
            alpha_grid,
            mode,
            n_samples,
            index,
            seed,
            out,
        } => {
            let ds = EmbeddingDataset::load(&data)?;
            let ckpt = Checkpoint::load(&ckpt)?;
            let grid = parse_alpha_grid(alpha_grid.as_deref())?;
            let direction = match dir {
                DirArg::Label => direction_from_probe(&ckpt.flow, Block::Label, &ckpt.probe_y)?,
                DirArg::Sensitive => {
                    direction_from_probe(&ckpt.flow, Block::Sensitive, &ckpt.probe_s)?
                }
            };
            write_resolved(
                &out,
                &ResolvedConfig {
                    command: "counterfact",
                    synth: None,
                    train: Some(ckpt.cfg.clone()),
                    flow: Some(ckpt.flow.config.clone()),
                    partition: Some(ckpt.flow.partition),
                },
            )?;
            match mode {
                CfMode::Trajectory => {
                    let split = nonempty_eval_split(&ds);
                    let idx = *ds
                        .indices_of(split)
                        .get(index)
                        .ok_or_else(|| Error::Config(format!("index {index} out of range")))?;
                    let (e, _) = ds.batch(&[idx])?;
                    let traj =
                        trajectory(&ckpt.flow, &e, &direction, &grid, &ckpt.probe_y, &ckpt.probe_s)?;
                    let mut text = String::from("alpha,label_score,sensitive_score\n");
                    let d = ds.d();
                    let mut embeddings: Vec<f32> = Vec::new();
                    for p in &traj.points {
                        text.push_str(&format!(
                            "{},{:.6},{:.6}\n",
                            p.alpha, p.label_score, p.sensitive_score
                        ));
                        embeddings.extend(p.e_prime.data().iter().map(|&v| v as f32));
                    }
                    std::fs::write(&out, text)?;
                    let k = traj.points.len();
                    let export = EmbeddingDataset::new(
                        d,
                        embeddings,
                        vec![0; k],
                        vec![vec![0; k]],
                        vec![Split::Test; k],
                    )?;
                    let mut fle_path = out.as_os_str().to_owned();
                    fle_path.push(".fle1");
                    export.save(&PathBuf::from(fle_path))?;
                }
                CfMode::Figure4Left => {
                    let (e_tr, ann_tr) = ds.split_batch(Split::Train)?;
                    let (z_tr, _) = ckpt.flow.forward(&e_tr)?;
                    let probe = train_probe(
                        &z_tr,
                        &ann_tr.s,
                        &ProbeTrainConfig {
                            seed,
                            ..ProbeTrainConfig::default()
                        },
                    )?;
                    let table =
                        misclassification_vs_shift(&ckpt.flow, &ds, &direction, &probe, &grid)?;
                    let mut text = String::from("alpha,misclassification_rate\n");
                    for (a, r) in table {
                        text.push_str(&format!("{a},{r:.6}\n"));
                    }
                    std::fs::write(&out, text)?;
                }
                CfMode::Figure4Right => {
                    let (e_tr, ann_tr) = ds.split_batch(Split::Train)?;
                    let probe = train_probe(
                        &e_tr,
                        &ann_tr.s,
                        &ProbeTrainConfig {
                            seed,
                            ..ProbeTrainConfig::default()
                        },
                    )?;
                    let table = generative_shift_ratio(
                        &ckpt.flow, &direction, &grid, n_samples, &probe, seed,
                    )?;
                    let mut text = String::from("alpha,positive_proportion\n");
                    for (a, p) in &table.rows {
                        text.push_str(&format!("{a},{p:.6}\n"));
                    }
                    text.push_str(&format!(
                        "slope={:.4},intercept={:.4},stderr={:.4}\n",
                        table.slope, table.intercept, table.slope_stderr
                    ));
                    std::fs::write(&out, text)?;
                    println!("slope={:.4} stderr={:.4}", table.slope, table.slope_stderr);
                }
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::Diag { check, ckpt, data } => run_diag(check, ckpt, data),
    }
}

fn run_diag(
    check: DiagCheck,
    ckpt: Option<PathBuf>,
    data: Option<PathBuf>,
) -> fairlatent::Result<ExitCode> {
    let need_model = || -> fairlatent::Result<(Checkpoint, EmbeddingDataset)> {
        let c = Checkpoint::load(
            &ckpt
                .clone()
                .ok_or_else(|| Error::Config("this check needs --ckpt".into()))?,
        )?;
        let d = EmbeddingDataset::load(
            &data
                .clone()
                .ok_or_else(|| Error::Config("this check needs --data".into()))?,
        )?;
        Ok((c, d))
    };
    let (pass, value, threshold, name) = match check {
        DiagCheck::Gradcheck => {
            let mut worst = 0.0f64;
            for seed in [1u64, 2, 3] {
                let model = {
                    let mut m = FlowModel::random(
                        FlowConfig {
                            dim: 6,
                            blocks: 2,
                            hidden: 16,
                            depth: 2,
                            clamp: 2.0,
                        },
                        LatentPartition::half(6)?,
                        seed,
                    )?;
                    let batch = Tensor::from_rows(
                        &(0..12)
                            .map(|i| {
                                (0..6)
                                    .map(|j| ((seed as f64) + (i * 6 + j) as f64 * 0.43).sin())
                                    .collect()
                            })
                            .collect::<Vec<_>>(),
                    )?;
                    m.init_actnorm(&batch)?;
                    m
                };
                let x = Tensor::from_rows(
                    &(0..4)
                        .map(|i| (0..6).map(|j| ((i * 6 + j) as f64 * 0.29).cos()).collect())
                        .collect::<Vec<_>>(),
                )?;
                let err = grad_check(
                    |tape, e| {
                        let vars = model.tape_vars(tape)?;
                        nll_loss_tape(tape, &model, &vars, e)
                    },
                    &x,
                    1e-5,
                )?;
                worst = worst.max(err);
            }
            (worst < 1e-4, worst, 1e-4, "gradcheck")
        }
        DiagCheck::Jensen => {
            use rand::Rng as _;
            use rand_chacha::rand_core::SeedableRng as _;
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
            let mut worst = f64::MAX;
            let mut ok = true;
            for _ in 0..1000 {
                let d = 3;
                let a: Vec<f64> = (0..d * d).map(|_| rng.gen::<f64>() * 2.0 - 1.0).collect();
                let a = Tensor::matrix(d, d, a)?;
                let mut c = a.transpose().matmul(&a)?;
                for i in 0..d {
                    c.set(i, i, c.at(i, i) + 1e-6);
                }
                let g = jensen_gap(&c)?;
                worst = worst.min(g.gap);
                ok &= g.gap >= -1e-12;
            }
            (ok, worst, -1e-12, "jensen")
        }
        DiagCheck::Nce => {
            let angles: Vec<f64> = (0..=9).map(|i| i as f64 * 10.0).collect();
            let table = thm2_monotonicity(4.0, &angles, 32)?;
            let monotone = table.windows(2).all(|w| w[1].1 < w[0].1);
            let z0 = Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0])?;
            let pairs = PairedGroups::new(z0.clone(), z0)?;
            let bounded = i_nce(&pairs) <= 2.0f64.ln() + 1e-12;
            (
                monotone && bounded,
                table.last().map(|r| r.1).unwrap_or(f64::NAN),
                0.0,
                "nce",
            )
        }
        DiagCheck::Ib => {
            let (c, d) = need_model()?;
            let (z_y, _, ann) = encode_split(&c, &d, nonempty_eval_split(&d))?;
            let v = ib_estimate(&z_y, &ann.y, 1.0, 1e-8)?;
            (v.is_finite() && v < 0.0, v, 0.0, "ib")
        }
        DiagCheck::Norm => {
            let (c, d) = need_model()?;
            let (z_y, _, _) = encode_split(&c, &d, nonempty_eval_split(&d))?;
            let nc = norm_concentration(&z_y, c.cfg.loss.c)?;
            (nc.relative_deviation < 0.20, nc.relative_deviation, 0.20, "norm")
        }
    };
    println!(
        "{name}: {} (value {value:.6e}, threshold {threshold:.6e})",
        if pass { "pass" } else { "fail" }
    );
    Ok(if pass {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(1)
    })
}

fn nonempty_eval_split(ds: &EmbeddingDataset) -> Split {
    if ds.indices_of(Split::Test).is_empty() {
        Split::Val
    } else {
        Split::Test
    }
}

fn parse_alpha_grid(arg: Option<&str>) -> fairlatent::Result<Vec<f64>> {
    match arg {
        None => Ok(DEFAULT_ALPHA_GRID.to_vec()),
        Some(text) => {
            let mut out = Vec::new();
            for part in text.split(',') {
                let v: f64 = part
                    .trim()
                    .parse()
                    .map_err(|_| Error::Config(format!("bad alpha value {part:?}")))?;
                out.push(v);
            }
            if out.is_empty() {
                return Err(Error::Config("alpha grid is empty".into()));
            }
            Ok(out)
        }
    }
}

fn empirical_corr(ds: &EmbeddingDataset) -> f64 {
    let n = ds.n() as f64;
    let ys: Vec<(f64, f64)> = (0..ds.n())
        .map(|i| (ds.label(i) as f64, ds.group(i) as f64))
        .collect();
    let my = ys.iter().map(|p| p.0).sum::<f64>() / n;
    let ms = ys.iter().map(|p| p.1).sum::<f64>() / n;
    let cov = ys.iter().map(|p| (p.0 - my) * (p.1 - ms)).sum::<f64>() / n;
    let vy = ys.iter().map(|p| (p.0 - my).powi(2)).sum::<f64>() / n;
    let vs = ys.iter().map(|p| (p.1 - ms).powi(2)).sum::<f64>() / n;
    cov / (vy * vs).sqrt().max(1e-300)
}
