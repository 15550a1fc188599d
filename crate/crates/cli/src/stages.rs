//! Pipeline stages: each command reads its prerequisite checkpoints from
//! the run directory, does its work with a stage-derived RNG stream, and
//! writes exactly one checkpoint or output file set.

use std::path::{Path, PathBuf};

use rgcd_core::checkpoint::{cm_blocks, Checkpoint};
use rgcd_core::cm::{default_tau_sequence, multistep_sample};
use rgcd_core::codec::train_codec_dims;
use rgcd_core::config::RunConfig;
use rgcd_core::dataset::{generate, Dataset};
use rgcd_core::distill::{distill_lcd, distill_rg_lcd, distill_rg_lcd_lrm, DistillOutcome};
use rgcd_core::error::{Error, Result};
use rgcd_core::eval::{append_metrics, run_eval};
use rgcd_core::lrm::pretrain_lrm;
use rgcd_core::reward::ExpertVariant;
use rgcd_core::schedule::NoiseSchedule;
use rgcd_core::teacher::{class_prior_conds, train_teacher};
use rgcd_core::{ParamSet, Rng, Tensor};

/// Per-stage RNG stream tags: changing one stage's iteration budget never
/// shifts another stage's draws.
const STREAM_DATA: u64 = 1;
const STREAM_CODEC: u64 = 2;
const STREAM_TEACHER: u64 = 3;
const STREAM_DISTILL: u64 = 4;
const STREAM_LRM: u64 = 5;
const STREAM_SAMPLE: u64 = 6;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DistillMode {
    Lcd,
    Rg,
    RgLrm,
}

impl DistillMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            DistillMode::Lcd => "lcd",
            DistillMode::Rg => "rg",
            DistillMode::RgLrm => "rg-lrm",
        }
    }
}

impl std::str::FromStr for DistillMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "lcd" => Ok(DistillMode::Lcd),
            "rg" => Ok(DistillMode::Rg),
            "rg-lrm" => Ok(DistillMode::RgLrm),
            other => Err(Error::invalid(
                "--mode",
                format!("unknown mode `{other}` (expected lcd, rg or rg-lrm)"),
            )),
        }
    }
}

pub fn codec_path(out: &Path) -> PathBuf {
    out.join("codec.ckpt")
}

pub fn teacher_path(out: &Path) -> PathBuf {
    out.join("teacher.ckpt")
}

pub fn lrm_path(out: &Path) -> PathBuf {
    out.join("lrm.ckpt")
}

pub fn cm_path(out: &Path, mode: DistillMode) -> PathBuf {
    out.join(format!("cm-{}.ckpt", mode.as_str()))
}

fn require(path: &Path, stage: &str) -> Result<Checkpoint> {
    if !path.exists() {
        return Err(Error::MissingStage {
            stage: stage.to_string(),
            path: path.display().to_string(),
        });
    }
    Checkpoint::load(path)
}

fn train_data(cfg: &RunConfig) -> Dataset {
    let mut rng = Rng::derive(cfg.seed, STREAM_DATA);
    generate(cfg.preset, cfg.d_x, cfg.n_classes, cfg.n_train, &mut rng)
}

fn heldout_data(cfg: &RunConfig) -> Dataset {
    let mut rng = Rng::derive(cfg.seed, STREAM_DATA);
    // skip past the training draws so held-out samples are fresh
    let _ = generate(cfg.preset, cfg.d_x, cfg.n_classes, cfg.n_train, &mut rng);
    generate(cfg.preset, cfg.d_x, cfg.n_classes, cfg.n_heldout, &mut rng)
}

pub fn run_pretrain_codec(cfg: &RunConfig, out: &Path) -> Result<PathBuf> {
    let data = train_data(cfg);
    let heldout = heldout_data(cfg);
    let mut rng = Rng::derive(cfg.seed, STREAM_CODEC);
    let (codec, trace) = train_codec_dims(
        &data,
        &heldout,
        cfg.d_x,
        cfg.d_z,
        &cfg.codec_hyper(),
        &mut rng,
    )?;
    log::info!(
        "codec pretrained: recon {:.6} -> {:.6}",
        trace.first_loss().unwrap_or(f64::NAN),
        trace.last_loss().unwrap_or(f64::NAN)
    );
    let mut ckpt = Checkpoint::new(cfg.clone(), cfg.codec_iters, rng.state());
    ckpt.insert_block("codec.", &codec.params);
    let path = codec_path(out);
    ckpt.save(&path)?;
    Ok(path)
}

pub fn run_pretrain_teacher(cfg: &RunConfig, out: &Path) -> Result<PathBuf> {
    let codec = require(&codec_path(out), "pretrain-codec")?.codec()?;
    let data = train_data(cfg);
    let latents = codec.encode_dataset(&data)?;
    let sched = NoiseSchedule::build(cfg.sched_n, cfg.b_min, cfg.b_max)?;
    let mut rng = Rng::derive(cfg.seed, STREAM_TEACHER);
    let (teacher, trace) = train_teacher(
        &latents,
        &sched,
        cfg.d_z,
        cfg.n_classes,
        &cfg.teacher_hyper(),
        &mut rng,
    )?;
    log::info!(
        "teacher pretrained: loss {:.4} -> {:.4}",
        trace.first_loss().unwrap_or(f64::NAN),
        trace.last_loss().unwrap_or(f64::NAN)
    );
    let mut ckpt = Checkpoint::new(cfg.clone(), cfg.teacher_iters, rng.state());
    ckpt.insert_block("teacher.", &teacher.params);
    let path = teacher_path(out);
    ckpt.save(&path)?;
    Ok(path)
}

pub fn run_pretrain_lrm(cfg: &RunConfig, out: &Path) -> Result<PathBuf> {
    let codec = require(&codec_path(out), "pretrain-codec")?.codec()?;
    let data = train_data(cfg);
    let latents = codec.encode_dataset(&data)?;
    let mut rng = Rng::derive(cfg.seed, STREAM_LRM);
    let (lrm, trace) = pretrain_lrm(&codec, &latents, cfg.n_classes, &cfg.lrm_hyper(), &mut rng)?;
    log::info!(
        "lrm pretrained: contrastive loss {:.4} -> {:.4}",
        trace.first_loss().unwrap_or(f64::NAN),
        trace.last_loss().unwrap_or(f64::NAN)
    );
    let mut ckpt = Checkpoint::new(cfg.clone(), cfg.lrm_pretrain_iters, rng.state());
    ckpt.insert_block("lrm.", &lrm.params);
    let path = lrm_path(out);
    ckpt.save(&path)?;
    Ok(path)
}

pub fn run_distill(cfg: &RunConfig, out: &Path, mode: DistillMode) -> Result<PathBuf> {
    let codec = require(&codec_path(out), "pretrain-codec")?.codec()?;
    let teacher = require(&teacher_path(out), "pretrain-teacher")?.teacher()?;
    let data = train_data(cfg);
    let latents = codec.encode_dataset(&data)?;
    let sched = NoiseSchedule::build(cfg.sched_n, cfg.b_min, cfg.b_max)?;
    let hyper = cfg.cm_hyper();
    let beta = cfg.resolved_beta();
    let mut rng = Rng::derive(cfg.seed, STREAM_DISTILL);

    let outcome: DistillOutcome = match mode {
        DistillMode::Lcd => distill_lcd(&teacher, &latents, &sched, &hyper, &mut rng)?,
        DistillMode::Rg => {
            let rm = Checkpoint::new(cfg.clone(), 0, 0).expert_rm();
            distill_rg_lcd(
                &teacher, &codec, &rm, beta, &latents, &sched, &hyper, &mut rng,
            )?
        }
        DistillMode::RgLrm => {
            let rm = Checkpoint::new(cfg.clone(), 0, 0).expert_rm();
            let lrm0 = require(&lrm_path(out), "pretrain-lrm")?.latent_rm()?;
            distill_rg_lcd_lrm(
                &teacher,
                &codec,
                &rm,
                &lrm0,
                beta,
                &latents,
                &sched,
                &hyper,
                &cfg.lrm_hyper(),
                &mut rng,
            )?
        }
    };
    log::info!(
        "distill {} done: loss {:.4} -> {:.4}",
        mode.as_str(),
        outcome.trace.first_loss().unwrap_or(f64::NAN),
        outcome.trace.last_loss().unwrap_or(f64::NAN)
    );

    let mut run_cfg = cfg.clone();
    run_cfg.run_id = format!("{}-{}-beta{}", cfg.run_id, mode.as_str(), beta);
    let mut ckpt = Checkpoint::new(run_cfg, hyper.iters, rng.state());
    cm_blocks(&mut ckpt, &outcome.cm, &outcome.ema_params);
    if let Some(lrm) = &outcome.lrm {
        ckpt.insert_block("lrm.", &lrm.params);
    }
    if mode != DistillMode::Lcd && cfg.reward_variant == ExpertVariant::Projection {
        let rm = Checkpoint::new(cfg.clone(), 0, 0).expert_rm();
        let mut basis = ParamSet::new();
        basis.insert("basis", rm.basis.expect("projection basis"));
        ckpt.insert_block("reward.", &basis);
    }
    let path = cm_path(out, mode);
    ckpt.save(&path)?;
    Ok(path)
}

pub fn run_sample(cfg: &RunConfig, out: &Path, mode: DistillMode, steps: usize) -> Result<PathBuf> {
    let ckpt = require(&cm_path(out, mode), "distill")?;
    let codec = require(&codec_path(out), "pretrain-codec")?.codec()?;
    let cm = ckpt.consistency_model()?;
    let sched = NoiseSchedule::build(cfg.sched_n, cfg.b_min, cfg.b_max)?;
    let conds = class_prior_conds(cfg.eval_n_samples, cfg.n_classes);
    let taus = default_tau_sequence(sched.len(), steps);
    let seed = Rng::derive(cfg.seed, STREAM_SAMPLE ^ (steps as u64) << 8).state();
    let z = multistep_sample(&cm, &sched, &taus, cfg.eval_omega(), &conds, seed)?;
    let x = codec.decode(&z)?;

    let path = out.join(format!("samples_{steps}.csv"));
    let mut text = String::from("class");
    for d in 0..cfg.d_x {
        text.push_str(&format!(",x{d}"));
    }
    text.push('\n');
    for i in 0..x.rows() {
        let class = match conds[i] {
            rgcd_core::teacher::Condition::Class(c) => c,
            rgcd_core::teacher::Condition::Null => usize::MAX,
        };
        text.push_str(&class.to_string());
        for v in x.row(i) {
            text.push_str(&format!(",{v}"));
        }
        text.push('\n');
    }
    std::fs::write(&path, text)?;
    Ok(path)
}

pub fn run_eval_cmd(cfg: &RunConfig, out: &Path, mode: DistillMode) -> Result<PathBuf> {
    let ckpt = require(&cm_path(out, mode), "distill")?;
    let codec_ckpt = require(&codec_path(out), "pretrain-codec")?;
    let records = run_eval(&ckpt, &codec_ckpt)?;
    for r in &records {
        log::info!(
            "eval {}: sw {:.4} reward {:.4} oos {:.3} gap {:.4}",
            r.run_id,
            r.sliced_wasserstein,
            r.mean_expert_reward,
            r.oos_energy_ratio,
            r.self_consistency_gap
        );
    }
    let path = out.join("metrics.csv");
    append_metrics(&path, &records)?;
    Ok(path)
}

/// Regenerate the evaluation reference set (same stream as `run_eval`) for
/// the plot overlay.
pub fn eval_reference(cfg: &RunConfig) -> Dataset {
    let mut rng = Rng::derive(cfg.seed, 0xE7A1);
    generate(cfg.preset, cfg.d_x, cfg.n_classes, cfg.eval_n_samples, &mut rng)
}

pub fn load_samples_csv(path: &Path) -> Result<(Vec<usize>, Vec<Vec<f64>>)> {
    let text = std::fs::read_to_string(path)?;
    let mut classes = Vec::new();
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if i == 0 {
            continue;
        }
        let mut parts = line.split(',');
        let class: usize = parts
            .next()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::invalid("samples csv", format!("bad class on line {i}")))?;
        let coords: Vec<f64> = parts
            .map(|s| {
                s.parse()
                    .map_err(|_| Error::invalid("samples csv", format!("bad float on line {i}")))
            })
            .collect::<Result<_>>()?;
        classes.push(class);
        rows.push(coords);
    }
    Ok((classes, rows))
}

/// The `Tensor` import is used by downstream helpers.
pub type SampleMatrix = Tensor;
