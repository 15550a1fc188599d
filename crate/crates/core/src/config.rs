//! Flat key=value run configuration with dotted section prefixes.
//!
//! Every knob has a documented default; an empty file is a valid config.
//! Unknown keys and out-of-range values are rejected at load time with the
//! offending key named. `to_canonical_string` emits keys in a fixed order
//! with shortest-roundtrip float formatting, so configs embedded in
//! checkpoints reproduce byte-identically.

use std::fmt::Write as _;
use std::path::Path;

use crate::codec::CodecHyper;
use crate::dataset::Preset;
use crate::distill::CmHyper;
use crate::lrm::LrmHyper;
use crate::reward::ExpertVariant;
use crate::teacher::TeacherHyper;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub run_id: String,
    pub seed: u64,

    pub preset: Preset,
    pub n_train: usize,
    pub n_heldout: usize,

    pub d_x: usize,
    pub d_z: usize,
    pub n_classes: usize,

    pub sched_n: usize,
    pub b_min: f64,
    pub b_max: f64,

    pub teacher_hidden: usize,
    pub teacher_iters: u64,
    pub teacher_lr: f64,
    pub teacher_batch: usize,
    pub p_uncond: f64,

    pub codec_hidden: usize,
    pub codec_iters: u64,
    pub codec_lr: f64,
    pub codec_recon_tol: f64,

    pub sigma_data: f64,
    pub huber_c: f64,
    pub k: usize,
    pub mu_ema: f64,
    pub omega_min: f64,
    pub omega_max: f64,
    pub cm_iters: u64,
    pub cm_lr: f64,
    pub cm_lr_final: f64,
    pub cm_batch: usize,

    pub reward_variant: ExpertVariant,
    /// None means "resolve from the variant family" (5.0 for the
    /// alignment-style experts, 1.0 for preference-style).
    pub beta: Option<f64>,
    pub d_vis: usize,
    /// None means "use d_x".
    pub reward_scale: Option<f64>,
    /// Radial stretch applied to the expert class targets.
    pub target_stretch: f64,

    pub lrm_hidden: usize,
    pub lrm_embed_dim: usize,
    pub tau_l: f64,
    pub tau_e: f64,
    pub eps_real: f64,
    pub lrm_lr: f64,
    pub lrm_batch: usize,
    pub lrm_pretrain_iters: u64,
    pub lrm_pretrain_lr: f64,
    pub lrm_pretrain_batch: usize,
    pub lrm_pretrain_noise: f64,
    pub lrm_contrastive_scale: f64,
    pub lrm_reward_scale: f64,

    pub eval_n_proj: usize,
    pub eval_n_samples: usize,
    pub eval_steps: Vec<usize>,
    pub eval_gap_pairs: usize,
    pub eval_threads: usize,

    pub log_every: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            run_id: "run".into(),
            seed: 0,
            preset: Preset::Mixture2d,
            n_train: 2048,
            n_heldout: 512,
            d_x: 16,
            d_z: 4,
            n_classes: 4,
            sched_n: 50,
            b_min: 2e-3,
            b_max: 0.3,
            teacher_hidden: 64,
            teacher_iters: 5000,
            teacher_lr: 2e-3,
            teacher_batch: 32,
            p_uncond: 0.1,
            codec_hidden: 32,
            codec_iters: 2000,
            codec_lr: 3e-3,
            codec_recon_tol: 0.1,
            sigma_data: 0.5,
            huber_c: 0.02,
            k: 5,
            mu_ema: 0.95,
            omega_min: 0.0,
            omega_max: 2.0,
            cm_iters: 8000,
            cm_lr: 2e-3,
            cm_lr_final: 2e-4,
            cm_batch: 32,
            reward_variant: ExpertVariant::Aligned,
            beta: None,
            d_vis: 8,
            reward_scale: None,
            target_stretch: 1.5,
            lrm_hidden: 32,
            lrm_embed_dim: 16,
            tau_l: 1.0,
            tau_e: 1.0,
            eps_real: 0.5,
            lrm_lr: 1e-4,
            lrm_batch: 16,
            lrm_pretrain_iters: 1500,
            lrm_pretrain_lr: 2e-3,
            lrm_pretrain_batch: 32,
            lrm_pretrain_noise: 1.0,
            lrm_contrastive_scale: 10.0,
            lrm_reward_scale: 5.0,
            eval_n_proj: 64,
            eval_n_samples: 2048,
            eval_steps: vec![2, 4],
            eval_gap_pairs: 256,
            eval_threads: 1,
            log_every: 100,
        }
    }
}

impl RunConfig {
    /// Reward weight: explicit value, or the variant-family default
    /// (5.0 for alignment-style experts, 1.0 for preference-style).
    pub fn resolved_beta(&self) -> f64 {
        self.beta.unwrap_or(match self.reward_variant {
            ExpertVariant::Aligned | ExpertVariant::Projection => 5.0,
            ExpertVariant::PreferenceOnly => 1.0,
        })
    }

    pub fn resolved_reward_scale(&self) -> f64 {
        self.reward_scale.unwrap_or(self.d_x as f64)
    }

    /// Guidance scale used for evaluation sampling: the range midpoint.
    pub fn eval_omega(&self) -> f64 {
        0.5 * (self.omega_min + self.omega_max)
    }

    pub fn teacher_hyper(&self) -> TeacherHyper {
        TeacherHyper {
            hidden: self.teacher_hidden,
            iters: self.teacher_iters,
            lr: self.teacher_lr,
            batch: self.teacher_batch,
            p_uncond: self.p_uncond,
            log_every: self.log_every,
        }
    }

    pub fn codec_hyper(&self) -> CodecHyper {
        CodecHyper {
            hidden: self.codec_hidden,
            iters: self.codec_iters,
            lr: self.codec_lr,
            log_every: self.log_every,
            recon_tol: self.codec_recon_tol,
        }
    }

    pub fn cm_hyper(&self) -> CmHyper {
        CmHyper {
            sigma_data: self.sigma_data,
            huber_c: self.huber_c,
            k: self.k,
            mu_ema: self.mu_ema,
            omega_min: self.omega_min,
            omega_max: self.omega_max,
            iters: self.cm_iters,
            lr: self.cm_lr,
            lr_final: self.cm_lr_final,
            batch: self.cm_batch,
            log_every: self.log_every,
        }
    }

    pub fn lrm_hyper(&self) -> LrmHyper {
        LrmHyper {
            hidden: self.lrm_hidden,
            embed_dim: self.lrm_embed_dim,
            tau_l: self.tau_l,
            tau_e: self.tau_e,
            eps_real: self.eps_real,
            lr_finetune: self.lrm_lr,
            batch: self.lrm_batch,
            pretrain_iters: self.lrm_pretrain_iters,
            pretrain_lr: self.lrm_pretrain_lr,
            pretrain_batch: self.lrm_pretrain_batch,
            pretrain_noise: self.lrm_pretrain_noise,
            contrastive_scale: self.lrm_contrastive_scale,
            reward_scale: self.lrm_reward_scale,
            log_every: self.log_every,
        }
    }

    /// Canonical text form: every key, fixed order, Display floats.
    pub fn to_canonical_string(&self) -> String {
        let mut s = String::new();
        let steps = self
            .eval_steps
            .iter()
            .map(|v| v.to_string())
            .collect::<Vec<_>>()
            .join(",");
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k}={v}");
        };
        kv("run.id", self.run_id.clone());
        kv("seed", self.seed.to_string());
        kv("dataset.preset", self.preset.to_string());
        kv("dataset.n_train", self.n_train.to_string());
        kv("dataset.n_heldout", self.n_heldout.to_string());
        kv("dims.d_x", self.d_x.to_string());
        kv("dims.d_z", self.d_z.to_string());
        kv("dims.classes", self.n_classes.to_string());
        kv("schedule.n", self.sched_n.to_string());
        kv("schedule.b_min", self.b_min.to_string());
        kv("schedule.b_max", self.b_max.to_string());
        kv("teacher.hidden", self.teacher_hidden.to_string());
        kv("teacher.iters", self.teacher_iters.to_string());
        kv("teacher.lr", self.teacher_lr.to_string());
        kv("teacher.batch", self.teacher_batch.to_string());
        kv("teacher.p_uncond", self.p_uncond.to_string());
        kv("codec.hidden", self.codec_hidden.to_string());
        kv("codec.iters", self.codec_iters.to_string());
        kv("codec.lr", self.codec_lr.to_string());
        kv("codec.recon_tol", self.codec_recon_tol.to_string());
        kv("cm.sigma_data", self.sigma_data.to_string());
        kv("cm.huber_c", self.huber_c.to_string());
        kv("cm.k", self.k.to_string());
        kv("cm.mu_ema", self.mu_ema.to_string());
        kv("cm.omega_min", self.omega_min.to_string());
        kv("cm.omega_max", self.omega_max.to_string());
        kv("cm.iters", self.cm_iters.to_string());
        kv("cm.lr", self.cm_lr.to_string());
        kv("cm.lr_final", self.cm_lr_final.to_string());
        kv("cm.batch", self.cm_batch.to_string());
        kv("reward.variant", self.reward_variant.to_string());
        if let Some(beta) = self.beta {
            kv("reward.beta", beta.to_string());
        }
        kv("reward.d_vis", self.d_vis.to_string());
        kv("reward.target_stretch", self.target_stretch.to_string());
        if let Some(scale) = self.reward_scale {
            kv("reward.scale", scale.to_string());
        }
        kv("lrm.hidden", self.lrm_hidden.to_string());
        kv("lrm.embed_dim", self.lrm_embed_dim.to_string());
        kv("lrm.tau_l", self.tau_l.to_string());
        kv("lrm.tau_e", self.tau_e.to_string());
        kv("lrm.eps_real", self.eps_real.to_string());
        kv("lrm.lr", self.lrm_lr.to_string());
        kv("lrm.batch", self.lrm_batch.to_string());
        kv("lrm.pretrain_iters", self.lrm_pretrain_iters.to_string());
        kv("lrm.pretrain_lr", self.lrm_pretrain_lr.to_string());
        kv("lrm.pretrain_batch", self.lrm_pretrain_batch.to_string());
        kv("lrm.pretrain_noise", self.lrm_pretrain_noise.to_string());
        kv(
            "lrm.contrastive_scale",
            self.lrm_contrastive_scale.to_string(),
        );
        kv("lrm.reward_scale", self.lrm_reward_scale.to_string());
        kv("eval.n_proj", self.eval_n_proj.to_string());
        kv("eval.n_samples", self.eval_n_samples.to_string());
        kv("eval.steps", steps);
        kv("eval.gap_pairs", self.eval_gap_pairs.to_string());
        kv("eval.threads", self.eval_threads.to_string());
        kv("log.every", self.log_every.to_string());
        s
    }

    pub fn parse(text: &str) -> Result<RunConfig> {
        let mut cfg = RunConfig::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| Error::ConfigParse {
                line: lineno + 1,
                message: format!("expected key=value, got `{line}`"),
            })?;
            cfg.apply(key.trim(), value.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path)?;
        Self::parse(&text)
    }

    fn apply(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
            value.parse().map_err(|_| Error::ConfigRange {
                key: key.into(),
                message: format!("cannot parse `{value}`"),
                allowed: std::any::type_name::<T>().into(),
            })
        }
        match key {
            "run.id" => self.run_id = value.to_string(),
            "seed" => self.seed = num(key, value)?,
            "dataset.preset" => self.preset = value.parse()?,
            "dataset.n_train" => self.n_train = num(key, value)?,
            "dataset.n_heldout" => self.n_heldout = num(key, value)?,
            "dims.d_x" => self.d_x = num(key, value)?,
            "dims.d_z" => self.d_z = num(key, value)?,
            "dims.classes" => self.n_classes = num(key, value)?,
            "schedule.n" => self.sched_n = num(key, value)?,
            "schedule.b_min" => self.b_min = num(key, value)?,
            "schedule.b_max" => self.b_max = num(key, value)?,
            "teacher.hidden" => self.teacher_hidden = num(key, value)?,
            "teacher.iters" => self.teacher_iters = num(key, value)?,
            "teacher.lr" => self.teacher_lr = num(key, value)?,
            "teacher.batch" => self.teacher_batch = num(key, value)?,
            "teacher.p_uncond" => self.p_uncond = num(key, value)?,
            "codec.hidden" => self.codec_hidden = num(key, value)?,
            "codec.iters" => self.codec_iters = num(key, value)?,
            "codec.lr" => self.codec_lr = num(key, value)?,
            "codec.recon_tol" => self.codec_recon_tol = num(key, value)?,
            "cm.sigma_data" => self.sigma_data = num(key, value)?,
            "cm.huber_c" => self.huber_c = num(key, value)?,
            "cm.k" => self.k = num(key, value)?,
            "cm.mu_ema" => self.mu_ema = num(key, value)?,
            "cm.omega_min" => self.omega_min = num(key, value)?,
            "cm.omega_max" => self.omega_max = num(key, value)?,
            "cm.iters" => self.cm_iters = num(key, value)?,
            "cm.lr" => self.cm_lr = num(key, value)?,
            "cm.lr_final" => self.cm_lr_final = num(key, value)?,
            "cm.batch" => self.cm_batch = num(key, value)?,
            "reward.variant" => self.reward_variant = value.parse()?,
            "reward.beta" => self.beta = Some(num(key, value)?),
            "reward.d_vis" => self.d_vis = num(key, value)?,
            "reward.target_stretch" => self.target_stretch = num(key, value)?,
            "reward.scale" => self.reward_scale = Some(num(key, value)?),
            "lrm.hidden" => self.lrm_hidden = num(key, value)?,
            "lrm.embed_dim" => self.lrm_embed_dim = num(key, value)?,
            "lrm.tau_l" => self.tau_l = num(key, value)?,
            "lrm.tau_e" => self.tau_e = num(key, value)?,
            "lrm.eps_real" => self.eps_real = num(key, value)?,
            "lrm.lr" => self.lrm_lr = num(key, value)?,
            "lrm.batch" => self.lrm_batch = num(key, value)?,
            "lrm.pretrain_iters" => self.lrm_pretrain_iters = num(key, value)?,
            "lrm.pretrain_lr" => self.lrm_pretrain_lr = num(key, value)?,
            "lrm.pretrain_batch" => self.lrm_pretrain_batch = num(key, value)?,
            "lrm.pretrain_noise" => self.lrm_pretrain_noise = num(key, value)?,
            "lrm.contrastive_scale" => self.lrm_contrastive_scale = num(key, value)?,
            "lrm.reward_scale" => self.lrm_reward_scale = num(key, value)?,
            "eval.n_proj" => self.eval_n_proj = num(key, value)?,
            "eval.n_samples" => self.eval_n_samples = num(key, value)?,
            "eval.steps" => {
                let mut steps = Vec::new();
                for part in value.split(',') {
                    steps.push(num("eval.steps", part.trim())?);
                }
                self.eval_steps = steps;
            }
            "eval.gap_pairs" => self.eval_gap_pairs = num(key, value)?,
            "eval.threads" => self.eval_threads = num(key, value)?,
            "log.every" => self.log_every = num(key, value)?,
            other => {
                return Err(Error::UnknownConfigKey { key: other.into() });
            }
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        fn check(ok: bool, key: &str, message: &str, allowed: &str) -> Result<()> {
            if ok {
                Ok(())
            } else {
                Err(Error::ConfigRange {
                    key: key.into(),
                    message: message.into(),
                    allowed: allowed.into(),
                })
            }
        }
        check(self.n_train > 0, "dataset.n_train", "must be positive", ">= 1")?;
        check(self.n_heldout > 0, "dataset.n_heldout", "must be positive", ">= 1")?;
        check(self.d_x >= 2, "dims.d_x", "too small", ">= 2")?;
        check(
            self.d_z >= 1 && self.d_z < self.d_x,
            "dims.d_z",
            "latent width must compress",
            "1 <= d_z < d_x",
        )?;
        check(self.n_classes >= 2, "dims.classes", "need several classes", ">= 2")?;
        check(self.sched_n >= 2, "schedule.n", "grid too short", ">= 2")?;
        check(
            self.b_min > 0.0 && self.b_min <= self.b_max && self.b_max < 1.0,
            "schedule.b_min",
            "b range invalid",
            "0 < b_min <= b_max < 1",
        )?;
        check(
            (0.0..=1.0).contains(&self.p_uncond),
            "teacher.p_uncond",
            "dropout probability out of range",
            "[0, 1]",
        )?;
        check(
            self.k >= 1 && self.k < self.sched_n,
            "cm.k",
            "skipping interval must leave a grid offset (n ~ U[1, N-k])",
            "1 <= k <= N-1",
        )?;
        check(
            (0.0..=1.0).contains(&self.mu_ema),
            "cm.mu_ema",
            "EMA rate out of range",
            "[0, 1]",
        )?;
        check(
            self.omega_min <= self.omega_max,
            "cm.omega_min",
            "guidance range inverted",
            "omega_min <= omega_max",
        )?;
        check(self.sigma_data > 0.0, "cm.sigma_data", "must be positive", "> 0")?;
        check(self.huber_c > 0.0, "cm.huber_c", "must be positive", "> 0")?;
        if let Some(beta) = self.beta {
            check(
                beta >= 0.0 && beta.is_finite(),
                "reward.beta",
                "must be a finite non-negative number",
                ">= 0",
            )?;
        }
        check(
            self.d_vis >= 1 && self.d_vis <= self.d_x,
            "reward.d_vis",
            "visible subspace rank out of range",
            "1 <= d_vis <= d_x",
        )?;
        if let Some(scale) = self.reward_scale {
            check(scale > 0.0, "reward.scale", "must be positive", "> 0")?;
        }
        check(
            self.target_stretch > 0.0 && self.target_stretch.is_finite(),
            "reward.target_stretch",
            "must be a positive finite factor",
            "> 0",
        )?;
        check(
            self.lrm_pretrain_noise >= 0.0,
            "lrm.pretrain_noise",
            "must be non-negative",
            ">= 0",
        )?;
        check(self.tau_l > 0.0, "lrm.tau_l", "temperature must be positive", "> 0")?;
        check(self.tau_e > 0.0, "lrm.tau_e", "temperature must be positive", "> 0")?;
        check(self.eps_real >= 0.0, "lrm.eps_real", "bias must be non-negative", ">= 0")?;
        check(
            !self.eval_steps.is_empty() && self.eval_steps.iter().all(|&s| s >= 1),
            "eval.steps",
            "need at least one positive step count",
            "comma list of >= 1",
        )?;
        check(self.eval_threads >= 1, "eval.threads", "need a worker", ">= 1")?;
        check(self.log_every >= 1, "log.every", "must be positive", ">= 1")?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_text_gives_defaults() {
        let cfg = RunConfig::parse("").unwrap();
        assert_eq!(cfg, RunConfig::default());
    }

    #[test]
    fn comments_and_blanks_are_ignored() {
        let cfg = RunConfig::parse("# comment\n\nseed=9\n").unwrap();
        assert_eq!(cfg.seed, 9);
    }

    #[test]
    fn unknown_key_is_rejected_by_name() {
        let err = RunConfig::parse("bogus.key=1").unwrap_err();
        assert!(err.to_string().contains("bogus.key"), "{err}");
    }

    #[test]
    fn k_at_least_grid_length_is_rejected() {
        let err = RunConfig::parse("schedule.n=50\ncm.k=50").unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("cm.k"), "{msg}");
    }

    #[test]
    fn negative_beta_is_rejected() {
        let err = RunConfig::parse("reward.beta=-1").unwrap_err();
        assert!(err.to_string().contains("reward.beta"), "{err}");
    }

    #[test]
    fn beta_defaults_follow_variant_family() {
        let aligned = RunConfig::parse("reward.variant=aligned").unwrap();
        assert_eq!(aligned.resolved_beta(), 5.0);
        let projection = RunConfig::parse("reward.variant=projection").unwrap();
        assert_eq!(projection.resolved_beta(), 5.0);
        let pref = RunConfig::parse("reward.variant=preference-only").unwrap();
        assert_eq!(pref.resolved_beta(), 1.0);
        let explicit = RunConfig::parse("reward.beta=2.5").unwrap();
        assert_eq!(explicit.resolved_beta(), 2.5);
    }

    #[test]
    fn canonical_roundtrip_is_stable() {
        let cfg = RunConfig::parse("seed=3\ncm.lr=0.00017\neval.steps=1,2,4").unwrap();
        let text = cfg.to_canonical_string();
        let back = RunConfig::parse(&text).unwrap();
        assert_eq!(cfg, back);
        assert_eq!(text, back.to_canonical_string());
    }

    #[test]
    fn eval_steps_parse_as_list() {
        let cfg = RunConfig::parse("eval.steps=1, 2, 8").unwrap();
        assert_eq!(cfg.eval_steps, vec![1, 2, 8]);
    }
}
