//! Distillation training loops.
//!
//! One engine drives all three regimes. Each iteration draws a batch of
//! (latent, class) pairs, per-sample grid offsets n ~ U[1, N-k], guidance
//! scales w ~ U[w_min, w_max] and Gaussian noise, then:
//!
//! 1. perturbs the latents to t_{n+k},
//! 2. advances one guided DDIM step with the frozen teacher to estimate
//!    z_{t_n} (values only, never differentiated),
//! 3. maps that estimate through the EMA target to get the distillation
//!    target,
//! 4. minimizes the pseudo-Huber distance between the student's origin
//!    estimate and the target, minus `beta` times a reward on the student's
//!    single-step output when a reward term is configured,
//! 5. Adam-steps the student and refreshes the EMA target, and, in the
//!    proxy-reward regime, Adam-steps the latent RM on the preference-KL
//!    loss over the (real, student, target) triplet.
//!
//! Gradient routing is structural: the teacher, the EMA target, the decoder
//! and the expert are baked into the graphs as constants, so only the
//! student (and separately the latent RM) ever receive gradients.

use crate::autodiff::{adam_step, AdamParams, AdamState, Graph, ParamSet};
use crate::cm::{ema_update, mean_huber_node, ConsistencyModel};
use crate::codec::Codec;
use crate::lrm::{lrm_loss_graph, LatentRM, LrmHyper, PreferenceTriplet};
use crate::mlp::Binding;
use crate::reward::ExpertRM;
use crate::schedule::NoiseSchedule;
use crate::teacher::{Condition, TeacherModel};
use crate::train::{ensure_finite, TrainTrace};
use crate::{Error, Result, Rng, Tensor};

#[derive(Debug, Clone, Copy)]
pub struct CmHyper {
    pub sigma_data: f64,
    pub huber_c: f64,
    /// Skipping interval: the solver advances k grid steps per target.
    pub k: usize,
    pub mu_ema: f64,
    pub omega_min: f64,
    pub omega_max: f64,
    pub iters: u64,
    pub lr: f64,
    /// Learning rate at the final iteration (linear decay from `lr`).
    /// The pseudo-Huber gradient stays near unit norm at convergence, so
    /// without decay long runs random-walk away from the optimum.
    pub lr_final: f64,
    pub batch: usize,
    pub log_every: u64,
}

impl Default for CmHyper {
    fn default() -> Self {
        CmHyper {
            sigma_data: 0.5,
            huber_c: 0.02,
            k: 5,
            mu_ema: 0.95,
            omega_min: 0.0,
            omega_max: 2.0,
            iters: 8000,
            lr: 2e-3,
            lr_final: 2e-4,
            batch: 32,
            log_every: 100,
        }
    }
}

impl CmHyper {
    fn lr_at(&self, iter: u64) -> f64 {
        if self.iters <= 1 {
            return self.lr;
        }
        let t = iter as f64 / (self.iters - 1) as f64;
        self.lr + (self.lr_final - self.lr) * t
    }
}

/// What, if anything, the student's single-step output is rewarded with.
#[derive(Debug)]
pub enum RewardTerm<'a> {
    None,
    Expert {
        rm: &'a ExpertRM,
        codec: &'a Codec,
        beta: f64,
    },
    Lrm {
        lrm: &'a LatentRM,
        beta: f64,
    },
}

#[derive(Debug)]
pub struct DistillOutcome {
    pub cm: ConsistencyModel,
    pub ema_params: ParamSet,
    pub trace: TrainTrace,
    pub lrm: Option<LatentRM>,
    pub lrm_trace: Option<TrainTrace>,
}

struct BatchDraw {
    z_rows: Tensor,
    conds: Vec<Condition>,
    ns_lo: Vec<usize>,
    ns_hi: Vec<usize>,
    omegas: Vec<f64>,
    z_hi: Tensor,
}

fn validate_k(sched: &NoiseSchedule, k: usize) -> Result<()> {
    if k == 0 || sched.len() <= k {
        return Err(Error::ConfigRange {
            key: "cm.k".into(),
            message: format!("skipping interval {k} leaves no grid offset (N = {})", sched.len()),
            allowed: format!("1..={}", sched.len() - 1),
        });
    }
    Ok(())
}

/// Per-sample draw order: index, n, omega, noise. Shared verbatim by every
/// regime so that the beta = 0 reductions are bit-exact.
fn draw_batch(
    latents: &[(Tensor, usize)],
    sched: &NoiseSchedule,
    hyper: &CmHyper,
    d_z: usize,
    rng: &mut Rng,
) -> Result<BatchDraw> {
    let b = hyper.batch;
    let mut z_vals = Vec::with_capacity(b * d_z);
    let mut z_hi_vals = Vec::with_capacity(b * d_z);
    let mut conds = Vec::with_capacity(b);
    let mut ns_lo = Vec::with_capacity(b);
    let mut ns_hi = Vec::with_capacity(b);
    let mut omegas = Vec::with_capacity(b);
    for _ in 0..b {
        let idx = rng.uniform_usize(0, latents.len() - 1);
        let (z, class) = &latents[idx];
        let n = rng.uniform_usize(1, sched.len() - hyper.k);
        let omega = rng.uniform(hyper.omega_min, hyper.omega_max);
        let noise = rng.normal_vec(d_z);
        let n_hi = n + hyper.k;
        let (a, bta) = (sched.alpha(n_hi), sched.beta(n_hi));
        for d in 0..d_z {
            z_vals.push(z.values()[d]);
            z_hi_vals.push(a * z.values()[d] + bta * noise[d]);
        }
        conds.push(Condition::Class(*class));
        ns_lo.push(n);
        ns_hi.push(n_hi);
        omegas.push(omega);
    }
    Ok(BatchDraw {
        z_rows: Tensor::new(vec![b, d_z], z_vals)?,
        conds,
        ns_lo,
        ns_hi,
        omegas,
        z_hi: Tensor::new(vec![b, d_z], z_hi_vals)?,
    })
}

/// Guided one-step DDIM estimate of z_{t_n} for every row, with per-row
/// levels and guidance scales. Teacher evaluations are values only.
fn solve_targets(
    teacher: &TeacherModel,
    sched: &NoiseSchedule,
    batch: &BatchDraw,
) -> Result<Tensor> {
    let b = batch.conds.len();
    let d_z = teacher.d_z;
    let eps_c = teacher.predict(&batch.z_hi, &batch.conds, &batch.ns_hi)?;
    let nulls = vec![Condition::Null; b];
    let eps_n = teacher.predict(&batch.z_hi, &nulls, &batch.ns_hi)?;

    let mut out = Vec::with_capacity(b * d_z);
    for i in 0..b {
        let (n_hi, n_lo) = (batch.ns_hi[i], batch.ns_lo[i]);
        let (a_hi, a_lo) = (sched.alpha(n_hi), sched.alpha(n_lo));
        let (b_hi, b_lo) = (sched.beta(n_hi), sched.beta(n_lo));
        let scale_z = a_lo / a_hi - 1.0;
        let scale_eps = -(b_hi * a_lo / a_hi - b_lo);
        let w = batch.omegas[i];
        let z_row = batch.z_hi.row(i);
        let ec = eps_c.row(i);
        let en = eps_n.row(i);
        for d in 0..d_z {
            let psi_c = scale_z * z_row[d] + scale_eps * ec[d];
            let psi_n = scale_z * z_row[d] + scale_eps * en[d];
            out.push(z_row[d] + (1.0 + w) * psi_c - w * psi_n);
        }
    }
    Tensor::new(vec![b, d_z], out)
}

/// Build the student loss graph for a drawn batch. The target branch is a
/// constant; with a reward term the student's origin estimate feeds the
/// reward subgraph and `- beta * reward` joins the loss.
fn student_loss_graph(
    cm: &ConsistencyModel,
    target_rows: &Tensor,
    batch: &BatchDraw,
    huber_c: f64,
    reward: &RewardTerm,
) -> Result<Graph> {
    let mut g = Graph::new();
    let z_hi = g.constant(batch.z_hi.clone());
    let student = cm.apply_node(
        &mut g,
        z_hi,
        &batch.conds,
        &batch.ns_hi,
        &batch.omegas,
        &Binding::Trainable,
    )?;
    let target = g.constant(target_rows.clone());
    let lcd = mean_huber_node(&mut g, student, target, huber_c)?;

    let total = match reward {
        RewardTerm::None => lcd,
        RewardTerm::Expert { beta, .. } | RewardTerm::Lrm { beta, .. } if *beta == 0.0 => lcd,
        RewardTerm::Expert { rm, codec, beta } => {
            let decoded = codec.decode_node(&mut g, student, &Binding::Frozen(&codec.params))?;
            let mean_r = rm.mean_reward_node(&mut g, decoded, &batch.conds)?;
            let neg = g.mul_scalar(mean_r, -*beta);
            g.add(lcd, neg)?
        }
        RewardTerm::Lrm { lrm, beta } => {
            let rows = lrm.reward_rows_node(
                &mut g,
                student,
                &batch.conds,
                &Binding::Frozen(&lrm.params),
            )?;
            let mean_r = g.mean(rows);
            let neg = g.mul_scalar(mean_r, -*beta);
            g.add(lcd, neg)?
        }
    };
    g.set_output(total);
    Ok(g)
}

/// Standard LCD loss for one batch drawn from `rng` (forward value only).
pub fn lcd_loss(
    cm: &ConsistencyModel,
    ema_params: &ParamSet,
    teacher: &TeacherModel,
    latents: &[(Tensor, usize)],
    sched: &NoiseSchedule,
    hyper: &CmHyper,
    rng: &mut Rng,
) -> Result<f64> {
    loss_with_reward(cm, ema_params, teacher, latents, sched, hyper, rng, &RewardTerm::None)
}

/// Reward-guided LCD loss: `lcd - beta * mean expert reward` on the same
/// batch draw. With beta = 0 this is bit-for-bit `lcd_loss` under a shared
/// rng state.
#[allow(clippy::too_many_arguments)]
pub fn rg_lcd_loss(
    cm: &ConsistencyModel,
    ema_params: &ParamSet,
    teacher: &TeacherModel,
    codec: &Codec,
    rm: &ExpertRM,
    beta: f64,
    latents: &[(Tensor, usize)],
    sched: &NoiseSchedule,
    hyper: &CmHyper,
    rng: &mut Rng,
) -> Result<f64> {
    if !rm.is_differentiable() {
        return Err(Error::invalid(
            "rg_lcd_loss",
            "preference-only expert requires the latent proxy RM path",
        ));
    }
    if beta < 0.0 {
        return Err(Error::invalid("rg_lcd_loss", "beta must be non-negative"));
    }
    let term = RewardTerm::Expert { rm, codec, beta };
    loss_with_reward(cm, ema_params, teacher, latents, sched, hyper, rng, &term)
}

#[allow(clippy::too_many_arguments)]
fn loss_with_reward(
    cm: &ConsistencyModel,
    ema_params: &ParamSet,
    teacher: &TeacherModel,
    latents: &[(Tensor, usize)],
    sched: &NoiseSchedule,
    hyper: &CmHyper,
    rng: &mut Rng,
    reward: &RewardTerm,
) -> Result<f64> {
    validate_k(sched, hyper.k)?;
    let batch = draw_batch(latents, sched, hyper, cm.d_z, rng)?;
    let solved = solve_targets(teacher, sched, &batch)?;
    let target = cm.apply_with(ema_params, &solved, &batch.conds, &batch.ns_lo, &batch.omegas)?;
    let g = student_loss_graph(cm, &target, &batch, hyper.huber_c, reward)?;
    Ok(crate::autodiff::forward_eval(&g, &cm.params)?.item())
}

/// Plain latent consistency distillation.
pub fn distill_lcd(
    teacher: &TeacherModel,
    latents: &[(Tensor, usize)],
    sched: &NoiseSchedule,
    hyper: &CmHyper,
    rng: &mut Rng,
) -> Result<DistillOutcome> {
    run(teacher, latents, sched, hyper, rng, RewardSpec::None)
}

/// Reward-guided distillation against a differentiable expert.
pub fn distill_rg_lcd(
    teacher: &TeacherModel,
    codec: &Codec,
    rm: &ExpertRM,
    beta: f64,
    latents: &[(Tensor, usize)],
    sched: &NoiseSchedule,
    hyper: &CmHyper,
    rng: &mut Rng,
) -> Result<DistillOutcome> {
    if !rm.is_differentiable() {
        return Err(Error::invalid(
            "distill_rg_lcd",
            "preference-only expert requires --mode rg-lrm",
        ));
    }
    run(
        teacher,
        latents,
        sched,
        hyper,
        rng,
        RewardSpec::Expert { rm, codec, beta },
    )
}

/// Reward-guided distillation through a latent proxy RM, finetuned online
/// to match the expert's preferences (two optimizers, two learning rates).
#[allow(clippy::too_many_arguments)]
pub fn distill_rg_lcd_lrm(
    teacher: &TeacherModel,
    codec: &Codec,
    rm: &ExpertRM,
    lrm_init: &LatentRM,
    beta: f64,
    latents: &[(Tensor, usize)],
    sched: &NoiseSchedule,
    hyper: &CmHyper,
    lrm_hyper: &LrmHyper,
    rng: &mut Rng,
) -> Result<DistillOutcome> {
    run(
        teacher,
        latents,
        sched,
        hyper,
        rng,
        RewardSpec::Lrm {
            rm,
            codec,
            lrm_init,
            beta,
            lrm_hyper,
        },
    )
}

enum RewardSpec<'a> {
    None,
    Expert {
        rm: &'a ExpertRM,
        codec: &'a Codec,
        beta: f64,
    },
    Lrm {
        rm: &'a ExpertRM,
        codec: &'a Codec,
        lrm_init: &'a LatentRM,
        beta: f64,
        lrm_hyper: &'a LrmHyper,
    },
}

fn run(
    teacher: &TeacherModel,
    latents: &[(Tensor, usize)],
    sched: &NoiseSchedule,
    hyper: &CmHyper,
    rng: &mut Rng,
    spec: RewardSpec,
) -> Result<DistillOutcome> {
    validate_k(sched, hyper.k)?;
    if latents.is_empty() {
        return Err(Error::invalid("distill", "empty latent dataset"));
    }
    let mut cm = ConsistencyModel::from_teacher(teacher, hyper.sigma_data);
    let mut ema_params = cm.params.clone();
    let mut state = AdamState::new(&cm.params);
    let mut trace = TrainTrace::default();

    let mut lrm = match &spec {
        RewardSpec::Lrm { lrm_init, .. } => Some((*lrm_init).clone()),
        _ => None,
    };
    let mut lrm_state = lrm.as_ref().map(|l| AdamState::new(&l.params));
    let mut lrm_trace = TrainTrace::default();

    for iter in 0..hyper.iters {
        let batch = draw_batch(latents, sched, hyper, cm.d_z, rng)?;
        let solved = solve_targets(teacher, sched, &batch)?;
        let target =
            cm.apply_with(&ema_params, &solved, &batch.conds, &batch.ns_lo, &batch.omegas)?;

        let reward = match &spec {
            RewardSpec::None => RewardTerm::None,
            RewardSpec::Expert { rm, codec, beta } => RewardTerm::Expert {
                rm,
                codec,
                beta: *beta,
            },
            RewardSpec::Lrm { beta, .. } => RewardTerm::Lrm {
                lrm: lrm.as_ref().expect("lrm present in lrm mode"),
                beta: *beta,
            },
        };
        let g = student_loss_graph(&cm, &target, &batch, hyper.huber_c, &reward)?;
        let (loss, grads) = crate::autodiff::eval_with_grads(&g, &cm.params)?;
        let loss_name = match &spec {
            RewardSpec::None => "lcd",
            RewardSpec::Expert { .. } => "rg-lcd",
            RewardSpec::Lrm { .. } => "rg-lcd-lrm",
        };
        ensure_finite(loss, loss_name, iter)?;

        // the triplet reads the pre-update student, as in the joint loss
        let student_rows = match &spec {
            RewardSpec::Lrm { .. } => Some(cm.apply(
                &batch.z_hi,
                &batch.conds,
                &batch.ns_hi,
                &batch.omegas,
            )?),
            _ => None,
        };

        adam_step(
            &mut cm.params,
            &grads,
            &mut state,
            &AdamParams::with_lr(hyper.lr_at(iter)),
        );
        ema_update(&mut ema_params, &cm.params, hyper.mu_ema);

        if let RewardSpec::Lrm {
            rm,
            codec,
            lrm_hyper,
            ..
        } = &spec
        {
            let lrm_ref = lrm.as_mut().expect("lrm present");
            let student_rows = student_rows.expect("student rows computed");
            let n_triplets = lrm_hyper.batch.min(hyper.batch);
            let triplets: Vec<PreferenceTriplet> = (0..n_triplets)
                .map(|i| PreferenceTriplet {
                    real: Tensor::vector(batch.z_rows.row(i).to_vec()),
                    student: Tensor::vector(student_rows.row(i).to_vec()),
                    target: Tensor::vector(target.row(i).to_vec()),
                    cond: batch.conds[i],
                })
                .collect();
            let lg = lrm_loss_graph(
                lrm_ref,
                &triplets,
                rm,
                codec,
                lrm_hyper.tau_e,
                lrm_hyper.eps_real,
            )?;
            let (lrm_loss_val, lrm_grads) = crate::autodiff::eval_with_grads(&lg, &lrm_ref.params)?;
            ensure_finite(lrm_loss_val, "lrm", iter)?;
            adam_step(
                &mut lrm_ref.params,
                &lrm_grads,
                lrm_state.as_mut().expect("lrm state"),
                &AdamParams::with_lr(lrm_hyper.lr_finetune),
            );
            if iter % hyper.log_every == 0 || iter + 1 == hyper.iters {
                lrm_trace.push(iter, lrm_loss_val);
            }
        }

        if iter % hyper.log_every == 0 || iter + 1 == hyper.iters {
            log::info!("distill iter {iter}: loss {loss:.6}");
            trace.push(iter, loss);
        }
    }

    Ok(DistillOutcome {
        cm,
        ema_params,
        trace,
        lrm,
        lrm_trace: if lrm_trace.entries.is_empty() {
            None
        } else {
            Some(lrm_trace)
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{generate, Preset};
    use crate::teacher::TeacherHyper;

    fn toy_stack(seed: u64) -> (TeacherModel, Codec, Vec<(Tensor, usize)>, NoiseSchedule) {
        let sched = NoiseSchedule::build(20, 0.01, 0.3).unwrap();
        let mut rng = Rng::new(seed);
        let data = generate(Preset::Mixture2d, 16, 4, 128, &mut rng);
        let codec = Codec::init(16, 4, 16, &mut rng);
        let latents = codec.encode_dataset(&data).unwrap();
        let teacher = TeacherModel::init(4, 4, 24, sched.len(), &mut rng);
        (teacher, codec, latents, sched)
    }

    fn fast_hyper() -> CmHyper {
        CmHyper {
            iters: 15,
            batch: 8,
            ..CmHyper::default()
        }
    }

    #[test]
    fn k_must_leave_grid_room() {
        let (teacher, _, latents, sched) = toy_stack(1);
        let hyper = CmHyper {
            k: 20,
            ..fast_hyper()
        };
        let err = distill_lcd(&teacher, &latents, &sched, &hyper, &mut Rng::new(0)).unwrap_err();
        assert!(matches!(err, Error::ConfigRange { .. }), "{err}");
        let hyper0 = CmHyper { k: 0, ..fast_hyper() };
        assert!(distill_lcd(&teacher, &latents, &sched, &hyper0, &mut Rng::new(0)).is_err());
    }

    #[test]
    fn lcd_loss_target_branch_is_fully_detached() {
        let (teacher, _, latents, sched) = toy_stack(2);
        let cm = ConsistencyModel::from_teacher(&teacher, 0.5);
        let ema = cm.params.clone();
        let hyper = fast_hyper();
        let mut rng = Rng::new(5);
        let batch = draw_batch(&latents, &sched, &hyper, cm.d_z, &mut rng).unwrap();
        let solved = solve_targets(&teacher, &sched, &batch).unwrap();
        let target = cm
            .apply_with(&ema, &solved, &batch.conds, &batch.ns_lo, &batch.omegas)
            .unwrap();
        let g = student_loss_graph(&cm, &target, &batch, hyper.huber_c, &RewardTerm::None).unwrap();
        // the only trainable inputs are student parameters
        for name in g.input_names() {
            assert!(cm.params.contains(name), "unexpected graph input {name}");
        }
        // gradient w.r.t. the EMA parameters is identically zero: they are
        // not inputs at all, so backward cannot touch them
        let grads = crate::autodiff::backward(&g, &cm.params).unwrap();
        assert_eq!(grads.len(), cm.params.len());
    }

    #[test]
    fn rg_loss_with_zero_beta_is_bit_identical_to_lcd_loss() {
        let (teacher, codec, latents, sched) = toy_stack(3);
        let cm = ConsistencyModel::from_teacher(&teacher, 0.5);
        let ema = cm.params.clone();
        let rm = ExpertRM::aligned(Preset::Mixture2d, 16, 4, 16.0, 1.0);
        let hyper = fast_hyper();
        let a = lcd_loss(&cm, &ema, &teacher, &latents, &sched, &hyper, &mut Rng::new(9)).unwrap();
        let b = rg_lcd_loss(
            &cm,
            &ema,
            &teacher,
            &codec,
            &rm,
            0.0,
            &latents,
            &sched,
            &hyper,
            &mut Rng::new(9),
        )
        .unwrap();
        assert_eq!(a.to_bits(), b.to_bits(), "beta=0 reduction must be exact");
    }

    #[test]
    fn constant_reward_shift_leaves_gradients_unchanged() {
        // r' = r + c shifts the loss by the constant -beta*c and nothing
        // else, so the theta gradients of the two losses are identical.
        let (teacher, codec, latents, sched) = toy_stack(4);
        let cm = ConsistencyModel::from_teacher(&teacher, 0.5);
        let hyper = fast_hyper();
        let mut rng = Rng::new(11);
        let batch = draw_batch(&latents, &sched, &hyper, cm.d_z, &mut rng).unwrap();
        let solved = solve_targets(&teacher, &sched, &batch).unwrap();
        let target = cm
            .apply_with(&cm.params, &solved, &batch.conds, &batch.ns_lo, &batch.omegas)
            .unwrap();

        let rm = ExpertRM::aligned(Preset::Mixture2d, 16, 4, 16.0, 1.0);
        let beta = 2.0;
        let term = RewardTerm::Expert {
            rm: &rm,
            codec: &codec,
            beta,
        };
        let ga = student_loss_graph(&cm, &target, &batch, hyper.huber_c, &term).unwrap();
        let (loss_a, grads_a) = crate::autodiff::eval_with_grads(&ga, &cm.params).unwrap();

        // same graph with the reward shifted by a constant c = 3.5
        let c = 3.5;
        let mut gb = student_loss_graph(&cm, &target, &batch, hyper.huber_c, &term).unwrap();
        let out = gb.output().unwrap();
        let shifted = gb.add_scalar(out, -beta * c);
        gb.set_output(shifted);
        let (loss_b, grads_b) = crate::autodiff::eval_with_grads(&gb, &cm.params).unwrap();

        assert!((loss_b - (loss_a - beta * c)).abs() < 1e-12);
        assert_eq!(
            grads_a.max_abs_diff(&grads_b),
            0.0,
            "constant reward shift changed gradients"
        );
    }

    #[test]
    fn distill_runs_are_seed_deterministic() {
        let (teacher, _, latents, sched) = toy_stack(5);
        let hyper = fast_hyper();
        let a = distill_lcd(&teacher, &latents, &sched, &hyper, &mut Rng::new(3)).unwrap();
        let b = distill_lcd(&teacher, &latents, &sched, &hyper, &mut Rng::new(3)).unwrap();
        assert_eq!(a.cm.params.max_abs_diff(&b.cm.params), 0.0);
        assert_eq!(a.ema_params.max_abs_diff(&b.ema_params), 0.0);
    }

    #[test]
    fn rg_beta_zero_reproduces_lcd_parameters_exactly() {
        let (teacher, codec, latents, sched) = toy_stack(6);
        let rm = ExpertRM::aligned(Preset::Mixture2d, 16, 4, 16.0, 1.0);
        let hyper = fast_hyper();
        let lcd = distill_lcd(&teacher, &latents, &sched, &hyper, &mut Rng::new(21)).unwrap();
        let rg = distill_rg_lcd(
            &teacher,
            &codec,
            &rm,
            0.0,
            &latents,
            &sched,
            &hyper,
            &mut Rng::new(21),
        )
        .unwrap();
        assert_eq!(
            lcd.cm.params.max_abs_diff(&rg.cm.params),
            0.0,
            "beta = 0 distillation must be bit-identical to plain LCD"
        );
    }

    #[test]
    fn rg_rejects_preference_only_expert() {
        let (teacher, codec, latents, sched) = toy_stack(7);
        let rm = ExpertRM::preference_only(Preset::Mixture2d, 16, 4, 16.0, 1.0);
        let hyper = fast_hyper();
        assert!(distill_rg_lcd(
            &teacher,
            &codec,
            &rm,
            1.0,
            &latents,
            &sched,
            &hyper,
            &mut Rng::new(2)
        )
        .is_err());
    }

    #[test]
    fn lrm_mode_updates_both_models() {
        let (teacher, codec, latents, sched) = toy_stack(8);
        let rm = ExpertRM::aligned(Preset::Mixture2d, 16, 4, 16.0, 1.0);
        let lrm_hyper = LrmHyper {
            pretrain_iters: 10,
            ..LrmHyper::default()
        };
        let (lrm0, _) =
            crate::lrm::pretrain_lrm(&codec, &latents, 4, &lrm_hyper, &mut Rng::new(31)).unwrap();
        let hyper = fast_hyper();
        let out = distill_rg_lcd_lrm(
            &teacher,
            &codec,
            &rm,
            &lrm0,
            1.0,
            &latents,
            &sched,
            &hyper,
            &lrm_hyper,
            &mut Rng::new(32),
        )
        .unwrap();
        let lrm_after = out.lrm.unwrap();
        assert!(
            lrm_after.params.max_abs_diff(&lrm0.params) > 0.0,
            "finetuning should move the LRM parameters"
        );
        assert!(out.lrm_trace.is_some());
    }

    #[test]
    fn lrm_theta_update_matches_manual_two_graph_route() {
        // Independent route: gradient of (lcd) and gradient of (-beta *
        // mean lrm reward) computed in two separate graphs must add up to
        // the joint graph's gradient.
        let (teacher, codec, latents, sched) = toy_stack(9);
        let cm = ConsistencyModel::from_teacher(&teacher, 0.5);
        let lrm_hyper = LrmHyper::default();
        let lrm = LatentRM::init(codec.d_z, 4, &lrm_hyper, &mut Rng::new(41));
        let hyper = fast_hyper();
        let beta = 1.7;

        let mut rng = Rng::new(55);
        let batch = draw_batch(&latents, &sched, &hyper, cm.d_z, &mut rng).unwrap();
        let solved = solve_targets(&teacher, &sched, &batch).unwrap();
        let target = cm
            .apply_with(&cm.params, &solved, &batch.conds, &batch.ns_lo, &batch.omegas)
            .unwrap();

        let joint = student_loss_graph(
            &cm,
            &target,
            &batch,
            hyper.huber_c,
            &RewardTerm::Lrm { lrm: &lrm, beta },
        )
        .unwrap();
        let (_, joint_grads) = crate::autodiff::eval_with_grads(&joint, &cm.params).unwrap();

        let lcd_only =
            student_loss_graph(&cm, &target, &batch, hyper.huber_c, &RewardTerm::None).unwrap();
        let (_, lcd_grads) = crate::autodiff::eval_with_grads(&lcd_only, &cm.params).unwrap();

        // reward-only graph
        let mut g = Graph::new();
        let z_hi = g.constant(batch.z_hi.clone());
        let student = cm
            .apply_node(
                &mut g,
                z_hi,
                &batch.conds,
                &batch.ns_hi,
                &batch.omegas,
                &Binding::Trainable,
            )
            .unwrap();
        let rows = lrm
            .reward_rows_node(&mut g, student, &batch.conds, &Binding::Frozen(&lrm.params))
            .unwrap();
        let mean_r = g.mean(rows);
        let neg = g.mul_scalar(mean_r, -beta);
        g.set_output(neg);
        let (_, reward_grads) = crate::autodiff::eval_with_grads(&g, &cm.params).unwrap();

        let mut manual = lcd_grads.clone();
        manual.axpy(1.0, &reward_grads);
        let gap = manual.max_abs_diff(&joint_grads);
        assert!(gap < 1e-12, "two-route gradient mismatch {gap}");
    }
}
