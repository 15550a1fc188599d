//! Teacher denoiser: noise-prediction MLP, classifier-free guidance, and
//! the DDIM probability-flow solver.
//!
//! The teacher predicts the Gaussian noise mixed into a latent at grid step
//! n, conditioned on a class id or the null condition. Conditioning enters
//! through a learned embedding table with a dedicated null row; condition
//! dropout during pretraining is what makes guidance possible later.

use crate::autodiff::{adam_step, AdamParams, AdamState, Graph, NodeId, ParamSet};
use crate::mlp::{one_hot_rows, sinusoidal_embedding, stack_rows, Binding};
use crate::schedule::NoiseSchedule;
use crate::train::{ensure_finite, TrainTrace};
use crate::{Error, Result, Rng, Tensor};

/// Sinusoidal time-embedding width (8 frequencies, sin and cos).
pub const TIME_EMB_DIM: usize = 16;
const TIME_FREQS: usize = TIME_EMB_DIM / 2;

/// Generation condition: a class id or the unconditional token.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Condition {
    Class(usize),
    Null,
}

impl Condition {
    /// Row index in an embedding table with the null row last.
    pub fn row(&self, n_classes: usize) -> usize {
        match *self {
            Condition::Class(c) => {
                debug_assert!(c < n_classes, "class id out of range");
                c
            }
            Condition::Null => n_classes,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct TeacherHyper {
    pub hidden: usize,
    pub iters: u64,
    pub lr: f64,
    pub batch: usize,
    pub p_uncond: f64,
    pub log_every: u64,
}

impl Default for TeacherHyper {
    fn default() -> Self {
        TeacherHyper {
            hidden: 64,
            iters: 3000,
            lr: 2e-3,
            batch: 32,
            p_uncond: 0.1,
            log_every: 100,
        }
    }
}

/// Noise-prediction model over latents.
#[derive(Debug, Clone)]
pub struct TeacherModel {
    pub params: ParamSet,
    pub d_z: usize,
    pub n_classes: usize,
    pub hidden: usize,
    pub n_steps: usize,
}

impl TeacherModel {
    pub fn init(d_z: usize, n_classes: usize, hidden: usize, n_steps: usize, rng: &mut Rng) -> Self {
        let mut params = ParamSet::new();
        let d_in = d_z + TIME_EMB_DIM;
        let scale_in = 1.0 / (d_in as f64).sqrt();
        let scale_mid = 1.0 / (hidden as f64).sqrt();
        params.insert(
            "in_w",
            Tensor::new(
                vec![d_in, hidden],
                (0..d_in * hidden).map(|_| scale_in * rng.normal()).collect(),
            )
            .expect("in_w"),
        );
        params.insert("in_b", Tensor::zeros(&[hidden]));
        params.insert(
            "cond_emb",
            Tensor::new(
                vec![n_classes + 1, hidden],
                (0..(n_classes + 1) * hidden)
                    .map(|_| 0.2 * rng.normal())
                    .collect(),
            )
            .expect("cond_emb"),
        );
        params.insert(
            "mid_w",
            Tensor::new(
                vec![hidden, hidden],
                (0..hidden * hidden)
                    .map(|_| scale_mid * rng.normal())
                    .collect(),
            )
            .expect("mid_w"),
        );
        params.insert("mid_b", Tensor::zeros(&[hidden]));
        params.insert(
            "out_w",
            Tensor::new(
                vec![hidden, d_z],
                (0..hidden * d_z).map(|_| scale_mid * rng.normal()).collect(),
            )
            .expect("out_w"),
        );
        params.insert("out_b", Tensor::zeros(&[d_z]));
        TeacherModel {
            params,
            d_z,
            n_classes,
            hidden,
            n_steps,
        }
    }

    fn time_rows(&self, ns: &[usize]) -> Tensor {
        let rows: Vec<Vec<f64>> = ns
            .iter()
            .map(|&n| sinusoidal_embedding(n as f64 / self.n_steps as f64, TIME_FREQS))
            .collect();
        stack_rows(&rows)
    }

    fn cond_rows(&self, conds: &[Condition]) -> Tensor {
        let ids: Vec<usize> = conds.iter().map(|c| c.row(self.n_classes)).collect();
        one_hot_rows(&ids, self.n_classes + 1)
    }

    /// Build the noise prediction for a batch node `z_t` of shape [B, d_z].
    /// Per-row step indices and conditions enter as baked constants.
    pub fn predict_node(
        &self,
        g: &mut Graph,
        z_t: NodeId,
        conds: &[Condition],
        ns: &[usize],
        binding: &Binding,
    ) -> Result<NodeId> {
        let temb = g.constant(self.time_rows(ns));
        let onehot = g.constant(self.cond_rows(conds));
        let cat = g.concat(&[z_t, temb], 1)?;

        let in_w = binding.node(g, "in_w", &[self.d_z + TIME_EMB_DIM, self.hidden])?;
        let in_b = binding.node(g, "in_b", &[self.hidden])?;
        let cond_emb = binding.node(g, "cond_emb", &[self.n_classes + 1, self.hidden])?;
        let mid_w = binding.node(g, "mid_w", &[self.hidden, self.hidden])?;
        let mid_b = binding.node(g, "mid_b", &[self.hidden])?;
        let out_w = binding.node(g, "out_w", &[self.hidden, self.d_z])?;
        let out_b = binding.node(g, "out_b", &[self.d_z])?;

        let trunk = g.affine(cat, in_w, in_b)?;
        let cond = g.matmul(onehot, cond_emb)?;
        let emb = g.add(trunk, cond)?;
        let h1 = g.silu(emb);
        let h2 = g.affine(h1, mid_w, mid_b)?;
        let h2 = g.silu(h2);
        g.affine(h2, out_w, out_b)
    }

    /// Host-side noise prediction for a [B, d_z] batch.
    pub fn predict(&self, z_t: &Tensor, conds: &[Condition], ns: &[usize]) -> Result<Tensor> {
        let mut g = Graph::new();
        let z = g.constant(z_t.clone());
        let out = self.predict_node(&mut g, z, conds, ns, &Binding::Frozen(&self.params))?;
        g.set_output(out);
        crate::autodiff::forward_eval(&g, &ParamSet::new())
    }
}

/// Linear CFG combination of conditional and unconditional predictions:
/// `(1 + omega) * eps_cond - omega * eps_null`.
pub fn cfg_combine(eps_cond: &Tensor, eps_null: &Tensor, omega: f64) -> Tensor {
    eps_cond.scale(1.0 + omega).axpy(-omega, eps_null)
}

/// Guided noise prediction at one grid step, batch form.
pub fn cfg_predict(
    teacher: &TeacherModel,
    z_t: &Tensor,
    cond: Condition,
    omega: f64,
    n: usize,
) -> Result<Tensor> {
    if cond == Condition::Null {
        return Err(Error::invalid(
            "cfg_predict",
            "null condition: use the plain prediction instead",
        ));
    }
    let batch = z_t.shape()[0];
    let conds = vec![cond; batch];
    let nulls = vec![Condition::Null; batch];
    let ns = vec![n; batch];
    let eps_c = teacher.predict(z_t, &conds, &ns)?;
    let eps_n = teacher.predict(z_t, &nulls, &ns)?;
    Ok(cfg_combine(&eps_c, &eps_n, omega))
}

/// One DDIM solver increment from grid step `n_hi` down to `n_lo`.
///
/// Returns `psi` such that the DDIM estimate of `z_{t_lo}` is `z + psi`:
///
/// ```text
/// z + psi = (a_lo / a_hi) z - (b_hi a_lo / a_hi - b_lo) eps_hat
///         = a_lo * (z - b_hi eps_hat) / a_hi + b_lo * eps_hat
/// ```
///
/// The second (origin-prediction) form shows the expansion is the exact
/// beta_lo -> 0 limit of the textbook bracket, so no endpoint special case
/// is needed.
pub fn ddim_step(
    z: &Tensor,
    n_hi: usize,
    n_lo: usize,
    eps_hat: &Tensor,
    sched: &NoiseSchedule,
) -> Result<Tensor> {
    sched.check_index(n_hi)?;
    sched.check_index(n_lo)?;
    if n_lo > n_hi {
        return Err(Error::invalid(
            "ddim_step",
            format!("n_lo = {n_lo} must not exceed n_hi = {n_hi}"),
        ));
    }
    if z.shape() != eps_hat.shape() {
        return Err(Error::ShapeMismatch {
            node: "ddim_step".into(),
            expected: z.shape().to_vec(),
            got: eps_hat.shape().to_vec(),
        });
    }
    let (a_hi, a_lo) = (sched.alpha(n_hi), sched.alpha(n_lo));
    let (b_hi, b_lo) = (sched.beta(n_hi), sched.beta(n_lo));
    let scale_z = a_lo / a_hi - 1.0;
    let scale_eps = -(b_hi * a_lo / a_hi - b_lo);
    Ok(z.scale(scale_z).axpy(scale_eps, eps_hat))
}

/// CFG-augmented DDIM estimate of `z_{t_lo}` from `z` at `t_hi`:
/// `z + (1 + omega) psi_cond - omega psi_null`. Evaluated on values only;
/// nothing here tracks gradients.
pub fn augmented_solve(
    teacher: &TeacherModel,
    z: &Tensor,
    n_hi: usize,
    n_lo: usize,
    cond: Condition,
    omega: f64,
    sched: &NoiseSchedule,
) -> Result<Tensor> {
    let batch = z.shape()[0];
    let ns = vec![n_hi; batch];
    let conds = vec![cond; batch];
    let eps_c = teacher.predict(z, &conds, &ns)?;
    let psi_c = ddim_step(z, n_hi, n_lo, &eps_c, sched)?;
    if cond == Condition::Null {
        // plain unconditional estimate; no guidance to mix
        return Ok(z.add(&psi_c));
    }
    let nulls = vec![Condition::Null; batch];
    let eps_n = teacher.predict(z, &nulls, &ns)?;
    let psi_n = ddim_step(z, n_hi, n_lo, &eps_n, sched)?;
    Ok(z.add(&psi_c.scale(1.0 + omega).axpy(-omega, &psi_n)))
}

/// Epsilon-prediction loss node: mean over the batch of the squared noise
/// residual norm (so a zero predictor on unit Gaussian noise scores ~ d_z).
pub fn eps_mse(g: &mut Graph, pred: NodeId, noise: NodeId) -> Result<NodeId> {
    let batch = g.shape(pred)[0];
    let diff = g.sub(pred, noise)?;
    let sq = g.square(diff);
    let total = g.sum(sq);
    Ok(g.mul_scalar(total, 1.0 / batch as f64))
}

/// Build the training-loss graph for one batch of (z, cond) latents.
/// Returns the graph; bind `teacher.params` to evaluate or differentiate.
pub fn teacher_loss_graph(
    teacher: &TeacherModel,
    sched: &NoiseSchedule,
    zs: &[&Tensor],
    conds: &[Condition],
    ns: &[usize],
    noises: &[Tensor],
) -> Result<Graph> {
    let batch = zs.len();
    if batch == 0 {
        return Err(Error::invalid("teacher_loss", "empty batch"));
    }
    let mut zt_rows = Vec::with_capacity(batch);
    let mut noise_rows = Vec::with_capacity(batch);
    for i in 0..batch {
        let zt = sched.perturb(zs[i], ns[i], &noises[i])?;
        zt_rows.push(zt.into_values());
        noise_rows.push(noises[i].values().to_vec());
    }
    let mut g = Graph::new();
    let z_t = g.constant(stack_rows(&zt_rows));
    let noise = g.constant(stack_rows(&noise_rows));
    let pred = teacher.predict_node(&mut g, z_t, conds, ns, &Binding::Trainable)?;
    let loss = eps_mse(&mut g, pred, noise)?;
    g.set_output(loss);
    Ok(g)
}

/// Scalar training loss for a batch (forward only).
pub fn teacher_loss(
    teacher: &TeacherModel,
    sched: &NoiseSchedule,
    zs: &[&Tensor],
    conds: &[Condition],
    ns: &[usize],
    noises: &[Tensor],
) -> Result<f64> {
    let g = teacher_loss_graph(teacher, sched, zs, conds, ns, noises)?;
    Ok(crate::autodiff::forward_eval(&g, &teacher.params)?.item())
}

/// Pretrain the teacher on (latent, class) pairs with condition dropout.
pub fn train_teacher(
    latents: &[(Tensor, usize)],
    sched: &NoiseSchedule,
    d_z: usize,
    n_classes: usize,
    hyper: &TeacherHyper,
    rng: &mut Rng,
) -> Result<(TeacherModel, TrainTrace)> {
    if latents.is_empty() {
        return Err(Error::invalid("train_teacher", "empty dataset"));
    }
    let mut teacher = TeacherModel::init(d_z, n_classes, hyper.hidden, sched.len(), rng);
    let mut state = AdamState::new(&teacher.params);
    let hp = AdamParams::with_lr(hyper.lr);
    let mut trace = TrainTrace::default();

    for iter in 0..hyper.iters {
        let mut zs: Vec<&Tensor> = Vec::with_capacity(hyper.batch);
        let mut conds = Vec::with_capacity(hyper.batch);
        let mut ns = Vec::with_capacity(hyper.batch);
        let mut noises = Vec::with_capacity(hyper.batch);
        for _ in 0..hyper.batch {
            let idx = rng.uniform_usize(0, latents.len() - 1);
            let (z, class) = &latents[idx];
            let cond = if rng.next_f64() < hyper.p_uncond {
                Condition::Null
            } else {
                Condition::Class(*class)
            };
            let n = rng.uniform_usize(1, sched.len());
            let noise = Tensor::new(z.shape().to_vec(), rng.normal_vec(z.numel()))?;
            zs.push(z);
            conds.push(cond);
            ns.push(n);
            noises.push(noise);
        }
        let g = teacher_loss_graph(&teacher, sched, &zs, &conds, &ns, &noises)?;
        let (loss, grads) = crate::autodiff::eval_with_grads(&g, &teacher.params)?;
        ensure_finite(loss, "teacher", iter)?;
        adam_step(&mut teacher.params, &grads, &mut state, &hp);
        if iter % hyper.log_every == 0 || iter + 1 == hyper.iters {
            log::info!("teacher iter {iter}: loss {loss:.6}");
            trace.push(iter, loss);
        }
    }
    Ok((teacher, trace))
}

/// DDIM sampling: walk an evenly spaced sub-grid from t_N down to t_1.
/// Conditions are given per sample row; `omega` applies only to class rows.
pub fn teacher_sample(
    teacher: &TeacherModel,
    sched: &NoiseSchedule,
    steps: usize,
    omega: f64,
    conds: &[Condition],
    seed: u64,
) -> Result<Tensor> {
    if steps == 0 {
        return Err(Error::invalid("teacher_sample", "steps must be >= 1"));
    }
    let n_grid = sched.len();
    let mut indices: Vec<usize> = (0..=steps)
        .map(|i| {
            let f = n_grid as f64 - i as f64 * (n_grid - 1) as f64 / steps as f64;
            f.round() as usize
        })
        .collect();
    indices.dedup();

    let batch = conds.len();
    let mut rng = Rng::new(seed);
    let mut z = Tensor::new(
        vec![batch, teacher.d_z],
        rng.normal_vec(batch * teacher.d_z),
    )?;

    for w in indices.windows(2) {
        let (hi, lo) = (w[0], w[1]);
        // per-row conditions can differ, so solve row groups in one batch
        let ns = vec![hi; batch];
        let eps_c = teacher.predict(&z, conds, &ns)?;
        let nulls = vec![Condition::Null; batch];
        let eps_n = teacher.predict(&z, &nulls, &ns)?;
        let mut combined = Vec::with_capacity(batch * teacher.d_z);
        for i in 0..batch {
            let row_c = eps_c.row(i);
            let row_n = eps_n.row(i);
            match conds[i] {
                Condition::Null => combined.extend_from_slice(row_n),
                Condition::Class(_) => {
                    for d in 0..teacher.d_z {
                        combined.push((1.0 + omega) * row_c[d] - omega * row_n[d]);
                    }
                }
            }
        }
        let eps = Tensor::new(vec![batch, teacher.d_z], combined)?;
        let psi = ddim_step(&z, hi, lo, &eps, sched)?;
        z = z.add(&psi);
    }
    Ok(z)
}

/// Balanced per-class conditions for a sample batch.
pub fn class_prior_conds(n_samples: usize, n_classes: usize) -> Vec<Condition> {
    (0..n_samples)
        .map(|i| Condition::Class(i % n_classes))
        .collect()
}
