//! Consistency model: boundary parameterization, guidance-scale embedding,
//! pseudo-Huber distance, EMA target maintenance, and multistep sampling.
//!
//! The model maps a noisy latent at any grid step straight to the
//! trajectory origin:
//!
//! ```text
//! f(z_t, w, c, n) = c_skip(n) * z_t + c_out(n) * F(z_t, emb(n), emb(c), emb(w))
//! ```
//!
//! with c_skip(1) = 1 and c_out(1) = 0, so the map is the exact identity at
//! the boundary step regardless of the backbone parameters.

use crate::autodiff::{Graph, NodeId, ParamSet};
use crate::mlp::{one_hot_rows, sinusoidal_embedding, stack_rows, Binding};
use crate::schedule::NoiseSchedule;
use crate::teacher::{Condition, TeacherModel, TIME_EMB_DIM};
use crate::{Error, Result, Rng, Tensor};

const TIME_FREQS: usize = TIME_EMB_DIM / 2;
/// Number of guidance-scale frequencies (features are sin and cos pairs).
pub const OMEGA_BANK_DIM: usize = 16;
pub const OMEGA_FEATURE_DIM: usize = 2 * OMEGA_BANK_DIM;

/// Fourier features of the guidance scale, projected into the backbone
/// embedding and added to it.
#[derive(Debug, Clone, PartialEq)]
pub struct OmegaEmbedding {
    pub freqs: Vec<f64>,
}

impl OmegaEmbedding {
    /// Log-spaced bank from 0.25 doubling every two entries.
    pub fn default_bank() -> Self {
        let freqs = (0..OMEGA_BANK_DIM)
            .map(|j| 0.25 * 2f64.powf(j as f64 / 2.0))
            .collect();
        OmegaEmbedding { freqs }
    }

    pub fn from_freqs(freqs: Vec<f64>) -> Self {
        OmegaEmbedding { freqs }
    }

    pub fn feature_row(&self, omega: f64) -> Vec<f64> {
        let mut out = Vec::with_capacity(OMEGA_FEATURE_DIM);
        for &f in &self.freqs {
            out.push((omega * f).sin());
            out.push((omega * f).cos());
        }
        out
    }
}

/// Boundary coefficients at 1-based step `n` on an N-step grid, with
/// normalized time t = n/N:
///
/// ```text
/// c_skip = s^2 / ((t - t_1)^2 + s^2),   c_out = s (t - t_1) / sqrt(s^2 + t^2)
/// ```
pub fn boundary_coeffs(n: usize, sigma_data: f64, n_steps: usize) -> (f64, f64) {
    let t = n as f64 / n_steps as f64;
    let t1 = 1.0 / n_steps as f64;
    let s2 = sigma_data * sigma_data;
    let d = t - t1;
    let c_skip = s2 / (d * d + s2);
    let c_out = sigma_data * d / (s2 + t * t).sqrt();
    (c_skip, c_out)
}

#[derive(Debug, Clone)]
pub struct ConsistencyModel {
    pub params: ParamSet,
    pub omega_emb: OmegaEmbedding,
    pub sigma_data: f64,
    pub d_z: usize,
    pub n_classes: usize,
    pub hidden: usize,
    pub n_steps: usize,
}

impl ConsistencyModel {
    /// Initialize from the teacher: the backbone starts as a copy of the
    /// teacher parameters and the guidance projection starts at zero, so the
    /// initial backbone ignores the guidance scale.
    pub fn from_teacher(teacher: &TeacherModel, sigma_data: f64) -> Self {
        let mut params = teacher.params.clone();
        params.insert(
            "omega_w",
            Tensor::zeros(&[OMEGA_FEATURE_DIM, teacher.hidden]),
        );
        ConsistencyModel {
            params,
            omega_emb: OmegaEmbedding::default_bank(),
            sigma_data,
            d_z: teacher.d_z,
            n_classes: teacher.n_classes,
            hidden: teacher.hidden,
            n_steps: teacher.n_steps,
        }
    }

    fn time_rows(&self, ns: &[usize]) -> Tensor {
        let rows: Vec<Vec<f64>> = ns
            .iter()
            .map(|&n| sinusoidal_embedding(n as f64 / self.n_steps as f64, TIME_FREQS))
            .collect();
        stack_rows(&rows)
    }

    fn omega_rows(&self, omegas: &[f64]) -> Tensor {
        let rows: Vec<Vec<f64>> = omegas
            .iter()
            .map(|&w| self.omega_emb.feature_row(w))
            .collect();
        stack_rows(&rows)
    }

    fn coeff_rows(&self, ns: &[usize]) -> (Tensor, Tensor) {
        let mut skip = Vec::with_capacity(ns.len() * self.d_z);
        let mut out = Vec::with_capacity(ns.len() * self.d_z);
        for &n in ns {
            let (cs, co) = boundary_coeffs(n, self.sigma_data, self.n_steps);
            skip.extend(std::iter::repeat(cs).take(self.d_z));
            out.extend(std::iter::repeat(co).take(self.d_z));
        }
        let shape = vec![ns.len(), self.d_z];
        (
            Tensor::new(shape.clone(), skip).expect("c_skip rows"),
            Tensor::new(shape, out).expect("c_out rows"),
        )
    }

    /// Backbone output F(z_t, n, c, w) for a [B, d_z] node.
    fn backbone_node(
        &self,
        g: &mut Graph,
        z_t: NodeId,
        conds: &[Condition],
        ns: &[usize],
        omegas: &[f64],
        binding: &Binding,
    ) -> Result<NodeId> {
        let temb = g.constant(self.time_rows(ns));
        let ids: Vec<usize> = conds.iter().map(|c| c.row(self.n_classes)).collect();
        let onehot = g.constant(one_hot_rows(&ids, self.n_classes + 1));
        let omega_feat = g.constant(self.omega_rows(omegas));
        let cat = g.concat(&[z_t, temb], 1)?;

        let in_w = binding.node(g, "in_w", &[self.d_z + TIME_EMB_DIM, self.hidden])?;
        let in_b = binding.node(g, "in_b", &[self.hidden])?;
        let cond_emb = binding.node(g, "cond_emb", &[self.n_classes + 1, self.hidden])?;
        let omega_w = binding.node(g, "omega_w", &[OMEGA_FEATURE_DIM, self.hidden])?;
        let mid_w = binding.node(g, "mid_w", &[self.hidden, self.hidden])?;
        let mid_b = binding.node(g, "mid_b", &[self.hidden])?;
        let out_w = binding.node(g, "out_w", &[self.hidden, self.d_z])?;
        let out_b = binding.node(g, "out_b", &[self.d_z])?;

        let trunk = g.affine(cat, in_w, in_b)?;
        let cond = g.matmul(onehot, cond_emb)?;
        let guide = g.matmul(omega_feat, omega_w)?;
        let emb = g.add(trunk, cond)?;
        let emb = g.add(emb, guide)?;
        let h1 = g.silu(emb);
        let h2 = g.affine(h1, mid_w, mid_b)?;
        let h2 = g.silu(h2);
        g.affine(h2, out_w, out_b)
    }

    /// Consistency mapping node: boundary-parameterized origin estimate.
    pub fn apply_node(
        &self,
        g: &mut Graph,
        z_t: NodeId,
        conds: &[Condition],
        ns: &[usize],
        omegas: &[f64],
        binding: &Binding,
    ) -> Result<NodeId> {
        let f = self.backbone_node(g, z_t, conds, ns, omegas, binding)?;
        let (skip_rows, out_rows) = self.coeff_rows(ns);
        let skip = g.constant(skip_rows);
        let out = g.constant(out_rows);
        let skipped = g.mul(skip, z_t)?;
        let scaled = g.mul(out, f)?;
        g.add(skipped, scaled)
    }

    /// Host-side consistency mapping for a [B, d_z] batch.
    pub fn apply(
        &self,
        z_t: &Tensor,
        conds: &[Condition],
        ns: &[usize],
        omegas: &[f64],
    ) -> Result<Tensor> {
        self.apply_with(&self.params, z_t, conds, ns, omegas)
    }

    /// Host-side mapping with explicit parameters (used for the EMA target).
    pub fn apply_with(
        &self,
        params: &ParamSet,
        z_t: &Tensor,
        conds: &[Condition],
        ns: &[usize],
        omegas: &[f64],
    ) -> Result<Tensor> {
        let mut g = Graph::new();
        let z = g.constant(z_t.clone());
        let out = self.apply_node(&mut g, z, conds, ns, omegas, &Binding::Frozen(params))?;
        g.set_output(out);
        crate::autodiff::forward_eval(&g, &ParamSet::new())
    }
}

/// Pseudo-Huber distance `sqrt(||a - b||^2 + c^2) - c` on host tensors.
pub fn huber_distance(a: &Tensor, b: &Tensor, c_h: f64) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch {
            node: "huber_distance".into(),
            expected: a.shape().to_vec(),
            got: b.shape().to_vec(),
        });
    }
    if c_h <= 0.0 {
        return Err(Error::invalid("huber_distance", "c_h must be positive"));
    }
    let sq = a.sub(b).sq_norm();
    Ok((sq + c_h * c_h).sqrt() - c_h)
}

/// Batch-mean pseudo-Huber node between two [B, d] nodes: per-row distance
/// averaged over rows. Row sums are taken with a ones matmul.
pub fn mean_huber_node(g: &mut Graph, a: NodeId, b: NodeId, c_h: f64) -> Result<NodeId> {
    let d = g.shape(a)[1];
    let diff = g.sub(a, b)?;
    let sq = g.square(diff);
    let ones = g.constant(Tensor::full(&[d, 1], 1.0));
    let row_sq = g.matmul(sq, ones)?;
    let shifted = g.add_scalar(row_sq, c_h * c_h);
    let root = g.sqrt(shifted);
    let dist = g.add_scalar(root, -c_h);
    Ok(g.mean(dist))
}

/// In-place EMA: target <- mu * target + (1 - mu) * source.
pub fn ema_update(target: &mut ParamSet, source: &ParamSet, mu: f64) {
    for (name, t) in target.iter_mut() {
        if let Some(s) = source.get(name) {
            let tv = t.values_mut();
            for (ti, si) in tv.iter_mut().zip(s.values()) {
                *ti = mu * *ti + (1.0 - mu) * si;
            }
        }
    }
}

/// Evenly spaced interior noise-injection steps for multistep sampling.
pub fn default_tau_sequence(n_grid: usize, n_sample_steps: usize) -> Vec<usize> {
    (1..n_sample_steps)
        .map(|i| {
            let f = n_grid as f64 - i as f64 * (n_grid - 1) as f64 / n_sample_steps as f64;
            (f.round() as usize).clamp(1, n_grid - 1)
        })
        .collect()
}

/// Multistep consistency sampling: map pure noise to an origin estimate,
/// then alternate noise injection at the tau steps with consistency
/// mappings. Returns latents; decoding is the caller's business.
pub fn multistep_sample(
    model: &ConsistencyModel,
    sched: &NoiseSchedule,
    taus: &[usize],
    omega: f64,
    conds: &[Condition],
    seed: u64,
) -> Result<Tensor> {
    let n_grid = sched.len();
    let mut prev = n_grid;
    for &tau in taus {
        if tau >= prev {
            return Err(Error::invalid(
                "multistep_sample",
                format!("tau sequence must be strictly decreasing below N={n_grid}"),
            ));
        }
        sched.check_index(tau)?;
        prev = tau;
    }
    let batch = conds.len();
    let mut rng = Rng::new(seed);
    let z_init = Tensor::new(vec![batch, model.d_z], rng.normal_vec(batch * model.d_z))?;

    let ns = vec![n_grid; batch];
    let omegas = vec![omega; batch];
    let mut z = model.apply(&z_init, conds, &ns, &omegas)?;

    for &tau in taus {
        let noise = Tensor::new(vec![batch, model.d_z], rng.normal_vec(batch * model.d_z))?;
        let z_tau = z.scale(sched.alpha(tau)).axpy(sched.beta(tau), &noise);
        let ns = vec![tau; batch];
        z = model.apply(&z_tau, conds, &ns, &omegas)?;
    }
    Ok(z)
}
