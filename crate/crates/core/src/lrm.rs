//! Latent proxy reward model.
//!
//! A small latent encoder and a condition embedding table produce paired
//! embeddings whose scaled cosine similarity is the reward. The model is
//! pretrained contrastively on real (latent, class) pairs, then finetuned
//! during distillation to match the expert's pairwise preferences by
//! minimizing per-pair KL divergences over the (real, student, target)
//! triplet.

use crate::autodiff::{adam_step, AdamParams, AdamState, Graph, NodeId, ParamSet};
use crate::codec::Codec;
use crate::mlp::{one_hot_rows, Binding, MlpSpec};
use crate::reward::{Choice, ExpertRM};
use crate::teacher::Condition;
use crate::train::{ensure_finite, TrainTrace};
use crate::{Error, Result, Rng, Tensor};

/// Probability floor used when converting a hard preference into a
/// two-point distribution (keeps every KL finite).
const PREFERENCE_EPS: f64 = 1e-6;
/// Norm guard inside cosine denominators.
const NORM_EPS: f64 = 1e-12;

#[derive(Debug, Clone, Copy)]
pub struct LrmHyper {
    pub hidden: usize,
    pub embed_dim: usize,
    pub tau_l: f64,
    pub tau_e: f64,
    pub eps_real: f64,
    /// Finetuning learning rate (eta_2 in the two-optimizer loop).
    pub lr_finetune: f64,
    /// Triplet batch size during distillation; may be smaller than the
    /// consistency-model batch.
    pub batch: usize,
    pub pretrain_iters: u64,
    pub pretrain_lr: f64,
    pub pretrain_batch: usize,
    /// Gaussian augmentation noise added to latents during pretraining.
    /// Degrading the embedding alignment with noise level gives the cosine
    /// reward a usable notion of distance from the data manifold.
    pub pretrain_noise: f64,
    /// Logit multiplier for the contrastive pretraining objective.
    pub contrastive_scale: f64,
    /// Reward magnitude: reward = reward_scale * cosine.
    pub reward_scale: f64,
    pub log_every: u64,
}

impl Default for LrmHyper {
    fn default() -> Self {
        LrmHyper {
            hidden: 32,
            embed_dim: 16,
            tau_l: 1.0,
            tau_e: 1.0,
            eps_real: 0.5,
            lr_finetune: 1e-4,
            batch: 16,
            pretrain_iters: 1500,
            pretrain_lr: 2e-3,
            pretrain_batch: 32,
            pretrain_noise: 1.0,
            contrastive_scale: 10.0,
            reward_scale: 5.0,
            log_every: 100,
        }
    }
}

#[derive(Debug, Clone)]
pub struct LatentRM {
    pub params: ParamSet,
    pub d_z: usize,
    pub n_classes: usize,
    pub hidden: usize,
    pub embed_dim: usize,
    pub tau_l: f64,
    pub reward_scale: f64,
}

impl LatentRM {
    pub fn init(d_z: usize, n_classes: usize, hyper: &LrmHyper, rng: &mut Rng) -> Self {
        let spec = MlpSpec::new(vec![d_z, hyper.hidden, hyper.embed_dim]);
        let mut params = ParamSet::new();
        params.extend_prefixed("enc.", &spec.init_params(rng));
        params.insert(
            "cond_emb",
            Tensor::new(
                vec![n_classes + 1, hyper.embed_dim],
                (0..(n_classes + 1) * hyper.embed_dim)
                    .map(|_| rng.normal())
                    .collect(),
            )
            .expect("cond_emb"),
        );
        LatentRM {
            params,
            d_z,
            n_classes,
            hidden: hyper.hidden,
            embed_dim: hyper.embed_dim,
            tau_l: hyper.tau_l,
            reward_scale: hyper.reward_scale,
        }
    }

    fn encoder_spec(&self) -> MlpSpec {
        MlpSpec::new(vec![self.d_z, self.hidden, self.embed_dim])
    }

    /// Per-row reward node for latents [B, d_z] with per-row conditions:
    /// `reward_scale * cos(enc(z), emb(c))`, shape [B, 1].
    ///
    /// Differentiable in `z`; whether gradients reach the LRM parameters is
    /// decided by `binding`.
    pub fn reward_rows_node(
        &self,
        g: &mut Graph,
        z: NodeId,
        conds: &[Condition],
        binding: &Binding,
    ) -> Result<NodeId> {
        let emb = self.encoder_spec().forward(g, z, binding, "enc.")?;
        let ids: Vec<usize> = conds.iter().map(|c| c.row(self.n_classes)).collect();
        let onehot = g.constant(one_hot_rows(&ids, self.n_classes + 1));
        let table = binding.node(g, "cond_emb", &[self.n_classes + 1, self.embed_dim])?;
        let cond_emb = g.matmul(onehot, table)?;

        let ones = g.constant(Tensor::full(&[self.embed_dim, 1], 1.0));
        let prod = g.mul(emb, cond_emb)?;
        let dot = g.matmul(prod, ones)?;

        let emb_sq = g.square(emb);
        let emb_norm_sq = g.matmul(emb_sq, ones)?;
        let cond_sq = g.square(cond_emb);
        let cond_norm_sq = g.matmul(cond_sq, ones)?;
        let norm_prod = g.mul(emb_norm_sq, cond_norm_sq)?;
        let guarded = g.add_scalar(norm_prod, NORM_EPS);
        let denom = g.sqrt(guarded);
        let cosine = g.div(dot, denom)?;
        Ok(g.mul_scalar(cosine, self.reward_scale))
    }

    /// Scalar reward for one latent.
    pub fn reward(&self, z: &Tensor, cond: Condition) -> Result<f64> {
        let z2 = if z.shape().len() == 1 {
            Tensor::new(vec![1, self.d_z], z.values().to_vec())?
        } else {
            z.clone()
        };
        let mut g = Graph::new();
        let zn = g.constant(z2);
        let r = self.reward_rows_node(&mut g, zn, &[cond], &Binding::Frozen(&self.params))?;
        g.set_output(r);
        Ok(crate::autodiff::forward_eval(&g, &ParamSet::new())?.item())
    }
}

/// Two-point preference probability with a numerically stable logistic:
/// `p_first = 1 / (1 + exp(-(r_first - r_second) / tau))`.
pub fn preference_dist(r_first: f64, r_second: f64, tau: f64) -> Result<f64> {
    if tau <= 0.0 {
        return Err(Error::invalid("preference_dist", "tau must be positive"));
    }
    let x = (r_first - r_second) / tau;
    Ok(stable_logistic(x))
}

fn stable_logistic(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Two-point KL divergence KL((p, 1-p) || (q, 1-q)).
pub fn two_point_kl(p: f64, q: f64) -> f64 {
    let mut kl = 0.0;
    if p > 0.0 {
        kl += p * (p / q).ln();
    }
    if p < 1.0 {
        kl += (1.0 - p) * ((1.0 - p) / (1.0 - q)).ln();
    }
    kl
}

/// One preference triplet: the real latent, the student's origin estimate,
/// and the EMA target's origin estimate, under one condition.
#[derive(Debug, Clone)]
pub struct PreferenceTriplet {
    pub real: Tensor,
    pub student: Tensor,
    pub target: Tensor,
    pub cond: Condition,
}

impl PreferenceTriplet {
    fn latents(&self) -> [&Tensor; 3] {
        [&self.real, &self.student, &self.target]
    }
}

/// Expert side of a pair: either a reward difference (differentiable
/// experts, with `eps_real` added to the real latent's reward) or a hard
/// choice (preference-only experts).
enum PairQ {
    Delta(f64),
    Hard(Choice),
}

fn expert_pair_q(
    rm: &ExpertRM,
    codec: &Codec,
    triplet: &PreferenceTriplet,
    i: usize,
    j: usize,
    eps_real: f64,
) -> Result<PairQ> {
    let zs = triplet.latents();
    let xi = codec.decode_detached(zs[i])?;
    let xj = codec.decode_detached(zs[j])?;
    if rm.is_differentiable() {
        let mut ri = rm.reward(&xi, triplet.cond)?;
        let mut rj = rm.reward(&xj, triplet.cond)?;
        if i == 0 {
            ri += eps_real;
        }
        if j == 0 {
            rj += eps_real;
        }
        Ok(PairQ::Delta(ri - rj))
    } else {
        Ok(PairQ::Hard(rm.prefer(&xi, &xj, triplet.cond)?))
    }
}

/// softplus(x) = log(1 + exp(x)) as a graph node, via logsumexp([x, 0]).
fn softplus_node(g: &mut Graph, x: NodeId) -> Result<NodeId> {
    let zero = g.scalar(0.0);
    let pair = g.concat(&[x, zero], 0)?;
    g.logsumexp(pair)
}

/// Log-probabilities (log p_first, log p_second) of the two-point softmax
/// over a reward-difference node, via the stable softplus route.
fn pair_log_probs(g: &mut Graph, delta: NodeId, tau: f64) -> Result<(NodeId, NodeId)> {
    let scaled = g.mul_scalar(delta, 1.0 / tau);
    let neg = g.mul_scalar(scaled, -1.0);
    let sp_neg = softplus_node(g, neg)?;
    let sp_pos = softplus_node(g, scaled)?;
    Ok((g.mul_scalar(sp_neg, -1.0), g.mul_scalar(sp_pos, -1.0)))
}

/// KL(P || Q) node for one latent pair. P comes from the (differentiable)
/// LRM reward difference at temperature `tau_l`; Q from the expert reward
/// difference at `tau_e`, entering as a constant so it is stop-gradient by
/// construction. Both sides run through the same softplus arithmetic, so
/// bit-equal reward differences at equal temperatures give exactly zero.
pub fn preference_kl_node(
    g: &mut Graph,
    delta_lrm: NodeId,
    delta_expert: f64,
    tau_l: f64,
    tau_e: f64,
) -> Result<NodeId> {
    let (log_pi, log_pj) = pair_log_probs(g, delta_lrm, tau_l)?;
    let dq = g.constant(Tensor::vector(vec![delta_expert]));
    let (log_qi, log_qj) = pair_log_probs(g, dq, tau_e)?;
    kl_from_logs(g, log_pi, log_pj, log_qi, log_qj)
}

fn kl_from_logs(
    g: &mut Graph,
    log_pi: NodeId,
    log_pj: NodeId,
    log_qi: NodeId,
    log_qj: NodeId,
) -> Result<NodeId> {
    let pi = g.exp(log_pi);
    let pj = g.exp(log_pj);
    let di = g.sub(log_pi, log_qi)?;
    let dj = g.sub(log_pj, log_qj)?;
    let ti = g.mul(pi, di)?;
    let tj = g.mul(pj, dj)?;
    g.add(ti, tj)
}

/// Preference-KL finetuning loss over a batch of triplets.
///
/// For each triplet and each pair (0,1), (0,2), (1,2), the LRM's two-point
/// preference P (temperature tau_l) is matched to the expert's frozen
/// distribution Q (temperature tau_e) by KL(P || Q). Gradients flow into
/// the LRM parameters only: the latents enter as constants and the expert
/// side is plain numbers.
pub fn lrm_loss_graph(
    lrm: &LatentRM,
    triplets: &[PreferenceTriplet],
    rm: &ExpertRM,
    codec: &Codec,
    tau_e: f64,
    eps_real: f64,
) -> Result<Graph> {
    if triplets.is_empty() {
        return Err(Error::invalid("lrm_loss", "empty triplet batch"));
    }
    let mut g = Graph::new();
    let mut kl_terms: Vec<NodeId> = Vec::new();

    for triplet in triplets {
        // LRM rewards for the three latents, one [3, 1] node
        let mut rows = Vec::with_capacity(3 * lrm.d_z);
        for z in triplet.latents() {
            rows.extend_from_slice(z.values());
        }
        let z3 = g.constant(Tensor::new(vec![3, lrm.d_z], rows)?);
        let r = lrm.reward_rows_node(&mut g, z3, &[triplet.cond; 3], &Binding::Trainable)?;

        for (i, j) in [(0usize, 1usize), (0, 2), (1, 2)] {
            let ri = g.slice(r, 0, i, 1)?;
            let ri = g.reshape(ri, &[1])?;
            let rj = g.slice(r, 0, j, 1)?;
            let rj = g.reshape(rj, &[1])?;
            let delta_lrm = g.sub(ri, rj)?;

            let kl = match expert_pair_q(rm, codec, triplet, i, j, eps_real)? {
                PairQ::Delta(dq) => preference_kl_node(&mut g, delta_lrm, dq, lrm.tau_l, tau_e)?,
                PairQ::Hard(choice) => {
                    let (q_first, q_second) = match choice {
                        Choice::First => (1.0 - PREFERENCE_EPS, PREFERENCE_EPS),
                        Choice::Second => (PREFERENCE_EPS, 1.0 - PREFERENCE_EPS),
                    };
                    let (log_pi, log_pj) = pair_log_probs(&mut g, delta_lrm, lrm.tau_l)?;
                    let log_qi = g.constant(Tensor::vector(vec![q_first.ln()]));
                    let log_qj = g.constant(Tensor::vector(vec![q_second.ln()]));
                    kl_from_logs(&mut g, log_pi, log_pj, log_qi, log_qj)?
                }
            };
            kl_terms.push(kl);
        }
    }
    let stacked = g.concat(&kl_terms, 0)?;
    let total = g.sum(stacked);
    let loss = g.mul_scalar(total, 1.0 / triplets.len() as f64);
    g.set_output(loss);
    Ok(g)
}

/// Scalar finetuning loss (forward only).
pub fn lrm_loss(
    lrm: &LatentRM,
    triplets: &[PreferenceTriplet],
    rm: &ExpertRM,
    codec: &Codec,
    tau_e: f64,
    eps_real: f64,
) -> Result<f64> {
    let g = lrm_loss_graph(lrm, triplets, rm, codec, tau_e, eps_real)?;
    Ok(crate::autodiff::forward_eval(&g, &lrm.params)?.item())
}

/// Contrastive pretraining loss for one batch: symmetric InfoNCE between
/// row-normalized latent embeddings and condition embeddings.
fn contrastive_loss_graph(
    lrm: &LatentRM,
    zs: &Tensor,
    classes: &[usize],
    logit_scale: f64,
) -> Result<Graph> {
    let batch = classes.len();
    let mut g = Graph::new();
    let z = g.constant(zs.clone());
    let binding = Binding::Trainable;
    let emb = lrm.encoder_spec().forward(&mut g, z, &binding, "enc.")?;
    let onehot = g.constant(one_hot_rows(classes, lrm.n_classes + 1));
    let table = binding.node(&mut g, "cond_emb", &[lrm.n_classes + 1, lrm.embed_dim])?;
    let cond_emb = g.matmul(onehot, table)?;

    let zn = normalize_rows(&mut g, emb, batch)?;
    let cn = normalize_rows(&mut g, cond_emb, batch)?;
    let cn_t = g.transpose(cn)?;
    let logits = g.matmul(zn, cn_t)?;
    let logits = g.mul_scalar(logits, logit_scale);

    let loss_rows = nce_direction(&mut g, logits, batch)?;
    let logits_t = g.transpose(logits)?;
    let loss_cols = nce_direction(&mut g, logits_t, batch)?;
    let total = g.add(loss_rows, loss_cols)?;
    let loss = g.mul_scalar(total, 0.5);
    g.set_output(loss);
    Ok(g)
}

fn normalize_rows(g: &mut Graph, x: NodeId, rows: usize) -> Result<NodeId> {
    let mut normalized = Vec::with_capacity(rows);
    for i in 0..rows {
        let row = g.slice(x, 0, i, 1)?;
        let sq = g.square(row);
        let ssum = g.sum(sq);
        let guarded = g.add_scalar(ssum, NORM_EPS);
        let norm = g.sqrt(guarded);
        let inv = g.div(row, norm)?;
        normalized.push(inv);
    }
    g.concat(&normalized, 0)
}

fn nce_direction(g: &mut Graph, logits: NodeId, batch: usize) -> Result<NodeId> {
    let lse = g.logsumexp(logits)?;
    let mut diag = Vec::with_capacity(batch);
    for i in 0..batch {
        let row = g.slice(logits, 0, i, 1)?;
        let cell = g.slice(row, 1, i, 1)?;
        let cell = g.reshape(cell, &[1])?;
        diag.push(cell);
    }
    let diag = g.concat(&diag, 0)?;
    let per_row = g.sub(lse, diag)?;
    Ok(g.mean(per_row))
}

/// CLIP-style contrastive pretraining of the latent encoder against the
/// condition embeddings. Batches with a single distinct class are skipped
/// (their InfoNCE target is degenerate).
pub fn pretrain_lrm(
    codec: &Codec,
    latents: &[(Tensor, usize)],
    n_classes: usize,
    hyper: &LrmHyper,
    rng: &mut Rng,
) -> Result<(LatentRM, TrainTrace)> {
    if latents.is_empty() {
        return Err(Error::invalid("pretrain_lrm", "empty dataset"));
    }
    let d_z = codec.d_z;
    let mut lrm = LatentRM::init(d_z, n_classes, hyper, rng);
    let mut state = AdamState::new(&lrm.params);
    let hp = AdamParams::with_lr(hyper.pretrain_lr);
    let mut trace = TrainTrace::default();

    for iter in 0..hyper.pretrain_iters {
        let mut rows = Vec::with_capacity(hyper.pretrain_batch * d_z);
        let mut classes = Vec::with_capacity(hyper.pretrain_batch);
        for _ in 0..hyper.pretrain_batch {
            let idx = rng.uniform_usize(0, latents.len() - 1);
            let level = rng.uniform(0.0, hyper.pretrain_noise);
            for &v in latents[idx].0.values() {
                rows.push(v + level * rng.normal());
            }
            classes.push(latents[idx].1);
        }
        let distinct = {
            let mut seen = classes.clone();
            seen.sort_unstable();
            seen.dedup();
            seen.len()
        };
        if distinct < 2 {
            log::warn!("pretrain_lrm iter {iter}: single-class batch skipped");
            continue;
        }
        let zs = Tensor::new(vec![hyper.pretrain_batch, d_z], rows)?;
        let g = contrastive_loss_graph(&lrm, &zs, &classes, hyper.contrastive_scale)?;
        let (loss, grads) = crate::autodiff::eval_with_grads(&g, &lrm.params)?;
        ensure_finite(loss, "lrm-contrastive", iter)?;
        adam_step(&mut lrm.params, &grads, &mut state, &hp);
        if iter % hyper.log_every == 0 || iter + 1 == hyper.pretrain_iters {
            log::info!("lrm pretrain iter {iter}: loss {loss:.6}");
            trace.push(iter, loss);
        }
    }
    Ok((lrm, trace))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{generate, Preset};

    fn tiny_lrm(seed: u64) -> LatentRM {
        LatentRM::init(4, 3, &LrmHyper::default(), &mut Rng::new(seed))
    }

    #[test]
    fn reward_is_maximal_for_parallel_embeddings() {
        // force the encoder to be linear-ish and the table to match one
        // latent embedding exactly
        let mut lrm = tiny_lrm(1);
        let z = Tensor::vector(vec![0.4, -0.2, 0.9, 0.1]);
        // compute the embedding, then write it into class row 0
        let spec = MlpSpec::new(vec![4, 32, 16]);
        let emb = spec
            .eval(
                &lrm.params.strip_prefix("enc."),
                &Tensor::new(vec![1, 4], z.values().to_vec()).unwrap(),
            )
            .unwrap();
        let table = lrm.params.get_mut("cond_emb").unwrap();
        for (j, v) in emb.values().iter().enumerate() {
            table.values_mut()[j] = 2.0 * v; // parallel, different length
        }
        let r = lrm.reward(&z, Condition::Class(0)).unwrap();
        assert!(
            (r - lrm.reward_scale).abs() < 1e-6,
            "parallel embedding reward {r} vs scale {}",
            lrm.reward_scale
        );
    }

    #[test]
    fn reward_invariant_to_positive_latent_embedding_rescaling() {
        // cosine normalization: scaling the condition embedding row leaves
        // the reward unchanged
        let mut lrm = tiny_lrm(2);
        let z = Tensor::vector(vec![0.3, 0.3, -0.5, 0.8]);
        let before = lrm.reward(&z, Condition::Class(1)).unwrap();
        {
            let table = lrm.params.get_mut("cond_emb").unwrap();
            let e = lrm.embed_dim;
            for j in 0..e {
                table.values_mut()[e + j] *= 7.5;
            }
        }
        let after = lrm.reward(&z, Condition::Class(1)).unwrap();
        assert!(
            (before - after).abs() < 1e-9,
            "rescaling changed reward: {before} vs {after}"
        );
    }

    #[test]
    fn reward_gradient_wrt_latent_matches_fd() {
        let lrm = tiny_lrm(3);
        let mut g = Graph::new();
        let z = g.input("z", &[1, 4]).unwrap();
        let r = lrm
            .reward_rows_node(&mut g, z, &[Condition::Class(0)], &Binding::Frozen(&lrm.params))
            .unwrap();
        let out = g.reshape(r, &[1]).unwrap();
        let out = g.sum(out);
        g.set_output(out);
        let mut p = ParamSet::new();
        p.insert("z", Tensor::new(vec![1, 4], vec![0.3, -0.1, 0.7, 0.2]).unwrap());
        let err = crate::autodiff::grad_check(&g, &p, 1e-5).unwrap();
        assert!(err < 1e-4, "lrm reward FD error {err}");
    }

    #[test]
    fn preference_dist_basics() {
        assert_eq!(preference_dist(1.0, 1.0, 0.5).unwrap(), 0.5);
        // r_i - r_j = tau -> logistic(1)
        let p = preference_dist(2.0, 1.0, 1.0).unwrap();
        assert!((p - 0.7310585786300049).abs() < 1e-12, "logistic(1) = {p}");
        // tiny tau with a winner: saturates to 1 without overflow
        let p = preference_dist(1.0, 0.0, 1e-12).unwrap();
        assert_eq!(p, 1.0);
        let p = preference_dist(0.0, 1.0, 1e-12).unwrap();
        assert_eq!(p, 0.0);
        assert!(preference_dist(0.0, 0.0, 0.0).is_err());
    }

    #[test]
    fn preference_dist_invariances() {
        let (ri, rj, tau) = (1.3, -0.4, 0.7);
        let base = preference_dist(ri, rj, tau).unwrap();
        // shift invariance
        let shifted = preference_dist(ri + 5.0, rj + 5.0, tau).unwrap();
        assert!((base - shifted).abs() < 1e-15);
        // scale/temperature coupling
        let scaled = preference_dist(2.0 * ri, 2.0 * rj, 2.0 * tau).unwrap();
        assert!((base - scaled).abs() < 1e-15);
    }

    #[test]
    fn two_point_kl_hand_value() {
        // p = logistic(1), q = 1/2: evaluated from the two-point KL formula
        let p = preference_dist(1.0, 0.0, 1.0).unwrap();
        let kl = two_point_kl(p, 0.5);
        let direct = p * (p / 0.5).ln() + (1.0 - p) * ((1.0 - p) / 0.5).ln();
        assert!((kl - direct).abs() < 1e-15);
        assert!((kl - 0.11094407167172735).abs() < 1e-12, "kl = {kl}");
    }

    fn toy_setup(seed: u64) -> (LatentRM, ExpertRM, Codec) {
        let lrm = tiny_lrm(seed);
        let rm = ExpertRM::aligned(Preset::Mixture2d, 8, 3, 8.0, 1.0);
        let codec = Codec::init(8, 4, 0, &mut Rng::new(seed ^ 0xF00));
        (lrm, rm, codec)
    }

    fn toy_triplet(seed: u64) -> PreferenceTriplet {
        let mut rng = Rng::new(seed);
        PreferenceTriplet {
            real: Tensor::vector(rng.normal_vec(4)),
            student: Tensor::vector(rng.normal_vec(4)),
            target: Tensor::vector(rng.normal_vec(4)),
            cond: Condition::Class(1),
        }
    }

    #[test]
    fn lrm_loss_is_zero_when_p_equals_q() {
        assert_eq!(two_point_kl(0.5, 0.5), 0.0);
        assert_eq!(two_point_kl(0.73, 0.73), 0.0);
    }

    #[test]
    fn pair_kl_is_exactly_zero_for_matched_rewards_and_temperatures() {
        // Equal reward differences at equal temperature run through the
        // same softplus arithmetic on both sides, so the KL node is 0.0 to
        // the bit, not merely small.
        for delta in [-3.0, -0.7, 0.0, 0.2, 1.9] {
            let mut g = Graph::new();
            let d = g.constant(Tensor::vector(vec![delta]));
            let kl = preference_kl_node(&mut g, d, delta, 0.8, 0.8).unwrap();
            g.set_output(kl);
            let v = crate::autodiff::forward_eval(&g, &ParamSet::new()).unwrap();
            assert_eq!(v.item(), 0.0, "KL not exact at delta {delta}");
        }
    }

    #[test]
    fn pair_kl_matches_two_point_formula() {
        let (d_lrm, d_exp, tau_l, tau_e) = (0.9, -0.4, 0.7, 1.3);
        let mut g = Graph::new();
        let d = g.constant(Tensor::vector(vec![d_lrm]));
        let kl = preference_kl_node(&mut g, d, d_exp, tau_l, tau_e).unwrap();
        g.set_output(kl);
        let got = crate::autodiff::forward_eval(&g, &ParamSet::new())
            .unwrap()
            .item();
        let p = preference_dist(d_lrm, 0.0, tau_l).unwrap();
        let q = preference_dist(d_exp, 0.0, tau_e).unwrap();
        let expected = two_point_kl(p, q);
        assert!((got - expected).abs() < 1e-12, "{got} vs {expected}");
    }

    #[test]
    fn lrm_loss_nonnegative_and_finite() {
        let (lrm, rm, codec) = toy_setup(5);
        let triplets = vec![toy_triplet(1), toy_triplet(2)];
        let loss = lrm_loss(&lrm, &triplets, &rm, &codec, 1.0, 0.0).unwrap();
        assert!(loss.is_finite() && loss >= 0.0, "loss {loss}");
    }

    #[test]
    fn lrm_loss_handles_preference_only_expert() {
        let (lrm, _, codec) = toy_setup(6);
        let rm = ExpertRM::preference_only(Preset::Mixture2d, 8, 3, 8.0, 1.0);
        let triplets = vec![toy_triplet(3)];
        let loss = lrm_loss(&lrm, &triplets, &rm, &codec, 1.0, 0.0).unwrap();
        assert!(loss.is_finite() && loss >= 0.0, "loss {loss}");
    }

    #[test]
    fn lrm_loss_gradients_reach_sigma_only_and_match_fd() {
        let (lrm, rm, codec) = toy_setup(7);
        let triplets = vec![toy_triplet(4)];
        let g = lrm_loss_graph(&lrm, &triplets, &rm, &codec, 1.0, 0.1).unwrap();
        // every graph input is an LRM parameter: latents and expert are baked
        for name in g.input_names() {
            assert!(
                lrm.params.contains(name),
                "unexpected trainable input {name}"
            );
        }
        let err = crate::autodiff::grad_check(&g, &lrm.params, 1e-5).unwrap();
        assert!(err < 1e-4, "lrm loss FD error {err}");
    }

    #[test]
    fn pretraining_learns_class_retrieval() {
        let mut rng = Rng::new(11);
        let data = generate(Preset::Mixture2d, 16, 4, 512, &mut rng);
        let codec = {
            // affine codec straight onto the informative plane
            let mut c = Codec::init(16, 4, 0, &mut Rng::new(3));
            let w = c.params.get_mut("enc.w0").unwrap();
            for v in w.values_mut() {
                *v *= 0.5;
            }
            c
        };
        let latents = codec.encode_dataset(&data).unwrap();
        let hyper = LrmHyper {
            pretrain_iters: 400,
            ..LrmHyper::default()
        };
        let (lrm, trace) = pretrain_lrm(&codec, &latents, 4, &hyper, &mut Rng::new(13)).unwrap();
        assert!(
            trace.last_loss().unwrap() < trace.first_loss().unwrap(),
            "contrastive loss should decrease: {:?}",
            trace.entries
        );

        // held-out retrieval: correct class scores above a wrong class
        let held = generate(Preset::Mixture2d, 16, 4, 128, &mut Rng::new(17));
        let held_latents = codec.encode_dataset(&held).unwrap();
        let mut correct = 0.0;
        let mut wrong = 0.0;
        for (z, class) in &held_latents {
            correct += lrm.reward(z, Condition::Class(*class)).unwrap();
            wrong += lrm
                .reward(z, Condition::Class((*class + 1) % 4))
                .unwrap();
        }
        assert!(
            correct > wrong,
            "mean reward correct {correct} should beat wrong {wrong}"
        );
    }

    #[test]
    fn pretraining_is_seed_deterministic() {
        let data = generate(Preset::Mixture2d, 16, 4, 128, &mut Rng::new(1));
        let codec = Codec::init(16, 4, 0, &mut Rng::new(2));
        let latents = codec.encode_dataset(&data).unwrap();
        let hyper = LrmHyper {
            pretrain_iters: 30,
            ..LrmHyper::default()
        };
        let (l1, _) = pretrain_lrm(&codec, &latents, 4, &hyper, &mut Rng::new(9)).unwrap();
        let (l2, _) = pretrain_lrm(&codec, &latents, 4, &hyper, &mut Rng::new(9)).unwrap();
        assert_eq!(l1.params.max_abs_diff(&l2.params), 0.0);
    }
}
