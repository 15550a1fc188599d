//! Quantitative evaluation: distribution distance, reward statistics,
//! out-of-subspace energy, self-consistency gap, and the metrics CSV.

use std::io::Write as _;
use std::path::Path;

use crate::checkpoint::Checkpoint;
use crate::cm::{default_tau_sequence, huber_distance, multistep_sample, ConsistencyModel};
use crate::codec::Codec;
use crate::dataset::{generate, Dataset};
use crate::lrm::LatentRM;
use crate::reward::{blind_component, Choice, ExpertRM};
use crate::schedule::NoiseSchedule;
use crate::teacher::{class_prior_conds, Condition};
use crate::{Error, Result, Rng, Tensor};

/// Stream tag for the held-out evaluation dataset.
const EVAL_DATA_STREAM: u64 = 0xE7A1;
/// Stream tag for evaluation sampling.
const EVAL_SAMPLE_STREAM: u64 = 0xE7A2;
/// Stream tag for gap and agreement pair draws.
const EVAL_PAIR_STREAM: u64 = 0xE7A3;

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRecord {
    pub run_id: String,
    pub iteration: u64,
    pub sliced_wasserstein: f64,
    pub mean_expert_reward: f64,
    pub mean_lrm_reward: f64,
    pub oos_energy_ratio: f64,
    pub self_consistency_gap: f64,
    pub lrm_expert_agreement: f64,
}

pub const METRICS_HEADER: &str = "run_id,iteration,sliced_wasserstein,mean_expert_reward,mean_lrm_reward,oos_energy_ratio,self_consistency_gap,lrm_expert_agreement";

impl MetricsRecord {
    pub fn to_csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{}",
            self.run_id,
            self.iteration,
            self.sliced_wasserstein,
            self.mean_expert_reward,
            self.mean_lrm_reward,
            self.oos_energy_ratio,
            self.self_consistency_gap,
            self.lrm_expert_agreement
        )
    }

    pub fn is_finite(&self) -> bool {
        [
            self.sliced_wasserstein,
            self.mean_expert_reward,
            self.mean_lrm_reward,
            self.oos_energy_ratio,
            self.self_consistency_gap,
            self.lrm_expert_agreement,
        ]
        .iter()
        .all(|v| v.is_finite())
    }
}

/// Append records to `metrics.csv`, writing the header for a fresh file.
pub fn append_metrics(path: &Path, records: &[MetricsRecord]) -> Result<()> {
    let fresh = !path.exists();
    let mut f = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)?;
    if fresh {
        writeln!(f, "{METRICS_HEADER}")?;
    }
    for r in records {
        writeln!(f, "{}", r.to_csv_row())?;
    }
    Ok(())
}

/// Exact 1-D Wasserstein-1 distance between two sorted empirical
/// distributions, via the quantile-interval walk (sizes may differ).
fn wasserstein_1d_sorted(xs: &[f64], ys: &[f64]) -> f64 {
    let (n, m) = (xs.len(), ys.len());
    let mut acc = 0.0;
    let mut q = 0.0;
    let (mut i, mut j) = (0usize, 0usize);
    while i < n && j < m {
        let qx = (i + 1) as f64 / n as f64;
        let qy = (j + 1) as f64 / m as f64;
        let q_next = qx.min(qy);
        acc += (xs[i] - ys[j]).abs() * (q_next - q);
        q = q_next;
        if qx <= q_next {
            i += 1;
        }
        if qy <= q_next {
            j += 1;
        }
    }
    acc
}

fn projection_distance(a: &Tensor, b: &Tensor, dir: &[f64]) -> f64 {
    let project = |t: &Tensor| -> Vec<f64> {
        (0..t.rows())
            .map(|i| t.row(i).iter().zip(dir).map(|(x, d)| x * d).sum())
            .collect()
    };
    let mut pa = project(a);
    let mut pb = project(b);
    pa.sort_unstable_by(|x, y| x.partial_cmp(y).expect("finite projections"));
    pb.sort_unstable_by(|x, y| x.partial_cmp(y).expect("finite projections"));
    wasserstein_1d_sorted(&pa, &pb)
}

/// Sliced Wasserstein-1 distance between two sample sets [n, d] and [m, d]:
/// the average 1-D distance over `n_proj` seeded random unit directions.
///
/// Projection k draws its direction from `Rng::derive(seed, k)`, so the
/// result is independent of how projections are distributed over threads.
pub fn sliced_wasserstein(
    a: &Tensor,
    b: &Tensor,
    n_proj: usize,
    seed: u64,
    threads: usize,
) -> Result<f64> {
    if a.shape().len() != 2 || b.shape().len() != 2 || a.cols() != b.cols() {
        return Err(Error::ShapeMismatch {
            node: "sliced_wasserstein".into(),
            expected: a.shape().to_vec(),
            got: b.shape().to_vec(),
        });
    }
    if a.rows() == 0 || b.rows() == 0 || n_proj == 0 {
        return Err(Error::invalid(
            "sliced_wasserstein",
            "need non-empty sample sets and at least one projection",
        ));
    }
    let dim = a.cols();
    let direction = |k: usize| -> Vec<f64> {
        let mut rng = Rng::derive(seed, k as u64);
        let mut d = rng.normal_vec(dim);
        let norm = d.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-300);
        for x in d.iter_mut() {
            *x /= norm;
        }
        d
    };

    let mut per_proj = vec![0.0f64; n_proj];
    if threads <= 1 {
        for (k, slot) in per_proj.iter_mut().enumerate() {
            *slot = projection_distance(a, b, &direction(k));
        }
    } else {
        let chunk = n_proj.div_ceil(threads);
        std::thread::scope(|scope| {
            for (t, slots) in per_proj.chunks_mut(chunk).enumerate() {
                let a = &a;
                let b = &b;
                let direction = &direction;
                scope.spawn(move || {
                    for (off, slot) in slots.iter_mut().enumerate() {
                        *slot = projection_distance(a, b, &direction(t * chunk + off));
                    }
                });
            }
        });
    }
    // summed in projection order regardless of thread layout
    Ok(per_proj.iter().sum::<f64>() / n_proj as f64)
}

/// Mean squared norm of the component orthogonal to the basis rowspace,
/// normalized by the same statistic on reference (real) samples.
pub fn oos_energy_ratio(samples: &Tensor, reference: &Tensor, basis: &Tensor) -> Result<f64> {
    let energy = |t: &Tensor| -> f64 {
        let mut acc = 0.0;
        for i in 0..t.rows() {
            let blind = blind_component(basis, t.row(i));
            acc += blind.iter().map(|v| v * v).sum::<f64>();
        }
        acc / t.rows() as f64
    };
    let denom = energy(reference);
    if denom <= 0.0 {
        return Err(Error::invalid(
            "oos_energy",
            "reference data carries no energy outside the visible subspace",
        ));
    }
    Ok(energy(samples) / denom)
}

/// Mean pseudo-Huber distance between consistency mappings taken at two
/// different steps of the same forward-perturbed trajectory (shared data
/// point, shared noise direction, per-step scaling).
#[allow(clippy::too_many_arguments)]
pub fn self_consistency_gap(
    model: &ConsistencyModel,
    eval_latents: &[(Tensor, usize)],
    sched: &NoiseSchedule,
    n_pairs: usize,
    omega: f64,
    huber_c: f64,
    seed: u64,
) -> Result<f64> {
    if n_pairs == 0 {
        return Err(Error::invalid("self_consistency_gap", "need n_pairs >= 1"));
    }
    let mut rng = Rng::derive(seed, EVAL_PAIR_STREAM);
    let d_z = model.d_z;
    let n_grid = sched.len();

    let mut rows_a = Vec::with_capacity(n_pairs * d_z);
    let mut rows_b = Vec::with_capacity(n_pairs * d_z);
    let mut ns_a = Vec::with_capacity(n_pairs);
    let mut ns_b = Vec::with_capacity(n_pairs);
    let mut conds = Vec::with_capacity(n_pairs);
    for _ in 0..n_pairs {
        let (z, class) = &eval_latents[rng.uniform_usize(0, eval_latents.len() - 1)];
        let noise = rng.normal_vec(d_z);
        let na = rng.uniform_usize(1, n_grid);
        let nb = {
            let mut nb = rng.uniform_usize(1, n_grid);
            while nb == na {
                nb = rng.uniform_usize(1, n_grid);
            }
            nb
        };
        for d in 0..d_z {
            rows_a.push(sched.alpha(na) * z.values()[d] + sched.beta(na) * noise[d]);
            rows_b.push(sched.alpha(nb) * z.values()[d] + sched.beta(nb) * noise[d]);
        }
        ns_a.push(na);
        ns_b.push(nb);
        conds.push(Condition::Class(*class));
    }
    let za = Tensor::new(vec![n_pairs, d_z], rows_a)?;
    let zb = Tensor::new(vec![n_pairs, d_z], rows_b)?;
    let omegas = vec![omega; n_pairs];
    let fa = model.apply(&za, &conds, &ns_a, &omegas)?;
    let fb = model.apply(&zb, &conds, &ns_b, &omegas)?;

    let mut total = 0.0;
    for i in 0..n_pairs {
        total += huber_distance(
            &Tensor::vector(fa.row(i).to_vec()),
            &Tensor::vector(fb.row(i).to_vec()),
            huber_c,
        )?;
    }
    Ok(total / n_pairs as f64)
}

/// Fraction of pairs where the LRM's preference matches the expert's,
/// over seeded pairs drawn from a candidate pool. Pair conditions follow
/// the first candidate's class so every comparison is class-anchored.
pub fn lrm_expert_agreement(
    lrm: &LatentRM,
    rm: &ExpertRM,
    codec: &Codec,
    pool: &[(Tensor, usize)],
    n_pairs: usize,
    seed: u64,
) -> Result<f64> {
    if pool.len() < 2 {
        return Err(Error::invalid("lrm_expert_agreement", "pool too small"));
    }
    let mut rng = Rng::derive(seed, EVAL_PAIR_STREAM ^ 0x5A5A);
    let mut agree = 0usize;
    for _ in 0..n_pairs {
        let i = rng.uniform_usize(0, pool.len() - 1);
        let j = {
            let mut j = rng.uniform_usize(0, pool.len() - 1);
            while j == i {
                j = rng.uniform_usize(0, pool.len() - 1);
            }
            j
        };
        let cond = Condition::Class(pool[i].1);
        let (za, zb) = (&pool[i].0, &pool[j].0);
        let ra = lrm.reward(za, cond)?;
        let rb = lrm.reward(zb, cond)?;
        let lrm_choice = if rb > ra { Choice::Second } else { Choice::First };
        let xa = codec.decode_detached(za)?;
        let xb = codec.decode_detached(zb)?;
        let expert_choice = rm.prefer(&xa, &xb, cond)?;
        if lrm_choice == expert_choice {
            agree += 1;
        }
    }
    Ok(agree as f64 / n_pairs as f64)
}

/// Build a mixed candidate pool for agreement evaluation: real latents,
/// noise-perturbed real latents, and (when given) model samples.
pub fn agreement_pool(
    real: &[(Tensor, usize)],
    samples: Option<(&Tensor, &[Condition])>,
    seed: u64,
) -> Vec<(Tensor, usize)> {
    let mut rng = Rng::derive(seed, EVAL_PAIR_STREAM ^ 0x77);
    let mut pool: Vec<(Tensor, usize)> = Vec::new();
    for (z, c) in real {
        pool.push((z.clone(), *c));
        let scale = rng.uniform(0.2, 1.5);
        let noisy = z.axpy(scale, &Tensor::vector(rng.normal_vec(z.numel())));
        pool.push((noisy, *c));
    }
    if let Some((rows, conds)) = samples {
        for i in 0..rows.rows() {
            if let Condition::Class(c) = conds[i] {
                pool.push((Tensor::vector(rows.row(i).to_vec()), c));
            }
        }
    }
    pool
}

/// Decoded multistep samples with balanced class conditions.
pub fn sample_decoded(
    model: &ConsistencyModel,
    codec: &Codec,
    sched: &NoiseSchedule,
    steps: usize,
    omega: f64,
    n_samples: usize,
    n_classes: usize,
    seed: u64,
) -> Result<(Tensor, Vec<Condition>)> {
    let conds = class_prior_conds(n_samples, n_classes);
    let taus = default_tau_sequence(sched.len(), steps);
    let latents = multistep_sample(model, sched, &taus, omega, &conds, seed)?;
    let decoded = codec.decode(&latents)?;
    Ok((decoded, conds))
}

/// Evaluate a distillation checkpoint: one record per configured sampling
/// step count. `mean_lrm_reward` and `lrm_expert_agreement` are zero when
/// the checkpoint carries no LRM block, and `oos_energy_ratio` is zero for
/// non-projection reward variants.
pub fn run_eval(ckpt: &Checkpoint, codec_ckpt: &Checkpoint) -> Result<Vec<MetricsRecord>> {
    let cfg = &ckpt.config;
    let cm = ckpt.consistency_model()?;
    let codec = codec_ckpt.codec()?;
    let sched = NoiseSchedule::build(cfg.sched_n, cfg.b_min, cfg.b_max)?;
    let rm = ckpt.expert_rm();
    let lrm = if ckpt.has_block("lrm.") {
        Some(ckpt.latent_rm()?)
    } else {
        None
    };

    let mut data_rng = Rng::derive(cfg.seed, EVAL_DATA_STREAM);
    let heldout: Dataset = generate(
        cfg.preset,
        cfg.d_x,
        cfg.n_classes,
        cfg.eval_n_samples,
        &mut data_rng,
    );
    let heldout_matrix = heldout.as_matrix();
    let heldout_latents = codec.encode_dataset(&heldout)?;
    let omega = cfg.eval_omega();

    let gap = self_consistency_gap(
        &cm,
        &heldout_latents,
        &sched,
        cfg.eval_gap_pairs,
        omega,
        cfg.huber_c,
        cfg.seed,
    )?;

    let mut records = Vec::with_capacity(cfg.eval_steps.len());
    for &steps in &cfg.eval_steps {
        let seed = Rng::derive(cfg.seed, EVAL_SAMPLE_STREAM ^ steps as u64).state();
        let (decoded, conds) = sample_decoded(
            &cm,
            &codec,
            &sched,
            steps,
            omega,
            cfg.eval_n_samples,
            cfg.n_classes,
            seed,
        )?;

        let sw = sliced_wasserstein(
            &decoded,
            &heldout_matrix,
            cfg.eval_n_proj,
            cfg.seed,
            cfg.eval_threads,
        )?;

        let mean_expert = if rm.is_differentiable() {
            let mut acc = 0.0;
            for i in 0..decoded.rows() {
                acc += rm.reward(&Tensor::vector(decoded.row(i).to_vec()), conds[i])?;
            }
            acc / decoded.rows() as f64
        } else {
            0.0
        };

        let oos = match &rm.basis {
            Some(basis) => oos_energy_ratio(&decoded, &heldout_matrix, basis)?,
            None => 0.0,
        };

        let (mean_lrm, agreement) = match &lrm {
            Some(lrm) => {
                let latents = codec.encode(&decoded)?;
                let mut acc = 0.0;
                for i in 0..latents.rows() {
                    acc += lrm.reward(&Tensor::vector(latents.row(i).to_vec()), conds[i])?;
                }
                let mean = acc / latents.rows() as f64;
                let pool_real: Vec<(Tensor, usize)> = heldout_latents
                    .iter()
                    .take(256)
                    .map(|(z, c)| (z.clone(), *c))
                    .collect();
                let pool = agreement_pool(&pool_real, Some((&latents, &conds)), cfg.seed);
                let agreement =
                    lrm_expert_agreement(lrm, &rm, &codec, &pool, 1000, cfg.seed)?;
                (mean, agreement)
            }
            None => (0.0, 0.0),
        };

        records.push(MetricsRecord {
            run_id: format!("{}:{}step", cfg.run_id, steps),
            iteration: ckpt.iteration,
            sliced_wasserstein: sw,
            mean_expert_reward: mean_expert,
            mean_lrm_reward: mean_lrm,
            oos_energy_ratio: oos,
            self_consistency_gap: gap,
            lrm_expert_agreement: agreement,
        });
    }
    Ok(records)
}
