//! Expert reward models over decoded space.
//!
//! Three variants share the same class-target geometry:
//! - `Aligned`: negative squared distance to the class target, the
//!   well-behaved reference expert.
//! - `Projection`: the same distance measured only inside a fixed random
//!   subspace. Directions orthogonal to the subspace are invisible, which
//!   is exactly the blind spot that reward over-optimization exploits.
//! - `PreferenceOnly`: exposes nothing but pairwise choices.

use crate::autodiff::{Graph, NodeId};
use crate::dataset::{class_targets, Preset};
use crate::mlp::stack_rows;
use crate::teacher::Condition;
use crate::{Error, Result, Rng, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExpertVariant {
    Aligned,
    Projection,
    PreferenceOnly,
}

impl std::fmt::Display for ExpertVariant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            ExpertVariant::Aligned => "aligned",
            ExpertVariant::Projection => "projection",
            ExpertVariant::PreferenceOnly => "preference-only",
        };
        f.write_str(s)
    }
}

impl std::str::FromStr for ExpertVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "aligned" => Ok(ExpertVariant::Aligned),
            "projection" => Ok(ExpertVariant::Projection),
            "preference-only" => Ok(ExpertVariant::PreferenceOnly),
            other => Err(Error::invalid(
                "reward.variant",
                format!("unknown variant `{other}`"),
            )),
        }
    }
}

/// Which of a pair an expert prefers; ties go to the first argument.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Choice {
    First,
    Second,
}

#[derive(Debug, Clone)]
pub struct ExpertRM {
    pub variant: ExpertVariant,
    /// One target per condition class, in decoded space.
    pub targets: Vec<Tensor>,
    /// Reward normalizer; defaults to d_x so magnitudes are
    /// dimension-independent.
    pub scale: f64,
    /// Orthonormal rows spanning the visible subspace (Projection only).
    pub basis: Option<Tensor>,
}

/// Seeded random orthonormal rows via Gram-Schmidt.
pub fn random_orthonormal_basis(d_vis: usize, d_x: usize, seed: u64) -> Tensor {
    assert!(d_vis <= d_x, "basis rank exceeds dimension");
    let mut rng = Rng::derive(seed, 0x0B_A515);
    let mut rows: Vec<Vec<f64>> = Vec::with_capacity(d_vis);
    while rows.len() < d_vis {
        let mut v = rng.normal_vec(d_x);
        for r in &rows {
            let dot: f64 = v.iter().zip(r).map(|(a, b)| a * b).sum();
            for (vi, ri) in v.iter_mut().zip(r) {
                *vi -= dot * ri;
            }
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-8 {
            for vi in v.iter_mut() {
                *vi /= norm;
            }
            rows.push(v);
        }
    }
    stack_rows(&rows)
}

/// Expert class targets: the preset's class centers scaled radially by
/// `stretch`. A stretch above 1 models a preference for exaggerated class
/// character that real data only partially satisfies, the analog of reward
/// models whose optimum lies off the data manifold.
pub fn stretched_targets(preset: Preset, d_x: usize, n_classes: usize, stretch: f64) -> Vec<Tensor> {
    class_targets(preset, d_x, n_classes)
        .into_iter()
        .map(|t| t.scale(stretch))
        .collect()
}

impl ExpertRM {
    pub fn aligned(preset: Preset, d_x: usize, n_classes: usize, scale: f64, stretch: f64) -> Self {
        ExpertRM {
            variant: ExpertVariant::Aligned,
            targets: stretched_targets(preset, d_x, n_classes, stretch),
            scale,
            basis: None,
        }
    }

    #[allow(clippy::too_many_arguments)]
    pub fn projection(
        preset: Preset,
        d_x: usize,
        n_classes: usize,
        scale: f64,
        stretch: f64,
        d_vis: usize,
        seed: u64,
    ) -> Self {
        ExpertRM {
            variant: ExpertVariant::Projection,
            targets: stretched_targets(preset, d_x, n_classes, stretch),
            scale,
            basis: Some(random_orthonormal_basis(d_vis, d_x, seed)),
        }
    }

    pub fn preference_only(
        preset: Preset,
        d_x: usize,
        n_classes: usize,
        scale: f64,
        stretch: f64,
    ) -> Self {
        ExpertRM {
            variant: ExpertVariant::PreferenceOnly,
            targets: stretched_targets(preset, d_x, n_classes, stretch),
            scale,
            basis: None,
        }
    }

    pub fn d_x(&self) -> usize {
        self.targets[0].numel()
    }

    pub fn is_differentiable(&self) -> bool {
        self.variant != ExpertVariant::PreferenceOnly
    }

    fn class_of(&self, cond: Condition) -> Result<usize> {
        match cond {
            Condition::Class(c) if c < self.targets.len() => Ok(c),
            Condition::Class(c) => Err(Error::invalid(
                "expert_reward",
                format!("class {c} out of range"),
            )),
            Condition::Null => Err(Error::invalid(
                "expert_reward",
                "expert rewards are defined for class conditions only",
            )),
        }
    }

    /// Internal score shared by every variant; `PreferenceOnly` keeps it
    /// private behind `prefer`.
    fn score(&self, x: &Tensor, cond: Condition) -> Result<f64> {
        let class = self.class_of(cond)?;
        let target = &self.targets[class];
        let diff = x.sub(target);
        let sq = match (self.variant, &self.basis) {
            (ExpertVariant::Projection, Some(basis)) => {
                let d_vis = basis.rows();
                let mut acc = 0.0;
                for r in 0..d_vis {
                    let proj: f64 = basis
                        .row(r)
                        .iter()
                        .zip(diff.values())
                        .map(|(p, d)| p * d)
                        .sum();
                    acc += proj * proj;
                }
                acc
            }
            _ => diff.sq_norm(),
        };
        Ok(-sq / self.scale)
    }

    /// Reward of a decoded sample under a class condition. Errors for the
    /// preference-only variant, which exposes no scalar reward.
    pub fn reward(&self, x: &Tensor, cond: Condition) -> Result<f64> {
        if !self.is_differentiable() {
            return Err(Error::invalid(
                "expert_reward",
                "preference-only expert: use expert_prefer",
            ));
        }
        self.score(x, cond)
    }

    /// Pairwise preference, available for every variant.
    pub fn prefer(&self, x_first: &Tensor, x_second: &Tensor, cond: Condition) -> Result<Choice> {
        let a = self.score(x_first, cond)?;
        let b = self.score(x_second, cond)?;
        Ok(if b > a { Choice::Second } else { Choice::First })
    }

    /// Batch-mean reward node over decoded rows [B, d_x] with per-row
    /// conditions. Differentiable in `x`.
    pub fn mean_reward_node(
        &self,
        g: &mut Graph,
        x: NodeId,
        conds: &[Condition],
    ) -> Result<NodeId> {
        if !self.is_differentiable() {
            return Err(Error::invalid(
                "expert_reward",
                "preference-only expert has no differentiable reward",
            ));
        }
        let rows: Vec<Vec<f64>> = conds
            .iter()
            .map(|&c| self.class_of(c).map(|cl| self.targets[cl].values().to_vec()))
            .collect::<Result<_>>()?;
        let targets = g.constant(stack_rows(&rows));
        let diff = g.sub(x, targets)?;
        let projected = match (self.variant, &self.basis) {
            (ExpertVariant::Projection, Some(basis)) => {
                let bt = g.constant(transpose_tensor(basis));
                g.matmul(diff, bt)?
            }
            _ => diff,
        };
        let sq = g.square(projected);
        let width = g.shape(sq)[1];
        let ones = g.constant(Tensor::full(&[width, 1], 1.0));
        let row_sq = g.matmul(sq, ones)?;
        let mean_sq = g.mean(row_sq);
        Ok(g.mul_scalar(mean_sq, -1.0 / self.scale))
    }
}

fn transpose_tensor(t: &Tensor) -> Tensor {
    let (r, c) = (t.rows(), t.cols());
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = t.values()[i * c + j];
        }
    }
    Tensor::new(vec![c, r], out).expect("transpose")
}

/// Out-of-subspace component `(I - P^T P) x` for a decoded row.
pub fn blind_component(basis: &Tensor, x: &[f64]) -> Vec<f64> {
    let mut out = x.to_vec();
    for r in 0..basis.rows() {
        let row = basis.row(r);
        let dot: f64 = row.iter().zip(x).map(|(p, v)| p * v).sum();
        for (o, p) in out.iter_mut().zip(row) {
            *o -= dot * p;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::ParamSet;

    fn aligned_rm() -> ExpertRM {
        ExpertRM::aligned(Preset::Mixture2d, 16, 4, 16.0, 1.0)
    }

    fn projection_rm(seed: u64) -> ExpertRM {
        ExpertRM::projection(Preset::Mixture2d, 16, 4, 16.0, 1.0, 8, seed)
    }

    #[test]
    fn reward_is_zero_at_the_class_target() {
        let rm = aligned_rm();
        let m = rm.targets[2].clone();
        assert_eq!(rm.reward(&m, Condition::Class(2)).unwrap(), 0.0);
        let off = m.axpy(1.0, &Tensor::vector(vec![1.0; 16]));
        assert!(rm.reward(&off, Condition::Class(2)).unwrap() < 0.0);
    }

    #[test]
    fn projection_basis_is_orthonormal() {
        let rm = projection_rm(9);
        let basis = rm.basis.as_ref().unwrap();
        for i in 0..basis.rows() {
            for j in 0..basis.rows() {
                let dot: f64 = basis
                    .row(i)
                    .iter()
                    .zip(basis.row(j))
                    .map(|(a, b)| a * b)
                    .sum();
                let expected = if i == j { 1.0 } else { 0.0 };
                assert!(
                    (dot - expected).abs() < 1e-10,
                    "P P^T [{i},{j}] = {dot}"
                );
            }
        }
    }

    #[test]
    fn projection_reward_blind_to_orthogonal_directions() {
        let rm = projection_rm(3);
        let basis = rm.basis.as_ref().unwrap();
        let m = rm.targets[0].clone();
        // v orthogonal to the row space: project out all basis rows
        let v = blind_component(basis, &Rng::new(4).normal_vec(16));
        let x = m.add(&Tensor::vector(v));
        let r = rm.reward(&x, Condition::Class(0)).unwrap();
        assert!(
            r.abs() < 1e-20,
            "blind-direction perturbation changed reward: {r}"
        );
    }

    #[test]
    fn preference_only_reward_errors_but_prefer_works() {
        let rm = ExpertRM::preference_only(Preset::Mixture2d, 16, 4, 16.0, 1.0);
        let m = rm.targets[1].clone();
        assert!(rm.reward(&m, Condition::Class(1)).is_err());
        let far = m.axpy(2.0, &Tensor::vector(vec![1.0; 16]));
        assert_eq!(rm.prefer(&m, &far, Condition::Class(1)).unwrap(), Choice::First);
        assert_eq!(rm.prefer(&far, &m, Condition::Class(1)).unwrap(), Choice::Second);
    }

    #[test]
    fn ties_go_to_the_first_argument() {
        let rm = aligned_rm();
        let x = rm.targets[0].axpy(0.5, &Tensor::vector(vec![1.0; 16]));
        assert_eq!(rm.prefer(&x, &x, Condition::Class(0)).unwrap(), Choice::First);
    }

    #[test]
    fn prefer_agrees_with_reward_sign_on_random_pairs() {
        let rm = aligned_rm();
        let mut rng = Rng::new(17);
        for _ in 0..1000 {
            let a = Tensor::vector(rng.normal_vec(16));
            let b = Tensor::vector(rng.normal_vec(16));
            let cond = Condition::Class(rng.uniform_usize(0, 3));
            let ra = rm.reward(&a, cond).unwrap();
            let rb = rm.reward(&b, cond).unwrap();
            let expected = if rb > ra { Choice::Second } else { Choice::First };
            assert_eq!(rm.prefer(&a, &b, cond).unwrap(), expected);
        }
    }

    #[test]
    fn reward_gradient_matches_finite_differences() {
        for rm in [aligned_rm(), projection_rm(7)] {
            let mut g = Graph::new();
            let x = g.input("x", &[2, 16]).unwrap();
            let r = rm
                .mean_reward_node(&mut g, x, &[Condition::Class(0), Condition::Class(3)])
                .unwrap();
            g.set_output(r);
            let mut p = ParamSet::new();
            p.insert(
                "x",
                Tensor::new(vec![2, 16], Rng::new(5).normal_vec(32)).unwrap(),
            );
            let err = crate::autodiff::grad_check(&g, &p, 1e-5).unwrap();
            assert!(err < 1e-4, "{:?} FD error {err}", rm.variant);
        }
    }

    #[test]
    fn mean_reward_node_matches_host_reward() {
        let rm = projection_rm(2);
        let xs = Tensor::new(vec![3, 16], Rng::new(6).normal_vec(48)).unwrap();
        let conds = [Condition::Class(0), Condition::Class(1), Condition::Class(2)];
        let mut host = 0.0;
        for i in 0..3 {
            host += rm
                .reward(&Tensor::vector(xs.row(i).to_vec()), conds[i])
                .unwrap();
        }
        host /= 3.0;
        let mut g = Graph::new();
        let x = g.constant(xs);
        let r = rm.mean_reward_node(&mut g, x, &conds).unwrap();
        g.set_output(r);
        let got = crate::autodiff::forward_eval(&g, &ParamSet::new())
            .unwrap()
            .item();
        assert!((got - host).abs() < 1e-12, "{got} vs {host}");
    }
}
