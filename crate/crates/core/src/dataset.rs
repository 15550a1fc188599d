//! Toy labeled datasets in decoded space.
//!
//! Three presets: class-structured Gaussian mixtures supported on a planar
//! or full-rank subspace, and a swiss roll. Every sample carries a class id
//! used as the generation condition. Class targets (the analytic cluster
//! centers) double as the expert reward targets, so they depend only on the
//! preset geometry, never on the run seed.

use std::fmt;
use std::str::FromStr;

use crate::{Error, Result, Rng, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Preset {
    Mixture2d,
    Mixture16d,
    SwissRoll,
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Preset::Mixture2d => "mixture-2d",
            Preset::Mixture16d => "mixture-16d",
            Preset::SwissRoll => "swiss-roll",
        };
        f.write_str(s)
    }
}

impl FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mixture-2d" => Ok(Preset::Mixture2d),
            "mixture-16d" => Ok(Preset::Mixture16d),
            "swiss-roll" => Ok(Preset::SwissRoll),
            other => Err(Error::invalid(
                "dataset.preset",
                format!("unknown preset `{other}`"),
            )),
        }
    }
}

/// Within-class noise placed in the structured coordinates.
const CLUSTER_STD: f64 = 0.25;
/// Small isotropic noise in the remaining ambient coordinates.
const AMBIENT_STD: f64 = 0.05;
/// Radius of the mixture-2d class circle.
const CIRCLE_RADIUS: f64 = 2.0;
/// Fixed stream tag for mixture-16d center placement.
const CENTER_STREAM: u64 = 0xC3A7;

#[derive(Debug, Clone)]
pub struct Dataset {
    pub xs: Vec<Tensor>,
    pub classes: Vec<usize>,
    pub d_x: usize,
    pub n_classes: usize,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.xs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.xs.is_empty()
    }

    /// Total variance: mean squared deviation from the mean, summed over
    /// coordinates. Reference scale for reconstruction thresholds.
    pub fn total_variance(&self) -> f64 {
        let n = self.len() as f64;
        let mut mean = vec![0.0; self.d_x];
        for x in &self.xs {
            for (m, v) in mean.iter_mut().zip(x.values()) {
                *m += v / n;
            }
        }
        let mut var = 0.0;
        for x in &self.xs {
            for (m, v) in mean.iter().zip(x.values()) {
                var += (v - m) * (v - m) / n;
            }
        }
        var
    }

    /// Rows of all samples as one [n, d_x] matrix.
    pub fn as_matrix(&self) -> Tensor {
        let mut values = Vec::with_capacity(self.len() * self.d_x);
        for x in &self.xs {
            values.extend_from_slice(x.values());
        }
        Tensor::new(vec![self.len(), self.d_x], values).expect("dataset matrix")
    }
}

/// Analytic class target for `class` under a preset geometry.
pub fn class_target(preset: Preset, d_x: usize, n_classes: usize, class: usize) -> Tensor {
    let mut v = vec![0.0; d_x];
    match preset {
        Preset::Mixture2d => {
            let angle = 2.0 * std::f64::consts::PI * class as f64 / n_classes as f64;
            v[0] = CIRCLE_RADIUS * angle.cos();
            v[1] = CIRCLE_RADIUS * angle.sin();
        }
        Preset::Mixture16d => {
            let mut rng = Rng::derive(CENTER_STREAM, class as u64);
            for vi in v.iter_mut() {
                *vi = 1.5 * rng.normal();
            }
        }
        Preset::SwissRoll => {
            let (lo, hi) = roll_angle_range(class, n_classes);
            let theta = 0.5 * (lo + hi);
            let r = roll_radius(theta);
            v[0] = r * theta.cos();
            v[1] = r * theta.sin();
        }
    }
    Tensor::vector(v)
}

pub fn class_targets(preset: Preset, d_x: usize, n_classes: usize) -> Vec<Tensor> {
    (0..n_classes)
        .map(|c| class_target(preset, d_x, n_classes, c))
        .collect()
}

fn roll_angle_range(class: usize, n_classes: usize) -> (f64, f64) {
    let start = 1.5 * std::f64::consts::PI;
    let end = 4.5 * std::f64::consts::PI;
    let width = (end - start) / n_classes as f64;
    (
        start + width * class as f64,
        start + width * (class + 1) as f64,
    )
}

fn roll_radius(theta: f64) -> f64 {
    // radius grows linearly with angle, max ~2.2
    theta / (4.5 * std::f64::consts::PI) * 2.2
}

/// Draw `n` labeled samples. Classes cycle deterministically so every
/// generated set is balanced; the within-class noise comes from `rng`.
pub fn generate(preset: Preset, d_x: usize, n_classes: usize, n: usize, rng: &mut Rng) -> Dataset {
    let mut xs = Vec::with_capacity(n);
    let mut classes = Vec::with_capacity(n);
    for i in 0..n {
        let class = i % n_classes;
        let x = match preset {
            Preset::Mixture2d | Preset::Mixture16d => {
                let target = class_target(preset, d_x, n_classes, class);
                let structured = if preset == Preset::Mixture2d { 2 } else { d_x };
                let mut v = target.into_values();
                for (d, vd) in v.iter_mut().enumerate() {
                    let std = if d < structured { CLUSTER_STD } else { AMBIENT_STD };
                    *vd += std * rng.normal();
                }
                Tensor::vector(v)
            }
            Preset::SwissRoll => {
                let (lo, hi) = roll_angle_range(class, n_classes);
                let theta = rng.uniform(lo, hi);
                let r = roll_radius(theta);
                let mut v = vec![0.0; d_x];
                v[0] = r * theta.cos() + AMBIENT_STD * rng.normal();
                v[1] = r * theta.sin() + AMBIENT_STD * rng.normal();
                for vd in v.iter_mut().skip(2) {
                    *vd = AMBIENT_STD * rng.normal();
                }
                Tensor::vector(v)
            }
        };
        xs.push(x);
        classes.push(class);
    }
    Dataset {
        xs,
        classes,
        d_x,
        n_classes,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn generation_is_deterministic() {
        let a = generate(Preset::Mixture2d, 16, 4, 64, &mut Rng::new(5));
        let b = generate(Preset::Mixture2d, 16, 4, 64, &mut Rng::new(5));
        for (x, y) in a.xs.iter().zip(&b.xs) {
            assert_eq!(x.values(), y.values());
        }
    }

    #[test]
    fn class_targets_independent_of_seed() {
        let t1 = class_target(Preset::Mixture16d, 16, 4, 2);
        let t2 = class_target(Preset::Mixture16d, 16, 4, 2);
        assert_eq!(t1.values(), t2.values());
    }

    #[test]
    fn mixture2d_clusters_near_targets() {
        let ds = generate(Preset::Mixture2d, 16, 4, 4000, &mut Rng::new(1));
        for c in 0..4 {
            let target = class_target(Preset::Mixture2d, 16, 4, c);
            let members: Vec<&Tensor> = ds
                .xs
                .iter()
                .zip(&ds.classes)
                .filter(|(_, &cl)| cl == c)
                .map(|(x, _)| x)
                .collect();
            let n = members.len() as f64;
            for d in 0..2 {
                let mean: f64 = members.iter().map(|x| x.values()[d]).sum::<f64>() / n;
                assert!(
                    (mean - target.values()[d]).abs() < 0.05,
                    "class {c} dim {d}: sample mean {mean} vs target {}",
                    target.values()[d]
                );
            }
        }
    }

    #[test]
    fn preset_parses_roundtrip() {
        for p in [Preset::Mixture2d, Preset::Mixture16d, Preset::SwissRoll] {
            assert_eq!(p.to_string().parse::<Preset>().unwrap(), p);
        }
        assert!("bogus".parse::<Preset>().is_err());
    }

    #[test]
    fn classes_are_balanced() {
        let ds = generate(Preset::SwissRoll, 16, 4, 400, &mut Rng::new(2));
        for c in 0..4 {
            let count = ds.classes.iter().filter(|&&x| x == c).count();
            assert_eq!(count, 100);
        }
    }
}
