//! Small MLP building blocks shared by all model components.

use crate::autodiff::{Graph, NodeId, ParamSet};
use crate::{Result, Rng, Tensor};

/// How parameters enter a graph: as trainable inputs bound by name at
/// evaluation time, or baked in as constants (no gradient, no binding).
pub enum Binding<'a> {
    Trainable,
    Frozen(&'a ParamSet),
}

impl Binding<'_> {
    pub fn node(&self, g: &mut Graph, name: &str, shape: &[usize]) -> Result<NodeId> {
        match self {
            Binding::Trainable => g.input(name, shape),
            Binding::Frozen(params) => {
                let t = params
                    .get(name)
                    .ok_or_else(|| crate::Error::MissingInput { name: name.into() })?;
                Ok(g.constant(t.clone()))
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Silu,
    Tanh,
}

/// Fully-connected stack described by its layer widths.
#[derive(Debug, Clone)]
pub struct MlpSpec {
    pub dims: Vec<usize>,
    pub activation: Activation,
}

impl MlpSpec {
    pub fn new(dims: Vec<usize>) -> Self {
        MlpSpec {
            dims,
            activation: Activation::Silu,
        }
    }

    pub fn layer_count(&self) -> usize {
        self.dims.len() - 1
    }

    /// Seeded initialization: weights N(0, 1/fan_in), biases zero.
    pub fn init_params(&self, rng: &mut Rng) -> ParamSet {
        let mut params = ParamSet::new();
        for l in 0..self.layer_count() {
            let (din, dout) = (self.dims[l], self.dims[l + 1]);
            let scale = 1.0 / (din as f64).sqrt();
            let w: Vec<f64> = (0..din * dout).map(|_| scale * rng.normal()).collect();
            params.insert(
                format!("w{l}"),
                Tensor::new(vec![din, dout], w).expect("weight shape"),
            );
            params.insert(format!("b{l}"), Tensor::zeros(&[dout]));
        }
        params
    }

    /// Build the forward pass on `g`, activations between layers only.
    pub fn forward(
        &self,
        g: &mut Graph,
        x: NodeId,
        binding: &Binding,
        prefix: &str,
    ) -> Result<NodeId> {
        let mut h = x;
        for l in 0..self.layer_count() {
            let (din, dout) = (self.dims[l], self.dims[l + 1]);
            let w = binding.node(g, &format!("{prefix}w{l}"), &[din, dout])?;
            let b = binding.node(g, &format!("{prefix}b{l}"), &[dout])?;
            h = g.affine(h, w, b)?;
            if l + 1 < self.layer_count() {
                h = match self.activation {
                    Activation::Silu => g.silu(h),
                    Activation::Tanh => g.tanh(h),
                };
            }
        }
        Ok(h)
    }

    /// Evaluate on a host tensor without tracking gradients.
    pub fn eval(&self, params: &ParamSet, x: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let input = g.constant(x.clone());
        let out = self.forward(&mut g, input, &Binding::Frozen(params), "")?;
        g.set_output(out);
        crate::autodiff::forward_eval(&g, &ParamSet::new())
    }
}

/// Sinusoidal embedding of a normalized scalar, dimension `2 * n_freqs`.
/// Frequencies are the powers of two 1, 2, ..., 2^(n_freqs-1).
pub fn sinusoidal_embedding(t: f64, n_freqs: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(2 * n_freqs);
    for k in 0..n_freqs {
        let angle = t * (1u64 << k) as f64;
        out.push(angle.sin());
        out.push(angle.cos());
    }
    out
}

/// One-hot rows for a batch of class ids over `width` columns.
pub fn one_hot_rows(ids: &[usize], width: usize) -> Tensor {
    let mut values = vec![0.0; ids.len() * width];
    for (i, &id) in ids.iter().enumerate() {
        values[i * width + id] = 1.0;
    }
    Tensor::new(vec![ids.len(), width], values).expect("one-hot shape")
}

/// Stack equal-length rows into an [n, d] tensor.
pub fn stack_rows(rows: &[Vec<f64>]) -> Tensor {
    Tensor::matrix(rows).expect("stacked rows")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_shapes_follow_spec() {
        let spec = MlpSpec::new(vec![4, 8, 2]);
        let params = spec.init_params(&mut Rng::new(0));
        assert_eq!(params.get("w0").unwrap().shape(), &[4, 8]);
        assert_eq!(params.get("b1").unwrap().shape(), &[2]);
    }

    #[test]
    fn eval_matches_trainable_graph() {
        let spec = MlpSpec::new(vec![3, 5, 2]);
        let params = spec.init_params(&mut Rng::new(9));
        let x = Tensor::new(vec![2, 3], Rng::new(1).normal_vec(6)).unwrap();

        let frozen = spec.eval(&params, &x).unwrap();

        let mut g = Graph::new();
        let input = g.constant(x);
        let out = spec.forward(&mut g, input, &Binding::Trainable, "").unwrap();
        g.set_output(out);
        let trainable = crate::autodiff::forward_eval(&g, &params).unwrap();
        assert_eq!(frozen.values(), trainable.values());
    }

    #[test]
    fn one_hot_rows_place_single_one() {
        let t = one_hot_rows(&[2, 0], 3);
        assert_eq!(t.row(0), &[0.0, 0.0, 1.0]);
        assert_eq!(t.row(1), &[1.0, 0.0, 0.0]);
    }

    #[test]
    fn sinusoidal_embedding_is_smooth() {
        let a = sinusoidal_embedding(0.50, 8);
        let b = sinusoidal_embedding(0.51, 8);
        let max_delta = a
            .iter()
            .zip(&b)
            .map(|(x, y)| (x - y).abs())
            .fold(0.0f64, f64::max);
        assert!(max_delta < 2.0, "embedding jump {max_delta}");
        assert_eq!(a.len(), 16);
    }
}
