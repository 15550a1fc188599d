//! Deterministic autoencoder defining the latent space.
//!
//! The encoder maps decoded space (d_x) to a smaller latent space (d_z),
//! the decoder maps back. Both are affine or single-hidden-layer MLPs.
//! After pretraining the codec is frozen: distillation reads latents
//! through `encode` and reward evaluation decodes with or without gradient
//! flow depending on the training path.

use crate::autodiff::{adam_step, AdamParams, AdamState, Graph, NodeId, ParamSet};
use crate::dataset::Dataset;
use crate::mlp::{Binding, MlpSpec};
use crate::train::{ensure_finite, TrainTrace};
use crate::{Error, Result, Rng, Tensor};

#[derive(Debug, Clone, Copy)]
pub struct CodecHyper {
    /// Hidden width; 0 selects a pure affine encoder/decoder.
    pub hidden: usize,
    pub iters: u64,
    pub lr: f64,
    pub log_every: u64,
    /// Max allowed held-out reconstruction MSE as a fraction of data variance.
    pub recon_tol: f64,
}

impl Default for CodecHyper {
    fn default() -> Self {
        CodecHyper {
            hidden: 32,
            iters: 2000,
            lr: 3e-3,
            log_every: 100,
            recon_tol: 0.1,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Codec {
    pub params: ParamSet,
    pub d_x: usize,
    pub d_z: usize,
    pub hidden: usize,
}

impl Codec {
    fn encoder_spec(&self) -> MlpSpec {
        if self.hidden == 0 {
            MlpSpec::new(vec![self.d_x, self.d_z])
        } else {
            MlpSpec::new(vec![self.d_x, self.hidden, self.d_z])
        }
    }

    fn decoder_spec(&self) -> MlpSpec {
        if self.hidden == 0 {
            MlpSpec::new(vec![self.d_z, self.d_x])
        } else {
            MlpSpec::new(vec![self.d_z, self.hidden, self.d_x])
        }
    }

    pub fn init(d_x: usize, d_z: usize, hidden: usize, rng: &mut Rng) -> Self {
        let mut codec = Codec {
            params: ParamSet::new(),
            d_x,
            d_z,
            hidden,
        };
        let enc = codec.encoder_spec().init_params(rng);
        let dec = codec.decoder_spec().init_params(rng);
        codec.params.extend_prefixed("enc.", &enc);
        codec.params.extend_prefixed("dec.", &dec);
        if hidden == 0 && d_x == d_z {
            // square affine codec initializes to the identity map
            for name in ["enc.w0", "dec.w0"] {
                let w = codec.params.get_mut(name).unwrap();
                for i in 0..d_x {
                    for j in 0..d_x {
                        w.values_mut()[i * d_x + j] = if i == j { 1.0 } else { 0.0 };
                    }
                }
            }
        }
        codec
    }

    /// Encoder subgraph on a [B, d_x] node.
    pub fn encode_node(&self, g: &mut Graph, x: NodeId, binding: &Binding) -> Result<NodeId> {
        self.encoder_spec().forward(g, x, binding, "enc.")
    }

    /// Decoder subgraph on a [B, d_z] node; differentiable through the input.
    pub fn decode_node(&self, g: &mut Graph, z: NodeId, binding: &Binding) -> Result<NodeId> {
        self.decoder_spec().forward(g, z, binding, "dec.")
    }

    /// Decoder subgraph wrapped in a `detach`: value-identical to
    /// `decode_node`, gradient identically zero through it.
    pub fn decode_detached_node(&self, g: &mut Graph, z: NodeId) -> Result<NodeId> {
        let d = self.decode_node(g, z, &Binding::Frozen(&self.params))?;
        Ok(g.detach(d))
    }

    pub fn encode(&self, x: &Tensor) -> Result<Tensor> {
        let x2 = as_batch(x, self.d_x)?;
        let out = self.encoder_spec().eval(&self.params.strip_prefix("enc."), &x2)?;
        Ok(shrink_like(out, x))
    }

    pub fn decode(&self, z: &Tensor) -> Result<Tensor> {
        let z2 = as_batch(z, self.d_z)?;
        let out = self.decoder_spec().eval(&self.params.strip_prefix("dec."), &z2)?;
        Ok(shrink_like(out, z))
    }

    /// Value-identical to `decode`; exists so call sites say what they mean.
    /// Gradient isolation is structural here: nothing is tracked.
    pub fn decode_detached(&self, z: &Tensor) -> Result<Tensor> {
        self.decode(z)
    }

    /// Encode a labeled dataset into (latent, class) pairs.
    pub fn encode_dataset(&self, data: &Dataset) -> Result<Vec<(Tensor, usize)>> {
        let mat = data.as_matrix();
        let z = self.encode(&mat)?;
        Ok((0..data.len())
            .map(|i| (Tensor::vector(z.row(i).to_vec()), data.classes[i]))
            .collect())
    }
}

fn as_batch(t: &Tensor, width: usize) -> Result<Tensor> {
    match t.shape().len() {
        1 if t.numel() == width => Tensor::new(vec![1, width], t.values().to_vec()),
        2 if t.cols() == width => Ok(t.clone()),
        _ => Err(Error::ShapeMismatch {
            node: "codec input".into(),
            expected: vec![width],
            got: t.shape().to_vec(),
        }),
    }
}

fn shrink_like(out: Tensor, reference: &Tensor) -> Tensor {
    if reference.shape().len() == 1 {
        Tensor::vector(out.into_values())
    } else {
        out
    }
}

/// Full-batch reconstruction loss graph over the whole dataset matrix.
fn recon_loss_graph(codec: &Codec, xs: &Tensor) -> Result<Graph> {
    let mut g = Graph::new();
    let x = g.constant(xs.clone());
    let z = codec.encode_node(&mut g, x, &Binding::Trainable)?;
    let xhat = codec.decode_node(&mut g, z, &Binding::Trainable)?;
    let loss = g.mse(xhat, x)?;
    g.set_output(loss);
    Ok(g)
}

/// Mean squared reconstruction error per element on a dataset.
pub fn reconstruction_mse(codec: &Codec, data: &Dataset) -> Result<f64> {
    let xs = data.as_matrix();
    let xhat = codec.decode(&codec.encode(&xs)?)?;
    let diff = xhat.sub(&xs);
    Ok(diff.sq_norm() / xs.numel() as f64)
}

/// Pretrain the codec with full-batch Adam on reconstruction MSE.
///
/// Errors if the loss goes non-finite or the final held-out reconstruction
/// error exceeds `recon_tol` times the per-element data variance.
pub fn train_codec(
    data: &Dataset,
    heldout: &Dataset,
    hyper: &CodecHyper,
    rng: &mut Rng,
) -> Result<(Codec, TrainTrace)> {
    if data.is_empty() {
        return Err(Error::invalid("train_codec", "empty dataset"));
    }
    let d_z = default_d_z(data.d_x);
    train_codec_dims(data, heldout, data.d_x, d_z, hyper, rng)
}

pub fn train_codec_dims(
    data: &Dataset,
    heldout: &Dataset,
    d_x: usize,
    d_z: usize,
    hyper: &CodecHyper,
    rng: &mut Rng,
) -> Result<(Codec, TrainTrace)> {
    if data.is_empty() {
        return Err(Error::invalid("train_codec", "empty dataset"));
    }
    let mut codec = Codec::init(d_x, d_z, hyper.hidden, rng);
    let mut state = AdamState::new(&codec.params);
    let hp = AdamParams::with_lr(hyper.lr);
    let mut trace = TrainTrace::default();
    let xs = data.as_matrix();

    let graph = recon_loss_graph(&codec, &xs)?;
    for iter in 0..hyper.iters {
        let (loss, grads) = crate::autodiff::eval_with_grads(&graph, &codec.params)?;
        ensure_finite(loss, "codec", iter)?;
        adam_step(&mut codec.params, &grads, &mut state, &hp);
        if iter % hyper.log_every == 0 || iter + 1 == hyper.iters {
            log::info!("codec iter {iter}: recon mse {loss:.6}");
            trace.push(iter, loss);
        }
    }

    let per_element_variance = heldout.total_variance() / d_x as f64;
    let held_mse = reconstruction_mse(&codec, heldout)?;
    if held_mse > hyper.recon_tol * per_element_variance {
        return Err(Error::invalid(
            "train_codec",
            format!(
                "held-out reconstruction mse {held_mse:.6} exceeds {} of per-element variance {per_element_variance:.6}",
                hyper.recon_tol
            ),
        ));
    }
    Ok((codec, trace))
}

/// Default latent width for a decoded width ( 4 for the 16-d presets).
pub fn default_d_z(d_x: usize) -> usize {
    (d_x / 4).max(1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{generate, Preset};

    fn toy_data(seed: u64, n: usize) -> Dataset {
        generate(Preset::Mixture2d, 16, 4, n, &mut Rng::new(seed))
    }

    #[test]
    fn identity_init_square_affine_reconstructs_exactly() {
        let codec = Codec::init(4, 4, 0, &mut Rng::new(3));
        let x = Tensor::vector(vec![1.0, -2.0, 0.5, 3.0]);
        let xhat = codec.decode(&codec.encode(&x).unwrap()).unwrap();
        assert!(x.max_abs_diff(&xhat) < 1e-12, "identity codec round trip");
    }

    #[test]
    fn affine_decode_of_zero_is_decoder_bias() {
        let mut codec = Codec::init(6, 2, 0, &mut Rng::new(5));
        let bias = codec.params.get_mut("dec.b0").unwrap();
        for (i, v) in bias.values_mut().iter_mut().enumerate() {
            *v = i as f64;
        }
        let out = codec.decode(&Tensor::vector(vec![0.0, 0.0])).unwrap();
        assert_eq!(out.values(), &[0.0, 1.0, 2.0, 3.0, 4.0, 5.0]);
    }

    #[test]
    fn decode_detached_matches_decode_in_value() {
        let codec = Codec::init(8, 3, 16, &mut Rng::new(6));
        let z = Tensor::vector(Rng::new(9).normal_vec(3));
        let a = codec.decode(&z).unwrap();
        let b = codec.decode_detached(&z).unwrap();
        assert_eq!(a.values(), b.values());
    }

    #[test]
    fn decode_detached_node_blocks_gradients() {
        let codec = Codec::init(8, 3, 16, &mut Rng::new(6));
        let mut g = Graph::new();
        let z = g.input("z", &[1, 3]).unwrap();
        let x = codec.decode_detached_node(&mut g, z).unwrap();
        let loss = g.sq_norm(x);
        g.set_output(loss);
        let mut p = ParamSet::new();
        p.insert("z", Tensor::new(vec![1, 3], vec![0.3, -0.7, 1.1]).unwrap());
        let grads = crate::autodiff::backward(&g, &p).unwrap();
        assert_eq!(
            grads.get("z").unwrap().values(),
            &[0.0, 0.0, 0.0],
            "detached decode must pass zero gradient to z"
        );
    }

    #[test]
    fn decode_node_is_differentiable_with_finite_jacobian() {
        // FD Jacobian check: small latent perturbations move the output
        // smoothly and match the graph gradient.
        let codec = Codec::init(8, 3, 16, &mut Rng::new(8));
        let mut g = Graph::new();
        let z = g.input("z", &[1, 3]).unwrap();
        let x = codec.decode_node(&mut g, z, &Binding::Frozen(&codec.params)).unwrap();
        let loss = g.sq_norm(x);
        g.set_output(loss);
        let mut p = ParamSet::new();
        p.insert("z", Tensor::new(vec![1, 3], vec![0.2, 0.1, -0.4]).unwrap());
        let err = crate::autodiff::grad_check(&g, &p, 1e-5).unwrap();
        assert!(err < 1e-4, "decoder FD error {err}");
    }

    #[test]
    fn training_reaches_threshold_and_is_deterministic() {
        let data = toy_data(1, 256);
        let heldout = toy_data(2, 128);
        let hyper = CodecHyper {
            iters: 600,
            ..CodecHyper::default()
        };
        let (c1, trace) = train_codec(&data, &heldout, &hyper, &mut Rng::new(7)).unwrap();
        let (c2, _) = train_codec(&data, &heldout, &hyper, &mut Rng::new(7)).unwrap();
        assert_eq!(c1.params.max_abs_diff(&c2.params), 0.0, "seed determinism");

        // logged full-batch curve is non-increasing for the pinned defaults
        for w in trace.entries.windows(2) {
            assert!(
                w[1].1 <= w[0].1 + 1e-9,
                "recon curve increased: {} -> {} at iter {}",
                w[0].1,
                w[1].1,
                w[1].0
            );
        }
    }

    #[test]
    fn manifold_round_trip_within_tolerance() {
        let data = toy_data(3, 256);
        let heldout = toy_data(4, 128);
        let (codec, _) = train_codec(
            &data,
            &heldout,
            &CodecHyper {
                iters: 800,
                ..CodecHyper::default()
            },
            &mut Rng::new(11),
        )
        .unwrap();
        // encode-decode on held-out manifold points stays close
        let mse = reconstruction_mse(&codec, &heldout).unwrap();
        let per_element_variance = heldout.total_variance() / 16.0;
        assert!(
            mse < 0.1 * per_element_variance,
            "held-out recon mse {mse} vs variance {per_element_variance}"
        );
    }
}
