use super::*;
use crate::rng::Rng;

fn params1(name: &str, values: Vec<f64>) -> ParamSet {
    let mut p = ParamSet::new();
    p.insert(name, Tensor::vector(values));
    p
}

#[test]
fn forward_square() {
    let mut g = Graph::new();
    let x = g.input("x", &[1]).unwrap();
    let y = g.square(x);
    g.set_output(y);
    let out = forward_eval(&g, &params1("x", vec![3.0])).unwrap();
    assert_eq!(out.values(), &[9.0]);
}

#[test]
fn detach_is_identity_in_forward() {
    let mut g = Graph::new();
    let x = g.input("x", &[1]).unwrap();
    let d = g.detach(x);
    let y = g.mul(d, x).unwrap();
    g.set_output(y);
    let out = forward_eval(&g, &params1("x", vec![2.0])).unwrap();
    assert_eq!(out.values(), &[4.0]);
}

#[test]
fn matmul_identity() {
    let mut g = Graph::new();
    let eye = g.constant(Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap());
    let a = g.input("a", &[2, 2]).unwrap();
    let y = g.matmul(eye, a).unwrap();
    g.set_output(y);
    let mut p = ParamSet::new();
    p.insert(
        "a",
        Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap(),
    );
    let out = forward_eval(&g, &p).unwrap();
    assert_eq!(out.values(), &[1.0, 2.0, 3.0, 4.0]);
}

#[test]
fn backward_square_at_three() {
    let mut g = Graph::new();
    let x = g.input("x", &[1]).unwrap();
    let sq = g.square(x);
    let y = g.sum(sq);
    g.set_output(y);
    let grads = backward(&g, &params1("x", vec![3.0])).unwrap();
    assert_eq!(grads.get("x").unwrap().values(), &[6.0]);
}

#[test]
fn backward_through_detach_blocks_one_path() {
    // d/dx detach(x)*x at x=2 is 2, not 4.
    let mut g = Graph::new();
    let x = g.input("x", &[1]).unwrap();
    let d = g.detach(x);
    let prod = g.mul(d, x).unwrap();
    let y = g.sum(prod);
    g.set_output(y);
    let grads = backward(&g, &params1("x", vec![2.0])).unwrap();
    assert_eq!(grads.get("x").unwrap().values(), &[2.0]);
}

#[test]
fn backward_rejects_non_scalar_output() {
    let mut g = Graph::new();
    let x = g.input("x", &[2]).unwrap();
    let y = g.square(x);
    g.set_output(y);
    let err = backward(&g, &params1("x", vec![1.0, 2.0])).unwrap_err();
    assert!(matches!(err, crate::Error::NonScalarOutput { .. }));
}

#[test]
fn forward_rejects_shape_mismatch_naming_node() {
    let mut g = Graph::new();
    let x = g.input("x", &[3]).unwrap();
    let y = g.sum(x);
    g.set_output(y);
    let err = forward_eval(&g, &params1("x", vec![1.0, 2.0])).unwrap_err();
    let msg = err.to_string();
    assert!(msg.contains("`x`"), "error should name the node: {msg}");
}

#[test]
fn input_shape_conflict_is_rejected() {
    let mut g = Graph::new();
    g.input("x", &[3]).unwrap();
    assert!(g.input("x", &[4]).is_err());
}

fn mlp_graph(tanh: bool) -> (Graph, ParamSet) {
    let mut rng = Rng::new(11);
    let mut g = Graph::new();
    let mut p = ParamSet::new();
    let x = g.input("x", &[2, 3]).unwrap();
    p.insert("x", Tensor::new(vec![2, 3], rng.normal_vec(6)).unwrap());
    let mut h = x;
    let dims = [3usize, 4, 4, 2];
    for l in 0..3 {
        let (din, dout) = (dims[l], dims[l + 1]);
        let wn = format!("w{l}");
        let bn = format!("b{l}");
        let w = g.input(&wn, &[din, dout]).unwrap();
        let b = g.input(&bn, &[dout]).unwrap();
        p.insert(
            wn,
            Tensor::new(vec![din, dout], rng.normal_vec(din * dout)).unwrap(),
        );
        p.insert(bn, Tensor::vector(rng.normal_vec(dout)));
        h = g.affine(h, w, b).unwrap();
        if l < 2 {
            h = if tanh { g.tanh(h) } else { g.silu(h) };
        }
    }
    let sq = g.square(h);
    let out = g.mean(sq);
    g.set_output(out);
    (g, p)
}

#[test]
fn mlp_gradients_match_finite_differences() {
    for tanh in [true, false] {
        let (g, p) = mlp_graph(tanh);
        let err = grad_check(&g, &p, 1e-5).unwrap();
        assert!(err < 1e-4, "max relative error {err} (tanh={tanh})");
    }
}

#[test]
fn grad_check_exact_on_linear_graph() {
    let mut g = Graph::new();
    let x = g.input("x", &[4]).unwrap();
    let y = g.mul_scalar(x, 2.5);
    let s = g.sum(y);
    g.set_output(s);
    let err = grad_check(&g, &params1("x", vec![1.0, -2.0, 0.5, 3.0]), 1e-5).unwrap();
    assert!(err < 1e-8, "linear graph FD error {err}");
}

#[test]
fn grad_check_respects_detach_contract() {
    // detach(x^2) * x: analytic gradient is x^2; a naive FD of the full
    // forward would see 3x^2. grad_check must freeze the detached branch.
    let mut g = Graph::new();
    let x = g.input("x", &[1]).unwrap();
    let sq = g.square(x);
    let d = g.detach(sq);
    let prod = g.mul(d, x).unwrap();
    let y = g.sum(prod);
    g.set_output(y);
    let p = params1("x", vec![1.7]);
    let err = grad_check(&g, &p, 1e-5).unwrap();
    assert!(err < 1e-4, "detach-aware FD error {err}");
    let grads = backward(&g, &p).unwrap();
    let expected = 1.7f64 * 1.7;
    assert!((grads.get("x").unwrap().item() - expected).abs() < 1e-12);
}

#[test]
fn softmax_rows_sum_to_one_and_grads_check() {
    let mut g = Graph::new();
    let x = g.input("x", &[2, 3]).unwrap();
    let sm = g.softmax(x).unwrap();
    let w = g.constant(Tensor::new(vec![2, 3], vec![0.3, -1.0, 2.0, 0.7, 0.1, -0.4]).unwrap());
    let prod = g.mul(sm, w).unwrap();
    let y = g.sum(prod);
    g.set_output(y);
    let mut p = ParamSet::new();
    p.insert(
        "x",
        Tensor::new(vec![2, 3], vec![0.1, 1.2, -0.7, 3.0, 0.0, -2.0]).unwrap(),
    );
    let sm_val = forward_eval(
        &{
            let mut g2 = Graph::new();
            let x2 = g2.input("x", &[2, 3]).unwrap();
            let s2 = g2.softmax(x2).unwrap();
            g2.set_output(s2);
            g2
        },
        &p,
    )
    .unwrap();
    for i in 0..2 {
        let s: f64 = sm_val.row(i).iter().sum();
        assert!((s - 1.0).abs() < 1e-12, "softmax row {i} sums to {s}");
    }
    let err = grad_check(&g, &p, 1e-5).unwrap();
    assert!(err < 1e-4, "softmax FD error {err}");
}

#[test]
fn logsumexp_matches_naive_and_is_stable() {
    let mut g = Graph::new();
    let x = g.input("x", &[3]).unwrap();
    let l = g.logsumexp(x).unwrap();
    g.set_output(l);
    // values large enough that a naive exp would overflow
    let p = params1("x", vec![1000.0, 1001.0, 999.0]);
    let out = forward_eval(&g, &p).unwrap().item();
    let expected = 1001.0 + (1.0f64 + (-1.0f64).exp() + (-2.0f64).exp()).ln();
    assert!((out - expected).abs() < 1e-9, "lse {out} vs {expected}");
}

#[test]
fn concat_slice_roundtrip_and_grads() {
    let mut g = Graph::new();
    let a = g.input("a", &[2, 2]).unwrap();
    let b = g.input("b", &[2, 3]).unwrap();
    let cat = g.concat(&[a, b], 1).unwrap();
    let back = g.slice(cat, 1, 2, 3).unwrap();
    let sq = g.square(back);
    let y = g.sum(sq);
    g.set_output(y);
    let mut p = ParamSet::new();
    p.insert("a", Tensor::new(vec![2, 2], vec![9.0; 4]).unwrap());
    p.insert(
        "b",
        Tensor::new(vec![2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap(),
    );
    let out = forward_eval(&g, &p).unwrap().item();
    assert_eq!(out, 1.0 + 4.0 + 9.0 + 16.0 + 25.0 + 36.0);
    // `a` only feeds the discarded slice, so its gradient is zero
    let grads = backward(&g, &p).unwrap();
    assert_eq!(grads.get("a").unwrap().values(), &[0.0; 4]);
    let err = grad_check(&g, &p, 1e-5).unwrap();
    assert!(err < 1e-4, "concat/slice FD error {err}");
}

#[test]
fn identical_inputs_give_bit_identical_gradients() {
    let (g, p) = mlp_graph(false);
    let (v1, g1) = eval_with_grads(&g, &p).unwrap();
    let (v2, g2) = eval_with_grads(&g, &p).unwrap();
    assert_eq!(v1.to_bits(), v2.to_bits());
    for (name, t) in g1.iter() {
        let o = g2.get(name).unwrap();
        for (a, b) in t.values().iter().zip(o.values()) {
            assert_eq!(a.to_bits(), b.to_bits(), "gradient {name} not bit-stable");
        }
    }
}
