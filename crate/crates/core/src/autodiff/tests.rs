use super::*;
use crate::error::Error;
use crate::tensor::Tensor;

fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
    Tensor::from_f64(shape, v).unwrap()
}

fn lcg(seed: u64, n: usize) -> Vec<f64> {
    let mut s = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
    (0..n)
        .map(|_| {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((s >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
        })
        .collect()
}

#[test]
fn matmul_identity() {
    let mut g = Graph::<f64>::new();
    let a = g.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
    let i = g.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
    let c = g.matmul(a, i).unwrap();
    assert_eq!(g.value(c).data(), &[1.0, 2.0, 3.0, 4.0]);
}

#[test]
fn matmul_shape_error_names_shapes() {
    let mut g = Graph::<f64>::new();
    let a = g.constant(Tensor::zeros(&[2, 3]));
    let b = g.constant(Tensor::zeros(&[2, 3]));
    match g.matmul(a, b) {
        Err(Error::Shape { detail, .. }) => assert!(detail.contains("[2, 3]")),
        other => panic!("expected shape error, got {other:?}"),
    }
}

#[test]
fn softmax_uniform_and_normalized() {
    let mut g = Graph::<f32>::new();
    let a = g.constant(Tensor::zeros(&[1, 3]));
    let s = g.softmax(a).unwrap();
    for v in g.value(s).data() {
        assert!((v - 1.0 / 3.0).abs() < 1e-7);
    }
    let x = g.constant(Tensor::from_f64(&[3, 4], &lcg(3, 12).iter().map(|v| v * 30.0).collect::<Vec<_>>()).unwrap());
    let s = g.softmax(x).unwrap();
    for r in 0..3 {
        let sum: f32 = g.value(s).row(r).iter().sum();
        assert!((sum - 1.0).abs() < 1e-6);
    }
}

// Scalar reference implementations written independently of the graph code.
fn gelu_ref(x: f64) -> f64 {
    let k = (2.0f64 / std::f64::consts::PI).sqrt();
    x * 0.5 * (1.0 + (k * (x + 0.044715 * x.powi(3))).tanh())
}

fn layer_norm_ref(row: &[f64], gamma: &[f64], beta: &[f64]) -> Vec<f64> {
    let n = row.len() as f64;
    let mu = row.iter().sum::<f64>() / n;
    let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n;
    row.iter().zip(gamma.iter().zip(beta)).map(|(v, (g, b))| (v - mu) / (var + 1e-5).sqrt() * g + b).collect()
}

#[test]
fn gelu_and_layer_norm_match_scalar_reference() {
    let xs = lcg(11, 12);
    let gamma = lcg(12, 4);
    let beta = lcg(13, 4);
    let mut g = Graph::<f64>::new();
    let x = g.constant(t(&[3, 4], &xs));
    let gm = g.constant(t(&[4], &gamma));
    let bt = g.constant(t(&[4], &beta));
    let ge = g.gelu(x).unwrap();
    for (got, &x) in g.value(ge).data().iter().zip(&xs) {
        assert!((got - gelu_ref(x)).abs() < 1e-12);
    }
    let ln = g.layer_norm(x, gm, bt, 1e-5).unwrap();
    for r in 0..3 {
        let want = layer_norm_ref(&xs[r * 4..r * 4 + 4], &gamma, &beta);
        for (a, b) in g.value(ln).row(r).iter().zip(&want) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}

#[test]
fn sum_gives_ones_gradient() {
    let mut g = Graph::<f32>::new();
    let w = g.input(Tensor::from_f64(&[2, 3], &lcg(1, 6)).unwrap());
    let loss = g.sum(w).unwrap();
    let grads = g.backward(loss).unwrap();
    assert!(grads.wrt(w).unwrap().data().iter().all(|&v| v == 1.0));
}

#[test]
fn half_square_gives_identity_gradient() {
    let vals = lcg(2, 5);
    let mut g = Graph::<f64>::new();
    let w = g.input(t(&[5], &vals));
    let sq = g.square(w).unwrap();
    let s = g.sum(sq).unwrap();
    let loss = g.scale(s, 0.5).unwrap();
    let grads = g.backward(loss).unwrap();
    assert_eq!(grads.wrt(w).unwrap().data(), vals.as_slice());
}

#[test]
fn backward_rejects_non_scalar() {
    let mut g = Graph::<f64>::new();
    let w = g.input(Tensor::zeros(&[2]));
    assert!(matches!(g.backward(w), Err(Error::Contract(_))));
}

#[test]
fn inference_graph_records_nothing() {
    let mut store = ParamStore::<f32>::new();
    let id = store.add("w", Tensor::scalar(2.0), true).unwrap();
    let mut g = Graph::inference();
    let w = g.param(&store, id);
    let loss = g.square(w).unwrap();
    assert!(!g.requires_grad(loss));
    assert!(g.backward(loss).unwrap().param(id).is_none());
}

#[test]
fn attention_all_keep_equals_unmasked() {
    let (batch, seq, h, heads) = (2, 4, 4, 2);
    let qkv = Tensor::<f32>::from_f64(&[batch * seq, 3 * h], &lcg(5, batch * seq * 3 * h)).unwrap();
    let mut g = Graph::new();
    let q = g.constant(qkv);
    let a = g.attention(q, None, batch, seq, heads).unwrap();
    let keep = vec![true; batch * seq];
    let b = g.attention(q, Some(&keep), batch, seq, heads).unwrap();
    let bits = |v: Var| g.value(v).data().iter().map(|x| x.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(a), bits(b));
}

#[test]
fn masked_key_receives_zero_weight() {
    // seq = class + 2 features, feature 2 removed.
    let (seq, h) = (3, 2);
    let qkv = Tensor::<f64>::from_f64(&[seq, 3 * h], &lcg(8, seq * 3 * h)).unwrap();
    let mut g = Graph::new();
    let q = g.constant(qkv.clone());
    let keep = [true, true, false];
    let out = g.attention(q, Some(&keep), 1, seq, 1).unwrap();
    // reference: renormalized softmax over the first two keys only
    let row = |r: usize| qkv.row(r).to_vec();
    for tq in 0..seq {
        let qv = &row(tq)[0..h];
        let scores: Vec<f64> = (0..2)
            .map(|u| qv.iter().zip(&row(u)[h..2 * h]).map(|(a, b)| a * b).sum::<f64>() / (h as f64).sqrt())
            .collect();
        let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
        let z: f64 = e.iter().sum();
        for c in 0..h {
            let want: f64 = (0..2).map(|u| e[u] / z * row(u)[2 * h + c]).sum();
            assert!((g.value(out).data()[tq * h + c] - want).abs() < 1e-12);
        }
    }
}

#[test]
fn efficiency_normalize_forward_and_backward() {
    let mut g = Graph::<f64>::new();
    let phi = g.input(t(&[3, 1], &[0.2, -0.1, 0.4]));
    let gap = t(&[1, 1], &[1.0]);
    let n = g.efficiency_normalize(phi, &gap, 1, 3).unwrap();
    let got = g.value(n).data();
    assert!((got[0] - 0.366_666_666_7).abs() < 1e-9);
    assert!((got[1] - 0.066_666_666_7).abs() < 1e-9);
    assert!((got[2] - 0.566_666_666_7).abs() < 1e-9);
    // weighting the outputs differently: gradient is the centered weight vector
    let w = g.constant(t(&[3, 1], &[1.0, 2.0, 6.0]));
    let p = g.mul(n, w).unwrap();
    let loss = g.sum(p).unwrap();
    let grads = g.backward(loss).unwrap();
    let d = grads.wrt(phi).unwrap().data();
    assert!((d[0] + 2.0).abs() < 1e-12 && (d[1] + 1.0).abs() < 1e-12 && (d[2] - 3.0).abs() < 1e-12);
}

#[test]
fn class_token_interleave() {
    let mut g = Graph::<f64>::new();
    let tok = g.constant(t(&[4, 1], &[1.0, 2.0, 3.0, 4.0]));
    let cls = g.constant(t(&[1], &[9.0]));
    let z = g.with_class_token(tok, cls, 2, 2).unwrap();
    assert_eq!(g.value(z).data(), &[9.0, 1.0, 2.0, 9.0, 3.0, 4.0]);
}

#[test]
fn masked_fill_blocks_gradient() {
    let mut g = Graph::<f64>::new();
    let x = g.input(t(&[3], &[1.0, 2.0, 3.0]));
    let f = g.masked_fill(x, &[false, true, false], -5.0).unwrap();
    assert_eq!(g.value(f).data(), &[1.0, -5.0, 3.0]);
    let loss = g.sum(f).unwrap();
    assert_eq!(g.backward(loss).unwrap().wrt(x).unwrap().data(), &[1.0, 0.0, 1.0]);
}
