use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::error::Error;

fn t(rows: usize, cols: usize, data: &[f64]) -> Tensor {
    Tensor::matrix(rows, cols, data.to_vec()).unwrap()
}

fn random_tensor(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    t(
        rows,
        cols,
        &(0..rows * cols)
            .map(|_| rng.random_range(-1.0..1.0))
            .collect::<Vec<_>>(),
    )
}

#[test]
fn linear_identity() {
    let mut b = GraphBuilder::new();
    let x = b.input("x", &[Some(1), Some(2)]);
    let y = b.linear(x, "w", Some("b"));
    b.output("y", y);
    let g = b.build();
    let mut p = ParamStore::new();
    p.insert("w", t(2, 2, &[1., 0., 0., 1.]));
    p.insert("b", Tensor::new(vec![2], vec![0., 0.]).unwrap());
    let out = forward(&g, &p, &[("x", t(1, 2, &[3., 4.]))]).unwrap();
    assert_eq!(out["y"].data(), &[3.0, 4.0]);
}

#[test]
fn softmax_of_zeros_is_uniform() {
    let mut b = GraphBuilder::new();
    let x = b.input("x", &[None, None]);
    let s = b.softmax_rows(x);
    b.output("s", s);
    let g = b.build();
    let out = forward(&g, &ParamStore::new(), &[("x", t(1, 3, &[0., 0., 0.]))]).unwrap();
    for v in out["s"].data() {
        assert!((v - 1.0 / 3.0).abs() < 1e-15);
    }
}

/// Independent straight-line evaluation of `relu(x W1 + b1) W2 + b2`.
fn two_layer_oracle(x: &[f64; 3], w1: &[f64], b1: &[f64], w2: &[f64], b2: &[f64]) -> [f64; 2] {
    let mut h = [0.0; 4];
    for j in 0..4 {
        let mut s = b1[j];
        for i in 0..3 {
            s += x[i] * w1[i * 4 + j];
        }
        h[j] = if s > 0.0 { s } else { 0.0 };
    }
    let mut y = [0.0; 2];
    for j in 0..2 {
        let mut s = b2[j];
        for i in 0..4 {
            s += h[i] * w2[i * 2 + j];
        }
        y[j] = s;
    }
    y
}

#[test]
fn two_layer_net_matches_straight_line_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let w1: Vec<f64> = (0..12).map(|_| rng.random_range(-1.0..1.0)).collect();
    let b1: Vec<f64> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
    let w2: Vec<f64> = (0..8).map(|_| rng.random_range(-1.0..1.0)).collect();
    let b2: Vec<f64> = (0..2).map(|_| rng.random_range(-1.0..1.0)).collect();

    let mut b = GraphBuilder::new();
    let x = b.input("x", &[None, Some(3)]);
    let h = b.linear(x, "w1", Some("b1"));
    let h = b.relu(h);
    let y = b.linear(h, "w2", Some("b2"));
    b.output("y", y);
    let g = b.build();
    let mut p = ParamStore::new();
    p.insert("w1", t(3, 4, &w1));
    p.insert("b1", Tensor::new(vec![4], b1.clone()).unwrap());
    p.insert("w2", t(4, 2, &w2));
    p.insert("b2", Tensor::new(vec![2], b2.clone()).unwrap());

    let out = forward(&g, &p, &[("x", t(1, 3, &[1., 2., 3.]))]).unwrap();
    let expected = two_layer_oracle(&[1., 2., 3.], &w1, &b1, &w2, &b2);
    for (a, e) in out["y"].data().iter().zip(expected) {
        assert!((a - e).abs() < 1e-12, "{a} vs {e}");
    }
}

#[test]
fn grad_of_linear_sum() {
    let mut b = GraphBuilder::new();
    let x = b.input("x", &[Some(1), Some(2)]);
    let w = b.param("w");
    let y = b.matmul(x, w);
    let loss = b.sum(y);
    let g = b.build();
    let mut p = ParamStore::new();
    p.insert("w", t(2, 2, &[0.3, -0.1, 0.7, 2.0]));
    let mut s = Session::new(&g);
    s.feed("x", t(1, 2, &[1., 1.])).unwrap();
    s.compute(&p, loss).unwrap();
    s.backward(&mut p, loss).unwrap();
    assert_eq!(p.grad("w").unwrap().data(), &[1.0, 1.0, 1.0, 1.0]);
}

#[test]
fn cross_entropy_gradient_is_softmax_minus_target() {
    let mut b = GraphBuilder::new();
    let logits = b.param("logits");
    let sm = b.softmax_rows(logits);
    let lg = b.log(sm);
    // constant carries the minus sign of the cross entropy
    let neg_target = b.constant(t(1, 2, &[-1.0, 0.0]));
    let prod = b.mul(lg, neg_target);
    let loss = b.sum(prod);
    let g = b.build();
    let mut p = ParamStore::new();
    p.insert("logits", t(1, 2, &[0.0, 0.0]));
    let mut s = Session::new(&g);
    s.compute(&p, loss).unwrap();
    s.backward(&mut p, loss).unwrap();
    let grad = p.grad("logits").unwrap().data();
    assert!((grad[0] + 0.5).abs() < 1e-15);
    assert!((grad[1] - 0.5).abs() < 1e-15);
}

#[test]
fn unused_parameter_gets_zero_gradient() {
    let mut b = GraphBuilder::new();
    let a = b.param("a");
    b.param("unused");
    let loss = b.sum(a);
    let g = b.build();
    let mut p = ParamStore::new();
    p.insert("a", t(1, 2, &[1., 2.]));
    p.insert("unused", t(1, 2, &[1., 2.]));
    let mut s = Session::new(&g);
    s.compute(&p, loss).unwrap();
    s.backward(&mut p, loss).unwrap();
    assert_eq!(p.grad("unused").unwrap().data(), &[0.0, 0.0]);
}

#[test]
fn backward_rejects_non_scalar() {
    let mut b = GraphBuilder::new();
    let a = b.param("a");
    let r = b.relu(a);
    let g = b.build();
    let mut p = ParamStore::new();
    p.insert("a", t(1, 2, &[1., 2.]));
    let mut s = Session::new(&g);
    s.compute(&p, r).unwrap();
    assert!(matches!(
        s.backward(&mut p, r),
        Err(Error::NonScalarOutput { .. })
    ));
}

#[test]
fn shape_mismatch_names_the_node() {
    let mut b = GraphBuilder::new();
    let x = b.input("x", &[None, None]);
    let w = b.param("w");
    let y = b.matmul(x, w);
    b.output("proj", y);
    let g = b.build();
    let mut p = ParamStore::new();
    p.insert("w", t(3, 2, &[0.0; 6]));
    let err = forward(&g, &p, &[("x", t(1, 2, &[1., 2.]))]).unwrap_err();
    match err {
        Error::Shape { node, .. } => assert!(node.contains("proj"), "{node}"),
        other => panic!("unexpected {other:?}"),
    }
    // declared input dims are enforced at feed time
    let mut b = GraphBuilder::new();
    b.input("x", &[None, Some(3)]);
    let g = b.build();
    assert!(Session::new(&g).feed("x", t(1, 2, &[1., 2.])).is_err());
}

#[test]
fn forward_is_bitwise_repeatable() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut b = GraphBuilder::new();
    let x = b.input("x", &[None, Some(5)]);
    let h = b.linear(x, "w", Some("b"));
    let h = b.relu(h);
    let h = b.l2_normalize_rows(h);
    let s = b.softmax_rows(h);
    b.output("s", s);
    let g = b.build();
    let mut p = ParamStore::new();
    p.insert("w", random_tensor(&mut rng, 5, 7));
    p.insert("b", random_tensor(&mut rng, 1, 7));
    let x = random_tensor(&mut rng, 9, 5);
    let a = forward(&g, &p, &[("x", x.clone())]).unwrap();
    let b = forward(&g, &p, &[("x", x)]).unwrap();
    let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&a["s"]), bits(&b["s"]));
}

/// Largest relative error between reverse-mode gradients and central
/// differences over every scalar of every parameter.
pub(crate) fn max_fd_relative_error(
    graph: &Graph,
    params: &mut ParamStore,
    inputs: &[(&str, Tensor)],
    loss: NodeId,
    step: f64,
) -> f64 {
    let eval = |p: &ParamStore| {
        let mut s = Session::new(graph);
        for (n, v) in inputs {
            s.feed(n, v.clone()).unwrap();
        }
        s.compute(p, loss).unwrap().item()
    };
    params.zero_grad();
    let mut s = Session::new(graph);
    for (n, v) in inputs {
        s.feed(n, v.clone()).unwrap();
    }
    s.compute(params, loss).unwrap();
    s.backward(params, loss).unwrap();

    let names: Vec<String> = params.iter().map(|(n, _)| n.to_string()).collect();
    let mut worst: f64 = 0.0;
    for name in names {
        let n = params.value(&name).unwrap().len();
        for i in 0..n {
            let orig = params.value(&name).unwrap().data()[i];
            params.value_mut(&name).unwrap().data_mut()[i] = orig + step;
            let up = eval(params);
            params.value_mut(&name).unwrap().data_mut()[i] = orig - step;
            let down = eval(params);
            params.value_mut(&name).unwrap().data_mut()[i] = orig;
            let fd = (up - down) / (2.0 * step);
            let an = params.grad(&name).unwrap().data()[i];
            let rel = (an - fd).abs() / an.abs().max(fd.abs()).max(1e-6);
            worst = worst.max(rel);
        }
    }
    worst
}

#[derive(Clone, Copy, Debug)]
enum OpCase {
    MatMul,
    Add,
    AddRow,
    Mul,
    MulScalar,
    Relu,
    L2Norm,
    Softmax,
    Log,
    Mean,
    Concat,
}

const OP_CASES: [OpCase; 11] = [
    OpCase::MatMul,
    OpCase::Add,
    OpCase::AddRow,
    OpCase::Mul,
    OpCase::MulScalar,
    OpCase::Relu,
    OpCase::L2Norm,
    OpCase::Softmax,
    OpCase::Log,
    OpCase::Mean,
    OpCase::Concat,
];

/// Builds `sum(op(a, b) ⊙ r)` for a random constant `r`, so every output
/// element gets a distinct upstream gradient.
fn op_case_graph(case: OpCase, rng: &mut ChaCha8Rng) -> (Graph, ParamStore, NodeId) {
    let (rows, cols) = (rng.random_range(1..5), rng.random_range(1..5));
    let mut b = GraphBuilder::new();
    let mut p = ParamStore::new();
    let a = b.param("a");
    let (out, out_shape) = match case {
        OpCase::MatMul => {
            let inner = rng.random_range(1..5);
            p.insert("a", random_tensor(rng, rows, inner));
            p.insert("b", random_tensor(rng, inner, cols));
            let w = b.param("b");
            (b.matmul(a, w), (rows, cols))
        }
        OpCase::Add | OpCase::Mul => {
            p.insert("a", random_tensor(rng, rows, cols));
            p.insert("b", random_tensor(rng, rows, cols));
            let w = b.param("b");
            let out = if matches!(case, OpCase::Add) {
                b.add(a, w)
            } else {
                b.mul(a, w)
            };
            (out, (rows, cols))
        }
        OpCase::AddRow => {
            p.insert("a", random_tensor(rng, rows, cols));
            p.insert(
                "b",
                Tensor::new(vec![cols], random_tensor(rng, 1, cols).into_data()).unwrap(),
            );
            let w = b.param("b");
            (b.add(a, w), (rows, cols))
        }
        OpCase::MulScalar => {
            p.insert("a", random_tensor(rng, rows, cols));
            p.insert("b", Tensor::scalar(rng.random_range(0.5..2.0)));
            let w = b.param("b");
            (b.mul(a, w), (rows, cols))
        }
        OpCase::Relu => {
            p.insert("a", random_tensor(rng, rows, cols));
            (b.relu(a), (rows, cols))
        }
        OpCase::L2Norm => {
            let cols = cols.max(2);
            p.insert("a", random_tensor(rng, rows, cols));
            (b.l2_normalize_rows(a), (rows, cols))
        }
        OpCase::Softmax => {
            p.insert("a", random_tensor(rng, rows, cols));
            (b.softmax_rows(a), (rows, cols))
        }
        OpCase::Log => {
            let data = (0..rows * cols)
                .map(|_| rng.random_range(0.2..2.0))
                .collect::<Vec<_>>();
            p.insert("a", t(rows, cols, &data));
            (b.log(a), (rows, cols))
        }
        OpCase::Mean => {
            p.insert("a", random_tensor(rng, rows, cols));
            let m = b.mean(a);
            (b.mul(m, m), (1, 1))
        }
        OpCase::Concat => {
            let other = rng.random_range(1..4);
            p.insert("a", random_tensor(rng, rows, cols));
            p.insert("b", random_tensor(rng, rows, other));
            let w = b.param("b");
            (b.concat_cols(&[a, w, a]), (rows, 2 * cols + other))
        }
    };
    let weights = random_tensor(rng, out_shape.0, out_shape.1);
    let w = b.constant(weights);
    let prod = b.mul(out, w);
    let loss = b.sum(prod);
    (b.build(), p, loss)
}

#[test]
fn every_op_matches_central_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    for case in 0..100 {
        for op in OP_CASES {
            let (g, mut p, loss) = op_case_graph(op, &mut rng);
            let err = max_fd_relative_error(&g, &mut p, &[], loss, 1e-4);
            assert!(err < 1e-3, "case {case} op {op:?}: relative error {err}");
        }
    }
}

#[test]
fn random_three_layer_net_matches_central_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut b = GraphBuilder::new();
    let x = b.input("x", &[None, Some(3)]);
    let h = b.linear(x, "l1.w", Some("l1.b"));
    let h = b.relu(h);
    let h = b.linear(h, "l2.w", Some("l2.b"));
    let h = b.relu(h);
    let h = b.l2_normalize_rows(h);
    let y = b.linear(h, "l3.w", None);
    let sm = b.softmax_rows(y);
    let lg = b.log(sm);
    let target = b.input("t", &[None, Some(2)]);
    let prod = b.mul(lg, target);
    let loss = b.sum(prod);
    let g = b.build();
    let mut p = ParamStore::new();
    p.insert("l1.w", random_tensor(&mut rng, 3, 4));
    p.insert("l1.b", random_tensor(&mut rng, 1, 4));
    p.insert("l2.w", random_tensor(&mut rng, 4, 3));
    p.insert("l2.b", random_tensor(&mut rng, 1, 3));
    p.insert("l3.w", random_tensor(&mut rng, 3, 2));
    let inputs = [
        ("x", random_tensor(&mut rng, 5, 3)),
        (
            "t",
            t(5, 2, &[-1., 0., 0., -1., -0.5, -0.5, -1., 0., 0., -1.]),
        ),
    ];
    let err = max_fd_relative_error(&g, &mut p, &inputs, loss, 1e-4);
    assert!(err < 1e-3, "relative error {err}");
}
