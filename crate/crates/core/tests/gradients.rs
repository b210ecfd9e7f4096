use std::time::Instant;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use uma_core::graph::{evaluate, finite_difference_check, gradient, Bindings, Graph, NodeId};
use uma_core::tensor::Tensor;

const H: f64 = 1e-5;
const TOL: f64 = 1e-4;

/// A graph plus the random values bound to its leaves.
struct Case {
    graph: Graph,
    leaves: Vec<(String, Tensor)>,
    ops: Vec<&'static str>,
}

impl Case {
    fn new() -> Self {
        Self { graph: Graph::new(), leaves: Vec::new(), ops: Vec::new() }
    }

    /// Values uniform in `lo..hi` with magnitude above 0.05.
    fn leaf(&mut self, r: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> NodeId {
        let name = format!("v{}", self.leaves.len());
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|_| loop {
                let v = r.gen_range(lo..hi);
                if v.abs() > 0.05 {
                    break v;
                }
            })
            .collect();
        let id = self.graph.leaf(name.clone(), shape).unwrap();
        self.leaves.push((name, Tensor::new(shape.to_vec(), data).unwrap()));
        id
    }

    fn check(&self) -> f64 {
        let mut b = Bindings::new();
        for (n, t) in &self.leaves {
            b.bind(n.clone(), t);
        }
        let names: Vec<&str> = self.leaves.iter().map(|(n, _)| n.as_str()).collect();
        finite_difference_check(&self.graph, &b, &names, H).unwrap()
    }
}

/// Random unary or binary elementwise step keeping the value well defined.
fn random_step(c: &mut Case, r: &mut ChaCha8Rng, x: NodeId, shape: &[usize]) -> NodeId {
    let g = &mut c.graph;
    match r.gen_range(0..11) {
        0 => {
            c.ops.push("relu");
            // shift so that most units are active and none sit on the kink
            let s = g.affine(x, 1.0, 0.5).unwrap();
            g.relu(s).unwrap()
        }
        1 => {
            c.ops.push("sigmoid");
            g.sigmoid(x).unwrap()
        }
        2 => {
            c.ops.push("exp");
            let s = g.affine(x, 0.3, 0.0).unwrap();
            g.exp(s).unwrap()
        }
        3 => {
            c.ops.push("log");
            let s = g.sigmoid(x).unwrap();
            let s = g.affine(s, 1.0, 0.2).unwrap();
            g.log(s).unwrap()
        }
        4 => {
            c.ops.push("abs");
            let s = g.affine(x, 1.0, 2.0).unwrap();
            g.abs(s).unwrap()
        }
        5 => {
            c.ops.push("softmax");
            g.softmax(x).unwrap()
        }
        6 => {
            c.ops.push("log_softmax");
            g.log_softmax(x).unwrap()
        }
        7 => {
            c.ops.push("mul");
            let y = c.leaf(r, shape, -1.0, 1.0);
            c.graph.mul(x, y).unwrap()
        }
        8 => {
            c.ops.push("add");
            let y = c.leaf(r, shape, -1.0, 1.0);
            c.graph.add(x, y).unwrap()
        }
        9 => {
            c.ops.push("sub");
            let y = c.leaf(r, shape, -1.0, 1.0);
            c.graph.sub(y, x).unwrap()
        }
        _ => {
            c.ops.push("add_row");
            let b = c.leaf(r, &[shape[1]], -1.0, 1.0);
            c.graph.add_row(x, b).unwrap()
        }
    }
}

/// Scalar reduction of an `n x m` node. Plain sums are weighted first: a
/// softmax row sums to one, which would leave nothing to differentiate.
fn random_reduce(c: &mut Case, r: &mut ChaCha8Rng, x: NodeId, shape: &[usize]) -> NodeId {
    match r.gen_range(0..7) {
        0 => {
            c.ops.push("sum");
            let w = c.leaf(r, shape, -1.0, 1.0);
            let p = c.graph.mul(x, w).unwrap();
            c.graph.sum(p).unwrap()
        }
        1 => {
            c.ops.push("mean");
            let w = c.leaf(r, shape, -1.0, 1.0);
            let p = c.graph.mul(x, w).unwrap();
            c.graph.mean(p).unwrap()
        }
        2 => {
            c.ops.push("sum_rows");
            let v = c.leaf(r, shape, -1.0, 1.0);
            let p = c.graph.mul(x, v).unwrap();
            let s = c.graph.sum_rows(p).unwrap();
            let w = c.leaf(r, &[shape[0], 1], -1.0, 1.0);
            let p = c.graph.mul(s, w).unwrap();
            c.graph.sum(p).unwrap()
        }
        3 => {
            c.ops.push("mse");
            let t = c.leaf(r, shape, -1.0, 1.0);
            c.graph.mse(x, t).unwrap()
        }
        4 => {
            c.ops.push("cross_entropy");
            let t = c.leaf(r, shape, -2.0, 2.0);
            let t = c.graph.softmax(t).unwrap();
            c.graph.cross_entropy(x, t).unwrap()
        }
        5 => {
            c.ops.push("kl_divergence");
            let p = c.leaf(r, shape, -2.0, 2.0);
            let p = c.graph.softmax(p).unwrap();
            let q = c.graph.softmax(x).unwrap();
            c.graph.kl_divergence(p, q).unwrap()
        }
        _ => {
            c.ops.push("kl_rows");
            let q = c.leaf(r, shape, -2.0, 2.0);
            let q = c.graph.softmax(q).unwrap();
            let p = c.graph.softmax(x).unwrap();
            let k = c.graph.kl_rows(p, q).unwrap();
            c.graph.sum(k).unwrap()
        }
    }
}

/// Dense layer stack followed by a random chain and a random reduction.
fn random_case(seed: u64) -> Case {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let mut c = Case::new();
    let n = r.gen_range(1..4);
    let d = r.gen_range(2..5);
    let m = r.gen_range(2..5);
    let x = c.leaf(&mut r, &[n, d], -1.0, 1.0);
    let w = c.leaf(&mut r, &[d, m], -1.0, 1.0);
    let mut cur = c.graph.matmul(x, w).unwrap();
    c.ops.push("matmul");
    for _ in 0..r.gen_range(1..5) {
        cur = random_step(&mut c, &mut r, cur, &[n, m]);
    }
    let out = random_reduce(&mut c, &mut r, cur, &[n, m]);
    c.graph.set_output(out);
    c
}

#[test]
fn hundred_seeded_compositions_match_central_differences() {
    let start = Instant::now();
    let mut seen = std::collections::BTreeSet::new();
    let mut worst: f64 = 0.0;
    for seed in 0..100 {
        let c = random_case(seed);
        let err = c.check();
        assert!(err < TOL, "case {seed} ({:?}): relative error {err:e}", c.ops);
        worst = worst.max(err);
        seen.extend(c.ops.iter().copied());
    }
    let every = [
        "matmul", "add", "add_row", "sub", "mul", "relu", "sigmoid", "exp", "log", "abs", "softmax",
        "log_softmax", "sum_rows", "sum", "mean", "mse", "cross_entropy", "kl_divergence", "kl_rows",
    ];
    for op in every {
        assert!(seen.contains(op), "op {op} never exercised");
    }
    assert!(start.elapsed().as_secs_f64() < 30.0);
    println!("worst relative error over 100 cases: {worst:e}");
}

fn two_layer_cross_entropy(seed: u64) -> (Graph, Vec<(String, Tensor)>) {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let mut t = |shape: &[usize], scale: f64| {
        let n: usize = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| r.gen_range(-scale..scale)).collect()).unwrap()
    };
    let vals = vec![
        ("x".to_string(), t(&[4, 6], 1.0)),
        ("w1".to_string(), t(&[6, 5], 0.8)),
        ("b1".to_string(), t(&[5], 0.5)),
        ("w2".to_string(), t(&[5, 3], 0.8)),
        ("b2".to_string(), t(&[3], 0.5)),
    ];
    let mut targets = Tensor::zeros(&[4, 3]);
    for i in 0..4 {
        targets.row_mut(i)[i % 3] = 1.0;
    }
    let mut g = Graph::new();
    let x = g.leaf("x", &[4, 6]).unwrap();
    let w1 = g.leaf("w1", &[6, 5]).unwrap();
    let b1 = g.leaf("b1", &[5]).unwrap();
    let w2 = g.leaf("w2", &[5, 3]).unwrap();
    let b2 = g.leaf("b2", &[3]).unwrap();
    let y = g.leaf("y", &[4, 3]).unwrap();
    let h = g.matmul(x, w1).unwrap();
    let h = g.add_row(h, b1).unwrap();
    let h = g.relu(h).unwrap();
    let z = g.matmul(h, w2).unwrap();
    let z = g.add_row(z, b2).unwrap();
    let l = g.cross_entropy(z, y).unwrap();
    g.set_output(l);
    let mut all = vals;
    all.push(("y".to_string(), targets));
    (g, all)
}

fn bind(vals: &[(String, Tensor)]) -> Bindings<'_> {
    let mut b = Bindings::new();
    for (n, t) in vals {
        b.bind(n.clone(), t);
    }
    b
}

#[test]
fn seeded_two_layer_cross_entropy() {
    let (g, vals) = two_layer_cross_entropy(17);
    let b = bind(&vals);
    // the chosen point keeps every pre-activation clear of the relu kink
    let mut probe = Graph::new();
    let x = probe.leaf("x", &[4, 6]).unwrap();
    let w1 = probe.leaf("w1", &[6, 5]).unwrap();
    let b1 = probe.leaf("b1", &[5]).unwrap();
    let h = probe.matmul(x, w1).unwrap();
    let h = probe.add_row(h, b1).unwrap();
    probe.set_output(h);
    let pre = evaluate(&probe, &b).unwrap();
    assert!(pre.data().iter().all(|v| v.abs() > 1e-3));
    let err = finite_difference_check(&g, &b, &["x", "w1", "b1", "w2", "b2"], 1e-4).unwrap();
    assert!(err < TOL, "{err:e}");
}

#[test]
fn softmax_kl_composite() {
    let mut r = ChaCha8Rng::seed_from_u64(3);
    let zp = Tensor::new(vec![3, 4], (0..12).map(|_| r.gen_range(-2.0..2.0)).collect()).unwrap();
    let zq = Tensor::new(vec![3, 4], (0..12).map(|_| r.gen_range(-2.0..2.0)).collect()).unwrap();
    let mut g = Graph::new();
    let a = g.leaf("zp", &[3, 4]).unwrap();
    let c = g.leaf("zq", &[3, 4]).unwrap();
    let p = g.softmax(a).unwrap();
    let q = g.softmax(c).unwrap();
    let l = g.kl_divergence(p, q).unwrap();
    g.set_output(l);
    let mut b = Bindings::new();
    b.bind("zp", &zp).bind("zq", &zq);
    assert!(finite_difference_check(&g, &b, &["zp", "zq"], 1e-4).unwrap() < TOL);
    assert!(evaluate(&g, &b).unwrap().item() >= -1e-12);
}

#[test]
fn evaluate_and_gradient_are_pure() {
    let (g, vals) = two_layer_cross_entropy(5);
    let b = bind(&vals);
    let v1 = evaluate(&g, &b).unwrap();
    let v2 = evaluate(&g, &b).unwrap();
    assert_eq!(v1.data()[0].to_bits(), v2.data()[0].to_bits());
    let g1 = gradient(&g, &b, &["w1", "x"]).unwrap();
    let g2 = gradient(&g, &b, &["w1", "x"]).unwrap();
    assert_eq!(g1.len(), 2);
    for (name, t) in g1.iter() {
        let other = g2.get(name).unwrap();
        assert_eq!(t.shape(), vals.iter().find(|(n, _)| n == name).unwrap().1.shape());
        assert!(t.data().iter().zip(other.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
    }
}
