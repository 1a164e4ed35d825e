//! Randomized whole-op-set gradient checking: build 100 random small
//! graphs covering every op kind, then compare analytic gradients to
//! central finite differences at 1e-4 relative tolerance (1e-6 absolute
//! floor).

use ccn_core::graph::{finite_diff_check, Bindings, Graph, NodeId, Value};
use ccn_core::rng::Rng64;

#[derive(Default)]
struct OpUsage {
    add: usize,
    mul: usize,
    matmul: usize,
    exp: usize,
    log: usize,
    sigmoid: usize,
    relu: usize,
    cos_diff: usize,
    softmax: usize,
    sum: usize,
    scale: usize,
    concat: usize,
    slice: usize,
}

fn random_vector(rng: &mut Rng64, n: usize) -> Value {
    Value::vector((0..n).map(|_| rng.uniform(-1.5, 1.5)).collect())
}

/// Build one random graph; returns its scalar root.
fn random_graph(rng: &mut Rng64, g: &mut Graph, usage: &mut OpUsage) -> NodeId {
    let dim = rng.range_inclusive(2, 4) as usize;
    let mut vectors: Vec<NodeId> = Vec::new();
    for i in 0..3 {
        vectors.push(g.leaf(&format!("v{i}"), random_vector(rng, dim)));
    }
    let rows = rng.range_inclusive(2, 3) as usize;
    let matrix = {
        let data = (0..rows * dim).map(|_| rng.uniform(-1.0, 1.0)).collect();
        g.leaf("m", Value::new(rows, dim, data))
    };

    let steps = rng.range_inclusive(8, 14);
    for _ in 0..steps {
        let pick = rng.next_below(13);
        let a = vectors[rng.next_below(vectors.len() as u64) as usize];
        let b = vectors
            .iter()
            .copied()
            .filter(|&v| g.shape(v) == g.shape(a))
            .last()
            .unwrap_or(a);
        let node = match pick {
            0 => {
                usage.add += 1;
                g.add(a, b)
            }
            1 => {
                usage.mul += 1;
                g.mul(a, b)
            }
            2 => {
                if g.shape(a).0 == dim {
                    usage.matmul += 1;
                    g.matmul(matrix, a)
                } else {
                    continue;
                }
            }
            3 => {
                // keep exp inputs small so probes stay well-conditioned
                usage.exp += 1;
                let shrunk = g.scale(a, 0.3);
                g.exp(shrunk)
            }
            4 => {
                // strictly positive input for log
                usage.log += 1;
                let sig = g.sigmoid(a);
                let floor = g.constant(Value::new(
                    g.shape(a).0,
                    1,
                    vec![0.25; g.shape(a).0],
                ));
                let pos = g.add(sig, floor);
                g.log(pos)
            }
            5 => {
                usage.sigmoid += 1;
                g.sigmoid(a)
            }
            6 => {
                usage.relu += 1;
                g.relu(a)
            }
            7 => {
                usage.cos_diff += 1;
                g.cos_diff(a, b)
            }
            8 => {
                usage.softmax += 1;
                g.softmax(a)
            }
            9 => {
                usage.scale += 1;
                g.scale(a, rng.uniform(-2.0, 2.0))
            }
            10 => {
                usage.concat += 1;
                g.concat(&[a, b])
            }
            11 => {
                let (n, _) = g.shape(a);
                if n < 2 {
                    continue;
                }
                usage.slice += 1;
                let len = rng.range_inclusive(1, n as u64 - 1) as usize;
                let start = rng.next_below((n - len) as u64 + 1) as usize;
                g.slice(a, start, len)
            }
            _ => {
                usage.sum += 1;
                g.sum(a)
            }
        };
        vectors.push(node);
    }

    // collapse everything reachable into one scalar
    let tail: Vec<NodeId> = vectors.iter().rev().take(3).copied().collect();
    let mut root = g.sum(tail[0]);
    usage.sum += 1;
    for &node in &tail[1..] {
        let s = g.sum(node);
        usage.sum += 1;
        // sigmoid keeps the root scale moderate for stable differences
        let squashed = g.sigmoid(s);
        usage.sigmoid += 1;
        root = g.add(root, squashed);
        usage.add += 1;
    }
    root
}

#[test]
fn hundred_random_graphs_pass_finite_differences() {
    let mut rng = Rng64::new(20240);
    let mut usage = OpUsage::default();
    let mut worst = 0.0f64;
    let mut kinks = 0;
    for case in 0..100 {
        let mut g = Graph::new();
        let root = random_graph(&mut rng, &mut g, &mut usage);
        let report = finite_diff_check(&g, &Bindings::new(), root).unwrap();
        assert!(!report.non_finite, "case {case} hit non-finite values");
        kinks += report.kink_skips;
        assert!(
            report.max_rel_err < 1e-4,
            "case {case}: rel err {} at {}[{}] (analytic {}, numeric {})",
            report.max_rel_err,
            report.worst_leaf,
            report.worst_coord,
            report.worst_analytic,
            report.worst_numeric
        );
        if report.max_rel_err > worst {
            worst = report.max_rel_err;
        }
    }
    // every op kind exercised somewhere in the 100 graphs
    assert!(usage.add > 0, "add unused");
    assert!(usage.mul > 0, "mul unused");
    assert!(usage.matmul > 0, "matmul unused");
    assert!(usage.exp > 0, "exp unused");
    assert!(usage.log > 0, "log unused");
    assert!(usage.sigmoid > 0, "sigmoid unused");
    assert!(usage.relu > 0, "relu unused");
    assert!(usage.cos_diff > 0, "cos_diff unused");
    assert!(usage.softmax > 0, "softmax unused");
    assert!(usage.sum > 0, "sum unused");
    assert!(usage.scale > 0, "scale unused");
    assert!(usage.concat > 0, "concat unused");
    assert!(usage.slice > 0, "slice unused");
    // relu kinks exist but must stay rare
    assert!(kinks < 50, "too many kink skips: {kinks}");
    assert!(worst < 1e-4);
}

#[test]
fn backward_of_summed_roots_is_sum_of_backwards() {
    let mut rng = Rng64::new(77);
    for _ in 0..20 {
        let mut g = Graph::new();
        let x = g.leaf("x", random_vector(&mut rng, 3));
        let e = g.exp(x);
        let f1 = g.sum(e);
        let sig = g.sigmoid(x);
        let f2 = g.sum(sig);
        let both = g.add(f1, f2);
        let eval = g.forward(&Bindings::new()).unwrap();
        let g1 = g.backward(&eval, f1).unwrap();
        let g2 = g.backward(&eval, f2).unwrap();
        let gb = g.backward(&eval, both).unwrap();
        let a = g.leaf_grad(&g1, "x").unwrap();
        let b = g.leaf_grad(&g2, "x").unwrap();
        let c = g.leaf_grad(&gb, "x").unwrap();
        for i in 0..3 {
            assert!((c[i] - (a[i] + b[i])).abs() < 1e-12);
        }
    }
}
