//! Every differentiable op against central finite differences on random shapes.

use craft_core::rng::substream;
use craft_core::tensor::{Graph, Tensor, Var};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

const H: f64 = 1e-5;

type Build = dyn Fn(&mut Graph, &[Var]) -> Var;

fn rand_t(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

/// Reduce any output to a scalar through fixed random weights so that every
/// output element contributes a distinct direction.
fn weighted(g: &mut Graph, out: Var, seed: u64) -> Var {
    let shape = g.value(out).shape().to_vec();
    let mut rng = substream(seed, "weights");
    let w = g.constant(rand_t(&mut rng, &shape, -1.0, 1.0)).unwrap();
    let p = g.mul(out, w).unwrap();
    g.sum(p).unwrap()
}

fn eval(build: &Build, inputs: &[Tensor], seed: u64) -> f64 {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone(), false).unwrap()).collect();
    let out = build(&mut g, &vars);
    let l = weighted(&mut g, out, seed);
    g.value(l).item()
}

/// Largest norm-wise relative error over all inputs.
fn check(build: &Build, inputs: &[Tensor], seed: u64) -> f64 {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone(), true).unwrap()).collect();
    let out = build(&mut g, &vars);
    let l = weighted(&mut g, out, seed);
    g.backward(l).unwrap();
    let mut worst: f64 = 0.0;
    for (k, v) in vars.iter().enumerate() {
        let analytic = g.grad(*v).map(|t| t.data().to_vec()).unwrap_or_else(|| vec![0.0; inputs[k].numel()]);
        let mut fd = Vec::with_capacity(analytic.len());
        for i in 0..inputs[k].numel() {
            let mut plus = inputs.to_vec();
            plus[k].data_mut()[i] += H;
            let mut minus = inputs.to_vec();
            minus[k].data_mut()[i] -= H;
            fd.push((eval(build, &plus, seed) - eval(build, &minus, seed)) / (2.0 * H));
        }
        let diff = analytic.iter().zip(&fd).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        let scale = analytic.iter().map(|a| a * a).sum::<f64>().sqrt().max(fd.iter().map(|a| a * a).sum::<f64>().sqrt());
        worst = worst.max(diff / scale.max(1e-12));
    }
    worst
}

fn run_op(name: &str, tol: f64, trials: u64, gen: impl Fn(&mut ChaCha8Rng) -> (Vec<Tensor>, Box<Build>)) {
    for t in 0..trials {
        let mut rng = substream(t, name);
        let (inputs, build) = gen(&mut rng);
        let e = check(build.as_ref(), &inputs, t);
        assert!(e <= tol, "{name} trial {t}: relative error {e}");
    }
}

fn dims(rng: &mut ChaCha8Rng) -> (usize, usize, usize) {
    (rng.random_range(1..5), rng.random_range(1..5), rng.random_range(1..5))
}

#[test]
fn matmul_family() {
    run_op("matmul", 1e-6, 20, |rng| {
        let (m, k, n) = dims(rng);
        (vec![rand_t(rng, &[m, k], -1.0, 1.0), rand_t(rng, &[k, n], -1.0, 1.0)], Box::new(|g, v| g.matmul(v[0], v[1]).unwrap()))
    });
    run_op("matmul_nt", 1e-6, 20, |rng| {
        let (m, k, n) = dims(rng);
        (vec![rand_t(rng, &[m, k], -1.0, 1.0), rand_t(rng, &[n, k], -1.0, 1.0)], Box::new(|g, v| g.matmul_nt(v[0], v[1]).unwrap()))
    });
}

#[test]
fn elementwise() {
    type Bin = fn(&mut Graph, Var, Var) -> Var;
    let bins: [(&str, Bin); 3] = [
        ("add", |g, a, b| g.add(a, b).unwrap()),
        ("sub", |g, a, b| g.sub(a, b).unwrap()),
        ("mul", |g, a, b| g.mul(a, b).unwrap()),
    ];
    for (name, f) in bins {
        run_op(name, 1e-5, 10, |rng| {
            let (m, n, _) = dims(rng);
            (vec![rand_t(rng, &[m, n], -1.0, 1.0), rand_t(rng, &[m, n], -1.0, 1.0)], Box::new(move |g, v| f(g, v[0], v[1])))
        });
    }
    type Un = fn(&mut Graph, Var) -> Var;
    let uns: [(&str, Un, f64, f64); 6] = [
        ("gelu", |g, x| g.gelu(x).unwrap(), -3.0, 3.0),
        ("sigmoid", |g, x| g.sigmoid(x).unwrap(), -4.0, 4.0),
        ("log_sigmoid", |g, x| g.log_sigmoid(x).unwrap(), -4.0, 4.0),
        ("log", |g, x| g.log(x).unwrap(), 0.2, 3.0),
        ("exp", |g, x| g.exp(x).unwrap(), -2.0, 2.0),
        ("scale", |g, x| g.scale(x, -1.7).unwrap(), -1.0, 1.0),
    ];
    for (name, f, lo, hi) in uns {
        run_op(name, 1e-5, 10, |rng| {
            let (m, n, _) = dims(rng);
            (vec![rand_t(rng, &[m, n], lo, hi)], Box::new(move |g, v| f(g, v[0])))
        });
    }
}

#[test]
fn broadcasts_and_scalars() {
    run_op("add_row", 1e-5, 10, |rng| {
        let (m, n, _) = dims(rng);
        (vec![rand_t(rng, &[m, n], -1.0, 1.0), rand_t(rng, &[n], -1.0, 1.0)], Box::new(|g, v| g.add_row(v[0], v[1]).unwrap()))
    });
    run_op("scale_by", 1e-5, 10, |rng| {
        let (m, n, _) = dims(rng);
        (vec![rand_t(rng, &[m, n], -1.0, 1.0), rand_t(rng, &[], 0.5, 2.0)], Box::new(|g, v| g.scale_by(v[0], v[1]).unwrap()))
    });
}

#[test]
fn reductions() {
    type Red = fn(&mut Graph, Var) -> Var;
    let reds: [(&str, Red); 3] = [
        ("sum", |g, x| g.sum(x).unwrap()),
        ("mean", |g, x| g.mean(x).unwrap()),
        ("squared_l2", |g, x| g.squared_l2(x).unwrap()),
    ];
    for (name, f) in reds {
        run_op(name, 1e-5, 10, |rng| {
            let (m, n, _) = dims(rng);
            (vec![rand_t(rng, &[m, n], -1.0, 1.0)], Box::new(move |g, v| f(g, v[0])))
        });
    }
}

#[test]
fn normalization_and_similarity() {
    run_op("layer_norm", 1e-5, 15, |rng| {
        let m = rng.random_range(1..4);
        let n = rng.random_range(2..6);
        (
            vec![rand_t(rng, &[m, n], -2.0, 2.0), rand_t(rng, &[n], 0.5, 1.5), rand_t(rng, &[n], -0.5, 0.5)],
            Box::new(|g, v| g.layer_norm(v[0], v[1], v[2]).unwrap()),
        )
    });
    run_op("cosine_similarity", 1e-5, 15, |rng| {
        let (m, d, n) = dims(rng);
        (
            vec![rand_t(rng, &[m, d + 1], 0.1, 1.0), rand_t(rng, &[n, d + 1], -1.0, 1.0)],
            Box::new(|g, v| g.cosine_similarity(v[0], v[1]).unwrap()),
        )
    });
}

#[test]
fn softmax_and_attention() {
    for causal in [false, true] {
        run_op(if causal { "softmax_causal" } else { "softmax" }, 1e-5, 10, move |rng| {
            let n = rng.random_range(1..6);
            (vec![rand_t(rng, &[n, n], -2.0, 2.0)], Box::new(move |g, v| g.softmax_rows(v[0], causal).unwrap()))
        });
        run_op("attention", 1e-5, 10, move |rng| {
            let (n, d, _) = dims(rng);
            (
                vec![rand_t(rng, &[n, d], -1.0, 1.0), rand_t(rng, &[n, d], -1.0, 1.0)],
                Box::new(move |g, v| g.attention_weights(v[0], v[1], causal).unwrap()),
            )
        });
    }
}

#[test]
fn lookup_and_cross_entropy() {
    run_op("embedding", 1e-5, 10, |rng| {
        let (vocab, d, _) = dims(rng);
        let ids: Vec<usize> = (0..rng.random_range(1..6)).map(|_| rng.random_range(0..vocab)).collect();
        (vec![rand_t(rng, &[vocab, d], -1.0, 1.0)], Box::new(move |g, v| g.embedding(v[0], &ids).unwrap()))
    });
    run_op("softmax_cross_entropy", 1e-5, 15, |rng| {
        let (m, n, _) = dims(rng);
        let mut targets: Vec<Option<usize>> =
            (0..m).map(|_| if rng.random_bool(0.3) { None } else { Some(rng.random_range(0..n)) }).collect();
        targets[0] = Some(0);
        (vec![rand_t(rng, &[m, n], -2.0, 2.0)], Box::new(move |g, v| g.softmax_cross_entropy(v[0], &targets).unwrap()))
    });
}

#[test]
fn concat_and_slice() {
    run_op("concat_rows", 1e-5, 10, |rng| {
        let (a, b, n) = dims(rng);
        (
            vec![rand_t(rng, &[a, n], -1.0, 1.0), rand_t(rng, &[b, n], -1.0, 1.0)],
            Box::new(|g, v| g.concat_rows(&[v[0], v[1]]).unwrap()),
        )
    });
    run_op("concat_cols", 1e-5, 10, |rng| {
        let (m, a, b) = dims(rng);
        (
            vec![rand_t(rng, &[m, a], -1.0, 1.0), rand_t(rng, &[m, b], -1.0, 1.0)],
            Box::new(|g, v| g.concat_cols(&[v[0], v[1]]).unwrap()),
        )
    });
    run_op("slices", 1e-5, 10, |rng| {
        let m = rng.random_range(2..6);
        let n = rng.random_range(2..6);
        (
            vec![rand_t(rng, &[m, n], -1.0, 1.0)],
            Box::new(move |g, v| {
                let r = g.slice_rows(v[0], 1, m).unwrap();
                g.slice_cols(r, 0, n - 1).unwrap()
            }),
        )
    });
}

#[test]
fn backward_visits_each_node_once() {
    let mut rng = substream(0, "visits");
    let mut g = Graph::new();
    let x = g.leaf(rand_t(&mut rng, &[3, 3], -1.0, 1.0), true).unwrap();
    let c = g.constant(rand_t(&mut rng, &[3, 3], -1.0, 1.0)).unwrap();
    // Diamond: x feeds two branches that rejoin.
    let a = g.gelu(x).unwrap();
    let b = g.mul(x, c).unwrap();
    let s = g.add(a, b).unwrap();
    let t = g.matmul(s, x).unwrap();
    let l = g.mean(t).unwrap();
    g.backward(l).unwrap();
    // x, a, b, s, t, l require gradients; the constant does not.
    assert_eq!(g.last_backward_visits(), 6);
}
