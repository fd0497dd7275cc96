#![allow(dead_code)]

pub mod criteria;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vitasd::autograd::{Graph, Tensor, Var};

/// Step for central differences.
pub const FD_STEP: f64 = 1e-4;
/// Denominator floor of the relative error, so gradients that are zero up
/// to rounding do not divide by zero.
pub const REL_FLOOR: f64 = 1e-6;

pub fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(REL_FLOOR)
}

pub fn random_tensor(shape: &[usize], rng: &mut impl Rng, lo: f64, hi: f64) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(lo..hi))
}

/// Reduce any output to a scalar via a fixed random projection.
pub fn project(g: &mut Graph, out: Var, seed: u64) -> Var {
    let shape = g.shape(out).to_vec();
    if shape.iter().product::<usize>() == 1 && shape.len() <= 1 {
        return out;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = g.constant(random_tensor(&shape, &mut rng, -1.0, 1.0));
    let p = g.mul(out, r).unwrap();
    let n = shape.iter().product::<usize>();
    let flat = g.reshape(p, &[n]).unwrap();
    let m = g.mean(flat).unwrap();
    g.scale(m, n as f64).unwrap()
}

/// Largest relative error between analytic and central-difference gradients
/// of `f` with respect to each input, over `samples` entries per input (all
/// entries when `None`).
pub fn gradcheck<F>(inputs: &[Tensor], samples: Option<usize>, seed: u64, f: F) -> f64
where
    F: Fn(&mut Graph, &[Var]) -> Var,
{
    let eval = |xs: &[Tensor]| -> f64 {
        let mut g = Graph::new();
        let vars: Vec<Var> = xs.iter().map(|t| g.leaf(t.clone(), false)).collect();
        let out = f(&mut g, &vars);
        let l = project(&mut g, out, seed);
        g.value(l).item()
    };
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone(), true)).collect();
    let out = f(&mut g, &vars);
    let l = project(&mut g, out, seed);
    let grads = g.backward(l).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabcdef);
    let mut worst: f64 = 0.0;
    for (k, v) in vars.iter().enumerate() {
        let analytic = grads.get(*v).expect("input gradient").clone();
        let n = inputs[k].numel();
        let idx: Vec<usize> = match samples {
            Some(s) if s < n => (0..s).map(|_| rng.random_range(0..n)).collect(),
            _ => (0..n).collect(),
        };
        for i in idx {
            let mut plus = inputs.to_vec();
            plus[k].data_mut()[i] += FD_STEP;
            let mut minus = inputs.to_vec();
            minus[k].data_mut()[i] -= FD_STEP;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * FD_STEP);
            worst = worst.max(rel_err(analytic.data()[i], numeric));
        }
    }
    worst
}

/// Exhaustive pairwise AUROC: wins plus half of ties, over all positive–negative pairs.
pub fn auroc_pairwise(scores: &[f64], positive: &[bool]) -> f64 {
    let mut wins = 0.0;
    let mut pairs = 0.0;
    for i in 0..scores.len() {
        if !positive[i] {
            continue;
        }
        for j in 0..scores.len() {
            if positive[j] {
                continue;
            }
            pairs += 1.0;
            if scores[i] > scores[j] {
                wins += 1.0;
            } else if scores[i] == scores[j] {
                wins += 0.5;
            }
        }
    }
    wins / pairs
}

/// Flat-loop MSE of two equal-length buffers.
pub fn flat_mse(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let mut s = 0.0;
    for i in 0..a.len() {
        let d = a[i] - b[i];
        s += d * d;
    }
    s / a.len() as f64
}

/// Apply a `[from, to]` head-mixing matrix to a `[B, from, T, T]` buffer by
/// explicit loops, returning `[B, to, T, T]`.
pub fn mix_heads_loop(attn: &Tensor, w: &Tensor, bias: &[f64]) -> Vec<f64> {
    let s = attn.shape();
    let (b, from, t) = (s[0], s[1], s[2]);
    let to = w.shape()[1];
    let mut out = vec![0.0; b * to * t * t];
    for bi in 0..b {
        for j in 0..to {
            for q in 0..t {
                for k in 0..t {
                    let mut acc = bias[j];
                    for i in 0..from {
                        acc += attn.data()[((bi * from + i) * t + q) * t + k] * w.data()[i * to + j];
                    }
                    out[((bi * to + j) * t + q) * t + k] = acc;
                }
            }
        }
    }
    out
}

/// Max relative error of every differentiable graph op on random inputs.
pub fn op_gradchecks() -> Vec<(&'static str, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut t = |shape: &[usize]| random_tensor(shape, &mut rng, -1.0, 1.0);
    let a234 = t(&[2, 3, 4]);
    let b45 = t(&[4, 5]);
    let b245 = t(&[2, 4, 5]);
    let c234 = t(&[2, 3, 4]);
    let d4 = t(&[4]);
    let s2 = t(&[2, 3]);
    let mut soft = t(&[2, 3]);
    for row in soft.data_mut().chunks_mut(3) {
        let tot: f64 = row.iter().map(|v| v.abs()).sum();
        for v in row.iter_mut() {
            *v = v.abs() / tot;
        }
    }
    let x4 = t(&[2, 2, 3, 3]);
    let mut out = vec![
        ("matmul_shared", gradcheck(&[a234.clone(), b45.clone()], None, 1, |g, v| g.matmul(v[0], v[1]).unwrap())),
        ("matmul_batched", gradcheck(&[a234.clone(), b245], None, 2, |g, v| g.matmul(v[0], v[1]).unwrap())),
        ("add", gradcheck(&[a234.clone(), c234.clone()], None, 3, |g, v| g.add(v[0], v[1]).unwrap())),
        ("add_broadcast", gradcheck(&[a234.clone(), d4.clone()], None, 4, |g, v| g.add(v[0], v[1]).unwrap())),
        ("sub", gradcheck(&[a234.clone(), c234.clone()], None, 5, |g, v| g.sub(v[0], v[1]).unwrap())),
        ("mul", gradcheck(&[a234.clone(), c234.clone()], None, 6, |g, v| g.mul(v[0], v[1]).unwrap())),
        ("mul_broadcast", gradcheck(&[a234.clone(), d4], None, 7, |g, v| g.mul(v[0], v[1]).unwrap())),
        ("scale", gradcheck(&[a234.clone()], None, 8, |g, v| g.scale(v[0], -1.7).unwrap())),
        ("layer_norm", gradcheck(&[a234.clone()], None, 9, |g, v| g.layer_norm(v[0]).unwrap())),
        ("softmax_lastdim", gradcheck(&[a234.clone()], None, 10, |g, v| g.softmax_lastdim(v[0]).unwrap())),
        ("gelu", gradcheck(&[a234.clone()], None, 11, |g, v| g.gelu(v[0]).unwrap())),
        ("cos", gradcheck(&[a234.clone()], None, 12, |g, v| g.cos(v[0]).unwrap())),
        ("reshape", gradcheck(&[a234.clone()], None, 13, |g, v| g.reshape(v[0], &[6, 4]).unwrap())),
        ("transpose", gradcheck(&[x4.clone()], None, 14, |g, v| g.transpose(v[0], 1, 3).unwrap())),
        ("slice", gradcheck(&[a234.clone()], None, 15, |g, v| g.slice(v[0], 1, 1, 2).unwrap())),
        ("concat", gradcheck(&[a234.clone(), c234.clone()], None, 16, |g, v| g.concat(&[v[0], v[1]], 1).unwrap())),
        ("gather_rows", gradcheck(&[a234.clone()], None, 17, |g, v| {
            g.gather_rows(v[0], &[vec![2, 0, 2], vec![1, 1, 0]]).unwrap()
        })),
        ("mean", gradcheck(&[a234.clone()], None, 18, |g, v| g.mean(v[0]).unwrap())),
        ("mse", gradcheck(&[a234.clone(), c234], None, 19, |g, v| g.mse(v[0], v[1]).unwrap())),
    ];
    out.push((
        "softmax_cross_entropy",
        gradcheck(&[s2], None, 20, move |g, v| g.softmax_cross_entropy(v[0], &soft).unwrap()),
    ));
    out
}

/// Max relative error over sampled entries of every trainable tensor of the
/// Tiny classifier with a GP head, under a cross-entropy loss.
pub fn tiny_model_gradcheck(samples_per_tensor: usize, seed: u64) -> f64 {
    use vitasd::model::{Classifier, HeadKind, HeadSpec};
    use vitasd::nn::Module;
    use vitasd::vit::VitConfig;

    let cfg = VitConfig::tiny();
    let head = HeadSpec {
        kind: HeadKind::Gp,
        features: 1024,
        length_scale: (cfg.dim as f64).sqrt(),
    };
    let mut model = Classifier::new(&cfg, &head, seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // Zero-initialized beta would zero every backbone gradient.
    for p in model.params_mut() {
        if p.name == "gp.beta" {
            p.value = random_tensor(p.value.shape(), &mut rng, -1.0, 1.0);
        }
    }
    let images = random_tensor(&[2, 32, 32, 3], &mut rng, 0.0, 1.0);
    let targets = Tensor::new(&[2, 2], vec![0.8, 0.2, 0.0, 1.0]).unwrap();
    let loss_of = |m: &Classifier| -> f64 {
        let mut g = Graph::new();
        let out = g.frozen(|g| m.forward(g, &images)).unwrap();
        let l = g.softmax_cross_entropy(out.logits, &targets).unwrap();
        g.value(l).item()
    };
    let mut g = Graph::new();
    let out = model.forward(&mut g, &images).unwrap();
    let l = g.softmax_cross_entropy(out.logits, &targets).unwrap();
    let grads = g.backward(l).unwrap();
    let names: Vec<(String, usize)> = model.params().iter().map(|p| (p.name.clone(), p.value.numel())).collect();
    let mut worst: f64 = 0.0;
    for (name, n) in names {
        let analytic = grads.by_name(&name).unwrap_or_else(|| panic!("no grad for {name}")).clone();
        for _ in 0..samples_per_tensor {
            let i = rng.random_range(0..n);
            let eval_at = |delta: f64| {
                let mut m = model.clone();
                for p in m.params_mut() {
                    if p.name == name {
                        p.value.data_mut()[i] += delta;
                    }
                }
                loss_of(&m)
            };
            let numeric = (eval_at(FD_STEP) - eval_at(-FD_STEP)) / (2.0 * FD_STEP);
            worst = worst.max(rel_err(analytic.data()[i], numeric));
        }
    }
    worst
}
