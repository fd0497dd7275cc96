//! Property checks shared by the focused test files and the acceptance run.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vitasd::autograd::{Graph, Tensor};
use vitasd::data::augment::{augment, cutmix, grayscale, mixup, one_hot, sample_cut_box, solarize, gaussian_blur, AugmentConfig, CutBox};
use vitasd::data::Image;
use vitasd::gp_head::{rbf_kernel, RffHead};
use vitasd::train::auroc;
use vitasd::vit::{Vit, VitConfig};

use super::{auroc_pairwise, op_gradchecks, random_tensor, tiny_model_gradcheck};

pub struct Check {
    pub pass: bool,
    pub detail: String,
}

impl Check {
    pub fn new(pass: bool, detail: impl Into<String>) -> Self {
        Check {
            pass,
            detail: detail.into(),
        }
    }
}

pub const GRAD_TOL: f64 = 1e-4;
pub const GRAD_SECONDS: f64 = 60.0;

pub fn gradient_suite() -> Check {
    let t = std::time::Instant::now();
    let ops = op_gradchecks();
    let (worst_op, worst) = ops
        .iter()
        .cloned()
        .fold(("", 0.0f64), |acc, (n, e)| if e > acc.1 { (n, e) } else { acc });
    let model = tiny_model_gradcheck(4, 3);
    let secs = t.elapsed().as_secs_f64();
    Check::new(
        worst < GRAD_TOL && model < GRAD_TOL && secs < GRAD_SECONDS,
        format!(
            "{} ops, worst {worst_op} {worst:.2e}; Tiny model {model:.2e}; {secs:.1}s",
            ops.len()
        ),
    )
}

pub const ROW_SUM_TOL: f64 = 1e-5;

pub fn attention_invariants() -> Check {
    let cfg = VitConfig::tiny();
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let vit = Vit::new(&cfg, &mut rng).unwrap();
    let mut worst: f64 = 0.0;
    let mut unit = true;
    for _ in 0..10 {
        let images = random_tensor(&[10, 32, 32, 3], &mut rng, 0.0, 1.0);
        let enc = vit.encode(&images).unwrap();
        worst = worst.max(enc.attention.max_row_sum_error());
        unit &= enc.attention.all_in_unit_interval();
    }
    let mut identity = true;
    for block in &vit.blocks {
        let mut b = block.clone();
        b.zero_branches();
        let x = random_tensor(&[3, cfg.seq_len(), cfg.dim], &mut rng, -2.0, 2.0);
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let (y, _) = g.frozen(|g| b.forward(g, xv)).unwrap();
        identity &= *g.value(y) == x;
    }
    Check::new(
        worst < ROW_SUM_TOL && unit && identity,
        format!("100 inputs, max |row sum - 1| {worst:.2e}; zeroed blocks identity: {identity}"),
    )
}

pub fn sequence_law() -> Check {
    let mut notes = Vec::new();
    let mut ok = true;
    for name in ["tiny", "mini", "s", "b", "l"] {
        // Token count depends only on the embedding stage, so one block suffices.
        let cfg = VitConfig {
            depth: 1,
            ..VitConfig::preset(name).unwrap()
        };
        let vit = Vit::new(&cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let n = cfg.image_size;
        let mut g = Graph::new();
        let images = Tensor::zeros(&[1, n, n, 3]);
        let toks = g.frozen(|g| vit.patchify(g, &images)).unwrap();
        let got = g.shape(toks)[1];
        let expected = n * n / (cfg.patch_size * cfg.patch_size) + 1;
        ok &= got == expected && g.shape(toks)[2] == cfg.dim;
        notes.push(format!("{name} {n}/{} -> {got}", cfg.patch_size));
    }
    let mut ok197 = false;
    if let Some(s) = VitConfig::preset("b") {
        ok197 = s.seq_len() == 197;
    }
    Check::new(ok && ok197, notes.join(", "))
}

pub const RFF_MAE_TOL: f64 = 0.02;
pub const RFF_DIM: usize = 8;
pub const RFF_SEEDS: u64 = 20;
pub const RFF_DISTANCES: [f64; 4] = [0.0, 0.5, 1.0, 2.0];

/// Mean absolute kernel error at `features` over seeds and distances.
pub fn rff_error(features: usize) -> f64 {
    let mut total = 0.0;
    let mut count = 0.0;
    for seed in 0..RFF_SEEDS {
        let head = RffHead::init(RFF_DIM, 2, features, 1.0, 1000 + seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x: Vec<f64> = (0..RFF_DIM).map(|_| rng.random_range(-1.0..1.0)).collect();
        let u: Vec<f64> = (0..RFF_DIM).map(|_| rng.random_range(-1.0..1.0)).collect();
        let norm = u.iter().map(|v| v * v).sum::<f64>().sqrt();
        for d in RFF_DISTANCES {
            let y: Vec<f64> = x.iter().zip(&u).map(|(a, b)| a + d * b / norm).collect();
            let exact = (-d * d / 2.0f64).exp();
            assert!((rbf_kernel(&x, &y, 1.0) - exact).abs() < 1e-12);
            total += (head.kernel(&x, &y).unwrap() - exact).abs();
            count += 1.0;
        }
    }
    total / count
}

pub fn rff_kernel() -> Check {
    let errs: Vec<f64> = [256, 4096, 65536].iter().map(|&m| rff_error(m)).collect();
    let monotone = errs.windows(2).all(|w| w[1] < w[0]);
    Check::new(
        errs[2] < RFF_MAE_TOL && monotone,
        format!("MAE at M=256/4096/65536: {:.4}/{:.4}/{:.4}", errs[0], errs[1], errs[2]),
    )
}

pub fn auroc_oracle() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut mismatches = 0;
    let mut ties = 0;
    for _ in 0..1000 {
        let n = rng.random_range(2..60);
        let levels = rng.random_range(1..10);
        let scores: Vec<f64> = (0..n).map(|_| rng.random_range(0..levels) as f64 / levels as f64).collect();
        let mut pos: Vec<bool> = (0..n).map(|_| rng.random::<bool>()).collect();
        pos[0] = true;
        pos[1] = false;
        ties += usize::from(scores.len() > levels);
        let a = auroc(&scores, &pos).unwrap();
        if a.to_bits() != auroc_pairwise(&scores, &pos).to_bits() {
            mismatches += 1;
        }
    }
    Check::new(
        mismatches == 0 && ties > 0,
        format!("1000 instances ({ties} with ties), {mismatches} mismatches"),
    )
}

fn noise_image(rng: &mut impl Rng, h: usize, w: usize) -> Image {
    Image::new(h, w, (0..h * w * 3).map(|_| rng.random::<f64>()).collect()).unwrap()
}

fn in_range(img: &Image) -> bool {
    img.data.iter().all(|v| (0.0..=1.0).contains(v))
}

pub fn augmentation_invariants() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let cfg = AugmentConfig {
        enabled: true,
        grayscale_p: 0.5,
        solarize_p: 0.5,
        blur_p: 0.5,
        mix_p: 0.8,
        ..AugmentConfig::default()
    };
    let mut failures = Vec::new();
    for trial in 0..300 {
        let a = noise_image(&mut rng, 16, 16);
        let b = noise_image(&mut rng, 16, 16);
        let (ya, yb) = (one_hot(trial % 2, 2), one_hot((trial + 1) % 2, 2));
        let (img, y) = augment(&a, &ya, (&b, &yb), &cfg, &mut rng).unwrap();
        if !in_range(&img) {
            failures.push("pipeline range");
        }
        if (y.iter().sum::<f64>() - 1.0).abs() > 1e-12 {
            failures.push("soft-label sum");
        }
        let g = grayscale(&a);
        if !in_range(&g) || g.data.chunks(3).any(|p| p[0] != p[1] || p[1] != p[2]) {
            failures.push("grayscale");
        }
        if !in_range(&solarize(&a, 0.5)) || !in_range(&gaussian_blur(&a, 1.3)) {
            failures.push("photometric range");
        }
        let lambda = rng.random::<f64>();
        let (m, my) = mixup(&a, &ya, &b, &yb, lambda);
        if !in_range(&m) || (my.iter().sum::<f64>() - 1.0).abs() > 1e-12 {
            failures.push("mixup");
        }
        let cut = sample_cut_box(16, 16, lambda, &mut rng);
        let (c, cy) = cutmix(&a, &ya, &b, &yb, cut);
        let w = 1.0 - cut.area() as f64 / 256.0;
        if !in_range(&c) || (cy[0] - (w * ya[0] + (1.0 - w) * yb[0])).abs() > 1e-12 {
            failures.push("cutmix");
        }
    }
    let a = noise_image(&mut rng, 16, 16);
    let b = noise_image(&mut rng, 16, 16);
    let (ya, yb) = (vec![1.0, 0.0], vec![0.0, 1.0]);
    let (m, my) = mixup(&a, &ya, &b, &yb, 1.0);
    if m != a || my != ya {
        failures.push("mixup endpoint");
    }
    let quarter = CutBox { y0: 0, y1: 8, x0: 0, x1: 8 };
    let (_, q) = cutmix(&a, &ya, &b, &yb, quarter);
    if q != vec![0.75, 0.25] {
        failures.push("cutmix quarter");
    }
    let px = Image::new(1, 1, vec![0.8, 0.3, 0.5]).unwrap();
    let s = solarize(&px, 0.5);
    if (s.data[0] - 0.2).abs() > 1e-15 || s.data[1] != 0.3 || s.data[2] != 0.5 {
        failures.push("solarize example");
    }
    failures.dedup();
    Check::new(
        failures.is_empty(),
        if failures.is_empty() {
            "300 random trials plus endpoint examples".to_string()
        } else {
            format!("violations: {}", failures.join(", "))
        },
    )
}
