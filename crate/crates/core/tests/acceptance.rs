//! End-to-end acceptance run. Prints one PASS/FAIL line per criterion.
//!
//! Run with `cargo test --test acceptance -- --nocapture` to see the lines.

mod common;

use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

use common::criteria::{self, Check};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vitasd::checkpoint::Checkpoint;
use vitasd::config::RunConfig;
use vitasd::data::{batch_tensor, gen_synthetic, BandLayout, Dataset, Split};
use vitasd::distill::distill;
use vitasd::mae::{load_pretrained, masked_count, plan_mask, pretrain, MaskPlan};
use vitasd::model::{encoder_checkpoint, Classifier};
use vitasd::train::{train, TrainOutcome};
use vitasd::viz::{attn_viz, band_contrast};

const SEED: u64 = 7;
const TRAIN_ACC: f64 = 0.95;
const TRAIN_AUROC: f64 = 0.98;
const TRAIN_SECONDS: f64 = 600.0;
const KD_STEPS: usize = 200;
const KD_RATIO: f64 = 0.10;
const TEACHER: &[&str] = &["model.preset=mini", "optimizer.lr=1e-3"];
const STUDENT: &[&str] = &["optimizer.lr=2e-3", "optimizer.epochs=16", "optimizer.warmup_epochs=1", "optimizer.max_steps=200"];
const MAE_RATIO: f64 = 0.50;
const MAE_LR: &str = "optimizer.lr=1e-3";

fn config(overrides: &[&str]) -> RunConfig {
    let o: Vec<String> = overrides.iter().map(|s| s.to_string()).collect();
    RunConfig::from_sources(None, &o).unwrap()
}

fn fresh(cfg: &RunConfig) -> Classifier {
    Classifier::new(&cfg.vit_config().unwrap(), &cfg.head_spec().unwrap(), cfg.seed).unwrap()
}

fn bits<'a>(params: impl IntoIterator<Item = &'a vitasd::nn::Param>) -> Vec<(String, Vec<u64>)> {
    params
        .into_iter()
        .map(|p| (p.name.clone(), p.value.data().iter().map(|v| v.to_bits()).collect()))
        .collect()
}

fn report(n: usize, name: &str, c: &Check) {
    println!("criterion {n:>2} {}: {name}: {}", if c.pass { "PASS" } else { "FAIL" }, c.detail);
}

fn gradient_and_rff(rff: Check, frozen: bool) -> Check {
    Check::new(rff.pass && frozen, format!("{}; W, b bit-frozen through training: {frozen}", rff.detail))
}

fn end_to_end(run: &TrainOutcome, secs: f64) -> Check {
    let auroc = run.test.auroc.unwrap_or(0.0);
    Check::new(
        run.test.accuracy >= TRAIN_ACC && auroc >= TRAIN_AUROC && secs < TRAIN_SECONDS,
        format!(
            "test accuracy {:.3}, AUROC {auroc:.4}, best epoch {}, {secs:.0}s",
            run.test.accuracy, run.best_epoch
        ),
    )
}

fn distillation(ds: &Dataset, scratch_budget_acc: f64) -> (Check, f64) {
    let tcfg = config(TEACHER);
    let t0 = Instant::now();
    let teacher = train(fresh(&tcfg), ds, &tcfg, None).unwrap().best;
    let teacher_secs = t0.elapsed().as_secs_f64();
    let before = bits(teacher.tensors());
    let scfg = config(STUDENT);
    let out = distill(&teacher, fresh(&scfg), ds, &scfg, None).unwrap();
    let unchanged = bits(teacher.tensors()) == before;
    let r = &out.report;
    let ratio = r.val_logit_final / r.val_logit_initial;
    let check = Check::new(
        ratio < KD_RATIO && r.steps == KD_STEPS && unchanged,
        format!(
            "val logit loss {:.5} -> {:.5} (ratio {ratio:.3}) in {} steps; teacher ({:.0}s) bit-unchanged: {unchanged}; \
             distilled test accuracy {:.3} vs from-scratch {:.3} (reported)",
            r.val_logit_initial, r.val_logit_final, r.steps, teacher_secs, r.test.accuracy, scratch_budget_acc
        ),
    );
    (check, r.test.accuracy)
}

/// Patch-major pixel indices of patch `p` in a `[B, H, W, 3]` batch element.
fn patch_pixels(size: usize, patch: usize, p: usize) -> Vec<usize> {
    let grid = size / patch;
    let (r, c) = (p / grid, p % grid);
    let mut out = Vec::new();
    for y in r * patch..(r + 1) * patch {
        for x in c * patch..(c + 1) * patch {
            for ch in 0..3 {
                out.push((y * size + x) * 3 + ch);
            }
        }
    }
    out
}

fn mae_mechanism(ds: &Dataset, out: &Path) -> (Check, PathBuf) {
    let cfg = config(&[MAE_LR]);
    let res = pretrain(&cfg, ds, None).unwrap();
    let r = &res.report;
    let ratio = r.probe_final / r.probe_initial;
    let ck = out.join("mae_encoder.ckpt");
    encoder_checkpoint(&res.mae.encoder).unwrap().save(&ck).unwrap();

    let vit = cfg.vit_config().unwrap();
    let n = vit.num_patches();
    let items = ds.split(Split::Test);
    let imgs: Vec<_> = items.iter().take(4).map(|i| &i.image).collect();
    let images = batch_tensor(&imgs).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let plans: Vec<MaskPlan> = (0..4).map(|_| plan_mask(n, cfg.mae.mask_ratio, &mut rng).unwrap()).collect();
    let base = res.mae.loss(&images, &images, &plans).unwrap();
    let per = vit.image_size * vit.image_size * 3;
    let perturb = |pick: &dyn Fn(&MaskPlan) -> Vec<usize>, rng: &mut ChaCha8Rng| {
        let mut t = images.clone();
        for (b, plan) in plans.iter().enumerate() {
            for p in pick(plan) {
                for i in patch_pixels(vit.image_size, vit.patch_size, p) {
                    t.data_mut()[b * per + i] = rng.random::<f64>();
                }
            }
        }
        res.mae.loss(&images, &t, &plans).unwrap()
    };
    let visible = perturb(&|p: &MaskPlan| p.visible.clone(), &mut rng);
    let masked = perturb(&|p: &MaskPlan| p.masked[..1].to_vec(), &mut rng);
    let invariant = visible.to_bits() == base.to_bits() && masked != base;

    let mut counts_ok = true;
    for (patches, expected) in [(64, 48), (196, 147), (49, 37), (4, 3)] {
        let plan = plan_mask(patches, 0.75, &mut rng).unwrap();
        counts_ok &= plan.masked.len() == expected && masked_count(patches, 0.75) == expected;
        let mut all: Vec<usize> = plan.visible.iter().chain(&plan.masked).copied().collect();
        all.sort_unstable();
        counts_ok &= all == (0..patches).collect::<Vec<_>>();
    }
    let check = Check::new(
        ratio < MAE_RATIO && invariant && counts_ok,
        format!(
            "probe loss {:.4} -> {:.4} (ratio {ratio:.3}) after {} steps; visible-target perturbation bit-identical: {}; \
             masked counts round(0.75N): {counts_ok}",
            r.probe_initial, r.probe_final, r.steps, visible.to_bits() == base.to_bits()
        ),
    );
    (check, ck)
}

fn interpretability(model: &Classifier, ds: &Dataset) -> Check {
    let size = model.config().image_size;
    let layout = BandLayout::new(size);
    let eyes: Vec<_> = ds.split(Split::Test).into_iter().filter(|i| i.label == 1).collect();
    let mut sums = vec![(0.0, 0.0); model.config().depth];
    for item in &eyes {
        let v = attn_viz(model, &item.image, None, false).unwrap();
        for (layer, s) in sums.iter_mut().enumerate() {
            let (i, o) = band_contrast(&v.layers[layer].pixels, size, layout.eye_band.clone());
            s.0 += i;
            s.1 += o;
        }
    }
    let k = eyes.len() as f64;
    let wins: Vec<usize> = (0..sums.len()).filter(|&l| sums[l].0 > sums[l].1).collect();
    let detail: Vec<String> = sums
        .iter()
        .enumerate()
        .map(|(l, s)| format!("layer {l} in {:.6} out {:.6}", s.0 / k, s.1 / k))
        .collect();
    Check::new(
        !wins.is_empty(),
        format!("eye band, mean over {} class-1 test images: {}", eyes.len(), detail.join(", ")),
    )
}

const BIN: &str = env!("CARGO_BIN_EXE_vitasd");

const SMALL: &[&str] = &[
    "model.image_size=16",
    "model.patch_size=8",
    "model.dim=16",
    "model.depth=2",
    "model.heads=2",
    "head.features=64",
    "optimizer.epochs=2",
    "optimizer.batch_size=8",
    "optimizer.warmup_epochs=1",
    "optimizer.lr=1e-3",
    "mae.steps=5",
    "data.train=24",
    "data.val=8",
    "data.test=8",
];

/// Every file under `dir`, relative path and bytes, sorted.
fn snapshot(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    walkdir::WalkDir::new(dir)
        .sort_by_file_name()
        .into_iter()
        .map(|e| e.unwrap())
        .filter(|e| e.file_type().is_file())
        .map(|e| (e.path().strip_prefix(dir).unwrap().to_path_buf(), std::fs::read(e.path()).unwrap()))
        .collect()
}

fn determinism(work: &Path) -> Check {
    let shared = work.join("shared");
    let data = shared.join("data");
    let base: Vec<String> = SMALL
        .iter()
        .map(|s| s.to_string())
        .chain([format!("data.root={}", data.display())])
        .collect();
    let invoke = |out: &Path, args: &[&str], extra: &[String]| {
        let mut cmd = Command::new(BIN);
        cmd.args(args).env("VITASD_OUTPUT_ROOT", out);
        for o in base.iter().chain(extra) {
            cmd.arg("--set").arg(o);
        }
        let o = cmd.output().unwrap();
        assert!(o.status.success(), "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
        o.stdout
    };
    // Fixed inputs that the later commands read.
    invoke(&shared, &["gen-data"], &[]);
    invoke(&shared.join("teacher"), &["train"], &[]);
    let teacher = shared.join("teacher/best.ckpt");
    let image = std::fs::read_dir(data.join("test/1_eye")).unwrap().next().unwrap().unwrap().path();

    let mut same = Vec::new();
    let mut differing = Vec::new();
    let commands: Vec<(&str, Vec<&str>, Vec<String>)> = vec![
        ("gen-data", vec!["gen-data"], vec![]),
        ("pretrain", vec!["pretrain"], vec![]),
        ("train", vec!["train"], vec![]),
        ("distill", vec!["distill"], vec![format!("kd.teacher_checkpoint={}", teacher.display())]),
        ("eval", vec!["eval", "--checkpoint", teacher.to_str().unwrap()], vec![]),
        (
            "attn-viz",
            vec!["attn-viz", "--checkpoint", teacher.to_str().unwrap(), "--image", image.to_str().unwrap(), "--per-head"],
            vec![],
        ),
    ];
    for (name, args, mut extra) in commands {
        let mut runs = Vec::new();
        for rep in 0..2 {
            let out = work.join(format!("{name}_{rep}"));
            if name == "gen-data" {
                extra = vec![format!("data.root={}", out.display())];
            }
            let stdout = invoke(&out, &args, &extra);
            let files = snapshot(&out);
            assert!(!files.is_empty(), "{name} wrote nothing");
            runs.push((files, stdout));
        }
        let files_equal = runs[0].0 == runs[1].0;
        if files_equal {
            same.push(format!("{name} ({} files)", runs[0].0.len()));
        } else {
            differing.push(name);
        }
    }
    Check::new(
        differing.is_empty(),
        if differing.is_empty() {
            format!("byte-identical outputs across two runs: {}", same.join(", "))
        } else {
            format!("outputs differ for {}", differing.join(", "))
        },
    )
}

#[test]
fn acceptance() {
    let work = tempfile::tempdir().unwrap();
    let data = work.path().join("data");
    gen_synthetic(&data, config(&[]).data.counts(), 32, SEED).unwrap();
    let ds = Dataset::load(&data, None).unwrap();
    let mut results: Vec<(usize, &str, Check)> = Vec::new();

    let c1 = criteria::gradient_suite();
    report(1, "gradient suite", &c1);
    results.push((1, "gradient suite", c1));
    let c2 = criteria::attention_invariants();
    report(2, "attention invariants", &c2);
    results.push((2, "attention invariants", c2));
    let c3 = criteria::sequence_law();
    report(3, "sequence-length law", &c3);
    results.push((3, "sequence-length law", c3));

    let cfg = config(&[]);
    let model = fresh(&cfg);
    let frozen_before = bits(model.head.buffers());
    let t = Instant::now();
    let run = train(model, &ds, &cfg, None).unwrap();
    let train_secs = t.elapsed().as_secs_f64();
    let frozen = bits(run.best.head.buffers()) == frozen_before && bits(run.last.head.buffers()) == frozen_before;

    let c4 = gradient_and_rff(criteria::rff_kernel(), frozen);
    report(4, "RFF kernel oracle", &c4);
    results.push((4, "RFF kernel oracle", c4));
    let c5 = criteria::auroc_oracle();
    report(5, "AUROC oracle", &c5);
    results.push((5, "AUROC oracle", c5));
    let c6 = end_to_end(&run, train_secs);
    report(6, "end-to-end training", &c6);
    results.push((6, "end-to-end training", c6));

    // From-scratch Tiny under the distillation budget, for the logged comparison.
    let scfg = config(STUDENT);
    let scratch = train(fresh(&scfg), &ds, &scfg, None).unwrap();
    let (c7, _) = distillation(&ds, scratch.test.accuracy);
    report(7, "distillation mechanism", &c7);
    results.push((7, "distillation mechanism", c7));

    let (c8, encoder) = mae_mechanism(&ds, work.path());
    let finetuned = train(
        load_pretrained(&Checkpoint::load(&encoder).unwrap(), &cfg.vit_config().unwrap(), &cfg.head_spec().unwrap(), cfg.seed)
            .unwrap(),
        &ds,
        &cfg,
        None,
    )
    .unwrap();
    let c8 = Check::new(
        c8.pass,
        format!(
            "{}; MAE-finetuned test accuracy {:.3} vs from-scratch {:.3} (reported)",
            c8.detail, finetuned.test.accuracy, run.test.accuracy
        ),
    );
    report(8, "MAE mechanism", &c8);
    results.push((8, "MAE mechanism", c8));

    let c9 = criteria::augmentation_invariants();
    report(9, "augmentation invariants", &c9);
    results.push((9, "augmentation invariants", c9));
    let c10 = interpretability(&run.best, &ds);
    report(10, "interpretability", &c10);
    results.push((10, "interpretability", c10));
    let c11 = determinism(work.path());
    report(11, "determinism", &c11);
    results.push((11, "determinism", c11));

    let failed: Vec<String> = results.iter().filter(|r| !r.2.pass).map(|r| format!("{} ({})", r.0, r.1)).collect();
    assert!(failed.is_empty(), "failing criteria: {}", failed.join(", "));
}

#[test]
fn patch_pixels_cover_the_image_once() {
    let mut seen = vec![0u8; 32 * 32 * 3];
    for p in 0..64 {
        for i in patch_pixels(32, 4, p) {
            seen[i] += 1;
        }
    }
    assert!(seen.iter().all(|&c| c == 1));
}
