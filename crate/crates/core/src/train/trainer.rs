use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::metrics::MetricsReport;
use super::optim::{AdamW, CosineSchedule};
use crate::autograd::{Graph, Tensor};
use crate::config::RunConfig;
use crate::data::augment::{augment, item_rng, one_hot};
use crate::data::{batch_tensor, Dataset, Image, Item, Split};
use crate::error::{Error, Result};
use crate::model::Classifier;
use crate::nn::Module;

const SHUFFLE_SALT: u64 = 0x5bd1_e995_2c1b_3c6d;

/// One optimizer batch: `[B, H, W, 3]` images and `[B, C]` soft targets.
pub struct Batch {
    pub images: Tensor,
    pub targets: Tensor,
    pub labels: Vec<usize>,
}

/// Item order for `epoch`, a pure function of the seed.
pub fn epoch_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ SHUFFLE_SALT);
    rng.set_stream(epoch as u64);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    order
}

/// Assemble and augment a batch. Each item's partner is the item at the
/// mirrored position of the batch.
pub fn make_batch(
    items: &[&Item],
    indices: &[usize],
    classes: usize,
    cfg: &RunConfig,
    epoch: usize,
) -> Result<Batch> {
    let mut images: Vec<Image> = Vec::with_capacity(indices.len());
    let mut targets = Vec::with_capacity(indices.len() * classes);
    let mut labels = Vec::with_capacity(indices.len());
    for (pos, &i) in indices.iter().enumerate() {
        let item = items[i];
        let partner = items[indices[indices.len() - 1 - pos]];
        let y = one_hot(item.label, classes);
        let y2 = one_hot(partner.label, classes);
        let mut rng = item_rng(cfg.seed, epoch as u64 + 1, i as u64);
        let (img, t) = augment(&item.image, &y, (&partner.image, &y2), &cfg.augment, &mut rng)?;
        images.push(img);
        targets.extend(t);
        labels.push(item.label);
    }
    let refs: Vec<&Image> = images.iter().collect();
    Ok(Batch {
        images: batch_tensor(&refs)?,
        targets: Tensor::new(&[indices.len(), classes], targets)?,
        labels,
    })
}

/// Gradient-free logits over `items`, in order.
pub fn predict_items(model: &Classifier, items: &[&Item], batch_size: usize) -> Result<Tensor> {
    let classes = model.config().num_classes;
    let mut data = Vec::with_capacity(items.len() * classes);
    for chunk in items.chunks(batch_size.max(1)) {
        let imgs: Vec<&Image> = chunk.iter().map(|i| &i.image).collect();
        let logits = model.predict(&batch_tensor(&imgs)?)?;
        data.extend_from_slice(logits.data());
    }
    Tensor::new(&[items.len(), classes], data)
}

pub fn evaluate(model: &Classifier, items: &[&Item], batch_size: usize) -> Result<MetricsReport> {
    let logits = predict_items(model, items, batch_size)?;
    let labels: Vec<usize> = items.iter().map(|i| i.label).collect();
    Ok(MetricsReport::from_logits(&logits, &labels))
}

/// Steps per epoch and the overall schedule for a training set of `n` items.
pub fn schedule_for(cfg: &RunConfig, n: usize) -> (usize, CosineSchedule) {
    let per_epoch = n.div_ceil(cfg.optimizer.batch_size);
    let mut total = per_epoch * cfg.optimizer.epochs;
    if cfg.optimizer.max_steps > 0 {
        total = total.min(cfg.optimizer.max_steps);
    }
    let schedule = CosineSchedule {
        peak: cfg.optimizer.lr,
        warmup_steps: (per_epoch * cfg.optimizer.warmup_epochs).min(total),
        total_steps: total,
    };
    (per_epoch, schedule)
}

pub fn check_dataset(ds: &Dataset, classes: usize) -> Result<()> {
    if ds.num_classes() != classes {
        return Err(Error::Dimension(format!(
            "dataset has {} classes, model expects {classes}",
            ds.num_classes()
        )));
    }
    Ok(())
}

/// Map a non-finite failure during a training step to a diagnostic abort.
pub fn nan_abort(step: usize, lr: f64, err: Error, detail: &str) -> Error {
    match err {
        Error::NonFinite { op } => Error::NanLoss {
            step,
            lr,
            detail: format!("non-finite input to {op}; {detail}"),
        },
        other => other,
    }
}

pub fn check_loss(step: usize, lr: f64, loss: f64, detail: &str) -> Result<()> {
    if loss.is_finite() {
        Ok(())
    } else {
        Err(Error::NanLoss {
            step,
            lr,
            detail: format!("loss {loss}; {detail}"),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_acc: f64,
    pub val_auroc: Option<f64>,
    pub lr: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub best: Classifier,
    pub last: Classifier,
    pub best_epoch: usize,
    pub history: Vec<EpochRecord>,
    pub test: MetricsReport,
    pub steps: usize,
}

#[derive(Serialize)]
struct Report<'a> {
    test: &'a MetricsReport,
    best_epoch: usize,
    steps: usize,
    config: &'a RunConfig,
}

pub fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn metrics_csv(history: &[EpochRecord]) -> String {
    let mut s = String::from("epoch,train_loss,val_loss,val_acc,val_auroc,lr\n");
    for r in history {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{}",
            r.epoch,
            r.train_loss,
            r.val_loss,
            r.val_acc,
            fmt_opt(r.val_auroc),
            r.lr
        );
    }
    s
}

pub fn write_file(path: &Path, contents: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    std::fs::write(path, contents).map_err(|e| Error::io(path, e))
}

/// Supervised training. With `out_dir`, writes `metrics.csv`, `best.ckpt`
/// and `report.json` there.
pub fn train(
    mut model: Classifier,
    ds: &Dataset,
    cfg: &RunConfig,
    out_dir: Option<&Path>,
) -> Result<TrainOutcome> {
    let classes = model.config().num_classes;
    check_dataset(ds, classes)?;
    let train_items = ds.split(Split::Train);
    let val_items = ds.split(Split::Val);
    let test_items = ds.split(Split::Test);
    let bs = cfg.optimizer.batch_size;
    let (_, schedule) = schedule_for(cfg, train_items.len());
    let mut opt = AdamW::from_config(&cfg.optimizer);

    let mut history = Vec::new();
    let mut best: Option<(f64, f64, usize, Classifier)> = None;
    let mut step = 0;
    let mut lr = schedule.lr(0);
    for epoch in 0..cfg.optimizer.epochs {
        if step >= schedule.total_steps {
            break;
        }
        let order = epoch_order(train_items.len(), cfg.seed, epoch);
        let mut loss_sum = 0.0;
        let mut batches = 0;
        for idx in order.chunks(bs) {
            if step >= schedule.total_steps {
                break;
            }
            lr = schedule.lr(step);
            let batch = make_batch(&train_items, idx, classes, cfg, epoch)?;
            let mut g = Graph::new();
            let loss = model
                .forward(&mut g, &batch.images)
                .and_then(|out| g.softmax_cross_entropy(out.logits, &batch.targets))
                .map_err(|e| nan_abort(step, lr, e, "cross-entropy"))?;
            let value = g.value(loss).item();
            check_loss(step, lr, value, &format!("cross-entropy {value}"))?;
            let grads = g.backward(loss).map_err(|e| nan_abort(step, lr, e, "backward"))?;
            opt.step(model.params_mut(), &grads, lr)?;
            loss_sum += value;
            batches += 1;
            step += 1;
        }
        let val = evaluate(&model, &val_items, bs)?;
        history.push(EpochRecord {
            epoch,
            train_loss: loss_sum / batches.max(1) as f64,
            val_loss: val.loss,
            val_acc: val.accuracy,
            val_auroc: val.auroc,
            lr,
        });
        let better = match &best {
            None => true,
            Some((acc, loss, _, _)) => val.accuracy > *acc || (val.accuracy == *acc && val.loss < *loss),
        };
        if better {
            best = Some((val.accuracy, val.loss, epoch, model.clone()));
        }
    }
    let (_, _, best_epoch, best_model) = match best {
        Some(b) => b,
        None => (0.0, 0.0, 0, model.clone()),
    };
    let test = evaluate(&best_model, &test_items, bs)?;
    if let Some(dir) = out_dir {
        write_file(&dir.join("metrics.csv"), metrics_csv(&history).as_bytes())?;
        best_model.to_checkpoint()?.save(&dir.join("best.ckpt"))?;
        let report = Report {
            test: &test,
            best_epoch,
            steps: step,
            config: cfg,
        };
        write_file(
            &dir.join("report.json"),
            serde_json::to_string_pretty(&report)?.as_bytes(),
        )?;
    }
    Ok(TrainOutcome {
        best: best_model,
        last: model,
        best_epoch,
        history,
        test,
        steps: step,
    })
}
