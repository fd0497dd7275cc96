//! Teacher→student distillation: shallow-layer attention alignment through a
//! learnable head projection, plus logit matching.

use std::fmt::Write as _;
use std::path::Path;

use serde::Serialize;

use crate::autograd::{Graph, Tensor, Var};
use crate::config::{KdConfig, ProjectSide, RunConfig};
use crate::data::Split;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::Classifier;
use crate::nn::{Module, Param};
use crate::train::metrics::MetricsReport;
use crate::train::optim::AdamW;
use crate::train::trainer::{
    check_dataset, check_loss, epoch_order, evaluate, make_batch, nan_abort, predict_items, schedule_for,
    write_file,
};
use crate::vit::VitConfig;

/// Linear map over the heads axis of `[B, H, T, T]` attention.
#[derive(Clone, Debug, PartialEq)]
pub struct HeadProjection {
    /// `[from, to]`.
    pub weight: Param,
    pub bias: Param,
}

impl HeadProjection {
    /// Identity when `from == to`; otherwise each output head copies (or
    /// averages) the input heads congruent to it.
    pub fn new(name: &str, from: usize, to: usize) -> Self {
        let mut w = Tensor::zeros(&[from, to]);
        if from <= to {
            for j in 0..to {
                w.data_mut()[(j % from) * to + j] = 1.0;
            }
        } else {
            for i in 0..from {
                let j = i % to;
                let share = (0..from).filter(|k| k % to == j).count();
                w.data_mut()[i * to + j] = 1.0 / share as f64;
            }
        }
        HeadProjection {
            weight: Param::new(format!("{name}.weight"), w),
            bias: Param::new(format!("{name}.bias"), Tensor::zeros(&[to])),
        }
    }

    pub fn from_heads(&self) -> usize {
        self.weight.value.shape()[0]
    }

    pub fn to_heads(&self) -> usize {
        self.weight.value.shape()[1]
    }

    pub fn forward(&self, g: &mut Graph, attn: Var) -> Result<Var> {
        let s = g.shape(attn).to_vec();
        if s.len() != 4 || s[1] != self.from_heads() {
            return Err(Error::Shape {
                op: "head_projection",
                lhs: s,
                rhs: vec![self.from_heads(), self.to_heads()],
            });
        }
        let x = g.transpose(attn, 1, 3)?;
        let w = self.weight.var(g);
        let y = g.matmul(x, w)?;
        let b = self.bias.var(g);
        let y = g.add(y, b)?;
        g.transpose(y, 1, 3)
    }
}

impl Module for HeadProjection {
    fn params(&self) -> Vec<&Param> {
        vec![&self.weight, &self.bias]
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        vec![&mut self.weight, &mut self.bias]
    }
}

/// Mean squared error between logits.
pub fn logit_loss(g: &mut Graph, student: Var, teacher: Var) -> Result<Var> {
    g.mse(student, teacher)
}

/// `ce + logit + α·align`, with `ce` omitted when absent.
pub fn kd_loss(g: &mut Graph, align: Var, logit: Var, ce: Option<Var>, alpha: f64) -> Result<Var> {
    let weighted = g.scale(align, alpha)?;
    let kd = g.add(logit, weighted)?;
    match ce {
        Some(ce) => g.add(ce, kd),
        None => Ok(kd),
    }
}

/// Scalar form of [`kd_loss`].
pub fn kd_total(align: f64, logit: f64, ce: f64, alpha: f64) -> f64 {
    ce + logit + alpha * align
}

/// Graph handles of one distillation pass.
pub struct KdLosses {
    pub ce: Option<Var>,
    pub logit: Var,
    pub align: Var,
    pub total: Var,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Distiller {
    pub alpha: f64,
    pub aligned_layers: Vec<usize>,
    pub include_ce: bool,
    pub side: ProjectSide,
    /// One per aligned layer, or a single shared map.
    pub projections: Vec<HeadProjection>,
}

impl Distiller {
    pub fn new(cfg: &KdConfig, student: &VitConfig, teacher: &VitConfig) -> Result<Self> {
        let mut diff = Vec::new();
        for (field, a, b) in [
            ("image_size", student.image_size, teacher.image_size),
            ("patch_size", student.patch_size, teacher.patch_size),
            ("num_classes", student.num_classes, teacher.num_classes),
        ] {
            if a != b {
                diff.push(field.to_string());
            }
        }
        if !diff.is_empty() {
            return Err(Error::ConfigMismatch(diff));
        }
        for &layer in &cfg.aligned_layers {
            let depth = student.depth.min(teacher.depth);
            if layer >= depth {
                return Err(Error::MissingLayer { layer, depth });
            }
        }
        if !(cfg.alpha >= 0.0) {
            return Err(Error::InvalidParameter(format!("alpha {} must be nonnegative", cfg.alpha)));
        }
        let (from, to) = match cfg.project_side {
            ProjectSide::Student => (student.heads, teacher.heads),
            ProjectSide::Teacher => (teacher.heads, student.heads),
        };
        let projections = if cfg.shared_projection {
            vec![HeadProjection::new("kd.proj.shared", from, to)]
        } else {
            cfg.aligned_layers
                .iter()
                .map(|l| HeadProjection::new(&format!("kd.proj.{l}"), from, to))
                .collect()
        };
        Ok(Distiller {
            alpha: cfg.alpha,
            aligned_layers: cfg.aligned_layers.clone(),
            include_ce: cfg.include_ce,
            side: cfg.project_side,
            projections,
        })
    }

    fn projection(&self, k: usize) -> &HeadProjection {
        &self.projections[k.min(self.projections.len() - 1)]
    }

    /// Attention MSE averaged over the aligned layers.
    pub fn align_loss(&self, g: &mut Graph, student: &[Var], teacher: &[Var]) -> Result<Var> {
        if self.aligned_layers.is_empty() {
            return Ok(g.constant(Tensor::scalar(0.0)));
        }
        let mut total: Option<Var> = None;
        for (k, &layer) in self.aligned_layers.iter().enumerate() {
            let depth = student.len().min(teacher.len());
            if layer >= depth {
                return Err(Error::MissingLayer { layer, depth });
            }
            let (s, t) = (student[layer], teacher[layer]);
            let (ss, ts) = (g.shape(s).to_vec(), g.shape(t).to_vec());
            if ss.len() != 4 || ts.len() != 4 || ss[2] != ts[2] || ss[3] != ts[3] || ss[0] != ts[0] {
                return Err(Error::Dimension(format!(
                    "token-count mismatch between student attention {ss:?} and teacher attention {ts:?}"
                )));
            }
            let proj = self.projection(k);
            let l = match self.side {
                ProjectSide::Student => {
                    let p = proj.forward(g, s)?;
                    g.mse(p, t)?
                }
                ProjectSide::Teacher => {
                    let p = proj.forward(g, t)?;
                    g.mse(s, p)?
                }
            };
            total = Some(match total {
                Some(acc) => g.add(acc, l)?,
                None => l,
            });
        }
        g.scale(total.expect("non-empty"), 1.0 / self.aligned_layers.len() as f64)
    }

    /// Every loss component on one batch. The teacher is recorded frozen.
    pub fn losses(
        &self,
        g: &mut Graph,
        student: &Classifier,
        teacher: &Classifier,
        images: &Tensor,
        targets: &Tensor,
    ) -> Result<KdLosses> {
        let t = g.frozen(|g| teacher.forward(g, images))?;
        let s = student.forward(g, images)?;
        let align = self.align_loss(g, &s.vit.attn, &t.vit.attn)?;
        let logit = logit_loss(g, s.logits, t.logits)?;
        let ce = if self.include_ce {
            Some(g.softmax_cross_entropy(s.logits, targets)?)
        } else {
            None
        };
        let total = kd_loss(g, align, logit, ce, self.alpha)?;
        Ok(KdLosses {
            ce,
            logit,
            align,
            total,
        })
    }
}

impl Module for Distiller {
    fn params(&self) -> Vec<&Param> {
        self.projections.iter().flat_map(|p| p.params()).collect()
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        self.projections.iter_mut().flat_map(|p| p.params_mut()).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DistillRecord {
    pub epoch: usize,
    pub ce: f64,
    pub logit_loss: f64,
    pub align_loss: f64,
    pub total: f64,
    pub val_accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DistillReport {
    pub steps: usize,
    /// Student–teacher logit MSE over the validation split, before and after.
    pub val_logit_initial: f64,
    pub val_logit_final: f64,
    pub test: MetricsReport,
}

#[derive(Clone, Debug)]
pub struct DistillOutcome {
    pub student: Classifier,
    pub distiller: Distiller,
    pub history: Vec<DistillRecord>,
    pub step_logit_losses: Vec<f64>,
    pub report: DistillReport,
}

/// Logit MSE between two models over a list of items.
pub fn dataset_logit_mse(student: &Classifier, teacher: &Classifier, items: &[&crate::data::Item], bs: usize) -> Result<f64> {
    let s = predict_items(student, items, bs)?;
    let t = predict_items(teacher, items, bs)?;
    let n = s.numel() as f64;
    Ok(s.data().iter().zip(t.data()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / n)
}

pub fn distill_csv(history: &[DistillRecord]) -> String {
    let mut s = String::from("epoch,ce,logit_loss,align_loss,total,val_accuracy\n");
    for r in history {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{}",
            r.epoch, r.ce, r.logit_loss, r.align_loss, r.total, r.val_accuracy
        );
    }
    s
}

/// Train `student` (and the projections) against a frozen `teacher`. With
/// `out_dir`, writes `student.ckpt`, `distill_metrics.csv` and
/// `distill_report.json`.
pub fn distill(
    teacher: &Classifier,
    mut student: Classifier,
    ds: &Dataset,
    cfg: &RunConfig,
    out_dir: Option<&Path>,
) -> Result<DistillOutcome> {
    let mut distiller = Distiller::new(&cfg.kd, student.config(), teacher.config())?;
    let classes = student.config().num_classes;
    check_dataset(ds, classes)?;
    let train_items = ds.split(Split::Train);
    let val_items = ds.split(Split::Val);
    let bs = cfg.optimizer.batch_size;
    let (_, schedule) = schedule_for(cfg, train_items.len());
    let mut opt = AdamW::from_config(&cfg.optimizer);
    let val_logit_initial = dataset_logit_mse(&student, teacher, &val_items, bs)?;

    let mut history = Vec::new();
    let mut step_logit = Vec::new();
    let mut step = 0;
    for epoch in 0..cfg.optimizer.epochs {
        if step >= schedule.total_steps {
            break;
        }
        let order = epoch_order(train_items.len(), cfg.seed, epoch);
        let mut sums = [0.0; 4];
        let mut batches = 0;
        for idx in order.chunks(bs) {
            if step >= schedule.total_steps {
                break;
            }
            let lr = schedule.lr(step);
            let batch = make_batch(&train_items, idx, classes, cfg, epoch)?;
            let mut g = Graph::new();
            let l = distiller
                .losses(&mut g, &student, teacher, &batch.images, &batch.targets)
                .map_err(|e| nan_abort(step, lr, e, "distillation"))?;
            let ce = l.ce.map(|v| g.value(v).item()).unwrap_or(0.0);
            let logit = g.value(l.logit).item();
            let align = g.value(l.align).item();
            let total = g.value(l.total).item();
            check_loss(step, lr, total, &format!("ce {ce}, logit {logit}, align {align}"))?;
            let grads = g.backward(l.total).map_err(|e| nan_abort(step, lr, e, "backward"))?;
            let mut params = student.params_mut();
            params.extend(distiller.params_mut());
            opt.step(params, &grads, lr)?;
            for (s, v) in sums.iter_mut().zip([ce, logit, align, total]) {
                *s += v;
            }
            step_logit.push(logit);
            batches += 1;
            step += 1;
        }
        let val = evaluate(&student, &val_items, bs)?;
        let n = batches.max(1) as f64;
        history.push(DistillRecord {
            epoch,
            ce: sums[0] / n,
            logit_loss: sums[1] / n,
            align_loss: sums[2] / n,
            total: sums[3] / n,
            val_accuracy: val.accuracy,
        });
    }
    let val_logit_final = dataset_logit_mse(&student, teacher, &val_items, bs)?;
    let test = evaluate(&student, &ds.split(Split::Test), bs)?;
    let report = DistillReport {
        steps: step,
        val_logit_initial,
        val_logit_final,
        test,
    };
    if let Some(dir) = out_dir {
        student.to_checkpoint()?.save(&dir.join("student.ckpt"))?;
        write_file(&dir.join("distill_metrics.csv"), distill_csv(&history).as_bytes())?;
        let json = serde_json::json!({ "report": report, "config": cfg });
        write_file(
            &dir.join("distill_report.json"),
            serde_json::to_string_pretty(&json)?.as_bytes(),
        )?;
    }
    Ok(DistillOutcome {
        student,
        distiller,
        history,
        step_logit_losses: step_logit,
        report,
    })
}
