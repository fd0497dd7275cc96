//! Masked-autoencoder pretraining of the ViT encoder.
//!
//! The encoder sees only the visible patch tokens (plus the class token); a
//! small transformer decoder fills in a shared mask token at every masked
//! position and regresses raw pixels. Only masked patches enter the loss.

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::autograd::{Graph, Tensor, Var};
use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::data::{batch_tensor, Dataset, Image, Split};
use crate::error::{Error, Result};
use crate::model::{encoder_checkpoint, load_into, CheckpointKind, CheckpointMeta, Classifier, HeadSpec};
use crate::nn::{trunc_normal, LayerNorm, Linear, Module, Param, INIT_STD};
use crate::train::optim::{AdamW, CosineSchedule};
use crate::train::trainer::{check_loss, epoch_order, nan_abort, write_file};
use crate::vit::{extract_patches, Block, Vit, VitConfig};

const MASK_SALT: u64 = 0x2545_f491_4f6c_dd1d;

/// Disjoint visible and masked patch indices, each sorted ascending.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MaskPlan {
    pub visible: Vec<usize>,
    pub masked: Vec<usize>,
}

impl MaskPlan {
    pub fn patches(&self) -> usize {
        self.visible.len() + self.masked.len()
    }
}

/// Number of masked patches for `n` patches at `ratio`.
pub fn masked_count(n: usize, ratio: f64) -> usize {
    (ratio * n as f64).round() as usize
}

pub fn plan_mask(n: usize, ratio: f64, rng: &mut impl Rng) -> Result<MaskPlan> {
    let k = masked_count(n, ratio);
    if !(ratio > 0.0 && ratio < 1.0) || n < 2 || k == 0 || k >= n {
        return Err(Error::DegenerateMask {
            ratio,
            patches: n,
            masked: k,
        });
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    let mut masked = order[..k].to_vec();
    let mut visible = order[k..].to_vec();
    masked.sort_unstable();
    visible.sort_unstable();
    Ok(MaskPlan { visible, masked })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct DecoderSpec {
    pub dim: usize,
    pub depth: usize,
    pub heads: usize,
}

impl DecoderSpec {
    pub fn from_config(cfg: &RunConfig, encoder_dim: usize) -> Self {
        DecoderSpec {
            dim: cfg.mae.decoder_dim.unwrap_or(encoder_dim / 2),
            depth: cfg.mae.decoder_depth,
            heads: cfg.mae.decoder_heads,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MaeDecoder {
    pub embed: Linear,
    pub mask_token: Param,
    pub pos_embed: Param,
    pub blocks: Vec<Block>,
    pub norm: LayerNorm,
    pub pred: Linear,
}

impl MaeDecoder {
    pub fn new(enc: &VitConfig, spec: DecoderSpec, rng: &mut impl Rng) -> Result<Self> {
        if spec.dim == 0 || spec.heads == 0 || spec.dim % spec.heads != 0 || spec.depth == 0 {
            return Err(Error::InvalidParameter(format!(
                "decoder dim {} must be a positive multiple of heads {} with depth >= 1",
                spec.dim, spec.heads
            )));
        }
        let d = spec.dim;
        let hidden = ((d as f64) * enc.mlp_ratio).round() as usize;
        Ok(MaeDecoder {
            embed: Linear::new("mae.decoder_embed", enc.dim, d, rng),
            mask_token: Param::new("mae.mask_token", trunc_normal(&[d], INIT_STD, rng)),
            pos_embed: Param::new(
                "mae.decoder_pos_embed",
                trunc_normal(&[enc.seq_len(), d], INIT_STD, rng),
            ),
            blocks: (0..spec.depth)
                .map(|i| Block::new(&format!("mae.decoder.blocks.{i}"), d, spec.heads, hidden.max(1), rng))
                .collect(),
            norm: LayerNorm::new("mae.decoder_norm", d),
            pred: Linear::new("mae.pred", d, enc.patch_dim(), rng),
        })
    }

    fn dim(&self) -> usize {
        self.embed.out_features()
    }
}

impl Module for MaeDecoder {
    fn params(&self) -> Vec<&Param> {
        let mut out = self.embed.params();
        out.push(&self.mask_token);
        out.push(&self.pos_embed);
        for b in &self.blocks {
            out.extend(b.params());
        }
        out.extend(self.norm.params());
        out.extend(self.pred.params());
        out
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut out = self.embed.params_mut();
        out.push(&mut self.mask_token);
        out.push(&mut self.pos_embed);
        for b in &mut self.blocks {
            out.extend(b.params_mut());
        }
        out.extend(self.norm.params_mut());
        out.extend(self.pred.params_mut());
        out
    }
}

/// Graph handles of one MAE pass.
pub struct MaeForward {
    pub loss: Var,
    /// `[B, N, p·p·3]` reconstruction of every patch.
    pub prediction: Var,
    /// Encoder token count, `|visible| + 1`.
    pub encoder_tokens: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Mae {
    pub encoder: Vit,
    pub decoder: MaeDecoder,
}

impl Mae {
    pub fn new(config: &VitConfig, spec: DecoderSpec, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let encoder = Vit::new(config, &mut rng)?;
        let decoder = MaeDecoder::new(config, spec, &mut rng)?;
        Ok(Mae { encoder, decoder })
    }

    /// Masked reconstruction loss. `images` feed the encoder; `targets`
    /// (same shape) supply the pixels the decoder is scored against.
    pub fn forward(
        &self,
        g: &mut Graph,
        images: &Tensor,
        targets: &Tensor,
        plans: &[MaskPlan],
    ) -> Result<MaeForward> {
        let cfg = &self.encoder.config;
        if images.shape() != targets.shape() {
            return Err(Error::Shape {
                op: "mae_targets",
                lhs: images.shape().to_vec(),
                rhs: targets.shape().to_vec(),
            });
        }
        let patches = extract_patches(images, cfg.patch_size)?;
        let target_patches = extract_patches(targets, cfg.patch_size)?;
        let b = patches.shape()[0];
        let n = cfg.num_patches();
        if plans.len() != b || plans.iter().any(|p| p.patches() != n) {
            return Err(Error::Dimension(format!(
                "need {b} mask plans over {n} patches"
            )));
        }
        let visible: Vec<Vec<usize>> = plans.iter().map(|p| p.visible.clone()).collect();
        let masked: Vec<Vec<usize>> = plans.iter().map(|p| p.masked.clone()).collect();
        let v = visible[0].len();
        if visible.iter().any(|ix| ix.len() != v) {
            return Err(Error::Dimension("mask plans must share a masked count".into()));
        }

        let tokens = self.encoder.patch_tokens(g, &patches)?;
        let kept = g.gather_rows(tokens, &visible)?;
        let cls = self.encoder.class_token(g, b)?;
        let x = g.concat(&[cls, kept], 1)?;
        let encoder_tokens = g.shape(x)[1];
        let (enc, _) = self.encoder.run_blocks(g, x)?;
        let enc = self.encoder.norm.forward(g, enc)?;

        let dec = &self.decoder;
        let dd = dec.dim();
        let y = dec.embed.forward(g, enc)?;
        let y_cls = g.slice(y, 1, 0, 1)?;
        let y_vis = g.slice(y, 1, 1, v)?;
        let zeros = g.constant(Tensor::zeros(&[b, n - v, dd]));
        let mask_tok = dec.mask_token.var(g);
        let fill = g.add(zeros, mask_tok)?;
        let stacked = g.concat(&[y_vis, fill], 1)?;
        // Position j of the stacked sequence holds patch (visible ++ masked)[j].
        let restore: Vec<Vec<usize>> = plans
            .iter()
            .map(|p| {
                let mut inv = vec![0; n];
                for (j, &patch) in p.visible.iter().chain(&p.masked).enumerate() {
                    inv[patch] = j;
                }
                inv
            })
            .collect();
        let restored = g.gather_rows(stacked, &restore)?;
        let full = g.concat(&[y_cls, restored], 1)?;
        let pos = dec.pos_embed.var(g);
        let mut h = g.add(full, pos)?;
        for block in &dec.blocks {
            h = block.forward(g, h)?.0;
        }
        let h = dec.norm.forward(g, h)?;
        let out = dec.pred.forward(g, h)?;
        let prediction = g.slice(out, 1, 1, n)?;

        let pred_masked = g.gather_rows(prediction, &masked)?;
        let pd = cfg.patch_dim();
        let k = n - v;
        let mut tm = Vec::with_capacity(b * k * pd);
        for (bi, ix) in masked.iter().enumerate() {
            for &i in ix {
                let off = (bi * n + i) * pd;
                tm.extend_from_slice(&target_patches.data()[off..off + pd]);
            }
        }
        let target_masked = g.constant(Tensor::new(&[b, k, pd], tm)?);
        let loss = g.mse(pred_masked, target_masked)?;
        Ok(MaeForward {
            loss,
            prediction,
            encoder_tokens,
        })
    }

    /// Loss value without recording gradients.
    pub fn loss(&self, images: &Tensor, targets: &Tensor, plans: &[MaskPlan]) -> Result<f64> {
        let mut g = Graph::new();
        let out = g.frozen(|g| self.forward(g, images, targets, plans))?;
        Ok(g.value(out.loss).item())
    }
}

impl Module for Mae {
    fn params(&self) -> Vec<&Param> {
        let mut out = self.encoder.params();
        out.extend(self.decoder.params());
        out
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut out = self.encoder.params_mut();
        out.extend(self.decoder.params_mut());
        out
    }
}

/// Build a classifier whose encoder comes from `ck` and whose head is fresh.
pub fn load_pretrained(ck: &Checkpoint, target: &VitConfig, head: &HeadSpec, seed: u64) -> Result<Classifier> {
    let meta = CheckpointMeta::from_checkpoint(ck)?;
    if meta.kind != CheckpointKind::Encoder && meta.kind != CheckpointKind::Classifier {
        return Err(Error::Checkpoint("not an encoder checkpoint".into()));
    }
    let diff = meta.model.encoder_mismatch(target);
    if !diff.is_empty() {
        return Err(Error::ConfigMismatch(diff));
    }
    let mut model = Classifier::new(target, head, seed)?;
    load_into(ck, model.vit.params_mut())?;
    Ok(model)
}

fn mask_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ MASK_SALT);
    rng.set_stream(stream);
    rng
}

fn plans_for(rng: &mut ChaCha8Rng, count: usize, n: usize, ratio: f64) -> Result<Vec<MaskPlan>> {
    (0..count).map(|_| plan_mask(n, ratio, rng)).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PretrainReport {
    pub steps: usize,
    /// Loss on a fixed probe batch and mask before the first update.
    pub probe_initial: f64,
    pub probe_final: f64,
    pub first_step_loss: f64,
    pub last_step_loss: f64,
}

#[derive(Clone, Debug)]
pub struct PretrainOutcome {
    pub mae: Mae,
    pub step_losses: Vec<f64>,
    pub report: PretrainReport,
}

/// MAE pretraining on the training split. With `out_dir`, writes
/// `encoder.ckpt`, `pretrain_metrics.csv` and `pretrain_report.json`.
pub fn pretrain(cfg: &RunConfig, ds: &Dataset, out_dir: Option<&Path>) -> Result<PretrainOutcome> {
    let vit_cfg = cfg.vit_config()?;
    let spec = DecoderSpec::from_config(cfg, vit_cfg.dim);
    let mut mae = Mae::new(&vit_cfg, spec, cfg.seed)?;
    let items = ds.split(Split::Train);
    if items.is_empty() {
        return Err(Error::MissingSplit(ds.root.join("train")));
    }
    let n = vit_cfg.num_patches();
    let ratio = cfg.mae.mask_ratio;
    let bs = cfg.optimizer.batch_size.min(items.len());
    let steps = cfg.mae.steps;
    let schedule = CosineSchedule {
        peak: cfg.optimizer.lr,
        warmup_steps: steps / 10,
        total_steps: steps,
    };
    let mut opt = AdamW::from_config(&cfg.optimizer);

    let probe_imgs: Vec<&Image> = items.iter().take(bs).map(|i| &i.image).collect();
    let probe = batch_tensor(&probe_imgs)?;
    let probe_plans = plans_for(&mut mask_rng(cfg.seed, u64::MAX), bs, n, ratio)?;
    let probe_initial = mae.loss(&probe, &probe, &probe_plans)?;

    let mut losses = Vec::with_capacity(steps);
    let mut csv = String::from("step,loss,lr\n");
    let mut epoch = 0;
    let mut order = epoch_order(items.len(), cfg.seed, epoch);
    let mut cursor = 0;
    for step in 0..steps {
        if cursor + bs > order.len() {
            epoch += 1;
            order = epoch_order(items.len(), cfg.seed, epoch);
            cursor = 0;
        }
        let imgs: Vec<&Image> = order[cursor..cursor + bs].iter().map(|&i| &items[i].image).collect();
        cursor += bs;
        let batch = batch_tensor(&imgs)?;
        let plans = plans_for(&mut mask_rng(cfg.seed, step as u64), bs, n, ratio)?;
        let lr = schedule.lr(step);
        let mut g = Graph::new();
        let out = mae
            .forward(&mut g, &batch, &batch, &plans)
            .map_err(|e| nan_abort(step, lr, e, "masked reconstruction"))?;
        let value = g.value(out.loss).item();
        check_loss(step, lr, value, "masked reconstruction")?;
        let grads = g.backward(out.loss).map_err(|e| nan_abort(step, lr, e, "backward"))?;
        opt.step(mae.params_mut(), &grads, lr)?;
        losses.push(value);
        let _ = writeln!(csv, "{step},{value},{lr}");
    }
    let probe_final = mae.loss(&probe, &probe, &probe_plans)?;
    let report = PretrainReport {
        steps,
        probe_initial,
        probe_final,
        first_step_loss: losses.first().copied().unwrap_or(probe_initial),
        last_step_loss: losses.last().copied().unwrap_or(probe_final),
    };
    if let Some(dir) = out_dir {
        encoder_checkpoint(&mae.encoder)?.save(&dir.join("encoder.ckpt"))?;
        write_file(&dir.join("pretrain_metrics.csv"), csv.as_bytes())?;
        let json = serde_json::json!({ "report": report, "decoder": spec, "config": cfg });
        write_file(
            &dir.join("pretrain_report.json"),
            serde_json::to_string_pretty(&json)?.as_bytes(),
        )?;
    }
    Ok(PretrainOutcome {
        mae,
        step_losses: losses,
        report,
    })
}
