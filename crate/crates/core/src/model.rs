//! ViT encoder plus decoder head, and their checkpoint mapping.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Tensor, Var};
use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::gp_head::RffHead;
use crate::nn::{Linear, Module, Param};
use crate::vit::{Vit, VitConfig, VitForward};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HeadKind {
    Linear,
    Gp,
}

/// Head description as stored in checkpoints, with the length scale resolved.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HeadSpec {
    pub kind: HeadKind,
    /// RFF feature count `M` (ignored for linear heads).
    pub features: usize,
    /// RFF length scale `ℓ` (ignored for linear heads).
    pub length_scale: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Head {
    Linear(Linear),
    Gp(RffHead),
}

impl Head {
    pub fn new(spec: &HeadSpec, dim: usize, classes: usize, seed: u64) -> Result<Self> {
        match spec.kind {
            HeadKind::Linear => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                Ok(Head::Linear(Linear::new("head", dim, classes, &mut rng)))
            }
            HeadKind::Gp => Ok(Head::Gp(RffHead::init(
                dim,
                classes,
                spec.features,
                spec.length_scale,
                seed,
            )?)),
        }
    }

    pub fn logits(&self, g: &mut Graph, x: Var) -> Result<Var> {
        match self {
            Head::Linear(l) => l.forward(g, x),
            Head::Gp(h) => h.logits(g, x),
        }
    }

    pub fn spec(&self) -> HeadSpec {
        match self {
            Head::Linear(_) => HeadSpec {
                kind: HeadKind::Linear,
                features: 0,
                length_scale: 0.0,
            },
            Head::Gp(h) => HeadSpec {
                kind: HeadKind::Gp,
                features: h.features(),
                length_scale: h.length_scale,
            },
        }
    }

    pub fn buffers(&self) -> Vec<&Param> {
        match self {
            Head::Linear(_) => vec![],
            Head::Gp(h) => h.buffers(),
        }
    }

    /// Trainable parameters followed by buffers.
    fn tensors_mut(&mut self) -> Vec<&mut Param> {
        match self {
            Head::Linear(l) => l.params_mut(),
            Head::Gp(h) => {
                let RffHead { w, b, beta, .. } = h;
                vec![beta, w, b]
            }
        }
    }
}

impl Module for Head {
    fn params(&self) -> Vec<&Param> {
        match self {
            Head::Linear(l) => l.params(),
            Head::Gp(h) => h.params(),
        }
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        match self {
            Head::Linear(l) => l.params_mut(),
            Head::Gp(h) => h.params_mut(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CheckpointKind {
    Classifier,
    Encoder,
}

/// JSON config block of every checkpoint this crate writes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    pub kind: CheckpointKind,
    pub model: VitConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub head: Option<HeadSpec>,
}

impl CheckpointMeta {
    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        serde_json::from_value(ck.config.clone())
            .map_err(|e| Error::Checkpoint(format!("unrecognized config block: {e}")))
    }
}

pub struct ClassifierForward {
    pub logits: Var,
    pub vit: VitForward,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Classifier {
    pub vit: Vit,
    pub head: Head,
}

/// Seed offset separating head initialization from encoder initialization.
const HEAD_SEED_SALT: u64 = 0x9e37_79b9_7f4a_7c15;

impl Classifier {
    pub fn new(config: &VitConfig, head: &HeadSpec, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let vit = Vit::new(config, &mut rng)?;
        let head = Head::new(head, config.dim, config.num_classes, seed ^ HEAD_SEED_SALT)?;
        Ok(Classifier { vit, head })
    }

    pub fn config(&self) -> &VitConfig {
        &self.vit.config
    }

    pub fn forward(&self, g: &mut Graph, images: &Tensor) -> Result<ClassifierForward> {
        let vit = self.vit.forward(g, images)?;
        let logits = self.head.logits(g, vit.cls)?;
        Ok(ClassifierForward { logits, vit })
    }

    /// Gradient-free logits for a `[B, H, W, 3]` batch.
    pub fn predict(&self, images: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let out = g.frozen(|g| self.forward(g, images))?;
        Ok(g.value(out.logits).clone())
    }

    /// Every stored tensor: trainable parameters followed by frozen buffers.
    pub fn tensors(&self) -> Vec<&Param> {
        let mut out = self.params();
        out.extend(self.head.buffers());
        out
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let meta = CheckpointMeta {
            kind: CheckpointKind::Classifier,
            model: self.vit.config.clone(),
            head: Some(self.head.spec()),
        };
        let mut ck = Checkpoint::new(serde_json::to_value(&meta)?);
        for p in self.tensors() {
            ck.push(p.name.clone(), p.value.clone());
        }
        Ok(ck)
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let meta = CheckpointMeta::from_checkpoint(ck)?;
        if meta.kind != CheckpointKind::Classifier {
            return Err(Error::Checkpoint("expected a classifier checkpoint".into()));
        }
        let head = meta
            .head
            .ok_or_else(|| Error::Checkpoint("classifier checkpoint lacks head spec".into()))?;
        let mut model = Classifier::new(&meta.model, &head, 0)?;
        let mut targets = model.vit.params_mut();
        targets.extend(model.head.tensors_mut());
        load_into(ck, targets)?;
        Ok(model)
    }
}

/// Encoder-only checkpoint (used by MAE pretraining).
pub fn encoder_checkpoint(vit: &Vit) -> Result<Checkpoint> {
    let meta = CheckpointMeta {
        kind: CheckpointKind::Encoder,
        model: vit.config.clone(),
        head: None,
    };
    let mut ck = Checkpoint::new(serde_json::to_value(&meta)?);
    for p in vit.params() {
        ck.push(p.name.clone(), p.value.clone());
    }
    Ok(ck)
}

/// Copy tensors from `ck` into `targets` by name, checking shapes.
pub fn load_into(ck: &Checkpoint, targets: Vec<&mut Param>) -> Result<()> {
    for p in targets {
        let t = ck
            .get(&p.name)
            .ok_or_else(|| Error::Checkpoint(format!("missing tensor {}", p.name)))?;
        if t.shape() != p.value.shape() {
            return Err(Error::Checkpoint(format!(
                "tensor {} has shape {:?}, expected {:?}",
                p.name,
                t.shape(),
                p.value.shape()
            )));
        }
        p.value = t.clone();
    }
    Ok(())
}

impl Module for Classifier {
    fn params(&self) -> Vec<&Param> {
        let mut out = self.vit.params();
        out.extend(self.head.params());
        out
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut out = self.vit.params_mut();
        out.extend(self.head.params_mut());
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gp() -> HeadSpec {
        HeadSpec {
            kind: HeadKind::Gp,
            features: 64,
            length_scale: 32f64.sqrt(),
        }
    }

    #[test]
    fn checkpoint_round_trip_preserves_model() {
        let m = Classifier::new(&VitConfig::tiny(), &gp(), 5).unwrap();
        let ck = m.to_checkpoint().unwrap();
        assert!(ck.get("gp.W").is_some());
        assert!(ck.get("gp.b").is_some());
        assert!(ck.get("gp.beta").is_some());
        let bytes = ck.to_bytes().unwrap();
        let back = Classifier::from_checkpoint(&Checkpoint::from_bytes(&bytes).unwrap()).unwrap();
        assert_eq!(back, m);
        assert_eq!(back.to_checkpoint().unwrap().to_bytes().unwrap(), bytes);
    }

    #[test]
    fn gp_head_metadata_in_config_block() {
        let m = Classifier::new(&VitConfig::tiny(), &gp(), 5).unwrap();
        let ck = m.to_checkpoint().unwrap();
        assert_eq!(ck.config["head"]["features"], 64);
        assert_eq!(ck.config["head"]["kind"], "gp");
    }

    #[test]
    fn linear_head_has_no_buffers() {
        let spec = HeadSpec {
            kind: HeadKind::Linear,
            features: 0,
            length_scale: 0.0,
        };
        let m = Classifier::new(&VitConfig::tiny(), &spec, 1).unwrap();
        assert!(m.head.buffers().is_empty());
        assert_eq!(m.tensors().len(), m.params().len());
    }
}
