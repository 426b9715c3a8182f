//! The full network: encoders, cross-modal alignment, candidate heads and
//! the mask decoder, plus target selection at inference time.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::alignment::{self, candidate_queries, decode_queries, encode_alignment, joint_positions, kernel_heads};
use crate::autodiff::{Tape, Var};
use crate::config::{Config, ModelConfig};
use crate::decoder::{self, run_decoder};
use crate::encoders::{self, encode_text, encode_video, fuse_project, tokenize, JointFeature};
use crate::error::{Error, Result};
use crate::losses::{total_loss, GroundTruth, Losses};
use crate::mask::Mask;
use crate::params::{Ctx, ParamSet};
use crate::tensor::Tensor;

/// Name of the learnable diversity weight `W`.
pub const DIVERSITY_WEIGHT: &str = "loss.w_div";

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub cfg: ModelConfig,
    pub params: ParamSet,
}

pub struct Prediction<'t> {
    /// `[T, K, H, W]`.
    pub mask_logits: Var<'t>,
    pub probs: Var<'t>,
    /// `[T, K]`.
    pub ref_logits: Var<'t>,
    pub scores: Var<'t>,
    /// `Z₁, Z₂, Z₃`, each `[T, K, C₀]`.
    pub kernels: [Var<'t>; 3],
    /// Decoder hidden states `[3, T, K, C]`.
    pub hidden: Var<'t>,
}

/// The referred object chosen at inference.
#[derive(Clone, Debug, PartialEq)]
pub struct Inference {
    pub candidate: usize,
    pub masks: Vec<Mask>,
    /// Per-frame referring score of the chosen candidate.
    pub scores: Vec<f64>,
    pub confidence: f64,
}

impl Model {
    pub fn init(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        encoders::init(cfg, &mut params, &mut rng);
        alignment::init(cfg, &mut params, &mut rng);
        decoder::init(cfg, &mut params, &mut rng);
        params.insert(DIVERSITY_WEIGHT, Tensor::eye(cfg.c0));
        Ok(Model { cfg: cfg.clone(), params })
    }

    pub fn from_config(cfg: &Config) -> Result<Self> {
        Self::init(&cfg.model, cfg.seed)
    }

    pub fn parameter_count(&self) -> usize {
        self.params.iter().map(|(_, t)| t.numel()).sum()
    }

    /// Token list to the frozen text feature.
    pub fn text_features(&self, query: &str) -> Result<Tensor> {
        encode_text(&tokenize(query), &self.cfg)
    }
}

/// One forward pass of `frames` `[T, H, W, 3]` against the word features.
pub fn forward<'t>(ctx: &Ctx<'t>, cfg: &ModelConfig, frames: Var<'t>, text: &Tensor) -> Result<Prediction<'t>> {
    let pyr = encode_video(ctx, frames)?;
    let joint = fuse_project(ctx, &pyr, text)?;
    let pos = joint_positions(pyr.grids[2], joint.n_text, cfg.d_model)?;
    let aligned = encode_alignment(ctx, cfg, joint.x, &pos)?;
    let t = frames.shape()[0];
    let hidden = decode_queries(ctx, cfg, candidate_queries(ctx, t)?, aligned, &pos)?;
    let kernels = kernel_heads(ctx, hidden)?;
    let ref_logits = alignment::referring_logits(ctx, hidden)?;
    let aligned_joint = JointFeature {
        x: aligned,
        n_visual: joint.n_visual,
        n_text: joint.n_text,
    };
    let out = run_decoder(ctx, cfg, &pyr, &aligned_joint, &kernels)?;
    Ok(Prediction {
        mask_logits: out.masks.logits,
        probs: out.masks.probs,
        ref_logits,
        scores: ref_logits.sigmoid(),
        kernels,
        hidden,
    })
}

/// Forward plus the training loss against `gt`.
pub fn forward_loss<'t>(
    ctx: &Ctx<'t>,
    cfg: &Config,
    frames: Var<'t>,
    text: &Tensor,
    gt: &GroundTruth,
) -> Result<(Prediction<'t>, Losses<'t>)> {
    let pred = forward(ctx, &cfg.model, frames, text)?;
    let losses = total_loss(
        pred.mask_logits,
        pred.ref_logits,
        &pred.kernels,
        ctx.p(DIVERSITY_WEIGHT)?,
        gt,
        &cfg.loss,
    )?;
    Ok((pred, losses))
}

/// Candidate with the largest score summed over frames; ties go to the
/// smallest index.
pub fn select_target(scores: &Tensor) -> Result<usize> {
    let s = scores.shape();
    if s.len() != 2 || s[1] == 0 {
        return Err(Error::contract("select_target", format!("expected [T, K] scores, got {s:?}")));
    }
    let (t, k) = (s[0], s[1]);
    let totals: Vec<f64> = (0..k).map(|c| (0..t).map(|f| scores.data()[f * k + c]).sum()).collect();
    let mut best = 0;
    for c in 1..k {
        if totals[c] > totals[best] {
            best = c;
        }
    }
    Ok(best)
}

impl Model {
    /// Masks of the selected candidate, thresholded at 0.5.
    pub fn infer(&self, frames: &Tensor, query: &str) -> Result<Inference> {
        let tape = Tape::new();
        let ctx = Ctx::new(&tape, &self.params);
        let text = self.text_features(query)?;
        let pred = forward(&ctx, &self.cfg, tape.constant(frames.clone()), &text)?;
        let scores = pred.scores.value();
        let candidate = select_target(&scores)?;
        let probs = pred.probs.value();
        let s = probs.shape();
        let (t, k, h, w) = (s[0], s[1], s[2], s[3]);
        let px = h * w;
        let masks = (0..t)
            .map(|f| Mask::from_probs(h, w, &probs.data()[(f * k + candidate) * px..(f * k + candidate + 1) * px]))
            .collect::<Result<Vec<_>>>()?;
        let frame_scores: Vec<f64> = (0..t).map(|f| scores.data()[f * k + candidate]).collect();
        let confidence = frame_scores.iter().sum::<f64>() / t as f64;
        Ok(Inference {
            candidate,
            masks,
            scores: frame_scores,
            confidence,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ModelConfig {
        let mut m = Config::desk().model;
        m.height = 32;
        m.width = 32;
        m.candidates = 4;
        m
    }

    #[test]
    fn forward_shapes() {
        let cfg = tiny();
        let model = Model::init(&cfg, 0).unwrap();
        let tape = Tape::new();
        let ctx = Ctx::new(&tape, &model.params);
        let frames = tape.constant(Tensor::full(&[2, 32, 32, 3], 0.3));
        let text = model.text_features("the red square moving left").unwrap();
        let p = forward(&ctx, &cfg, frames, &text).unwrap();
        assert_eq!(p.mask_logits.shape(), vec![2, 4, 32, 32]);
        assert_eq!(p.ref_logits.shape(), vec![2, 4]);
        assert_eq!(p.kernels[2].shape(), vec![2, 4, cfg.c0]);
        assert_eq!(p.hidden.shape(), vec![3, 2, 4, cfg.d_model]);
    }

    #[test]
    fn select_target_breaks_ties_low() {
        let s = Tensor::new(&[2, 3], vec![0.2, 0.5, 0.5, 0.4, 0.1, 0.1]).unwrap();
        assert_eq!(select_target(&s).unwrap(), 0);
        let s = Tensor::new(&[1, 3], vec![0.2, 0.7, 0.7]).unwrap();
        assert_eq!(select_target(&s).unwrap(), 1);
    }

    #[test]
    fn init_is_seeded() {
        let cfg = tiny();
        assert_eq!(Model::init(&cfg, 4).unwrap(), Model::init(&cfg, 4).unwrap());
        assert_ne!(Model::init(&cfg, 4).unwrap(), Model::init(&cfg, 5).unwrap());
    }

    #[test]
    fn infer_returns_one_mask_per_frame() {
        let cfg = tiny();
        let model = Model::init(&cfg, 1).unwrap();
        let out = model.infer(&Tensor::full(&[2, 32, 32, 3], 0.5), "the blue circle moving up").unwrap();
        assert_eq!(out.masks.len(), 2);
        assert!(out.candidate < 4);
        assert!(out.confidence > 0.0 && out.confidence < 1.0);
    }
}
