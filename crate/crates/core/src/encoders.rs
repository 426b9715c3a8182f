//! Visual and text encoders plus the projection into the joint feature.
//!
//! The visual encoder is a per-frame patch pyramid: a 4x4 patch embedding
//! gives the stride-4 map, then two stages of layer norm, residual pointwise
//! MLP and 2x2 patch merging give strides 8 and 16 with doubled channels.
//! The text encoder is frozen: each token is hashed to a fixed unit vector.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::autodiff::Var;
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::params::{Ctx, Init, ParamSet};
use crate::tensor::Tensor;

const PATCH: usize = 4;

/// Stride-4/8/16 feature maps, each `[T, h·w, C]` with row-major spatial
/// flattening.
pub struct VisualPyramid<'t> {
    pub f4: Var<'t>,
    pub f8: Var<'t>,
    pub f16: Var<'t>,
    /// `(h, w)` of each level.
    pub grids: [(usize, usize); 3],
}

pub struct JointFeature<'t> {
    /// `[T, n_visual + S, C]`: visual rows first, then text rows.
    pub x: Var<'t>,
    pub n_visual: usize,
    pub n_text: usize,
}

pub fn init<R: rand::Rng>(cfg: &ModelConfig, params: &mut ParamSet, rng: &mut R) {
    let mut it = Init { params, rng };
    it.weight("encoder.patch.w", PATCH * PATCH * 3, cfg.c1);
    for (stage, c) in [("s1", cfg.c1), ("s2", cfg.c2)] {
        it.layer_norm(&format!("encoder.{stage}.ln"), c);
        it.linear(&format!("encoder.{stage}.mlp1"), c, 2 * c);
        it.linear(&format!("encoder.{stage}.mlp2"), 2 * c, c);
        it.linear(&format!("encoder.{stage}.merge"), 4 * c, 2 * c);
    }
    it.linear("fuse.visual", cfg.c3, cfg.d_model);
    it.linear("fuse.text", cfg.text_dim, cfg.d_model);
}

/// `[T, H, W, 3]` frames to the three-level pyramid.
pub fn encode_video<'t>(ctx: &Ctx<'t>, frames: Var<'t>) -> Result<VisualPyramid<'t>> {
    let shape = frames.shape();
    if shape.len() != 4 || shape[3] != 3 {
        return Err(Error::contract("encode_video", format!("expected [T, H, W, 3], got {shape:?}")));
    }
    let (t, h, w) = (shape[0], shape[1], shape[2]);
    if h % 16 != 0 || w % 16 != 0 || h == 0 || w == 0 {
        return Err(Error::contract("encode_video", format!("{h}x{w} not divisible by 16")));
    }
    let (h4, w4) = (h / PATCH, w / PATCH);
    let patches = frames
        .reshape(&[t, h4, PATCH, w4, PATCH, 3])?
        .permute(&[0, 1, 3, 2, 4, 5])?
        .reshape(&[t, h4 * w4, PATCH * PATCH * 3])?;
    let f4 = patches.matmul(ctx.p("encoder.patch.w")?)?;
    let f8 = stage(ctx, "encoder.s1", f4, t, h4, w4)?;
    let f16 = stage(ctx, "encoder.s2", f8, t, h4 / 2, w4 / 2)?;
    Ok(VisualPyramid {
        f4,
        f8,
        f16,
        grids: [(h4, w4), (h4 / 2, w4 / 2), (h4 / 4, w4 / 4)],
    })
}

fn stage<'t>(ctx: &Ctx<'t>, prefix: &str, x: Var<'t>, t: usize, h: usize, w: usize) -> Result<Var<'t>> {
    let c = x.shape()[2];
    let y = ctx.layer_norm(&format!("{prefix}.ln"), x)?;
    let y = ctx.linear(&format!("{prefix}.mlp1"), y)?.relu();
    let y = ctx.linear(&format!("{prefix}.mlp2"), y)?;
    let x = x.add(y)?;
    let merged = x
        .reshape(&[t, h / 2, 2, w / 2, 2, c])?
        .permute(&[0, 1, 3, 2, 4, 5])?
        .reshape(&[t, (h / 2) * (w / 2), 4 * c])?;
    ctx.linear(&format!("{prefix}.merge"), merged)
}

/// Whitespace split, lowercase, strip everything that is not alphanumeric.
pub fn tokenize(query: &str) -> Vec<String> {
    query
        .split_whitespace()
        .map(|w| w.chars().filter(|c| c.is_alphanumeric()).flat_map(char::to_lowercase).collect::<String>())
        .filter(|w| !w.is_empty())
        .collect()
}

/// 64-bit FNV-1a.
pub fn token_hash(token: &str) -> u64 {
    token.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3))
}

/// The frozen unit-norm embedding of one token.
pub fn token_embedding(token: &str, dim: usize) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(token_hash(token));
    let mut v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter_mut().for_each(|x| *x /= norm);
    v
}

/// `[S, text_dim]` word features for an already tokenised query.
pub fn encode_text(tokens: &[String], cfg: &ModelConfig) -> Result<Tensor> {
    if tokens.is_empty() {
        return Err(Error::contract("encode_text", "empty query"));
    }
    if tokens.len() > cfg.max_tokens {
        return Err(Error::contract(
            "encode_text",
            format!("{} tokens exceed the limit of {}", tokens.len(), cfg.max_tokens),
        ));
    }
    let data = tokens.iter().flat_map(|t| token_embedding(t, cfg.text_dim)).collect();
    Tensor::new(&[tokens.len(), cfg.text_dim], data)
}

/// Project the stride-16 map and the words to `d_model` and concatenate
/// them per frame; the text block is shared by all frames.
pub fn fuse_project<'t>(ctx: &Ctx<'t>, pyr: &VisualPyramid<'t>, text: &Tensor) -> Result<JointFeature<'t>> {
    let fs = pyr.f16.shape();
    let (t, n_visual) = (fs[0], fs[1]);
    let s = text.shape()[0];
    let visual = ctx.linear("fuse.visual", pyr.f16)?;
    let words = ctx.linear("fuse.text", ctx.constant(text.clone()))?;
    let c = words.shape()[1];
    let words = words.reshape(&[1, s, c])?.index_select(0, &vec![0; t])?;
    let x = ctx.tape.concat(&[visual, words], 1)?;
    Ok(JointFeature {
        x,
        n_visual,
        n_text: s,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tape;
    use crate::config::Config;
    use proptest::prelude::*;

    fn desk() -> ModelConfig {
        Config::desk().model
    }

    fn setup(cfg: &ModelConfig, seed: u64) -> ParamSet {
        let mut ps = ParamSet::new();
        init(cfg, &mut ps, &mut ChaCha8Rng::seed_from_u64(seed));
        ps
    }

    #[test]
    fn pyramid_shapes_at_full_size_channels() {
        let cfg = Config::paper().model;
        let ps = setup(&cfg, 0);
        let tape = Tape::inference();
        let ctx = Ctx::new(&tape, &ps);
        let frames = tape.constant(Tensor::zeros(&[2, 64, 64, 3]));
        let pyr = encode_video(&ctx, frames).unwrap();
        assert_eq!(pyr.f4.shape(), vec![2, 256, 96]);
        assert_eq!(pyr.f8.shape(), vec![2, 64, 192]);
        assert_eq!(pyr.f16.shape(), vec![2, 16, 384]);
    }

    #[test]
    fn zero_params_zero_pyramid() {
        let cfg = desk();
        let mut ps = setup(&cfg, 0);
        for (name, t) in ps.iter_mut() {
            if !name.ends_with(".g") {
                t.data_mut().fill(0.0);
            }
        }
        let tape = Tape::inference();
        let ctx = Ctx::new(&tape, &ps);
        let pyr = encode_video(&ctx, tape.constant(Tensor::zeros(&[1, 32, 32, 3]))).unwrap();
        for f in [pyr.f4, pyr.f8, pyr.f16] {
            assert!(f.to_tensor().data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn encoding_is_deterministic() {
        let cfg = desk();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let clip = Tensor::uniform(&[2, 32, 48, 3], 0.0, 1.0, &mut rng);
        let run = || {
            let ps = setup(&cfg, 9);
            let tape = Tape::inference();
            let ctx = Ctx::new(&tape, &ps);
            let p = encode_video(&ctx, tape.constant(clip.clone())).unwrap();
            (p.f4.to_tensor(), p.f8.to_tensor(), p.f16.to_tensor())
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn rejects_indivisible_frames() {
        let cfg = desk();
        let ps = setup(&cfg, 0);
        let tape = Tape::inference();
        let ctx = Ctx::new(&tape, &ps);
        assert!(encode_video(&ctx, tape.constant(Tensor::zeros(&[1, 40, 32, 3]))).is_err());
    }

    #[test]
    fn tokenizer_normalises() {
        assert_eq!(tokenize("The RED, circle  moving-left!"), vec!["the", "red", "circle", "movingleft"]);
        assert!(tokenize("  ?! ").is_empty());
    }

    #[test]
    fn text_rows_are_hash_determined() {
        let cfg = desk();
        let toks = |s: &[&str]| s.iter().map(|x| x.to_string()).collect::<Vec<_>>();
        let y = encode_text(&toks(&["cat", "cat"]), &cfg).unwrap();
        let d = cfg.text_dim;
        assert_eq!(&y.data()[..d], &y.data()[d..]);
        let norm: f64 = y.data()[..d].iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!((norm - 1.0).abs() <= 1e-12);

        let ab = encode_text(&toks(&["a", "b"]), &cfg).unwrap();
        let ba = encode_text(&toks(&["b", "a"]), &cfg).unwrap();
        assert_eq!(&ab.data()[..d], &ba.data()[d..]);
        assert_eq!(&ab.data()[d..], &ba.data()[..d]);
        assert!(encode_text(&[], &cfg).is_err());
    }

    #[test]
    fn fuse_shapes_and_degenerate_projections() {
        let mut cfg = desk();
        cfg.d_model = 256;
        let mut ps = setup(&cfg, 1);
        let tape = Tape::inference();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let text = encode_text(&tokenize("a b c d e"), &cfg).unwrap();
        {
            let ctx = Ctx::new(&tape, &ps);
            let pyr = encode_video(&ctx, tape.constant(Tensor::uniform(&[2, 64, 64, 3], 0.0, 1.0, &mut rng))).unwrap();
            let j = fuse_project(&ctx, &pyr, &text).unwrap();
            assert_eq!(j.x.shape(), vec![2, 21, 256]);
        }
        for name in ["fuse.visual.w", "fuse.visual.b", "fuse.text.w", "fuse.text.b"] {
            ps.get_mut(name).unwrap().data_mut().fill(0.0);
        }
        let ctx = Ctx::new(&tape, &ps);
        let pyr = encode_video(&ctx, tape.constant(Tensor::uniform(&[2, 64, 64, 3], 0.0, 1.0, &mut rng))).unwrap();
        let j = fuse_project(&ctx, &pyr, &text).unwrap();
        assert!(j.x.to_tensor().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn identity_projection_copies_visual_rows() {
        let mut cfg = desk();
        cfg.d_model = cfg.c3;
        let mut ps = setup(&cfg, 1);
        ps.insert("fuse.visual.w", Tensor::eye(cfg.c3));
        let tape = Tape::inference();
        let ctx = Ctx::new(&tape, &ps);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let pyr = encode_video(&ctx, tape.constant(Tensor::uniform(&[2, 32, 32, 3], 0.0, 1.0, &mut rng))).unwrap();
        let text = encode_text(&tokenize("x y"), &cfg).unwrap();
        let j = fuse_project(&ctx, &pyr, &text).unwrap();
        let visual = j.x.narrow(1, 0, j.n_visual).unwrap().to_tensor();
        assert_eq!(visual, pyr.f16.to_tensor());
        // Row order: zeroing the text block leaves the visual block untouched.
        assert_eq!(j.n_text, 2);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]
        #[test]
        fn pyramid_contract(t in 1usize..3, hb in 1usize..4, wb in 1usize..4) {
            let cfg = desk();
            let ps = setup(&cfg, 0);
            let tape = Tape::inference();
            let ctx = Ctx::new(&tape, &ps);
            let (h, w) = (16 * hb, 16 * wb);
            let pyr = encode_video(&ctx, tape.constant(Tensor::zeros(&[t, h, w, 3]))).unwrap();
            prop_assert_eq!(pyr.f4.shape(), vec![t, (h / 4) * (w / 4), cfg.c1]);
            prop_assert_eq!(pyr.f8.shape(), vec![t, (h / 8) * (w / 8), cfg.c2]);
            prop_assert_eq!(pyr.f16.shape(), vec![t, (h / 16) * (w / 16), cfg.c3]);
        }
    }
}
