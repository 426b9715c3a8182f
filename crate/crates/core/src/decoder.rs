//! Mask decoder: two cascaded stacked transformers followed by a dynamic
//! convolution with the finest kernels.
//!
//! Every feature with a candidate axis is laid out as `K` ordered channel
//! groups, group `g` belonging to candidate `g`. Contractions that sum over
//! such channels use correctly rounded dot products, so relabelling the
//! candidates permutes the outputs bit-for-bit.

use crate::autodiff::Var;
use crate::config::ModelConfig;
use crate::encoders::{JointFeature, VisualPyramid};
use crate::error::{Error, Result};
use crate::params::{Ctx, Init, ParamSet};
use crate::tensor::Tensor;

/// Static description of one stacked transformer.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Stage {
    pub prefix: &'static str,
    /// Channels of the high-resolution query feature `f`.
    pub c_f: usize,
    /// Channels of the low-resolution feature `x̃`.
    pub c_x: usize,
    /// Output channels per candidate.
    pub alpha: usize,
}

pub fn stages(cfg: &ModelConfig) -> [Stage; 2] {
    let k = cfg.candidates;
    [
        Stage {
            prefix: "decoder.s1",
            c_f: cfg.c2,
            c_x: cfg.d_model,
            alpha: cfg.alpha,
        },
        Stage {
            prefix: "decoder.s2",
            c_f: cfg.c1,
            c_x: cfg.alpha * k,
            alpha: cfg.alpha_fine,
        },
    ]
}

pub fn init<R: rand::Rng>(cfg: &ModelConfig, params: &mut ParamSet, rng: &mut R) {
    let k = cfg.candidates;
    let mut it = Init { params, rng };
    for s in stages(cfg) {
        let p = s.prefix;
        it.weight(&format!("{p}.wq"), s.c_f, k);
        it.weight(&format!("{p}.wk"), s.c_x, k);
        it.weight(&format!("{p}.wv"), s.c_x, s.alpha * k);
        it.weight(&format!("{p}.w0"), s.c_x, cfg.c0);
        it.layer_norm(&format!("{p}.ln_in"), s.alpha * k);
        it.layer_norm(&format!("{p}.ln_out"), s.alpha * k);
        for l in ["w1", "w2"] {
            let a = (6.0 / (2 * s.alpha) as f64).sqrt();
            let w = Tensor::uniform(&[k, s.alpha, s.alpha], -a, a, it.rng);
            it.params.insert(format!("{p}.sffn.{l}"), w);
        }
        it.params.insert(format!("{p}.sffn.b1"), Tensor::zeros(&[s.alpha * k]));
        it.params.insert(format!("{p}.sffn.b2"), Tensor::zeros(&[s.alpha * k]));
    }
    it.weight("decoder.proj", cfg.alpha_fine * k, cfg.c0);
}

/// Weights of one grouped FFN: two square `α×α` layers per candidate.
pub fn sffn_weight_count(k: usize, alpha: usize) -> usize {
    2 * k * alpha * alpha
}

/// Weights plus biases of one grouped FFN.
pub fn sffn_param_count(k: usize, alpha: usize) -> usize {
    k * (2 * alpha * alpha + 2 * alpha)
}

/// Weights of a dense two-layer FFN of width `K·α` in and out.
pub fn dense_ffn_weight_count(k: usize, alpha: usize) -> usize {
    2 * (k * alpha) * (k * alpha)
}

/// Visual rows of the joint feature: `[T, n_visual, C]`.
pub fn strip_text<'t>(joint: &JointFeature<'t>) -> Result<Var<'t>> {
    joint.x.narrow(1, 0, joint.n_visual)
}

fn upsample<'t>(x: Var<'t>, from: (usize, usize), to: (usize, usize)) -> Result<Var<'t>> {
    let s = x.shape();
    let (t, c) = (s[0], s[2]);
    x.reshape(&[t, from.0, from.1, c])?
        .bilinear_upsample(to.0, to.1)?
        .reshape(&[t, to.0 * to.1, c])
}

fn check_grid(op: &'static str, x: Var<'_>, grid: (usize, usize)) -> Result<()> {
    let s = x.shape();
    if s.len() != 3 || s[1] != grid.0 * grid.1 {
        return Err(Error::contract(op, format!("feature {s:?} does not match grid {}x{}", grid.0, grid.1)));
    }
    Ok(())
}

/// Candidate object weight map `m = σ(Upsample(z ∗ (x̃ W₀)))`: `[T, HfWf, K]`.
pub fn candidate_weights<'t>(
    ctx: &Ctx<'t>,
    stage: &Stage,
    x: Var<'t>,
    x_grid: (usize, usize),
    f_grid: (usize, usize),
    z: Var<'t>,
) -> Result<Var<'t>> {
    let w0 = ctx.p(&format!("{}.w0", stage.prefix))?;
    let logits = x.matmul_exact(w0)?.matmul(z.transpose_last()?)?;
    Ok(upsample(logits, x_grid, f_grid)?.sigmoid())
}

/// Object-gated cross-attention from the high-resolution feature `f`
/// (`[T, HfWf, Cf]`) into `x̃` (`[T, HxWx, Cx]`) with kernels `z`
/// (`[T, K, C₀]`); returns `x̂′` of shape `[T, HfWf, αK]`.
pub fn stacked_attention<'t>(
    ctx: &Ctx<'t>,
    stage: &Stage,
    f: Var<'t>,
    f_grid: (usize, usize),
    x: Var<'t>,
    x_grid: (usize, usize),
    z: Var<'t>,
) -> Result<Var<'t>> {
    check_grid("stacked_attention", f, f_grid)?;
    check_grid("stacked_attention", x, x_grid)?;
    if f_grid.0 < x_grid.0 || f_grid.1 < x_grid.1 {
        return Err(Error::contract(
            "stacked_attention",
            format!("query grid {f_grid:?} coarser than key grid {x_grid:?}"),
        ));
    }
    let p = stage.prefix;
    let k = z.shape()[1];
    let q = f.matmul(ctx.p(&format!("{p}.wq"))?)?;
    let key = x.matmul_exact(ctx.p(&format!("{p}.wk"))?)?;
    let value = x.matmul_exact(ctx.p(&format!("{p}.wv"))?)?;
    let m = candidate_weights(ctx, stage, x, x_grid, f_grid, z)?;
    let q = q.mul(m)?;
    let att = q
        .matmul_exact(key.transpose_last()?)?
        .scale(1.0 / (k as f64).sqrt())
        .softmax_last();
    att.matmul(value)?.add(upsample(value, x_grid, f_grid)?)
}

/// The grouped two-layer MLP alone: `K` independent `α→α→α` networks.
pub fn sffn<'t>(ctx: &Ctx<'t>, stage: &Stage, x: Var<'t>, groups: usize) -> Result<Var<'t>> {
    let p = stage.prefix;
    let h = x
        .grouped_linear(ctx.p(&format!("{p}.sffn.w1"))?, groups)?
        .add(ctx.p(&format!("{p}.sffn.b1"))?)?
        .relu();
    h.grouped_linear(ctx.p(&format!("{p}.sffn.w2"))?, groups)?
        .add(ctx.p(&format!("{p}.sffn.b2"))?)
}

/// `x̂″ = LN(SFFN(LN(x̂′)) + x̂′)`.
pub fn stacked_ffn<'t>(ctx: &Ctx<'t>, stage: &Stage, x: Var<'t>, groups: usize) -> Result<Var<'t>> {
    let ch = *x.shape().last().unwrap_or(&0);
    if groups == 0 || !ch.is_multiple_of(groups) {
        return Err(Error::contract("stacked_ffn", format!("{ch} channels not divisible into {groups} groups")));
    }
    let p = stage.prefix;
    let ln = |name: &str, v: Var<'t>| -> Result<Var<'t>> {
        v.layer_norm_exact(ctx.p(&format!("{p}.{name}.g"))?, ctx.p(&format!("{p}.{name}.b"))?)
    };
    let h = sffn(ctx, stage, ln("ln_in", x)?, groups)?;
    ln("ln_out", h.add(x)?)
}

pub struct MaskOutput<'t> {
    /// Pre-sigmoid mask logits `[T, K, H, W]`.
    pub logits: Var<'t>,
    /// Mask probabilities `[T, K, H, W]`.
    pub probs: Var<'t>,
}

impl MaskOutput<'_> {
    /// Binary masks: probability above 0.5.
    pub fn binary(&self) -> Vec<bool> {
        self.logits.value().data().iter().map(|&l| l > 0.0).collect()
    }
}

/// `σ(Upsample(Z₃ ∗ (X₄ W_proj)))` at full resolution.
pub fn decode_masks<'t>(
    ctx: &Ctx<'t>,
    x4: Var<'t>,
    grid: (usize, usize),
    z3: Var<'t>,
    out: (usize, usize),
) -> Result<MaskOutput<'t>> {
    check_grid("decode_masks", x4, grid)?;
    let proj = x4.matmul_exact(ctx.p("decoder.proj")?)?;
    let logits = proj.matmul(z3.transpose_last()?)?;
    let s = logits.shape();
    let logits = logits
        .reshape(&[s[0], grid.0, grid.1, s[2]])?
        .bilinear_upsample(out.0, out.1)?
        .permute(&[0, 3, 1, 2])?;
    Ok(MaskOutput {
        logits,
        probs: logits.sigmoid(),
    })
}

pub struct DecoderOutput<'t> {
    /// Middle-resolution decoding feature `[T, H₂W₂, αK]`.
    pub x8: Var<'t>,
    /// High-resolution decoding feature `[T, H₁W₁, α′K]`.
    pub x4: Var<'t>,
    pub masks: MaskOutput<'t>,
}

/// Both stacked transformers and the final dynamic convolution.
pub fn run_decoder<'t>(
    ctx: &Ctx<'t>,
    cfg: &ModelConfig,
    pyr: &VisualPyramid<'t>,
    joint: &JointFeature<'t>,
    kernels: &[Var<'t>; 3],
) -> Result<DecoderOutput<'t>> {
    let k = cfg.candidates;
    let [s1, s2] = stages(cfg);
    let [g4, g8, g16] = pyr.grids;
    let xt = strip_text(joint)?;
    let x8 = stacked_attention(ctx, &s1, pyr.f8, g8, xt, g16, kernels[0])?;
    let x8 = stacked_ffn(ctx, &s1, x8, k)?;
    let x4 = stacked_attention(ctx, &s2, pyr.f4, g4, x8, g8, kernels[1])?;
    let x4 = stacked_ffn(ctx, &s2, x4, k)?;
    let masks = decode_masks(ctx, x4, g4, kernels[2], (g4.0 * 4, g4.1 * 4))?;
    Ok(DecoderOutput { x8, x4, masks })
}

/// Reorder `axis` of `t`, viewed as `perm.len()` blocks of `block` entries,
/// so that new block `i` is old block `perm[i]`.
pub fn permute_blocks(t: &Tensor, axis: usize, block: usize, perm: &[usize]) -> Result<Tensor> {
    let shape = t.shape();
    if axis >= shape.len() || shape[axis] != block * perm.len() {
        return Err(Error::contract(
            "permute_blocks",
            format!("axis {axis} of {shape:?} is not {} blocks of {block}", perm.len()),
        ));
    }
    let dim = shape[axis];
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    let idx: Vec<usize> = perm.iter().flat_map(|&p| p * block..(p + 1) * block).collect();
    let mut data = Vec::with_capacity(t.numel());
    for o in 0..outer {
        for &i in &idx {
            let s = (o * dim + i) * inner;
            data.extend_from_slice(&t.data()[s..s + inner]);
        }
    }
    Tensor::new(shape, data)
}

/// Decoder parameters relabelled by the candidate permutation `perm`:
/// run with kernels whose rows are permuted the same way, output mask `i`
/// equals the original mask `perm[i]`.
pub fn permute_candidates(params: &ParamSet, cfg: &ModelConfig, perm: &[usize]) -> Result<ParamSet> {
    let k = cfg.candidates;
    let mut sorted = perm.to_vec();
    sorted.sort_unstable();
    if sorted != (0..k).collect::<Vec<_>>() {
        return Err(Error::contract("permute_candidates", format!("{perm:?} is not a permutation of 0..{k}")));
    }
    let mut out = params.clone();
    let mut apply = |name: String, axis: usize, block: usize| -> Result<()> {
        let t = out.get_mut(&name)?;
        *t = permute_blocks(t, axis, block, perm)?;
        Ok(())
    };
    let [s1, s2] = stages(cfg);
    for s in [s1, s2] {
        let p = s.prefix;
        apply(format!("{p}.wq"), 1, 1)?;
        apply(format!("{p}.wk"), 1, 1)?;
        apply(format!("{p}.wv"), 1, s.alpha)?;
        for n in ["ln_in.g", "ln_in.b", "ln_out.g", "ln_out.b", "sffn.b1", "sffn.b2"] {
            apply(format!("{p}.{n}"), 0, s.alpha)?;
        }
        apply(format!("{p}.sffn.w1"), 0, 1)?;
        apply(format!("{p}.sffn.w2"), 0, 1)?;
    }
    // Stage 2 reads the stage-1 output, whose channel groups moved too.
    let p = s2.prefix;
    for n in ["wk", "wv", "w0"] {
        apply(format!("{p}.{n}"), 0, s1.alpha)?;
    }
    apply("decoder.proj".into(), 0, s2.alpha)?;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tape;
    use crate::config::Config;
    use crate::gradcheck::GradCheck;
    use crate::params::Bound;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn desk() -> ModelConfig {
        Config::desk().model
    }

    fn setup(cfg: &ModelConfig, seed: u64) -> ParamSet {
        let mut ps = ParamSet::new();
        init(cfg, &mut ps, &mut ChaCha8Rng::seed_from_u64(seed));
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabcd);
        for (name, t) in ps.iter_mut() {
            if name.ends_with(".b") || name.ends_with(".b1") || name.ends_with(".b2") {
                *t = Tensor::randn(t.shape(), 0.1, &mut rng);
            }
        }
        ps
    }

    struct Inputs {
        f4: Tensor,
        f8: Tensor,
        x: Tensor,
        z: [Tensor; 3],
    }

    /// Random decoder inputs for a `side`x`side` clip.
    fn inputs(cfg: &ModelConfig, t: usize, side: usize, seed: u64) -> Inputs {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = |s: usize| (side / s) * (side / s);
        let k = cfg.candidates;
        Inputs {
            f4: Tensor::randn(&[t, n(4), cfg.c1], 1.0, &mut rng),
            f8: Tensor::randn(&[t, n(8), cfg.c2], 1.0, &mut rng),
            x: Tensor::randn(&[t, n(16), cfg.d_model], 1.0, &mut rng),
            z: std::array::from_fn(|_| Tensor::randn(&[t, k, cfg.c0], 1.0, &mut rng)),
        }
    }

    fn run(cfg: &ModelConfig, ps: &ParamSet, inp: &Inputs, side: usize) -> (Tensor, Tensor, Tensor) {
        let tape = Tape::inference();
        let ctx = Ctx::new(&tape, ps);
        let g = |s: usize| (side / s, side / s);
        let pyr = VisualPyramid {
            f4: ctx.constant(inp.f4.clone()),
            f8: ctx.constant(inp.f8.clone()),
            f16: ctx.constant(Tensor::zeros(&[1])),
            grids: [g(4), g(8), g(16)],
        };
        let joint = JointFeature {
            x: ctx.constant(inp.x.clone()),
            n_visual: g(16).0 * g(16).1,
            n_text: 0,
        };
        let z = inp.z.clone().map(|z| ctx.constant(z));
        let out = run_decoder(&ctx, cfg, &pyr, &joint, &z).unwrap();
        (out.x8.to_tensor(), out.x4.to_tensor(), out.masks.probs.to_tensor())
    }

    #[test]
    fn strip_text_keeps_visual_prefix() {
        let tape = Tape::inference();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::randn(&[2, 21, 64], 1.0, &mut rng);
        let joint = JointFeature {
            x: tape.constant(x.clone()),
            n_visual: 16,
            n_text: 5,
        };
        let v = strip_text(&joint).unwrap().to_tensor();
        assert_eq!(v.shape(), &[2, 16, 64]);
        for t in 0..2 {
            assert_eq!(&v.data()[t * 16 * 64..(t + 1) * 16 * 64], &x.data()[t * 21 * 64..(t * 21 + 16) * 64]);
        }
    }

    #[test]
    fn shape_pipeline_at_desk_scale() {
        let cfg = desk();
        let ps = setup(&cfg, 2);
        let (x8, x4, p) = run(&cfg, &ps, &inputs(&cfg, 2, 64, 3), 64);
        assert_eq!(x8.shape(), &[2, 64, 24]);
        assert_eq!(x4.shape(), &[2, 256, 12]);
        assert_eq!(p.shape(), &[2, 6, 64, 64]);
        assert!(p.data().iter().all(|&v| v > 0.0 && v < 1.0));
    }

    #[test]
    fn zero_kernels_give_half_weights_and_half_masks() {
        let cfg = desk();
        let ps = setup(&cfg, 4);
        let tape = Tape::inference();
        let ctx = Ctx::new(&tape, &ps);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = ctx.constant(Tensor::randn(&[2, 16, 64], 1.0, &mut rng));
        let z = ctx.constant(Tensor::zeros(&[2, 6, 8]));
        let m = candidate_weights(&ctx, &stages(&cfg)[0], x, (4, 4), (8, 8), z).unwrap();
        assert!(m.to_tensor().data().iter().all(|&v| v == 0.5));
        let x4 = ctx.constant(Tensor::randn(&[2, 256, 12], 1.0, &mut rng));
        let masks = decode_masks(&ctx, x4, (16, 16), z, (64, 64)).unwrap();
        assert_eq!(masks.probs.shape(), vec![2, 6, 64, 64]);
        assert!(masks.probs.to_tensor().data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn zero_value_weights_zero_attentive_feature() {
        let cfg = desk();
        let mut ps = setup(&cfg, 6);
        ps.get_mut("decoder.s1.wv").unwrap().data_mut().fill(0.0);
        let tape = Tape::inference();
        let ctx = Ctx::new(&tape, &ps);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let f = ctx.constant(Tensor::randn(&[2, 64, 48], 1.0, &mut rng));
        let x = ctx.constant(Tensor::randn(&[2, 16, 64], 1.0, &mut rng));
        let z = ctx.constant(Tensor::randn(&[2, 6, 8], 1.0, &mut rng));
        let out = stacked_attention(&ctx, &stages(&cfg)[0], f, (8, 8), x, (4, 4), z).unwrap();
        assert_eq!(out.shape(), vec![2, 64, 24]);
        assert!(out.to_tensor().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn kernel_rows_permute_weight_columns() {
        let cfg = desk();
        let ps = setup(&cfg, 8);
        let tape = Tape::inference();
        let ctx = Ctx::new(&tape, &ps);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = ctx.constant(Tensor::randn(&[1, 16, 64], 1.0, &mut rng));
        let z = ctx.constant(Tensor::randn(&[1, 6, 8], 1.0, &mut rng));
        let perm = [3, 1, 5, 0, 2, 4];
        let s = stages(&cfg)[0];
        let m = candidate_weights(&ctx, &s, x, (4, 4), (8, 8), z).unwrap();
        let mp = candidate_weights(&ctx, &s, x, (4, 4), (8, 8), z.index_select(1, &perm).unwrap()).unwrap();
        assert_eq!(m.index_select(2, &perm).unwrap().to_tensor(), mp.to_tensor());
    }

    #[test]
    fn resolution_mismatch_is_rejected() {
        let cfg = desk();
        let ps = setup(&cfg, 10);
        let tape = Tape::inference();
        let ctx = Ctx::new(&tape, &ps);
        let f = ctx.constant(Tensor::zeros(&[1, 64, 48]));
        let x = ctx.constant(Tensor::zeros(&[1, 16, 64]));
        let z = ctx.constant(Tensor::zeros(&[1, 6, 8]));
        let s = stages(&cfg)[0];
        assert!(matches!(
            stacked_attention(&ctx, &s, f, (8, 8), x, (4, 5), z),
            Err(Error::Contract { .. })
        ));
        assert!(matches!(
            stacked_attention(&ctx, &s, x, (4, 4), f, (8, 8), z),
            Err(Error::Contract { .. })
        ));
    }

    #[test]
    fn zero_sffn_reduces_to_output_norm() {
        let cfg = desk();
        let mut ps = setup(&cfg, 11);
        for n in ["w1", "w2", "b1", "b2"] {
            ps.get_mut(&format!("decoder.s1.sffn.{n}")).unwrap().data_mut().fill(0.0);
        }
        let tape = Tape::inference();
        let ctx = Ctx::new(&tape, &ps);
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let x = ctx.constant(Tensor::randn(&[2, 64, 24], 1.0, &mut rng));
        let s = stages(&cfg)[0];
        let y = stacked_ffn(&ctx, &s, x, 6).unwrap();
        let expected = x
            .layer_norm_exact(ctx.p("decoder.s1.ln_out.g").unwrap(), ctx.p("decoder.s1.ln_out.b").unwrap())
            .unwrap();
        assert_eq!(y.to_tensor(), expected.to_tensor());
        assert!(y.to_tensor().is_finite());
    }

    #[test]
    fn sffn_groups_are_isolated() {
        let cfg = desk();
        let ps = setup(&cfg, 13);
        let tape = Tape::inference();
        let ctx = Ctx::new(&tape, &ps);
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let base = Tensor::randn(&[5, 24], 1.0, &mut rng);
        let mut bumped = base.clone();
        for r in 0..5 {
            for c in 8..12 {
                bumped.data_mut()[r * 24 + c] += 0.7;
            }
        }
        let s = stages(&cfg)[0];
        let a = sffn(&ctx, &s, ctx.constant(base), 6).unwrap().to_tensor();
        let b = sffn(&ctx, &s, ctx.constant(bumped), 6).unwrap().to_tensor();
        for r in 0..5 {
            for c in (0..24).filter(|c| !(8..12).contains(c)) {
                assert_eq!(a.data()[r * 24 + c], b.data()[r * 24 + c], "row {r} channel {c}");
            }
        }
        assert_ne!(a, b);
    }

    #[test]
    fn indivisible_channels_are_rejected() {
        let cfg = desk();
        let ps = setup(&cfg, 15);
        let tape = Tape::inference();
        let ctx = Ctx::new(&tape, &ps);
        let x = ctx.constant(Tensor::zeros(&[1, 4, 25]));
        assert!(matches!(stacked_ffn(&ctx, &stages(&cfg)[0], x, 6), Err(Error::Contract { .. })));
    }

    #[test]
    fn parameter_counts_match_closed_form() {
        for k in [6, 50] {
            let mut cfg = desk();
            cfg.candidates = k;
            let ps = setup(&cfg, 0);
            let alpha = cfg.alpha;
            assert_eq!(ps.count("decoder.s1.sffn."), sffn_param_count(k, alpha));
            assert_eq!(
                ps.count("decoder.s1.sffn.w1") + ps.count("decoder.s1.sffn.w2"),
                sffn_weight_count(k, alpha)
            );
            assert_eq!(sffn_weight_count(k, alpha) * k, dense_ffn_weight_count(k, alpha));
        }
        assert_eq!(sffn_param_count(50, 4), 2000);
        assert_eq!(dense_ffn_weight_count(50, 4), 80_000);
    }

    #[test]
    fn relabelling_candidates_permutes_masks_exactly() {
        let cfg = desk();
        let ps = setup(&cfg, 16);
        let inp = inputs(&cfg, 2, 64, 17);
        let perm = [4, 2, 0, 5, 1, 3];
        let (x8, x4, p) = run(&cfg, &ps, &inp, 64);
        let pp = permute_candidates(&ps, &cfg, &perm).unwrap();
        let permuted = Inputs {
            z: inp.z.clone().map(|z| permute_blocks(&z, 1, 1, &perm).unwrap()),
            ..inp
        };
        let (y8, y4, q) = run(&cfg, &pp, &permuted, 64);
        assert_eq!(permute_blocks(&x8, 2, cfg.alpha, &perm).unwrap(), y8);
        assert_eq!(permute_blocks(&x4, 2, cfg.alpha_fine, &perm).unwrap(), y4);
        assert_eq!(permute_blocks(&p, 1, 1, &perm).unwrap(), q);
    }

    #[test]
    fn decoder_is_deterministic() {
        let cfg = desk();
        let inp = inputs(&cfg, 2, 32, 18);
        let a = run(&cfg, &setup(&cfg, 19), &inp, 32);
        let b = run(&cfg, &setup(&cfg, 19), &inp, 32);
        assert_eq!(a, b);
    }

    #[test]
    fn stacked_attention_gradients() {
        let mut cfg = desk();
        cfg.candidates = 3;
        cfg.d_model = 8;
        cfg.c2 = 6;
        let ps = setup(&cfg, 20);
        let names = ["decoder.s1.wq", "decoder.s1.wk", "decoder.s1.wv", "decoder.s1.w0"];
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let mut inputs: Vec<Tensor> = names.iter().map(|n| ps.get(n).unwrap().clone()).collect();
        inputs.push(Tensor::randn(&[1, 16, 6], 1.0, &mut rng));
        inputs.push(Tensor::randn(&[1, 4, 8], 1.0, &mut rng));
        inputs.push(Tensor::randn(&[1, 3, 8], 1.0, &mut rng));
        let proj = Tensor::randn(&[1, 16, 12], 1.0, &mut rng);
        let s = stages(&cfg)[0];
        let report = GradCheck::default()
            .run("stacked_attention", &inputs, |tape, v| {
                let ctx = Ctx::from_bound(tape, Bound::from_vars(names.iter().copied().zip(v[..4].iter().copied())));
                let out = stacked_attention(&ctx, &s, v[4], (4, 4), v[5], (2, 2), v[6])?;
                Ok(out.mul(tape.constant(proj.clone()))?.sum_all())
            })
            .unwrap();
        assert!(report.passes(1e-4), "{report:?}");
    }
}
