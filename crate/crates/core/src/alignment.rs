//! Cross-modal alignment: transformer encoders over the joint visual-text
//! feature, transformer decoders over `K` candidate object queries, and the
//! kernel / referring-score heads on the resulting hidden features.
//!
//! Attention never crosses frames: the temporal axis is a batch axis.

use crate::autodiff::Var;
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::params::{Ctx, Init, ParamSet};
use crate::tensor::Tensor;

pub const ENCODER_LAYERS: usize = 3;
pub const DECODER_LAYERS: usize = 3;
const FFN_MULT: usize = 4;

pub fn init<R: rand::Rng>(cfg: &ModelConfig, params: &mut ParamSet, rng: &mut R) {
    let c = cfg.d_model;
    let mut it = Init { params, rng };
    for i in 0..ENCODER_LAYERS {
        let p = format!("align.enc{i}");
        init_attention(&mut it, &format!("{p}.attn"), c);
        it.layer_norm(&format!("{p}.ln1"), c);
        init_ffn(&mut it, &format!("{p}.ffn"), c);
        it.layer_norm(&format!("{p}.ln2"), c);
    }
    it.weight("align.queries", cfg.candidates, c);
    for i in 0..DECODER_LAYERS {
        let p = format!("align.dec{i}");
        init_attention(&mut it, &format!("{p}.self"), c);
        it.layer_norm(&format!("{p}.ln1"), c);
        init_attention(&mut it, &format!("{p}.cross"), c);
        it.layer_norm(&format!("{p}.ln2"), c);
        init_ffn(&mut it, &format!("{p}.ffn"), c);
        it.layer_norm(&format!("{p}.ln3"), c);
    }
    for j in 1..=3 {
        it.linear(&format!("heads.kernel{j}.l1"), c, c);
        it.linear(&format!("heads.kernel{j}.l2"), c, cfg.c0);
    }
    it.linear("heads.ref", c, 1);
}

fn init_attention<R: rand::Rng>(it: &mut Init<'_, R>, prefix: &str, c: usize) {
    for w in ["q", "k", "v", "o"] {
        it.linear(&format!("{prefix}.{w}"), c, c);
    }
}

fn init_ffn<R: rand::Rng>(it: &mut Init<'_, R>, prefix: &str, c: usize) {
    it.linear(&format!("{prefix}.l1"), c, FFN_MULT * c);
    it.linear(&format!("{prefix}.l2"), FFN_MULT * c, c);
}

/// Fixed 2D sine encoding `[h·w, c]`. The first `c/2` channels encode the
/// row index and the rest the column index; within each half, channel `2i`
/// is `sin(p·ω_i)` and `2i+1` is `cos(p·ω_i)` with `ω_i = 10000^(-2i/(c/2))`.
pub fn sine_pos_2d(h: usize, w: usize, c: usize) -> Result<Tensor> {
    if !c.is_multiple_of(4) || c == 0 {
        return Err(Error::contract("sine_pos_2d", format!("{c} channels not divisible by 4")));
    }
    let half = c / 2;
    let freqs: Vec<f64> = (0..half / 2)
        .map(|i| 10000f64.powf(-2.0 * i as f64 / half as f64))
        .collect();
    let mut data = Vec::with_capacity(h * w * c);
    for y in 0..h {
        for x in 0..w {
            for p in [y, x] {
                for &f in &freqs {
                    let a = p as f64 * f;
                    data.push(a.sin());
                    data.push(a.cos());
                }
            }
        }
    }
    Tensor::new(&[h * w, c], data)
}

pub struct Attention<'t> {
    pub out: Var<'t>,
    /// `[T, heads, Lq, Lk]` probabilities.
    pub weights: Var<'t>,
}

/// Multi-head scaled dot-product attention over `[T, L, C]` inputs, with
/// projections `{prefix}.{q,k,v,o}`.
pub fn multi_head_attention<'t>(
    ctx: &Ctx<'t>,
    prefix: &str,
    heads: usize,
    query: Var<'t>,
    key: Var<'t>,
    value: Var<'t>,
) -> Result<Attention<'t>> {
    let qs = query.shape();
    let ks = key.shape();
    let (t, lq, c) = (qs[0], qs[1], qs[2]);
    let lk = ks[1];
    if c % heads != 0 {
        return Err(Error::contract("attention", format!("width {c} not divisible by {heads} heads")));
    }
    let d = c / heads;
    let q = ctx
        .linear(&format!("{prefix}.q"), query)?
        .reshape(&[t, lq, heads, d])?
        .permute(&[0, 2, 1, 3])?;
    let k = ctx
        .linear(&format!("{prefix}.k"), key)?
        .reshape(&[t, lk, heads, d])?
        .permute(&[0, 2, 3, 1])?;
    let v = ctx
        .linear(&format!("{prefix}.v"), value)?
        .reshape(&[t, lk, heads, d])?
        .permute(&[0, 2, 1, 3])?;
    let weights = q.matmul(k)?.scale(1.0 / (d as f64).sqrt()).softmax_last();
    let mixed = weights
        .matmul(v)?
        .permute(&[0, 2, 1, 3])?
        .reshape(&[t, lq, c])?;
    let out = ctx.linear(&format!("{prefix}.o"), mixed)?;
    Ok(Attention { out, weights })
}

fn ffn<'t>(ctx: &Ctx<'t>, prefix: &str, x: Var<'t>) -> Result<Var<'t>> {
    let h = ctx.linear(&format!("{prefix}.l1"), x)?.relu();
    ctx.linear(&format!("{prefix}.l2"), h)
}

/// Positional encoding for the joint sequence: sine rows for the visual
/// block, zeros for the text block.
pub fn joint_positions(grid: (usize, usize), n_text: usize, c: usize) -> Result<Tensor> {
    let pos = sine_pos_2d(grid.0, grid.1, c)?;
    let mut data = pos.into_data();
    data.resize((grid.0 * grid.1 + n_text) * c, 0.0);
    Tensor::new(&[grid.0 * grid.1 + n_text, c], data)
}

/// Three post-norm encoder layers; positions are added to queries and keys.
pub fn encode_alignment<'t>(ctx: &Ctx<'t>, cfg: &ModelConfig, x: Var<'t>, pos: &Tensor) -> Result<Var<'t>> {
    let pos = ctx.constant(pos.clone());
    let mut x = x;
    for i in 0..ENCODER_LAYERS {
        let p = format!("align.enc{i}");
        let qk = x.add(pos)?;
        let att = multi_head_attention(ctx, &format!("{p}.attn"), cfg.heads, qk, qk, x)?;
        x = ctx.layer_norm(&format!("{p}.ln1"), x.add(ctx.dropout(att.out))?)?;
        let f = ffn(ctx, &format!("{p}.ffn"), x)?;
        x = ctx.layer_norm(&format!("{p}.ln2"), x.add(ctx.dropout(f))?)?;
    }
    Ok(x)
}

/// The learned query embedding replicated over `frames`: `[T, K, C]`.
pub fn candidate_queries<'t>(ctx: &Ctx<'t>, frames: usize) -> Result<Var<'t>> {
    let q = ctx.p("align.queries")?;
    let s = q.shape();
    q.reshape(&[1, s[0], s[1]])?.index_select(0, &vec![0; frames])
}

/// One decoder layer: query self-attention, cross-attention into the
/// aligned feature (`O' = LN(mh-attn(O W'q, X' W'k, X' W'v) + O)`), FFN.
pub fn decoder_layer<'t>(
    ctx: &Ctx<'t>,
    cfg: &ModelConfig,
    layer: usize,
    queries: Var<'t>,
    memory: Var<'t>,
    memory_pos: Var<'t>,
) -> Result<Var<'t>> {
    let p = format!("align.dec{layer}");
    let sa = multi_head_attention(ctx, &format!("{p}.self"), cfg.heads, queries, queries, queries)?;
    let o = ctx.layer_norm(&format!("{p}.ln1"), queries.add(ctx.dropout(sa.out))?)?;
    let keys = memory.add(memory_pos)?;
    let ca = multi_head_attention(ctx, &format!("{p}.cross"), cfg.heads, o, keys, memory)?;
    let o = ctx.layer_norm(&format!("{p}.ln2"), o.add(ctx.dropout(ca.out))?)?;
    let f = ffn(ctx, &format!("{p}.ffn"), o)?;
    ctx.layer_norm(&format!("{p}.ln3"), o.add(ctx.dropout(f))?)
}

/// Hidden features `[3, T, K, C]`, one slice per decoder layer (coarse to
/// fine).
pub fn decode_queries<'t>(
    ctx: &Ctx<'t>,
    cfg: &ModelConfig,
    queries: Var<'t>,
    aligned: Var<'t>,
    pos: &Tensor,
) -> Result<Var<'t>> {
    let pos = ctx.constant(pos.clone());
    let mut o = queries;
    let mut levels = Vec::with_capacity(DECODER_LAYERS);
    for i in 0..DECODER_LAYERS {
        o = decoder_layer(ctx, cfg, i, o, aligned, pos)?;
        let s = o.shape();
        levels.push(o.reshape(&[1, s[0], s[1], s[2]])?);
    }
    ctx.tape.concat(&levels, 0)
}

fn level<'t>(hidden: Var<'t>, j: usize) -> Result<Var<'t>> {
    let s = hidden.shape();
    hidden.narrow(0, j, 1)?.reshape(&[s[1], s[2], s[3]])
}

/// `Z_j = ReLU(H_j W1 + b1) W2 + b2`, an independent head per level.
pub fn kernel_heads<'t>(ctx: &Ctx<'t>, hidden: Var<'t>) -> Result<[Var<'t>; 3]> {
    let mut out = Vec::with_capacity(3);
    for j in 1..=3 {
        let h = level(hidden, j - 1)?;
        let z = ctx.linear(&format!("heads.kernel{j}.l1"), h)?.relu();
        out.push(ctx.linear(&format!("heads.kernel{j}.l2"), z)?);
    }
    Ok([out[0], out[1], out[2]])
}

/// Referring logits `[T, K]` from the last decoder level.
pub fn referring_logits<'t>(ctx: &Ctx<'t>, hidden: Var<'t>) -> Result<Var<'t>> {
    let h = level(hidden, DECODER_LAYERS - 1)?;
    let s = h.shape();
    ctx.linear("heads.ref", h)?.reshape(&[s[0], s[1]])
}

/// Referring scores `[T, K]` in (0, 1).
pub fn referring_head<'t>(ctx: &Ctx<'t>, hidden: Var<'t>) -> Result<Var<'t>> {
    Ok(referring_logits(ctx, hidden)?.sigmoid())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tape;
    use crate::config::Config;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small() -> ModelConfig {
        let mut m = Config::desk().model;
        m.d_model = 16;
        m.heads = 2;
        m.candidates = 4;
        m
    }

    fn params(cfg: &ModelConfig, seed: u64) -> ParamSet {
        let mut ps = ParamSet::new();
        init(cfg, &mut ps, &mut ChaCha8Rng::seed_from_u64(seed));
        // Non-zero biases so degenerate-weight tests are meaningful.
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
        for (name, t) in ps.iter_mut() {
            if name.ends_with(".b") {
                *t = Tensor::randn(t.shape(), 0.1, &mut rng);
            }
        }
        ps
    }

    #[test]
    fn sine_origin_and_determinism() {
        let p = sine_pos_2d(4, 5, 16).unwrap();
        let row0 = &p.data()[..16];
        for (i, v) in row0.iter().enumerate() {
            assert_eq!(*v, if i % 2 == 0 { 0.0 } else { 1.0 });
        }
        assert_eq!(p, sine_pos_2d(4, 5, 16).unwrap());
        assert!(sine_pos_2d(4, 4, 6).is_err());
    }

    #[test]
    fn sine_positions_are_distinct() {
        let (h, w, c) = (64, 64, 8);
        let p = sine_pos_2d(h, w, c).unwrap();
        let rows: Vec<&[f64]> = p.data().chunks(c).collect();
        for i in 0..rows.len() {
            for j in i + 1..rows.len() {
                let d: f64 = rows[i].iter().zip(rows[j]).map(|(a, b)| (a - b).powi(2)).sum();
                assert!(d > 0.0, "positions {i} and {j} collide");
            }
        }
    }

    #[test]
    fn encoder_preserves_shape_and_frames() {
        let cfg = small();
        let ps = params(&cfg, 1);
        let tape = Tape::inference();
        let ctx = Ctx::new(&tape, &ps);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let frame = Tensor::randn(&[1, 7, 16], 1.0, &mut rng);
        let x = ctx.constant(frame.clone()).index_select(0, &[0, 0]).unwrap();
        let pos = joint_positions((2, 2), 3, 16).unwrap();
        let out = encode_alignment(&ctx, &cfg, x, &pos).unwrap();
        assert_eq!(out.shape(), vec![2, 7, 16]);
        let o = out.to_tensor();
        assert_eq!(&o.data()[..7 * 16], &o.data()[7 * 16..]);
    }

    #[test]
    fn zero_value_weights_reduce_cross_attention_to_layer_norm() {
        let cfg = small();
        let mut ps = params(&cfg, 3);
        for n in ["align.dec0.cross.v.w", "align.dec0.cross.v.b", "align.dec0.cross.o.b"] {
            ps.get_mut(n).unwrap().data_mut().fill(0.0);
        }
        let tape = Tape::inference();
        let ctx = Ctx::new(&tape, &ps);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let o = ctx.constant(Tensor::randn(&[2, 4, 16], 1.0, &mut rng));
        let mem = ctx.constant(Tensor::randn(&[2, 6, 16], 1.0, &mut rng));
        let zero_pos = ctx.constant(Tensor::zeros(&[6, 16]));
        // Reproduce the first half of the layer by hand.
        let sa = multi_head_attention(&ctx, "align.dec0.self", 2, o, o, o).unwrap();
        let o1 = ctx.layer_norm("align.dec0.ln1", o.add(sa.out).unwrap()).unwrap();
        let ca = multi_head_attention(&ctx, "align.dec0.cross", 2, o1, mem.add(zero_pos).unwrap(), mem).unwrap();
        assert!(ca.out.to_tensor().data().iter().all(|&v| v == 0.0));
        let o2 = ctx.layer_norm("align.dec0.ln2", o1.add(ca.out).unwrap()).unwrap();
        let expected = ctx.layer_norm("align.dec0.ln2", o1).unwrap();
        assert_eq!(o2.to_tensor(), expected.to_tensor());
    }

    #[test]
    fn attention_rows_are_distributions() {
        let cfg = small();
        let ps = params(&cfg, 5);
        let tape = Tape::inference();
        let ctx = Ctx::new(&tape, &ps);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = ctx.constant(Tensor::randn(&[2, 9, 16], 3.0, &mut rng));
        let att = multi_head_attention(&ctx, "align.enc0.attn", 2, x, x, x).unwrap();
        for row in att.weights.to_tensor().data().chunks(9) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
        }
    }

    #[test]
    fn hidden_and_heads_shapes() {
        let cfg = small();
        let ps = params(&cfg, 7);
        let tape = Tape::inference();
        let ctx = Ctx::new(&tape, &ps);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = ctx.constant(Tensor::randn(&[3, 7, 16], 1.0, &mut rng));
        let pos = joint_positions((2, 2), 3, 16).unwrap();
        let q = candidate_queries(&ctx, 3).unwrap();
        let h = decode_queries(&ctx, &cfg, q, x, &pos).unwrap();
        assert_eq!(h.shape(), vec![3, 3, 4, 16]);
        let z = kernel_heads(&ctx, h).unwrap();
        for zj in z {
            assert_eq!(zj.shape(), vec![3, 4, cfg.c0]);
        }
        let r = referring_head(&ctx, h).unwrap();
        assert_eq!(r.shape(), vec![3, 4]);
        assert!(r.to_tensor().data().iter().all(|&v| v > 0.0 && v < 1.0));
    }

    #[test]
    fn zero_heads() {
        let cfg = small();
        let mut ps = params(&cfg, 9);
        for (name, t) in ps.iter_mut() {
            if name.starts_with("heads.") {
                t.data_mut().fill(0.0);
            }
        }
        let tape = Tape::inference();
        let ctx = Ctx::new(&tape, &ps);
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let h = ctx.constant(Tensor::randn(&[3, 2, 4, 16], 1.0, &mut rng));
        for z in kernel_heads(&ctx, h).unwrap() {
            assert!(z.to_tensor().data().iter().all(|&v| v == 0.0));
        }
        let r = referring_head(&ctx, h).unwrap().to_tensor();
        assert!(r.data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn kernel_heads_commute_with_candidate_permutation() {
        let cfg = small();
        let ps = params(&cfg, 11);
        let tape = Tape::inference();
        let ctx = Ctx::new(&tape, &ps);
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let h = ctx.constant(Tensor::randn(&[3, 2, 4, 16], 1.0, &mut rng));
        let perm = [2, 0, 3, 1];
        let hp = h.index_select(2, &perm).unwrap();
        let z = kernel_heads(&ctx, h).unwrap();
        let zp = kernel_heads(&ctx, hp).unwrap();
        for j in 0..3 {
            assert_eq!(z[j].index_select(1, &perm).unwrap().to_tensor(), zp[j].to_tensor());
        }
    }
}
