//! Set-matching losses: Hungarian assignment of candidates to ground-truth
//! objects, mask and referring supervision, and the kernel diversity term.

use crate::autodiff::Var;
use crate::config::LossWeights;
use crate::error::{Error, Result};
use crate::hungarian::{hungarian, CostMatrix, MatchResult};
use crate::tensor::Tensor;

pub const DICE_EPS: f64 = 1.0;

/// Ground truth for one clip: every annotated object, with referring flags
/// that are 1 in the frames where the object is referred and visible.
#[derive(Clone, Debug, PartialEq)]
pub struct GroundTruth {
    /// `[N, T, H, W]`, entries 0 or 1.
    pub masks: Tensor,
    /// `[N, T]`, entries 0 or 1.
    pub flags: Tensor,
}

impl GroundTruth {
    pub fn new(masks: Tensor, flags: Tensor) -> Result<Self> {
        let ms = masks.shape();
        let fs = flags.shape();
        if ms.len() != 4 || fs.len() != 2 || ms[0] != fs[0] || ms[1] != fs[1] {
            return Err(Error::shape("ground_truth", ms, fs));
        }
        if masks.data().iter().chain(flags.data()).any(|&v| v != 0.0 && v != 1.0) {
            return Err(Error::contract("ground_truth", "masks and flags must be binary"));
        }
        Ok(GroundTruth { masks, flags })
    }

    pub fn objects(&self) -> usize {
        self.masks.shape()[0]
    }

    pub fn frames(&self) -> usize {
        self.masks.shape()[1]
    }

    pub fn pixels(&self) -> usize {
        self.masks.shape()[2] * self.masks.shape()[3]
    }
}

/// `(2Σpg + ε) / (Σp + Σg + ε)`.
pub fn dice_coefficient(p: &[f64], g: &[f64]) -> f64 {
    let (mut inter, mut sp, mut sg) = (0.0, 0.0, 0.0);
    for (&a, &b) in p.iter().zip(g) {
        inter += a * b;
        sp += a;
        sg += b;
    }
    (2.0 * inter + DICE_EPS) / (sp + sg + DICE_EPS)
}

fn check_rows(op: &'static str, x: Var<'_>, g: &Tensor) -> Result<()> {
    if x.shape() != g.shape() || g.rank() != 2 {
        return Err(Error::shape(op, &x.shape(), g.shape()));
    }
    Ok(())
}

/// Dice loss of each row of `[R, P]` probabilities against binary targets.
pub fn dice_loss<'t>(p: Var<'t>, g: &Tensor) -> Result<Var<'t>> {
    check_rows("dice_loss", p, g)?;
    let tape = p.tape();
    let gv = tape.constant(g.clone());
    let g_sum = tape.constant(Tensor::from_fn(&[g.shape()[0]], |r| {
        g.data()[r * g.shape()[1]..(r + 1) * g.shape()[1]].iter().sum()
    }));
    let num = p.mul(gv)?.sum_last().scale(2.0).add_scalar(DICE_EPS);
    let den = p.sum_last().add(g_sum)?.add_scalar(DICE_EPS);
    Ok(num.div(den)?.neg().add_scalar(1.0))
}

/// Per-row mean focal loss of `[R, P]` logits against binary targets.
pub fn focal_loss<'t>(logits: Var<'t>, g: &Tensor, alpha: f64, gamma: f64) -> Result<Var<'t>> {
    check_rows("focal_loss", logits, g)?;
    let tape = logits.tape();
    let pos = tape.constant(Tensor::from_fn(g.shape(), |i| alpha * g.data()[i]));
    let neg = tape.constant(Tensor::from_fn(g.shape(), |i| (1.0 - alpha) * (1.0 - g.data()[i])));
    let p = logits.sigmoid();
    let q = logits.neg().sigmoid();
    let (p_mod, q_mod) = if gamma == 0.0 { (None, None) } else { (Some(p.powf(gamma)), Some(q.powf(gamma))) };
    let mut a = logits.log_sigmoid().mul(pos)?;
    if let Some(q_mod) = q_mod {
        a = a.mul(q_mod)?;
    }
    let mut b = logits.neg().log_sigmoid().mul(neg)?;
    if let Some(p_mod) = p_mod {
        b = b.mul(p_mod)?;
    }
    Ok(a.add(b)?.sum_last().scale(-1.0 / g.shape()[1] as f64))
}

/// Elementwise `−[y ln σ(l) + (1−y) ln(1−σ(l))]`.
pub fn bce_with_logits<'t>(logits: Var<'t>, target: &Tensor) -> Result<Var<'t>> {
    if logits.shape() != target.shape() {
        return Err(Error::shape("bce", &logits.shape(), target.shape()));
    }
    let tape = logits.tape();
    let y = tape.constant(target.clone());
    let not_y = tape.constant(Tensor::from_fn(target.shape(), |i| 1.0 - target.data()[i]));
    Ok(logits
        .log_sigmoid()
        .mul(y)?
        .add(logits.neg().log_sigmoid().mul(not_y)?)?
        .neg())
}

/// `C_match` for candidate `k` against object `n`, from mask probabilities
/// `[T, K, H, W]` and referring scores `[T, K]`.
pub fn matching_cost(probs: &Tensor, scores: &Tensor, k: usize, gt: &GroundTruth, n: usize, w: &LossWeights) -> f64 {
    let (t, kk) = (gt.frames(), probs.shape()[1]);
    let px = gt.pixels();
    let mut dice = 0.0;
    let mut refer = 0.0;
    for f in 0..t {
        let p = &probs.data()[(f * kk + k) * px..(f * kk + k + 1) * px];
        let g = &gt.masks.data()[(n * t + f) * px..(n * t + f + 1) * px];
        dice += dice_coefficient(p, g);
        refer += gt.flags.data()[n * t + f] * scores.data()[f * kk + k];
    }
    -w.dice * dice / t as f64 - w.reference * refer / t as f64
}

pub fn cost_matrix(probs: &Tensor, scores: &Tensor, gt: &GroundTruth, w: &LossWeights) -> CostMatrix {
    let k = probs.shape()[1];
    CostMatrix::from_fn(gt.objects(), k, |n, c| matching_cost(probs, scores, c, gt, n, w))
}

fn check_prediction(mask_logits: Var<'_>, ref_logits: Var<'_>, gt: &GroundTruth) -> Result<usize> {
    let ms = mask_logits.shape();
    let gs = gt.masks.shape();
    if ms.len() != 4 || ms[0] != gs[1] || ms[2] != gs[2] || ms[3] != gs[3] {
        return Err(Error::shape("losses", &ms, gs));
    }
    if ref_logits.shape() != [ms[0], ms[1]] {
        return Err(Error::shape("losses", &ref_logits.shape(), &ms[..2]));
    }
    if gt.objects() > ms[1] {
        return Err(Error::contract(
            "losses",
            format!("{} objects exceed {} candidates", gt.objects(), ms[1]),
        ));
    }
    Ok(ms[1])
}

/// `Σ_pairs Σ_t (λ_dice·L_dice + λ_focal·L_focal)` over matched pairs.
pub fn mask_loss<'t>(mask_logits: Var<'t>, gt: &GroundTruth, m: &MatchResult, w: &LossWeights) -> Result<Var<'t>> {
    let tape = mask_logits.tape();
    if m.assignment.is_empty() {
        return Ok(tape.constant(Tensor::scalar(0.0)));
    }
    let (t, px) = (gt.frames(), gt.pixels());
    let rows = m.assignment.len() * t;
    // [T, M, H, W] -> [M, T, H, W] -> [M·T, P], matching the ground-truth order.
    let l = mask_logits
        .index_select(1, &m.assignment)?
        .permute(&[1, 0, 2, 3])?
        .reshape(&[rows, px])?;
    let g = gt.masks.reshape(&[rows, px])?;
    let dice = dice_loss(l.sigmoid(), &g)?.sum_all().scale(w.dice);
    let focal = focal_loss(l, &g, w.focal_alpha, w.focal_gamma)?.sum_all().scale(w.focal);
    dice.add(focal)
}

/// Weighted referring BCE: matched candidates against their flags, all
/// other candidates against 0 with weight `w.negative`; scaled by `λ_ref`.
pub fn ref_loss<'t>(ref_logits: Var<'t>, gt: &GroundTruth, m: &MatchResult, w: &LossWeights) -> Result<Var<'t>> {
    let s = ref_logits.shape();
    let (t, k) = (s[0], s[1]);
    let mut target = Tensor::zeros(&[t, k]);
    let mut weight = Tensor::full(&[t, k], w.negative);
    for (n, &c) in m.assignment.iter().enumerate() {
        for f in 0..t {
            target.set(&[f, c], gt.flags.at(&[n, f]));
            weight.set(&[f, c], 1.0);
        }
    }
    let weight = ref_logits.tape().constant(weight);
    Ok(bce_with_logits(ref_logits, &target)?.mul(weight)?.sum_all().scale(w.reference))
}

/// `Σ_t Σ_j ‖Z_{j,t} W Z_{j,t}ᵀ − I‖_F + ‖W‖₁` with kernels `[T, K, C₀]`.
pub fn diversity_loss<'t>(kernels: &[Var<'t>], w_div: Var<'t>) -> Result<Var<'t>> {
    let tape = w_div.tape();
    let mut total = w_div.abs().sum_all();
    for z in kernels {
        let s = z.shape();
        let (t, k) = (s[0], s[1]);
        let eye = tape.constant(Tensor::eye(k));
        let gram = z.matmul(w_div)?.matmul(z.transpose_last()?)?.sub(eye)?;
        let fro = gram.square().reshape(&[t, k * k])?.sum_last().sqrt();
        total = total.add(fro.sum_all())?;
    }
    Ok(total)
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    pub mask: f64,
    pub reference: f64,
    pub diversity: f64,
    pub total: f64,
}

pub struct Losses<'t> {
    pub mask: Var<'t>,
    pub reference: Var<'t>,
    pub diversity: Var<'t>,
    pub total: Var<'t>,
    pub matching: MatchResult,
}

impl Losses<'_> {
    pub fn breakdown(&self) -> LossBreakdown {
        LossBreakdown {
            mask: self.mask.item(),
            reference: self.reference.item(),
            diversity: self.diversity.item(),
            total: self.total.item(),
        }
    }
}

/// Match, then `L = L_mask + L_ref + λ_div·L_div`.
pub fn total_loss<'t>(
    mask_logits: Var<'t>,
    ref_logits: Var<'t>,
    kernels: &[Var<'t>],
    w_div: Var<'t>,
    gt: &GroundTruth,
    w: &LossWeights,
) -> Result<Losses<'t>> {
    check_prediction(mask_logits, ref_logits, gt)?;
    let sigmoid = |v: Var<'t>| {
        let x = v.value();
        Tensor::from_fn(x.shape(), |i| crate::kernels::sigmoid(x.data()[i]))
    };
    let probs = sigmoid(mask_logits);
    let scores = sigmoid(ref_logits);
    let matching = hungarian(&cost_matrix(&probs, &scores, gt, w))?;
    let mask = mask_loss(mask_logits, gt, &matching, w)?;
    let reference = ref_loss(ref_logits, gt, &matching, w)?;
    let diversity = diversity_loss(kernels, w_div)?;
    let total = mask.add(reference)?.add(diversity.scale(w.diversity))?;
    Ok(Losses {
        mask,
        reference,
        diversity,
        total,
        matching,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tape;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn logit(p: f64) -> f64 {
        (p / (1.0 - p)).ln()
    }

    #[test]
    fn dice_closed_forms() {
        let tape = Tape::new();
        let g = Tensor::from_fn(&[1, 16], |i| (i < 8) as u8 as f64);
        assert_eq!(dice_loss(tape.constant(g.clone()), &g).unwrap().item(), 0.0);
        let disjoint = Tensor::from_fn(&[1, 16], |i| (i >= 8) as u8 as f64);
        assert_eq!(dice_loss(tape.constant(disjoint), &g).unwrap().item(), 16.0 / 17.0);
        let full = tape.constant(Tensor::ones(&[1, 16]));
        assert!((dice_loss(full, &g).unwrap().item() - 0.32).abs() <= 1e-15);
    }

    #[test]
    fn focal_closed_forms() {
        let tape = Tape::new();
        let one = Tensor::ones(&[1, 1]);
        let l = tape.constant(Tensor::zeros(&[1, 1]));
        let v = focal_loss(l, &one, 0.25, 2.0).unwrap().item();
        assert!((v - (-0.25 * 0.25 * 0.5f64.ln())).abs() <= 1e-15);
        assert!((v - 0.04332).abs() < 1e-5);
        let sure = tape.constant(Tensor::full(&[1, 1], logit(0.999)));
        assert!(focal_loss(sure, &one, 0.25, 2.0).unwrap().item() < 1e-5);
    }

    #[test]
    fn focal_without_focusing_is_half_bce() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let tape = Tape::new();
        let l = Tensor::randn(&[3, 10], 2.0, &mut rng);
        let g = Tensor::from_fn(&[3, 10], |_| rng.random_bool(0.5) as u8 as f64);
        let f = focal_loss(tape.constant(l.clone()), &g, 0.5, 0.0).unwrap().to_tensor();
        for r in 0..3 {
            let bce: f64 = (0..10)
                .map(|i| {
                    let p = 1.0 / (1.0 + (-l.at(&[r, i])).exp());
                    let y = g.at(&[r, i]);
                    -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
                })
                .sum::<f64>()
                / 10.0;
            assert!((f.data()[r] - 0.5 * bce).abs() <= 1e-12);
        }
    }

    fn one_object(t: usize, side: usize, flags: &[f64]) -> GroundTruth {
        let masks = Tensor::from_fn(&[1, t, side, side], |i| (i % 3 == 0) as u8 as f64);
        GroundTruth::new(masks, Tensor::new(&[1, t], flags.to_vec()).unwrap()).unwrap()
    }

    #[test]
    fn matching_cost_extremes() {
        let w = LossWeights::default();
        let gt = GroundTruth::new(Tensor::ones(&[1, 2, 2, 2]), Tensor::ones(&[1, 2])).unwrap();
        let probs = Tensor::ones(&[2, 1, 2, 2]);
        assert_eq!(matching_cost(&probs, &Tensor::ones(&[2, 1]), 0, &gt, 0, &w), -10.0);
        let zero_ref = matching_cost(&probs, &Tensor::zeros(&[2, 1]), 0, &gt, 0, &w);
        assert_eq!(zero_ref, -5.0);
    }

    #[test]
    fn referring_loss_closed_forms() {
        let w = LossWeights::default();
        let tape = Tape::new();
        let gt = one_object(3, 2, &[1.0, 1.0, 1.0]);
        let m = MatchResult {
            assignment: vec![0],
            cost: 0.0,
        };
        let sure = tape.constant(Tensor::from_fn(&[3, 2], |i| if i % 2 == 0 { logit(1.0 - 1e-9) } else { 0.0 }));
        let v = ref_loss(sure, &gt, &m, &w).unwrap().item();
        let unmatched = 0.1 * 5.0 * 3.0 * std::f64::consts::LN_2;
        assert!((v - unmatched).abs() < 1e-7, "{v} vs {unmatched}");
    }

    #[test]
    fn empty_ground_truth_has_no_mask_loss() {
        let tape = Tape::new();
        let gt = GroundTruth::new(Tensor::zeros(&[0, 2, 4, 4]), Tensor::zeros(&[0, 2])).unwrap();
        let logits = tape.leaf(Tensor::zeros(&[2, 3, 4, 4]));
        let refs = tape.leaf(Tensor::zeros(&[2, 3]));
        let z = tape.leaf(Tensor::eye(3).reshape(&[1, 3, 3]).unwrap());
        let wd = tape.leaf(Tensor::eye(3));
        let l = total_loss(logits, refs, &[z], wd, &gt, &LossWeights::default()).unwrap();
        assert_eq!(l.mask.item(), 0.0);
        assert!(l.matching.assignment.is_empty());
    }

    #[test]
    fn diversity_closed_forms() {
        let tape = Tape::new();
        let c0 = 8;
        let w = tape.constant(Tensor::eye(c0));
        // Standard basis rows are orthonormal.
        let z = tape.constant(Tensor::from_fn(&[2, 4, c0], |i| ((i / c0) % 4 == i % c0) as u8 as f64));
        assert_eq!(diversity_loss(&[z, z, z], w).unwrap().item(), c0 as f64);
        let k = 5;
        let same = tape.constant(Tensor::from_fn(&[1, k, c0], |i| (i % c0 == 0) as u8 as f64));
        let v = diversity_loss(&[same], w).unwrap().item();
        assert!((v - (((k * k - k) as f64).sqrt() + c0 as f64)).abs() <= 1e-12);
    }

    #[test]
    fn losses_against_definitions() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let w = LossWeights::default();
        let (t, k, side) = (2, 4, 4);
        let px = side * side;
        let logits = Tensor::randn(&[t, k, side, side], 1.5, &mut rng);
        let refs = Tensor::randn(&[t, k], 1.0, &mut rng);
        let masks = Tensor::from_fn(&[2, t, side, side], |_| rng.random_bool(0.4) as u8 as f64);
        let gt = GroundTruth::new(masks, Tensor::new(&[2, t], vec![1.0, 0.0, 0.0, 0.0]).unwrap()).unwrap();
        let tape = Tape::new();
        let lv = tape.constant(logits.clone());
        let rv = tape.constant(refs.clone());
        let z = tape.constant(Tensor::randn(&[t, k, 3], 1.0, &mut rng));
        let wd = tape.constant(Tensor::randn(&[3, 3], 1.0, &mut rng));
        let out = total_loss(lv, rv, &[z], wd, &gt, &w).unwrap();

        let sig = |x: f64| 1.0 / (1.0 + (-x).exp());
        let prob = |f: usize, c: usize, i: usize| sig(logits.data()[(f * k + c) * px + i]);
        let gpx = |n: usize, f: usize, i: usize| gt.masks.data()[(n * t + f) * px + i];
        let mut mask = 0.0;
        for (n, &c) in out.matching.assignment.iter().enumerate() {
            for f in 0..t {
                let (mut inter, mut sp, mut sg, mut focal) = (0.0, 0.0, 0.0, 0.0);
                for i in 0..px {
                    let (p, g) = (prob(f, c, i), gpx(n, f, i));
                    inter += p * g;
                    sp += p;
                    sg += g;
                    focal += if g == 1.0 {
                        -0.25 * (1.0 - p).powi(2) * p.ln()
                    } else {
                        -0.75 * p.powi(2) * (1.0 - p).ln()
                    };
                }
                mask += 5.0 * (1.0 - (2.0 * inter + 1.0) / (sp + sg + 1.0)) + 2.0 * focal / px as f64;
            }
        }
        assert!((out.mask.item() - mask).abs() <= 1e-9);

        let mut refer = 0.0;
        for c in 0..k {
            let matched = out.matching.assignment.iter().position(|&a| a == c);
            for f in 0..t {
                let r = sig(refs.at(&[f, c]));
                let (y, wt) = match matched {
                    Some(n) => (gt.flags.at(&[n, f]), 1.0),
                    None => (0.0, 0.1),
                };
                refer += wt * -(y * r.ln() + (1.0 - y) * (1.0 - r).ln());
            }
        }
        assert!((out.reference.item() - 5.0 * refer).abs() <= 1e-9);
        let b = out.breakdown();
        assert_eq!(b.total, b.mask + b.reference + 0.07 * b.diversity);

        let mut w0 = w.clone();
        w0.diversity = 0.0;
        let out0 = total_loss(lv, rv, &[z], wd, &gt, &w0).unwrap().breakdown();
        assert_eq!(out0.total, out0.mask + out0.reference);
    }

    #[test]
    fn matching_cost_against_definition() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let w = LossWeights::default();
        let probs = Tensor::uniform(&[3, 5, 4, 4], 0.01, 0.99, &mut rng);
        let scores = Tensor::uniform(&[3, 5], 0.0, 1.0, &mut rng);
        let masks = Tensor::from_fn(&[2, 3, 4, 4], |_| rng.random_bool(0.5) as u8 as f64);
        let flags = Tensor::from_fn(&[2, 3], |_| rng.random_bool(0.5) as u8 as f64);
        let gt = GroundTruth::new(masks, flags).unwrap();
        let cm = cost_matrix(&probs, &scores, &gt, &w);
        for n in 0..2 {
            for k in 0..5 {
                let mut c = 0.0;
                for t in 0..3 {
                    let (mut i, mut sp, mut sg) = (0.0, 0.0, 0.0);
                    for y in 0..4 {
                        for x in 0..4 {
                            let p = probs.at(&[t, k, y, x]);
                            let g = gt.masks.at(&[n, t, y, x]);
                            i += p * g;
                            sp += p;
                            sg += g;
                        }
                    }
                    c -= 5.0 * (2.0 * i + 1.0) / (sp + sg + 1.0) / 3.0;
                    c -= 5.0 * gt.flags.at(&[n, t]) * scores.at(&[t, k]) / 3.0;
                }
                assert!((cm.at(n, k) - c).abs() <= 1e-9);
            }
        }
    }

    #[test]
    fn rejects_bad_ground_truth() {
        assert!(GroundTruth::new(Tensor::full(&[1, 1, 2, 2], 0.5), Tensor::ones(&[1, 1])).is_err());
        assert!(GroundTruth::new(Tensor::ones(&[1, 2, 2, 2]), Tensor::ones(&[1, 1])).is_err());
    }
}
