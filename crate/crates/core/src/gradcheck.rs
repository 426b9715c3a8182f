//! Central finite-difference gradient checking.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::autodiff::{Tape, Var};
use crate::config::Config;
use crate::decoder;
use crate::error::{Error, Result};
use crate::losses;
use crate::params::{Bound, Ctx, ParamSet};
use crate::tensor::Tensor;

#[derive(Clone, Debug, Serialize)]
pub struct GradReport {
    pub op: String,
    pub max_rel_error: f64,
    /// Worst relative error per input tensor.
    pub per_input: Vec<f64>,
    pub checked: usize,
    /// `(input, entry, analytic, numeric)` at the largest error.
    pub worst: Option<(usize, usize, f64, f64)>,
}

impl GradReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_error <= tol
    }
}

/// Below this magnitude the error is measured in absolute terms: central
/// differences of a sum over thousands of entries carry roundoff of about
/// `1e-14 / h`, which swamps the relative error of near-zero entries.
pub const MAGNITUDE_FLOOR: f64 = 1e-3;

const KINK_TOLERANCE: f64 = 5e-5;
const MAX_SHRINKS: usize = 1;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(MAGNITUDE_FLOOR)
}

/// Gradient check configuration. By default every entry of every input is
/// perturbed; `sample` limits large inputs to a random subset of entries.
#[derive(Clone, Debug)]
pub struct GradCheck {
    pub h: f64,
    pub max_entries: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheck {
    fn default() -> Self {
        GradCheck {
            h: 1e-5,
            max_entries: None,
            seed: 0,
        }
    }
}

impl GradCheck {
    pub fn sample(mut self, max_entries: usize, seed: u64) -> Self {
        self.max_entries = Some(max_entries);
        self.seed = seed;
        self
    }

    pub fn run<F>(&self, op: &str, inputs: &[Tensor], f: F) -> Result<GradReport>
    where
        F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
    {
        let eval = |xs: &[Tensor]| -> Result<f64> {
            let tape = Tape::inference();
            let vars: Vec<Var<'_>> = xs.iter().map(|t| tape.constant(t.clone())).collect();
            let out = f(&tape, &vars)?;
            scalar(op, out)
        };

        let analytic: Vec<Tensor> = {
            let tape = Tape::new();
            let vars: Vec<Var<'_>> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
            let out = f(&tape, &vars)?;
            scalar(op, out)?;
            let grads = tape.backward(out)?;
            vars.iter().map(|&v| grads.tensor(v)).collect()
        };

        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let mut work: Vec<Tensor> = inputs.to_vec();
        let mut per_input = Vec::with_capacity(inputs.len());
        let mut checked = 0;
        let mut worst_entry: Option<(usize, usize, f64, f64)> = None;
        let mut worst_all = -1.0;
        for (i, input) in inputs.iter().enumerate() {
            let n = input.numel();
            let entries: Vec<usize> = match self.max_entries {
                Some(m) if m < n => sample(&mut rng, n, m).into_vec(),
                _ => (0..n).collect(),
            };
            let mut worst: f64 = 0.0;
            for j in entries {
                let orig = input.data()[j];
                let mut at = |x: f64| -> Result<f64> {
                    work[i].data_mut()[j] = x;
                    let v = eval(&work);
                    work[i].data_mut()[j] = orig;
                    v
                };
                let mut central = |h: f64| -> Result<f64> { Ok((at(orig + h)? - at(orig - h)?) / (2.0 * h)) };
                let mut h = self.h;
                let mut numeric = central(h)?;
                for _ in 0..MAX_SHRINKS {
                    // For a smooth function halving h changes the estimate by
                    // O(h²); a larger change means a kink lies within ±h.
                    let half = central(h / 2.0)?;
                    if relative_error(numeric, half) <= KINK_TOLERANCE {
                        break;
                    }
                    h /= 10.0;
                    numeric = central(h)?;
                }
                let err = relative_error(analytic[i].data()[j], numeric);
                worst = worst.max(err);
                if err > worst_all {
                    worst_all = err;
                    worst_entry = Some((i, j, analytic[i].data()[j], numeric));
                }
                checked += 1;
            }
            per_input.push(worst);
        }
        Ok(GradReport {
            op: op.to_string(),
            max_rel_error: per_input.iter().copied().fold(0.0, f64::max),
            per_input,
            checked,
            worst: worst_entry,
        })
    }
}

/// Check every entry of every input with step `h`.
pub fn grad_check<F>(op: &str, inputs: &[Tensor], h: f64, f: F) -> Result<GradReport>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    GradCheck { h, ..GradCheck::default() }.run(op, inputs, f)
}

/// Dimensions of the composed decoder-path check.
#[derive(Clone, Copy, Debug)]
pub struct PathDims {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub candidates: usize,
    pub d_model: usize,
}

impl Default for PathDims {
    fn default() -> Self {
        PathDims {
            frames: 2,
            height: 32,
            width: 32,
            candidates: 4,
            d_model: 32,
        }
    }
}

/// Values bounded away from zero, so kinks (`relu`, `abs`) and poles
/// (`ln`, `div`) stay more than a step away.
fn off_zero(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape, |_| {
        let m = rng.random_range(0.2..1.5);
        if rng.random_bool(0.5) {
            m
        } else {
            -m
        }
    })
}

fn positive(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(0.3..2.0))
}

fn binary(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_bool(0.4) as u8 as f64)
}

/// Contract an output with fixed random weights so every output entry
/// contributes to the scalar being differentiated.
fn project<'t>(tape: &'t Tape, out: Var<'t>, seed: u64) -> Result<Var<'t>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = Tensor::randn(&out.shape(), 1.0, &mut rng);
    Ok(out.mul(tape.constant(w))?.sum_all())
}

/// Gradient checks of every differentiable primitive and loss, plus the
/// composed stacked-attention → stacked-FFN → mask path at `dims`.
pub fn suite(seed: u64, dims: PathDims) -> Result<Vec<GradReport>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let gc = GradCheck::default();
    let ps = seed.wrapping_mul(31).wrapping_add(7);
    let mut out = Vec::new();

    type Unary = for<'t> fn(Var<'t>) -> Var<'t>;
    let unary: [(&str, Unary, bool); 11] = [
        ("sigmoid", |x| x.sigmoid(), false),
        ("log_sigmoid", |x| x.log_sigmoid(), false),
        ("relu", |x| x.relu(), false),
        ("exp", |x| x.exp(), false),
        ("ln", |x| x.ln(), true),
        ("sqrt", |x| x.sqrt(), true),
        ("abs", |x| x.abs(), false),
        ("square", |x| x.square(), false),
        ("powf", |x| x.powf(2.5), true),
        ("clamp", |x| x.clamp(-0.1, 0.1).add(x.scale(0.5)).expect("same shape"), false),
        ("neg_scale_shift", |x| x.neg().scale(1.7).add_scalar(0.3), false),
    ];
    for (name, f, pos) in unary {
        let x = if pos { positive(&[3, 4], &mut rng) } else { off_zero(&[3, 4], &mut rng) };
        out.push(gc.run(name, &[x], |tape, v| project(tape, f(v[0]), ps))?);
    }

    type Binary = for<'t> fn(Var<'t>, Var<'t>) -> Result<Var<'t>>;
    let binary_ops: [(&str, Binary); 4] = [
        ("add", |a, b| a.add(b)),
        ("sub", |a, b| a.sub(b)),
        ("mul", |a, b| a.mul(b)),
        ("div", |a, b| a.div(b)),
    ];
    for (name, f) in binary_ops {
        let a = off_zero(&[2, 3, 4], &mut rng);
        let b = off_zero(&[3, 1], &mut rng);
        out.push(gc.run(&format!("{name}_broadcast"), &[a, b], |tape, v| project(tape, f(v[0], v[1])?, ps))?);
    }

    let a = off_zero(&[2, 3, 4], &mut rng);
    let b = off_zero(&[4, 5], &mut rng);
    out.push(gc.run("matmul", &[a.clone(), b.clone()], |tape, v| project(tape, v[0].matmul(v[1])?, ps))?);
    out.push(gc.run("matmul_exact", &[a, b], |tape, v| project(tape, v[0].matmul_exact(v[1])?, ps))?);

    let x = off_zero(&[2, 3, 6], &mut rng);
    let w = off_zero(&[3, 2, 2], &mut rng);
    out.push(gc.run("grouped_linear", &[x, w], |tape, v| project(tape, v[0].grouped_linear(v[1], 3)?, ps))?);

    let x = off_zero(&[3, 5], &mut rng);
    out.push(gc.run("softmax_last", &[x], |tape, v| project(tape, v[0].softmax_last(), ps))?);

    let x = off_zero(&[3, 6], &mut rng);
    let g = off_zero(&[6], &mut rng);
    let b = off_zero(&[6], &mut rng);
    out.push(gc.run("layer_norm", &[x.clone(), g.clone(), b.clone()], |tape, v| {
        project(tape, v[0].layer_norm(v[1], v[2])?, ps)
    })?);
    out.push(gc.run("layer_norm_exact", &[x, g, b], |tape, v| {
        project(tape, v[0].layer_norm_exact(v[1], v[2])?, ps)
    })?);

    let x = off_zero(&[2, 3, 3, 2], &mut rng);
    out.push(gc.run("bilinear_upsample", &[x], |tape, v| project(tape, v[0].bilinear_upsample(7, 5)?, ps))?);

    let x = off_zero(&[2, 3, 4], &mut rng);
    out.push(gc.run("layout", &[x], |tape, v| {
        let y = v[0].permute(&[2, 0, 1])?.reshape(&[4, 6])?.transpose_last()?;
        let y = y.narrow(0, 1, 4)?.index_select(1, &[3, 0, 0, 2])?;
        let z = tape.concat(&[y, y.scale(2.0)], 1)?;
        project(tape, z.sum_last(), ps)?.add(v[0].mean_all())
    })?);

    let x = off_zero(&[4, 6], &mut rng);
    out.push(gc.run("dropout", &[x], |tape, v| {
        let mut r = ChaCha8Rng::seed_from_u64(ps);
        project(tape, tape.dropout(v[0], 0.3, &mut r), ps)
    })?);

    let p = Tensor::from_fn(&[3, 8], |_| rng.random_range(0.05..0.95));
    let gt = binary(&[3, 8], &mut rng);
    let g = gt.clone();
    out.push(gc.run("dice_loss", &[p], move |tape, v| project(tape, losses::dice_loss(v[0], &g)?, ps))?);
    let l = off_zero(&[3, 8], &mut rng);
    let g = gt.clone();
    out.push(gc.run("focal_loss", std::slice::from_ref(&l), move |tape, v| {
        project(tape, losses::focal_loss(v[0], &g, 0.25, 2.0)?, ps)
    })?);
    out.push(gc.run("bce_with_logits", &[l], move |tape, v| {
        project(tape, losses::bce_with_logits(v[0], &gt)?, ps)
    })?);
    let z1 = off_zero(&[2, 3, 4], &mut rng);
    let z2 = off_zero(&[2, 3, 4], &mut rng);
    let wd = off_zero(&[4, 4], &mut rng);
    out.push(gc.run("diversity_loss", &[z1, z2, wd], |_, v| losses::diversity_loss(&v[..2], v[2]))?);

    out.push(decoder_path(seed, dims)?);
    Ok(out)
}

/// Gradient of `Σ W ⊙ σ(masks)` through both stacked transformers and the
/// dynamic convolution, with respect to every decoder parameter and input.
pub fn decoder_path(seed: u64, dims: PathDims) -> Result<GradReport> {
    decoder_path_with(seed, dims, GradCheck::default().sample(24, seed))
}

pub fn decoder_path_with(seed: u64, dims: PathDims, check: GradCheck) -> Result<GradReport> {
    let mut cfg = Config::desk().model;
    cfg.frames = dims.frames;
    cfg.height = dims.height;
    cfg.width = dims.width;
    cfg.candidates = dims.candidates;
    cfg.d_model = dims.d_model;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let mut params = ParamSet::new();
    decoder::init(&cfg, &mut params, &mut rng);
    let names: Vec<String> = params.names().map(str::to_string).collect();
    let mut inputs: Vec<Tensor> = params
        .iter()
        .map(|(n, t)| {
            if n.ends_with(".b") || n.ends_with(".b1") || n.ends_with(".b2") {
                Tensor::randn(t.shape(), 0.1, &mut rng)
            } else {
                t.clone()
            }
        })
        .collect();
    let (t, k) = (cfg.frames, cfg.candidates);
    let g4 = (cfg.height / 4, cfg.width / 4);
    let g8 = (g4.0 / 2, g4.1 / 2);
    let g16 = (g8.0 / 2, g8.1 / 2);
    let np = inputs.len();
    inputs.push(Tensor::randn(&[t, g4.0 * g4.1, cfg.c1], 1.0, &mut rng));
    inputs.push(Tensor::randn(&[t, g8.0 * g8.1, cfg.c2], 1.0, &mut rng));
    inputs.push(Tensor::randn(&[t, g16.0 * g16.1, cfg.d_model], 1.0, &mut rng));
    for _ in 0..3 {
        inputs.push(Tensor::randn(&[t, k, cfg.c0], 0.5, &mut rng));
    }
    let [s1, s2] = decoder::stages(&cfg);
    let weights = Tensor::randn(&[t, k, cfg.height, cfg.width], 1.0, &mut rng);
    check
        .run("decoder_path", &inputs, |tape, v| {
            let bound = Bound::from_vars(names.iter().cloned().zip(v[..np].iter().copied()));
            let ctx = Ctx::from_bound(tape, bound);
            let (f4, f8, x, z1, z2, z3) = (v[np], v[np + 1], v[np + 2], v[np + 3], v[np + 4], v[np + 5]);
            let x8 = decoder::stacked_attention(&ctx, &s1, f8, g8, x, g16, z1)?;
            let x8 = decoder::stacked_ffn(&ctx, &s1, x8, k)?;
            let x4 = decoder::stacked_attention(&ctx, &s2, f4, g4, x8, g8, z2)?;
            let x4 = decoder::stacked_ffn(&ctx, &s2, x4, k)?;
            let m = decoder::decode_masks(&ctx, x4, g4, z3, (cfg.height, cfg.width))?;
            Ok(m.probs.mul(tape.constant(weights.clone()))?.sum_all())
        })
}

fn scalar(op: &str, v: Var<'_>) -> Result<f64> {
    let t = v.value();
    if t.numel() != 1 {
        return Err(Error::contract("grad_check", format!("{op} must return a scalar, got {:?}", t.shape())));
    }
    Ok(t.data()[0])
}
