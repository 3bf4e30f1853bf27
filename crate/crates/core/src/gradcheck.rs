//! Finite-difference gradient checks in double precision.
//!
//! Every check builds a scalar objective `dot(y, r)` with a fixed random
//! projection `r` over the output `y`, so each output entry contributes to
//! the checked gradient. Inputs are registered as parameters; for each
//! trainable tensor a random subset of entries is perturbed by `±h` and the
//! central difference compared with the analytic gradient using the
//! norm-wise relative error `|a - n| / max(|a|, |n|, floor)`.
//!
//! ReLU-type ops, min/max and bilinear sampling are only piecewise smooth.
//! The graph records which piece every such op evaluates on; when `x ± h`
//! lands on a different piece the step is shrunk tenfold (twice at most),
//! then a one-sided difference on the smooth side is used; entries with
//! kinks on both sides are replaced by others.

use std::fmt;
use std::str::FromStr;

use crate::bbox::BBox;
use crate::dpblock::DpBlock;
use crate::error::{Error, Result};
use crate::graph::{BatchNormRefs, ConvOpts, Graph, Mode, Var};
use crate::params::{Builder, ParamGroup, ParamId, ParamKind, ParamStore};
use crate::prompters::{tokenize_prompt, IllumPrompter, PromptKind, PromptTokens, ViewPrompter};
use crate::rng::Rng;
use crate::tensor::Tensor;
use crate::tracker::{tracking_loss, Tracker, TrackerConfig};

/// Finite-difference step.
pub const STEP: f64 = 1e-4;
/// Steps tried in turn when `x ± h` falls on another smooth piece.
const KINK_STEPS: [f64; 3] = [STEP, STEP / 10.0, STEP / 100.0];
pub const OP_TOLERANCE: f64 = 1e-5;
pub const MODEL_TOLERANCE: f64 = 1e-4;
/// Gradient norms below this are compared in absolute terms, so exactly
/// zero gradients (a key bias under softmax) are not judged on rounding noise.
pub const ABS_FLOOR: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Scope {
    Ops,
    Prompters,
    Block,
    Model,
}

impl Scope {
    pub const ALL: [Scope; 4] = [Scope::Ops, Scope::Prompters, Scope::Block, Scope::Model];
}

impl FromStr for Scope {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ops" => Ok(Scope::Ops),
            "prompters" => Ok(Scope::Prompters),
            "block" => Ok(Scope::Block),
            "model" => Ok(Scope::Model),
            other => Err(Error::InvalidArgument(format!("unknown gradcheck scope {other:?}"))),
        }
    }
}

impl fmt::Display for Scope {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Scope::Ops => "ops",
            Scope::Prompters => "prompters",
            Scope::Block => "block",
            Scope::Model => "model",
        })
    }
}

/// Outcome for one tensor of one check.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheck {
    pub check: String,
    pub tensor: String,
    pub entries: usize,
    /// Entries dropped because even the smallest step crosses a kink.
    pub skipped: usize,
    /// Step reductions near kinks.
    pub shrunk: usize,
    pub rel_err: f64,
    pub tolerance: f64,
}

impl GradCheck {
    pub fn passed(&self) -> bool {
        self.entries > 0 && self.rel_err < self.tolerance
    }
}

impl fmt::Display for GradCheck {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} {}::{} ({} entries, {} skipped) rel_err {:.3e} < {:.0e}",
            if self.passed() { "PASS" } else { "FAIL" },
            self.check,
            self.tensor,
            self.entries,
            self.skipped,
            self.rel_err,
            self.tolerance
        )
    }
}

/// Compare analytic and central-difference gradients of `dot(build(g), r)`
/// for up to `max_entries` entries of every trainable tensor in `store`.
pub fn check_graph<F>(
    check: &str,
    store: &mut ParamStore<f64>,
    mode: Mode,
    max_entries: usize,
    tolerance: f64,
    seed: u64,
    build: F,
) -> Result<Vec<GradCheck>>
where
    F: Fn(&mut Graph<'_, f64>) -> Result<Var>,
{
    let mut rng = Rng::new(seed);
    let (projection, analytic, signature, base) = {
        let mut g = Graph::with_params(store, mode).track_branches();
        let y = build(&mut g)?;
        let r: Vec<f64> = (0..g.numel(y)).map(|_| rng.normal()).collect();
        let obj = g.dot_const(y, &r)?;
        let grads = g.backward(obj)?;
        (r, g.param_grads(&grads), g.branch_signature(), g.scalar_value(obj))
    };
    let objective = |store: &ParamStore<f64>| -> Result<(f64, Option<u64>)> {
        let mut g = Graph::with_params(store, mode).track_branches();
        let y = build(&mut g)?;
        let obj = g.dot_const(y, &projection)?;
        Ok((g.scalar_value(obj), g.branch_signature()))
    };
    let trainable: Vec<ParamId> = store.iter().filter(|(_, e)| e.is_trainable()).map(|(id, _)| id).collect();
    let mut out = Vec::with_capacity(trainable.len());
    for id in trainable {
        let n = store.get(id).numel();
        let grad = analytic.iter().find(|(g, _)| *g == id).map(|(_, v)| v.clone()).unwrap_or_else(|| vec![0.0; n]);
        let (mut diff, mut na, mut nn) = (0.0, 0.0, 0.0);
        let (mut entries, mut skipped, mut shrunk) = (0, 0, 0);
        for i in sample_indices(n, n, &mut rng) {
            if entries == max_entries {
                break;
            }
            let orig = store.get(id).data()[i];
            let mut at = |delta: f64| -> Result<(f64, bool)> {
                store.get_mut(id).data_mut()[i] = orig + delta;
                let r = objective(store);
                store.get_mut(id).data_mut()[i] = orig;
                r.map(|(f, s)| (f, s == signature))
            };
            let mut numeric = None;
            for (k, h) in KINK_STEPS.into_iter().enumerate() {
                let (fp, smooth_p) = at(h)?;
                let (fm, smooth_m) = at(-h)?;
                if smooth_p && smooth_m {
                    numeric = Some((fp - fm) / (2.0 * h));
                    break;
                }
                shrunk += 1;
                if k + 1 < KINK_STEPS.len() {
                    continue;
                }
                // A kink closer than the smallest step on one side only:
                // second-order one-sided difference on the smooth side.
                for (side, f1, smooth) in [(1.0, fp, smooth_p), (-1.0, fm, smooth_m)] {
                    if !smooth {
                        continue;
                    }
                    let (f2, smooth2) = at(2.0 * side * h)?;
                    if smooth2 {
                        numeric = Some(side * (4.0 * f1 - 3.0 * base - f2) / (2.0 * h));
                        break;
                    }
                }
            }
            let Some(numeric) = numeric else {
                skipped += 1;
                continue;
            };
            diff += (grad[i] - numeric).powi(2);
            na += grad[i].powi(2);
            nn += numeric.powi(2);
            entries += 1;
        }
        let rel_err = diff.sqrt() / na.sqrt().max(nn.sqrt()).max(ABS_FLOOR);
        out.push(GradCheck {
            check: check.to_string(),
            tensor: store.entry(id).name.clone(),
            entries,
            skipped,
            shrunk,
            rel_err,
            tolerance,
        });
    }
    Ok(out)
}

/// `k` distinct indices below `n` (all of them if `n <= k`).
fn sample_indices(n: usize, k: usize, rng: &mut Rng) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    let k = k.min(n);
    for i in 0..k {
        let j = i + rng.below(n - i);
        idx.swap(i, j);
    }
    idx.truncate(k);
    idx
}

fn input(store: &mut ParamStore<f64>, rng: &mut Rng, name: &str, shape: &[usize], lo: f64, hi: f64) -> ParamId {
    store.add(name, Tensor::rand_uniform(shape, lo, hi, rng), ParamKind::Trainable(ParamGroup::Backbone))
}

/// Add `std * N(0,1)` to every trainable entry so zero-initialized tensors
/// (offset predictors, biases, coefficients) are checked away from zero.
fn perturb_all(store: &mut ParamStore<f64>, rng: &mut Rng, std: f64) {
    let ids: Vec<ParamId> = store.iter().filter(|(_, e)| e.is_trainable()).map(|(id, _)| id).collect();
    for id in ids {
        store.get_mut(id).data_mut().iter_mut().for_each(|v| *v += std * rng.normal());
    }
}

fn flatten_all(g: &mut Graph<'_, f64>, vars: &[Var]) -> Result<Var> {
    let flat = vars
        .iter()
        .map(|&v| {
            let n = g.numel(v);
            g.reshape(v, &[n])
        })
        .collect::<Result<Vec<_>>>()?;
    g.concat(&flat, 0)
}

type OpBuild = Box<dyn Fn(&mut Graph<'_, f64>, &[Var]) -> Result<Var>>;

struct OpCase {
    name: &'static str,
    /// Input shapes with their sampling ranges.
    inputs: Vec<(Vec<usize>, f64, f64)>,
    build: OpBuild,
}

fn case(
    name: &'static str,
    inputs: &[(&[usize], f64, f64)],
    build: impl Fn(&mut Graph<'_, f64>, &[Var]) -> Result<Var> + 'static,
) -> OpCase {
    OpCase {
        name,
        inputs: inputs.iter().map(|&(s, lo, hi)| (s.to_vec(), lo, hi)).collect(),
        build: Box::new(build),
    }
}

fn op_cases() -> Vec<OpCase> {
    const S: &[usize] = &[2, 3, 4];
    let u = |s: &'static [usize]| (s, -1.0, 1.0);
    vec![
        case("add", &[u(S), u(S)], |g, v| g.add(v[0], v[1])),
        case("sub", &[u(S), u(S)], |g, v| g.sub(v[0], v[1])),
        case("mul", &[u(S), u(S)], |g, v| g.mul(v[0], v[1])),
        case("div", &[u(S), (S, 0.5, 2.0)], |g, v| g.div(v[0], v[1])),
        case("minimum", &[u(S), u(S)], |g, v| g.minimum(v[0], v[1])),
        case("maximum", &[u(S), u(S)], |g, v| g.maximum(v[0], v[1])),
        case("add_row", &[u(S), u(&[4])], |g, v| g.add_row(v[0], v[1])),
        case("scale_by", &[u(S), u(&[1])], |g, v| g.scale_by(v[0], v[1])),
        case("mul_const", &[u(S)], |g, v| g.mul_const(v[0], -1.7)),
        case("add_const", &[u(S)], |g, v| g.add_const(v[0], 0.3)),
        case("neg", &[u(S)], |g, v| g.neg(v[0])),
        case("relu", &[u(S)], |g, v| g.relu(v[0])),
        case("leaky_relu", &[u(S)], |g, v| g.leaky_relu(v[0], 0.1)),
        case("gelu", &[(S, -3.0, 3.0)], |g, v| g.gelu(v[0])),
        case("sigmoid", &[(S, -4.0, 4.0)], |g, v| g.sigmoid(v[0])),
        case("abs", &[u(S)], |g, v| g.abs(v[0])),
        case("square", &[u(S)], |g, v| g.square(v[0])),
        case("sum", &[u(S)], |g, v| g.sum(v[0])),
        case("mean", &[u(S)], |g, v| g.mean(v[0])),
        case("dot_const", &[u(S)], |g, v| {
            let w: Vec<f64> = (0..24).map(|i| (i as f64 * 0.37).sin()).collect();
            let d = g.dot_const(v[0], &w)?;
            g.square(d)
        }),
        case("matmul", &[u(S), u(&[4, 5])], |g, v| g.matmul(v[0], v[1])),
        case("bmm", &[u(S), u(&[2, 4, 5])], |g, v| g.bmm(v[0], v[1])),
        case("bmm_nt", &[u(S), u(&[2, 5, 4])], |g, v| g.bmm_nt(v[0], v[1])),
        case("reshape", &[u(S)], |g, v| g.reshape(v[0], &[4, 6])),
        case("permute", &[u(S)], |g, v| g.permute(v[0], &[2, 0, 1])),
        case("concat", &[u(S), u(&[2, 1, 4])], |g, v| g.concat(&[v[0], v[1]], 1)),
        case("slice", &[u(S)], |g, v| g.slice(v[0], 2, 1, 2)),
        case("gather", &[u(S)], |g, v| g.gather(v[0], &[0, 5, 5, 23, 11])),
        case("softmax", &[(S, -2.0, 2.0)], |g, v| g.softmax(v[0])),
        case("conv2d", &[u(&[2, 3, 6, 6]), u(&[4, 3, 3, 3]), u(&[4])], |g, v| {
            g.conv2d(v[0], v[1], Some(v[2]), ConvOpts::new(1, 1))
        }),
        case("conv2d_strided_grouped", &[u(&[1, 4, 7, 7]), u(&[6, 2, 3, 3])], |g, v| {
            g.conv2d(v[0], v[1], None, ConvOpts::new(2, 0).groups(2))
        }),
        case("conv_transpose2d", &[u(&[1, 4, 4, 4]), u(&[4, 1, 4, 4]), u(&[4])], |g, v| {
            g.conv_transpose2d(v[0], v[1], Some(v[2]), ConvOpts::new(2, 3).groups(4))
        }),
        case("pad_replicate", &[u(&[1, 2, 4, 5])], |g, v| g.pad_replicate(v[0], 2)),
        case("bilinear_sample", &[u(&[2, 5, 6]), (&[2], 0.6, 3.7)], |g, v| g.bilinear_sample(v[0], v[1])),
        case("bilinear_sample_border", &[u(&[2, 5, 6]), (&[2], -0.7, -0.2)], |g, v| {
            g.bilinear_sample(v[0], v[1])
        }),
        case(
            "deform_conv2d",
            &[u(&[2, 2, 5, 5]), (&[2, 18, 5, 5], -1.9, 1.9), u(&[3, 2, 3, 3]), u(&[3])],
            |g, v| g.deform_conv2d(v[0], v[1], v[2], Some(v[3])),
        ),
        case("layer_norm", &[u(S), (&[4], 0.5, 1.5), u(&[4])], |g, v| g.layer_norm(v[0], v[1], v[2], 1e-5)),
        case("bce_with_logits", &[(S, -3.0, 3.0)], |g, v| {
            let t: Vec<f64> = (0..24).map(|i| (i % 5) as f64 / 4.0).collect();
            g.bce_with_logits(v[0], &t)
        }),
    ]
}

fn batch_norm_check(mode: Mode, seed: u64) -> Result<Vec<GradCheck>> {
    let mut rng = Rng::new(seed);
    let mut store = ParamStore::new();
    let x = input(&mut store, &mut rng, "x", &[2, 3, 4, 4], -1.0, 1.0);
    let refs = BatchNormRefs {
        gamma: input(&mut store, &mut rng, "gamma", &[3], 0.5, 1.5),
        beta: input(&mut store, &mut rng, "beta", &[3], -0.5, 0.5),
        running_mean: store.add("running_mean", Tensor::rand_uniform(&[3], -0.2, 0.2, &mut rng), ParamKind::Buffer),
        running_var: store.add("running_var", Tensor::rand_uniform(&[3], 0.5, 1.5, &mut rng), ParamKind::Buffer),
        eps: 1e-5,
    };
    let name = if mode == Mode::Train { "batch_norm_train" } else { "batch_norm_eval" };
    check_graph(name, &mut store, mode, 16, OP_TOLERANCE, seed, |g| {
        let xv = g.param(x);
        g.batch_norm(xv, &refs)
    })
}

pub fn check_ops(seed: u64) -> Result<Vec<GradCheck>> {
    let mut out = Vec::new();
    for (k, c) in op_cases().into_iter().enumerate() {
        let mut rng = Rng::new(seed).fork(k as u64);
        let mut store = ParamStore::new();
        let ids: Vec<ParamId> = c
            .inputs
            .iter()
            .enumerate()
            .map(|(i, (shape, lo, hi))| input(&mut store, &mut rng, &format!("in{i}"), shape, *lo, *hi))
            .collect();
        let build = &c.build;
        out.extend(check_graph(c.name, &mut store, Mode::Eval, 16, OP_TOLERANCE, seed, |g| {
            let vars: Vec<Var> = ids.iter().map(|&id| g.param(id)).collect();
            build(g, &vars)
        })?);
    }
    out.extend(batch_norm_check(Mode::Train, seed)?);
    out.extend(batch_norm_check(Mode::Eval, seed)?);
    Ok(out)
}

pub fn check_prompters(seed: u64) -> Result<Vec<GradCheck>> {
    let mut out = Vec::new();
    let mut rng = Rng::new(seed);

    let mut store = ParamStore::new();
    let illum = {
        let mut b = Builder::new(&mut store, &mut rng, ParamGroup::Prompt);
        IllumPrompter::new(&mut b, 3, 3, 2, 8)?
    };
    let image = input(&mut store, &mut rng, "image", &[1, 3, 16, 16], 0.0, 1.0);
    perturb_all(&mut store, &mut rng, 0.05);
    out.extend(check_graph("illum_pyramid", &mut store, Mode::Eval, 8, OP_TOLERANCE, seed, |g| {
        let x = g.param(image);
        let lv = illum.pyramid(g, x)?;
        flatten_all(g, &[lv.gaussians.as_slice(), lv.laplacians.as_slice()].concat())
    })?);
    out.extend(check_graph("illum_prompter", &mut store, Mode::Eval, 8, OP_TOLERANCE, seed, |g| {
        let x = g.param(image);
        illum.forward(g, x)
    })?);

    let mut store = ParamStore::new();
    let (view, proj) = {
        let mut b = Builder::new(&mut store, &mut rng, ParamGroup::Prompt);
        let view = ViewPrompter::new(&mut b, 3, 2, 3, 4);
        let proj = crate::nn::Linear::new(&mut b, "proj", 3, 4);
        (view, proj)
    };
    let image = input(&mut store, &mut rng, "image", &[2, 3, 8, 8], 0.0, 1.0);
    perturb_all(&mut store, &mut rng, 0.3);
    out.extend(check_graph("view_prompter", &mut store, Mode::Train, 8, OP_TOLERANCE, seed, |g| {
        let x = g.param(image);
        let m = view.forward(g, x)?;
        tokenize_prompt(g, m, &proj, 4)
    })?);
    Ok(out)
}

pub fn check_block(seed: u64) -> Result<Vec<GradCheck>> {
    let mut rng = Rng::new(seed);
    let mut store = ParamStore::new();
    let block = {
        let mut b = Builder::new(&mut store, &mut rng, ParamGroup::Backbone);
        DpBlock::new(&mut b, "blk", 8, 2, 2, false)
    };
    let shape = [2, 5, 8];
    let f = input(&mut store, &mut rng, "features", &shape, -1.0, 1.0);
    let pi = input(&mut store, &mut rng, "illu", &shape, -1.0, 1.0);
    let pv = input(&mut store, &mut rng, "view", &shape, -1.0, 1.0);
    perturb_all(&mut store, &mut rng, 0.1);
    check_graph("dpblock", &mut store, Mode::Eval, 8, OP_TOLERANCE, seed, |g| {
        let x = g.param(f);
        let illu = PromptTokens { tokens: g.param(pi), kind: PromptKind::Illumination, block_index: 0 };
        let view = PromptTokens { tokens: g.param(pv), kind: PromptKind::Viewpoint, block_index: 0 };
        let (x, illu, view) = block.forward(g, x, illu, view)?;
        flatten_all(g, &[x, illu.tokens, view.tokens])
    })
}

/// Micro tracker in training mode (batch 2), against its head outputs and
/// against the tracking loss.
pub fn check_model(seed: u64) -> Result<Vec<GradCheck>> {
    let cfg = TrackerConfig { seed, ..TrackerConfig::micro() };
    let (model, mut store) = Tracker::new::<f64>(&cfg)?;
    let mut rng = Rng::new(seed).fork(1);
    let (ts, ss) = (cfg.template_size, cfg.search_size);
    let template = input(&mut store, &mut rng, "input.template", &[2, 3, ts, ts], 0.0, 1.0);
    let search = input(&mut store, &mut rng, "input.search", &[2, 3, ss, ss], 0.0, 1.0);
    perturb_all(&mut store, &mut rng, 0.1);
    let mut out = check_graph("model", &mut store, Mode::Train, 6, MODEL_TOLERANCE, seed, |g| {
        let (t, s) = (g.param(template), g.param(search));
        let h = model.forward(g, t, s)?;
        flatten_all(g, &[h.center_logits, h.size, h.offset])
    })?;
    let side = ss as f64;
    let gts = [BBox::new(0.31 * side, 0.22 * side, 0.3 * side, 0.25 * side), BBox::new(0.45 * side, 0.5 * side, 0.2 * side, 0.35 * side)];
    out.extend(check_graph("model_loss", &mut store, Mode::Train, 6, MODEL_TOLERANCE, seed, |g| {
        let (t, s) = (g.param(template), g.param(search));
        let h = model.forward(g, t, s)?;
        tracking_loss(g, &h, &gts, cfg.patch_size, cfg.search_size)
    })?);
    Ok(out)
}

pub fn run(scope: Scope, seed: u64) -> Result<Vec<GradCheck>> {
    match scope {
        Scope::Ops => check_ops(seed),
        Scope::Prompters => check_prompters(seed),
        Scope::Block => check_block(seed),
        Scope::Model => check_model(seed),
    }
}
