//! Central finite-difference verification of tape gradients.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{CodaError, Result};
use crate::grid::DenseGrid;
use crate::kernels::ConvSpec;
use crate::losses;
use crate::nets::{BoundParams, CountingNetConfig, DiscriminatorConfig, ModelParams};
use crate::tape::{Tape, Var};

pub const FD_STEP: f64 = 1e-5;

/// How many elements of each input to probe. `None` probes all of them.
#[derive(Clone, Copy, Debug)]
pub struct CheckBudget {
    pub max_elements_per_input: Option<usize>,
    pub seed: u64,
}

impl Default for CheckBudget {
    fn default() -> Self {
        CheckBudget {
            max_elements_per_input: None,
            seed: 0,
        }
    }
}

/// Outcome of one finite-difference comparison.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CheckOutcome {
    /// Max over probed elements of `|analytic − numeric| / max(1, |numeric|)`.
    pub max_rel_error: f64,
    pub probed: usize,
    /// Probes skipped because `x ± step` changed a ReLU sign or a max-pool
    /// winner, where central differences do not estimate the derivative.
    pub skipped_at_kinks: usize,
}

/// Compare the analytic gradient of a scalar computation against central
/// differences with step [`FD_STEP`], returning the maximum relative error.
///
/// `build` records the computation on a fresh tape, given one variable per
/// entry of `inputs`, and returns the scalar root.
pub fn grad_check<F>(build: F, inputs: &[DenseGrid], budget: CheckBudget) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    Ok(grad_check_detailed(build, inputs, budget)?.max_rel_error)
}

/// [`grad_check`] with probe counts.
pub fn grad_check_detailed<F>(build: F, inputs: &[DenseGrid], budget: CheckBudget) -> Result<CheckOutcome>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let eval = |values: &[DenseGrid]| -> Result<(f64, u64)> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|v| tape.constant(v.clone())).collect();
        let root = build(&mut tape, &vars)?;
        Ok((scalar_of(&tape, root)?, tape.branch_signature()))
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|v| tape.variable(v.clone())).collect();
    let root = build(&mut tape, &vars)?;
    scalar_of(&tape, root)?;
    let base_signature = tape.branch_signature();
    let grads = tape.backward(root)?;

    let mut rng = ChaCha8Rng::seed_from_u64(budget.seed);
    let mut out = CheckOutcome {
        max_rel_error: 0.0,
        probed: 0,
        skipped_at_kinks: 0,
    };
    let mut probe = inputs.to_vec();
    for (i, input) in inputs.iter().enumerate() {
        let analytic = grads.get(vars[i]);
        let indices: Vec<usize> = match budget.max_elements_per_input {
            Some(k) if k < input.len() => {
                let mut idx = sample(&mut rng, input.len(), k).into_vec();
                idx.sort_unstable();
                idx
            }
            _ => (0..input.len()).collect(),
        };
        for j in indices {
            let original = input.data()[j];
            probe[i].data_mut()[j] = original + FD_STEP;
            let (plus, sig_plus) = eval(&probe)?;
            probe[i].data_mut()[j] = original - FD_STEP;
            let (minus, sig_minus) = eval(&probe)?;
            probe[i].data_mut()[j] = original;
            if sig_plus != base_signature || sig_minus != base_signature {
                out.skipped_at_kinks += 1;
                continue;
            }
            let numeric = (plus - minus) / (2.0 * FD_STEP);
            let err = (analytic.data()[j] - numeric).abs() / numeric.abs().max(1.0);
            out.max_rel_error = out.max_rel_error.max(err);
            out.probed += 1;
        }
    }
    Ok(out)
}

fn scalar_of(tape: &Tape, root: Var) -> Result<f64> {
    let v = tape.value(root);
    if v.len() != 1 {
        return Err(CodaError::shape(
            "grad_check",
            format!("computation must be scalar-valued, got shape {:?}", v.shape()),
        ));
    }
    Ok(v.data()[0])
}

/// Tolerance every entry of the suite must meet.
pub const GRAD_TOL: f64 = 1e-4;

/// Result of checking one operation.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct OpCheck {
    pub op: &'static str,
    pub max_rel_error: f64,
    pub probed: usize,
    pub skipped_at_kinks: usize,
    pub passed: bool,
}

type Case = fn(&mut ChaCha8Rng) -> Result<CheckOutcome>;

/// Every differentiable operation, each loss and both networks.
const CASES: &[(&str, Case)] = &[
    ("conv2d", case_conv2d),
    ("conv2d_strided", case_conv2d_strided),
    ("conv2d_dilated", case_conv2d_dilated),
    ("relu", case_relu),
    ("leaky_relu", case_leaky_relu),
    ("maxpool2", case_maxpool2),
    ("resize_bilinear_up", case_resize_up),
    ("resize_bilinear_down", case_resize_down),
    ("block_sum_downsample", case_block_sum),
    ("add", case_add),
    ("sub", case_sub),
    ("mul", case_mul),
    ("scale", case_scale),
    ("add_scalar", case_add_scalar),
    ("sum", case_sum),
    ("sum_per_item", case_sum_per_item),
    ("mean_per_item", case_mean_per_item),
    ("select_item", case_select_item),
    ("stack", case_stack),
    ("log_sigmoid", case_log_sigmoid),
    ("density_loss", case_density_loss),
    ("discriminator_loss", case_discriminator_loss),
    ("adversarial_loss", case_adversarial_loss),
    ("ranking_loss", case_ranking_loss),
    ("predicted_count", case_predicted_count),
    ("counting_net", case_counting_net),
    ("discriminator", case_discriminator),
];

pub fn op_names() -> Vec<&'static str> {
    CASES.iter().map(|(n, _)| *n).collect()
}

/// Run the suite, or only the entry named `only`.
pub fn run_suite(only: Option<&str>, seed: u64) -> Result<Vec<OpCheck>> {
    if let Some(name) = only {
        if !CASES.iter().any(|(n, _)| *n == name) {
            return Err(CodaError::invalid(
                "gradcheck",
                format!("unknown op `{name}`; known: {}", op_names().join(", ")),
            ));
        }
    }
    let mut out = Vec::new();
    for (i, (name, case)) in CASES.iter().enumerate() {
        if only.is_some_and(|n| n != *name) {
            continue;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(i as u64);
        let r = case(&mut rng)?;
        out.push(OpCheck {
            op: name,
            max_rel_error: r.max_rel_error,
            probed: r.probed,
            skipped_at_kinks: r.skipped_at_kinks,
            passed: r.max_rel_error < GRAD_TOL && r.probed > 0,
        });
    }
    Ok(out)
}

fn rand_grid(rng: &mut ChaCha8Rng, shape: [usize; 4]) -> DenseGrid {
    let n = shape.iter().product();
    DenseGrid::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).expect("shape")
}

/// Random values bounded away from zero, for ops with a kink there.
fn rand_off_zero(rng: &mut ChaCha8Rng, shape: [usize; 4]) -> DenseGrid {
    rand_grid(rng, shape).map(|v| if v < 0.0 { v - 0.05 } else { v + 0.05 })
}

/// Run `grad_check` with a weighting drawn once, shared by every evaluation.
fn check_unary(rng: &mut ChaCha8Rng, input: DenseGrid, f: impl Fn(&mut Tape, Var) -> Result<Var>) -> Result<CheckOutcome> {
    let mut probe = Tape::new();
    let x = probe.constant(input.clone());
    let out = f(&mut probe, x)?;
    let out_shape = probe.value(out).shape();
    let w = rand_grid(rng, out_shape);
    grad_check_detailed(
        |t, v| {
            let y = f(t, v[0])?;
            let wv = t.constant(w.clone());
            let p = t.mul(y, wv)?;
            Ok(t.sum(p))
        },
        &[input],
        CheckBudget::default(),
    )
}

fn check_binary(rng: &mut ChaCha8Rng, a: DenseGrid, b: DenseGrid, f: fn(&mut Tape, Var, Var) -> Result<Var>) -> Result<CheckOutcome> {
    let w = rand_grid(rng, a.shape());
    grad_check_detailed(
        |t, v| {
            let y = f(t, v[0], v[1])?;
            let wv = t.constant(w.clone());
            let p = t.mul(y, wv)?;
            Ok(t.sum(p))
        },
        &[a, b],
        CheckBudget::default(),
    )
}

fn conv_case(rng: &mut ChaCha8Rng, spec: ConvSpec, input: [usize; 4], k: usize, out_ch: usize) -> Result<CheckOutcome> {
    let x = rand_grid(rng, input);
    let wt = rand_grid(rng, [out_ch, input[1], k, k]);
    let b = rand_grid(rng, [1, 1, 1, out_ch]);
    let mut probe = Tape::new();
    let (xv, wv) = (probe.constant(x.clone()), probe.constant(wt.clone()));
    let out = probe.conv2d(xv, wv, None, spec)?;
    let out_shape = probe.value(out).shape();
    let r = rand_grid(rng, out_shape);
    grad_check_detailed(
        |t, v| {
            let y = t.conv2d(v[0], v[1], Some(v[2]), spec)?;
            let rv = t.constant(r.clone());
            let p = t.mul(y, rv)?;
            Ok(t.sum(p))
        },
        &[x, wt, b],
        CheckBudget::default(),
    )
}

fn case_conv2d(rng: &mut ChaCha8Rng) -> Result<CheckOutcome> {
    conv_case(rng, ConvSpec::new(1, 1, 1), [2, 3, 8, 8], 3, 4)
}

fn case_conv2d_strided(rng: &mut ChaCha8Rng) -> Result<CheckOutcome> {
    conv_case(rng, ConvSpec::new(2, 1, 1), [1, 2, 16, 16], 4, 3)
}

fn case_conv2d_dilated(rng: &mut ChaCha8Rng) -> Result<CheckOutcome> {
    conv_case(rng, ConvSpec::new(1, 4, 4), [1, 2, 12, 12], 3, 2)
}

fn case_relu(rng: &mut ChaCha8Rng) -> Result<CheckOutcome> {
    let x = rand_off_zero(rng, [2, 2, 8, 8]);
    check_unary(rng, x, |t, v| Ok(t.relu(v)))
}

fn case_leaky_relu(rng: &mut ChaCha8Rng) -> Result<CheckOutcome> {
    let x = rand_off_zero(rng, [2, 2, 8, 8]);
    check_unary(rng, x, |t, v| Ok(t.leaky_relu(v, 0.2)))
}

fn case_maxpool2(rng: &mut ChaCha8Rng) -> Result<CheckOutcome> {
    let x = rand_grid(rng, [2, 2, 16, 16]);
    check_unary(rng, x, |t, v| t.maxpool2(v))
}

fn case_resize_up(rng: &mut ChaCha8Rng) -> Result<CheckOutcome> {
    let x = rand_grid(rng, [1, 2, 6, 7]);
    check_unary(rng, x, |t, v| t.resize_bilinear(v, 16, 13))
}

fn case_resize_down(rng: &mut ChaCha8Rng) -> Result<CheckOutcome> {
    let x = rand_grid(rng, [1, 1, 16, 16]);
    check_unary(rng, x, |t, v| t.resize_bilinear(v, 5, 9))
}

fn case_block_sum(rng: &mut ChaCha8Rng) -> Result<CheckOutcome> {
    let x = rand_grid(rng, [2, 1, 16, 16]);
    check_unary(rng, x, |t, v| t.block_sum_downsample(v, 4))
}

fn case_add(rng: &mut ChaCha8Rng) -> Result<CheckOutcome> {
    let (a, b) = (rand_grid(rng, [1, 2, 4, 4]), rand_grid(rng, [1, 2, 4, 4]));
    check_binary(rng, a, b, |t, x, y| t.add(x, y))
}

fn case_sub(rng: &mut ChaCha8Rng) -> Result<CheckOutcome> {
    let (a, b) = (rand_grid(rng, [1, 2, 4, 4]), rand_grid(rng, [1, 2, 4, 4]));
    check_binary(rng, a, b, |t, x, y| t.sub(x, y))
}

fn case_mul(rng: &mut ChaCha8Rng) -> Result<CheckOutcome> {
    let (a, b) = (rand_grid(rng, [1, 2, 4, 4]), rand_grid(rng, [1, 2, 4, 4]));
    check_binary(rng, a, b, |t, x, y| t.mul(x, y))
}

fn case_scale(rng: &mut ChaCha8Rng) -> Result<CheckOutcome> {
    let x = rand_grid(rng, [1, 1, 8, 8]);
    check_unary(rng, x, |t, v| Ok(t.scale(v, -2.5)))
}

fn case_add_scalar(rng: &mut ChaCha8Rng) -> Result<CheckOutcome> {
    let x = rand_grid(rng, [1, 1, 8, 8]);
    check_unary(rng, x, |t, v| {
        let y = t.add_scalar(v, 0.75);
        t.mul(y, y)
    })
}

fn case_sum(rng: &mut ChaCha8Rng) -> Result<CheckOutcome> {
    let x = rand_grid(rng, [2, 2, 5, 5]);
    check_unary(rng, x, |t, v| {
        let s = t.sum(v);
        Ok(t.mul(s, s).expect("scalar"))
    })
}

fn case_sum_per_item(rng: &mut ChaCha8Rng) -> Result<CheckOutcome> {
    let x = rand_grid(rng, [3, 2, 4, 4]);
    check_unary(rng, x, |t, v| {
        let s = t.sum_per_item(v);
        t.mul(s, s)
    })
}

fn case_mean_per_item(rng: &mut ChaCha8Rng) -> Result<CheckOutcome> {
    let x = rand_grid(rng, [3, 1, 4, 4]);
    check_unary(rng, x, |t, v| {
        let s = t.mean_per_item(v);
        t.mul(s, s)
    })
}

fn case_select_item(rng: &mut ChaCha8Rng) -> Result<CheckOutcome> {
    let x = rand_grid(rng, [3, 1, 4, 4]);
    check_unary(rng, x, |t, v| t.select_item(v, 1))
}

fn case_stack(rng: &mut ChaCha8Rng) -> Result<CheckOutcome> {
    let (a, b) = (rand_grid(rng, [1, 1, 4, 4]), rand_grid(rng, [2, 1, 4, 4]));
    let w = rand_grid(rng, [3, 1, 4, 4]);
    grad_check_detailed(
        |t, v| {
            let s = t.stack(&[v[0], v[1]])?;
            let wv = t.constant(w.clone());
            let p = t.mul(s, wv)?;
            Ok(t.sum(p))
        },
        &[a, b],
        CheckBudget::default(),
    )
}

fn case_log_sigmoid(rng: &mut ChaCha8Rng) -> Result<CheckOutcome> {
    let x = rand_grid(rng, [1, 1, 8, 8]).map(|v| 8.0 * v);
    check_unary(rng, x, |t, v| Ok(t.log_sigmoid(v)))
}

fn case_density_loss(rng: &mut ChaCha8Rng) -> Result<CheckOutcome> {
    let (p, g) = (rand_grid(rng, [2, 1, 4, 4]), rand_grid(rng, [2, 1, 4, 4]));
    grad_check_detailed(|t, v| losses::density_loss(t, v[0], v[1]), &[p, g], CheckBudget::default())
}

fn case_discriminator_loss(rng: &mut ChaCha8Rng) -> Result<CheckOutcome> {
    let (s, d) = (rand_grid(rng, [2, 1, 3, 3]).map(|v| 4.0 * v), rand_grid(rng, [2, 1, 3, 3]).map(|v| 4.0 * v));
    grad_check_detailed(
        |t, v| losses::discriminator_loss(t, &[v[0]], &[v[1]]),
        &[s, d],
        CheckBudget::default(),
    )
}

fn case_adversarial_loss(rng: &mut ChaCha8Rng) -> Result<CheckOutcome> {
    let x = rand_grid(rng, [2, 1, 3, 3]).map(|v| 4.0 * v);
    grad_check_detailed(|t, v| losses::adversarial_loss(t, &[v[0]]), &[x], CheckBudget::default())
}

fn case_ranking_loss(rng: &mut ChaCha8Rng) -> Result<CheckOutcome> {
    // distinct counts spaced well beyond the finite-difference step
    let mut counts: Vec<f64> = (0..4).map(|i| i as f64 * 0.5 + rng.random_range(0.0..0.2)).collect();
    counts.swap(0, 3);
    counts.swap(1, 2);
    let inputs: Vec<DenseGrid> = counts.iter().map(|&c| DenseGrid::scalar(c)).collect();
    grad_check_detailed(|t, v| losses::ranking_loss(t, v, 0.1), &inputs, CheckBudget::default())
}

fn case_predicted_count(rng: &mut ChaCha8Rng) -> Result<CheckOutcome> {
    let x = rand_grid(rng, [1, 1, 6, 6]);
    let mask = rand_grid(rng, [1, 1, 6, 6]).map(|v| (v + 1.0) / 2.0);
    grad_check_detailed(
        |t, v| {
            let c = losses::predicted_count(t, v[0], Some(&mask))?;
            t.mul(c, c)
        },
        &[x],
        CheckBudget::default(),
    )
}

/// Parameters of a network as grad-check inputs, in layout order.
fn param_inputs(params: &ModelParams) -> (Vec<String>, Vec<DenseGrid>) {
    params.iter().map(|(k, v)| (k.to_string(), v.clone())).unzip()
}

fn case_counting_net(rng: &mut ChaCha8Rng) -> Result<CheckOutcome> {
    let cfg = CountingNetConfig::default();
    let mut params = cfg.init_params(rng.random())?;
    // a positive output bias keeps the final ReLU open, so the check is not
    // vacuous for seeds whose initial output is all zero
    for (name, v) in params.iter_mut() {
        if name == "out.bias" {
            *v = v.map(|_| 0.5);
        }
    }
    let (names, mut inputs) = param_inputs(&params);
    let x = rand_grid(rng, [1, 1, 16, 16]).map(|v| (v + 1.0) / 2.0);
    let gt = rand_grid(rng, [1, 1, 4, 4]).map(|v| (v + 1.0) / 4.0);
    inputs.push(x);
    let n = names.len();
    grad_check_detailed(
        |t, v| {
            let bound = BoundParams::from_vars(names.iter().map(String::as_str).zip(v[..n].iter().copied()));
            let pred = cfg.forward(t, &bound, v[n])?;
            let g = t.constant(gt.clone());
            losses::density_loss(t, pred, g)
        },
        &inputs,
        CheckBudget {
            max_elements_per_input: Some(48),
            seed: rng.random(),
        },
    )
}

fn case_discriminator(rng: &mut ChaCha8Rng) -> Result<CheckOutcome> {
    let cfg = DiscriminatorConfig::default();
    let params = cfg.init_params(rng.random())?;
    let (names, mut inputs) = param_inputs(&params);
    let src = rand_grid(rng, [1, 1, 16, 16]).map(|v| (v + 1.0) / 8.0);
    let tgt = rand_grid(rng, [1, 1, 16, 16]).map(|v| (v + 1.0) / 8.0);
    let side = cfg.min_input();
    inputs.push(src);
    inputs.push(tgt);
    let n = names.len();
    grad_check_detailed(
        |t, v| {
            let bound = BoundParams::from_vars(names.iter().map(String::as_str).zip(v[..n].iter().copied()));
            let s = t.resize_bilinear(v[n], side, side)?;
            let g = t.resize_bilinear(v[n + 1], side, side)?;
            let ls = cfg.forward(t, &bound, s)?;
            let lt = cfg.forward(t, &bound, g)?;
            losses::discriminator_loss(t, &[ls], &[lt])
        },
        &inputs,
        CheckBudget {
            max_elements_per_input: Some(48),
            seed: rng.random(),
        },
    )
}
