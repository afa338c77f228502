//! Central finite-difference gradient checking, run in 64-bit arithmetic.
//!
//! Each case builds a scalar loss from a fixed set of input tensors. The
//! analytic gradient from `backward` is compared coordinate-wise against
//! (f(x+h) - f(x-h)) / 2h. Large tensors are subsampled deterministically;
//! the comparison uses a relative error with an absolute floor so that
//! near-zero gradient pairs are not penalized.

use crate::attention::{topk_attention, TokenMap, TopkConfig, TopkVariant};
use crate::error::Result;
use crate::graph::{Graph, Tensor, UpsampleMode, Var};
use crate::model::{forward, init_model, ModelDims};
use crate::nn::{Bound, ParamStore};
use crate::real::Real;
use crate::rng::SeededRng;

pub const DEFAULT_EPS: f64 = 1e-3;
pub const DEFAULT_TOLERANCE: f64 = 1e-4;
pub const ABSOLUTE_FLOOR: f64 = 1e-6;

type BuildFn = Box<dyn Fn(&mut Graph<f64>, &[Var]) -> Result<Var>>;

pub struct Case {
    pub name: String,
    pub inputs: Vec<Tensor<f64>>,
    pub build: BuildFn,
}

#[derive(Debug, Clone)]
pub struct CheckReport {
    pub name: String,
    pub max_rel_err: f64,
    pub coords_checked: usize,
    pub pass: bool,
}

fn random_tensor(shape: &[usize], rng: &mut SeededRng, lo: f64, hi: f64) -> Tensor<f64> {
    let numel: usize = shape.iter().product();
    Tensor {
        shape: shape.to_vec(),
        data: (0..numel).map(|_| rng.uniform(lo, hi)).collect(),
    }
}

fn forward_loss(case: &Case, inputs: &[Tensor<f64>]) -> Result<f64> {
    let mut g: Graph<f64> = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone(), false)).collect();
    let loss = (case.build)(&mut g, &vars)?;
    Ok(loss.value_f64(&g))
}

trait ScalarValue {
    fn value_f64(self, g: &Graph<f64>) -> f64;
}

impl ScalarValue for Var {
    fn value_f64(self, g: &Graph<f64>) -> f64 {
        g.value(self).data[0].to_f64()
    }
}

/// Check one case. `max_coords` caps the number of coordinates probed per
/// input tensor (chosen by a fixed-seed draw). `corrupt` is a sensitivity
/// hook that perturbs the first analytic gradient so the harness must fail.
pub fn run_case(
    case: &Case,
    eps: f64,
    tolerance: f64,
    max_coords: usize,
    corrupt: bool,
) -> Result<CheckReport> {
    let mut g: Graph<f64> = Graph::new();
    let vars: Vec<Var> = case
        .inputs
        .iter()
        .map(|t| g.leaf(t.clone(), true))
        .collect();
    let loss = (case.build)(&mut g, &vars)?;
    g.backward(loss)?;
    let mut analytic: Vec<Vec<f64>> = Vec::with_capacity(vars.len());
    for &v in &vars {
        analytic.push(
            g.grad(v)
                .map(|s| s.to_vec())
                .unwrap_or_else(|| vec![0.0; g.shape(v).iter().product()]),
        );
    }
    if corrupt {
        if let Some(first) = analytic.iter_mut().flat_map(|v| v.iter_mut()).next() {
            *first += 1.0;
        }
    }

    let mut coord_rng = SeededRng::new(0x5EED_C0DE);
    let mut max_rel = 0.0f64;
    let mut checked = 0usize;
    for (ti, tensor) in case.inputs.iter().enumerate() {
        let numel = tensor.numel();
        let coords: Vec<usize> = if numel <= max_coords {
            (0..numel).collect()
        } else {
            (0..max_coords)
                .map(|_| coord_rng.next_below(numel as u64) as usize)
                .collect()
        };
        for j in coords {
            let central = |h: f64| -> Result<f64> {
                let mut plus = case.inputs.to_vec();
                plus[ti].data[j] += h;
                let mut minus = case.inputs.to_vec();
                minus[ti].data[j] -= h;
                Ok((forward_loss(case, &plus)? - forward_loss(case, &minus)?) / (2.0 * h))
            };
            // Central differences only estimate the derivative where the loss
            // is smooth across [x-h, x+h]; a relu kink or a selection flip
            // inside the interval invalidates the estimate. Halve h until two
            // successive estimates agree (forward-only, so a wrong backward
            // rule can never be masked).
            let mut h = eps;
            let mut fd = central(h)?;
            loop {
                let refined = central(h / 2.0)?;
                // the agreement floor sits well below ABSOLUTE_FLOOR so a
                // still-decaying truncation error cannot fake convergence
                let agree = (refined - fd).abs()
                    <= (0.25 * tolerance * refined.abs()).max(0.05 * ABSOLUTE_FLOOR);
                fd = refined;
                h /= 2.0;
                if agree || h < 1e-6 {
                    break;
                }
            }
            let a = analytic[ti][j];
            let diff = (a - fd).abs();
            let rel = if diff <= ABSOLUTE_FLOOR {
                0.0
            } else {
                diff / a.abs().max(fd.abs()).max(ABSOLUTE_FLOOR)
            };
            max_rel = max_rel.max(rel);
            checked += 1;
        }
    }
    Ok(CheckReport {
        name: case.name.clone(),
        max_rel_err: max_rel,
        coords_checked: checked,
        pass: max_rel < tolerance,
    })
}

fn case<F>(name: &str, inputs: Vec<Tensor<f64>>, build: F) -> Case
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var> + 'static,
{
    Case {
        name: name.to_string(),
        inputs,
        build: Box::new(build),
    }
}

/// Smooth scalarization: sum of squares halved, so upstream gradients vary
/// across coordinates instead of being all-ones.
fn squash(g: &mut Graph<f64>, v: Var) -> Result<Var> {
    let sq = g.mul(v, v)?;
    let s = g.sum(sq, None)?;
    Ok(g.scale(s, 0.5))
}

pub fn op_cases() -> Vec<Case> {
    let mut rng = SeededRng::new(0xABCD_1234);
    let mut cases = Vec::new();

    let a = random_tensor(&[2, 3, 4], &mut rng, -1.0, 1.0);
    let b = random_tensor(&[2, 4, 3], &mut rng, -1.0, 1.0);
    cases.push(case("matmul", vec![a, b], |g, xs| {
        let y = g.matmul(xs[0], xs[1])?;
        squash(g, y)
    }));

    let a = random_tensor(&[2, 3, 4], &mut rng, -1.0, 1.0);
    let b = random_tensor(&[2, 5, 4], &mut rng, -1.0, 1.0);
    cases.push(case("matmul_nt", vec![a, b], |g, xs| {
        let y = g.matmul_nt(xs[0], xs[1])?;
        squash(g, y)
    }));

    let a = random_tensor(&[2, 3, 4], &mut rng, -1.0, 1.0);
    let b = random_tensor(&[4], &mut rng, -1.0, 1.0);
    cases.push(case("add_broadcast", vec![a, b], |g, xs| {
        let y = g.add(xs[0], xs[1])?;
        squash(g, y)
    }));

    let a = random_tensor(&[3, 4], &mut rng, -1.0, 1.0);
    let b = random_tensor(&[3, 1], &mut rng, -1.0, 1.0);
    cases.push(case("sub_broadcast", vec![a, b], |g, xs| {
        let y = g.sub(xs[0], xs[1])?;
        squash(g, y)
    }));

    let a = random_tensor(&[2, 3, 4], &mut rng, -1.0, 1.0);
    let b = random_tensor(&[3, 4], &mut rng, -1.0, 1.0);
    cases.push(case("mul_broadcast", vec![a, b], |g, xs| {
        let y = g.mul(xs[0], xs[1])?;
        squash(g, y)
    }));

    let a = random_tensor(&[3, 4], &mut rng, -1.0, 1.0);
    let b = random_tensor(&[3, 4], &mut rng, 0.5, 2.0);
    cases.push(case("div", vec![a, b], |g, xs| {
        let y = g.div(xs[0], xs[1])?;
        squash(g, y)
    }));

    let a = random_tensor(&[3, 4], &mut rng, -1.0, 1.0);
    cases.push(case("scale_neg_exp", vec![a], |g, xs| {
        let y = g.scale(xs[0], -1.7);
        let y = g.exp(y)?;
        squash(g, y)
    }));

    let a = random_tensor(&[3, 4], &mut rng, 0.5, 3.0);
    cases.push(case("log", vec![a], |g, xs| {
        let y = g.log(xs[0])?;
        squash(g, y)
    }));

    let a = random_tensor(&[3, 4], &mut rng, 0.5, 3.0);
    cases.push(case("sqrt", vec![a], |g, xs| {
        let y = g.sqrt(xs[0])?;
        squash(g, y)
    }));

    // keep inputs away from the relu kink so FD is valid
    let mut a = random_tensor(&[3, 4], &mut rng, -1.0, 1.0);
    for v in a.data.iter_mut() {
        if v.abs() < 0.05 {
            *v += 0.1;
        }
    }
    cases.push(case("relu", vec![a], |g, xs| {
        let y = g.relu(xs[0])?;
        squash(g, y)
    }));

    let a = random_tensor(&[3, 4], &mut rng, -2.0, 2.0);
    cases.push(case("gelu", vec![a], |g, xs| {
        let y = g.gelu(xs[0])?;
        squash(g, y)
    }));

    let a = random_tensor(&[3, 4], &mut rng, -3.0, 3.0);
    cases.push(case("sigmoid", vec![a], |g, xs| {
        let y = g.sigmoid(xs[0])?;
        squash(g, y)
    }));

    let a = random_tensor(&[2, 3, 4], &mut rng, -1.0, 1.0);
    cases.push(case("sum_axis", vec![a], |g, xs| {
        let y = g.sum(xs[0], Some(1))?;
        squash(g, y)
    }));

    let a = random_tensor(&[2, 3, 4], &mut rng, -1.0, 1.0);
    cases.push(case("mean_axis", vec![a], |g, xs| {
        let y = g.mean(xs[0], Some(2))?;
        squash(g, y)
    }));

    // distinct values so the max argument is stable under +-eps
    let mut a = random_tensor(&[2, 6], &mut rng, -1.0, 1.0);
    for (i, v) in a.data.iter_mut().enumerate() {
        *v += i as f64 * 0.01;
    }
    cases.push(case("max_axis", vec![a], |g, xs| {
        let y = g.max_reduce(xs[0], Some(1))?;
        squash(g, y)
    }));

    let a = random_tensor(&[2, 5], &mut rng, -1.0, 1.0);
    cases.push(case("variance_axis", vec![a], |g, xs| {
        let y = g.variance(xs[0], Some(1))?;
        squash(g, y)
    }));

    let a = random_tensor(&[2, 3, 5], &mut rng, -1.0, 1.0);
    cases.push(case("softmax", vec![a], |g, xs| {
        let y = g.softmax(xs[0], 2)?;
        squash(g, y)
    }));

    let a = random_tensor(&[2, 3, 5], &mut rng, -1.0, 1.0);
    cases.push(case("layernorm", vec![a], |g, xs| {
        let y = g.layernorm(xs[0], 2, 1e-5)?;
        squash(g, y)
    }));

    let a = random_tensor(&[1, 4, 3, 3], &mut rng, -1.0, 1.0);
    cases.push(case("groupnorm", vec![a], |g, xs| {
        let y = g.groupnorm(xs[0], 2, 1e-5)?;
        squash(g, y)
    }));

    let x = random_tensor(&[1, 2, 5, 5], &mut rng, -1.0, 1.0);
    let w = random_tensor(&[3, 2, 3, 3], &mut rng, -0.5, 0.5);
    let b = random_tensor(&[3], &mut rng, -0.5, 0.5);
    cases.push(case("conv2d_s2_p1", vec![x, w, b], |g, xs| {
        let y = g.conv2d(xs[0], xs[1], Some(xs[2]), 2, 1)?;
        squash(g, y)
    }));

    let x = random_tensor(&[1, 2, 4, 4], &mut rng, -1.0, 1.0);
    let w = random_tensor(&[2, 2, 1, 1], &mut rng, -0.5, 0.5);
    cases.push(case("conv2d_1x1", vec![x, w], |g, xs| {
        let y = g.conv2d(xs[0], xs[1], None, 1, 0)?;
        squash(g, y)
    }));

    let a = random_tensor(&[1, 2, 3, 3], &mut rng, -1.0, 1.0);
    cases.push(case("upsample_nearest", vec![a], |g, xs| {
        let y = g.upsample(xs[0], 2, UpsampleMode::Nearest)?;
        squash(g, y)
    }));

    let a = random_tensor(&[1, 2, 3, 3], &mut rng, -1.0, 1.0);
    cases.push(case("upsample_bilinear", vec![a], |g, xs| {
        let y = g.upsample(xs[0], 2, UpsampleMode::Bilinear)?;
        squash(g, y)
    }));

    let a = random_tensor(&[2, 6, 3], &mut rng, -1.0, 1.0);
    cases.push(case("index_select", vec![a], |g, xs| {
        let y = g.index_select(xs[0], 1, &[4, 0, 2, 0])?;
        squash(g, y)
    }));

    let a = random_tensor(&[2, 5, 4], &mut rng, -1.0, 1.0);
    cases.push(case("gather_scatter_tk", vec![a], |g, xs| {
        let tok = vec![vec![3, 1], vec![0, 4]];
        let ch = vec![vec![0, 2, 3], vec![1, 2, 0]];
        let y = g.gather_tk(xs[0], &tok, &ch)?;
        let z = g.scatter_tk(y, &tok, &ch, 5, 4)?;
        squash(g, z)
    }));

    let a = random_tensor(&[2, 3], &mut rng, -1.0, 1.0);
    let b = random_tensor(&[2, 2], &mut rng, -1.0, 1.0);
    cases.push(case("concat", vec![a, b], |g, xs| {
        let y = g.concat(&[xs[0], xs[1]], 1)?;
        squash(g, y)
    }));

    let a = random_tensor(&[2, 3, 4], &mut rng, -1.0, 1.0);
    cases.push(case("reshape_permute", vec![a], |g, xs| {
        let y = g.reshape(xs[0], &[2, 12])?;
        let y = g.reshape(y, &[2, 4, 3])?;
        let y = g.permute(y, &[1, 0, 2])?;
        squash(g, y)
    }));

    let logits = random_tensor(&[1, 3, 2, 2], &mut rng, -1.0, 1.0);
    cases.push(case("cross_entropy", vec![logits], |g, xs| {
        g.cross_entropy(xs[0], &[0, 2, 1, 0], None)
    }));

    let logits = random_tensor(&[1, 3, 2, 2], &mut rng, -1.0, 1.0);
    cases.push(case("cross_entropy_ignore", vec![logits], |g, xs| {
        g.cross_entropy(xs[0], &[0, 255, 1, 255], Some(255))
    }));

    for (name, variant) in [
        ("topk_attention_full_key", TopkVariant::FullKey),
        ("topk_attention_selected_key", TopkVariant::SelectedKey),
    ] {
        let x = random_tensor(&[1, 4, 4], &mut rng, -1.0, 1.0);
        let wq = random_tensor(&[4, 4], &mut rng, -0.5, 0.5);
        let wk = random_tensor(&[4, 4], &mut rng, -0.5, 0.5);
        let wv = random_tensor(&[4, 4], &mut rng, -0.5, 0.5);
        let wo = random_tensor(&[4, 4], &mut rng, -0.5, 0.5);
        let gamma = random_tensor(&[1], &mut rng, 0.5, 1.5);
        cases.push(case(
            name,
            vec![x, wq, wk, wv, wo, gamma],
            move |g, xs| {
                // bind against the caller's leaves so their grads flow
                let bound = Bound::from_vars(
                    ["attn.wq.weight", "attn.wk.weight", "attn.wv.weight", "attn.wo.weight", "attn.gamma"]
                        .iter()
                        .map(|s| s.to_string())
                        .zip([xs[1], xs[2], xs[3], xs[4], xs[5]])
                        .collect(),
                );
                let tm = TokenMap::new(g, xs[0], 2, 2)?;
                let cfg = TopkConfig {
                    k_tokens: 3,
                    k_channels: 3,
                    variant,
                    ac_override_one: false,
                };
                let (update, _) = topk_attention(g, &bound, "attn", &tm, &cfg)?;
                squash(g, update)
            },
        ));
    }

    cases
}

/// End-to-end micro-model: every parameter plus the input image, with a
/// cross-entropy loss over a fixed random mask.
pub fn micro_model_case() -> Case {
    let dims = ModelDims::micro();
    let store: ParamStore<f64> = init_model(&dims, 0xE2E);
    let names: Vec<String> = store.iter().map(|(p, _)| p.clone()).collect();
    let mut inputs: Vec<Tensor<f64>> = store.iter().map(|(_, p)| p.tensor.clone()).collect();
    let mut rng = SeededRng::new(0xE2E0);
    inputs.push(random_tensor(&[1, 3, 16, 16], &mut rng, 0.0, 1.0));
    let targets: Vec<i64> = (0..16 * 16).map(|_| rng.next_below(2) as i64).collect();
    case("micro_model_end_to_end", inputs, move |g, xs| {
        let bound = Bound::from_vars(
            names
                .iter()
                .cloned()
                .zip(xs[..names.len()].iter().copied())
                .collect(),
        );
        let image = xs[names.len()];
        let out = forward(g, &bound, image, &dims)?;
        g.cross_entropy(out.logits, &targets, None)
    })
}

/// The full suite: every op case plus the end-to-end micro model.
pub fn run_suite(eps: f64, tolerance: f64) -> Result<Vec<CheckReport>> {
    let mut reports = Vec::new();
    for c in op_cases() {
        reports.push(run_case(&c, eps, tolerance, 64, false)?);
    }
    reports.push(run_case(&micro_model_case(), eps, tolerance, 6, false)?);
    Ok(reports)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn individual_op_cases_pass() {
        for c in op_cases() {
            let r = run_case(&c, DEFAULT_EPS, DEFAULT_TOLERANCE, 64, false).unwrap();
            assert!(
                r.pass,
                "{} failed: max rel err {:.3e} over {} coords",
                r.name, r.max_rel_err, r.coords_checked
            );
        }
    }

    #[test]
    fn corrupted_gradient_is_detected() {
        let c = &op_cases()[0];
        let r = run_case(c, DEFAULT_EPS, DEFAULT_TOLERANCE, 64, true).unwrap();
        assert!(!r.pass);
    }

    #[test]
    fn micro_model_case_passes() {
        let r = run_case(&micro_model_case(), DEFAULT_EPS, DEFAULT_TOLERANCE, 3, false).unwrap();
        assert!(
            r.pass,
            "micro model failed: max rel err {:.3e} over {} coords",
            r.max_rel_err, r.coords_checked
        );
    }
}
