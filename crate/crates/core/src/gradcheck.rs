//! Central finite-difference checks for graph gradients.

use std::rc::Rc;

use rand::Rng;

use crate::autodiff::{Graph, Var};
use crate::dualpath::ChunkSpec;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Largest norm-wise relative error over all inputs of one check.
#[derive(Clone, Debug, PartialEq)]
pub struct CheckReport {
    pub worst_input: String,
    pub rel_error: f64,
}

/// `|a - n| / max(|a|, |n|, 1e-8)` with Euclidean norms.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let norm = |v: &mut dyn Iterator<Item = f64>| v.map(|x| x * x).sum::<f64>().sqrt();
    let diff = norm(&mut analytic.iter().zip(numeric).map(|(a, n)| a - n));
    let scale = norm(&mut analytic.iter().copied())
        .max(norm(&mut numeric.iter().copied()))
        .max(1e-8);
    diff / scale
}

/// Compares reverse-mode gradients of the scalar built by `build` against
/// central differences with step `step`, perturbing every element of every
/// input. `build` receives the input vars in the order given.
pub fn gradient_check<F>(inputs: &[(&str, Tensor<f64>)], step: f64, build: F) -> Result<CheckReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let eval = |vals: &[Tensor<f64>]| -> Result<(Graph<f64>, Vec<Var>, Var)> {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().zip(vals).map(|((n, _), t)| g.param(n, t.clone())).collect();
        let out = build(&mut g, &vars)?;
        Ok((g, vars, out))
    };
    let base: Vec<Tensor<f64>> = inputs.iter().map(|(_, t)| t.clone()).collect();
    let (g, vars, out) = eval(&base)?;
    let grads = g.backward(out)?;
    let mut report = CheckReport {
        worst_input: String::new(),
        rel_error: 0.0,
    };
    for (k, (name, t)) in inputs.iter().enumerate() {
        let analytic = grads
            .get(vars[k])
            .map(|t| t.data().to_vec())
            .unwrap_or_else(|| vec![0.0; t.numel()]);
        let mut numeric = vec![0.0; t.numel()];
        for (i, slot) in numeric.iter_mut().enumerate() {
            let at = |delta: f64| -> Result<f64> {
                let mut vals = base.clone();
                vals[k].data_mut()[i] += delta;
                let (g, _, out) = eval(&vals)?;
                Ok(g.value(out).item())
            };
            *slot = (at(step)? - at(-step)?) / (2.0 * step);
        }
        let err = relative_error(&analytic, &numeric);
        if !err.is_finite() {
            return Err(Error::contract(format!("non-finite gradient error for {name}")));
        }
        if err >= report.rel_error {
            report = CheckReport {
                worst_input: name.to_string(),
                rel_error: err,
            };
        }
    }
    Ok(report)
}

/// Uniform samples in `[-1, 1)`.
pub fn random_tensor<R: Rng>(shape: &[usize], rng: &mut R) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).expect("shape matches data")
}

/// Input domain for a gradient case.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Domain {
    /// Uniform in `[-1, 1)`.
    Signed,
    /// `0.5 + |x|`, for logarithms, roots and divisors.
    Positive,
}

/// One differentiable op under test: random inputs of `shapes` feed `build`,
/// whose output is reduced to a scalar with fixed uneven weights.
pub struct OpCase {
    pub name: &'static str,
    pub shapes: Vec<Vec<usize>>,
    pub domain: Vec<Domain>,
    pub build: fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
}

/// Scalar `Σ_i c_i·x_i` with non-constant weights, so that ops whose plain
/// sum is constant (softmax, normalisation) still get a nonzero gradient.
pub fn weighted_sum(g: &mut Graph<f64>, v: Var) -> Result<Var> {
    let shape = g.shape(v).to_vec();
    let w = g.constant(Tensor::from_fn(&shape, |i| (1.3 * i as f64 + 0.7).sin()));
    let p = g.mul(v, w)?;
    g.sum(p)
}

fn case(
    name: &'static str,
    inputs: &[(&[usize], Domain)],
    build: fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
) -> OpCase {
    OpCase {
        name,
        shapes: inputs.iter().map(|(s, _)| s.to_vec()).collect(),
        domain: inputs.iter().map(|(_, d)| *d).collect(),
        build,
    }
}

/// Every differentiable op of the engine with small shapes.
pub fn op_cases() -> Vec<OpCase> {
    use Domain::{Positive as P, Signed as S};
    fn chunk() -> ChunkSpec {
        ChunkSpec::new(5, 2, 1).expect("valid chunking")
    }
    vec![
        case("matmul", &[(&[3, 4], S), (&[4, 2], S)], |g, v| g.matmul(v[0], v[1])),
        case("matmul_transposed", &[(&[4, 3], S), (&[2, 4], S)], |g, v| g.matmul_t(v[0], v[1], true, true)),
        case("batched_matmul", &[(&[2, 3, 4], S), (&[2, 4, 2], S)], |g, v| g.matmul(v[0], v[1])),
        case("batched_matmul_shared", &[(&[2, 3, 4], S), (&[4, 2], S)], |g, v| g.matmul(v[0], v[1])),
        case("batched_matmul_bt", &[(&[2, 3, 4], S), (&[2, 5, 4], S)], |g, v| {
            g.matmul_t(v[0], v[1], false, true)
        }),
        case("linear", &[(&[3, 4], S), (&[2, 4], S), (&[2], S)], |g, v| g.linear(v[0], v[1], Some(v[2]))),
        case("conv1d", &[(&[2, 9], S), (&[3, 2, 3], S)], |g, v| g.conv1d(v[0], v[1], 2)),
        case("conv_transpose1d", &[(&[2, 4], S), (&[2, 3, 4], S)], |g, v| g.conv_transpose1d(v[0], v[1], 2)),
        case("relu", &[(&[3, 4], S)], |g, v| g.relu(v[0])),
        case("prelu", &[(&[3, 4], S), (&[1], S)], |g, v| g.prelu(v[0], v[1])),
        case("sigmoid", &[(&[3, 4], S)], |g, v| g.sigmoid(v[0])),
        case("tanh", &[(&[3, 4], S)], |g, v| g.tanh(v[0])),
        case("softmax", &[(&[3, 4], S)], |g, v| g.softmax(v[0])),
        case("masked_softmax", &[(&[2, 3, 3], S)], |g, v| {
            let mask: Vec<bool> = (0..18).map(|i| i % 3 != 2 || i % 5 == 0).collect();
            g.masked_softmax(v[0], Rc::new(mask))
        }),
        case("layer_norm", &[(&[3, 4], S), (&[4], S), (&[4], S)], |g, v| {
            g.layer_norm(v[0], v[1], v[2], 1e-5)
        }),
        case("add", &[(&[3, 4], S), (&[3, 4], S)], |g, v| g.add(v[0], v[1])),
        case("add_broadcast", &[(&[2, 3, 4], S), (&[4], S)], |g, v| g.add(v[0], v[1])),
        case("sub", &[(&[3, 4], S), (&[3, 4], S)], |g, v| g.sub(v[0], v[1])),
        case("mul", &[(&[3, 4], S), (&[3, 4], S)], |g, v| g.mul(v[0], v[1])),
        case("mul_broadcast", &[(&[2, 3, 4], S), (&[3, 4], S)], |g, v| g.mul(v[0], v[1])),
        case("div", &[(&[3, 4], S), (&[3, 4], P)], |g, v| g.div(v[0], v[1])),
        case("window_mean_std", &[(&[6, 3], S)], |g, v| g.window_mean_std(v[0], 3, 1e-6)),
        case("reshape", &[(&[3, 4], S)], |g, v| g.reshape(v[0], &[2, 6])),
        case("permute", &[(&[2, 3, 4], S)], |g, v| g.permute(v[0], &[2, 0, 1])),
        case("transpose", &[(&[2, 3, 4], S)], |g, v| g.transpose(v[0], 0, 2)),
        case("slice", &[(&[3, 5], S)], |g, v| g.slice(v[0], 1, 1, 3)),
        case("concat", &[(&[2, 3], S), (&[2, 2], S)], |g, v| g.concat(&[v[0], v[1]], 1)),
        case("exp", &[(&[3, 4], S)], |g, v| g.exp(v[0])),
        case("log", &[(&[3, 4], P)], |g, v| g.log(v[0])),
        case("sqrt", &[(&[3, 4], P)], |g, v| g.sqrt(v[0])),
        case("square", &[(&[3, 4], S)], |g, v| g.square(v[0])),
        case("neg", &[(&[3, 4], S)], |g, v| g.neg(v[0])),
        case("scale", &[(&[3, 4], S)], |g, v| g.scale(v[0], -1.7)),
        case("add_scalar", &[(&[3, 4], S)], |g, v| g.add_scalar(v[0], 0.3)),
        case("clamp", &[(&[3, 4], S)], |g, v| g.clamp(v[0], -0.5, 0.5)),
        case("sum", &[(&[3, 4], S)], |g, v| {
            let s = g.sum(v[0])?;
            g.square(s)
        }),
        case("mean", &[(&[3, 4], S)], |g, v| {
            let s = g.mean(v[0])?;
            g.square(s)
        }),
        case("sum_last", &[(&[3, 4], S)], |g, v| g.sum_last(v[0])),
        case("unfold", &[(&[5, 3], S)], |g, v| g.unfold(v[0], chunk(), Some(&[0.1, -0.2, 0.3]))),
        case("fold", &[(&[chunk().n_chunks(), 2, 3], S)], |g, v| g.fold(v[0], chunk())),
    ]
}

/// Runs `case` on fresh random inputs.
pub fn check_case<R: Rng>(case: &OpCase, step: f64, rng: &mut R) -> Result<CheckReport> {
    let inputs: Vec<(&str, Tensor<f64>)> = case
        .shapes
        .iter()
        .zip(&case.domain)
        .enumerate()
        .map(|(i, (s, d))| {
            let t = random_tensor(s, rng);
            let t = match d {
                Domain::Signed => t,
                Domain::Positive => t.map(|x| 0.5 + x.abs()),
            };
            (INPUT_NAMES[i], t)
        })
        .collect();
    gradient_check(&inputs, step, |g, v| {
        let y = (case.build)(g, v)?;
        weighted_sum(g, y)
    })
}

const INPUT_NAMES: [&str; 4] = ["a", "b", "c", "d"];

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relative_error_definition() {
        assert_eq!(relative_error(&[1.0, 0.0], &[1.0, 0.0]), 0.0);
        assert!((relative_error(&[2.0], &[1.0]) - 0.5).abs() < 1e-15);
        assert_eq!(relative_error(&[0.0], &[0.0]), 0.0);
    }

    #[test]
    fn every_op_case_passes_once() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        for c in op_cases() {
            let r = check_case(&c, 1e-5, &mut rng).unwrap();
            assert!(r.rel_error < 1e-4, "{}: {r:?}", c.name);
        }
    }

    #[test]
    fn detects_wrong_gradient() {
        // detach severs the path, so the analytic gradient of x*detach(x) is x, not 2x.
        let x = Tensor::from_f64(&[1], &[0.7]).unwrap();
        let r = gradient_check(&[("x", x)], 1e-5, |g, v| {
            let d = g.detach(v[0]);
            let y = g.mul(v[0], d)?;
            g.sum(y)
        })
        .unwrap();
        assert!(r.rel_error > 0.4);
    }
}
