//! Central finite-difference gradient checking.
//!
//! Checks run in 64-bit mode: finite differences need the headroom. The
//! reported error for a coordinate is `|analytic - numeric| / max(1, |analytic|)`
//! and a check's result is the maximum over all coordinates of all inputs.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};

/// Shape and base-point values for one input of a checked function.
#[derive(Clone, Debug)]
pub struct InputSpec {
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

impl InputSpec {
    pub fn new(shape: &[usize], values: Vec<f64>) -> Self {
        InputSpec {
            shape: shape.to_vec(),
            values,
        }
    }
}

const CHECK_SEED: u64 = 0x5EED;

fn eval<B>(build: &B, inputs: &[InputSpec]) -> Result<f64>
where
    B: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new(CHECK_SEED);
    let vars: Vec<Var> = inputs
        .iter()
        .map(|sp| tape.leaf(&sp.shape, &sp.values))
        .collect::<Result<_>>()?;
    let loss = build(&mut tape, &vars)?;
    let v = tape.value_scalar(loss)?;
    if !v.is_finite() {
        return Err(Error::Numeric(format!("checked function returned {v}")));
    }
    Ok(v)
}

/// Compares the tape's gradients of a scalar-valued graph against central
/// finite differences with step `epsilon`, over every coordinate of every
/// input. Returns the maximum relative error.
///
/// The builder runs on a fresh tape per evaluation; tapes share one seed, so
/// any dropout masks or noise draws inside the graph are identical across
/// evaluations and the function being differenced is well defined.
pub fn gradcheck<B>(build: &B, inputs: &[InputSpec], epsilon: f64) -> Result<f64>
where
    B: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    if epsilon <= 0.0 {
        return Err(Error::Config(format!("gradcheck epsilon {epsilon} must be > 0")));
    }

    // Analytic pass.
    let mut tape = Tape::new(CHECK_SEED);
    let vars: Vec<Var> = inputs
        .iter()
        .map(|sp| tape.leaf(&sp.shape, &sp.values))
        .collect::<Result<_>>()?;
    let loss = build(&mut tape, &vars)?;
    let base = tape.value_scalar(loss)?;
    if !base.is_finite() {
        return Err(Error::Numeric(format!("checked function returned {base}")));
    }
    tape.backward(loss)?;
    let analytic: Vec<Vec<f64>> = vars.iter().map(|&v| tape.grad(v).to_vec()).collect();

    let mut max_err = 0.0f64;
    let mut point = inputs.to_vec();
    for (k, spec) in inputs.iter().enumerate() {
        for j in 0..spec.values.len() {
            let orig = spec.values[j];
            point[k].values[j] = orig + epsilon;
            let fp = eval(build, &point)?;
            point[k].values[j] = orig - epsilon;
            let fm = eval(build, &point)?;
            point[k].values[j] = orig;
            let numeric = (fp - fm) / (2.0 * epsilon);
            let a = analytic[k][j];
            let err = (a - numeric).abs() / a.abs().max(1.0);
            max_err = max_err.max(err);
        }
    }
    Ok(max_err)
}

/// Same comparison for a scalar function of one flat vector whose analytic
/// gradient was computed elsewhere (used for whole-model checks over a
/// parameter store).
pub fn gradcheck_flat(
    f: &mut dyn FnMut(&[f64]) -> Result<f64>,
    point: &[f64],
    analytic: &[f64],
    epsilon: f64,
) -> Result<f64> {
    assert_eq!(point.len(), analytic.len());
    let mut x = point.to_vec();
    let mut max_err = 0.0f64;
    for j in 0..x.len() {
        let orig = x[j];
        x[j] = orig + epsilon;
        let fp = f(&x)?;
        x[j] = orig - epsilon;
        let fm = f(&x)?;
        x[j] = orig;
        if !fp.is_finite() || !fm.is_finite() {
            return Err(Error::Numeric("non-finite value during finite differences".into()));
        }
        let numeric = (fp - fm) / (2.0 * epsilon);
        let err = (analytic[j] - numeric).abs() / analytic[j].abs().max(1.0);
        max_err = max_err.max(err);
    }
    Ok(max_err)
}

// ---- primitive suite --------------------------------------------------

/// Outcome of one suite entry.
#[derive(Debug, Clone)]
pub struct SuiteCheck {
    pub name: &'static str,
    pub max_rel_err: f64,
    pub tolerance: f64,
}

impl SuiteCheck {
    pub fn passed(&self) -> bool {
        self.max_rel_err < self.tolerance
    }
}

fn uniform(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(lo..hi)).collect()
}

/// Uniform over (-hi, -lo)+(lo, hi): keeps piecewise-linear ops away from
/// their kinks, where finite differences are meaningless.
fn away_from_zero(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let m = rng.gen_range(lo..hi);
            if rng.gen::<bool>() {
                m
            } else {
                -m
            }
        })
        .collect()
}

/// Runs every differentiable primitive through `points` random-point
/// gradient checks and verifies the gradient-reversal identity separately
/// (its backward is deliberately not the derivative of its forward, so it is
/// checked against `-lambda` times the identity-path gradient instead).
pub fn primitive_suite(points: usize, epsilon: f64, seed: u64) -> Result<Vec<SuiteCheck>> {
    let tol = 1e-4;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();

    // Each entry builds a scalar composition exercising exactly one primitive.
    type Builder = fn(&mut Tape<f64>, &[Var]) -> Result<Var>;
    let run = |name: &'static str,
                   out: &mut Vec<SuiteCheck>,
                   rng: &mut ChaCha8Rng,
                   make_inputs: &mut dyn FnMut(&mut ChaCha8Rng) -> Vec<InputSpec>,
                   build: Builder|
     -> Result<()> {
        let mut worst = 0.0f64;
        for _ in 0..points {
            let inputs = make_inputs(rng);
            worst = worst.max(gradcheck(&build, &inputs, epsilon)?);
        }
        out.push(SuiteCheck {
            name,
            max_rel_err: worst,
            tolerance: tol,
        });
        Ok(())
    };

    run(
        "matmul",
        &mut out,
        &mut rng,
        &mut |rng| {
            vec![
                InputSpec::new(&[3, 3], uniform(rng, 9, -2.0, 2.0)),
                InputSpec::new(&[3, 3], uniform(rng, 9, -2.0, 2.0)),
            ]
        },
        |t, v| {
            let p = t.matmul(v[0], v[1])?;
            let s = t.square(p);
            Ok(t.mean_all(s))
        },
    )?;

    run(
        "add",
        &mut out,
        &mut rng,
        &mut |rng| {
            vec![
                InputSpec::new(&[2, 3], uniform(rng, 6, -2.0, 2.0)),
                InputSpec::new(&[1, 3], uniform(rng, 3, -2.0, 2.0)),
            ]
        },
        |t, v| {
            let a = t.add(v[0], v[1])?;
            let s = t.square(a);
            Ok(t.mean_all(s))
        },
    )?;

    run(
        "sub",
        &mut out,
        &mut rng,
        &mut |rng| {
            vec![
                InputSpec::new(&[2, 3], uniform(rng, 6, -2.0, 2.0)),
                InputSpec::new(&[2, 1], uniform(rng, 2, -2.0, 2.0)),
            ]
        },
        |t, v| {
            let a = t.sub(v[0], v[1])?;
            let s = t.square(a);
            Ok(t.mean_all(s))
        },
    )?;

    run(
        "mul",
        &mut out,
        &mut rng,
        &mut |rng| {
            vec![
                InputSpec::new(&[2, 3], uniform(rng, 6, -2.0, 2.0)),
                InputSpec::new(&[2, 3], uniform(rng, 6, -2.0, 2.0)),
            ]
        },
        |t, v| {
            let a = t.mul(v[0], v[1])?;
            let s = t.square(a);
            Ok(t.mean_all(s))
        },
    )?;

    run(
        "relu",
        &mut out,
        &mut rng,
        &mut |rng| vec![InputSpec::new(&[2, 4], away_from_zero(rng, 8, 0.05, 2.0))],
        |t, v| {
            let r = t.relu(v[0]);
            let s = t.square(r);
            Ok(t.mean_all(s))
        },
    )?;

    run(
        "sigmoid",
        &mut out,
        &mut rng,
        &mut |rng| vec![InputSpec::new(&[2, 4], uniform(rng, 8, -3.0, 3.0))],
        |t, v| {
            let r = t.sigmoid(v[0]);
            let s = t.square(r);
            Ok(t.mean_all(s))
        },
    )?;

    run(
        "tanh",
        &mut out,
        &mut rng,
        &mut |rng| vec![InputSpec::new(&[2, 4], uniform(rng, 8, -3.0, 3.0))],
        |t, v| {
            let r = t.tanh(v[0]);
            let s = t.square(r);
            Ok(t.mean_all(s))
        },
    )?;

    run(
        "exp",
        &mut out,
        &mut rng,
        &mut |rng| vec![InputSpec::new(&[2, 4], uniform(rng, 8, -2.0, 2.0))],
        |t, v| {
            let r = t.exp(v[0]);
            Ok(t.mean_all(r))
        },
    )?;

    run(
        "log",
        &mut out,
        &mut rng,
        &mut |rng| vec![InputSpec::new(&[2, 4], uniform(rng, 8, 0.1, 3.0))],
        |t, v| {
            let r = t.log(v[0])?;
            let s = t.square(r);
            Ok(t.mean_all(s))
        },
    )?;

    run(
        "square",
        &mut out,
        &mut rng,
        &mut |rng| vec![InputSpec::new(&[2, 4], uniform(rng, 8, -2.0, 2.0))],
        |t, v| {
            let r = t.square(v[0]);
            Ok(t.mean_all(r))
        },
    )?;

    run(
        "softmax",
        &mut out,
        &mut rng,
        &mut |rng| {
            vec![
                InputSpec::new(&[5], uniform(rng, 5, -3.0, 3.0)),
                InputSpec::new(&[5], uniform(rng, 5, -2.0, 2.0)),
            ]
        },
        |t, v| {
            let sm = t.softmax(v[0], 0)?;
            let p = t.mul(sm, v[1])?;
            Ok(t.sum_all(p))
        },
    )?;

    run(
        "concat",
        &mut out,
        &mut rng,
        &mut |rng| {
            vec![
                InputSpec::new(&[2, 2], uniform(rng, 4, -2.0, 2.0)),
                InputSpec::new(&[2, 3], uniform(rng, 6, -2.0, 2.0)),
            ]
        },
        |t, v| {
            let c = t.concat(&[v[0], v[1]], 1)?;
            let s = t.square(c);
            Ok(t.mean_all(s))
        },
    )?;

    run(
        "narrow",
        &mut out,
        &mut rng,
        &mut |rng| vec![InputSpec::new(&[3, 4], uniform(rng, 12, -2.0, 2.0))],
        |t, v| {
            let c = t.narrow(v[0], 1, 1, 2)?;
            let r = t.narrow(c, 0, 0, 2)?;
            let s = t.square(r);
            Ok(t.mean_all(s))
        },
    )?;

    run(
        "mean",
        &mut out,
        &mut rng,
        &mut |rng| vec![InputSpec::new(&[3, 4], uniform(rng, 12, -2.0, 2.0))],
        |t, v| {
            let m1 = t.mean_axis(v[0], 1)?;
            let m0 = t.mean_axis(v[0], 0)?;
            let s1 = t.square(m1);
            let s0 = t.square(m0);
            let a = t.mean_all(s1);
            let b = t.mean_all(s0);
            t.add(a, b)
        },
    )?;

    run(
        "sum",
        &mut out,
        &mut rng,
        &mut |rng| vec![InputSpec::new(&[3, 4], uniform(rng, 12, -1.0, 1.0))],
        |t, v| {
            let m1 = t.sum_axis(v[0], 1)?;
            let s1 = t.square(m1);
            let a = t.sum_all(s1);
            let sq = t.square(v[0]);
            let b = t.sum_all(sq);
            t.add(a, b)
        },
    )?;

    run(
        "scale_addscalar",
        &mut out,
        &mut rng,
        &mut |rng| vec![InputSpec::new(&[2, 3], uniform(rng, 6, -2.0, 2.0))],
        |t, v| {
            let a = t.scale(v[0], -1.7);
            let b = t.add_scalar(a, 0.3);
            let s = t.square(b);
            Ok(t.mean_all(s))
        },
    )?;

    run(
        "clamp",
        &mut out,
        &mut rng,
        &mut |rng| {
            // keep points off the clamp corners at +-1
            let vals: Vec<f64> = (0..6)
                .map(|_| loop {
                    let x: f64 = rng.gen_range(-2.0..2.0);
                    if (x.abs() - 1.0).abs() > 0.05 {
                        break x;
                    }
                })
                .collect();
            vec![InputSpec::new(&[2, 3], vals)]
        },
        |t, v| {
            let c = t.clamp(v[0], -1.0, 1.0);
            let s = t.square(c);
            Ok(t.mean_all(s))
        },
    )?;

    run(
        "dropout",
        &mut out,
        &mut rng,
        &mut |rng| vec![InputSpec::new(&[2, 4], uniform(rng, 8, -2.0, 2.0))],
        |t, v| {
            let d = t.dropout(v[0], 0.4, true)?;
            let s = t.square(d);
            Ok(t.mean_all(s))
        },
    )?;

    // grad_reverse: forward identity by construction; backward must equal
    // -lambda times the gradient of the same graph without the reversal.
    {
        let lambda = 1.7;
        let mut worst = 0.0f64;
        for _ in 0..points {
            let x = uniform(&mut rng, 6, -2.0, 2.0);
            let grads = |use_grl: bool| -> Result<Vec<f64>> {
                let mut t = Tape::new(CHECK_SEED);
                let v = t.leaf(&[2, 3], &x)?;
                let h = if use_grl { t.grad_reverse(v, lambda) } else { v };
                let s = t.square(h);
                let m = t.mean_all(s);
                t.backward(m)?;
                Ok(t.grad(v).to_vec())
            };
            let with = grads(true)?;
            let without = grads(false)?;
            for (gw, gi) in with.iter().zip(&without) {
                let want = -lambda * gi;
                worst = worst.max((gw - want).abs() / want.abs().max(1.0));
            }
        }
        out.push(SuiteCheck {
            name: "grad_reverse",
            max_rel_err: worst,
            tolerance: tol,
        });
    }

    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_of_squares_checks_tightly() {
        let build = |t: &mut Tape<f64>, v: &[Var]| -> Result<Var> {
            let s = t.square(v[0]);
            Ok(t.sum_all(s))
        };
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..10 {
            let x: Vec<f64> = (0..6).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let err = gradcheck(&build, &[InputSpec::new(&[2, 3], x)], 1e-4).unwrap();
            assert!(err < 1e-7, "err = {err}");
        }
    }

    #[test]
    fn softmax_dot_checks() {
        let build = |t: &mut Tape<f64>, v: &[Var]| -> Result<Var> {
            let sm = t.softmax(v[0], 0)?;
            let p = t.mul(sm, v[1])?;
            Ok(t.sum_all(p))
        };
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..10 {
            let x: Vec<f64> = (0..5).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let w: Vec<f64> = (0..5).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let err = gradcheck(
                &build,
                &[InputSpec::new(&[5], x), InputSpec::new(&[5], w)],
                1e-4,
            )
            .unwrap();
            assert!(err < 1e-6, "err = {err}");
        }
    }

    #[test]
    fn softmax_jacobian_matches_finite_differences() {
        // one output coordinate at a time gives the full Jacobian
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..5 {
            let x: Vec<f64> = (0..5).map(|_| rng.gen_range(-2.0..2.0)).collect();
            for k in 0..5 {
                let build = move |t: &mut Tape<f64>, v: &[Var]| -> Result<Var> {
                    let sm = t.softmax(v[0], 0)?;
                    let row = t.leaf(&[5], &{
                        let mut e = vec![0.0; 5];
                        e[k] = 1.0;
                        e
                    })?;
                    let p = t.mul(sm, row)?;
                    Ok(t.sum_all(p))
                };
                let err = gradcheck(&build, &[InputSpec::new(&[5], x.clone())], 1e-4).unwrap();
                assert!(err < 1e-6, "err = {err}");
            }
        }
    }

    #[test]
    fn composite_mlp_loss_checks() {
        // two-layer MLP with tanh, mean-square loss against a constant target
        let build = |t: &mut Tape<f64>, v: &[Var]| -> Result<Var> {
            let h = t.matmul(v[0], v[1])?;
            let h = t.add(h, v[2])?;
            let h = t.tanh(h);
            let o = t.matmul(h, v[3])?;
            let target = t.leaf(&[2, 1], &[0.3, -0.8])?;
            let d = t.sub(o, target)?;
            let s = t.square(d);
            Ok(t.mean_all(s))
        };
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mk = |rng: &mut ChaCha8Rng, n: usize| -> Vec<f64> {
            (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
        };
        let inputs = vec![
            InputSpec::new(&[2, 3], mk(&mut rng, 6)),
            InputSpec::new(&[3, 4], mk(&mut rng, 12)),
            InputSpec::new(&[1, 4], mk(&mut rng, 4)),
            InputSpec::new(&[4, 1], mk(&mut rng, 4)),
        ];
        let err = gradcheck(&build, &inputs, 1e-4).unwrap();
        assert!(err < 1e-4, "err = {err}");
    }

    #[test]
    fn non_finite_value_is_reported() {
        let build = |t: &mut Tape<f64>, v: &[Var]| -> Result<Var> {
            let e = t.exp(v[0]);
            let e = t.exp(e);
            let e = t.exp(e);
            Ok(t.sum_all(e))
        };
        let err = gradcheck(&build, &[InputSpec::new(&[1, 1], vec![100.0])], 1e-4);
        assert!(matches!(err, Err(Error::Numeric(_))));
    }

    #[test]
    fn full_primitive_suite_passes() {
        let checks = primitive_suite(20, 1e-4, 0xC0FFEE).unwrap();
        for c in &checks {
            assert!(c.passed(), "{}: max err {}", c.name, c.max_rel_err);
        }
    }
}
