//! Central finite-difference verification of analytic gradients.

use crate::error::{Error, Result};
use crate::numerics::graph::{Graph, Var};
use crate::numerics::rng::Rng;
use crate::numerics::tensor::Tensor;

/// Outcome of a gradient check.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// `(parameter index, flat coordinate)` of the worst coordinate.
    pub worst: Option<(usize, usize)>,
    pub analytic: Vec<Tensor>,
    pub numeric: Vec<Tensor>,
}

/// `|a - b| / max(1e-8, |a| + |b|)`
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / (a.abs() + b.abs()).max(1e-8)
}

fn evaluate<F>(f: &F, params: &[Tensor], as_params: bool) -> Result<(Graph, Vec<Var>, Var)>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = params
        .iter()
        .map(|p| if as_params { g.param(p.clone()) } else { g.constant(p.clone()) })
        .collect();
    let out = f(&mut g, &vars)?;
    let v = g.value(out);
    if v.len() != 1 {
        return Err(Error::shape("grad_check", format!("objective must be scalar, got {:?}", v.shape())));
    }
    if !v.item().is_finite() {
        return Err(Error::NonFinite { context: "grad_check objective".into() });
    }
    Ok((g, vars, out))
}

/// Compares the analytic gradient of the scalar objective `f` to central
/// differences with step `eps`, coordinate by coordinate.
pub fn grad_check<F>(f: F, params: &[Tensor], eps: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let (g, vars, out) = evaluate(&f, params, true)?;
    let grads = g.backward(out)?;
    let analytic: Vec<Tensor> = vars
        .iter()
        .map(|v| grads.get(*v).cloned().expect("parameter gradient"))
        .collect();
    drop(g);

    let mut numeric = Vec::with_capacity(params.len());
    let mut max_rel_error = 0.0;
    let mut worst = None;
    let mut work: Vec<Tensor> = params.to_vec();
    for (pi, p) in params.iter().enumerate() {
        let mut fd = Tensor::zeros(p.shape().to_vec());
        for ci in 0..p.len() {
            let orig = p.data()[ci];
            work[pi].data_mut()[ci] = orig + eps;
            let (gp, _, op) = evaluate(&f, &work, false)?;
            let fp = gp.value(op).item();
            work[pi].data_mut()[ci] = orig - eps;
            let (gm, _, om) = evaluate(&f, &work, false)?;
            let fm = gm.value(om).item();
            work[pi].data_mut()[ci] = orig;
            let d = (fp - fm) / (2.0 * eps);
            fd.data_mut()[ci] = d;
            let e = relative_error(analytic[pi].data()[ci], d);
            if e > max_rel_error || worst.is_none() {
                max_rel_error = e.max(max_rel_error);
                worst = Some((pi, ci));
            }
        }
        numeric.push(fd);
    }
    Ok(GradCheckReport { max_rel_error, worst, analytic, numeric })
}

fn random_tensor(rng: &mut Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.uniform_range(-1.0, 1.0)).collect()).expect("shape")
}

/// Reduces `x` to a scalar through a fixed random weighting so every output
/// coordinate contributes a distinct sensitivity.
fn project(g: &mut Graph, x: Var, rng: &mut Rng) -> Result<Var> {
    let w = random_tensor(rng, &g.shape(x).to_vec());
    let w = g.constant(w);
    let p = g.mul(x, w)?;
    Ok(g.sum(p))
}

/// Gradient check of every differentiable op on random small shapes.
///
/// `fault` injects a sign flip into the named op's backward rule, which the
/// corresponding case must then report.
pub fn op_suite(seed: u64, fault: Option<&str>) -> Result<Vec<(&'static str, GradCheckReport)>> {
    type Case = (&'static str, Vec<Vec<usize>>, fn(&mut Graph, &[Var]) -> Result<Var>);
    let cases: Vec<Case> = vec![
        ("add", vec![vec![2, 3], vec![2, 3]], |g, v| g.add(v[0], v[1])),
        ("sub", vec![vec![2, 3], vec![2, 3]], |g, v| g.sub(v[0], v[1])),
        ("mul", vec![vec![2, 3], vec![2, 3]], |g, v| g.mul(v[0], v[1])),
        ("add_bias", vec![vec![3, 4], vec![4]], |g, v| g.add_bias(v[0], v[1])),
        ("scale", vec![vec![5]], |g, v| Ok(g.scale(v[0], -1.7))),
        ("matmul", vec![vec![3, 4], vec![4, 2]], |g, v| g.matmul(v[0], v[1])),
        ("transpose", vec![vec![2, 3, 4]], |g, v| g.transpose(v[0])),
        ("softmax", vec![vec![3, 5]], |g, v| g.softmax(v[0], 1)),
        ("layer_norm", vec![vec![3, 6], vec![6], vec![6]], |g, v| g.layer_norm(v[0], v[1], v[2], 1e-5)),
        ("gelu", vec![vec![2, 5]], |g, v| Ok(g.gelu(v[0]))),
        ("gather_rows", vec![vec![5, 3]], |g, v| g.gather_rows(v[0], &[4, 0, 2, 0])),
        ("scatter_rows", vec![vec![2, 3], vec![3]], |g, v| g.scatter_rows(v[0], v[1], &[1, 3], 5)),
        ("concat_rows", vec![vec![2, 3], vec![1, 3]], |g, v| g.concat_rows(&[v[0], v[1]])),
        ("split_heads", vec![vec![3, 4]], |g, v| g.split_heads(v[0], 2)),
        ("merge_heads", vec![vec![2, 3, 2]], |g, v| g.merge_heads(v[0])),
        ("sum", vec![vec![4]], |g, v| {
            let sq = g.mul(v[0], v[0])?;
            Ok(g.sum(sq))
        }),
        ("mse", vec![vec![3, 4], vec![3, 4]], |g, v| g.mse(v[0], v[1])),
    ];
    let mut out = Vec::with_capacity(cases.len());
    for (i, (name, shapes, op)) in cases.into_iter().enumerate() {
        let mut rng = Rng::keyed(seed, name, i as u64);
        let params: Vec<Tensor> = shapes.iter().map(|s| random_tensor(&mut rng, s)).collect();
        let proj_seed = rng.child("projection");
        let report = grad_check(
            |g, v| {
                if let Some(op_name) = fault {
                    g.inject_sign_flip(op_name)?;
                }
                let y = op(g, v)?;
                g.clear_sign_flip();
                if g.value(y).len() == 1 {
                    Ok(y)
                } else {
                    project(g, y, &mut proj_seed.clone())
                }
            },
            &params,
            1e-5,
        )?;
        out.push((name, report));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_of_squares_passes() {
        let x = Tensor::new([2], vec![1.0, 2.0]).unwrap();
        let r = grad_check(
            |g, v| {
                let sq = g.mul(v[0], v[0])?;
                Ok(g.sum(sq))
            },
            &[x],
            1e-5,
        )
        .unwrap();
        assert_eq!(r.analytic[0].data(), &[2.0, 4.0]);
        assert!(r.max_rel_error < 1e-9, "{}", r.max_rel_error);
    }

    #[test]
    fn constant_objective_has_zero_gradient() {
        let x = Tensor::new([3], vec![0.5, -1.0, 2.0]).unwrap();
        let r = grad_check(
            |g, _| Ok(g.constant(Tensor::scalar(4.2))),
            &[x],
            1e-5,
        )
        .unwrap();
        assert!(r.analytic[0].data().iter().all(|&v| v == 0.0));
        assert!(r.numeric[0].data().iter().all(|&v| v == 0.0));
        assert_eq!(r.max_rel_error, 0.0);
    }

    #[test]
    fn non_finite_objective_is_an_error() {
        let x = Tensor::new([1], vec![0.0]).unwrap();
        let r = grad_check(|g, _| Ok(g.constant(Tensor::scalar(f64::NAN))), &[x], 1e-5);
        assert!(matches!(r, Err(Error::NonFinite { .. })));
    }

    #[test]
    fn every_op_passes() {
        for (name, report) in op_suite(11, None).unwrap() {
            assert!(report.max_rel_error < 1e-6, "{name}: {}", report.max_rel_error);
        }
    }

    #[test]
    fn sign_flip_is_caught_and_named() {
        for &op in crate::numerics::graph::DIFFERENTIABLE_OPS {
            let failing: Vec<&str> = op_suite(11, Some(op))
                .unwrap()
                .into_iter()
                .filter(|(_, r)| r.max_rel_error > 1e-6)
                .map(|(n, _)| n)
                .collect();
            assert!(failing.contains(&op), "flip in {op} not detected: {failing:?}");
        }
    }

    #[test]
    fn matmul_gradient_is_b_row_sums() {
        let mut rng = Rng::new(5, 0);
        let a = random_tensor(&mut rng, &[3, 4]);
        let b = random_tensor(&mut rng, &[4, 2]);
        let r = grad_check(
            |g, v| {
                let c = g.matmul(v[0], v[1])?;
                Ok(g.sum(c))
            },
            &[a, b.clone()],
            1e-5,
        )
        .unwrap();
        for i in 0..3 {
            for k in 0..4 {
                let expect: f64 = b.row(k).iter().sum();
                assert!((r.analytic[0].data()[i * 4 + k] - expect).abs() < 1e-12);
                assert!((r.numeric[0].data()[i * 4 + k] - expect).abs() < 1e-8);
            }
        }
        assert!(r.max_rel_error < 1e-6);
    }
}
