//! Central-difference gradient verification in 64-bit mode.

use crate::autograd::{Graph, OpKind, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// A scalar-valued composite of graph operations over the supplied parameters.
pub trait Composite: for<'g> Fn(&mut Graph<'g, f64>, &[Var]) -> Result<Var> {}
impl<F> Composite for F where F: for<'g> Fn(&mut Graph<'g, f64>, &[Var]) -> Result<Var> {}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradcheckReport {
    pub max_rel_error: f64,
    pub coordinates: usize,
}

fn evaluate(f: &impl Composite, params: &[Tensor<f64>]) -> Result<f64> {
    let mut g = Graph::new();
    let vars: Vec<Var> = params.iter().map(|p| g.constant_ref(p)).collect();
    let out = f(&mut g, &vars)?;
    if g.value(out).numel() != 1 {
        return Err(Error::Contract(format!("gradcheck needs a scalar function, got {:?}", g.shape(out))));
    }
    Ok(g.value(out).item())
}

/// Max over coordinates of `|analytic − numeric| / max(1, |analytic|, |numeric|)`.
pub fn gradcheck(f: impl Composite, params: &[Tensor<f64>], eps: f64) -> Result<f64> {
    gradcheck_report(f, params, eps, None).map(|r| r.max_rel_error)
}

pub fn gradcheck_report(f: impl Composite, params: &[Tensor<f64>], eps: f64, fault: Option<OpKind>) -> Result<GradcheckReport> {
    if !(1e-7..=1e-3).contains(&eps) {
        return Err(Error::Contract(format!("gradcheck eps {eps} outside [1e-7, 1e-3]")));
    }
    let first = evaluate(&f, params)?;
    let second = evaluate(&f, params)?;
    if first.to_bits() != second.to_bits() {
        return Err(Error::Contract(format!("function is not deterministic ({first} vs {second})")));
    }

    let mut g = Graph::new();
    if let Some(kind) = fault {
        g.inject_fault(kind);
    }
    let vars: Vec<Var> = params.iter().map(|p| g.leaf_ref(p)).collect();
    let out = f(&mut g, &vars)?;
    g.backward(out)?;
    let analytic: Vec<Tensor<f64>> = vars.iter().map(|&v| g.grad(v).expect("leaf gradient")).collect();
    drop(g);

    let mut worst = 0.0f64;
    let mut coordinates = 0;
    let mut probe: Vec<Tensor<f64>> = params.to_vec();
    for (pi, grad) in analytic.iter().enumerate() {
        for ci in 0..params[pi].numel() {
            let orig = params[pi].data()[ci];
            probe[pi].data_mut()[ci] = orig + eps;
            let up = evaluate(&f, &probe)?;
            probe[pi].data_mut()[ci] = orig - eps;
            let down = evaluate(&f, &probe)?;
            probe[pi].data_mut()[ci] = orig;
            let numeric = (up - down) / (2.0 * eps);
            let a = grad.data()[ci];
            let rel = (a - numeric).abs() / 1f64.max(a.abs()).max(numeric.abs());
            worst = worst.max(rel);
            coordinates += 1;
        }
    }
    Ok(GradcheckReport { max_rel_error: worst, coordinates })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn quadratic_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let w = Tensor::<f64>::uniform(&[10], -2.0, 2.0, &mut rng);
        let err = gradcheck(|g: &mut Graph<'_, f64>, p: &[Var]| { let s = g.square(p[0])?; g.sum(s) }, &[w], 1e-5).unwrap();
        assert!(err <= 1e-9, "{err}");
    }

    #[test]
    fn constant_function_has_zero_error() {
        let w = Tensor::<f64>::full(&[4], 1.0);
        let err = gradcheck(|g: &mut Graph<'_, f64>, _: &[Var]| Ok(g.constant(Tensor::scalar(7.0))), &[w], 1e-5).unwrap();
        assert_eq!(err, 0.0);
    }

    #[test]
    fn eps_out_of_range() {
        let w = Tensor::<f64>::full(&[1], 1.0);
        let r = gradcheck(|g: &mut Graph<'_, f64>, p: &[Var]| g.sum(p[0]), &[w], 1e-2);
        assert!(matches!(r, Err(Error::Contract(_))));
    }

    #[test]
    fn nondeterministic_function_rejected() {
        use std::sync::atomic::{AtomicU64, Ordering};
        let counter = AtomicU64::new(0);
        let w = Tensor::<f64>::full(&[1], 1.0);
        let r = gradcheck(
            |g: &mut Graph<'_, f64>, p: &[Var]| {
                let k = counter.fetch_add(1, Ordering::SeqCst) as f64;
                let s = g.sum(p[0])?;
                g.add_scalar(s, k)
            },
            &[w],
            1e-5,
        );
        assert!(matches!(r, Err(Error::Contract(ref m)) if m.contains("deterministic")));
    }

    #[test]
    fn injected_fault_is_detected() {
        let w = Tensor::<f64>::full(&[3], 0.3);
        let f = |g: &mut Graph<'_, f64>, p: &[Var]| { let s = g.silu(p[0])?; g.sum(s) };
        assert!(gradcheck_report(f, &[w.clone()], 1e-5, None).unwrap().max_rel_error < 1e-8);
        assert!(gradcheck_report(f, &[w], 1e-5, Some(OpKind::Silu)).unwrap().max_rel_error > 1e-2);
    }
}
