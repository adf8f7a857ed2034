//! Central finite-difference check of tape gradients.

use super::nn::Params;
use super::{Graph, ParamStore, Result, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Parameter name and flat index of the worst entry.
    pub worst: Option<(String, usize)>,
    pub checked: usize,
}

/// Compares analytic gradients of the scalar `f` with
/// `(f(x+h) - f(x-h)) / 2h` for every scalar in `store`.
///
/// Relative error per entry is `|a - n| / max(|a|, |n|, 1e-8)`.
pub fn grad_check<F>(store: &ParamStore, h: f64, f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &Params) -> Result<Var>,
{
    let eval = |s: &ParamStore| -> Result<f64> {
        let mut g = Graph::new();
        let p = s.bind(&mut g);
        let out = f(&mut g, &p)?;
        Ok(g.value(out).item())
    };

    let analytic = {
        let mut g = Graph::new();
        let p = store.bind(&mut g);
        let out = f(&mut g, &p)?;
        g.check_finite()?;
        let grads = g.backward(out)?;
        p.grads(&grads)
    };

    let mut probe = store.clone();
    let names: Vec<String> = store.iter().map(|(n, _)| n.to_string()).collect();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        checked: 0,
    };
    for (pi, name) in names.iter().enumerate() {
        let a = analytic[pi].as_ref().expect("bound params always get a gradient");
        for j in 0..a.numel() {
            let orig = store.get(name).unwrap().data()[j];
            probe.get_mut(name).unwrap().data_mut()[j] = orig + h;
            let fp = eval(&probe)?;
            probe.get_mut(name).unwrap().data_mut()[j] = orig - h;
            let fm = eval(&probe)?;
            probe.get_mut(name).unwrap().data_mut()[j] = orig;
            let numeric = (fp - fm) / (2.0 * h);
            let an = a.data()[j];
            let denom = an.abs().max(numeric.abs()).max(1e-8);
            let err = (an - numeric).abs() / denom;
            report.checked += 1;
            if err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst = Some((name.clone(), j));
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn sum_of_squares() {
        let mut s = ParamStore::new();
        s.insert("x", Tensor::new(vec![2], vec![1.0, 2.0]).unwrap());
        let r = grad_check(&s, 1e-5, |g, p| {
            let x = p.var("x")?;
            let sq = g.mul(x, x)?;
            Ok(g.sum(sq))
        })
        .unwrap();
        assert!(r.max_rel_error < 1e-7, "{r:?}");
        assert_eq!(r.checked, 2);
    }

    #[test]
    fn linear_function_is_near_exact() {
        let mut s = ParamStore::new();
        s.insert("x", Tensor::new(vec![3], vec![0.5, -1.0, 2.0]).unwrap());
        let r = grad_check(&s, 1e-5, |g, p| {
            let x = p.var("x")?;
            let y = g.scale(x, 3.0);
            Ok(g.sum(y))
        })
        .unwrap();
        assert!(r.max_rel_error < 1e-9, "{r:?}");
    }
}
