//! Central finite-difference checks of tape gradients.

use alloc::string::String;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::params::{ParamGrads, ParamStore};

/// Outcome of a gradient check.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheck {
    pub checked: usize,
    pub max_rel_err: f64,
    /// Parameter name and flat index of the largest error.
    pub worst: Option<(String, usize)>,
}

/// `|a − b| / max(|a|, |b|, 1e-6)`.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

/// Runs `build` on a fresh graph over `store` and returns the scalar loss with
/// its parameter gradients.
pub fn loss_and_grads(store: &ParamStore, build: impl FnOnce(&mut Graph<'_>) -> Result<Var>) -> Result<(f64, ParamGrads)> {
    let mut g = Graph::new(store);
    let l = build(&mut g)?;
    let mut grads = ParamGrads::new(store);
    g.accumulate_param_grads(&g.backward(l), &mut grads);
    Ok((g.scalar(l), grads))
}

/// Compares tape gradients with central differences of step `h` on the
/// first, last and two interior entries of every named parameter.
pub fn check_param_gradients(
    store: &mut ParamStore,
    names: &[&str],
    h: f64,
    loss: impl Fn(&ParamStore) -> Result<(f64, ParamGrads)>,
) -> Result<GradCheck> {
    let (_, grads) = loss(store)?;
    let mut report = GradCheck { checked: 0, max_rel_err: 0.0, worst: None };
    for &name in names {
        let id = store.id(name).ok_or_else(|| Error::MissingParam(name.into()))?;
        let len = store.get(id).len();
        let mut entries: Vec<usize> = [0, len / 3, len / 2, len.saturating_sub(1)].into();
        entries.dedup();
        for k in entries {
            let analytic = grads.get(id).map_or(0.0, |g| g.as_slice()[k]);
            let orig = store.get(id).as_slice()[k];
            store.get_mut(id).as_mut_slice()[k] = orig + h;
            let up = loss(store)?.0;
            store.get_mut(id).as_mut_slice()[k] = orig - h;
            let down = loss(store)?.0;
            store.get_mut(id).as_mut_slice()[k] = orig;
            let err = relative_error(analytic, (up - down) / (2.0 * h));
            report.checked += 1;
            if report.worst.is_none() || err > report.max_rel_err {
                report.max_rel_err = err;
                report.worst = Some((name.into(), k));
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Matrix;

    #[test]
    fn quadratic_is_exact() {
        let mut store = ParamStore::new();
        let w = store.add("w", Matrix::from_vec(1, 3, alloc::vec![0.5, -1.0, 2.0]).unwrap());
        let target = Matrix::zeros(1, 3);
        let report = check_param_gradients(&mut store, &["w"], 1e-5, |s| {
            loss_and_grads(s, |g| {
                let p = g.param(w);
                Ok(g.mse_loss(p, &target))
            })
        })
        .unwrap();
        assert_eq!(report.checked, 3);
        assert!(report.max_rel_err < 1e-8);
    }

    #[test]
    fn unknown_name_is_an_error() {
        let mut store = ParamStore::new();
        let r = check_param_gradients(&mut store, &["nope"], 1e-5, |s| Ok((0.0, ParamGrads::new(s))));
        assert_eq!(r, Err(Error::MissingParam("nope".into())));
    }
}
