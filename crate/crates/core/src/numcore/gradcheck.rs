use super::params::ParamStore;
use crate::error::{Error, Result};

/// Central-difference step.
pub const FD_STEP: f64 = 1e-5;

/// Gradients smaller than this are compared in absolute terms: the relative
/// error denominator never drops below it.
pub const REL_ERR_FLOOR: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq)]
pub struct ParamCheck {
    pub name: String,
    pub max_rel_err: f64,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub params: Vec<ParamCheck>,
    pub max_rel_err: f64,
    pub coordinates: usize,
    pub rel_tol: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err <= self.rel_tol
    }

    pub fn worst(&self) -> Option<&ParamCheck> {
        self.params
            .iter()
            .max_by(|a, b| a.max_rel_err.total_cmp(&b.max_rel_err))
    }
}

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERR_FLOOR)
}

/// Compares analytic gradients with central finite differences.
///
/// `f(store, want_grad)` must return the scalar loss and, when `want_grad`
/// is true, accumulate its analytic gradient into `store`. It must be
/// deterministic: any randomness (masks, assignments) has to be frozen by
/// the caller.
pub fn grad_check<F>(store: &mut ParamStore, mut f: F, rel_tol: f64) -> Result<GradCheckReport>
where
    F: FnMut(&mut ParamStore, bool) -> Result<f64>,
{
    store.zero_grads();
    let loss = f(store, true)?;
    if !loss.is_finite() {
        return Err(Error::NonFinite(format!("loss {loss}")));
    }
    let analytic = store.clone();
    let names: Vec<String> = store.names().map(str::to_owned).collect();

    let mut params = Vec::new();
    let mut coordinates = 0;
    for name in names {
        let len = store.value(&name).data().len();
        let mut check = ParamCheck {
            name: name.clone(),
            max_rel_err: 0.0,
            worst_index: 0,
            analytic: 0.0,
            numeric: 0.0,
        };
        for i in 0..len {
            let orig = store.value(&name).data()[i];
            store.value_mut(&name).data_mut()[i] = orig + FD_STEP;
            let up = f(store, false)?;
            store.value_mut(&name).data_mut()[i] = orig - FD_STEP;
            let down = f(store, false)?;
            store.value_mut(&name).data_mut()[i] = orig;
            if !(up.is_finite() && down.is_finite()) {
                return Err(Error::NonFinite(format!("loss while perturbing {name}[{i}]")));
            }
            let numeric = (up - down) / (2.0 * FD_STEP);
            let a = analytic.grad(&name).data()[i];
            let e = rel_err(a, numeric);
            if e > check.max_rel_err || i == 0 {
                check.max_rel_err = e;
                check.worst_index = i;
                check.analytic = a;
                check.numeric = numeric;
            }
            coordinates += 1;
        }
        params.push(check);
    }
    store.zero_grads();
    let max_rel_err = params.iter().map(|p| p.max_rel_err).fold(0.0, f64::max);
    Ok(GradCheckReport {
        params,
        max_rel_err,
        coordinates,
        rel_tol,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numcore::Tensor2;

    fn quadratic_store() -> ParamStore {
        let mut s = ParamStore::new();
        s.insert("p", Tensor2::from_vec(1, 4, vec![0.5, -1.5, 2.0, 3.25]).unwrap());
        s
    }

    #[test]
    fn quadratic_agrees_to_1e9() {
        let mut s = quadratic_store();
        let rep = grad_check(
            &mut s,
            |st, want| {
                let p = st.value("p").clone();
                if want {
                    st.accumulate("p", &p)?;
                }
                Ok(0.5 * p.data().iter().map(|v| v * v).sum::<f64>())
            },
            1e-9,
        )
        .unwrap();
        assert!(rep.passed(), "{rep:?}");
        assert_eq!(rep.coordinates, 4);
    }

    #[test]
    fn corrupted_backward_fails() {
        let mut s = quadratic_store();
        let rep = grad_check(
            &mut s,
            |st, want| {
                let p = st.value("p").clone();
                if want {
                    st.accumulate("p", &p.scale(1.01))?;
                }
                Ok(0.5 * p.data().iter().map(|v| v * v).sum::<f64>())
            },
            1e-4,
        )
        .unwrap();
        assert!(!rep.passed());
        assert_eq!(rep.worst().unwrap().name, "p");
    }

    #[test]
    fn non_finite_loss_is_an_error() {
        let mut s = quadratic_store();
        let r = grad_check(&mut s, |_, _| Ok(f64::NAN), 1e-4);
        assert!(matches!(r, Err(Error::NonFinite(_))));
    }
}
