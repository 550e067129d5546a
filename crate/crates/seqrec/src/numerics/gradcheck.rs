use super::params::{Gradients, ParamStore};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Parameter name and flat coordinate where the worst error occurred.
    pub worst: Option<(String, usize)>,
    pub coordinates: usize,
}

/// Compares analytic gradients against central differences on every
/// coordinate of every parameter.
///
/// `f` evaluates the objective at the given parameters and returns the value
/// together with its analytic gradient. The per-coordinate error is
/// `|analytic − numeric| / (|analytic| + |numeric| + 1e-8)`.
pub fn grad_check<F>(params: &ParamStore, h: f64, mut f: F) -> Result<GradCheckReport>
where
    F: FnMut(&ParamStore) -> Result<(f64, Gradients)>,
{
    let (_, analytic) = f(params)?;
    let mut probe = params.clone();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        coordinates: 0,
    };
    for id in params.ids() {
        for c in 0..params.value(id).len() {
            let orig = params.value(id).data()[c];
            probe.value_mut(id).data_mut()[c] = orig + h;
            let (up, _) = f(&probe)?;
            probe.value_mut(id).data_mut()[c] = orig - h;
            let (down, _) = f(&probe)?;
            probe.value_mut(id).data_mut()[c] = orig;
            if !up.is_finite() || !down.is_finite() {
                return Err(Error::Probe {
                    param: params.name(id).to_string(),
                    coord: c,
                });
            }
            let numeric = (up - down) / (2.0 * h);
            let a = analytic.get(id).data()[c];
            let rel = (a - numeric).abs() / (a.abs() + numeric.abs() + 1e-8);
            report.coordinates += 1;
            if rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst = Some((params.name(id).to_string(), c));
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{Graph, Tensor};

    #[test]
    fn quadratic() {
        let mut store = ParamStore::new();
        let id = store.insert("x", Tensor::vector(vec![1.0, 2.0])).unwrap();
        let report = grad_check(&store, 1e-5, |s| {
            let mut g = Graph::new(s);
            let x = g.param(id);
            let sq = g.row_dot(x, x)?;
            let loss = g.weighted_sum(sq, vec![1.0])?;
            let mut grads = s.zero_grads();
            g.backward(loss, &mut grads)?;
            if s.value(id).data() == [1.0, 2.0] {
                assert_eq!(grads.get(id).data(), &[2.0, 4.0]);
            }
            Ok((g.value(loss).item(), grads))
        })
        .unwrap();
        assert!(report.max_rel_error < 1e-6);
        assert_eq!(report.coordinates, 2);
    }

    #[test]
    fn non_finite_probe_is_an_error() {
        let mut store = ParamStore::new();
        store.insert("x", Tensor::vector(vec![0.0])).unwrap();
        let err = grad_check(&store, 1e-5, |s| {
            let x = s.value(s.id("x").unwrap()).data()[0];
            let v = if x > 0.0 { f64::INFINITY } else { 0.0 };
            Ok((v, s.zero_grads()))
        });
        assert!(matches!(err, Err(Error::Probe { .. })));
    }
}
