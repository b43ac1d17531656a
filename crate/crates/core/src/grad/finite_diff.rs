use super::param::{ParamId, ParamStore};
use super::tensor::Tensor;
use crate::error::Result;

/// Central-difference gradient estimate of `f` with respect to each listed parameter.
pub fn finite_diff_grad<F>(mut f: F, store: &mut ParamStore, ids: &[ParamId], h: f64) -> Result<Vec<Tensor>>
where
    F: FnMut(&ParamStore) -> Result<f64>,
{
    assert!(h > 0.0, "finite-difference step must be positive");
    let mut out = Vec::with_capacity(ids.len());
    for &id in ids {
        let n = store.value(id).len();
        let mut g = vec![0.0; n];
        for (k, gk) in g.iter_mut().enumerate() {
            let orig = store.value(id).data()[k];
            store.value_mut(id).data_mut()[k] = orig + h;
            let plus = f(store)?;
            store.value_mut(id).data_mut()[k] = orig - h;
            let minus = f(store)?;
            store.value_mut(id).data_mut()[k] = orig;
            *gk = (plus - minus) / (2.0 * h);
        }
        out.push(Tensor::new(store.value(id).shape().to_vec(), g)?);
    }
    Ok(out)
}

/// Same estimate for a function of a plain tensor.
pub fn finite_diff_input<F>(mut f: F, x: &Tensor, h: f64) -> Result<Tensor>
where
    F: FnMut(&Tensor) -> Result<f64>,
{
    assert!(h > 0.0);
    let mut g = vec![0.0; x.len()];
    let mut probe = x.clone();
    for (k, gk) in g.iter_mut().enumerate() {
        let orig = x.data()[k];
        probe.data_mut()[k] = orig + h;
        let plus = f(&probe)?;
        probe.data_mut()[k] = orig - h;
        let minus = f(&probe)?;
        probe.data_mut()[k] = orig;
        *gk = (plus - minus) / (2.0 * h);
    }
    Tensor::new(x.shape().to_vec(), g)
}

/// Per-coordinate relative error `|a-b| / max(|a|, |b|, floor)`, maximised over entries.
pub fn max_relative_error(a: &Tensor, b: &Tensor, floor: f64) -> f64 {
    a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(floor))
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_and_constant() {
        let mut store = ParamStore::new();
        let id = store.add("w", Tensor::vector(vec![2.0]).unwrap(), true).unwrap();
        let g = finite_diff_grad(|s| Ok(s.value(id).item().powi(2)), &mut store, &[id], 1e-5).unwrap();
        assert!((g[0].item() - 4.0).abs() < 1e-6);
        let g = finite_diff_grad(|_| Ok(7.0), &mut store, &[id], 1e-5).unwrap();
        assert!(g[0].item().abs() < 1e-9);
        // store restored
        assert_eq!(store.value(id).item(), 2.0);
    }
}
