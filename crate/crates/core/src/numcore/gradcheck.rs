use super::{Graph, ParamStore, TensorError, Var};

/// Worst disagreement found for one parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamCheck {
    pub name: String,
    pub max_rel_error: f64,
    /// Flat index of the worst entry.
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub params: Vec<ParamCheck>,
    pub max_rel_error: f64,
    pub epsilon: f64,
    pub tolerance: f64,
    pub pass: bool,
}

impl GradCheckReport {
    pub fn worst(&self) -> Option<&ParamCheck> {
        self.params.iter().max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error))
    }
}

/// Compares autodiff gradients of `f` against central differences for every
/// entry of every trainable parameter in `store`.
///
/// The relative error of one entry is `|g_fd - g_ad| / max(|g_fd|, |g_ad|, 1e-8)`.
/// `f` must be deterministic: it is evaluated once on a gradient tape and
/// twice per entry on inference tapes.
pub fn finite_diff_check<F>(f: F, store: &ParamStore, eps: f64, tolerance: f64) -> Result<GradCheckReport, TensorError>
where
    F: Fn(&mut Graph, &ParamStore) -> Result<Var, TensorError>,
{
    assert!(eps > 0.0, "eps must be positive");
    let mut g = Graph::new();
    let loss = f(&mut g, store)?;
    if !g.value(loss).all_finite() {
        return Err(TensorError::NonFinite { param: "<base point>".into() });
    }
    let analytic = g.backward(loss)?.for_params(store);
    drop(g);

    let eval = |s: &ParamStore| -> Result<f64, TensorError> {
        let mut g = Graph::inference();
        let v = f(&mut g, s)?;
        let t = g.value(v);
        if t.rank() != 0 {
            return Err(TensorError::NotScalar(t.shape().to_vec()));
        }
        Ok(t.item())
    };

    let mut probe = store.clone();
    let mut params = Vec::new();
    for (id, grad) in analytic {
        if !store.is_trainable(id) {
            continue;
        }
        let name = store.name(id).to_string();
        let mut check = ParamCheck { name: name.clone(), max_rel_error: 0.0, worst_index: 0, analytic: 0.0, numeric: 0.0 };
        for i in 0..grad.numel() {
            let orig = probe.get(id).data()[i];
            probe.get_mut(id).data_mut()[i] = orig + eps;
            let up = eval(&probe)?;
            probe.get_mut(id).data_mut()[i] = orig - eps;
            let down = eval(&probe)?;
            probe.get_mut(id).data_mut()[i] = orig;
            if !up.is_finite() || !down.is_finite() {
                return Err(TensorError::NonFinite { param: name });
            }
            let numeric = (up - down) / (2.0 * eps);
            let ad = grad.data()[i];
            let rel = (numeric - ad).abs() / numeric.abs().max(ad.abs()).max(1e-8);
            if rel > check.max_rel_error || i == 0 {
                check = ParamCheck { name: name.clone(), max_rel_error: rel, worst_index: i, analytic: ad, numeric };
            }
        }
        params.push(check);
    }
    let max_rel_error = params.iter().map(|p| p.max_rel_error).fold(0.0, f64::max);
    Ok(GradCheckReport { params, max_rel_error, epsilon: eps, tolerance, pass: max_rel_error < tolerance })
}
