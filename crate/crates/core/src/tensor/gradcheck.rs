//! Central finite-difference gradient checking.
//!
//! The check only ever calls the forward closure; it never looks at how a
//! gradient was produced, so it can validate any composite of graph ops.

use super::{Graph, ParamId, ParamStore, Result, Tensor, Var};

/// Relative error with an absolute floor on the denominator, so that
/// elements whose true gradient is ~0 are judged on absolute error.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_relative_error: f64,
    /// Which input produced the largest error, and at which element.
    pub worst: Option<(String, usize)>,
    /// Largest absolute analytic gradient seen; guards against vacuous checks.
    pub max_abs_gradient: f64,
}

impl GradCheckReport {
    pub fn passes(&self, tolerance: f64) -> bool {
        self.max_relative_error < tolerance
    }
}

pub struct GradCheck {
    pub step: f64,
    pub floor: f64,
}

impl Default for GradCheck {
    fn default() -> Self {
        Self { step: 1e-5, floor: 1e-6 }
    }
}

impl GradCheck {
    /// Compares autodiff gradients of the scalar produced by `forward` with
    /// central differences, for every element of `leaves` and of the listed
    /// parameters. `forward` receives the leaf vars in the order given.
    // Index loops: each element is perturbed in place while the gradients are read.
    #[allow(clippy::needless_range_loop)]
    pub fn run<F>(&self, store: &mut ParamStore, params: &[ParamId], leaves: &mut [Tensor], forward: F) -> Result<GradCheckReport>
    where
        F: Fn(&mut Graph, &ParamStore, &[Var]) -> Result<Var>,
    {
        let eval = |store: &ParamStore, leaves: &[Tensor]| -> Result<f64> {
            let mut g = Graph::new();
            let vars: Vec<Var> = leaves.iter().map(|t| g.input(t.clone())).collect();
            let out = forward(&mut g, store, &vars)?;
            Ok(g.value(out).item())
        };

        let mut g = Graph::new();
        let vars: Vec<Var> = leaves.iter().map(|t| g.leaf(t.clone())).collect();
        let out = forward(&mut g, store, &vars)?;
        g.backward(out)?;
        let leaf_grads: Vec<Vec<f64>> = vars
            .iter()
            .zip(leaves.iter())
            .map(|(&v, t)| g.grad(v).map_or_else(|| vec![0.0; t.numel()], <[f64]>::to_vec))
            .collect();
        let mut param_grads: Vec<Vec<f64>> = params.iter().map(|&id| vec![0.0; store.value(id).numel()]).collect();
        for (id, grad) in g.param_grads() {
            if let Some(pos) = params.iter().position(|&p| p == id) {
                param_grads[pos].copy_from_slice(grad);
            }
        }
        drop(g);

        let mut report = GradCheckReport {
            checked: 0,
            max_relative_error: 0.0,
            worst: None,
            max_abs_gradient: 0.0,
        };
        let mut record = |name: String, idx: usize, analytic: f64, numeric: f64| {
            let err = relative_error(analytic, numeric, self.floor);
            report.checked += 1;
            report.max_abs_gradient = report.max_abs_gradient.max(analytic.abs());
            if err > report.max_relative_error || report.worst.is_none() {
                report.max_relative_error = report.max_relative_error.max(err);
                report.worst = Some((name, idx));
            }
        };

        for li in 0..leaves.len() {
            for idx in 0..leaves[li].numel() {
                let orig = leaves[li].data()[idx];
                leaves[li].data_mut()[idx] = orig + self.step;
                let plus = eval(store, leaves)?;
                leaves[li].data_mut()[idx] = orig - self.step;
                let minus = eval(store, leaves)?;
                leaves[li].data_mut()[idx] = orig;
                let numeric = (plus - minus) / (2.0 * self.step);
                record(format!("input{li}"), idx, leaf_grads[li][idx], numeric);
            }
        }
        for (pi, &id) in params.iter().enumerate() {
            for idx in 0..store.value(id).numel() {
                let orig = store.value(id).data()[idx];
                store.get_mut(id).value.data_mut()[idx] = orig + self.step;
                let plus = eval(store, leaves)?;
                store.get_mut(id).value.data_mut()[idx] = orig - self.step;
                let minus = eval(store, leaves)?;
                store.get_mut(id).value.data_mut()[idx] = orig;
                let numeric = (plus - minus) / (2.0 * self.step);
                record(store.get(id).name.clone(), idx, param_grads[pi][idx], numeric);
            }
        }
        Ok(report)
    }
}
