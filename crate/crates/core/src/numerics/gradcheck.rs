use super::graph::{Graph, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// A scalar function of a list of tensors with an analytic gradient.
pub trait Differentiable {
    fn value(&self, params: &[Tensor]) -> Result<f64>;
    fn gradient(&self, params: &[Tensor]) -> Result<Vec<Tensor>>;
}

/// Contract assembled from a value closure and a gradient closure.
pub struct FnContract<V, G> {
    pub value: V,
    pub gradient: G,
}

impl<V, G> Differentiable for FnContract<V, G>
where
    V: Fn(&[Tensor]) -> Result<f64>,
    G: Fn(&[Tensor]) -> Result<Vec<Tensor>>,
{
    fn value(&self, params: &[Tensor]) -> Result<f64> {
        (self.value)(params)
    }

    fn gradient(&self, params: &[Tensor]) -> Result<Vec<Tensor>> {
        (self.gradient)(params)
    }
}

/// Contract for a function written against [`Graph`]: every parameter becomes a
/// leaf and the gradient comes from the reverse sweep.
pub struct GraphContract<F>(pub F);

impl<F> GraphContract<F>
where
    F: for<'a> Fn(&mut Graph<'a>, &[Var]) -> Result<Var>,
{
    fn run(&self, params: &[Tensor], want_grad: bool) -> Result<(f64, Vec<Tensor>)> {
        let mut g = Graph::new();
        let vars: Vec<Var> = params.iter().map(|p| g.param(p)).collect();
        let out = (self.0)(&mut g, &vars)?;
        let value = g.value(out).item();
        if !want_grad {
            return Ok((value, Vec::new()));
        }
        let mut grads = g.backward(out)?;
        let grads = vars
            .iter()
            .zip(params)
            .map(|(v, p)| grads.take(*v).unwrap_or_else(|| Tensor::zeros(p.shape())))
            .collect();
        Ok((value, grads))
    }
}

impl<F> Differentiable for GraphContract<F>
where
    F: for<'a> Fn(&mut Graph<'a>, &[Var]) -> Result<Var>,
{
    fn value(&self, params: &[Tensor]) -> Result<f64> {
        Ok(self.run(params, false)?.0)
    }

    fn gradient(&self, params: &[Tensor]) -> Result<Vec<Tensor>> {
        Ok(self.run(params, true)?.1)
    }
}

/// Central finite-difference settings.
#[derive(Clone, Debug)]
pub struct GradientCheck {
    pub step: f64,
    pub tolerance: f64,
    /// Lower bound on the relative-error denominator. Below it both gradients
    /// are beneath finite-difference resolution and the absolute error is used.
    pub floor: f64,
}

impl Default for GradientCheck {
    fn default() -> Self {
        Self {
            step: 1e-5,
            tolerance: 1e-4,
            floor: 1e-6,
        }
    }
}

#[derive(Clone, Debug)]
pub struct TensorError {
    pub tensor: usize,
    pub max_rel_error: f64,
    pub worst_element: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Clone, Debug)]
pub struct GradientReport {
    pub per_tensor: Vec<TensorError>,
    pub max_rel_error: f64,
    pub checked: usize,
    pub passed: bool,
}

impl GradientReport {
    pub fn worst(&self) -> Option<&TensorError> {
        self.per_tensor
            .iter()
            .max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error))
    }
}

/// Compares the analytic gradient of `f` at `params` with central differences
/// on every element.
pub fn check_gradients(
    f: &impl Differentiable,
    params: &[Tensor],
    settings: &GradientCheck,
) -> Result<GradientReport> {
    let base = f.value(params)?;
    if !base.is_finite() {
        return Err(Error::NonFinite { op: "check_gradients" });
    }
    let analytic = f.gradient(params)?;
    if analytic.len() != params.len() {
        return Err(Error::shape("check_gradients", "one gradient per parameter"));
    }
    let mut work: Vec<Tensor> = params.to_vec();
    let mut per_tensor = Vec::with_capacity(params.len());
    let mut checked = 0;
    for (ti, grad) in analytic.iter().enumerate() {
        let mut entry = TensorError {
            tensor: ti,
            max_rel_error: 0.0,
            worst_element: 0,
            analytic: 0.0,
            numeric: 0.0,
        };
        for e in 0..params[ti].len() {
            let orig = params[ti].data()[e];
            work[ti].data_mut()[e] = orig + settings.step;
            let plus = f.value(&work)?;
            work[ti].data_mut()[e] = orig - settings.step;
            let minus = f.value(&work)?;
            work[ti].data_mut()[e] = orig;
            if !plus.is_finite() || !minus.is_finite() {
                return Err(Error::NonFinite { op: "check_gradients" });
            }
            let numeric = (plus - minus) / (2.0 * settings.step);
            let a = grad.data()[e];
            let denom = a.abs().max(numeric.abs()).max(settings.floor);
            let rel = (a - numeric).abs() / denom;
            if rel > entry.max_rel_error {
                entry = TensorError {
                    tensor: ti,
                    max_rel_error: rel,
                    worst_element: e,
                    analytic: a,
                    numeric,
                };
            }
            checked += 1;
        }
        per_tensor.push(entry);
    }
    let max_rel_error = per_tensor.iter().map(|t| t.max_rel_error).fold(0.0, f64::max);
    Ok(GradientReport {
        passed: max_rel_error < settings.tolerance,
        per_tensor,
        max_rel_error,
        checked,
    })
}
