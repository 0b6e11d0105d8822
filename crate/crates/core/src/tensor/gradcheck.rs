//! Central-difference verification of tape gradients.

use super::{ParamId, ParamStore, Tape, Tensor, Var};
use crate::error::Result;

#[derive(Clone, Debug, Default)]
pub struct CheckReport {
    /// `(parameter name, relative error, elements checked)`.
    pub entries: Vec<(String, f64, usize)>,
}

impl CheckReport {
    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn max_error(&self) -> f64 {
        self.entries.iter().map(|e| e.1).fold(0.0, f64::max)
    }

    pub fn error_of(&self, name: &str) -> Option<f64> {
        self.entries.iter().find(|e| e.0 == name).map(|e| e.1)
    }

    pub fn worst(&self) -> Option<&(String, f64, usize)> {
        self.entries.iter().max_by(|a, b| a.1.total_cmp(&b.1))
    }
}

/// Relative discrepancy of one parameter tensor:
/// `max_i |a_i - n_i| / max(max_i |a_i|, max_i |n_i|, 1e-8)`.
///
/// Normalizing by the tensor's largest gradient rather than element by
/// element keeps the measure meaningful for entries whose gradient is near
/// zero, where a central difference mostly sees rounding noise of the loss.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff = analytic.iter().zip(numeric).map(|(a, n)| (a - n).abs()).fold(0.0, f64::max);
    let scale = analytic.iter().chain(numeric).map(|v| v.abs()).fold(1e-8, f64::max);
    diff / scale
}

fn loss_value<F>(f: &F, store: &ParamStore) -> Result<f64>
where
    F: Fn(&mut Tape, &ParamStore) -> Result<Var>,
{
    let mut tape = Tape::inference();
    let l = f(&mut tape, store)?;
    tape.value(l).item()
}

/// Reverse-mode gradients of `f` for `params` (other parameters are held
/// fixed for the duration of the call).
pub fn analytic_gradients<F>(f: &F, store: &mut ParamStore, params: &[ParamId]) -> Result<Vec<Tensor>>
where
    F: Fn(&mut Tape, &ParamStore) -> Result<Var>,
{
    let saved: Vec<bool> = store.ids().map(|id| store.requires_grad(id)).collect();
    store.train_only(|_| false);
    for &p in params {
        store.set_requires_grad(p, true);
    }
    store.zero_grad();
    let result = (|| {
        let mut tape = Tape::new();
        let l = f(&mut tape, store)?;
        tape.backward(l, store)
    })();
    let grads = params.iter().map(|&p| store.grad(p).clone()).collect();
    for (id, on) in store.ids().collect::<Vec<_>>().into_iter().zip(saved) {
        store.set_requires_grad(id, on);
    }
    result.map(|_| grads)
}

/// Compares supplied analytic gradients with central differences of step
/// `h`. `max_elements` caps the elements probed per parameter (evenly
/// spaced); `None` probes all of them.
pub fn compare_with_finite_differences<F>(
    f: &F,
    store: &mut ParamStore,
    params: &[ParamId],
    analytic: &[Tensor],
    h: f64,
    max_elements: Option<usize>,
) -> Result<CheckReport>
where
    F: Fn(&mut Tape, &ParamStore) -> Result<Var>,
{
    let mut report = CheckReport::default();
    for (&p, grad) in params.iter().zip(analytic) {
        let n = store.value(p).numel();
        let picks: Vec<usize> = match max_elements {
            Some(m) if m < n => (0..m).map(|i| i * n / m).collect(),
            _ => (0..n).collect(),
        };
        let mut a = Vec::with_capacity(picks.len());
        let mut num = Vec::with_capacity(picks.len());
        for &i in &picks {
            let orig = store.value(p).data()[i];
            store.value_mut(p).data_mut()[i] = orig + h;
            let plus = loss_value(f, store);
            store.value_mut(p).data_mut()[i] = orig - h;
            let minus = loss_value(f, store);
            store.value_mut(p).data_mut()[i] = orig;
            num.push((plus? - minus?) / (2.0 * h));
            a.push(grad.data()[i]);
        }
        report
            .entries
            .push((store.name(p).to_string(), relative_error(&a, &num), picks.len()));
    }
    Ok(report)
}

/// Per-parameter maximum relative error between reverse-mode and central
/// difference gradients of the scalar produced by `f`.
pub fn grad_check<F>(f: F, store: &mut ParamStore, params: &[ParamId], h: f64) -> Result<CheckReport>
where
    F: Fn(&mut Tape, &ParamStore) -> Result<Var>,
{
    let analytic = analytic_gradients(&f, store, params)?;
    compare_with_finite_differences(&f, store, params, &analytic, h, None)
}

/// [`grad_check`] probing at most `max_elements` entries per parameter.
pub fn grad_check_sampled<F>(f: F, store: &mut ParamStore, params: &[ParamId], h: f64, max_elements: usize) -> Result<CheckReport>
where
    F: Fn(&mut Tape, &ParamStore) -> Result<Var>,
{
    let analytic = analytic_gradients(&f, store, params)?;
    compare_with_finite_differences(&f, store, params, &analytic, h, Some(max_elements))
}

/// Redraws `params` at unit-scale magnitudes: weight matrices (`*.w`)
/// `N(0, 1/fan_in)`, embedding and query tables `N(0, 1)`, gains
/// `1 + N(0, 0.3^2)`, other vectors `N(0, 0.3^2)`.
///
/// Deliberately small initializations (zero output projections, identity
/// maps) leave many gradients at or near zero; checks run at a generic
/// point instead.
pub fn randomize_for_check(store: &mut ParamStore, params: &[ParamId], rng: &mut impl rand::Rng) {
    use rand_distr::{Distribution, StandardNormal};
    for &p in params {
        let name = store.name(p);
        let (gain, weight) = (name.ends_with("gamma"), name.ends_with(".w"));
        let shape = store.value(p).shape().to_vec();
        let (base, std) = match (gain, shape.as_slice()) {
            (true, _) => (1.0, 0.3),
            (false, [rows, _]) if weight => (0.0, 1.0 / (*rows as f64).sqrt()),
            (false, [_, _]) => (0.0, 1.0),
            _ => (0.0, 0.3),
        };
        for v in store.value_mut(p).data_mut() {
            let z: f64 = StandardNormal.sample(rng);
            *v = base + std * z;
        }
    }
}
