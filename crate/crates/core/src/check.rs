//! Finite-difference gradient checking.
//!
//! Central differences (f(x+h) − f(x−h)) / 2h against analytic gradients,
//! evaluated in f64. The loss closure is re-run from scratch for every probe,
//! so the check never depends on the backward pass it verifies.

use indexmap::IndexMap;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::nn::ParamStore;
use crate::tensor::Tensor;

/// Worst relative error over the probed coordinates.
#[derive(Debug, Clone)]
pub struct FdReport {
    pub max_rel_err: f64,
    pub worst_param: String,
    pub checked: usize,
}

/// Relative error with an absolute floor so near-zero gradient pairs compare
/// at ~1e-3·tol instead of blowing up.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-3)
}

/// Central difference of `loss` along one parameter coordinate.
pub fn central_difference<F>(
    loss: &mut F,
    params: &mut ParamStore<f64>,
    name: &str,
    index: usize,
    h: f64,
) -> f64
where
    F: FnMut(&ParamStore<f64>) -> f64,
{
    let orig = params.get(name).data()[index];
    params.get_mut(name).data_mut()[index] = orig + h;
    let fp = loss(params);
    params.get_mut(name).data_mut()[index] = orig - h;
    let fm = loss(params);
    params.get_mut(name).data_mut()[index] = orig;
    (fp - fm) / (2.0 * h)
}

/// Compare analytic gradients against central differences on
/// `samples_per_param` seeded random coordinates of every parameter.
pub fn check_gradients<F>(
    mut loss: F,
    params: &mut ParamStore<f64>,
    analytic: &IndexMap<String, Tensor<f64>>,
    samples_per_param: usize,
    h: f64,
    seed: u64,
) -> FdReport
where
    F: FnMut(&ParamStore<f64>) -> f64,
{
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let names: Vec<String> = params.names().cloned().collect();
    let mut report = FdReport { max_rel_err: 0.0, worst_param: String::new(), checked: 0 };
    for name in names {
        let numel = params.get(&name).numel();
        let grad = analytic
            .get(&name)
            .unwrap_or_else(|| panic!("missing analytic grad for `{name}`"));
        for _ in 0..samples_per_param.min(numel) {
            let idx = rng.gen_range(0..numel);
            let fd = central_difference(&mut loss, params, &name, idx, h);
            let an = grad.data()[idx];
            let err = rel_err(fd, an);
            report.checked += 1;
            if err > report.max_rel_err {
                report.max_rel_err = err;
                report.worst_param = format!("{name}[{idx}]");
            }
        }
    }
    report
}
