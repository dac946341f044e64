use crate::error::{NnError, Result};
use crate::graph::{Graph, Var};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug)]
pub struct GradCheckOptions {
    /// Central-difference step.
    pub step: f64,
    /// Denominator floor: errors are relative to `max(|analytic|, |numeric|, floor)`.
    pub floor: f64,
    /// Check at most this many evenly strided entries per tensor.
    pub max_per_tensor: Option<usize>,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            step: 1e-5,
            floor: 1e-4,
            max_per_tensor: None,
        }
    }
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Tensor name (or `input[i]`) and flat index of the worst entry.
    pub worst: Option<(String, usize)>,
    pub checked: usize,
}

/// Compares reverse-mode gradients of the scalar `f` against central finite
/// differences, over every unfrozen parameter of `store` and every input
/// tensor. `f` receives a fresh graph and one leaf per input.
pub fn grad_check<Fun>(
    store: &ParamStore<f64>,
    inputs: &[Tensor<f64>],
    options: GradCheckOptions,
    f: Fun,
) -> Result<GradCheckReport>
where
    Fun: Fn(&mut Graph<'_, f64>, &[Var]) -> Result<Var>,
{
    let eval = |store: &ParamStore<f64>, inputs: &[Tensor<f64>]| -> Result<f64> {
        let mut g = Graph::new(store);
        let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone(), false)).collect();
        let loss = f(&mut g, &vars)?;
        let v = g.value(loss).item();
        if !v.is_finite() {
            return Err(NnError::NonFinite(v));
        }
        Ok(v)
    };

    let mut g = Graph::new(store);
    let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone(), true)).collect();
    let loss = f(&mut g, &vars)?;
    let lv = g.value(loss).item();
    if !lv.is_finite() {
        return Err(NnError::NonFinite(lv));
    }
    let node_grads = g.backward_nodes(loss);
    let param_grads = g.backward(loss);

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        checked: 0,
    };
    let mut record = |name: &str, idx: usize, analytic: f64, numeric: f64| {
        let denom = analytic.abs().max(numeric.abs()).max(options.floor);
        let err = (analytic - numeric).abs() / denom;
        report.checked += 1;
        if report.worst.is_none() || err > report.max_rel_error {
            report.max_rel_error = err;
            report.worst = Some((name.to_string(), idx));
        }
    };

    let h = options.step;
    let mut work = store.clone();
    for i in 0..store.len() {
        let id = ParamId(i);
        let p = store.get(id);
        if p.frozen {
            continue;
        }
        let analytic = param_grads.get(id);
        for idx in strided(p.value.len(), options.max_per_tensor) {
            let orig = p.value.data()[idx];
            work.value_mut(id).data_mut()[idx] = orig + h;
            let plus = eval(&work, inputs)?;
            work.value_mut(id).data_mut()[idx] = orig - h;
            let minus = eval(&work, inputs)?;
            work.value_mut(id).data_mut()[idx] = orig;
            let a = analytic.map_or(0.0, |t| t.data()[idx]);
            record(&p.name, idx, a, (plus - minus) / (2.0 * h));
        }
    }

    let mut work_inputs = inputs.to_vec();
    for (k, v) in vars.iter().enumerate() {
        let analytic = node_grads[v.index()].as_ref();
        for idx in strided(inputs[k].len(), options.max_per_tensor) {
            let orig = inputs[k].data()[idx];
            work_inputs[k].data_mut()[idx] = orig + h;
            let plus = eval(store, &work_inputs)?;
            work_inputs[k].data_mut()[idx] = orig - h;
            let minus = eval(store, &work_inputs)?;
            work_inputs[k].data_mut()[idx] = orig;
            let a = analytic.map_or(0.0, |t| t.data()[idx]);
            record(&format!("input[{k}]"), idx, a, (plus - minus) / (2.0 * h));
        }
    }
    Ok(report)
}

fn strided(len: usize, max: Option<usize>) -> Vec<usize> {
    match max {
        Some(m) if m < len => {
            let stride = len as f64 / m as f64;
            (0..m).map(|i| (i as f64 * stride) as usize).collect()
        }
        _ => (0..len).collect(),
    }
}
