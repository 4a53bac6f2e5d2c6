//! Central-difference verification of tape gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::params::ParamStore;
use super::tape::{Tape, Var};
use crate::error::{Error, Result};

/// Which parameter entries to probe.
#[derive(Debug, Clone, Copy)]
pub struct GradCheckOptions {
    /// Step for the central difference.
    pub epsilon: f64,
    /// Maximum probed entries per parameter; `None` probes every entry.
    pub max_entries_per_param: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            epsilon: 1e-5,
            max_entries_per_param: Some(8),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    pub worst_param: String,
    pub worst_index: usize,
    pub probed: usize,
}

/// Compares the analytic gradient of `loss_fn` against central differences.
///
/// The error for one entry is `|analytic − numeric| / max(1, |numeric|)`;
/// the report carries the maximum over all probed entries.
pub fn finite_diff_grad_check<F>(loss_fn: F, params: &mut ParamStore, opts: GradCheckOptions) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &ParamStore) -> Result<Var>,
{
    if opts.epsilon <= 0.0 {
        return Err(Error::Config("epsilon must be positive".into()));
    }
    let eval = |store: &ParamStore| -> Result<f64> {
        let mut tape = Tape::new();
        let loss = loss_fn(&mut tape, store)?;
        let v = tape.scalar(loss);
        if !v.is_finite() {
            return Err(Error::Numeric(format!("loss is {v}")));
        }
        Ok(v)
    };

    params.zero_grads();
    {
        let mut tape = Tape::new();
        let loss = loss_fn(&mut tape, params)?;
        if !tape.scalar(loss).is_finite() {
            return Err(Error::Numeric("non-finite loss".into()));
        }
        tape.backward(loss, params)?;
    }
    let analytic: Vec<Vec<f64>> = params.entries().iter().map(|e| e.grad.data().to_vec()).collect();

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut report = GradCheckReport {
        max_relative_error: 0.0,
        worst_param: String::new(),
        worst_index: 0,
        probed: 0,
    };
    let ids: Vec<_> = params.ids().collect();
    for id in ids {
        let n = params.value(id).data().len();
        let picks: Vec<usize> = match opts.max_entries_per_param {
            Some(m) if m < n => sample(&mut rng, n, m).into_vec(),
            _ => (0..n).collect(),
        };
        for idx in picks {
            let orig = params.value(id).data()[idx];
            params.value_mut(id).data_mut()[idx] = orig + opts.epsilon;
            let plus = eval(params);
            params.value_mut(id).data_mut()[idx] = orig - opts.epsilon;
            let minus = eval(params);
            params.value_mut(id).data_mut()[idx] = orig;
            let numeric = (plus? - minus?) / (2.0 * opts.epsilon);
            let err = (analytic[id.index()][idx] - numeric).abs() / numeric.abs().max(1.0);
            report.probed += 1;
            if err > report.max_relative_error || report.worst_param.is_empty() {
                report.max_relative_error = err;
                report.worst_param = params.name(id).to_string();
                report.worst_index = idx;
            }
        }
    }
    params.zero_grads();
    Ok(report)
}
