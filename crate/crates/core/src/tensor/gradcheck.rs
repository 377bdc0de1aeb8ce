use super::{Result, Tape, Tensor, Var};

/// Magnitude below which gradient entries are compared absolutely.
const REL_FLOOR: f64 = 1e-5;

/// Outcome for one named parameter tensor.
#[derive(Debug, Clone)]
pub struct ParamCheck {
    pub name: String,
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    /// Flat index of the worst entry.
    pub worst_index: usize,
    pub passed: bool,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub tol: f64,
    pub step: f64,
    pub params: Vec<ParamCheck>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.params.iter().all(|p| p.passed)
    }

    pub fn failures(&self) -> impl Iterator<Item = &ParamCheck> {
        self.params.iter().filter(|p| !p.passed)
    }

    pub fn max_rel_err(&self) -> f64 {
        self.params.iter().map(|p| p.max_rel_err).fold(0.0, f64::max)
    }
}

/// Compares tape gradients of a scalar function against central differences.
///
/// `f` receives the tape and one trainable leaf per entry of `params` (same
/// order) and must return a scalar. It must be deterministic.
pub fn grad_check<F>(f: F, params: &[(String, Tensor<f64>)], step: f64, tol: f64) -> Result<GradCheckReport>
where
    F: for<'t> Fn(&'t Tape<f64>, &[Var<'t, f64>]) -> Result<Var<'t, f64>>,
{
    let analytic: Vec<Tensor<f64>> = {
        let tape = Tape::new();
        let vars: Vec<_> = params.iter().map(|(_, t)| tape.param(t.clone())).collect();
        let out = f(&tape, &vars)?;
        tape.backward(out)?;
        vars.iter()
            .zip(params)
            .map(|(v, (_, t))| v.grad().unwrap_or_else(|| Tensor::zeros(t.shape().to_vec())))
            .collect()
    };

    let eval = |values: &[Tensor<f64>]| -> Result<f64> {
        let tape = Tape::new();
        let vars: Vec<_> = values.iter().map(|t| tape.constant(t.clone())).collect();
        Ok(f(&tape, &vars)?.value().item())
    };

    let mut values: Vec<Tensor<f64>> = params.iter().map(|(_, t)| t.clone()).collect();
    let mut report = GradCheckReport {
        tol,
        step,
        params: Vec::with_capacity(params.len()),
    };
    for (pi, (name, _)) in params.iter().enumerate() {
        let mut check = ParamCheck {
            name: name.clone(),
            max_rel_err: 0.0,
            max_abs_err: 0.0,
            worst_index: 0,
            passed: true,
        };
        for i in 0..values[pi].len() {
            let original = values[pi].data()[i];
            values[pi].data_mut()[i] = original + step;
            let plus = eval(&values)?;
            values[pi].data_mut()[i] = original - step;
            let minus = eval(&values)?;
            values[pi].data_mut()[i] = original;

            let numeric = (plus - minus) / (2.0 * step);
            let exact = analytic[pi].data()[i];
            let abs = (numeric - exact).abs();
            let rel = abs / numeric.abs().max(exact.abs()).max(REL_FLOOR);
            check.max_abs_err = check.max_abs_err.max(abs);
            if rel > check.max_rel_err {
                check.max_rel_err = rel;
                check.worst_index = i;
            }
        }
        check.passed = check.max_rel_err < tol;
        report.params.push(check);
    }
    Ok(report)
}
