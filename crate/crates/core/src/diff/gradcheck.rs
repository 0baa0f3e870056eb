use super::{Scalar, Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Worst disagreement between analytic and central-difference gradients for one parameter.
#[derive(Debug, Clone)]
pub struct ParamCheck {
    pub name: String,
    pub max_rel_err: f64,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub checked: usize,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub params: Vec<ParamCheck>,
    pub tol: f64,
    /// Set when the program could not be evaluated (non-finite loss, op error).
    pub failure: Option<String>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.failure.is_none() && self.params.iter().all(|p| p.max_rel_err < self.tol)
    }

    pub fn max_rel_err(&self) -> f64 {
        self.params.iter().map(|p| p.max_rel_err).fold(0.0, f64::max)
    }
}

pub const DEFAULT_FLOOR: f64 = 1e-8;

/// `|a − b| / max(|a|, |b|, 1e-8)`.
pub fn relative_error(a: f64, b: f64) -> f64 {
    relative_error_floor(a, b, DEFAULT_FLOOR)
}

/// `|a − b| / max(|a|, |b|, floor)`.
pub fn relative_error_floor(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

/// Central finite-difference gradient checker.
#[derive(Debug, Clone)]
pub struct GradCheck {
    pub eps: f64,
    pub tol: f64,
    /// Cap on coordinates probed per parameter (evenly strided); `None` probes all.
    pub max_coords: Option<usize>,
    /// Smallest denominator of the relative error; gradients below it are
    /// compared absolutely.
    pub floor: f64,
}

impl GradCheck {
    pub fn new(eps: f64, tol: f64) -> Self {
        GradCheck {
            eps,
            tol,
            max_coords: None,
            floor: DEFAULT_FLOOR,
        }
    }

    pub fn floor(mut self, floor: f64) -> Self {
        self.floor = floor;
        self
    }

    pub fn max_coords(mut self, n: usize) -> Self {
        self.max_coords = Some(n);
        self
    }

    pub fn run<T, F>(&self, params: &[(String, Tensor<T>)], program: F) -> Result<GradCheckReport>
    where
        T: Scalar,
        F: for<'t> Fn(&'t Tape<T>, &[Var<'t, T>]) -> Result<Var<'t, T>>,
    {
        if !(1e-8..=1e-4).contains(&self.eps) {
            return Err(Error::config("eps", format!("{} is outside [1e-8, 1e-4]", self.eps)));
        }
        let mut report = GradCheckReport {
            params: Vec::with_capacity(params.len()),
            tol: self.tol,
            failure: None,
        };

        let tape = Tape::new();
        let vars: Vec<Var<'_, T>> = params.iter().map(|(_, t)| tape.param(t.clone())).collect();
        let loss = match program(&tape, &vars) {
            Ok(l) if l.item().is_finite() => l,
            Ok(_) => {
                report.failure = Some("loss is non-finite at the base point".into());
                return Ok(report);
            }
            Err(e) => {
                report.failure = Some(format!("base evaluation failed: {e}"));
                return Ok(report);
            }
        };
        let grads = tape.backward(loss)?;
        let analytic: Vec<Tensor<T>> = vars.iter().map(|&v| grads.wrt(v)).collect();
        drop(grads);

        let eval = |point: &[Tensor<T>]| -> Result<f64> {
            let tape = Tape::new();
            let vars: Vec<Var<'_, T>> = point.iter().map(|t| tape.constant(t.clone())).collect();
            let v = program(&tape, &vars)?.item().to_f64().unwrap();
            Ok(v)
        };

        let mut point: Vec<Tensor<T>> = params.iter().map(|(_, t)| t.clone()).collect();
        for (p, (name, base)) in params.iter().enumerate() {
            let n = base.len();
            let coords: Vec<usize> = match self.max_coords {
                Some(cap) if cap < n => (0..cap).map(|i| i * n / cap).collect(),
                _ => (0..n).collect(),
            };
            let mut check = ParamCheck {
                name: name.clone(),
                max_rel_err: 0.0,
                worst_index: 0,
                analytic: 0.0,
                numeric: 0.0,
                checked: coords.len(),
            };
            for &i in &coords {
                let x0 = base.data()[i];
                let mut probe = |delta: f64| -> Result<f64> {
                    let mut data = base.data().to_vec();
                    data[i] = x0 + T::lit(delta);
                    point[p] = Tensor::from_parts(base.shape().to_vec(), data);
                    eval(&point)
                };
                let (plus, minus) = match (probe(self.eps), probe(-self.eps)) {
                    (Ok(a), Ok(b)) if a.is_finite() && b.is_finite() => (a, b),
                    (Err(e), _) | (_, Err(e)) => {
                        report.failure = Some(format!("parameter `{name}`[{i}]: {e}"));
                        point[p] = base.clone();
                        report.params.push(check);
                        return Ok(report);
                    }
                    _ => {
                        report.failure = Some(format!("parameter `{name}`[{i}]: non-finite loss"));
                        point[p] = base.clone();
                        report.params.push(check);
                        return Ok(report);
                    }
                };
                let numeric = (plus - minus) / (2.0 * self.eps);
                let a = analytic[p].data()[i].to_f64().unwrap();
                let err = relative_error_floor(a, numeric, self.floor);
                if err >= check.max_rel_err {
                    check.max_rel_err = err;
                    check.worst_index = i;
                    check.analytic = a;
                    check.numeric = numeric;
                }
            }
            point[p] = base.clone();
            report.params.push(check);
        }
        Ok(report)
    }
}
