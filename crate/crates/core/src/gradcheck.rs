//! Finite-difference verification of reverse-mode gradients.
//!
//! Checks always run at 64-bit precision: central differences at `h = 1e-4`
//! lose too many digits in 32-bit arithmetic to say anything useful.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, Var};
use crate::error::Result;
use crate::tensor::Tensor;

/// Denominator floor of the relative error, so components whose true
/// gradient is (near) zero are compared on an absolute scale.
pub const REL_ERR_FLOOR: f64 = 1e-2;

/// `|a − n| / max(|a|, |n|, REL_ERR_FLOOR)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERR_FLOOR)
}

#[derive(Clone, Debug, PartialEq)]
pub struct InputCheck {
    pub input: usize,
    /// Number of elements compared.
    pub checked: usize,
    /// Probes dropped by the kink guard.
    pub skipped: usize,
    pub max_rel_err: f64,
    pub non_finite: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub name: String,
    pub inputs: Vec<InputCheck>,
    pub tol: f64,
    pub error: Option<String>,
}

impl GradCheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.inputs.iter().map(|c| c.max_rel_err).fold(0.0, f64::max)
    }

    pub fn skipped(&self) -> usize {
        self.inputs.iter().map(|c| c.skipped).sum()
    }

    pub fn checked(&self) -> usize {
        self.inputs.iter().map(|c| c.checked).sum()
    }

    /// Also fails when the kink guard dropped more than a quarter of the
    /// probes, since too little was then compared.
    pub fn passed(&self) -> bool {
        self.error.is_none()
            && 4 * self.skipped() <= self.checked()
            && self.inputs.iter().all(|c| !c.non_finite && c.max_rel_err <= self.tol)
    }
}

/// Settings of one gradient check.
#[derive(Clone, Debug)]
pub struct GradCheck {
    pub h: f64,
    pub tol: f64,
    /// Compare at most this many (seeded, randomly chosen) elements per input.
    pub max_probes: Option<usize>,
    pub seed: u64,
    /// Backward-rule fault to inject (see [`Graph::inject_backward_fault`]).
    pub fault: Option<&'static str>,
    /// Skip probes where the central differences at `h` and `h/2` disagree
    /// by more than `tol/4` (relative), i.e. where a ReLU kink, a max
    /// switch or a matching flip lies inside the stencil. Uses forward
    /// evaluations only.
    pub kink_guard: bool,
}

impl Default for GradCheck {
    fn default() -> Self {
        GradCheck {
            h: 1e-4,
            tol: 1e-4,
            max_probes: None,
            seed: 0,
            fault: None,
            kink_guard: false,
        }
    }
}

impl GradCheck {
    /// Compares the reverse-mode gradient of the scalar `f(inputs)` against
    /// central differences `(f(x+h) − f(x−h)) / 2h`, per input.
    pub fn run<F>(&self, name: &str, inputs: &[Tensor<f64>], f: F) -> GradCheckReport
    where
        F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
    {
        let mut report = GradCheckReport {
            name: name.to_string(),
            inputs: Vec::new(),
            tol: self.tol,
            error: None,
        };
        match self.run_inner(inputs, &f, &mut report) {
            Ok(()) => {}
            Err(e) => report.error = Some(e.to_string()),
        }
        report
    }

    fn run_inner<F>(&self, inputs: &[Tensor<f64>], f: &F, report: &mut GradCheckReport) -> Result<()>
    where
        F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
    {
        let mut g = Graph::new();
        if let Some(fault) = self.fault {
            g.inject_backward_fault(fault);
        }
        let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
        let root = f(&mut g, &vars)?;
        g.backward(root)?;

        let eval = |point: &[Tensor<f64>]| -> Result<f64> {
            let mut g = Graph::new();
            let vars: Vec<Var> = point.iter().map(|t| g.constant(t.clone())).collect();
            let root = f(&mut g, &vars)?;
            Ok(g.data(root)[0])
        };

        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let mut point: Vec<Tensor<f64>> = inputs.to_vec();
        for (which, input) in inputs.iter().enumerate() {
            let analytic = g.grad(vars[which]).expect("param leaf").to_vec();
            let n = input.numel();
            let elements: Vec<usize> = match self.max_probes {
                Some(m) if m < n => {
                    let mut e = sample(&mut rng, n, m).into_vec();
                    e.sort_unstable();
                    e
                }
                _ => (0..n).collect(),
            };
            let mut check = InputCheck {
                input: which,
                checked: elements.len(),
                skipped: 0,
                max_rel_err: 0.0,
                non_finite: false,
            };
            for &e in &elements {
                let x0 = input.data()[e];
                let mut central = |h: f64| -> Result<f64> {
                    point[which].data_mut()[e] = x0 + h;
                    let fp = eval(&point)?;
                    point[which].data_mut()[e] = x0 - h;
                    let fm = eval(&point)?;
                    point[which].data_mut()[e] = x0;
                    Ok((fp - fm) / (2.0 * h))
                };
                let numeric = central(self.h)?;
                let a = analytic[e];
                if !(numeric.is_finite() && a.is_finite()) {
                    check.non_finite = true;
                    continue;
                }
                if self.kink_guard {
                    let half = central(self.h / 2.0)?;
                    if relative_error(numeric, half) > self.tol / 4.0 {
                        check.skipped += 1;
                        continue;
                    }
                }
                check.max_rel_err = check.max_rel_err.max(relative_error(a, numeric));
            }
            report.inputs.push(check);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_gradient_is_exact() {
        let x = Tensor::from_vec(&[2], vec![1.0, 2.0]).unwrap();
        let report = GradCheck {
            tol: 1e-6,
            ..Default::default()
        }
        .run("sum_sq", std::slice::from_ref(&x), |g, v| {
            let sq = g.mul(v[0], v[0])?;
            Ok(g.sum(sq))
        });
        assert!(report.passed(), "{report:?}");

        let mut g = Graph::new();
        let v = g.param(x);
        let sq = g.mul(v, v).unwrap();
        let s = g.sum(sq);
        g.backward(s).unwrap();
        assert_eq!(g.grad(v).unwrap(), &[2.0, 4.0]);
    }

    #[test]
    fn kink_guard_skips_only_nonsmooth_probes() {
        // |x| with x straddling 0 inside the stencil
        let x = Tensor::from_vec(&[4], vec![3e-5, 0.7, -1.3, 0.4]).unwrap();
        let f = |g: &mut Graph<f64>, v: &[Var]| {
            let r = g.relu(v[0]);
            let n = g.scale(v[0], -1.0);
            let rn = g.relu(n);
            let abs = g.add(r, rn)?;
            Ok(g.sum(abs))
        };
        let plain = GradCheck::default().run("abs", std::slice::from_ref(&x), f);
        assert!(!plain.passed());
        let guarded = GradCheck {
            kink_guard: true,
            ..GradCheck::default()
        }
        .run("abs", &[x], f);
        assert!(guarded.passed(), "{guarded:?}");
        assert_eq!(guarded.skipped(), 1);
        assert_eq!(guarded.checked(), 4);
    }

    #[test]
    fn kink_guard_does_not_hide_backward_faults() {
        let x = Tensor::from_vec(&[4], vec![0.3, -0.2, 1.1, 0.9]).unwrap();
        let r = GradCheck {
            kink_guard: true,
            fault: Some("mul"),
            ..GradCheck::default()
        }
        .run("sq", &[x], |g, v| {
            let sq = g.mul(v[0], v[0])?;
            Ok(g.sum(sq))
        });
        assert_eq!(r.skipped(), 0);
        assert!(!r.passed());
    }

    #[test]
    fn softmax_sum_has_zero_gradient() {
        let x = Tensor::from_vec(&[4], vec![0.3, -1.2, 2.0, 0.0]).unwrap();
        let mut g = Graph::new();
        let v = g.param(x.clone());
        let s = g.softmax(v, 0).unwrap();
        let total = g.sum(s);
        g.backward(total).unwrap();
        assert!(g.grad(v).unwrap().iter().all(|d: &f64| d.abs() < 1e-12));

        let report = GradCheck::default().run("softmax_sum", &[x], |g, v| {
            let s = g.softmax(v[0], 0)?;
            Ok(g.sum(s))
        });
        assert!(report.passed(), "{report:?}");
    }

    #[test]
    fn injected_fault_is_detected() {
        let x = Tensor::from_vec(&[3], vec![0.5, -0.1, 0.9]).unwrap();
        let f = |g: &mut Graph<f64>, v: &[Var]| {
            let s = g.softmax(v[0], 0)?;
            let w = g.constant(Tensor::from_vec(&[3], vec![1.0, 2.0, 3.0])?);
            let p = g.mul(s, w)?;
            Ok(g.sum(p))
        };
        assert!(GradCheck::default().run("ok", std::slice::from_ref(&x), f).passed());
        let faulty = GradCheck {
            fault: Some("softmax"),
            ..Default::default()
        }
        .run("bad", &[x], f);
        assert!(!faulty.passed());
    }

    #[test]
    fn probing_limits_checked_elements() {
        let x = Tensor::from_vec(&[10], (0..10).map(|i| i as f64 * 0.1).collect()).unwrap();
        let report = GradCheck {
            max_probes: Some(3),
            ..Default::default()
        }
        .run("probe", &[x], |g, v| {
            let sq = g.mul(v[0], v[0])?;
            Ok(g.sum(sq))
        });
        assert_eq!(report.inputs[0].checked, 3);
        assert!(report.passed());
    }

    #[test]
    fn errors_are_reported_not_panicked() {
        let x = Tensor::from_vec(&[2], vec![1.0, 2.0]).unwrap();
        let report = GradCheck::default().run("bad_axis", &[x], |g, v| {
            let s = g.softmax(v[0], 3)?;
            Ok(g.sum(s))
        });
        assert!(!report.passed());
        assert!(report.error.is_some());
    }
}
