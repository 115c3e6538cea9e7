//! Finite-difference gradient checking.
//!
//! The checker only ever evaluates the forward pass, so it is independent of
//! every backward implementation it validates. Checks run in `f64`, where
//! central differences at `eps ~ 1e-5` resolve relative errors well below the
//! 1e-3 acceptance tolerance.

use crate::autograd::{Tape, Var};
use ndarray::ArrayD;
use rand::Rng;

pub struct GradCheckConfig {
    pub eps: f64,
    pub rel_tol: f64,
    /// Below this magnitude the comparison falls back to an absolute bound.
    pub abs_floor: f64,
    pub abs_tol: f64,
    pub probes: usize,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            eps: 1e-5,
            rel_tol: 1e-3,
            abs_floor: 1e-6,
            abs_tol: 1e-8,
            probes: 10,
            seed: 0,
        }
    }
}

#[derive(Debug)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_err: f64,
    pub failures: Vec<ProbeResult>,
}

#[derive(Debug)]
pub struct ProbeResult {
    pub leaf: usize,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }
}

/// Compare analytic gradients of `build`'s scalar output against central
/// finite differences on a random subset of leaf coordinates.
///
/// `build` receives one tape leaf per input array and must return the loss.
pub fn finite_diff_check<B>(
    build: B,
    leaves: &[ArrayD<f64>],
    cfg: &GradCheckConfig,
) -> GradCheckReport
where
    B: Fn(&Tape<f64>, &[Var]) -> Var,
{
    let eval = |arrays: &[ArrayD<f64>]| -> f64 {
        let tape = Tape::new();
        let vars: Vec<Var> = arrays.iter().map(|a| tape.constant(a.clone())).collect();
        let loss = build(&tape, &vars);
        tape.scalar(loss)
    };

    // Analytic pass.
    let tape = Tape::new();
    let vars: Vec<Var> = leaves.iter().map(|a| tape.leaf(a.clone())).collect();
    let loss = build(&tape, &vars);
    let grads = tape.backward(loss);

    let mut rng = crate::rng::derive(cfg.seed, "gradcheck", &[]);
    let mut report = GradCheckReport {
        checked: 0,
        max_rel_err: 0.0,
        failures: Vec::new(),
    };

    for _ in 0..cfg.probes {
        let leaf = rng.random_range(0..leaves.len());
        if leaves[leaf].is_empty() {
            continue;
        }
        let index = rng.random_range(0..leaves[leaf].len());

        let analytic = grads
            .wrt(vars[leaf])
            .map(|g| g.as_slice().map(|s| s[index]).unwrap_or_else(|| {
                *g.iter().nth(index).unwrap()
            }))
            .unwrap_or(0.0);

        let base = *leaves[leaf].iter().nth(index).unwrap();
        let eps = cfg.eps * base.abs().max(1.0);

        let mut plus = leaves.to_vec();
        *plus[leaf].iter_mut().nth(index).unwrap() = base + eps;
        let f_plus = eval(&plus);
        let mut minus = leaves.to_vec();
        *minus[leaf].iter_mut().nth(index).unwrap() = base - eps;
        let f_minus = eval(&minus);
        let numeric = (f_plus - f_minus) / (2.0 * eps);

        let denom = analytic.abs().max(numeric.abs());
        let (rel_err, ok) = if denom < cfg.abs_floor {
            let abs = (analytic - numeric).abs();
            (0.0, abs <= cfg.abs_tol)
        } else {
            let rel = (analytic - numeric).abs() / denom;
            (rel, rel <= cfg.rel_tol)
        };
        report.checked += 1;
        report.max_rel_err = report.max_rel_err.max(rel_err);
        if !ok {
            report.failures.push(ProbeResult {
                leaf,
                index,
                analytic,
                numeric,
                rel_err,
            });
        }
    }
    report
}

/// As [`finite_diff_check`], but probing entries of a parameter registry
/// instead of loose leaf arrays. `forward` must build a scalar loss on the
/// given tape, binding parameters from the registry it is handed.
///
/// The registry is restored to its exact initial contents after every
/// perturbed evaluation, so forward passes that fold state into it (batch
/// norm running estimates) cannot drift the baseline.
pub fn finite_diff_check_params<B>(
    forward: B,
    params: &mut crate::autograd::Params<f64>,
    cfg: &GradCheckConfig,
) -> GradCheckReport
where
    B: Fn(&Tape<f64>, &mut crate::autograd::Params<f64>) -> Var,
{
    let snapshot: Vec<ArrayD<f64>> = params.entries().iter().map(|e| e.value.clone()).collect();
    let restore = |params: &mut crate::autograd::Params<f64>, snap: &[ArrayD<f64>]| {
        for (entry, s) in params.entries_mut().iter_mut().zip(snap) {
            entry.value.assign(s);
        }
    };

    let trainable: Vec<usize> = params
        .entries()
        .iter()
        .enumerate()
        .filter(|(_, e)| e.trainable && !e.value.is_empty())
        .map(|(i, _)| i)
        .collect();

    // Choose probes, then take one analytic pass for all of them.
    let mut rng = crate::rng::derive(cfg.seed, "gradcheck-params", &[]);
    let probes: Vec<(usize, usize)> = (0..cfg.probes)
        .map(|_| {
            let entry = trainable[rng.random_range(0..trainable.len())];
            let index = rng.random_range(0..params.entries()[entry].value.len());
            (entry, index)
        })
        .collect();

    let analytic_vals: Vec<f64> = {
        let tape = Tape::new();
        let loss = forward(&tape, params);
        let grads = tape.backward(loss);
        let vals = probes
            .iter()
            .map(|&(entry, index)| {
                grads
                    .for_param(params, crate::autograd::ParamId(entry))
                    .map(|g| *g.iter().nth(index).unwrap())
                    .unwrap_or(0.0)
            })
            .collect();
        restore(params, &snapshot);
        vals
    };

    let mut report = GradCheckReport {
        checked: 0,
        max_rel_err: 0.0,
        failures: Vec::new(),
    };

    for (&(entry, index), &analytic) in probes.iter().zip(&analytic_vals) {
        let base = *snapshot[entry].iter().nth(index).unwrap();
        let eps = cfg.eps * base.abs().max(1.0);

        let mut eval_at = |x: f64| -> f64 {
            *params.entries_mut()[entry].value.iter_mut().nth(index).unwrap() = x;
            let tape = Tape::new();
            let loss = forward(&tape, params);
            let v = tape.scalar(loss);
            restore(params, &snapshot);
            v
        };
        let numeric = (eval_at(base + eps) - eval_at(base - eps)) / (2.0 * eps);

        let denom = analytic.abs().max(numeric.abs());
        let (rel_err, ok) = if denom < cfg.abs_floor {
            ((analytic - numeric).abs(), (analytic - numeric).abs() <= cfg.abs_tol)
        } else {
            let rel = (analytic - numeric).abs() / denom;
            (rel, rel <= cfg.rel_tol)
        };
        report.checked += 1;
        report.max_rel_err = report.max_rel_err.max(rel_err);
        if !ok {
            report.failures.push(ProbeResult {
                leaf: entry,
                index,
                analytic,
                numeric,
                rel_err,
            });
        }
    }
    report
}
