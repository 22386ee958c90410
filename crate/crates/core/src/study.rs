//! Monte Carlo replicate studies: generate → fit cycles with bias, empirical
//! SD, median SE, and 95% Wald coverage aggregated per packed Ω component.

use rayon::prelude::*;

use crate::design::build_designs;
use crate::em::{fit_designs, FitOptions};
use crate::error::Result;
use crate::params::Params;
use crate::simulate::{generate, ScenarioConfig};

/// Options of [`replicate_study`].
#[derive(Debug, Clone)]
pub struct StudyOptions {
    pub replicates: usize,
    /// Base seed; replicate r uses seed + r.
    pub seed: u64,
    /// Run replicates in parallel (each fit then uses one thread).
    pub parallel: bool,
    pub fit: FitOptions,
}

impl Default for StudyOptions {
    fn default() -> Self {
        Self {
            replicates: 100,
            seed: 1,
            parallel: true,
            fit: FitOptions {
                threads: 1,
                ..FitOptions::default()
            },
        }
    }
}

/// Table-style summary for one Ω component.
#[derive(Debug, Clone)]
pub struct ParamSummary {
    pub name: String,
    pub truth: f64,
    /// Mean(estimate) − truth.
    pub bias: f64,
    /// Empirical standard deviation of the estimates (needs ≥ 2 replicates).
    pub sd: Option<f64>,
    pub median_se: f64,
    /// Percent of replicates whose 95% Wald interval covers the truth.
    pub coverage_pct: f64,
}

#[derive(Debug, Clone)]
pub struct StudyResult {
    pub summaries: Vec<ParamSummary>,
    /// Replicates that errored (excluded from the summaries).
    pub n_failed: usize,
    /// Replicates that hit max_iter without converging (included).
    pub n_nonconverged: usize,
    pub replicates_used: usize,
    /// Monte Carlo standard error of each bias entry (SD/√R), when available.
    pub bias_mcse: Vec<Option<f64>>,
}

fn median(sorted: &mut [f64]) -> f64 {
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = sorted.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    }
}

/// Run R generate→fit cycles and aggregate per-parameter statistics.
pub fn replicate_study(scn: &ScenarioConfig, opts: &StudyOptions) -> Result<StudyResult> {
    scn.validate()?;
    let truth = scn.true_params().pack_omega();
    let names = Params::omega_names(&scn.spec);
    let dim = truth.len();

    let one = |r: usize| -> std::result::Result<(Vec<f64>, Vec<f64>, bool), String> {
        let seed = opts.seed + r as u64;
        let ds = generate(scn, seed).map_err(|e| e.to_string())?;
        let designs = build_designs(&ds).map_err(|e| e.to_string())?;
        let fit = fit_designs(&designs, &scn.spec, &opts.fit).map_err(|e| e.to_string())?;
        let est = fit.params.pack_omega().iter().copied().collect();
        let se = fit.se.clone().ok_or("study requires compute_se")?;
        Ok((est, se, fit.converged))
    };

    let results: Vec<std::result::Result<(Vec<f64>, Vec<f64>, bool), String>> = if opts.parallel {
        (0..opts.replicates).into_par_iter().map(one).collect()
    } else {
        (0..opts.replicates).map(one).collect()
    };

    let mut n_failed = 0usize;
    let mut n_nonconverged = 0usize;
    let mut kept: Vec<(Vec<f64>, Vec<f64>)> = Vec::new();
    for r in results {
        match r {
            Ok((est, se, converged)) => {
                if !converged {
                    n_nonconverged += 1;
                }
                kept.push((est, se));
            }
            Err(_) => n_failed += 1,
        }
    }
    let used = kept.len();

    let mut summaries = Vec::with_capacity(dim);
    let mut bias_mcse = Vec::with_capacity(dim);
    for j in 0..dim {
        let ests: Vec<f64> = kept.iter().map(|(e, _)| e[j]).collect();
        let ses: Vec<f64> = kept.iter().map(|(_, s)| s[j]).collect();
        let mean = ests.iter().sum::<f64>() / used.max(1) as f64;
        let sd = if used >= 2 {
            let var = ests.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / (used - 1) as f64;
            Some(var.sqrt())
        } else {
            None
        };
        let covered = ests
            .iter()
            .zip(&ses)
            .filter(|(e, s)| (*e - truth[j]).abs() <= 1.96 * **s)
            .count();
        let mut ses_sorted = ses.clone();
        summaries.push(ParamSummary {
            name: names[j].clone(),
            truth: truth[j],
            bias: mean - truth[j],
            sd,
            median_se: median(&mut ses_sorted),
            coverage_pct: 100.0 * covered as f64 / used.max(1) as f64,
        });
        bias_mcse.push(sd.map(|s| s / (used as f64).sqrt()));
    }

    Ok(StudyResult {
        summaries,
        n_failed,
        n_nonconverged,
        replicates_used: used,
        bias_mcse,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn median_of_small_sets() {
        assert_eq!(median(&mut [3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&mut [4.0, 1.0, 2.0, 3.0]), 2.5);
        assert!(median(&mut []).is_nan());
    }
}
