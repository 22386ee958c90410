//! EM driver: alternates the posterior E-step with the M-step updates until
//! the parametric components stabilize, then computes profile-likelihood
//! standard errors.
//!
//! The E-step is parallel over subjects; every reduction afterwards runs in
//! deterministic subject order, so results are bitwise identical across
//! runs and thread counts.

use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::data::{Dataset, ModelSpec};
use crate::design::{build_designs, SubjectDesign};
use crate::error::{Error, Result};
use crate::mstep;
use crate::params::{init_params, Params};
use crate::posterior::{posterior_mode, PosteriorApprox, SubjectLik};
use crate::scan::{EngineKind, EventGrid, OpCounts, RiskSetEngine, SurvOrder};
use crate::se;

/// Options of [`fit`].
#[derive(Debug, Clone)]
pub struct FitOptions {
    /// Maximum number of EM iterations.
    pub max_iter: usize,
    /// Convergence tolerance on the relative change of Ω components.
    pub tol: f64,
    /// Worker threads for the subject-parallel phases (0 = all cores).
    pub threads: usize,
    /// Risk-set aggregation engine.
    pub engine: EngineKind,
    /// Compute profile-likelihood standard errors after convergence.
    pub compute_se: bool,
    /// Keep every α_k frozen at its initial value (0 unless `init` says
    /// otherwise); the survival and longitudinal submodels then decouple.
    pub freeze_alpha: bool,
    /// Starting values; per-biomarker OLS + Nelson–Aalen when absent.
    pub init: Option<Params>,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            max_iter: 500,
            tol: 1e-4,
            threads: 0,
            engine: EngineKind::Scan,
            compute_se: true,
            freeze_alpha: false,
            init: None,
        }
    }
}

/// Wall time spent per phase, milliseconds.
#[derive(Debug, Clone, Copy, Default)]
pub struct Timings {
    pub e_step_ms: f64,
    pub m_step_ms: f64,
    pub se_ms: f64,
    pub total_ms: f64,
}

/// Converged parameters, standard errors, and diagnostics.
#[derive(Debug, Clone)]
pub struct FitResult {
    pub params: Params,
    /// Standard errors for the packed Ω components, if requested.
    pub se: Option<Vec<f64>>,
    /// EM iterations performed.
    pub iterations: usize,
    /// Approximate observed-data log-likelihood at the start of each
    /// iteration, plus a final entry at the returned parameters.
    pub loglik_trace: Vec<f64>,
    pub converged: bool,
    pub timings: Timings,
    /// Scan-engine operation counters accumulated over the whole fit.
    pub op_counts: OpCounts,
}

/// Fit the joint model to a dataset.
pub fn fit(ds: &Dataset, opts: &FitOptions) -> Result<FitResult> {
    let designs = build_designs(ds)?;
    fit_designs(&designs, &ds.spec, opts)
}

/// Fit from prebuilt designs.
pub fn fit_designs(designs: &[SubjectDesign], spec: &ModelSpec, opts: &FitOptions) -> Result<FitResult> {
    if designs.is_empty() {
        return Err(Error::InvalidValue("empty dataset".into()));
    }
    if designs.iter().all(|d| d.cause == 0) {
        return Err(Error::InvalidValue(
            "no uncensored events in the dataset".into(),
        ));
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(opts.threads)
        .build()
        .map_err(|e| Error::InvalidValue(format!("thread pool: {e}")))?;
    pool.install(|| fit_inner(designs, spec, opts))
}

struct EStepOut {
    posteriors: Vec<PosteriorApprox>,
    loglik: f64,
}

fn run_e_step(
    designs: &[SubjectDesign],
    spec: &ModelSpec,
    params: &Params,
    engine: &RiskSetEngine,
    order: &SurvOrder,
    warm: Option<&[PosteriorApprox]>,
) -> Result<EStepOut> {
    let q = spec.q_total();
    let chol = params
        .re_cov
        .clone()
        .cholesky()
        .ok_or_else(|| Error::InvalidParams("re_cov not positive-definite".into()))?;
    let sigma_inv = chol.inverse();
    let logdet_sigma: f64 = chol.l().diagonal().iter().map(|d| 2.0 * d.ln()).sum();

    // Λ₀k(T_i) for every subject and cause, one scan per cause.
    let lam: Vec<Vec<f64>> = params
        .hazards
        .iter()
        .map(|h| engine.cum_hazard_all(h, order))
        .collect();

    let results: Vec<(PosteriorApprox, f64)> = designs
        .par_iter()
        .enumerate()
        .map(|(i, d)| -> Result<(PosteriorApprox, f64)> {
            let lam_i: Vec<f64> = lam.iter().map(|l| l[i]).collect();
            let lik = SubjectLik::new(d, params, &sigma_inv, logdet_sigma, &lam_i)?;
            let init = warm
                .map(|w| w[i].mode.clone())
                .unwrap_or_else(|| DVector::zeros(q));
            let pa = posterior_mode(&lik, &init)?;
            let value = lik.value(&pa.mode)?;
            let cov_chol = pa.cov.clone().cholesky().ok_or_else(|| {
                Error::InvalidParams("posterior covariance not positive-definite".into())
            })?;
            let logdet_cov: f64 = cov_chol.l().diagonal().iter().map(|d| 2.0 * d.ln()).sum();
            let ll = value + 0.5 * q as f64 * (2.0 * std::f64::consts::PI).ln() + 0.5 * logdet_cov;
            Ok((pa, ll))
        })
        .collect::<Result<_>>()?;

    // Deterministic reduction in subject order.
    let loglik = results.iter().map(|(_, ll)| ll).sum();
    let posteriors = results.into_iter().map(|(pa, _)| pa).collect();
    Ok(EStepOut { posteriors, loglik })
}

fn run_m_step(
    designs: &[SubjectDesign],
    spec: &ModelSpec,
    params: &Params,
    posteriors: &[PosteriorApprox],
    engine: &RiskSetEngine,
    order: &SurvOrder,
    grids: &[EventGrid],
    freeze_alpha: bool,
) -> Result<Params> {
    let beta = mstep::update_beta(designs, spec, posteriors)?;
    let sigma2 = mstep::update_sigma2(designs, spec, &beta, posteriors)?;
    let re_cov = mstep::update_re_cov(posteriors, spec.q_total());
    let mut hazards = Vec::with_capacity(spec.n_causes());
    let mut gamma = Vec::with_capacity(spec.n_causes());
    let mut alpha = Vec::with_capacity(spec.n_causes());
    for k in 0..spec.n_causes() {
        let hazard = mstep::update_baseline_hazard(
            designs,
            &grids[k],
            order,
            engine,
            &params.gamma[k],
            &params.alpha[k],
            posteriors,
        )?;
        let (g, a) = mstep::update_phi(
            designs,
            &grids[k],
            order,
            engine,
            &hazard,
            &params.gamma[k],
            &params.alpha[k],
            posteriors,
            freeze_alpha,
        )?;
        hazards.push(hazard);
        gamma.push(g);
        alpha.push(a);
    }
    Ok(Params {
        beta,
        sigma2,
        re_cov,
        gamma,
        alpha,
        hazards,
    })
}

/// max_j |new_j − old_j| / (|old_j| + 1e-3) over the packed Ω components.
fn max_rel_change(old: &DVector<f64>, new: &DVector<f64>) -> f64 {
    old.iter()
        .zip(new.iter())
        .map(|(o, n)| (n - o).abs() / (o.abs() + 1e-3))
        .fold(0.0, f64::max)
}

fn fit_inner(designs: &[SubjectDesign], spec: &ModelSpec, opts: &FitOptions) -> Result<FitResult> {
    let start = Instant::now();
    let mut timings = Timings::default();
    let engine = RiskSetEngine::new(opts.engine);
    let order = SurvOrder::new(designs);
    let grids: Vec<EventGrid> = (1..=spec.n_causes())
        .map(|k| EventGrid::new(designs, &order, k))
        .collect();

    let mut params = match &opts.init {
        Some(p) => {
            p.validate(spec)?;
            p.clone()
        }
        None => init_params(designs, spec, &order, &grids, &engine)?,
    };

    let mut trace = Vec::new();
    let mut warm: Option<Vec<PosteriorApprox>> = None;
    let mut converged = false;
    let mut iterations = 0usize;
    let mut best: Option<(f64, Params)> = None;

    for _ in 0..opts.max_iter {
        let t0 = Instant::now();
        let e = run_e_step(designs, spec, &params, &engine, &order, warm.as_deref())?;
        timings.e_step_ms += t0.elapsed().as_secs_f64() * 1e3;
        trace.push(e.loglik);
        if best.as_ref().is_none_or(|(ll, _)| e.loglik > *ll) {
            best = Some((e.loglik, params.clone()));
        }

        let t0 = Instant::now();
        let new_params = run_m_step(
            designs,
            spec,
            &params,
            &e.posteriors,
            &engine,
            &order,
            &grids,
            opts.freeze_alpha,
        )?;
        timings.m_step_ms += t0.elapsed().as_secs_f64() * 1e3;

        let delta = max_rel_change(&params.pack_omega(), &new_params.pack_omega());
        params = new_params;
        warm = Some(e.posteriors);
        iterations += 1;
        if delta < opts.tol {
            converged = true;
            break;
        }
    }

    // Final E-step at the returned parameters (these posteriors feed the
    // standard errors). On non-convergence return the best-loglik iterate.
    let t0 = Instant::now();
    let mut e = run_e_step(designs, spec, &params, &engine, &order, warm.as_deref())?;
    if !converged {
        if let Some((best_ll, best_params)) = best {
            if best_ll > e.loglik {
                params = best_params;
                e = run_e_step(designs, spec, &params, &engine, &order, warm.as_deref())?;
            }
        }
    }
    timings.e_step_ms += t0.elapsed().as_secs_f64() * 1e3;
    trace.push(e.loglik);

    let se = if opts.compute_se {
        let t0 = Instant::now();
        let fisher = se::standard_errors(designs, spec, &params, &e.posteriors, &grids, &order, &engine)?;
        timings.se_ms += t0.elapsed().as_secs_f64() * 1e3;
        Some(fisher.se)
    } else {
        None
    };

    timings.total_ms = start.elapsed().as_secs_f64() * 1e3;
    Ok(FitResult {
        params,
        se,
        iterations,
        loglik_trace: trace,
        converged,
        timings,
        op_counts: engine.ops(),
    })
}

/// Approximate observed-data log-likelihood at Ψ under given posteriors:
/// Σᵢ [log f(Yᵢ, Tᵢ, Dᵢ, b̂ᵢ | Ψ) + (q/2)·log 2π + ½·log det Σ̂ᵢ].
pub fn approx_observed_loglik(
    designs: &[SubjectDesign],
    spec: &ModelSpec,
    params: &Params,
    posteriors: &[PosteriorApprox],
    engine: &RiskSetEngine,
) -> Result<f64> {
    let q = spec.q_total();
    let order = SurvOrder::new(designs);
    let chol = params
        .re_cov
        .clone()
        .cholesky()
        .ok_or_else(|| Error::InvalidParams("re_cov not positive-definite".into()))?;
    let sigma_inv: DMatrix<f64> = chol.inverse();
    let logdet_sigma: f64 = chol.l().diagonal().iter().map(|d| 2.0 * d.ln()).sum();
    let lam: Vec<Vec<f64>> = params
        .hazards
        .iter()
        .map(|h| engine.cum_hazard_all(h, &order))
        .collect();
    let mut total = 0.0;
    for (i, (d, pa)) in designs.iter().zip(posteriors).enumerate() {
        let lam_i: Vec<f64> = lam.iter().map(|l| l[i]).collect();
        let lik = SubjectLik::new(d, params, &sigma_inv, logdet_sigma, &lam_i)?;
        let value = lik.value(&pa.mode)?;
        let cov_chol = pa.cov.clone().cholesky().ok_or_else(|| {
            Error::InvalidParams("posterior covariance not positive-definite".into())
        })?;
        let logdet_cov: f64 = cov_chol.l().diagonal().iter().map(|d| 2.0 * d.ln()).sum();
        total += value + 0.5 * q as f64 * (2.0 * std::f64::consts::PI).ln() + 0.5 * logdet_cov;
    }
    Ok(total)
}

/// One E-step at fixed parameters; exposed for diagnostics and tests.
pub fn posterior_pass(
    designs: &[SubjectDesign],
    spec: &ModelSpec,
    params: &Params,
    engine: &RiskSetEngine,
    warm: Option<&[PosteriorApprox]>,
) -> Result<Vec<PosteriorApprox>> {
    let order = SurvOrder::new(designs);
    Ok(run_e_step(designs, spec, params, engine, &order, warm)?.posteriors)
}
