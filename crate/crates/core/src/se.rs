//! Profile-likelihood standard errors.
//!
//! Each subject contributes the gradient of the profile expected
//! complete-data log-likelihood at the converged Ω̂ (baseline hazards
//! profiled out), evaluated with the posteriors of the last E-step. The
//! covariance of Ω̂ is the inverse of the empirical Fisher information
//! Σᵢ ∇l⁽ⁱ⁾ ∇l⁽ⁱ⁾ᵀ.
//!
//! The γ/α score blocks need, for every subject, risk-set denominators and
//! weighted numerators at all event times plus their cumulative lookups
//! B(T_i); all of these come out of the scan engine in O(n) per cause.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::data::ModelSpec;
use crate::design::SubjectDesign;
use crate::error::{Error, Result};
use crate::mstep::sigma2_subject_term;
use crate::params::{min_symmetric_eigenvalue, Params};
use crate::posterior::{mgf_exp, mgf_exp_b, PosteriorApprox, EXP_GUARD};
use crate::scan::{EventGrid, RiskSetEngine, SurvOrder};

/// Precomputed risk-set tables for one cause.
pub struct CauseTables {
    /// Den(t_kl) = Σ_{r∈R(t_kl)} exp(W_rᵀγ_k)·E_r[exp(α_kᵀb_r)].
    pub den: Vec<f64>,
    /// Σ_{r∈R(t_kl)} e_r · W_r.
    pub numw: Vec<DVector<f64>>,
    /// Σ_{r∈R(t_kl)} exp(W_rᵀγ_k)·E_r[b_r exp(α_kᵀb_r)].
    pub numb: Vec<DVector<f64>>,
    /// A0(T_i) = Σ_{l: t_kl ≤ T_i} d_kl / Den(t_kl), per subject.
    pub a0: Vec<f64>,
    /// Σ_{l: t_kl ≤ T_i} d_kl·NumW(t_kl)/Den(t_kl)², per subject.
    pub aw: Vec<DVector<f64>>,
    /// Σ_{l: t_kl ≤ T_i} d_kl·NumB(t_kl)/Den(t_kl)², per subject.
    pub ab: Vec<DVector<f64>>,
    /// exp(W_iᵀγ_k), per subject.
    pub expw: Vec<f64>,
    /// E_i[exp(α_kᵀb_i)], per subject.
    pub mgf: Vec<f64>,
    /// E_i[b_i exp(α_kᵀb_i)], per subject.
    pub mgfb: Vec<DVector<f64>>,
}

/// Risk-set tables for all causes.
pub struct ScanTables {
    pub causes: Vec<CauseTables>,
}

/// Build the per-cause scan tables at the converged parameters.
pub fn build_scan_tables(
    designs: &[SubjectDesign],
    params: &Params,
    posteriors: &[PosteriorApprox],
    grids: &[EventGrid],
    order: &SurvOrder,
    engine: &RiskSetEngine,
) -> Result<ScanTables> {
    let n = designs.len();
    let w_dim = designs[0].w.len();
    let q = posteriors[0].mode.len();
    let mut causes = Vec::with_capacity(grids.len());
    for grid in grids {
        let k = grid.cause() - 1;
        let alpha_k = &params.alpha[k];
        let gamma_k = &params.gamma[k];
        let mut expw = Vec::with_capacity(n);
        let mut mgf = Vec::with_capacity(n);
        let mut mgfb = Vec::with_capacity(n);
        let mut e_w = Vec::with_capacity(n);
        let mut e_vec = Vec::with_capacity(n);
        let mut m_vec = Vec::with_capacity(n);
        for (d, pa) in designs.iter().zip(posteriors) {
            let wg = d.w.dot(gamma_k);
            if wg > EXP_GUARD {
                return Err(Error::Overflow {
                    context: "survival linear predictor".into(),
                    exponent: wg,
                });
            }
            let ew = wg.exp();
            let m = mgf_exp(pa, alpha_k)?;
            let mb = mgf_exp_b(pa, alpha_k)?;
            let e = ew * m;
            e_w.push(&d.w * e);
            m_vec.push(&mb * ew);
            e_vec.push(e);
            expw.push(ew);
            mgf.push(m);
            mgfb.push(mb);
        }
        let den = engine.riskset_sums(grid, order, &e_vec);
        let numw = engine.riskset_sums(grid, order, &e_w);
        let numb = engine.riskset_sums(grid, order, &m_vec);
        for (l, &dn) in den.iter().enumerate() {
            if !(dn > 0.0) || !dn.is_finite() {
                return Err(Error::ZeroDenominator {
                    cause: grid.cause(),
                    time: grid.times_desc()[l],
                });
            }
        }
        let d_counts = grid.tie_counts();
        let a0_series: Vec<f64> = d_counts
            .iter()
            .zip(&den)
            .map(|(&d, &dn)| d as f64 / dn)
            .collect();
        let aw_series: Vec<DVector<f64>> = (0..grid.len())
            .map(|l| &numw[l] * (d_counts[l] as f64 / (den[l] * den[l])))
            .collect();
        let ab_series: Vec<DVector<f64>> = (0..grid.len())
            .map(|l| &numb[l] * (d_counts[l] as f64 / (den[l] * den[l])))
            .collect();
        let a0 = engine.b_lookup(grid, order, &a0_series);
        let aw = if grid.is_empty() {
            vec![DVector::zeros(w_dim); n]
        } else {
            engine.b_lookup(grid, order, &aw_series)
        };
        let ab = if grid.is_empty() {
            vec![DVector::zeros(q); n]
        } else {
            engine.b_lookup(grid, order, &ab_series)
        };
        causes.push(CauseTables {
            den,
            numw,
            numb,
            a0,
            aw,
            ab,
            expw,
            mgf,
            mgfb,
        });
    }
    Ok(ScanTables { causes })
}

/// ∇_Ω l⁽ⁱ⁾(Ω̂) packed in the [`Params::pack_omega`] order.
pub fn score_vector(
    i: usize,
    design: &SubjectDesign,
    spec: &ModelSpec,
    params: &Params,
    sigma_inv: &DMatrix<f64>,
    pa: &PosteriorApprox,
    tables: &ScanTables,
    grids: &[EventGrid],
) -> DVector<f64> {
    let mut out = DVector::zeros(Params::omega_len(spec));
    let mut at = 0usize;

    // β blocks: (1/σ²_g)·X_gᵀ(Y_g − X_g β_g − Z_g b̂_g).
    for g in 0..spec.n_biomarkers() {
        let p_g = spec.p_g(g);
        let q_g = spec.q_g(g);
        let b = &design.blocks[g];
        let beta_g = params.beta.rows(spec.p_offset(g), p_g);
        let mode_g = pa.mode.rows(spec.q_offset(g), q_g);
        let grad =
            (&b.xty - &b.xtx * beta_g - b.ztx.transpose() * mode_g) / params.sigma2[g];
        out.rows_mut(at, p_g).copy_from(&grad);
        at += p_g;
    }

    // σ²_g blocks.
    for g in 0..spec.n_biomarkers() {
        let p_g = spec.p_g(g);
        let q_g = spec.q_g(g);
        let qo = spec.q_offset(g);
        let b = &design.blocks[g];
        let beta_g = params.beta.rows(spec.p_offset(g), p_g).into_owned();
        let s2 = params.sigma2[g];
        let num = sigma2_subject_term(b, &beta_g, pa.mode.rows(qo, q_g), pa.cov.view((qo, qo), (q_g, q_g)));
        out[at] = num / (2.0 * s2 * s2) - b.n_obs() as f64 / (2.0 * s2);
        at += 1;
    }

    // Σ block: ½[2M − M∘I − 2Σ⁻¹ + Σ⁻¹∘I] with M = Σ⁻¹ E(bbᵀ) Σ⁻¹, packed
    // as the lower triangle (the ∘I terms make the packed entries the
    // gradient w.r.t. the free lower-triangle parameters).
    let q = spec.q_total();
    let ebb = &pa.cov + &pa.mode * pa.mode.transpose();
    let m = sigma_inv * ebb * sigma_inv;
    for r in 0..q {
        for c in 0..=r {
            out[at] = if r == c {
                0.5 * (m[(r, c)] - sigma_inv[(r, c)])
            } else {
                m[(r, c)] - sigma_inv[(r, c)]
            };
            at += 1;
        }
    }

    // γ_k blocks.
    for k in 0..spec.n_causes() {
        let t = &tables.causes[k];
        let w_dim = spec.w_dim();
        let mut grad = &t.aw[i] * (t.expw[i] * t.mgf[i]) - &design.w * (t.a0[i] * t.expw[i] * t.mgf[i]);
        if let Some(l) = grids[k].event_index(i) {
            grad += &design.w - &t.numw[l] / t.den[l];
        }
        out.rows_mut(at, w_dim).copy_from(&grad);
        at += w_dim;
    }

    // α_k blocks.
    for k in 0..spec.n_causes() {
        let t = &tables.causes[k];
        let mut grad = (&t.ab[i] * t.mgf[i] - &t.mgfb[i] * t.a0[i]) * t.expw[i];
        if let Some(l) = grids[k].event_index(i) {
            grad += &pa.mode - &t.numb[l] / t.den[l];
        }
        out.rows_mut(at, q).copy_from(&grad);
        at += q;
    }

    out
}

/// Standard errors and covariance of the packed Ω̂.
#[derive(Debug, Clone)]
pub struct FisherSummary {
    pub se: Vec<f64>,
    pub covariance: DMatrix<f64>,
    /// Smallest eigenvalue of the empirical Fisher matrix.
    pub min_eigenvalue: f64,
}

/// Invert the empirical Fisher information Σᵢ sᵢ sᵢᵀ.
pub fn empirical_fisher(scores: &[DVector<f64>]) -> Result<FisherSummary> {
    let dim = scores
        .first()
        .ok_or_else(|| Error::InvalidValue("no score vectors".into()))?
        .len();
    let mut gram = DMatrix::zeros(dim, dim);
    for s in scores {
        if !s.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("score vector".into()));
        }
        gram.ger(1.0, s, s, 1.0);
    }
    let gram = (&gram + gram.transpose()) * 0.5;
    let min_eigenvalue = min_symmetric_eigenvalue(&gram);
    let chol = gram.clone().cholesky().ok_or(Error::SingularMatrix {
        context: "empirical Fisher information".into(),
        min_eig: min_eigenvalue,
    })?;
    let covariance = chol.inverse();
    let se = (0..dim).map(|j| covariance[(j, j)].sqrt()).collect();
    Ok(FisherSummary {
        se,
        covariance,
        min_eigenvalue,
    })
}

/// Full pipeline: scan tables → per-subject scores → empirical Fisher.
pub fn standard_errors(
    designs: &[SubjectDesign],
    spec: &ModelSpec,
    params: &Params,
    posteriors: &[PosteriorApprox],
    grids: &[EventGrid],
    order: &SurvOrder,
    engine: &RiskSetEngine,
) -> Result<FisherSummary> {
    let scores = score_matrix(designs, spec, params, posteriors, grids, order, engine)?;
    empirical_fisher(&scores)
}

/// All per-subject score vectors (parallel over subjects, deterministic
/// order).
pub fn score_matrix(
    designs: &[SubjectDesign],
    spec: &ModelSpec,
    params: &Params,
    posteriors: &[PosteriorApprox],
    grids: &[EventGrid],
    order: &SurvOrder,
    engine: &RiskSetEngine,
) -> Result<Vec<DVector<f64>>> {
    let chol = params
        .re_cov
        .clone()
        .cholesky()
        .ok_or_else(|| Error::InvalidParams("re_cov not positive-definite".into()))?;
    let sigma_inv = chol.inverse();
    let tables = build_scan_tables(designs, params, posteriors, grids, order, engine)?;
    Ok(designs
        .par_iter()
        .enumerate()
        .map(|(i, d)| score_vector(i, d, spec, params, &sigma_inv, &posteriors[i], &tables, grids))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn orthonormal_scores_give_identity_covariance() {
        // n = |Ω|, rows = unit basis → Gram = I → covariance = I.
        let dim = 4;
        let scores: Vec<DVector<f64>> = (0..dim)
            .map(|i| {
                let mut v = DVector::zeros(dim);
                v[i] = 1.0;
                v
            })
            .collect();
        let f = empirical_fisher(&scores).unwrap();
        assert!((f.covariance - DMatrix::identity(dim, dim)).amax() < 1e-12);
        assert!(f.se.iter().all(|s| (s - 1.0).abs() < 1e-12));
        assert!((f.min_eigenvalue - 1.0).abs() < 1e-12);
    }

    #[test]
    fn singular_gram_is_reported_with_min_eigenvalue() {
        let scores = vec![DVector::from_row_slice(&[1.0, 0.0]); 3];
        match empirical_fisher(&scores) {
            Err(Error::SingularMatrix { min_eig, .. }) => assert!(min_eig.abs() < 1e-12),
            other => panic!("expected singular error, got {other:?}"),
        }
    }
}
