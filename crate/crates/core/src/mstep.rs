//! M-step updates.
//!
//! β, σ²_g and Σ have closed forms under the posterior approximation; the
//! baseline hazards get a Breslow-type update with MGF-weighted risk-set
//! denominators; φ_k = (γ_k, α_k) takes exactly one Newton step per M-step
//! from the current estimate, guarded by step-halving on the expected
//! survival log-likelihood. All risk-set quantities flow through the
//! [`RiskSetEngine`], so the per-iteration survival work is O(n) with the
//! scan engine.

use nalgebra::{DMatrix, DVector};

use crate::data::ModelSpec;
use crate::design::SubjectDesign;
use crate::error::{Error, Result};
use crate::params::{floor_eigenvalues, min_symmetric_eigenvalue, BaselineHazard, RE_COV_EIG_FLOOR, SIGMA2_FLOOR};
use crate::posterior::{mgf_exp, mgf_exp_b, mgf_exp_bbt, mgf_weight, PosteriorApprox};
use crate::scan::{EventGrid, RiskSetEngine, SurvOrder};

/// β̂ = (Σᵢ X V⁻¹ Xᵀ)⁻¹ Σᵢ X V⁻¹ (Y − Zᵀ b̂ᵢ). The stacked system is
/// block-diagonal across biomarkers (and σ²_g cancels within a block), so
/// each β_g solves its own normal equations.
pub fn update_beta(
    designs: &[SubjectDesign],
    spec: &ModelSpec,
    posteriors: &[PosteriorApprox],
) -> Result<DVector<f64>> {
    let mut beta = DVector::zeros(spec.p_total());
    for g in 0..spec.n_biomarkers() {
        let p_g = spec.p_g(g);
        let q_g = spec.q_g(g);
        let qo = spec.q_offset(g);
        let mut lhs = DMatrix::zeros(p_g, p_g);
        let mut rhs = DVector::zeros(p_g);
        for (d, pa) in designs.iter().zip(posteriors) {
            let b = &d.blocks[g];
            lhs += &b.xtx;
            rhs += &b.xty - b.ztx.transpose() * pa.mode.rows(qo, q_g);
        }
        let chol = lhs.clone().cholesky().ok_or_else(|| Error::SingularMatrix {
            context: format!("normal equations for beta block {}", g + 1),
            min_eig: min_symmetric_eigenvalue(&lhs),
        })?;
        beta.rows_mut(spec.p_offset(g), p_g).copy_from(&chol.solve(&rhs));
    }
    Ok(beta)
}

/// Per-subject numerator of the σ²_g update (also the building block of the
/// σ² score): E_i ‖Y_g − X_g β_g − Z_g b_g‖² expanded through the posterior
/// moments.
pub(crate) fn sigma2_subject_term(
    block: &crate::design::BlockDesign,
    beta_g: &DVector<f64>,
    mode_g: nalgebra::DVectorView<'_, f64>,
    cov_g: nalgebra::DMatrixView<'_, f64>,
) -> f64 {
    let r_quad = block.yty - 2.0 * beta_g.dot(&block.xty) + (&block.xtx * beta_g).dot(beta_g);
    let ztr = &block.zty - &block.ztx * beta_g;
    let ebb = &cov_g + &mode_g * mode_g.transpose();
    let trace = block.ztz.component_mul(&ebb).sum();
    r_quad - 2.0 * ztr.dot(&mode_g) + trace
}

/// σ̂²_g from the closed-form update, floored at [`SIGMA2_FLOOR`].
pub fn update_sigma2(
    designs: &[SubjectDesign],
    spec: &ModelSpec,
    beta: &DVector<f64>,
    posteriors: &[PosteriorApprox],
) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(spec.n_biomarkers());
    for g in 0..spec.n_biomarkers() {
        let p_g = spec.p_g(g);
        let q_g = spec.q_g(g);
        let qo = spec.q_offset(g);
        let beta_g = beta.rows(spec.p_offset(g), p_g).into_owned();
        let mut num = 0.0;
        let mut den = 0usize;
        for (d, pa) in designs.iter().zip(posteriors) {
            let b = &d.blocks[g];
            num += sigma2_subject_term(
                b,
                &beta_g,
                pa.mode.rows(qo, q_g),
                pa.cov.view((qo, qo), (q_g, q_g)),
            );
            den += b.n_obs();
        }
        if den == 0 {
            return Err(Error::EmptyBiomarker(g + 1));
        }
        out.push((num / den as f64).max(SIGMA2_FLOOR));
    }
    Ok(out)
}

/// Σ̂ = Σᵢ (Σ̂ᵢ + b̂ᵢ b̂ᵢᵀ) / n, symmetrized and eigenvalue-floored.
pub fn update_re_cov(posteriors: &[PosteriorApprox], q: usize) -> DMatrix<f64> {
    let mut acc = DMatrix::zeros(q, q);
    for pa in posteriors {
        acc += &pa.cov;
        acc.ger(1.0, &pa.mode, &pa.mode, 1.0);
    }
    acc /= posteriors.len() as f64;
    floor_eigenvalues(&acc, RE_COV_EIG_FLOOR)
}

/// Per-subject risk weight exp(W_rᵀγ_k + α_kᵀb̂_r + ½α_kᵀΣ̂_rα_k).
fn risk_weights(
    designs: &[SubjectDesign],
    posteriors: &[PosteriorApprox],
    gamma_k: &DVector<f64>,
    alpha_k: &DVector<f64>,
) -> Result<Vec<f64>> {
    designs
        .iter()
        .zip(posteriors)
        .map(|(d, pa)| mgf_weight(pa, alpha_k, d.w.dot(gamma_k)))
        .collect()
}

/// Breslow-type update ΔΛ̂₀k(t_kl) = d_kl / Σ_{r∈R(t_kl)} a_r with
/// a_r = exp(W_rᵀγ_k)·E_r[exp(α_kᵀb_r)].
pub fn update_baseline_hazard(
    designs: &[SubjectDesign],
    grid: &EventGrid,
    order: &SurvOrder,
    engine: &RiskSetEngine,
    gamma_k: &DVector<f64>,
    alpha_k: &DVector<f64>,
    posteriors: &[PosteriorApprox],
) -> Result<BaselineHazard> {
    if grid.is_empty() {
        return Ok(BaselineHazard::empty());
    }
    let a = risk_weights(designs, posteriors, gamma_k, alpha_k)?;
    let den = engine.riskset_sums(grid, order, &a);
    let mut jumps = Vec::with_capacity(grid.len());
    for (l, (&d, &dn)) in grid.tie_counts().iter().zip(&den).enumerate() {
        if !(dn > 0.0) || !dn.is_finite() {
            return Err(Error::ZeroDenominator {
                cause: grid.cause(),
                time: grid.times_desc()[l],
            });
        }
        jumps.push(d as f64 / dn);
    }
    BaselineHazard::new(grid.times_desc().to_vec(), jumps, grid.tie_counts().to_vec())
}

/// Expected survival log-likelihood summand for cause k (up to the
/// φ-independent log ΔΛ terms), used by the step-halving guard.
fn q_surv(
    designs: &[SubjectDesign],
    posteriors: &[PosteriorApprox],
    lam: &[f64],
    cause: usize,
    gamma_k: &DVector<f64>,
    alpha_k: &DVector<f64>,
) -> Result<f64> {
    let mut q = 0.0;
    for (i, (d, pa)) in designs.iter().zip(posteriors).enumerate() {
        let wg = d.w.dot(gamma_k);
        if d.cause == cause {
            q += wg + alpha_k.dot(&pa.mode);
        }
        if lam[i] > 0.0 {
            q -= lam[i] * mgf_weight(pa, alpha_k, wg)?;
        }
    }
    Ok(q)
}

/// One Newton step for φ_k = (γ_k, α_k) using the freshly updated baseline
/// hazard. With `freeze_alpha` the step is restricted to the γ_k block.
/// Returns the new (γ_k, α_k).
pub fn update_phi(
    designs: &[SubjectDesign],
    grid: &EventGrid,
    order: &SurvOrder,
    engine: &RiskSetEngine,
    hazard_k: &BaselineHazard,
    gamma_k: &DVector<f64>,
    alpha_k: &DVector<f64>,
    posteriors: &[PosteriorApprox],
    freeze_alpha: bool,
) -> Result<(DVector<f64>, DVector<f64>)> {
    let (score, info) = phi_score_info(designs, grid, order, engine, hazard_k, gamma_k, alpha_k, posteriors)?;
    if !score.iter().all(|v| v.is_finite()) {
        return Err(Error::NonFinite("phi score".into()));
    }
    let w_dim = gamma_k.len();
    let q = alpha_k.len();

    let (sub_score, sub_info) = if freeze_alpha {
        (
            score.rows(0, w_dim).into_owned(),
            info.view((0, 0), (w_dim, w_dim)).into_owned(),
        )
    } else {
        (score.clone(), info.clone())
    };

    let dim = sub_info.nrows();
    let min_eig = min_symmetric_eigenvalue(&sub_info);
    let ridged = if min_eig < 1e-10 {
        &sub_info + DMatrix::identity(dim, dim) * 1e-8
    } else {
        sub_info.clone()
    };
    let chol = ridged.clone().cholesky().ok_or_else(|| Error::SingularMatrix {
        context: format!("phi information matrix for cause {}", grid.cause()),
        min_eig,
    })?;
    let delta = chol.solve(&sub_score);

    // Step-halving on the expected survival log-likelihood.
    let lam = engine.cum_hazard_all(hazard_k, order);
    let q0 = q_surv(designs, posteriors, &lam, grid.cause(), gamma_k, alpha_k)?;
    let mut scale = 1.0;
    for _ in 0..=10 {
        let mut gamma_new = gamma_k.clone();
        let mut alpha_new = alpha_k.clone();
        if freeze_alpha {
            gamma_new += &delta * scale;
        } else {
            gamma_new += delta.rows(0, w_dim) * scale;
            alpha_new += delta.rows(w_dim, q) * scale;
        }
        match q_surv(designs, posteriors, &lam, grid.cause(), &gamma_new, &alpha_new) {
            Ok(q_new) if q_new >= q0 => return Ok((gamma_new, alpha_new)),
            _ => scale *= 0.5,
        }
    }
    // No ascent direction at this scale; keep the current estimate.
    Ok((gamma_k.clone(), alpha_k.clone()))
}

/// Score S_φk and information I_φk of the expected survival log-likelihood,
/// assembled from the MGF expectations and scan-engine Λ₀k lookups.
pub fn phi_score_info(
    designs: &[SubjectDesign],
    grid: &EventGrid,
    order: &SurvOrder,
    engine: &RiskSetEngine,
    hazard_k: &BaselineHazard,
    gamma_k: &DVector<f64>,
    alpha_k: &DVector<f64>,
    posteriors: &[PosteriorApprox],
) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let w_dim = gamma_k.len();
    let q = alpha_k.len();
    let dim = w_dim + q;
    let cause = grid.cause();
    let lam = engine.cum_hazard_all(hazard_k, order);

    let mut s_gamma = DVector::zeros(w_dim);
    let mut s_alpha = DVector::zeros(q);
    let mut i_gamma = DMatrix::zeros(w_dim, w_dim);
    let mut i_alpha = DMatrix::zeros(q, q);
    let mut i_cross = DMatrix::zeros(w_dim, q);

    for (i, (d, pa)) in designs.iter().zip(posteriors).enumerate() {
        if d.cause == cause {
            s_gamma += &d.w;
            s_alpha += &pa.mode;
        }
        if lam[i] > 0.0 {
            let wg = d.w.dot(gamma_k);
            if wg > crate::posterior::EXP_GUARD {
                return Err(Error::Overflow {
                    context: "survival linear predictor".into(),
                    exponent: wg,
                });
            }
            let c = lam[i] * wg.exp();
            let m = mgf_exp(pa, alpha_k)?;
            let mb = mgf_exp_b(pa, alpha_k)?;
            let mbb = mgf_exp_bbt(pa, alpha_k)?;
            s_gamma -= &d.w * (c * m);
            s_alpha -= &mb * c;
            i_gamma.ger(c * m, &d.w, &d.w, 1.0);
            i_alpha += mbb * c;
            i_cross.ger(c, &d.w, &mb, 1.0);
        }
    }

    let mut info = DMatrix::zeros(dim, dim);
    info.view_mut((0, 0), (w_dim, w_dim)).copy_from(&i_gamma);
    info.view_mut((0, w_dim), (w_dim, q)).copy_from(&i_cross);
    info.view_mut((w_dim, 0), (q, w_dim)).copy_from(&i_cross.transpose());
    info.view_mut((w_dim, w_dim), (q, q)).copy_from(&i_alpha);
    let info = (&info + info.transpose()) * 0.5;

    let mut score = DVector::zeros(dim);
    score.rows_mut(0, w_dim).copy_from(&s_gamma);
    score.rows_mut(w_dim, q).copy_from(&s_alpha);
    Ok((score, info))
}
