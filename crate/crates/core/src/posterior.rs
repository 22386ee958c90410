//! E-step: per-subject posterior approximation of the random effects.
//!
//! The conditional distribution of b_i given the observed data is replaced
//! by N(b̂_i, Σ̂_i), where b̂_i maximizes the complete-data log density in b
//! and Σ̂_i is the inverse of the negated Hessian at the mode. Every
//! expectation the M-step and the standard errors need then has a closed
//! form through the normal moment-generating function; no quadrature is
//! used anywhere in the production path (the test suite checks the closed
//! forms against Gauss–Hermite quadrature).
//!
//! The longitudinal contribution is quadratic in b, so each subject's
//! Newton iteration works entirely off cached Gram products; its cost does
//! not depend on the number of measurements.

use nalgebra::{Cholesky, DMatrix, DVector};

use crate::design::SubjectDesign;
use crate::error::{Error, Result};
use crate::params::Params;

/// Largest exponent fed to `exp` before signalling overflow.
pub const EXP_GUARD: f64 = 700.0;

/// Gradient sup-norm tolerance of the mode search.
pub const MODE_TOL: f64 = 1e-8;

const MAX_NEWTON: usize = 100;
const MAX_HALVINGS: usize = 30;

/// Mode and curvature of one subject's random-effects posterior.
#[derive(Debug, Clone)]
pub struct PosteriorApprox {
    /// Posterior mode b̂_i, length q.
    pub mode: DVector<f64>,
    /// Σ̂_i: inverse of the negated Hessian at the mode, symmetric PD.
    pub cov: DMatrix<f64>,
    /// Newton steps the mode search took.
    pub newton_steps: usize,
}

/// Per-subject complete-data log density l(b) = log f(Y_i, T_i, D_i, b | Ψ)
/// with all normalizing constants, precomputed at fixed Ψ.
pub struct SubjectLik<'a> {
    /// Z V⁻¹ Zᵀ (block-diagonal, scattered to q×q).
    m_mat: DMatrix<f64>,
    /// Z V⁻¹ (Y − Xᵀβ), scattered to q.
    u_vec: DVector<f64>,
    /// Σ_g ‖Y_g − X_g β_g‖² / σ²_g.
    rss0: f64,
    /// All b-independent terms (Gaussian constants, log det Σ, event terms).
    const_term: f64,
    /// Per cause: Λ₀k(T_i) · exp(W_iᵀγ_k) ≥ 0.
    c: Vec<f64>,
    alpha: &'a [DVector<f64>],
    /// Cause index − 1 when D_i ≥ 1.
    event_cause: Option<usize>,
    sigma_inv: &'a DMatrix<f64>,
}

impl<'a> SubjectLik<'a> {
    /// `lam_at_ti[k]` must hold Λ₀k(T_i) under the current hazards (computed
    /// in bulk by the scan engine).
    pub fn new(
        design: &SubjectDesign,
        params: &'a Params,
        sigma_inv: &'a DMatrix<f64>,
        logdet_sigma: f64,
        lam_at_ti: &[f64],
    ) -> Result<Self> {
        let q = sigma_inv.nrows();
        let mut m_mat = DMatrix::zeros(q, q);
        let mut u_vec = DVector::zeros(q);
        let mut rss0 = 0.0;
        let mut const_term = -0.5 * q as f64 * (2.0 * std::f64::consts::PI).ln() - 0.5 * logdet_sigma;
        let (mut po, mut qo) = (0usize, 0usize);
        for (g, b) in design.blocks.iter().enumerate() {
            let s2 = params.sigma2[g];
            let p_g = b.xtx.nrows();
            let q_g = b.ztz.nrows();
            let beta_g = params.beta.rows(po, p_g);
            let r_quad = b.yty - 2.0 * beta_g.dot(&b.xty) + (&b.xtx * &beta_g).dot(&beta_g);
            rss0 += r_quad / s2;
            let u_g = (&b.zty - &b.ztx * &beta_g) / s2;
            u_vec.rows_mut(qo, q_g).copy_from(&u_g);
            m_mat
                .view_mut((qo, qo), (q_g, q_g))
                .copy_from(&(&b.ztz / s2));
            const_term -= 0.5 * b.n_obs() as f64 * (2.0 * std::f64::consts::PI * s2).ln();
            po += p_g;
            qo += q_g;
        }

        let mut c = Vec::with_capacity(params.hazards.len());
        for (k, hazard) in params.hazards.iter().enumerate() {
            let wg = design.w.dot(&params.gamma[k]);
            if wg > EXP_GUARD {
                return Err(Error::Overflow {
                    context: "survival linear predictor".into(),
                    exponent: wg,
                });
            }
            let ck = lam_at_ti[k] * wg.exp();
            if !ck.is_finite() {
                return Err(Error::NonFinite("cumulative hazard weight".into()));
            }
            c.push(ck);
            let _ = hazard;
        }

        let event_cause = if design.cause >= 1 {
            let k = design.cause - 1;
            let jump = params.hazards[k]
                .jump_at(design.surv_time)
                .ok_or_else(|| {
                    Error::InvalidParams(format!(
                        "no hazard jump at event time {} of subject `{}`",
                        design.surv_time, design.id
                    ))
                })?;
            const_term += jump.ln() + design.w.dot(&params.gamma[k]);
            Some(k)
        } else {
            None
        };

        Ok(Self {
            m_mat,
            u_vec,
            rss0,
            const_term,
            c,
            alpha: &params.alpha,
            event_cause,
            sigma_inv,
        })
    }

    /// log f(Y_i, T_i, D_i, b | Ψ), including all constants.
    pub fn value(&self, b: &DVector<f64>) -> Result<f64> {
        let quad = self.rss0 - 2.0 * b.dot(&self.u_vec) + (&self.m_mat * b).dot(b);
        let mut v = self.const_term - 0.5 * quad - 0.5 * (self.sigma_inv * b).dot(b);
        for (k, &ck) in self.c.iter().enumerate() {
            if ck > 0.0 {
                let expo = self.alpha[k].dot(b);
                if ck.ln() + expo > EXP_GUARD {
                    return Err(Error::Overflow {
                        context: "hazard exponent in complete-data density".into(),
                        exponent: ck.ln() + expo,
                    });
                }
                v -= ck * expo.exp();
            }
        }
        if let Some(k) = self.event_cause {
            v += self.alpha[k].dot(b);
        }
        if !v.is_finite() {
            return Err(Error::NonFinite("complete-data log density".into()));
        }
        Ok(v)
    }

    /// Value, gradient, and Hessian of the log density in b.
    pub fn value_grad_hess(&self, b: &DVector<f64>) -> Result<(f64, DVector<f64>, DMatrix<f64>)> {
        let v = self.value(b)?;
        let mut grad = &self.u_vec - &self.m_mat * b - self.sigma_inv * b;
        let mut hess = -&self.m_mat - self.sigma_inv;
        for (k, &ck) in self.c.iter().enumerate() {
            if ck > 0.0 {
                let weight = ck * self.alpha[k].dot(b).exp();
                grad -= &self.alpha[k] * weight;
                hess.ger(-weight, &self.alpha[k], &self.alpha[k], 1.0);
            }
        }
        if let Some(k) = self.event_cause {
            grad += &self.alpha[k];
        }
        Ok((v, grad, hess))
    }
}

/// Value, gradient and Hessian of the complete-data log density in b.
pub fn complete_logdensity_in_b(
    subj: &SubjectLik<'_>,
    b: &DVector<f64>,
) -> Result<(f64, DVector<f64>, DMatrix<f64>)> {
    subj.value_grad_hess(b)
}

fn cholesky_with_ridge(m: DMatrix<f64>, context: &str) -> Result<Cholesky<f64, nalgebra::Dyn>> {
    match Cholesky::new(m.clone()) {
        Some(c) => Ok(c),
        None => {
            let n = m.nrows();
            let ridged = m + DMatrix::identity(n, n) * 1e-8;
            Cholesky::new(ridged.clone()).ok_or_else(|| Error::SingularMatrix {
                context: context.to_string(),
                min_eig: crate::params::min_symmetric_eigenvalue(&ridged),
            })
        }
    }
}

/// Newton search with step-halving for the posterior mode; returns the mode
/// and the curvature Σ̂_i = (−Hessian)⁻¹ at the mode.
pub fn posterior_mode(subj: &SubjectLik<'_>, b_init: &DVector<f64>) -> Result<PosteriorApprox> {
    let mut b = b_init.clone();
    let (mut v, mut g, mut h) = subj.value_grad_hess(&b)?;
    let mut steps = 0usize;
    while g.amax() >= MODE_TOL {
        if steps >= MAX_NEWTON {
            return Err(Error::NonConvergence {
                what: "posterior mode search".into(),
                iterations: MAX_NEWTON,
            });
        }
        let chol = cholesky_with_ridge(-&h, "negated posterior hessian")?;
        let delta = chol.solve(&g);
        let mut scale = 1.0;
        let mut moved = false;
        for _ in 0..=MAX_HALVINGS {
            let cand = &b + &delta * scale;
            // Overflow along the path means the step is too long: damp it.
            if let Ok(vn) = subj.value(&cand) {
                if vn >= v {
                    b = cand;
                    moved = true;
                    break;
                }
            }
            scale *= 0.5;
        }
        steps += 1;
        if !moved {
            return Err(Error::NonConvergence {
                what: "posterior mode line search".into(),
                iterations: steps,
            });
        }
        let (v2, g2, h2) = subj.value_grad_hess(&b)?;
        v = v2;
        g = g2;
        h = h2;
    }
    let chol = cholesky_with_ridge(-&h, "posterior curvature")?;
    let cov = chol.inverse();
    let cov = (&cov + cov.transpose()) * 0.5;
    Ok(PosteriorApprox {
        mode: b,
        cov,
        newton_steps: steps,
    })
}

/// E_i[exp(α_kᵀ b_i)] = exp(α_kᵀ b̂_i + ½ α_kᵀ Σ̂_i α_k).
pub fn mgf_exp(pa: &PosteriorApprox, alpha: &DVector<f64>) -> Result<f64> {
    mgf_weight(pa, alpha, 0.0)
}

/// exp(shift + α_kᵀ b̂_i + ½ α_kᵀ Σ̂_i α_k); the survival weights of the
/// M-step and the standard errors use shift = W_iᵀγ_k.
pub fn mgf_weight(pa: &PosteriorApprox, alpha: &DVector<f64>, shift: f64) -> Result<f64> {
    let expo = shift + alpha.dot(&pa.mode) + 0.5 * (&pa.cov * alpha).dot(alpha);
    if expo > EXP_GUARD {
        return Err(Error::Overflow {
            context: "moment-generating function".into(),
            exponent: expo,
        });
    }
    Ok(expo.exp())
}

/// E_i[b_i exp(α_kᵀ b_i)] = mgf_exp · (Σ̂_i α_k + b̂_i).
pub fn mgf_exp_b(pa: &PosteriorApprox, alpha: &DVector<f64>) -> Result<DVector<f64>> {
    let m = mgf_exp(pa, alpha)?;
    Ok((&pa.cov * alpha + &pa.mode) * m)
}

/// E_i[b_i b_iᵀ exp(α_kᵀ b_i)] = mgf_exp · {(Σ̂_i α_k + b̂_i)(Σ̂_i α_k + b̂_i)ᵀ + Σ̂_i}.
pub fn mgf_exp_bbt(pa: &PosteriorApprox, alpha: &DVector<f64>) -> Result<DMatrix<f64>> {
    let m = mgf_exp(pa, alpha)?;
    let s = &pa.cov * alpha + &pa.mode;
    Ok((&s * s.transpose() + &pa.cov) * m)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::design::SubjectDesign;
    use crate::params::BaselineHazard;
    use nalgebra::{DMatrix, DVector};
    use rand::prelude::*;
    use rand_chacha::ChaCha12Rng;

    use crate::testutil::block_from_dense;

    fn toy_design(rng: &mut impl Rng, n: usize, cause: usize, surv_time: f64) -> SubjectDesign {
        let x = DMatrix::from_fn(n, 2, |i, j| if j == 0 { 1.0 } else { i as f64 * 0.5 });
        let z = DMatrix::from_fn(n, 1, |_, _| 1.0);
        let y = DVector::from_fn(n, |_, _| rng.random_range(-1.0..1.0));
        SubjectDesign {
            id: "t".into(),
            blocks: vec![block_from_dense(y, x, z, (0..n).map(|i| i as f64 * 0.5).collect())],
            surv_time,
            cause,
            w: DVector::from_row_slice(&[1.0]),
        }
    }

    fn toy_params(alpha: f64, with_hazard: bool) -> Params {
        let hazard = if with_hazard {
            BaselineHazard::new(vec![1.0, 0.5], vec![0.2, 0.1], vec![1, 1]).unwrap()
        } else {
            BaselineHazard::empty()
        };
        Params {
            beta: DVector::from_row_slice(&[0.3, -0.2]),
            sigma2: vec![0.5],
            re_cov: DMatrix::from_element(1, 1, 1.0),
            gamma: vec![DVector::from_row_slice(&[0.4])],
            alpha: vec![DVector::from_element(1, alpha)],
            hazards: vec![hazard],
        }
    }

    #[test]
    fn hessian_is_constant_without_hazard_contribution() {
        // α_k = 0 and Λ₀k(T_i) = 0 → hessian = −(ZV⁻¹Zᵀ + Σ⁻¹) for every b.
        let mut rng = ChaCha12Rng::seed_from_u64(1);
        let d = toy_design(&mut rng, 4, 0, 2.0);
        let p = toy_params(0.0, false);
        let sigma_inv = DMatrix::from_element(1, 1, 1.0);
        let lik = SubjectLik::new(&d, &p, &sigma_inv, 0.0, &[0.0]).unwrap();
        let (_, _, h0) = lik.value_grad_hess(&DVector::from_element(1, 0.0)).unwrap();
        let (_, _, h1) = lik.value_grad_hess(&DVector::from_element(1, 3.0)).unwrap();
        assert_eq!(h0, h1);
        let expected = -(&d.blocks[0].ztz / 0.5 + &sigma_inv);
        assert!((h0 - expected).amax() < 1e-12);
    }

    #[test]
    fn gradient_vanishes_at_prior_mode_without_data() {
        // b = 0, no longitudinal rows, censored subject with Λ = 0.
        let d = SubjectDesign {
            id: "empty".into(),
            blocks: vec![block_from_dense(
                DVector::zeros(0),
                DMatrix::zeros(0, 2),
                DMatrix::zeros(0, 1),
                vec![],
            )],
            surv_time: 1.0,
            cause: 0,
            w: DVector::from_row_slice(&[1.0]),
        };
        let p = toy_params(0.7, false);
        let sigma_inv = DMatrix::from_element(1, 1, 1.0);
        let lik = SubjectLik::new(&d, &p, &sigma_inv, 0.0, &[0.0]).unwrap();
        let (_, g, _) = lik.value_grad_hess(&DVector::zeros(1)).unwrap();
        assert!(g.amax() < 1e-15);
    }

    #[test]
    fn linear_gaussian_mode_is_exact_conditional() {
        // No hazard contribution → b̂ = (Σ⁻¹ + ZV⁻¹Zᵀ)⁻¹ ZV⁻¹(Y − Xᵀβ).
        let mut rng = ChaCha12Rng::seed_from_u64(2);
        let d = toy_design(&mut rng, 6, 0, 2.0);
        let p = toy_params(0.0, false);
        let sigma_inv = DMatrix::from_element(1, 1, 1.0);
        let lik = SubjectLik::new(&d, &p, &sigma_inv, 0.0, &[0.0]).unwrap();
        let pa = posterior_mode(&lik, &DVector::zeros(1)).unwrap();

        let b = &d.blocks[0];
        let beta = p.beta.clone();
        let r = &b.y - &b.x * &beta;
        let m = &b.ztz / 0.5 + &sigma_inv;
        let u = (b.z.transpose() * &r) / 0.5;
        let expected_cov = m.try_inverse().unwrap();
        let expected_mode = &expected_cov * u;
        assert!((&pa.mode - expected_mode).amax() < 1e-10);
        assert!((&pa.cov - expected_cov).amax() < 1e-10);
        // Exactly one Newton step solves a quadratic.
        assert!(pa.newton_steps <= 2);
    }

    #[test]
    fn mgf_trivial_cases() {
        let pa = PosteriorApprox {
            mode: DVector::from_row_slice(&[0.4, -0.3]),
            cov: DMatrix::from_row_slice(2, 2, &[0.5, 0.1, 0.1, 0.8]),
            newton_steps: 0,
        };
        // α = 0 → MGF 1, E[b], E[bbᵀ].
        let zero = DVector::zeros(2);
        assert_eq!(mgf_exp(&pa, &zero).unwrap(), 1.0);
        assert_eq!(mgf_exp_b(&pa, &zero).unwrap(), pa.mode);
        let second = mgf_exp_bbt(&pa, &zero).unwrap();
        let expected = &pa.cov + &pa.mode * pa.mode.transpose();
        assert!((second - expected).amax() < 1e-15);

        // Σ̂ = 0 → point mass: exp(αᵀb̂).
        let point = PosteriorApprox {
            mode: DVector::from_row_slice(&[0.4, -0.3]),
            cov: DMatrix::zeros(2, 2),
            newton_steps: 0,
        };
        let a = DVector::from_row_slice(&[1.0, 2.0]);
        let expected = (a.dot(&point.mode)).exp();
        assert!((mgf_exp(&point, &a).unwrap() - expected).abs() < 1e-15);

        // b̂ = 0, Σ̂ = I → exp(‖α‖²/2)·α for the first derivative.
        let std = PosteriorApprox {
            mode: DVector::zeros(2),
            cov: DMatrix::identity(2, 2),
            newton_steps: 0,
        };
        let expect = &a * (0.5 * a.norm_squared()).exp();
        assert!((mgf_exp_b(&std, &a).unwrap() - expect).amax() < 1e-12);
    }

    #[test]
    fn mgf_second_moment_identity_is_psd() {
        // mgf_exp_bbT − mgf_exp_b·mgf_exp_bᵀ/mgf_exp = mgf_exp·Σ̂ (PSD).
        let mut rng = ChaCha12Rng::seed_from_u64(3);
        for _ in 0..20 {
            let q = 3;
            let a_mat = DMatrix::from_fn(q, q, |_, _| rng.random_range(-1.0..1.0));
            let cov = &a_mat * a_mat.transpose() + DMatrix::identity(q, q) * 0.1;
            let pa = PosteriorApprox {
                mode: DVector::from_fn(q, |_, _| rng.random_range(-1.0..1.0)),
                cov,
                newton_steps: 0,
            };
            let alpha = DVector::from_fn(q, |_, _| rng.random_range(-1.0..1.0));
            let m = mgf_exp(&pa, &alpha).unwrap();
            let mb = mgf_exp_b(&pa, &alpha).unwrap();
            let mbb = mgf_exp_bbt(&pa, &alpha).unwrap();
            let resid = &mbb - &mb * mb.transpose() / m;
            assert!((&resid - &pa.cov * m).amax() < 1e-10 * m.max(1.0));
            assert!(crate::params::min_symmetric_eigenvalue(&resid) > -1e-10);
            // Symmetric output.
            assert!((&mbb - mbb.transpose()).amax() == 0.0);
        }
    }

    #[test]
    fn mgf_overflow_is_reported() {
        let pa = PosteriorApprox {
            mode: DVector::from_element(1, 800.0),
            cov: DMatrix::identity(1, 1),
            newton_steps: 0,
        };
        let a = DVector::from_element(1, 1.0);
        match mgf_exp(&pa, &a) {
            Err(Error::Overflow { exponent, .. }) => assert!(exponent > 700.0),
            other => panic!("expected overflow, got {other:?}"),
        }
    }

    #[test]
    fn event_subject_requires_jump_at_event_time() {
        let mut rng = ChaCha12Rng::seed_from_u64(4);
        let d = toy_design(&mut rng, 3, 1, 0.75); // no jump at 0.75
        let p = toy_params(0.5, true);
        let sigma_inv = DMatrix::from_element(1, 1, 1.0);
        let err = match SubjectLik::new(&d, &p, &sigma_inv, 0.0, &[0.1]) {
            Err(e) => e,
            Ok(_) => panic!("expected error"),
        };
        assert!(matches!(err, Error::InvalidParams(_)));
    }
}
