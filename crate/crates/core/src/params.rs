//! Parameter container Ψ = (Ω, Λ₀1..K).
//!
//! Ω stacks the parametric components in a documented order that every
//! packed vector in the crate shares (standard errors, convergence checks,
//! CSV output):
//!
//! 1. β — fixed effects, biomarker blocks concatenated,
//! 2. σ²_1..σ²_G — residual variances,
//! 3. Σ — random-effects covariance, lower triangle row by row
//!    ((0,0), (1,0), (1,1), (2,0), …),
//! 4. γ_1..γ_K — survival covariate effects,
//! 5. α_1..α_K — association vectors (stacked over biomarkers).
//!
//! Baseline hazards are nonparametric step functions and are not part of Ω.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::data::ModelSpec;
use crate::design::SubjectDesign;
use crate::error::{Error, Result};
use crate::scan::{EventGrid, RiskSetEngine, SurvOrder};

/// Floor applied to residual variances after every update.
pub const SIGMA2_FLOOR: f64 = 1e-8;
/// Eigenvalue floor applied to Σ after every update.
pub const RE_COV_EIG_FLOOR: f64 = 1e-10;

/// Nonparametric cumulative baseline hazard for one cause: a right-continuous
/// non-decreasing step function with jumps at the distinct uncensored event
/// times of that cause.
///
/// Event times are stored strictly descending (the scan order of the risk-set
/// algorithms); `d` holds the tie count at each time.
#[derive(Debug, Clone, PartialEq)]
pub struct BaselineHazard {
    times: Vec<f64>,
    jumps: Vec<f64>,
    d: Vec<u32>,
    /// cum[l] = Λ₀k(times[l]) = jumps[l] + jumps[l+1] + … (suffix sums).
    cum: Vec<f64>,
}

impl BaselineHazard {
    pub fn new(times_desc: Vec<f64>, jumps: Vec<f64>, d: Vec<u32>) -> Result<Self> {
        if times_desc.len() != jumps.len() || times_desc.len() != d.len() {
            return Err(Error::DimensionMismatch(
                "baseline hazard times/jumps/tie-counts lengths differ".into(),
            ));
        }
        for w in times_desc.windows(2) {
            if !(w[0] > w[1]) {
                return Err(Error::InvalidParams(
                    "baseline hazard event times must be strictly decreasing".into(),
                ));
            }
        }
        for (&t, (&j, &dl)) in times_desc.iter().zip(jumps.iter().zip(&d)) {
            if !t.is_finite() || !j.is_finite() || j <= 0.0 || dl == 0 {
                return Err(Error::InvalidParams(format!(
                    "baseline hazard jump at t={t} must be positive and finite with tie count ≥ 1"
                )));
            }
        }
        let mut cum = vec![0.0; jumps.len()];
        let mut acc = 0.0;
        for l in (0..jumps.len()).rev() {
            acc += jumps[l];
            cum[l] = acc;
        }
        Ok(Self {
            times: times_desc,
            jumps,
            d,
            cum,
        })
    }

    pub fn empty() -> Self {
        Self {
            times: vec![],
            jumps: vec![],
            d: vec![],
            cum: vec![],
        }
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    /// Event times, descending.
    pub fn times_desc(&self) -> &[f64] {
        &self.times
    }

    pub fn jumps(&self) -> &[f64] {
        &self.jumps
    }

    pub fn tie_counts(&self) -> &[u32] {
        &self.d
    }

    /// Λ₀k at each stored event time (descending order, matching `times_desc`).
    pub fn cum_at_events(&self) -> &[f64] {
        &self.cum
    }

    /// Same event-time grid with new jump values.
    pub fn with_jumps(&self, jumps: Vec<f64>) -> Result<Self> {
        Self::new(self.times.clone(), jumps, self.d.clone())
    }

    /// Λ₀k(t) = Σ_{t_kl ≤ t} ΔΛ₀k(t_kl); right-continuous, 0 below the
    /// smallest event time.
    pub fn cum_hazard_at(&self, t: f64) -> f64 {
        // First index (in the descending list) with times[l] ≤ t.
        let l = self.times.partition_point(|&x| x > t);
        if l == self.times.len() {
            0.0
        } else {
            self.cum[l]
        }
    }

    /// Jump ΔΛ₀k(t) if `t` is exactly one of the stored event times.
    pub fn jump_at(&self, t: f64) -> Option<f64> {
        let l = self.times.partition_point(|&x| x > t);
        if l < self.times.len() && self.times[l] == t {
            Some(self.jumps[l])
        } else {
            None
        }
    }
}

/// Model parameters Ψ.
#[derive(Debug, Clone, PartialEq)]
pub struct Params {
    /// Stacked fixed effects, length p.
    pub beta: DVector<f64>,
    /// Residual variances σ²_g, length G.
    pub sigma2: Vec<f64>,
    /// Random-effects covariance Σ, q×q symmetric positive-definite.
    pub re_cov: DMatrix<f64>,
    /// Survival covariate effects γ_k, K vectors of length |W|.
    pub gamma: Vec<DVector<f64>>,
    /// Association vectors α_k, K vectors of length q.
    pub alpha: Vec<DVector<f64>>,
    /// Baseline hazards, one per cause.
    pub hazards: Vec<BaselineHazard>,
}

impl Params {
    pub fn validate(&self, spec: &ModelSpec) -> Result<()> {
        if self.beta.len() != spec.p_total() {
            return Err(Error::InvalidParams(format!(
                "beta has length {}, spec requires {}",
                self.beta.len(),
                spec.p_total()
            )));
        }
        if self.sigma2.len() != spec.n_biomarkers() {
            return Err(Error::InvalidParams("sigma2 length != G".into()));
        }
        if self.sigma2.iter().any(|&s| !(s > 0.0)) {
            return Err(Error::InvalidParams("sigma2 entries must be positive".into()));
        }
        let q = spec.q_total();
        if self.re_cov.shape() != (q, q) {
            return Err(Error::InvalidParams("re_cov shape != q×q".into()));
        }
        let asym = (&self.re_cov - self.re_cov.transpose()).amax();
        if asym > 1e-10 {
            return Err(Error::InvalidParams(format!(
                "re_cov not symmetric (max asymmetry {asym:e})"
            )));
        }
        let min_eig = min_symmetric_eigenvalue(&self.re_cov);
        if !(min_eig > 0.0) {
            return Err(Error::InvalidParams(format!(
                "re_cov not positive-definite (min eigenvalue {min_eig:e})"
            )));
        }
        if self.gamma.len() != spec.n_causes() || self.alpha.len() != spec.n_causes() {
            return Err(Error::InvalidParams("gamma/alpha count != K".into()));
        }
        for k in 0..spec.n_causes() {
            if self.gamma[k].len() != spec.w_dim() {
                return Err(Error::InvalidParams(format!("gamma[{k}] length != |W|")));
            }
            if self.alpha[k].len() != q {
                return Err(Error::InvalidParams(format!("alpha[{k}] length != q")));
            }
        }
        if self.hazards.len() != spec.n_causes() {
            return Err(Error::InvalidParams("hazard count != K".into()));
        }
        Ok(())
    }

    /// Length of the packed parametric vector Ω.
    pub fn omega_len(spec: &ModelSpec) -> usize {
        let q = spec.q_total();
        spec.p_total()
            + spec.n_biomarkers()
            + q * (q + 1) / 2
            + spec.n_causes() * spec.w_dim()
            + spec.n_causes() * q
    }

    /// Pack the parametric component Ω into a flat vector (order documented
    /// in the module docs).
    pub fn pack_omega(&self) -> DVector<f64> {
        let q = self.re_cov.nrows();
        let mut v = Vec::with_capacity(
            self.beta.len()
                + self.sigma2.len()
                + q * (q + 1) / 2
                + self.gamma.iter().map(|g| g.len()).sum::<usize>()
                + self.alpha.iter().map(|a| a.len()).sum::<usize>(),
        );
        v.extend(self.beta.iter());
        v.extend(self.sigma2.iter());
        for i in 0..q {
            for j in 0..=i {
                v.push(self.re_cov[(i, j)]);
            }
        }
        for g in &self.gamma {
            v.extend(g.iter());
        }
        for a in &self.alpha {
            v.extend(a.iter());
        }
        DVector::from_vec(v)
    }

    /// Rebuild the parametric components from a packed Ω vector; the
    /// nonparametric hazards are supplied separately.
    pub fn from_omega(v: &[f64], spec: &ModelSpec, hazards: Vec<BaselineHazard>) -> Result<Params> {
        if v.len() != Self::omega_len(spec) {
            return Err(Error::DimensionMismatch(format!(
                "packed omega has length {}, spec requires {}",
                v.len(),
                Self::omega_len(spec)
            )));
        }
        let q = spec.q_total();
        let mut at = 0usize;
        let mut take = |n: usize| {
            let s = &v[at..at + n];
            at += n;
            s
        };
        let beta = DVector::from_row_slice(take(spec.p_total()));
        let sigma2 = take(spec.n_biomarkers()).to_vec();
        let mut re_cov = DMatrix::zeros(q, q);
        for i in 0..q {
            for j in 0..=i {
                let x = take(1)[0];
                re_cov[(i, j)] = x;
                re_cov[(j, i)] = x;
            }
        }
        let gamma = (0..spec.n_causes())
            .map(|_| DVector::from_row_slice(take(spec.w_dim())))
            .collect();
        let alpha = (0..spec.n_causes())
            .map(|_| DVector::from_row_slice(take(q)))
            .collect();
        Ok(Params {
            beta,
            sigma2,
            re_cov,
            gamma,
            alpha,
            hazards,
        })
    }

    /// Human-readable names for the packed Ω entries, same order as
    /// [`Params::pack_omega`].
    pub fn omega_names(spec: &ModelSpec) -> Vec<String> {
        let mut names = Vec::with_capacity(Self::omega_len(spec));
        for (g, b) in spec.biomarkers.iter().enumerate() {
            for t in &b.fixed {
                names.push(format!("beta_{}_{}", g + 1, t));
            }
        }
        for g in 0..spec.n_biomarkers() {
            names.push(format!("sigma2_{}", g + 1));
        }
        let q = spec.q_total();
        for i in 0..q {
            for j in 0..=i {
                names.push(format!("Sigma_{}_{}", i + 1, j + 1));
            }
        }
        for k in 0..spec.n_causes() {
            for c in &spec.survival_covariates {
                names.push(format!("gamma_{}_{}", k + 1, c));
            }
        }
        for k in 0..spec.n_causes() {
            for (g, b) in spec.biomarkers.iter().enumerate() {
                for t in &b.random {
                    names.push(format!("alpha_{}_{}_{}", k + 1, g + 1, t));
                }
            }
        }
        names
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::to_value(ParamsJson::from(self)).expect("params serialize")
    }

    pub fn from_json(v: &serde_json::Value) -> Result<Params> {
        let pj: ParamsJson = serde_json::from_value(v.clone())?;
        pj.into_params()
    }
}

/// JSON mirror of [`Params`] with a stable, documented key order.
#[derive(Serialize, Deserialize)]
struct ParamsJson {
    schema_version: u32,
    beta: Vec<f64>,
    sigma2: Vec<f64>,
    /// Σ as full rows.
    re_cov: Vec<Vec<f64>>,
    gamma: Vec<Vec<f64>>,
    alpha: Vec<Vec<f64>>,
    hazards: Vec<HazardJson>,
}

#[derive(Serialize, Deserialize)]
struct HazardJson {
    /// Event times, descending.
    times: Vec<f64>,
    jumps: Vec<f64>,
    tie_counts: Vec<u32>,
}

impl From<&Params> for ParamsJson {
    fn from(p: &Params) -> Self {
        ParamsJson {
            schema_version: 1,
            beta: p.beta.iter().copied().collect(),
            sigma2: p.sigma2.clone(),
            re_cov: (0..p.re_cov.nrows())
                .map(|i| p.re_cov.row(i).iter().copied().collect())
                .collect(),
            gamma: p.gamma.iter().map(|v| v.iter().copied().collect()).collect(),
            alpha: p.alpha.iter().map(|v| v.iter().copied().collect()).collect(),
            hazards: p
                .hazards
                .iter()
                .map(|h| HazardJson {
                    times: h.times_desc().to_vec(),
                    jumps: h.jumps().to_vec(),
                    tie_counts: h.tie_counts().to_vec(),
                })
                .collect(),
        }
    }
}

impl ParamsJson {
    fn into_params(self) -> Result<Params> {
        let q = self.re_cov.len();
        let mut re_cov = DMatrix::zeros(q, q);
        for (i, row) in self.re_cov.iter().enumerate() {
            if row.len() != q {
                return Err(Error::DimensionMismatch("re_cov rows ragged".into()));
            }
            for (j, &x) in row.iter().enumerate() {
                re_cov[(i, j)] = x;
            }
        }
        Ok(Params {
            beta: DVector::from_vec(self.beta),
            sigma2: self.sigma2,
            re_cov,
            gamma: self.gamma.into_iter().map(DVector::from_vec).collect(),
            alpha: self.alpha.into_iter().map(DVector::from_vec).collect(),
            hazards: self
                .hazards
                .into_iter()
                .map(|h| BaselineHazard::new(h.times, h.jumps, h.tie_counts))
                .collect::<Result<_>>()?,
        })
    }
}

/// Smallest eigenvalue of a symmetric matrix.
pub fn min_symmetric_eigenvalue(m: &DMatrix<f64>) -> f64 {
    let sym = (m + m.transpose()) * 0.5;
    sym.symmetric_eigen()
        .eigenvalues
        .iter()
        .fold(f64::INFINITY, |a, &b| a.min(b))
}

/// Symmetrize and clamp eigenvalues of a covariance matrix from below.
pub fn floor_eigenvalues(m: &DMatrix<f64>, floor: f64) -> DMatrix<f64> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = sym.clone().symmetric_eigen();
    if eig.eigenvalues.iter().all(|&l| l >= floor) {
        return sym;
    }
    let mut vals = eig.eigenvalues.clone();
    for v in vals.iter_mut() {
        *v = v.max(floor);
    }
    let out = &eig.eigenvectors * DMatrix::from_diagonal(&vals) * eig.eigenvectors.transpose();
    (&out + out.transpose()) * 0.5
}

/// Deterministic starting values: per-biomarker OLS for β and σ²_g, Σ from
/// the pooled residual variance, γ = α = 0, and Nelson–Aalen baseline
/// hazards (zero covariate effects).
pub fn init_params(
    designs: &[SubjectDesign],
    spec: &ModelSpec,
    order: &SurvOrder,
    grids: &[EventGrid],
    engine: &RiskSetEngine,
) -> Result<Params> {
    let mut beta = DVector::zeros(spec.p_total());
    let mut sigma2 = Vec::with_capacity(spec.n_biomarkers());
    let mut pooled_ss = 0.0;
    let mut pooled_n = 0usize;
    for g in 0..spec.n_biomarkers() {
        let p_g = spec.p_g(g);
        let mut xtx = DMatrix::zeros(p_g, p_g);
        let mut xty = DVector::zeros(p_g);
        let mut yty = 0.0;
        let mut n_g = 0usize;
        for d in designs {
            let b = &d.blocks[g];
            xtx += &b.xtx;
            xty += &b.xty;
            yty += b.yty;
            n_g += b.n_obs();
        }
        if n_g == 0 {
            return Err(Error::EmptyBiomarker(g + 1));
        }
        let chol = xtx.clone().cholesky().ok_or_else(|| Error::SingularMatrix {
            context: format!("OLS normal equations for biomarker {}", g + 1),
            min_eig: min_symmetric_eigenvalue(&xtx),
        })?;
        let beta_g = chol.solve(&xty);
        let ss = (yty - beta_g.dot(&xty)).max(0.0);
        let s2 = (ss / n_g as f64).max(SIGMA2_FLOOR);
        beta.rows_mut(spec.p_offset(g), p_g).copy_from(&beta_g);
        sigma2.push(s2);
        pooled_ss += ss;
        pooled_n += n_g;
    }
    let pooled = (pooled_ss / pooled_n as f64).max(SIGMA2_FLOOR);
    let q = spec.q_total();
    let re_cov = DMatrix::identity(q, q) * pooled;

    let mut hazards = Vec::with_capacity(spec.n_causes());
    let ones = vec![1.0f64; designs.len()];
    for grid in grids {
        if grid.is_empty() {
            hazards.push(BaselineHazard::empty());
            continue;
        }
        let risk = engine.riskset_sums(grid, order, &ones);
        let jumps: Vec<f64> = grid
            .tie_counts()
            .iter()
            .zip(&risk)
            .map(|(&d, &r)| d as f64 / r)
            .collect();
        hazards.push(BaselineHazard::new(
            grid.times_desc().to_vec(),
            jumps,
            grid.tie_counts().to_vec(),
        )?);
    }

    let params = Params {
        beta,
        sigma2,
        re_cov,
        gamma: (0..spec.n_causes()).map(|_| DVector::zeros(spec.w_dim())).collect(),
        alpha: (0..spec.n_causes()).map(|_| DVector::zeros(q)).collect(),
        hazards,
    };
    params.validate(spec)?;
    Ok(params)
}


#[cfg(test)]
mod proptests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        // Λ₀k is monotone in t and piecewise constant.
        #[test]
        fn cum_hazard_monotone(
            mut times in proptest::collection::vec(0.01f64..100.0, 1..20),
            t1 in 0.0f64..120.0,
            dt in 0.0f64..50.0,
        ) {
            times.sort_by(|a, b| b.partial_cmp(a).unwrap());
            times.dedup();
            let jumps = vec![0.25; times.len()];
            let d = vec![1u32; times.len()];
            let h = BaselineHazard::new(times, jumps, d).unwrap();
            let t2 = t1 + dt;
            prop_assert!(h.cum_hazard_at(t1) <= h.cum_hazard_at(t2));
        }
    }
}
