//! Per-subject stacked designs.
//!
//! The stacked design for subject i is block-diagonal across biomarkers:
//! X_i = X_i1 ⊕ … ⊕ X_iG (one row per measurement), likewise Z_i, and the
//! residual covariance V_i = σ²_1 I ⊕ … ⊕ σ²_G I. V_i is never materialized:
//! it is diagonal with per-block σ²_g, so V_i⁻¹ is a row scaling. All
//! downstream formulas consume the per-block Gram products cached here, which
//! makes the per-iteration cost of a subject independent of its number of
//! measurements.

use nalgebra::{DMatrix, DVector};

use crate::data::Dataset;
use crate::error::{Error, Result};

/// Design block for one (subject, biomarker) pair with cached Grams.
#[derive(Debug, Clone)]
pub struct BlockDesign {
    pub times: Vec<f64>,
    /// n_ig-vector of responses.
    pub y: DVector<f64>,
    /// n_ig × p_g fixed design.
    pub x: DMatrix<f64>,
    /// n_ig × q_g random design.
    pub z: DMatrix<f64>,
    pub yty: f64,
    pub xty: DVector<f64>,
    pub xtx: DMatrix<f64>,
    pub zty: DVector<f64>,
    /// q_g × p_g.
    pub ztx: DMatrix<f64>,
    pub ztz: DMatrix<f64>,
}

impl BlockDesign {
    pub fn n_obs(&self) -> usize {
        self.y.len()
    }
}

/// All designs for one subject.
#[derive(Debug, Clone)]
pub struct SubjectDesign {
    pub id: String,
    pub blocks: Vec<BlockDesign>,
    pub surv_time: f64,
    /// 0 = censored, 1..=K = cause index.
    pub cause: usize,
    pub w: DVector<f64>,
}

impl SubjectDesign {
    pub fn n_total(&self) -> usize {
        self.blocks.iter().map(|b| b.n_obs()).sum()
    }

    /// Dense stacked response (test/oracle helper).
    pub fn stacked_y(&self) -> DVector<f64> {
        let mut out = DVector::zeros(self.n_total());
        let mut r = 0;
        for b in &self.blocks {
            out.rows_mut(r, b.n_obs()).copy_from(&b.y);
            r += b.n_obs();
        }
        out
    }

    /// Dense block-diagonal fixed design, N_i × p (test/oracle helper).
    pub fn stacked_x(&self) -> DMatrix<f64> {
        let p: usize = self.blocks.iter().map(|b| b.x.ncols()).sum();
        let mut out = DMatrix::zeros(self.n_total(), p);
        let (mut r, mut c) = (0, 0);
        for b in &self.blocks {
            out.view_mut((r, c), b.x.shape()).copy_from(&b.x);
            r += b.x.nrows();
            c += b.x.ncols();
        }
        out
    }

    /// Dense block-diagonal random design, N_i × q (test/oracle helper).
    pub fn stacked_z(&self) -> DMatrix<f64> {
        let q: usize = self.blocks.iter().map(|b| b.z.ncols()).sum();
        let mut out = DMatrix::zeros(self.n_total(), q);
        let (mut r, mut c) = (0, 0);
        for b in &self.blocks {
            out.view_mut((r, c), b.z.shape()).copy_from(&b.z);
            r += b.z.nrows();
            c += b.z.ncols();
        }
        out
    }

    /// Diagonal of V_i for given residual variances, length N_i.
    pub fn v_diag(&self, sigma2: &[f64]) -> DVector<f64> {
        let mut out = DVector::zeros(self.n_total());
        let mut r = 0;
        for (g, b) in self.blocks.iter().enumerate() {
            out.rows_mut(r, b.n_obs()).fill(sigma2[g]);
            r += b.n_obs();
        }
        out
    }

    /// Xᵀv computed blockwise (equals `stacked_x().transpose() * v`).
    pub fn apply_xt(&self, v: &DVector<f64>) -> DVector<f64> {
        let p: usize = self.blocks.iter().map(|b| b.x.ncols()).sum();
        let mut out = DVector::zeros(p);
        let (mut r, mut c) = (0, 0);
        for b in &self.blocks {
            let seg = v.rows(r, b.n_obs());
            out.rows_mut(c, b.x.ncols()).copy_from(&(b.x.transpose() * seg));
            r += b.n_obs();
            c += b.x.ncols();
        }
        out
    }

    /// Zᵀv computed blockwise (equals `stacked_z().transpose() * v`).
    pub fn apply_zt(&self, v: &DVector<f64>) -> DVector<f64> {
        let q: usize = self.blocks.iter().map(|b| b.z.ncols()).sum();
        let mut out = DVector::zeros(q);
        let (mut r, mut c) = (0, 0);
        for b in &self.blocks {
            let seg = v.rows(r, b.n_obs());
            out.rows_mut(c, b.z.ncols()).copy_from(&(b.z.transpose() * seg));
            r += b.n_obs();
            c += b.z.ncols();
        }
        out
    }
}

fn build_block(obs: &[crate::data::LongObs], p_g: usize, q_g: usize) -> Result<BlockDesign> {
    let n = obs.len();
    let mut y = DVector::zeros(n);
    let mut x = DMatrix::zeros(n, p_g);
    let mut z = DMatrix::zeros(n, q_g);
    let mut times = Vec::with_capacity(n);
    for (j, o) in obs.iter().enumerate() {
        if o.x.len() != p_g || o.z.len() != q_g {
            return Err(Error::DimensionMismatch(format!(
                "design row has {} fixed / {} random entries, spec has {p_g} / {q_g}",
                o.x.len(),
                o.z.len()
            )));
        }
        y[j] = o.value;
        x.row_mut(j).copy_from(&o.x.transpose());
        z.row_mut(j).copy_from(&o.z.transpose());
        times.push(o.time);
    }
    Ok(BlockDesign {
        yty: y.dot(&y),
        xty: x.transpose() * &y,
        xtx: x.transpose() * &x,
        zty: z.transpose() * &y,
        ztx: z.transpose() * &x,
        ztz: z.transpose() * &z,
        times,
        y,
        x,
        z,
    })
}

/// Build per-subject stacked designs from a validated dataset.
pub fn build_designs(ds: &Dataset) -> Result<Vec<SubjectDesign>> {
    let spec = &ds.spec;
    let w_dim = spec.w_dim();
    ds.subjects
        .iter()
        .map(|s| {
            if s.surv.w.len() != w_dim {
                return Err(Error::DimensionMismatch(format!(
                    "survival design for subject `{}` has {} entries, spec has {w_dim}",
                    s.id,
                    s.surv.w.len()
                )));
            }
            let blocks = s
                .long
                .iter()
                .enumerate()
                .map(|(g, obs)| build_block(obs, spec.p_g(g), spec.q_g(g)))
                .collect::<Result<Vec<_>>>()?;
            Ok(SubjectDesign {
                id: s.id.clone(),
                blocks,
                surv_time: s.surv.time,
                cause: s.surv.cause,
                w: s.surv.w.clone(),
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{assemble_dataset, BiomarkerSpec, LongObs, ModelSpec, Subject, SurvRecord, Term};
    use nalgebra::{DMatrix, DVector};
    use rand::prelude::*;
    use rand_chacha::ChaCha12Rng;

    fn obs(time: f64, value: f64, x: &[f64], z: &[f64]) -> LongObs {
        LongObs {
            time,
            value,
            x: DVector::from_row_slice(x),
            z: DVector::from_row_slice(z),
            raw_covs: vec![],
            row_idx: 0,
        }
    }

    fn spec(pq: &[(usize, usize)]) -> ModelSpec {
        ModelSpec {
            causes: 1,
            biomarkers: pq
                .iter()
                .map(|&(p, q)| BiomarkerSpec {
                    fixed: (0..p).map(|_| Term::Intercept).collect(),
                    random: (0..q).map(|_| Term::Intercept).collect(),
                })
                .collect(),
            survival_covariates: vec![],
        }
    }

    fn subject(spec: &ModelSpec, long: Vec<Vec<LongObs>>) -> Subject {
        let _ = spec;
        Subject {
            id: "s1".into(),
            long,
            surv: SurvRecord {
                time: 100.0,
                cause: 0,
                w: DVector::zeros(0),
                raw_covs: vec![],
                row_idx: 0,
            },
        }
    }

    #[test]
    fn block_shapes_follow_direct_sum() {
        // G=2, n_1=2, n_2=1, p_g=2, q_g=1 → X_i is 3×4, Z_i is 3×2.
        let sp = spec(&[(2, 1), (2, 1)]);
        let long = vec![
            vec![
                obs(0.0, 1.0, &[1.0, 2.0], &[1.0]),
                obs(1.0, 2.0, &[1.0, 3.0], &[1.0]),
            ],
            vec![obs(0.0, 3.0, &[1.0, 4.0], &[2.0])],
        ];
        let ds = assemble_dataset(sp, vec![subject(&spec(&[(2, 1), (2, 1)]), long)], vec![], vec![]).unwrap();
        let d = &build_designs(&ds).unwrap()[0];
        let x = d.stacked_x();
        let z = d.stacked_z();
        assert_eq!(x.shape(), (3, 4));
        assert_eq!(z.shape(), (3, 2));
        // Off-diagonal blocks are zero.
        assert_eq!(x[(2, 0)], 0.0);
        assert_eq!(x[(0, 2)], 0.0);
        assert_eq!(x[(2, 3)], 4.0);
        assert_eq!(z[(2, 1)], 2.0);
    }

    #[test]
    fn single_biomarker_stacking_is_identity() {
        let sp = spec(&[(2, 1)]);
        let long = vec![vec![
            obs(0.0, 1.0, &[1.0, 2.0], &[1.0]),
            obs(1.0, 2.0, &[1.0, 3.0], &[1.5]),
        ]];
        let ds = assemble_dataset(sp.clone(), vec![subject(&sp, long)], vec![], vec![]).unwrap();
        let d = &build_designs(&ds).unwrap()[0];
        assert_eq!(d.stacked_x(), d.blocks[0].x);
        assert_eq!(d.stacked_z(), d.blocks[0].z);
    }

    #[test]
    fn random_three_biomarker_matches_dense_direct_sum() {
        let mut rng = ChaCha12Rng::seed_from_u64(7);
        let dims = [(3usize, 2usize), (2, 1), (4, 3)];
        let sp = spec(&dims);
        let long: Vec<Vec<LongObs>> = dims
            .iter()
            .map(|&(p, q)| {
                let n = rng.random_range(1..5);
                (0..n)
                    .map(|j| {
                        let x: Vec<f64> = (0..p).map(|_| rng.random_range(-2.0..2.0)).collect();
                        let z: Vec<f64> = (0..q).map(|_| rng.random_range(-2.0..2.0)).collect();
                        obs(j as f64, rng.random_range(-1.0..1.0), &x, &z)
                    })
                    .collect()
            })
            .collect();
        let ds = assemble_dataset(sp.clone(), vec![subject(&sp, long)], vec![], vec![]).unwrap();
        let d = &build_designs(&ds).unwrap()[0];

        // Brute-force dense direct sum.
        let n_total = d.n_total();
        let p: usize = dims.iter().map(|x| x.0).sum();
        let q: usize = dims.iter().map(|x| x.1).sum();
        let mut dense_x = DMatrix::zeros(n_total, p);
        let mut dense_z = DMatrix::zeros(n_total, q);
        let (mut r, mut cx, mut cz) = (0, 0, 0);
        for b in &d.blocks {
            for i in 0..b.n_obs() {
                for j in 0..b.x.ncols() {
                    dense_x[(r + i, cx + j)] = b.x[(i, j)];
                }
                for j in 0..b.z.ncols() {
                    dense_z[(r + i, cz + j)] = b.z[(i, j)];
                }
            }
            r += b.n_obs();
            cx += b.x.ncols();
            cz += b.z.ncols();
        }
        assert_eq!(d.stacked_x(), dense_x);
        assert_eq!(d.stacked_z(), dense_z);

        // Blockwise Xᵀv equals dense application on random inputs.
        for _ in 0..5 {
            let v = DVector::from_fn(n_total, |_, _| rng.random_range(-1.0..1.0));
            let blockwise = d.apply_xt(&v);
            let dense = dense_x.transpose() * &v;
            let rel = (&blockwise - &dense).amax() / dense.amax().max(1e-300);
            assert!(rel < 1e-12, "rel err {rel}");
            let blockwise_z = d.apply_zt(&v);
            let dense = dense_z.transpose() * &v;
            let rel = (&blockwise_z - &dense).amax() / dense.amax().max(1e-300);
            assert!(rel < 1e-12, "rel err {rel}");
        }
    }
}
