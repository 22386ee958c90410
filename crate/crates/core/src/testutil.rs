//! Shared helpers for unit tests (compiled only under `cfg(test)`).

use nalgebra::{DMatrix, DVector};
use rand::prelude::*;

use crate::data::{BiomarkerSpec, ModelSpec, Term};
use crate::design::{BlockDesign, SubjectDesign};

pub(crate) fn block_from_dense(
    y: DVector<f64>,
    x: DMatrix<f64>,
    z: DMatrix<f64>,
    times: Vec<f64>,
) -> BlockDesign {
    BlockDesign {
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
    }
}

/// Spec with one biomarker (fixed = [intercept, time], random = [intercept])
/// and a single scalar survival covariate.
pub(crate) fn tiny_spec() -> ModelSpec {
    ModelSpec {
        causes: 1,
        biomarkers: vec![BiomarkerSpec {
            fixed: vec![Term::Intercept, Term::Time],
            random: vec![Term::Intercept],
        }],
        survival_covariates: vec!["w0".into()],
    }
}

/// Random single-biomarker designs matching [`tiny_spec`].
pub(crate) fn random_designs(rng: &mut impl Rng, n: usize) -> Vec<SubjectDesign> {
    (0..n)
        .map(|i| {
            let rows = rng.random_range(1..5);
            let x = DMatrix::from_fn(rows, 2, |r, c| if c == 0 { 1.0 } else { r as f64 * 0.4 });
            let z = DMatrix::from_fn(rows, 1, |_, _| 1.0);
            let y = DVector::from_fn(rows, |_, _| rng.random_range(-2.0..2.0));
            let cause = if rng.random_bool(0.5) { 1 } else { 0 };
            SubjectDesign {
                id: format!("s{i}"),
                blocks: vec![block_from_dense(
                    y,
                    x,
                    z,
                    (0..rows).map(|r| r as f64 * 0.4).collect(),
                )],
                surv_time: rng.random_range(0.5..5.0),
                cause,
                w: DVector::from_fn(1, |_, _| rng.random_range(-1.0..1.0)),
            }
        })
        .collect()
}
