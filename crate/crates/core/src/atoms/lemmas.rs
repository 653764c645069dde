//! Numerical checks of the two local lemmas: the flatness bound on
//! orthogonal increments and the `p`-convexity inequality
//!
//! ```text
//! ‖a‖^p ≤ (1/q) Σ_j ‖a + d_j‖^p.
//! ```

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rayon::prelude::*;
use serde::Serialize;
use std::f64::consts::FRAC_PI_2;

use super::classify_atom;
use crate::error::{shape_mismatch, Error, Result};
use crate::rng::{gaussian_matrix, gaussian_vector, stream_rng};
use crate::space::{angle_to_matrix, outer, zero_sum_basis};
use crate::tree::DifferenceMatrix;

/// Default gap above the estimated critical exponent at which the
/// `p`-inequality is tested.
pub const P_MARGIN: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Lemma1Outcome {
    /// `2q√ε ‖a‖`.
    pub bound: f64,
    /// `max_j ‖π_{a⊥} d_j‖`.
    pub max_orth: f64,
    pub holds: bool,
    pub excess: f64,
}

/// Checks `‖π_{a⊥} d_j‖ ≤ 2q√ε ‖a‖` for an `ε`-flat atom.
pub fn lemma1_check(a: &DVector<f64>, d: &DifferenceMatrix, eps: f64) -> Result<Lemma1Outcome> {
    let c = classify_atom(a, d, eps)?;
    let norm = a.norm();
    if norm == 0.0 {
        return Err(Error::InvalidParameter(
            "the atom value must be nonzero".into(),
        ));
    }
    if !c.is_flat() {
        return Err(Error::NotFlat {
            eps,
            excess: c.excess,
        });
    }
    let a_hat = a / norm;
    let max_orth = d
        .entries()
        .column_iter()
        .map(|col| (col - &a_hat * a_hat.dot(&col)).norm())
        .fold(0.0, f64::max);
    let bound = 2.0 * d.q() as f64 * eps.sqrt() * norm;
    Ok(Lemma1Outcome {
        bound,
        max_orth,
        holds: max_orth <= bound,
        excess: c.excess,
    })
}

/// `ln(‖a + d_j‖ / ‖a‖)` for every column, accurate for small increments.
fn log_ratios(a: &DVector<f64>, d: &DifferenceMatrix) -> Result<Vec<f64>> {
    if a.len() != d.l() {
        return Err(shape_mismatch(
            format!("vector of length {}", d.l()),
            a.len(),
        ));
    }
    let n2 = a.norm_squared();
    if n2 == 0.0 {
        return Err(Error::InvalidParameter(
            "the atom value must be nonzero".into(),
        ));
    }
    Ok(d.entries()
        .column_iter()
        .map(|col| {
            let t = (2.0 * a.dot(&col) + col.norm_squared()) / n2;
            // t ≥ -1 up to rounding; -1 means the son vanishes
            0.5 * t.max(-1.0).ln_1p()
        })
        .collect())
}

/// `(1/q) Σ_j ‖a + d_j‖^p / ‖a‖^p - 1`.
fn relative_margin(logs: &[f64], p: f64) -> f64 {
    logs.iter().map(|&x| (p * x).exp_m1()).sum::<f64>() / logs.len() as f64
}

/// `(1/q) Σ_j ‖a + d_j‖^p - ‖a‖^p`.
pub fn p_inequality_margin(a: &DVector<f64>, d: &DifferenceMatrix, p: f64) -> Result<f64> {
    let logs = log_ratios(a, d)?;
    Ok(relative_margin(&logs, p) * a.norm().powf(p))
}

/// Smallest `p ∈ [0, 1]` from which the `p`-inequality holds up to `1`.
///
/// `p ↦ ln((1/q) Σ ‖a + d_j‖^p / ‖a‖^p)` is convex and vanishes at 0, so the
/// set where the inequality holds is `[p_c, ∞)`; `p_c = 0` when the mean log
/// ratio is nonnegative. The triangle inequality gives `p_c ≤ 1`.
pub fn critical_exponent(a: &DVector<f64>, d: &DifferenceMatrix) -> Result<f64> {
    let logs = log_ratios(a, d)?;
    let slope = logs.iter().sum::<f64>() / logs.len() as f64;
    if slope >= 0.0 {
        return Ok(0.0);
    }
    let (mut lo, mut hi) = (0.0, 1.0);
    for _ in 0..64 {
        let mid = 0.5 * (lo + hi);
        if relative_margin(&logs, mid) >= 0.0 {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    Ok(hi)
}

/// `Σ_j ⟨â, d_j⟩² ≤ cos²η Σ_j ‖d_j‖²`, with slack `tol · Σ_j ‖d_j‖²`.
pub fn radial_bound_holds(
    a: &DVector<f64>,
    d: &DifferenceMatrix,
    eta: f64,
    tol: f64,
) -> Result<bool> {
    if a.len() != d.l() {
        return Err(shape_mismatch(
            format!("vector of length {}", d.l()),
            a.len(),
        ));
    }
    let a_hat = a.normalize();
    let along: f64 = d
        .entries()
        .column_iter()
        .map(|c| a_hat.dot(&c).powi(2))
        .sum();
    let total = d.entries().norm_squared();
    Ok(along <= eta.cos().powi(2) * total + tol * total)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TaylorRemainder {
    /// `Σ_j ‖â + d_j/‖a‖‖^p`.
    pub exact: f64,
    /// `q + (p/2) Σ‖d_j‖² + (p(p-2)/2) Σ⟨â, d_j⟩²` in the same normalisation.
    pub expansion: f64,
    pub remainder: f64,
    /// `Σ_j ‖d_j‖³ / ‖a‖³`.
    pub cubic: f64,
    /// `|remainder| / cubic`, the empirical constant of the third-order term.
    pub constant: f64,
}

/// Compares `Σ_j ‖a + d_j‖^p` with its second-order expansion around `a`.
pub fn taylor_remainder(a: &DVector<f64>, d: &DifferenceMatrix, p: f64) -> Result<TaylorRemainder> {
    let logs = log_ratios(a, d)?;
    let norm = a.norm();
    let a_hat = a / norm;
    let (mut exact_minus_q, mut second, mut cubic, mut linear) = (0.0, 0.0, 0.0, 0.0);
    for (col, &lr) in d.entries().column_iter().zip(&logs) {
        let col = col / norm;
        let t = a_hat.dot(&col);
        let s = col.norm_squared();
        exact_minus_q += (p * lr).exp_m1();
        // the linear term sums to zero; it is kept per column for accuracy
        linear += p * t;
        second += 0.5 * p * s + 0.5 * p * (p - 2.0) * t * t;
        cubic += s * s.sqrt();
    }
    let q = logs.len() as f64;
    let remainder = exact_minus_q - linear - second;
    Ok(TaylorRemainder {
        exact: q + exact_minus_q,
        expansion: q + second,
        remainder,
        cubic,
        constant: if cubic > 0.0 {
            remainder.abs() / cubic
        } else {
            0.0
        },
    })
}

/// One sampled atom for the `p`-inequality: `‖a‖ = 1`, `Σ‖d_j‖ ≤ δ` and
/// rank-one angle at least `η`.
#[derive(Debug, Clone)]
pub struct Lemma2Sample {
    pub a: DVector<f64>,
    pub d: DifferenceMatrix,
    pub angle: f64,
}

/// Draws configurations satisfying the hypotheses of the `p`-inequality.
///
/// `D = cos θ · a ⊗ c + sin θ · E` with `c` a unit zero-sum vector and `E` a
/// unit HS matrix with columns orthogonal to `a` and zero row sums, so the
/// angle of `D` to `a ⊗ ℝ^q` is exactly `θ`. Half of the draws sit on the
/// boundary `θ = η` and half of them use the full budget `Σ‖d_j‖ = δ`; the
/// worst cases of the inequality live there.
#[derive(Debug, Clone, Copy)]
pub struct Lemma2Sampler {
    pub q: usize,
    pub l: usize,
    pub eta: f64,
    pub delta: f64,
    pub max_retries: usize,
}

impl Lemma2Sampler {
    pub fn new(q: usize, l: usize, eta: f64, delta: f64) -> Result<Self> {
        if q < 2 || l == 0 {
            return Err(Error::InvalidParameter(format!(
                "need q ≥ 2 and l ≥ 1, got q = {q}, l = {l}"
            )));
        }
        if !(eta > 0.0 && eta <= FRAC_PI_2) {
            return Err(Error::InvalidParameter(format!(
                "eta = {eta} must lie in (0, π/2]"
            )));
        }
        if !(delta > 0.0 && delta.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "delta = {delta} must be positive"
            )));
        }
        Ok(Lemma2Sampler {
            q,
            l,
            eta,
            delta,
            max_retries: 64,
        })
    }

    pub fn sample<R: Rng>(&self, rng: &mut R) -> Result<Lemma2Sample> {
        let (q, l) = (self.q, self.l);
        let basis = zero_sum_basis(q);
        let centre = DMatrix::identity(q, q) - DMatrix::from_element(q, q, 1.0 / q as f64);
        // θ = η itself may round to an angle just below η
        let edge = (self.eta + 1e-12).min(FRAC_PI_2);
        for _ in 0..self.max_retries {
            let a = gaussian_vector(rng, l);
            let an = a.norm();
            if an < 1e-8 {
                continue;
            }
            let a = a / an;
            let c = &basis * gaussian_vector(rng, q - 1);
            let cn = c.norm();
            let g = gaussian_matrix(rng, l, q);
            let e = (DMatrix::identity(l, l) - &a * a.transpose()) * g * &centre;
            let en = e.norm();
            let theta = if rng.gen_bool(0.5) {
                edge
            } else {
                rng.gen_range(edge..=FRAC_PI_2)
            };
            if cn < 1e-8 || (en < 1e-8 && theta > 0.0) {
                continue;
            }
            let mut m = outer(&a, &(c / cn)) * theta.cos();
            if en >= 1e-8 {
                m += e * (theta.sin() / en);
            }
            let size: f64 = m.column_iter().map(|col| col.norm()).sum();
            let u = if rng.gen_bool(0.5) {
                1.0
            } else {
                1.0 - rng.gen::<f64>()
            };
            m *= self.delta * u / size;
            let d = DifferenceMatrix::from_raw(m);
            let angle = angle_to_matrix(&a, &d)?;
            if angle >= self.eta {
                return Ok(Lemma2Sample { a, d, angle });
            }
        }
        Err(Error::SamplingFailed {
            retries: self.max_retries,
            reason: format!(
                "no configuration with angle ≥ {} found for q = {}, l = {}",
                self.eta, self.q, self.l
            ),
        })
    }
}

/// `trials` configurations, trial `i` drawn from its own stream of `seed`, so
/// the result does not depend on the thread count.
pub fn sample_lemma2_configurations(
    sampler: &Lemma2Sampler,
    trials: usize,
    seed: u64,
) -> Result<Vec<Lemma2Sample>> {
    (0..trials)
        .into_par_iter()
        .map(|i| sampler.sample(&mut stream_rng(seed, i as u64)))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct P0Estimate {
    pub p0: f64,
    /// Trial attaining the largest critical exponent.
    pub worst_trial: usize,
    pub trials: usize,
    pub seed: u64,
}

/// Largest critical exponent over `trials` sampled configurations.
pub fn estimate_p0(sampler: &Lemma2Sampler, trials: usize, seed: u64) -> Result<P0Estimate> {
    if trials == 0 {
        return Err(Error::InvalidParameter(
            "at least one trial is required".into(),
        ));
    }
    let criticals: Vec<f64> = sample_lemma2_configurations(sampler, trials, seed)?
        .par_iter()
        .map(|c| critical_exponent(&c.a, &c.d))
        .collect::<Result<_>>()?;
    let (worst_trial, &p0) = criticals
        .iter()
        .enumerate()
        .max_by(|x, y| x.1.total_cmp(y.1))
        .expect("trials > 0");
    Ok(P0Estimate {
        p0,
        worst_trial,
        trials,
        seed,
    })
}
