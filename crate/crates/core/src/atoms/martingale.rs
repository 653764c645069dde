//! The `p`-submartingale inequality over a region of atoms and the Doob
//! maximal-function profile.

use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::space::angle_to_matrix;
use crate::tree::{AtomId, TruncatedMeasure};

/// Relative deficit `1 - (1/q) Σ‖F_{n+1}‖^p / ‖F_n‖^p` above which an atom
/// counts as a violation.
pub const SUBMARTINGALE_TOLERANCE: f64 = 1e-12;

#[derive(Debug, Clone, Serialize)]
pub struct SubmartingaleReport {
    pub p: f64,
    pub checked: usize,
    /// Violating atoms with their relative deficits, in region order.
    pub violations: Vec<(AtomId, f64)>,
    /// Largest relative deficit over the region; nonpositive when the
    /// inequality holds everywhere.
    pub max_deficit: f64,
}

impl SubmartingaleReport {
    pub fn passed(&self) -> bool {
        self.violations.is_empty()
    }
}

fn relative_deficit(measure: &TruncatedMeasure, atom: AtomId, p: f64) -> f64 {
    let q = measure.shape().q;
    let parent = measure.value_at(atom).norm();
    let sons: f64 = (0..q)
        .map(|j| measure.value_at(atom.child(q, j)).norm().powf(p))
        .sum::<f64>()
        / q as f64;
    if parent == 0.0 {
        return if sons == 0.0 { 0.0 } else { -f64::INFINITY };
    }
    1.0 - sons / parent.powf(p)
}

/// Checks `‖F_n(ω)‖^p ≤ (1/q) Σ_j ‖F_{n+1}(ω_j)‖^p` on every atom of `region`.
pub fn submartingale_check(
    measure: &TruncatedMeasure,
    p: f64,
    region: &[AtomId],
) -> Result<SubmartingaleReport> {
    if !(p > 0.0 && p <= 1.0) {
        return Err(Error::InvalidParameter(format!(
            "p = {p} must lie in (0, 1]"
        )));
    }
    let shape = measure.shape();
    if let Some(bad) = region
        .iter()
        .find(|a| a.depth >= shape.depth || a.index >= shape.atoms_at(a.depth))
    {
        return Err(Error::InvalidParameter(format!(
            "atom ({}, {}) is not an internal atom",
            bad.depth, bad.index
        )));
    }
    let deficits: Vec<f64> = region
        .par_iter()
        .map(|&atom| relative_deficit(measure, atom, p))
        .collect();
    let violations = region
        .iter()
        .zip(&deficits)
        .filter(|(_, &d)| d > SUBMARTINGALE_TOLERANCE)
        .map(|(&a, &d)| (a, d))
        .collect();
    Ok(SubmartingaleReport {
        p,
        checked: region.len(),
        violations,
        max_deficit: deficits.iter().copied().fold(f64::NEG_INFINITY, f64::max),
    })
}

/// Internal atoms meeting the hypotheses of the `p`-inequality: nonzero
/// increments, rank-one angle `≥ η` and `Σ_j ‖d_j‖ ≤ δ ‖F_n‖`.
pub fn lemma2_region(measure: &TruncatedMeasure, eta: f64, delta: f64) -> Vec<AtomId> {
    let atoms: Vec<AtomId> = measure.internal_atoms().collect();
    let keep: Vec<bool> = atoms
        .par_iter()
        .map(|&atom| {
            let f = measure.value_at(atom);
            let d = measure.difference_at(atom);
            let size: f64 = d.columns().map(|c| c.norm()).sum();
            size > 0.0
                && size <= delta * f.norm() * (1.0 + 1e-12)
                && angle_to_matrix(&f, &d).is_ok_and(|angle| angle >= eta)
        })
        .collect();
    atoms
        .into_iter()
        .zip(keep)
        .filter(|(_, k)| *k)
        .map(|(a, _)| a)
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DoobRow {
    pub depth: usize,
    /// `∫ max_{k≤n} ‖F_k‖ dμ`.
    pub l1: f64,
    /// `max_ω max_{k≤n} ‖F_k(ω)‖`.
    pub sup: f64,
}

/// The `L¹(μ)` norm of the running maximal function `max_{k≤n} ‖F_k‖` for
/// every depth `0..=N`.
pub fn doob_maximal_profile(measure: &TruncatedMeasure) -> Vec<DoobRow> {
    let shape = measure.shape();
    let mut running = vec![measure.value_at(AtomId::ROOT).norm()];
    let mut rows = Vec::with_capacity(shape.depth + 1);
    for n in 0..=shape.depth {
        if n > 0 {
            running = (0..shape.atoms_at(n))
                .into_par_iter()
                .map(|i| running[i / shape.q].max(measure.value_at(AtomId::new(n, i)).norm()))
                .collect();
        }
        rows.push(DoobRow {
            depth: n,
            l1: running.iter().sum::<f64>() * shape.atom_mass(n),
            sup: running.iter().copied().fold(0.0, f64::max),
        });
    }
    rows
}
