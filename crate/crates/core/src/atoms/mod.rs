//! Flat and convex atoms, the flat forest, leaves and big leaves.
//!
//! With `a = F_n(ω)` and increments `d_j`, the local excess of an atom is
//!
//! ```text
//! excess = (1/q) Σ_j ‖a + d_j‖ - ‖a‖ ≥ 0,
//! ```
//!
//! and the atom is `ε`-convex when `excess ≥ ε‖a‖`, `ε`-flat otherwise. Rank-one
//! increments along `a` give zero excess.

mod lemmas;
mod martingale;

pub use lemmas::{
    critical_exponent, estimate_p0, lemma1_check, p_inequality_margin, radial_bound_holds,
    sample_lemma2_configurations, taylor_remainder, Lemma1Outcome, Lemma2Sample, Lemma2Sampler,
    P0Estimate, TaylorRemainder, P_MARGIN,
};
pub use martingale::{
    doob_maximal_profile, lemma2_region, submartingale_check, DoobRow, SubmartingaleReport,
    SUBMARTINGALE_TOLERANCE,
};

use nalgebra::DVector;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{shape_mismatch, Error, Result};
use crate::tree::{AtomId, DifferenceMatrix, TruncatedMeasure, VertexAddress};

/// Excess below `ZERO_EXCESS · ‖a‖` is rounding noise and never makes an atom
/// convex, so rank-one atoms are `0`-flat.
pub const ZERO_EXCESS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum AtomLabel {
    Flat,
    Convex,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AtomClassification {
    pub atom: Option<AtomId>,
    pub excess: f64,
    /// `ε‖a‖`.
    pub threshold: f64,
    pub label: AtomLabel,
}

impl AtomClassification {
    pub fn is_flat(&self) -> bool {
        self.label == AtomLabel::Flat
    }
}

/// `(1/q) Σ_j ‖a + d_j‖ - ‖a‖`.
pub fn excess(a: &DVector<f64>, d: &DifferenceMatrix) -> f64 {
    let q = d.q() as f64;
    let mean: f64 = d
        .entries()
        .column_iter()
        .map(|c| (a + c).norm())
        .sum::<f64>()
        / q;
    mean - a.norm()
}

/// Classifies an atom with value `a` and difference matrix `D`.
///
/// An atom with `a = 0` is flat when `D = 0` and convex otherwise.
pub fn classify_atom(
    a: &DVector<f64>,
    d: &DifferenceMatrix,
    eps: f64,
) -> Result<AtomClassification> {
    if !(0.0..1.0).contains(&eps) {
        return Err(Error::InvalidParameter(format!(
            "eps = {eps} must lie in [0, 1)"
        )));
    }
    if a.len() != d.l() {
        return Err(shape_mismatch(
            format!("vector of length {}", d.l()),
            a.len(),
        ));
    }
    let norm = a.norm();
    let excess = excess(a, d);
    let threshold = eps * norm;
    let convex = excess >= threshold && excess > ZERO_EXCESS * norm;
    Ok(AtomClassification {
        atom: None,
        excess,
        threshold,
        label: if convex {
            AtomLabel::Convex
        } else {
            AtomLabel::Flat
        },
    })
}

/// Classifies an internal atom of a measure.
pub fn classify_at(
    measure: &TruncatedMeasure,
    atom: AtomId,
    eps: f64,
) -> Result<AtomClassification> {
    if atom.depth >= measure.shape().depth {
        return Err(Error::LeafAtom { depth: atom.depth });
    }
    let mut c = classify_atom(&measure.value_at(atom), &measure.difference_at(atom), eps)?;
    c.atom = Some(atom);
    Ok(c)
}

/// Flat flags for every internal atom, indexed `[depth][index]`.
fn flat_flags(measure: &TruncatedMeasure, eps: f64) -> Result<Vec<Vec<bool>>> {
    if !(eps > 0.0 && eps < 1.0) {
        return Err(Error::InvalidParameter(format!(
            "eps = {eps} must lie in (0, 1)"
        )));
    }
    let shape = measure.shape();
    (0..shape.depth)
        .map(|n| {
            (0..shape.atoms_at(n))
                .into_par_iter()
                .map(|i| classify_at(measure, AtomId::new(n, i), eps).map(|c| c.is_flat()))
                .collect()
        })
        .collect()
}

/// A maximal connected subtree of flat atoms.
#[derive(Debug, Clone, PartialEq)]
pub struct FlatComponent {
    pub root: AtomId,
    /// Members in level order, starting with `root`.
    pub atoms: Vec<AtomId>,
}

#[derive(Debug, Clone)]
pub struct FlatForest {
    pub epsilon: f64,
    pub components: Vec<FlatComponent>,
    flags: Vec<Vec<bool>>,
}

impl FlatForest {
    pub fn is_flat(&self, atom: AtomId) -> bool {
        self.flags
            .get(atom.depth)
            .and_then(|level| level.get(atom.index))
            .copied()
            .unwrap_or(false)
    }

    pub fn flat_count(&self) -> usize {
        self.flags.iter().flatten().filter(|&&f| f).count()
    }
}

/// Decomposes the flat atoms of depth `< N` into maximal connected subtrees.
pub fn flat_forest(measure: &TruncatedMeasure, eps: f64) -> Result<FlatForest> {
    let flags = flat_flags(measure, eps)?;
    let q = measure.shape().q;
    let mut components: Vec<FlatComponent> = Vec::new();
    // component id of each flat atom at the previous level
    let mut previous: Vec<Option<usize>> = Vec::new();
    for (n, level) in flags.iter().enumerate() {
        let mut current = vec![None; level.len()];
        for (i, &flat) in level.iter().enumerate() {
            if !flat {
                continue;
            }
            let atom = AtomId::new(n, i);
            let id = match n.checked_sub(1).and_then(|_| previous[i / q]) {
                Some(id) => id,
                None => {
                    components.push(FlatComponent {
                        root: atom,
                        atoms: Vec::new(),
                    });
                    components.len() - 1
                }
            };
            components[id].atoms.push(atom);
            current[i] = Some(id);
        }
        previous = current;
    }
    Ok(FlatForest {
        epsilon: eps,
        components,
        flags,
    })
}

/// Depth-`N` atoms whose ancestors at depths `n0..N` are all flat.
#[derive(Debug, Clone)]
pub struct LeafReport {
    pub epsilon: f64,
    pub start_depth: usize,
    pub leaf_atoms: Vec<AtomId>,
    /// `Σ ‖ν(ω)‖` over `leaf_atoms`.
    pub captured_mass: f64,
    /// `Σ ‖ν(ω)‖` over all leaves.
    pub total_mass: f64,
}

pub fn leaf_report(measure: &TruncatedMeasure, eps: f64, n0: usize) -> Result<LeafReport> {
    let shape = measure.shape();
    if n0 >= shape.depth {
        return Err(Error::InvalidParameter(format!(
            "start depth {n0} must be below the truncation depth {}",
            shape.depth
        )));
    }
    let flags = flat_flags(measure, eps)?;
    let q = shape.q;
    let mut good = flags[n0].clone();
    for level in &flags[n0 + 1..] {
        good = level
            .iter()
            .enumerate()
            .map(|(i, &f)| f && good[i / q])
            .collect();
    }
    let norm = |atom: AtomId| {
        measure
            .atom_measure(atom)
            .iter()
            .map(|x| x * x)
            .sum::<f64>()
            .sqrt()
    };
    let mut leaf_atoms = Vec::new();
    let mut captured_mass = 0.0;
    for i in 0..shape.leaf_count() {
        if good[i / q] {
            let atom = AtomId::new(shape.depth, i);
            captured_mass += norm(atom);
            leaf_atoms.push(atom);
        }
    }
    Ok(LeafReport {
        epsilon: eps,
        start_depth: n0,
        leaf_atoms,
        captured_mass,
        total_mass: measure.total_variation_at_depth(shape.depth)?,
    })
}

#[derive(Debug, Clone, Copy)]
pub struct BigLeafOptions {
    /// Number of witness depths standing in for "infinitely many".
    pub min_witnesses: usize,
    pub start_depth: usize,
}

impl Default for BigLeafOptions {
    fn default() -> Self {
        BigLeafOptions {
            min_witnesses: 3,
            start_depth: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BigLeafVerdict {
    pub big: bool,
    pub witness_depths: Vec<usize>,
}

/// Checks `(1/q) Σ_j ‖d_j‖ ≥ β ‖F_n‖` along the path to a leaf.
///
/// A depth counts as a witness only when the increments are nonzero, so a
/// path that has stopped moving never becomes big.
pub fn big_leaf_test(
    measure: &TruncatedMeasure,
    leaf: &VertexAddress,
    beta: f64,
    options: BigLeafOptions,
) -> Result<BigLeafVerdict> {
    let shape = measure.shape();
    if leaf.depth() != shape.depth {
        return Err(Error::InvalidParameter(format!(
            "leaf path has depth {}, expected {}",
            leaf.depth(),
            shape.depth
        )));
    }
    if !(beta > 0.0) {
        return Err(Error::InvalidParameter(format!(
            "beta = {beta} must be positive"
        )));
    }
    measure.martingale_value(leaf)?;
    let leaf = leaf.atom(shape.q);
    let witness_depths: Vec<usize> = (options.start_depth..shape.depth)
        .filter(|&n| {
            let atom = leaf.ancestor(shape.q, n);
            let d = measure.difference_at(atom);
            let mean = d.entries().column_iter().map(|c| c.norm()).sum::<f64>() / shape.q as f64;
            mean > 0.0 && mean >= beta * measure.value_at(atom).norm()
        })
        .collect();
    Ok(BigLeafVerdict {
        big: witness_depths.len() >= options.min_witnesses,
        witness_depths,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tree::TreeShape;
    use approx::assert_relative_eq;
    use nalgebra::DMatrix;

    fn dm(l: usize, q: usize, cols: &[f64]) -> DifferenceMatrix {
        DifferenceMatrix::new(DMatrix::from_column_slice(l, q, cols)).unwrap()
    }

    /// Measure with multipliers `(1 + w_i)` applied at every atom.
    fn cascade(q: usize, depth: usize, multipliers: &[f64], direction: &[f64]) -> TruncatedMeasure {
        let shape = TreeShape::new(q, depth, direction.len()).unwrap();
        let mut values = Vec::new();
        for i in 0..shape.leaf_count() {
            let addr = VertexAddress::from_index(q, depth, i);
            let factor: f64 = addr.digits().iter().map(|&d| multipliers[d]).product();
            values.extend(direction.iter().map(|x| x * factor));
        }
        TruncatedMeasure::from_terminal_values(shape, values).unwrap()
    }

    #[test]
    fn zero_increments_are_flat() {
        let a = DVector::from_vec(vec![1.0, 2.0]);
        for eps in [1e-6, 0.1, 0.9] {
            let c = classify_atom(&a, &DifferenceMatrix::zeros(2, 3), eps).unwrap();
            assert_eq!(c.excess, 0.0);
            assert!(c.is_flat());
        }
    }

    #[test]
    fn rank_one_concentration_is_zero_flat() {
        let a = DVector::from_vec(vec![1.0, 0.0]);
        let d = dm(2, 3, &[2.0, 0.0, -1.0, 0.0, -1.0, 0.0]);
        let c = classify_atom(&a, &d, 0.0).unwrap();
        assert_eq!(c.excess, 0.0);
        assert!(c.is_flat());
    }

    #[test]
    fn orthogonal_increments_have_positive_excess() {
        let a = DVector::from_vec(vec![1.0, 0.0]);
        let d = dm(2, 3, &[0.0, 1.0, 0.0, -1.0, 0.0, 0.0]);
        let expected = 2.0 / 3.0 * (2f64.sqrt() - 1.0);
        let c = classify_atom(&a, &d, 0.276).unwrap();
        assert_relative_eq!(c.excess, expected, epsilon = 1e-15);
        assert_eq!(c.label, AtomLabel::Convex);
        assert_eq!(classify_atom(&a, &d, 0.277).unwrap().label, AtomLabel::Flat);
    }

    #[test]
    fn zero_value_atoms() {
        let a = DVector::zeros(2);
        assert!(classify_atom(&a, &DifferenceMatrix::zeros(2, 3), 0.5)
            .unwrap()
            .is_flat());
        let d = dm(2, 3, &[1.0, 0.0, -1.0, 0.0, 0.0, 0.0]);
        assert_eq!(classify_atom(&a, &d, 0.5).unwrap().label, AtomLabel::Convex);
        assert!(classify_atom(&a, &d, 1.0).is_err());
    }

    #[test]
    fn uniform_measure_forest_is_whole_tree() {
        let m = TruncatedMeasure::uniform(TreeShape::new(3, 4, 2).unwrap(), &[0.3, 0.4]).unwrap();
        let forest = flat_forest(&m, 0.1).unwrap();
        assert_eq!(forest.components.len(), 1);
        assert_eq!(forest.components[0].root, AtomId::ROOT);
        assert_eq!(forest.components[0].atoms.len(), 1 + 3 + 9 + 27);

        let leaves = leaf_report(&m, 0.1, 0).unwrap();
        assert_eq!(leaves.leaf_atoms.len(), 81);
        assert_relative_eq!(leaves.captured_mass, 0.5, epsilon = 1e-14);
    }

    #[test]
    fn concentration_path_is_flat() {
        let m = cascade(3, 5, &[3.0, 0.0, 0.0], &[1.0, 0.0]);
        let forest = flat_forest(&m, 0.01).unwrap();
        // zero atoms are flat too, so everything is one component
        assert_eq!(forest.components.len(), 1);
        for n in 0..5 {
            assert!(forest.is_flat(AtomId::new(n, 0)));
        }
        let leaves = leaf_report(&m, 0.01, 0).unwrap();
        assert_relative_eq!(leaves.captured_mass, 1.0, epsilon = 1e-12);
        assert!(leaves.leaf_atoms.contains(&AtomId::new(5, 0)));
    }

    #[test]
    fn convex_root_splits_forest() {
        // root increments orthogonal to the value, sons constant afterwards
        let shape = TreeShape::new(3, 3, 2).unwrap();
        let sons = [[1.0, 1.0], [1.0, -1.0], [1.0, 0.0]];
        let mut values = Vec::new();
        for i in 0..shape.leaf_count() {
            values.extend_from_slice(&sons[i / 9]);
        }
        let m = TruncatedMeasure::from_terminal_values(shape, values).unwrap();
        let forest = flat_forest(&m, 0.05).unwrap();
        assert!(!forest.is_flat(AtomId::ROOT));
        let roots: Vec<AtomId> = forest.components.iter().map(|c| c.root).collect();
        assert_eq!(
            roots,
            vec![AtomId::new(1, 0), AtomId::new(1, 1), AtomId::new(1, 2)]
        );
        assert!(forest.components.iter().all(|c| c.atoms.len() == 4));

        assert!(leaf_report(&m, 0.05, 0).unwrap().leaf_atoms.is_empty());
        assert_eq!(leaf_report(&m, 0.05, 1).unwrap().leaf_atoms.len(), 27);
        assert!(leaf_report(&m, 0.05, 3).is_err());
    }

    #[test]
    fn big_leaves_of_cascades() {
        let m = cascade(3, 6, &[3.0, 0.0, 0.0], &[1.0]);
        let path = VertexAddress::from_index(3, 6, 0);
        let verdict =
            big_leaf_test(&m, &path, 4.0 / 3.0 - 1e-12, BigLeafOptions::default()).unwrap();
        assert!(verdict.big);
        assert_eq!(verdict.witness_depths, vec![0, 1, 2, 3, 4, 5]);
        assert!(
            !big_leaf_test(&m, &path, 1.4, BigLeafOptions::default())
                .unwrap()
                .big
        );

        // leaves that leave the path at the root stop moving
        let off = VertexAddress::from_index(3, 6, 243);
        assert!(
            !big_leaf_test(&m, &off, 0.1, BigLeafOptions::default())
                .unwrap()
                .big
        );

        let u = TruncatedMeasure::uniform(TreeShape::new(3, 4, 1).unwrap(), &[1.0]).unwrap();
        let leaf = VertexAddress::from_index(3, 4, 17);
        assert!(
            !big_leaf_test(&u, &leaf, 1e-9, BigLeafOptions::default())
                .unwrap()
                .big
        );
        assert!(big_leaf_test(&u, &VertexAddress::root(), 1.0, BigLeafOptions::default()).is_err());
    }
}
