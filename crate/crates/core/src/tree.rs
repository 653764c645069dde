//! The truncated q-regular tree, vector measures on its boundary and the
//! martingales they generate.
//!
//! A measure is stored by its values on the depth-`N` atoms. Every coarser
//! level is the sum of its sons, so `ν(ω) = Σ_i ν(ω_i)` holds by
//! construction, and the generated martingale is `F_n(ω) = q^n ν(ω)`.
//!
//! Atoms are enumerated lexicographically: the sons of the atom with index
//! `i` at depth `n` are the atoms `i * q + j`, `j = 0..q`, at depth `n + 1`.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{shape_mismatch, Error, Result};

/// Branching factor, truncation depth and value dimension of a measure.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TreeShape {
    pub q: usize,
    pub depth: usize,
    pub l: usize,
}

impl TreeShape {
    pub fn new(q: usize, depth: usize, l: usize) -> Result<Self> {
        if q < 3 {
            return Err(Error::InvalidShape(format!(
                "branching factor q = {q} must be at least 3"
            )));
        }
        if depth < 1 {
            return Err(Error::InvalidShape(
                "truncation depth must be at least 1".into(),
            ));
        }
        if l < 1 {
            return Err(Error::InvalidShape(
                "value dimension l must be at least 1".into(),
            ));
        }
        let shape = TreeShape { q, depth, l };
        q.checked_pow(depth as u32)
            .and_then(|n| n.checked_mul(l))
            .ok_or_else(|| Error::InvalidShape(format!("q^depth * l overflows for {shape:?}")))?;
        Ok(shape)
    }

    /// Number of atoms of generation `n`, i.e. `q^n`.
    pub fn atoms_at(&self, n: usize) -> usize {
        self.q.pow(n as u32)
    }

    pub fn leaf_count(&self) -> usize {
        self.atoms_at(self.depth)
    }

    /// Uniform measure `μ(ω) = q^(-n)` of an atom of generation `n`.
    pub fn atom_mass(&self, n: usize) -> f64 {
        (self.q as f64).powi(-(n as i32))
    }
}

/// A vertex of the tree, written as the digits of the path from the root.
///
/// The root is the empty sequence.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct VertexAddress {
    digits: Vec<usize>,
}

impl VertexAddress {
    pub fn root() -> Self {
        VertexAddress { digits: Vec::new() }
    }

    pub fn from_digits(digits: Vec<usize>, q: usize) -> Result<Self> {
        if let Some(&digit) = digits.iter().find(|&&d| d >= q) {
            return Err(Error::AddressOutOfRange { digit, q });
        }
        Ok(VertexAddress { digits })
    }

    /// The address of the atom with lexicographic `index` among the `q^depth`
    /// atoms of generation `depth`.
    pub fn from_index(q: usize, depth: usize, mut index: usize) -> Self {
        let mut digits = vec![0; depth];
        for slot in digits.iter_mut().rev() {
            *slot = index % q;
            index /= q;
        }
        VertexAddress { digits }
    }

    pub fn digits(&self) -> &[usize] {
        &self.digits
    }

    pub fn depth(&self) -> usize {
        self.digits.len()
    }

    pub fn is_root(&self) -> bool {
        self.digits.is_empty()
    }

    pub fn parent(&self) -> Option<Self> {
        if self.is_root() {
            return None;
        }
        let mut digits = self.digits.clone();
        digits.pop();
        Some(VertexAddress { digits })
    }

    pub fn child(&self, j: usize) -> Self {
        let mut digits = self.digits.clone();
        digits.push(j);
        VertexAddress { digits }
    }

    pub fn children(&self, q: usize) -> impl Iterator<Item = VertexAddress> + '_ {
        (0..q).map(move |j| self.child(j))
    }

    /// Lexicographic index within the atom's generation.
    pub fn index(&self, q: usize) -> usize {
        self.digits.iter().fold(0, |acc, &d| acc * q + d)
    }

    pub fn atom(&self, q: usize) -> AtomId {
        AtomId {
            depth: self.depth(),
            index: self.index(q),
        }
    }

    /// Uniform mass `q^(-depth)` of the atom.
    pub fn mass(&self, q: usize) -> f64 {
        (q as f64).powi(-(self.depth() as i32))
    }
}

impl std::fmt::Display for VertexAddress {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        if self.digits.is_empty() {
            return f.write_str("root");
        }
        let parts: Vec<String> = self.digits.iter().map(|d| d.to_string()).collect();
        f.write_str(&parts.join("."))
    }
}

/// Compact handle for an atom: generation plus lexicographic index.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct AtomId {
    pub depth: usize,
    pub index: usize,
}

impl AtomId {
    pub const ROOT: AtomId = AtomId { depth: 0, index: 0 };

    pub fn new(depth: usize, index: usize) -> Self {
        AtomId { depth, index }
    }

    pub fn child(self, q: usize, j: usize) -> Self {
        AtomId {
            depth: self.depth + 1,
            index: self.index * q + j,
        }
    }

    pub fn parent(self, q: usize) -> Option<Self> {
        (self.depth > 0).then(|| AtomId {
            depth: self.depth - 1,
            index: self.index / q,
        })
    }

    /// Ancestor at generation `depth` (itself when the depths agree).
    pub fn ancestor(self, q: usize, depth: usize) -> Self {
        debug_assert!(depth <= self.depth);
        AtomId {
            depth,
            index: self.index / q.pow((self.depth - depth) as u32),
        }
    }

    pub fn address(self, q: usize) -> VertexAddress {
        VertexAddress::from_index(q, self.depth, self.index)
    }
}

/// The `l × q` matrix of martingale increments at an atom; column `j` is
/// `d_j = F_{n+1}(ω_j) - F_n(ω)`.
#[derive(Debug, Clone, PartialEq)]
pub struct DifferenceMatrix(DMatrix<f64>);

impl DifferenceMatrix {
    /// Wraps a matrix after checking that its columns sum to zero.
    pub fn new(entries: DMatrix<f64>) -> Result<Self> {
        let sum = column_sum(&entries);
        let scale = entries.norm().max(1.0);
        if sum.norm() > 1e-10 * scale {
            return Err(Error::ConstraintViolation {
                max_column_sum: sum.amax(),
            });
        }
        Ok(DifferenceMatrix(entries))
    }

    /// Builds the matrix from its columns `d_1 … d_q`.
    pub fn from_columns(columns: &[DVector<f64>]) -> Result<Self> {
        if columns.is_empty() {
            return Err(Error::InvalidParameter(
                "a difference matrix needs at least one column".into(),
            ));
        }
        Self::new(DMatrix::from_columns(columns))
    }

    pub(crate) fn from_raw(entries: DMatrix<f64>) -> Self {
        DifferenceMatrix(entries)
    }

    pub fn zeros(l: usize, q: usize) -> Self {
        DifferenceMatrix(DMatrix::zeros(l, q))
    }

    pub fn l(&self) -> usize {
        self.0.nrows()
    }

    pub fn q(&self) -> usize {
        self.0.ncols()
    }

    pub fn entries(&self) -> &DMatrix<f64> {
        &self.0
    }

    pub fn into_inner(self) -> DMatrix<f64> {
        self.0
    }

    pub fn column(&self, j: usize) -> DVector<f64> {
        self.0.column(j).into_owned()
    }

    pub fn columns(&self) -> impl Iterator<Item = DVector<f64>> + '_ {
        self.0.column_iter().map(|c| c.into_owned())
    }

    /// `Σ_j d_j`, which vanishes up to rounding.
    pub fn column_sum(&self) -> DVector<f64> {
        column_sum(&self.0)
    }

    pub fn is_zero(&self) -> bool {
        self.0.iter().all(|&x| x == 0.0)
    }
}

fn column_sum(m: &DMatrix<f64>) -> DVector<f64> {
    let mut sum = DVector::zeros(m.nrows());
    for c in m.column_iter() {
        sum += c;
    }
    sum
}

/// An `ℝ^l`-valued measure on the boundary of the tree, known through its
/// values on the atoms of the truncation depth.
#[derive(Debug, Clone, PartialEq)]
pub struct TruncatedMeasure {
    shape: TreeShape,
    /// `levels[n]` holds `ν(ω)` for the `q^n` atoms of generation `n`,
    /// row-major with `l` values per atom.
    levels: Vec<Vec<f64>>,
}

#[derive(Serialize, Deserialize)]
struct MeasureJson {
    q: usize,
    l: usize,
    depth: usize,
    leaf_values: Vec<Vec<f64>>,
}

impl TruncatedMeasure {
    /// Builds a measure from the flat, lexicographically ordered leaf values
    /// `ν(ω)` (`l` numbers per leaf).
    pub fn new(shape: TreeShape, leaf_values: Vec<f64>) -> Result<Self> {
        let expected = shape.leaf_count() * shape.l;
        if leaf_values.len() != expected {
            return Err(shape_mismatch(
                format!("{expected} leaf values"),
                format!("{}", leaf_values.len()),
            ));
        }
        let (q, l) = (shape.q, shape.l);
        let mut levels = vec![Vec::new(); shape.depth + 1];
        levels[shape.depth] = leaf_values;
        for n in (0..shape.depth).rev() {
            let finer = &levels[n + 1];
            let mut coarse = vec![0.0; shape.atoms_at(n) * l];
            for (i, slot) in coarse.chunks_exact_mut(l).enumerate() {
                for j in 0..q {
                    let son = &finer[(i * q + j) * l..(i * q + j + 1) * l];
                    for (s, v) in slot.iter_mut().zip(son) {
                        *s += v;
                    }
                }
            }
            levels[n] = coarse;
        }
        Ok(TruncatedMeasure { shape, levels })
    }

    /// Builds a measure from one row of `l` values per leaf.
    pub fn from_leaf_rows(shape: TreeShape, rows: &[Vec<f64>]) -> Result<Self> {
        if rows.len() != shape.leaf_count() {
            return Err(shape_mismatch(
                format!("{} leaves", shape.leaf_count()),
                format!("{}", rows.len()),
            ));
        }
        let mut flat = Vec::with_capacity(rows.len() * shape.l);
        for row in rows {
            if row.len() != shape.l {
                return Err(shape_mismatch(
                    format!("leaf of length {}", shape.l),
                    row.len(),
                ));
            }
            flat.extend_from_slice(row);
        }
        Self::new(shape, flat)
    }

    /// Builds a measure from the terminal martingale values `F_N` at the
    /// leaves, i.e. `ν(ω) = q^(-N) F_N(ω)`.
    pub fn from_terminal_values(shape: TreeShape, mut values: Vec<f64>) -> Result<Self> {
        let mass = shape.atom_mass(shape.depth);
        values.iter_mut().for_each(|v| *v *= mass);
        Self::new(shape, values)
    }

    /// The uniform measure with density `direction` (constant martingale).
    pub fn uniform(shape: TreeShape, direction: &[f64]) -> Result<Self> {
        if direction.len() != shape.l {
            return Err(shape_mismatch(
                format!("vector of length {}", shape.l),
                direction.len(),
            ));
        }
        let values = direction.repeat(shape.leaf_count());
        Self::from_terminal_values(shape, values)
    }

    pub fn shape(&self) -> TreeShape {
        self.shape
    }

    pub fn leaf_values(&self) -> &[f64] {
        &self.levels[self.shape.depth]
    }

    /// `ν(ω)` for an atom.
    pub fn atom_measure(&self, atom: AtomId) -> &[f64] {
        let l = self.shape.l;
        &self.levels[atom.depth][atom.index * l..(atom.index + 1) * l]
    }

    /// `F_n(ω) = q^n ν(ω)`, without range checks.
    pub fn value_at(&self, atom: AtomId) -> DVector<f64> {
        let scale = (self.shape.q as f64).powi(atom.depth as i32);
        DVector::from_iterator(
            self.shape.l,
            self.atom_measure(atom).iter().map(|v| v * scale),
        )
    }

    /// Difference matrix at an internal atom, without range checks.
    pub fn difference_at(&self, atom: AtomId) -> DifferenceMatrix {
        let (q, l) = (self.shape.q, self.shape.l);
        let parent = self.value_at(atom);
        let mut d = DMatrix::zeros(l, q);
        for j in 0..q {
            let son = self.value_at(atom.child(q, j));
            d.set_column(j, &(son - &parent));
        }
        DifferenceMatrix::from_raw(d)
    }

    fn checked_atom(&self, atom: &VertexAddress) -> Result<AtomId> {
        if let Some(&digit) = atom.digits().iter().find(|&&d| d >= self.shape.q) {
            return Err(Error::AddressOutOfRange {
                digit,
                q: self.shape.q,
            });
        }
        if atom.depth() > self.shape.depth {
            return Err(Error::DepthExceedsTruncation {
                depth: atom.depth(),
                max: self.shape.depth,
            });
        }
        Ok(atom.atom(self.shape.q))
    }

    /// The martingale value `F_n(ω) = q^n ν(ω)` at an atom of generation `n`.
    pub fn martingale_value(&self, atom: &VertexAddress) -> Result<DVector<f64>> {
        let id = self.checked_atom(atom)?;
        Ok(self.value_at(id))
    }

    /// The matrix `D_ω` of increments from an atom to its sons.
    pub fn difference_matrix(&self, atom: &VertexAddress) -> Result<DifferenceMatrix> {
        let id = self.checked_atom(atom)?;
        if id.depth == self.shape.depth {
            return Err(Error::LeafAtom { depth: id.depth });
        }
        Ok(self.difference_at(id))
    }

    /// Finite-depth surrogate for the polar density `dν/d|ν|`: the unit
    /// vector `F_n(ω)/‖F_n(ω)‖`.
    pub fn polar_estimate(&self, atom: &VertexAddress) -> Result<DVector<f64>> {
        let id = self.checked_atom(atom)?;
        self.polar_at(id)
    }

    pub fn polar_at(&self, atom: AtomId) -> Result<DVector<f64>> {
        let value = self.value_at(atom);
        let norm = value.norm();
        if norm == 0.0 || !norm.is_finite() {
            return Err(Error::PolarUndefined);
        }
        Ok(value / norm)
    }

    /// `Σ_ω ‖ν(ω)‖` over the atoms of generation `n`.
    pub fn total_variation_at_depth(&self, n: usize) -> Result<f64> {
        if n > self.shape.depth {
            return Err(Error::DepthExceedsTruncation {
                depth: n,
                max: self.shape.depth,
            });
        }
        Ok(self.levels[n]
            .chunks_exact(self.shape.l)
            .map(|v| v.iter().map(|x| x * x).sum::<f64>().sqrt())
            .sum())
    }

    /// `q^n · max_ω ‖ν(ω)‖ / Σ_ω ‖ν(ω)‖` at generation `n`: equal to 1 for
    /// the uniform measure and to `q^n` for a measure carried by one atom.
    pub fn concentration_ratio(&self, n: usize) -> Result<f64> {
        let (_, mass) = self.heaviest_atom(n)?;
        let tv = self.total_variation_at_depth(n)?;
        if tv == 0.0 {
            return Ok(0.0);
        }
        Ok(mass / tv * self.shape.atoms_at(n) as f64)
    }

    /// The atom of generation `n` with the largest `‖ν(ω)‖` (first one on ties).
    pub fn heaviest_atom(&self, n: usize) -> Result<(AtomId, f64)> {
        if n > self.shape.depth {
            return Err(Error::DepthExceedsTruncation {
                depth: n,
                max: self.shape.depth,
            });
        }
        let mut best = (AtomId::new(n, 0), -1.0);
        for (i, v) in self.levels[n].chunks_exact(self.shape.l).enumerate() {
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > best.1 {
                best = (AtomId::new(n, i), norm);
            }
        }
        Ok(best)
    }

    /// Leafwise linear combination `Σ_k c_k ν_k`.
    pub fn linear_combination(measures: &[&TruncatedMeasure], weights: &[f64]) -> Result<Self> {
        let first = measures
            .first()
            .ok_or_else(|| Error::InvalidParameter("mixture of zero measures".into()))?;
        if measures.len() != weights.len() {
            return Err(shape_mismatch(
                format!("{} weights", measures.len()),
                weights.len(),
            ));
        }
        let shape = first.shape;
        let mut leaves = vec![0.0; first.leaf_values().len()];
        for (m, &w) in measures.iter().zip(weights) {
            if m.shape != shape {
                return Err(shape_mismatch(
                    format!("{shape:?}"),
                    format!("{:?}", m.shape),
                ));
            }
            if !w.is_finite() {
                return Err(Error::InvalidParameter(format!(
                    "non-finite mixture weight {w}"
                )));
            }
            for (acc, v) in leaves.iter_mut().zip(m.leaf_values()) {
                *acc += w * v;
            }
        }
        Self::new(shape, leaves)
    }

    /// Iterates over the internal atoms (generations `0..N`) in level order.
    pub fn internal_atoms(&self) -> impl Iterator<Item = AtomId> + '_ {
        (0..self.shape.depth)
            .flat_map(move |n| (0..self.shape.atoms_at(n)).map(move |i| AtomId::new(n, i)))
    }

    pub fn to_json(&self) -> Result<String> {
        let rows = self
            .leaf_values()
            .chunks_exact(self.shape.l)
            .map(|c| c.to_vec())
            .collect();
        let json = MeasureJson {
            q: self.shape.q,
            l: self.shape.l,
            depth: self.shape.depth,
            leaf_values: rows,
        };
        Ok(serde_json::to_string(&json)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let json: MeasureJson = serde_json::from_str(text)?;
        let shape = TreeShape::new(json.q, json.depth, json.l)?;
        Self::from_leaf_rows(shape, &json.leaf_values)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn shape(q: usize, depth: usize, l: usize) -> TreeShape {
        TreeShape::new(q, depth, l).unwrap()
    }

    #[test]
    fn shape_validation() {
        assert!(TreeShape::new(2, 3, 1).is_err());
        assert!(TreeShape::new(3, 0, 1).is_err());
        assert!(TreeShape::new(3, 1, 0).is_err());
        assert_eq!(shape(3, 4, 2).leaf_count(), 81);
    }

    #[test]
    fn address_roundtrip() {
        let a = VertexAddress::from_digits(vec![2, 0, 1], 3).unwrap();
        assert_eq!(a.index(3), 2 * 9 + 1);
        assert_eq!(VertexAddress::from_index(3, 3, 19), a);
        assert_eq!(a.parent().unwrap().digits(), &[2, 0]);
        assert_eq!(a.child(1).depth(), 4);
        assert_relative_eq!(a.mass(3), 1.0 / 27.0);
        assert!(VertexAddress::from_digits(vec![3], 3).is_err());
        assert_eq!(VertexAddress::root().to_string(), "root");
        assert_eq!(a.to_string(), "2.0.1");
    }

    #[test]
    fn uniform_measure_is_constant_martingale() {
        let m = TruncatedMeasure::uniform(shape(3, 3, 1), &[1.0]).unwrap();
        for n in 0..=3 {
            for i in 0..3usize.pow(n as u32) {
                let f = m
                    .martingale_value(&VertexAddress::from_index(3, n, i))
                    .unwrap();
                assert_relative_eq!(f[0], 1.0, epsilon = 1e-14);
            }
            assert_relative_eq!(m.total_variation_at_depth(n).unwrap(), 1.0, epsilon = 1e-14);
        }
        let d = m.difference_matrix(&VertexAddress::root()).unwrap();
        assert!(d.entries().amax() < 1e-14);
    }

    #[test]
    fn single_son_concentration() {
        let m = TruncatedMeasure::from_leaf_rows(
            shape(3, 1, 2),
            &[vec![1.0, 0.0], vec![0.0, 0.0], vec![0.0, 0.0]],
        )
        .unwrap();
        let first = VertexAddress::from_digits(vec![0], 3).unwrap();
        assert_eq!(m.martingale_value(&first).unwrap().as_slice(), &[3.0, 0.0]);
        assert_eq!(
            m.martingale_value(&VertexAddress::root())
                .unwrap()
                .as_slice(),
            &[1.0, 0.0]
        );

        let d = m.difference_matrix(&VertexAddress::root()).unwrap();
        assert_eq!(d.column(0).as_slice(), &[2.0, 0.0]);
        assert_eq!(d.column(1).as_slice(), &[-1.0, 0.0]);
        assert_eq!(d.column(2).as_slice(), &[-1.0, 0.0]);
        assert_eq!(d.column_sum().norm(), 0.0);
    }

    #[test]
    fn range_errors() {
        let m = TruncatedMeasure::uniform(shape(3, 2, 1), &[1.0]).unwrap();
        let deep = VertexAddress::from_index(3, 3, 0);
        assert!(matches!(
            m.martingale_value(&deep),
            Err(Error::DepthExceedsTruncation { .. })
        ));
        let leaf = VertexAddress::from_index(3, 2, 4);
        assert!(matches!(
            m.difference_matrix(&leaf),
            Err(Error::LeafAtom { .. })
        ));
        let bad = VertexAddress::from_index(4, 1, 3);
        assert!(matches!(
            m.martingale_value(&bad),
            Err(Error::AddressOutOfRange { .. })
        ));
        assert!(m.total_variation_at_depth(3).is_err());
    }

    #[test]
    fn polar_estimate_normalizes() {
        let rows = vec![vec![1.0, 1.0], vec![0.0, 0.0], vec![0.0, 0.0]];
        let m = TruncatedMeasure::from_leaf_rows(shape(3, 1, 2), &rows).unwrap();
        let p = m.polar_estimate(&VertexAddress::root()).unwrap();
        assert_relative_eq!(p[0], 1.0 / 2f64.sqrt(), epsilon = 1e-15);
        assert_relative_eq!(p[1], 1.0 / 2f64.sqrt(), epsilon = 1e-15);
        let zero = VertexAddress::from_digits(vec![1], 3).unwrap();
        assert!(matches!(
            m.polar_estimate(&zero),
            Err(Error::PolarUndefined)
        ));

        let rows = vec![vec![1.0, 0.0], vec![0.0, 0.0], vec![0.0, 0.0]];
        let m = TruncatedMeasure::from_leaf_rows(shape(3, 1, 2), &rows).unwrap();
        let first = VertexAddress::from_digits(vec![0], 3).unwrap();
        assert_eq!(m.polar_estimate(&first).unwrap().as_slice(), &[1.0, 0.0]);
    }

    #[test]
    fn difference_matrix_rejects_nonzero_column_sum() {
        let m = DMatrix::from_row_slice(1, 3, &[1.0, 1.0, 1.0]);
        assert!(matches!(
            DifferenceMatrix::new(m),
            Err(Error::ConstraintViolation { .. })
        ));
    }

    #[test]
    fn json_rejects_wrong_leaf_count() {
        let text = r#"{"q":3,"l":1,"depth":1,"leaf_values":[[1.0],[2.0]]}"#;
        assert!(TruncatedMeasure::from_json(text).is_err());
    }
}
