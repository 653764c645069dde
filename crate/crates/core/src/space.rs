//! Linear subspaces `W` of zero-column-sum `l × q` matrices, their
//! Hilbert–Schmidt geometry, the rank-one angle `γ(v, W)` and the martingale
//! wave cone `Λ(W) = {v : γ(v, W) = 0}`.
//!
//! Matrices are `l` rows by `q` columns; column `j` belongs to son `j`. A
//! subspace is stored as an orthonormal basis (under `⟨A, B⟩ = tr(AᵗB)`) of
//! row-major vectorised matrices.
//!
//! The rank-one angle is computed as an eigenproblem. For a unit vector `v̂`
//! and a unit zero-sum `w`, the best approximation of `v̂ ⊗ w` inside `W` is
//! its orthogonal projection, so
//!
//! ```text
//! cos² γ(v, W) = max { ‖P_W(v̂ ⊗ w)‖² : w ∈ ℝ^q_0, ‖w‖ = 1 },
//! ```
//!
//! the top eigenvalue of a `(q-1) × (q-1)` symmetric form.

use std::path::Path;

use nalgebra::{DMatrix, DVector, SymmetricEigen, SVD};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{shape_mismatch, Error, Result};
use crate::tree::DifferenceMatrix;

/// Relative singular-value threshold below which spanning directions are dropped.
pub const RANK_TOLERANCE: f64 = 1e-10;
/// Default angle tolerance for wave-cone membership.
pub const MEMBERSHIP_TOLERANCE: f64 = 1e-8;
/// Tolerance on `|⟨b_i, b_j⟩ - δ_ij|` for a stored basis.
pub const ORTHONORMALITY_TOLERANCE: f64 = 1e-10;

/// Orthonormal basis of `ℝ^q_0` (the Helmert basis), as the columns of a
/// `q × (q-1)` matrix.
pub fn zero_sum_basis(q: usize) -> DMatrix<f64> {
    let mut u = DMatrix::zeros(q, q.saturating_sub(1));
    for k in 1..q {
        let norm = ((k * (k + 1)) as f64).sqrt();
        for i in 0..k {
            u[(i, k - 1)] = 1.0 / norm;
        }
        u[(k, k - 1)] = -(k as f64) / norm;
    }
    u
}

/// `v ⊗ w = v · wᵗ`, an `l × q` matrix.
pub fn outer(v: &DVector<f64>, w: &DVector<f64>) -> DMatrix<f64> {
    v * w.transpose()
}

/// Hilbert–Schmidt inner product `tr(AᵗB)`.
pub fn hs_inner(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    a.dot(b)
}

fn vectorize(m: &DMatrix<f64>) -> DVector<f64> {
    // row-major
    DVector::from_iterator(m.len(), m.transpose().iter().copied())
}

fn unvectorize(v: &[f64], l: usize, q: usize) -> DMatrix<f64> {
    DMatrix::from_row_slice(l, q, v)
}

/// A subspace `W ⊂ ℝ^l ⊗ ℝ^q_0`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConstraintSpace {
    q: usize,
    l: usize,
    /// `dim × (l·q)`, orthonormal rows.
    basis: DMatrix<f64>,
}

/// Orthogonal decomposition `M = projection + residual` with `projection ∈ W`.
#[derive(Debug, Clone)]
pub struct Projection {
    pub projection: DMatrix<f64>,
    pub residual_norm: f64,
}

/// Result of the rank-one angle computation.
#[derive(Debug, Clone)]
pub struct AngleResult {
    /// `γ(v, W)` in radians, in `[0, π/2]`.
    pub angle: f64,
    /// Unit zero-sum vector attaining the infimum.
    pub witness_w: DVector<f64>,
    /// `P_W(v̂ ⊗ witness_w)`.
    pub witness_matrix: DMatrix<f64>,
    /// Top eigenvalue of the quadratic form before clamping to `[0, 1]`.
    pub top_eigenvalue: f64,
    /// Set when `W = {0}`; the angle is then reported as `π/2`.
    pub degenerate: bool,
}

/// Answer of a wave-cone membership query.
#[derive(Debug, Clone)]
pub struct WaveConeMembership {
    pub member: bool,
    pub angle: f64,
    /// On membership, `‖P_W(v̂⊗w) - v̂⊗w‖_HS ≤ WITNESS_CONSTANT · tol`.
    pub witness_w: Option<DVector<f64>>,
}

/// Constant relating the membership tolerance to the witness residual.
///
/// The residual of the unit matrix `v̂ ⊗ w` is `sin γ ≤ γ`.
pub const WITNESS_CONSTANT: f64 = 1.0;

#[derive(Serialize, Deserialize)]
struct SpaceJson {
    q: usize,
    l: usize,
    basis: Vec<Vec<f64>>,
}

impl ConstraintSpace {
    /// The zero subspace.
    pub fn zero(q: usize, l: usize) -> Self {
        ConstraintSpace {
            q,
            l,
            basis: DMatrix::zeros(0, l * q),
        }
    }

    /// All of `ℝ^l ⊗ ℝ^q_0`, of dimension `(q-1)·l`.
    pub fn full(q: usize, l: usize) -> Self {
        let u = zero_sum_basis(q);
        let mut basis = DMatrix::zeros((q - 1) * l, l * q);
        for r in 0..l {
            for k in 0..q - 1 {
                let row = r * (q - 1) + k;
                for j in 0..q {
                    basis[(row, r * q + j)] = u[(j, k)];
                }
            }
        }
        ConstraintSpace { q, l, basis }
    }

    /// Orthonormalises the span of `matrices` (each `l × q`, zero column sums).
    ///
    /// Uses a singular value decomposition of the stacked generators and keeps
    /// the right singular vectors whose singular value exceeds
    /// [`RANK_TOLERANCE`] times the largest one.
    pub fn from_spanning_set(q: usize, l: usize, matrices: &[DMatrix<f64>]) -> Result<Self> {
        if q == 0 || l == 0 {
            return Err(Error::InvalidParameter("q and l must be positive".into()));
        }
        for m in matrices {
            if m.nrows() != l || m.ncols() != q {
                return Err(shape_mismatch(
                    format!("{l}x{q}"),
                    format!("{}x{}", m.nrows(), m.ncols()),
                ));
            }
            DifferenceMatrix::new(m.clone())?;
        }
        if matrices.is_empty() {
            return Ok(Self::zero(q, l));
        }
        let mut stacked = DMatrix::zeros(matrices.len(), l * q);
        for (i, m) in matrices.iter().enumerate() {
            stacked.set_row(i, &vectorize(m).transpose());
        }
        Ok(ConstraintSpace {
            q,
            l,
            basis: orthonormal_row_span(&stacked, RANK_TOLERANCE),
        })
    }

    pub fn q(&self) -> usize {
        self.q
    }

    pub fn l(&self) -> usize {
        self.l
    }

    pub fn dim(&self) -> usize {
        self.basis.nrows()
    }

    pub fn basis_matrix(&self, i: usize) -> DMatrix<f64> {
        unvectorize(self.basis.row(i).transpose().as_slice(), self.l, self.q)
    }

    pub fn basis_matrices(&self) -> Vec<DMatrix<f64>> {
        (0..self.dim()).map(|i| self.basis_matrix(i)).collect()
    }

    /// Largest deviation `|⟨b_i, b_j⟩ - δ_ij|` of the stored basis.
    pub fn orthonormality_defect(&self) -> f64 {
        let gram = &self.basis * self.basis.transpose();
        let n = gram.nrows();
        (gram - DMatrix::identity(n, n)).amax()
    }

    fn check_shape(&self, m: &DMatrix<f64>) -> Result<()> {
        if m.nrows() != self.l || m.ncols() != self.q {
            return Err(shape_mismatch(
                format!("{}x{}", self.l, self.q),
                format!("{}x{}", m.nrows(), m.ncols()),
            ));
        }
        Ok(())
    }

    fn check_vector(&self, v: &DVector<f64>) -> Result<f64> {
        if v.len() != self.l {
            return Err(shape_mismatch(
                format!("vector of length {}", self.l),
                v.len(),
            ));
        }
        let norm = v.norm();
        if norm == 0.0 || !norm.is_finite() {
            return Err(Error::UndefinedAngle);
        }
        Ok(norm)
    }

    /// `P_W(M) = Σ_i ⟨M, b_i⟩ b_i` and `‖M - P_W(M)‖_HS`.
    pub fn project(&self, m: &DMatrix<f64>) -> Result<Projection> {
        self.check_shape(m)?;
        let coeffs = &self.basis * vectorize(m);
        let projected = self.basis.tr_mul(&coeffs);
        let projection = unvectorize(projected.as_slice(), self.l, self.q);
        let residual_norm = (m - &projection).norm();
        Ok(Projection {
            projection,
            residual_norm,
        })
    }

    /// `‖M - P_W(M)‖ / ‖M‖` (zero for `M = 0`).
    pub fn relative_residual(&self, m: &DMatrix<f64>) -> Result<f64> {
        let p = self.project(m)?;
        let norm = m.norm();
        Ok(if norm == 0.0 {
            0.0
        } else {
            p.residual_norm / norm
        })
    }

    /// Membership test `‖M - P_W(M)‖ ≤ tol · ‖M‖`.
    pub fn contains(&self, m: &DMatrix<f64>, tol: f64) -> Result<bool> {
        let p = self.project(m)?;
        Ok(p.residual_norm <= tol * m.norm())
    }

    /// Rows `c_k = b_kᵗ v̂` (each in `ℝ^q_0`), so that `⟨b_k, v̂ ⊗ w⟩ = c_k · w`.
    fn contracted(&self, v_hat: &DVector<f64>) -> DMatrix<f64> {
        let (l, q) = (self.l, self.q);
        let mut c = DMatrix::zeros(self.dim(), q);
        for k in 0..self.dim() {
            let row = self.basis.row(k);
            for r in 0..l {
                let vr = v_hat[r];
                for j in 0..q {
                    c[(k, j)] += row[r * q + j] * vr;
                }
            }
        }
        c
    }

    /// The rank-one angle `γ(v, W)` with a witness.
    pub fn gamma(&self, v: &DVector<f64>) -> Result<AngleResult> {
        let norm = self.check_vector(v)?;
        let v_hat = v / norm;
        let u = zero_sum_basis(self.q);
        if self.dim() == 0 {
            return Ok(AngleResult {
                angle: std::f64::consts::FRAC_PI_2,
                witness_w: u.column(0).into_owned(),
                witness_matrix: DMatrix::zeros(self.l, self.q),
                top_eigenvalue: 0.0,
                degenerate: true,
            });
        }
        let reduced = self.contracted(&v_hat) * &u;
        let form = reduced.tr_mul(&reduced);
        let eig = SymmetricEigen::new(form);
        let top = eig.eigenvalues.imax();
        let top_eigenvalue = eig.eigenvalues[top];
        let y = eig.eigenvectors.column(top).into_owned();
        let mut w = &u * y;
        w /= w.norm();
        canonical_sign(&mut w);

        let rank_one = outer(&v_hat, &w);
        let p = self.project(&rank_one)?;
        let angle = p.residual_norm.atan2(p.projection.norm());
        Ok(AngleResult {
            angle,
            witness_w: w,
            witness_matrix: p.projection,
            top_eigenvalue,
            degenerate: false,
        })
    }

    /// Sampling upper bound for `γ(v, W)`: the smallest HS angle between
    /// `v̂ ⊗ w` and `W` over `samples` random unit zero-sum `w`.
    ///
    /// Shares nothing with [`ConstraintSpace::gamma`] beyond the projection
    /// formula.
    pub fn gamma_bruteforce(&self, v: &DVector<f64>, samples: usize, seed: u64) -> Result<f64> {
        let norm = self.check_vector(v)?;
        if samples == 0 {
            return Err(Error::InvalidParameter(
                "at least one sample is required".into(),
            ));
        }
        if self.dim() == 0 {
            return Ok(std::f64::consts::FRAC_PI_2);
        }
        let v_hat = v / norm;
        let c = self.contracted(&v_hat);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut w: DVector<f64> = DVector::zeros(self.q);
        let mut best = (-1.0, DVector::zeros(self.q));
        let mut drawn = 0;
        while drawn < samples {
            w.iter_mut()
                .for_each(|x| *x = StandardNormal.sample(&mut rng));
            let mean = w.mean();
            w.add_scalar_mut(-mean);
            let wn = w.norm();
            if wn < 1e-12 {
                continue;
            }
            drawn += 1;
            let cos2 = (&c * &w).norm_squared() / (wn * wn);
            if cos2 > best.0 {
                best = (cos2, w.clone() / wn);
            }
        }
        let rank_one = outer(&v_hat, &best.1);
        let p = self.project(&rank_one)?;
        Ok(p.residual_norm.atan2(p.projection.norm()))
    }

    /// `v ∈ Λ(W)` up to an angle tolerance.
    pub fn wave_cone_member(&self, v: &DVector<f64>, tol: f64) -> Result<WaveConeMembership> {
        if !(tol > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "tolerance must be positive, got {tol}"
            )));
        }
        let g = self.gamma(v)?;
        let member = !g.degenerate && g.angle <= tol;
        Ok(WaveConeMembership {
            member,
            angle: g.angle,
            witness_w: member.then_some(g.witness_w),
        })
    }

    /// Searches for a direction of `Λ(W)` by alternating maximisation of
    /// `‖P_W(v ⊗ w)‖²` over unit `v` and unit zero-sum `w`, starting from a
    /// random `v`. The value increases monotonically; it reaches 1 exactly on
    /// the wave cone, so callers certify the result through
    /// `top_eigenvalue` or `angle`.
    pub fn search_wave_cone(
        &self,
        seed: u64,
        max_iter: usize,
    ) -> Result<(DVector<f64>, AngleResult)> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut v: DVector<f64> = DVector::from_fn(self.l, |_, _| StandardNormal.sample(&mut rng));
        let mut g = self.gamma(&v)?;
        for _ in 0..max_iter {
            if g.degenerate || g.angle < 1e-14 {
                break;
            }
            // Fixed w: maximise Σ_k ⟨v, b_k w⟩² over unit v.
            let w = &g.witness_w;
            let mut form = DMatrix::zeros(self.l, self.l);
            for k in 0..self.dim() {
                let bw = self.basis_matrix(k) * w;
                form += &bw * bw.transpose();
            }
            let eig = SymmetricEigen::new(form);
            v = eig.eigenvectors.column(eig.eigenvalues.imax()).into_owned();
            canonical_sign(&mut v);
            let next = self.gamma(&v)?;
            let stalled = next.angle >= g.angle * (1.0 - 1e-12);
            g = next;
            if stalled {
                break;
            }
        }
        Ok((v, g))
    }

    pub fn to_json(&self) -> Result<String> {
        let basis = (0..self.dim())
            .map(|i| self.basis.row(i).iter().copied().collect())
            .collect();
        Ok(serde_json::to_string(&SpaceJson {
            q: self.q,
            l: self.l,
            basis,
        })?)
    }

    /// Loads a subspace; an orthonormal basis is kept verbatim, anything else
    /// is treated as a spanning set and orthonormalised.
    pub fn from_json(text: &str) -> Result<Self> {
        let json: SpaceJson = serde_json::from_str(text)?;
        let matrices = json
            .basis
            .iter()
            .map(|b| {
                if b.len() != json.l * json.q {
                    return Err(shape_mismatch(
                        format!("{} entries", json.l * json.q),
                        b.len(),
                    ));
                }
                Ok(unvectorize(b, json.l, json.q))
            })
            .collect::<Result<Vec<_>>>()?;
        for m in &matrices {
            DifferenceMatrix::new(m.clone())?;
        }
        let mut basis = DMatrix::zeros(matrices.len(), json.l * json.q);
        for (i, m) in matrices.iter().enumerate() {
            basis.set_row(i, &vectorize(m).transpose());
        }
        let space = ConstraintSpace {
            q: json.q,
            l: json.l,
            basis,
        };
        if space.orthonormality_defect() <= ORTHONORMALITY_TOLERANCE {
            Ok(space)
        } else {
            Self::from_spanning_set(json.q, json.l, &matrices)
        }
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

/// Orthonormal basis (as rows) of the row space of `a`.
pub(crate) fn orthonormal_row_span(a: &DMatrix<f64>, rel_tol: f64) -> DMatrix<f64> {
    let cols = a.ncols();
    let svd = SVD::new(a.clone(), false, true);
    let v_t = svd.v_t.expect("right singular vectors requested");
    let sigma_max = svd.singular_values.max();
    if sigma_max == 0.0 {
        return DMatrix::zeros(0, cols);
    }
    let keep: Vec<usize> = svd
        .singular_values
        .iter()
        .enumerate()
        .filter(|(_, &s)| s > rel_tol * sigma_max)
        .map(|(i, _)| i)
        .collect();
    let mut basis = DMatrix::zeros(keep.len(), cols);
    for (r, &i) in keep.iter().enumerate() {
        basis.set_row(r, &v_t.row(i));
    }
    basis
}

/// Flips `x` so that its largest-magnitude entry is positive.
fn canonical_sign(x: &mut DVector<f64>) {
    if !x.is_empty() && x[x.iamax()] < 0.0 {
        x.neg_mut();
    }
}

/// Rank-one angle between `v` and the single matrix `D`:
///
/// ```text
/// cos² γ(v, {D}) = Σ_j ⟨v̂, d_j⟩² / Σ_j ‖d_j‖².
/// ```
///
/// Evaluated as `atan2(√Σ‖π_{v⊥} d_j‖², √Σ⟨v̂, d_j⟩²)`, which keeps full
/// precision near 0 and `π/2`.
pub fn angle_to_matrix(v: &DVector<f64>, d: &DifferenceMatrix) -> Result<f64> {
    if v.len() != d.l() {
        return Err(shape_mismatch(
            format!("vector of length {}", d.l()),
            v.len(),
        ));
    }
    let norm = v.norm();
    if norm == 0.0 || d.is_zero() {
        return Err(Error::UndefinedAngle);
    }
    let v_hat = v / norm;
    let (mut along, mut across) = (0.0, 0.0);
    for col in d.entries().column_iter() {
        let c = v_hat.dot(&col);
        along += c * c;
        across += (col - &v_hat * c).norm_squared();
    }
    Ok(across.sqrt().atan2(along.sqrt()))
}
