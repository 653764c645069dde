//! The BV-type constraint space on the discrete torus `(ℤ/mℤ)²`.
//!
//! Here `q = m²`, son `k` is identified with the torus point
//! `(k / m, k % m)`, and `ℝ⁸` is identified with complex `2 × 2` matrices:
//! entry `e = 2·row + col` occupies the real coordinates `2e` (real part) and
//! `2e + 1` (imaginary part).
//!
//! `W` consists of the matrices whose son-columns are discrete gradients of a
//! pair of complex functions:
//!
//! ```text
//! D(i, j) = [ f(i+1, j) - f(i, j)   f(i, j+1) - f(i, j) ]
//!           [ g(i+1, j) - g(i, j)   g(i, j+1) - g(i, j) ]
//! ```
//!
//! On the Fourier side (`f̂(γ) = Σ_x f(x) e^{-2πi⟨γ,x⟩/m}`, inverse scaled by
//! `1/m²`) this is the condition that `D̂(0) = 0` and every row of `D̂(γ)` is
//! a complex multiple of the symbol `s(γ) = (e^{2πiγ₁/m} - 1, e^{2πiγ₂/m} - 1)`.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{shape_mismatch, Error, Result};
use crate::space::ConstraintSpace;

/// Real dimension of the value space.
pub const BV_L: usize = 8;
/// Residual tolerance of [`fourier_membership`], relative to `‖D‖_HS`.
pub const FOURIER_TOLERANCE: f64 = 1e-9;

/// A complex function on `(ℤ/mℤ)²`, stored row-major: `(i, j) ↦ values[i*m + j]`.
#[derive(Debug, Clone, PartialEq)]
pub struct TorusFunction {
    m: usize,
    values: Vec<Complex64>,
}

impl TorusFunction {
    pub fn new(m: usize, values: Vec<Complex64>) -> Result<Self> {
        if m < 2 {
            return Err(Error::InvalidParameter(format!(
                "torus size m = {m} must be at least 2"
            )));
        }
        if values.len() != m * m {
            return Err(shape_mismatch(format!("{} values", m * m), values.len()));
        }
        Ok(TorusFunction { m, values })
    }

    pub fn from_fn(m: usize, mut f: impl FnMut(usize, usize) -> Complex64) -> Result<Self> {
        let values = (0..m * m).map(|k| f(k / m, k % m)).collect();
        Self::new(m, values)
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn values(&self) -> &[Complex64] {
        &self.values
    }

    /// Value at `(i, j)`, indices taken mod `m`.
    pub fn at(&self, i: usize, j: usize) -> Complex64 {
        let m = self.m;
        self.values[(i % m) * m + (j % m)]
    }

    fn transform(&self, sign: f64) -> Vec<Complex64> {
        let m = self.m;
        let roots: Vec<Complex64> = (0..m)
            .map(|k| Complex64::from_polar(1.0, sign * 2.0 * PI * k as f64 / m as f64))
            .collect();
        let mut out = vec![Complex64::new(0.0, 0.0); m * m];
        for g1 in 0..m {
            for g2 in 0..m {
                let mut acc = Complex64::new(0.0, 0.0);
                for x1 in 0..m {
                    for x2 in 0..m {
                        acc += self.values[x1 * m + x2] * roots[(g1 * x1 + g2 * x2) % m];
                    }
                }
                out[g1 * m + g2] = acc;
            }
        }
        out
    }

    /// Unnormalised forward transform `f̂(γ) = Σ_x f(x) e^{-2πi⟨γ,x⟩/m}`.
    pub fn dft2(&self) -> TorusFunction {
        TorusFunction {
            m: self.m,
            values: self.transform(-1.0),
        }
    }

    /// Inverse of [`TorusFunction::dft2`] (carries the `1/m²` factor).
    pub fn idft2(&self) -> TorusFunction {
        let scale = 1.0 / (self.m * self.m) as f64;
        TorusFunction {
            m: self.m,
            values: self.transform(1.0).into_iter().map(|z| z * scale).collect(),
        }
    }
}

/// A value in `ℝ⁸` viewed as a complex `2 × 2` matrix (row-major entries).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BVElement {
    pub entries: [Complex64; 4],
}

impl BVElement {
    pub fn new(a: Complex64, b: Complex64, c: Complex64, d: Complex64) -> Self {
        BVElement {
            entries: [a, b, c, d],
        }
    }

    pub fn from_real(v: &[f64]) -> Result<Self> {
        if v.len() != BV_L {
            return Err(shape_mismatch("vector of length 8", v.len()));
        }
        let mut entries = [Complex64::new(0.0, 0.0); 4];
        for (e, z) in entries.iter_mut().enumerate() {
            *z = Complex64::new(v[2 * e], v[2 * e + 1]);
        }
        Ok(BVElement { entries })
    }

    pub fn to_real(&self) -> DVector<f64> {
        DVector::from_iterator(BV_L, self.entries.iter().flat_map(|z| [z.re, z.im]))
    }

    pub fn get(&self, row: usize, col: usize) -> Complex64 {
        self.entries[2 * row + col]
    }

    pub fn det(&self) -> Complex64 {
        self.get(0, 0) * self.get(1, 1) - self.get(0, 1) * self.get(1, 0)
    }

    /// Frobenius norm, equal to the Euclidean norm of the real view.
    pub fn norm(&self) -> f64 {
        self.entries
            .iter()
            .map(|z| z.norm_sqr())
            .sum::<f64>()
            .sqrt()
    }

    pub fn identity() -> Self {
        let one = Complex64::new(1.0, 0.0);
        let zero = Complex64::new(0.0, 0.0);
        BVElement::new(one, zero, zero, one)
    }
}

/// A nonzero frequency `γ ∈ (ℤ/mℤ)²`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FrequencySymbol {
    pub m: usize,
    pub gamma: (usize, usize),
}

impl FrequencySymbol {
    pub fn new(m: usize, gamma: (usize, usize)) -> Result<Self> {
        let gamma = (gamma.0 % m, gamma.1 % m);
        if gamma == (0, 0) {
            return Err(Error::InvalidParameter("frequency must be nonzero".into()));
        }
        Ok(FrequencySymbol { m, gamma })
    }

    /// All `m² - 1` nonzero frequencies in lexicographic order.
    pub fn all(m: usize) -> Vec<FrequencySymbol> {
        (1..m * m)
            .map(|k| FrequencySymbol {
                m,
                gamma: (k / m, k % m),
            })
            .collect()
    }

    /// `s(γ) = (e^{2πiγ₁/m} - 1, e^{2πiγ₂/m} - 1)`.
    pub fn symbol(&self) -> [Complex64; 2] {
        let m = self.m as f64;
        let one = Complex64::new(1.0, 0.0);
        [
            Complex64::from_polar(1.0, 2.0 * PI * self.gamma.0 as f64 / m) - one,
            Complex64::from_polar(1.0, 2.0 * PI * self.gamma.1 as f64 / m) - one,
        ]
    }

    /// The frequency `-γ`.
    pub fn negated(&self) -> FrequencySymbol {
        let m = self.m;
        FrequencySymbol {
            m,
            gamma: ((m - self.gamma.0) % m, (m - self.gamma.1) % m),
        }
    }

    /// Whether `s(-γ)` is a complex multiple of `s(γ)`, i.e. `Ω(γ) = Ω(-γ)`.
    pub fn is_self_conjugate(&self) -> bool {
        let [a, b] = self.symbol();
        let [c, d] = self.negated().symbol();
        (a * d - b * c).norm() <= 1e-12 * (a.norm() + b.norm()) * (c.norm() + d.norm())
    }

    /// Squared distance from a complex matrix to `Ω(γ)`: the part of each row
    /// orthogonal to `s(γ)`.
    pub fn omega_residual_sqr(&self, h: &[Complex64; 4]) -> f64 {
        let s = self.symbol();
        let s_norm2 = s[0].norm_sqr() + s[1].norm_sqr();
        (0..2)
            .map(|r| {
                let row = [h[2 * r], h[2 * r + 1]];
                let coeff = (row[0] * s[0].conj() + row[1] * s[1].conj()) / s_norm2;
                (row[0] - coeff * s[0]).norm_sqr() + (row[1] - coeff * s[1]).norm_sqr()
            })
            .sum()
    }
}

/// Son index `k` ↔ torus point `(k / m, k % m)`.
pub fn son_to_point(m: usize, k: usize) -> (usize, usize) {
    (k / m, k % m)
}

/// The matrix `D ∈ ℝ⁸ ⊗ ℝ^{m²}` built from a pair of complex functions.
pub fn bv_generator(f: &TorusFunction, g: &TorusFunction) -> Result<DMatrix<f64>> {
    let m = f.m();
    if g.m() != m {
        return Err(shape_mismatch(format!("torus size {m}"), g.m()));
    }
    let q = m * m;
    let mut d = DMatrix::zeros(BV_L, q);
    for k in 0..q {
        let (i, j) = son_to_point(m, k);
        let entries = [
            f.at(i + 1, j) - f.at(i, j),
            f.at(i, j + 1) - f.at(i, j),
            g.at(i + 1, j) - g.at(i, j),
            g.at(i, j + 1) - g.at(i, j),
        ];
        for (e, z) in entries.iter().enumerate() {
            d[(2 * e, k)] = z.re;
            d[(2 * e + 1, k)] = z.im;
        }
    }
    Ok(d)
}

/// The BV-type space `W` for the torus of size `m` (`q = m²`, `l = 8`).
///
/// Sweeps the `4m²` real basis pairs `(f, g)` (a point mass with value `1` or
/// `i` in one of the two functions) through [`bv_generator`] and
/// orthonormalises the result. The map has the constants as its kernel, so
/// `dim W = 4m² - 4`.
pub fn bv_space(m: usize) -> Result<ConstraintSpace> {
    if m < 2 {
        return Err(Error::InvalidParameter(format!(
            "torus size m = {m} must be at least 2"
        )));
    }
    let q = m * m;
    let zero = TorusFunction::new(m, vec![Complex64::new(0.0, 0.0); q])?;
    let mut generators = Vec::with_capacity(4 * q);
    for x in 0..q {
        for unit in [Complex64::new(1.0, 0.0), Complex64::new(0.0, 1.0)] {
            let mut values = vec![Complex64::new(0.0, 0.0); q];
            values[x] = unit;
            let point = TorusFunction::new(m, values)?;
            generators.push(bv_generator(&point, &zero)?);
            generators.push(bv_generator(&zero, &point)?);
        }
    }
    ConstraintSpace::from_spanning_set(q, BV_L, &generators)
}

/// Outcome of the Fourier-side membership test.
#[derive(Debug, Clone, Copy)]
pub struct FourierMembership {
    pub member: bool,
    /// Hilbert–Schmidt distance from `D` to `W`, computed frequency by frequency.
    pub residual: f64,
}

/// Tests `D ∈ W` on the Fourier side: `D̂(0) = 0` and `D̂(γ) ∈ Ω(γ)` for every
/// `γ ≠ 0`.
///
/// By Parseval the summed frequency residuals (scaled by `1/m²`) equal the
/// squared HS distance from `D` to `W`, so the test agrees with
/// [`ConstraintSpace::project`] on `bv_space(m)`.
pub fn fourier_membership(m: usize, d: &DMatrix<f64>) -> Result<FourierMembership> {
    let q = m * m;
    if d.nrows() != BV_L || d.ncols() != q {
        return Err(shape_mismatch(
            format!("8x{q}"),
            format!("{}x{}", d.nrows(), d.ncols()),
        ));
    }
    let mut spectra = Vec::with_capacity(4);
    for e in 0..4 {
        let values = (0..q)
            .map(|k| Complex64::new(d[(2 * e, k)], d[(2 * e + 1, k)]))
            .collect();
        spectra.push(TorusFunction::new(m, values)?.dft2());
    }
    let mut residual_sqr = 0.0;
    for k in 0..q {
        let h = [
            spectra[0].values[k],
            spectra[1].values[k],
            spectra[2].values[k],
            spectra[3].values[k],
        ];
        residual_sqr += if k == 0 {
            h.iter().map(|z| z.norm_sqr()).sum::<f64>()
        } else {
            FrequencySymbol {
                m,
                gamma: son_to_point(m, k),
            }
            .omega_residual_sqr(&h)
        };
    }
    let residual = (residual_sqr / q as f64).sqrt();
    Ok(FourierMembership {
        member: residual <= FOURIER_TOLERANCE * d.norm(),
        residual,
    })
}

/// The candidate wave-cone direction `(a, b)ᵗ ⊗ s(γ)`: its rows are `a·s(γ)`
/// and `b·s(γ)`, so it lies in `Ω(γ)`.
pub fn bv_wave_cone_sample(freq: FrequencySymbol, a: Complex64, b: Complex64) -> Result<BVElement> {
    if a.norm() == 0.0 && b.norm() == 0.0 {
        return Err(Error::InvalidParameter("(a, b) must be nonzero".into()));
    }
    let s = freq.symbol();
    Ok(BVElement::new(a * s[0], a * s[1], b * s[0], b * s[1]))
}

/// Scale-normalised rank test: `|det v| ≤ tol · ‖v‖²/2`.
pub fn rank_one_check(v: &BVElement, tol: f64) -> bool {
    v.det().norm() <= tol * v.norm().powi(2) / 2.0
}
