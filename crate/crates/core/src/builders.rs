//! Measures whose difference matrices lie in a constraint space: random
//! evolutions, rank-one cascades, mixtures and adversarial concentration
//! attempts off the wave cone.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{shape_mismatch, Error, Result};
use crate::rng::{derive_seed, gaussian_vector, stream_rng};
use crate::space::{angle_to_matrix, outer, ConstraintSpace};
use crate::tree::{DifferenceMatrix, TreeShape, TruncatedMeasure};

/// Relative residual allowed for `v ⊗ w ∈ W` in a cascade.
pub const CASCADE_TOLERANCE: f64 = 1e-10;

/// Number of atoms above depth `n`; used to give every atom its own stream.
fn atoms_above(q: usize, n: usize) -> u64 {
    (0..n).map(|k| (q as u64).pow(k as u32)).sum()
}

fn starting_value(l: usize) -> DVector<f64> {
    let mut v = DVector::zeros(l);
    v[0] = 1.0;
    v
}

/// Evolves martingale values level by level; `step` returns the difference
/// matrix at an atom given its value and its global index.
fn evolve<S>(
    shape: TreeShape,
    start: DVector<f64>,
    parallel: bool,
    step: S,
) -> Result<TruncatedMeasure>
where
    S: Fn(&DVector<f64>, u64) -> Result<DMatrix<f64>> + Sync,
{
    let (q, l) = (shape.q, shape.l);
    let mut level = vec![start];
    for n in 0..shape.depth {
        let offset = atoms_above(q, n);
        let expand = |(i, f): (usize, &DVector<f64>)| -> Result<Vec<DVector<f64>>> {
            let d = step(f, offset + i as u64)?;
            Ok((0..q).map(|j| f + d.column(j)).collect())
        };
        let next: Vec<Vec<DVector<f64>>> = if parallel {
            level
                .par_iter()
                .enumerate()
                .map(expand)
                .collect::<Result<_>>()?
        } else {
            level
                .iter()
                .enumerate()
                .map(expand)
                .collect::<Result<_>>()?
        };
        level = next.into_iter().flatten().collect();
    }
    let mut values = Vec::with_capacity(level.len() * l);
    for f in &level {
        values.extend(f.iter());
    }
    TruncatedMeasure::from_terminal_values(shape, values)
}

fn random_element<R: Rng>(space: &ConstraintSpace, rng: &mut R) -> DMatrix<f64> {
    let coeffs = gaussian_vector(rng, space.dim());
    let mut d = DMatrix::zeros(space.l(), space.q());
    for (k, c) in coeffs.iter().enumerate() {
        d += space.basis_matrix(k) * *c;
    }
    d
}

fn random_w(
    space: &ConstraintSpace,
    depth: usize,
    scale: f64,
    seed: u64,
    parallel: bool,
) -> Result<TruncatedMeasure> {
    if !(scale >= 0.0 && scale.is_finite()) {
        return Err(Error::InvalidParameter(format!(
            "scale = {scale} must be nonnegative"
        )));
    }
    let shape = TreeShape::new(space.q(), depth, space.l())?;
    evolve(shape, starting_value(space.l()), parallel, |_, atom| {
        Ok(random_element(space, &mut stream_rng(seed, atom)) * scale)
    })
}

/// Random evolution from `e₁` with `D_ω = scale · Σ_k g_k B_k`, `g_k`
/// standard Gaussian and `B_k` the orthonormal basis of `W`.
///
/// Every atom draws from its own stream derived from `seed`, so the result
/// is independent of scheduling.
pub fn random_w_measure(
    space: &ConstraintSpace,
    depth: usize,
    scale: f64,
    seed: u64,
) -> Result<TruncatedMeasure> {
    random_w(space, depth, scale, seed, true)
}

/// Random evolution from `e₁` whose every atom satisfies the hypotheses of
/// the `p`-inequality: rank-one angle `≥ η` and `Σ_j ‖d_j‖ = u δ ‖F_n‖` with
/// `u` uniform on `(0, 1]`.
pub fn compliant_w_measure(
    space: &ConstraintSpace,
    depth: usize,
    eta: f64,
    delta: f64,
    seed: u64,
) -> Result<TruncatedMeasure> {
    if !(eta > 0.0 && eta <= std::f64::consts::FRAC_PI_2) {
        return Err(Error::InvalidParameter(format!(
            "eta = {eta} must lie in (0, π/2]"
        )));
    }
    if !(delta > 0.0 && delta < 1.0) {
        return Err(Error::InvalidParameter(format!(
            "delta = {delta} must lie in (0, 1)"
        )));
    }
    const RETRIES: usize = 256;
    let shape = TreeShape::new(space.q(), depth, space.l())?;
    evolve(shape, starting_value(space.l()), true, |f, atom| {
        let mut rng = stream_rng(seed, atom);
        for _ in 0..RETRIES {
            let d = random_element(space, &mut rng);
            let size: f64 = d.column_iter().map(|c| c.norm()).sum();
            if size == 0.0 {
                continue;
            }
            let d = DifferenceMatrix::from_raw(d);
            if angle_to_matrix(f, &d)? >= eta {
                let u = 1.0 - rng.gen::<f64>();
                return Ok(d.into_inner() * (u * delta * f.norm() / size));
            }
        }
        Err(Error::SamplingFailed {
            retries: RETRIES,
            reason: format!("no element of W makes an angle ≥ {eta} with the atom value"),
        })
    })
}

/// Which son receives the largest multiplier at each level.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum HeavySon {
    /// The weight is used as given; only meaningful for cascades.
    #[default]
    AsGiven,
    Fixed(usize),
    /// Son chosen per level from a seeded stream.
    Seeded(u64),
}

impl HeavySon {
    pub fn at_level(self, q: usize, n: usize) -> usize {
        match self {
            HeavySon::AsGiven => 0,
            HeavySon::Fixed(j) => j % q,
            HeavySon::Seeded(seed) => (derive_seed(seed, n as u64) % q as u64) as usize,
        }
    }
}

/// Cyclic shift of `w` moving its largest entry to son `heavy`. A shifted
/// weight generally leaves `W` unless `W` is shift invariant.
fn rotate_to(w: &DVector<f64>, heavy: usize) -> DVector<f64> {
    let q = w.len();
    let h = w.imax();
    DVector::from_fn(q, |j, _| w[(j + q + h - heavy) % q])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CascadeSpec {
    pub direction: Vec<f64>,
    /// Zero-sum weight; son `i` receives the multiplier `1 + t_n w_i`.
    pub weight: Vec<f64>,
    pub depth: usize,
    pub heavy_son: HeavySon,
    /// Per-level factors `t_n`; all ones when absent.
    pub level_scales: Option<Vec<f64>>,
    /// Permits negative multipliers.
    pub allow_signed: bool,
}

impl CascadeSpec {
    pub fn new(direction: Vec<f64>, weight: Vec<f64>, depth: usize) -> Self {
        CascadeSpec {
            direction,
            weight,
            depth,
            heavy_son: HeavySon::default(),
            level_scales: None,
            allow_signed: false,
        }
    }

    /// Multipliers `1 + t_n w_i` for level `n`, rotated to the heavy son.
    pub fn multipliers(&self, n: usize) -> DVector<f64> {
        let w = DVector::from_column_slice(&self.weight);
        let t = self.level_scales.as_ref().map_or(1.0, |s| s[n]);
        let w = match self.heavy_son {
            HeavySon::AsGiven => w,
            h => rotate_to(&w, h.at_level(w.len(), n)),
        };
        w.map(|x| 1.0 + t * x)
    }

    fn validate(&self, space: &ConstraintSpace) -> Result<()> {
        let (q, l) = (space.q(), space.l());
        if self.direction.len() != l {
            return Err(shape_mismatch(
                format!("direction of length {l}"),
                self.direction.len(),
            ));
        }
        if self.weight.len() != q {
            return Err(shape_mismatch(
                format!("weight of length {q}"),
                self.weight.len(),
            ));
        }
        let v = DVector::from_column_slice(&self.direction);
        if v.norm() == 0.0 || v.iter().any(|x| !x.is_finite()) {
            return Err(Error::InvalidParameter(
                "cascade direction must be a nonzero finite vector".into(),
            ));
        }
        let w = DVector::from_column_slice(&self.weight);
        if w.sum().abs() > 1e-12 * w.amax().max(1.0) || w.iter().any(|x| !x.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "cascade weight must sum to zero, sum = {:e}",
                w.sum()
            )));
        }
        if let Some(s) = &self.level_scales {
            if s.len() != self.depth {
                return Err(shape_mismatch(
                    format!("{} level scales", self.depth),
                    s.len(),
                ));
            }
        }
        let v_hat = v.normalize();
        for n in 0..self.depth {
            let mult = self.multipliers(n);
            if !self.allow_signed && mult.iter().any(|&x| x < 0.0) {
                return Err(Error::InvalidParameter(format!(
                    "negative multiplier at level {n}; set allow_signed to permit it"
                )));
            }
            let w_n = mult.add_scalar(-1.0);
            if w_n.norm() == 0.0 {
                continue;
            }
            let residual = space.relative_residual(&outer(&v_hat, &w_n))?;
            if residual > CASCADE_TOLERANCE {
                return Err(Error::NotInSpace { residual });
            }
        }
        Ok(())
    }
}

/// Rescales a zero-sum wave-cone witness so that its smallest entry is `-1`,
/// making the lightest sons vanish.
pub fn concentrating_profile(w: &DVector<f64>) -> Result<DVector<f64>> {
    let min = w.min();
    if !(min < 0.0) {
        return Err(Error::InvalidParameter(
            "a nonzero zero-sum weight has a negative entry".into(),
        ));
    }
    // entries within rounding of the minimum vanish exactly
    Ok((w / -min).map(|x| if (x + 1.0).abs() < 1e-12 { -1.0 } else { x }))
}

/// Cascade with `D_ω = F_n(ω) ⊗ w_n`: every son value is `(1 + w_{n,i}) F_n(ω)`,
/// so all values stay on the ray through the direction.
pub fn cascade_measure(spec: &CascadeSpec, space: &ConstraintSpace) -> Result<TruncatedMeasure> {
    spec.validate(space)?;
    let shape = TreeShape::new(space.q(), spec.depth, space.l())?;
    let mut factors = vec![1.0];
    for n in 0..spec.depth {
        let mult = spec.multipliers(n);
        factors = factors
            .iter()
            .flat_map(|&f| mult.iter().map(move |&m| f * m))
            .collect();
    }
    let v = DVector::from_column_slice(&spec.direction).normalize();
    let mut values = Vec::with_capacity(factors.len() * v.len());
    for f in factors {
        values.extend(v.iter().map(|x| x * f));
    }
    TruncatedMeasure::from_terminal_values(shape, values)
}

/// Leafwise weighted sum of measures of the same shape.
pub fn mixture(measures: &[&TruncatedMeasure], weights: &[f64]) -> Result<TruncatedMeasure> {
    TruncatedMeasure::linear_combination(measures, weights)
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct AdversarialOptions {
    pub heavy_son: HeavySon,
    /// Caps `Σ_j ‖d_j‖` at `budget · ‖F_n‖`.
    pub increment_budget: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct AdversarialLevel {
    pub depth: usize,
    /// Angle between the line through the heaviest atom's value and `v`.
    pub drift_angle: f64,
    /// `γ` of the heaviest atom's value against `W`.
    pub gamma: f64,
    pub concentration_ratio: f64,
    /// `Σ ‖F⊗w* - P_W(F⊗w*)‖ / Σ ‖F⊗w*‖` over the atoms of this level.
    pub residual_fraction: f64,
    /// Ratio of the unconstrained cascade with profile `w*`, namely `qⁿ`.
    pub control_ratio: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct AdversarialReport {
    pub levels: Vec<AdversarialLevel>,
}

impl AdversarialReport {
    pub fn last(&self) -> &AdversarialLevel {
        self.levels.last().expect("report covers depth 0")
    }
}

fn line_angle(a: &DVector<f64>, b: &DVector<f64>) -> f64 {
    let (na, nb) = (a.norm(), b.norm());
    if na == 0.0 || nb == 0.0 {
        return std::f64::consts::FRAC_PI_2;
    }
    let a = a / na;
    let b = b * (if a.dot(b) < 0.0 { -1.0 } else { 1.0 } / nb);
    2.0 * (&a - &b).norm().atan2((&a + &b).norm())
}

/// Tries to concentrate mass in direction `v` with increments
/// `D_ω = P_W(F_n(ω) ⊗ w*)`, `w* = (q-1, -1, …, -1)` rotated to the heavy son.
///
/// Off the wave cone the projection loses part of the rank-one increment at
/// every step; the report tracks how much, together with the direction drift
/// and concentration of the heaviest atom.
pub fn adversarial_concentration(
    space: &ConstraintSpace,
    v: &DVector<f64>,
    depth: usize,
    options: AdversarialOptions,
) -> Result<(TruncatedMeasure, AdversarialReport)> {
    let (q, l) = (space.q(), space.l());
    if v.len() != l {
        return Err(shape_mismatch(format!("direction of length {l}"), v.len()));
    }
    let v_norm = v.norm();
    if v_norm == 0.0 {
        return Err(Error::UndefinedAngle);
    }
    if let Some(b) = options.increment_budget {
        if !(b > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "increment budget {b} must be positive"
            )));
        }
    }
    let shape = TreeShape::new(q, depth, l)?;
    let profiles: Vec<DVector<f64>> = (0..depth)
        .map(|n| {
            let mut w = DVector::from_element(q, -1.0);
            w[options.heavy_son.at_level(q, n)] = (q - 1) as f64;
            w
        })
        .collect();
    let mut level = vec![v / v_norm];
    let mut fractions = Vec::with_capacity(depth);
    for w in &profiles {
        let steps: Vec<(Vec<DVector<f64>>, f64, f64)> = level
            .par_iter()
            .map(|f| -> Result<_> {
                let target = outer(f, w);
                let p = space.project(&target)?;
                let mut d = p.projection;
                if let Some(b) = options.increment_budget {
                    let size: f64 = d.column_iter().map(|c| c.norm()).sum();
                    let cap = b * f.norm();
                    if size > cap {
                        d *= cap / size;
                    }
                }
                let sons = (0..q).map(|j| f + d.column(j)).collect();
                Ok((sons, p.residual_norm, target.norm()))
            })
            .collect::<Result<_>>()?;
        let (lost, total) = steps
            .iter()
            .fold((0.0, 0.0), |acc, s| (acc.0 + s.1, acc.1 + s.2));
        fractions.push(if total > 0.0 { lost / total } else { 0.0 });
        level = steps.into_iter().flat_map(|s| s.0).collect();
    }
    let mut values = Vec::with_capacity(level.len() * l);
    for f in &level {
        values.extend(f.iter());
    }
    let measure = TruncatedMeasure::from_terminal_values(shape, values)?;

    let mut levels = Vec::with_capacity(depth + 1);
    for n in 0..=depth {
        let (atom, _) = measure.heaviest_atom(n)?;
        let f = measure.value_at(atom);
        let gamma = if f.norm() > 0.0 {
            space.gamma(&f)?.angle
        } else {
            std::f64::consts::FRAC_PI_2
        };
        levels.push(AdversarialLevel {
            depth: n,
            drift_angle: line_angle(&f, v),
            gamma,
            concentration_ratio: measure.concentration_ratio(n)?,
            residual_fraction: fractions.get(n).copied().unwrap_or(f64::NAN),
            control_ratio: (q as f64).powi(n as i32),
        });
    }
    Ok((measure, AdversarialReport { levels }))
}

/// Whether `v ⊗ w` lies in `W` to the builders' tolerance.
pub fn supports_cascade(
    space: &ConstraintSpace,
    v: &DVector<f64>,
    w: &DVector<f64>,
) -> Result<bool> {
    Ok(space.relative_residual(&outer(v, w))? <= CASCADE_TOLERANCE)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::atoms::flat_forest;
    use crate::tree::{AtomId, VertexAddress};
    use approx::assert_relative_eq;

    fn full(q: usize, l: usize) -> ConstraintSpace {
        ConstraintSpace::full(q, l)
    }

    fn max_residual(space: &ConstraintSpace, m: &TruncatedMeasure) -> f64 {
        m.internal_atoms()
            .map(|a| {
                space
                    .project(m.difference_at(a).entries())
                    .unwrap()
                    .residual_norm
            })
            .fold(0.0, f64::max)
    }

    #[test]
    fn zero_scale_is_uniform() {
        let w = full(3, 2);
        let m = random_w_measure(&w, 4, 0.0, 1).unwrap();
        let u = TruncatedMeasure::uniform(TreeShape::new(3, 4, 2).unwrap(), &[1.0, 0.0]).unwrap();
        assert_eq!(m.leaf_values(), u.leaf_values());
    }

    #[test]
    fn random_measures_stay_in_the_space() {
        let w0 = outer(
            &DVector::from_vec(vec![1.0, 0.0]),
            &DVector::from_vec(vec![1.0, -1.0, 0.0]),
        );
        let w1 = outer(
            &DVector::from_vec(vec![0.0, 1.0]),
            &DVector::from_vec(vec![1.0, 1.0, -2.0]),
        );
        let space = ConstraintSpace::from_spanning_set(3, 2, &[w0, w1]).unwrap();
        let m = random_w_measure(&space, 5, 0.3, 9).unwrap();
        assert!(max_residual(&space, &m) < 1e-10);
    }

    #[test]
    fn parallel_and_sequential_agree() {
        let w = full(4, 3);
        let a = random_w(&w, 4, 0.2, 5, true).unwrap();
        let b = random_w(&w, 4, 0.2, 5, false).unwrap();
        assert_eq!(a.leaf_values(), b.leaf_values());
    }

    #[test]
    fn small_scale_measures_are_flat() {
        let m = random_w_measure(&full(3, 2), 8, 0.01, 3).unwrap();
        let forest = flat_forest(&m, 0.01).unwrap();
        assert_eq!(forest.flat_count(), m.internal_atoms().count());
    }

    #[test]
    fn compliant_measures_meet_the_hypotheses() {
        let m = compliant_w_measure(&full(3, 2), 5, 0.5, 0.05, 2).unwrap();
        for a in m.internal_atoms() {
            let f = m.value_at(a);
            let d = m.difference_at(a);
            let size: f64 = d.columns().map(|c| c.norm()).sum();
            assert!(size <= 0.05 * f.norm() * (1.0 + 1e-12));
            assert!(angle_to_matrix(&f, &d).unwrap() >= 0.5);
        }
        // a rank-one space leaves no room away from the ray
        let r1 = ConstraintSpace::from_spanning_set(
            3,
            2,
            &[outer(
                &DVector::from_vec(vec![1.0, 0.0]),
                &DVector::from_vec(vec![1.0, -1.0, 0.0]),
            )],
        )
        .unwrap();
        assert!(matches!(
            compliant_w_measure(&r1, 2, 0.5, 0.05, 2),
            Err(Error::SamplingFailed { .. })
        ));
    }

    #[test]
    fn dirac_cascade() {
        let spec = CascadeSpec::new(vec![1.0, 0.0], vec![2.0, -1.0, -1.0], 6);
        let m = cascade_measure(&spec, &full(3, 2)).unwrap();
        for n in 0..=6 {
            let (atom, norm) = m.heaviest_atom(n).unwrap();
            assert_eq!(atom, AtomId::new(n, 0));
            assert_relative_eq!(norm, 1.0, epsilon = 1e-12);
            assert_relative_eq!(
                m.concentration_ratio(n).unwrap(),
                3f64.powi(n as i32),
                max_relative = 1e-12
            );
        }
    }

    #[test]
    fn two_thirds_cascade() {
        let spec = CascadeSpec::new(vec![0.0, 1.0], vec![1.0, -0.5, -0.5], 7);
        let m = cascade_measure(&spec, &full(3, 2)).unwrap();
        for n in 0..=7 {
            let (_, norm) = m.heaviest_atom(n).unwrap();
            assert_relative_eq!(norm, (2.0f64 / 3.0).powi(n as i32), max_relative = 1e-12);
            assert_relative_eq!(
                m.concentration_ratio(n).unwrap(),
                2f64.powi(n as i32),
                max_relative = 1e-12
            );
        }
        for a in m.internal_atoms() {
            let p = m.polar_at(a).unwrap();
            assert!((p - DVector::from_vec(vec![0.0, 1.0])).norm() < 1e-12);
        }
    }

    #[test]
    fn cascade_validation() {
        let r1 = ConstraintSpace::from_spanning_set(
            3,
            2,
            &[outer(
                &DVector::from_vec(vec![1.0, 0.0]),
                &DVector::from_vec(vec![2.0, -1.0, -1.0]),
            )],
        )
        .unwrap();
        let ok = CascadeSpec::new(vec![1.0, 0.0], vec![2.0, -1.0, -1.0], 3);
        assert!(cascade_measure(&ok, &r1).is_ok());
        let off = CascadeSpec::new(vec![0.0, 1.0], vec![2.0, -1.0, -1.0], 3);
        assert!(matches!(
            cascade_measure(&off, &r1),
            Err(Error::NotInSpace { .. })
        ));
        let signed = CascadeSpec::new(vec![1.0, 0.0], vec![4.0, -2.0, -2.0], 3);
        assert!(cascade_measure(&signed, &r1).is_err());
        let signed = CascadeSpec {
            allow_signed: true,
            ..signed
        };
        assert!(cascade_measure(&signed, &r1).is_ok());
        let zero = CascadeSpec::new(vec![1.0, 0.0], vec![0.0; 3], 3);
        let u = cascade_measure(&zero, &ConstraintSpace::zero(3, 2)).unwrap();
        assert_relative_eq!(u.concentration_ratio(3).unwrap(), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn seeded_heavy_son_moves_the_singular_leaf() {
        let spec = CascadeSpec {
            heavy_son: HeavySon::Seeded(4),
            ..CascadeSpec::new(vec![1.0], vec![2.0, -1.0, -1.0], 5)
        };
        let m = cascade_measure(&spec, &full(3, 1)).unwrap();
        let digits: Vec<usize> = (0..5).map(|n| spec.heavy_son.at_level(3, n)).collect();
        let leaf = VertexAddress::from_digits(digits, 3).unwrap();
        assert_relative_eq!(m.martingale_value(&leaf).unwrap()[0], 243.0, epsilon = 1e-9);
        assert_relative_eq!(
            m.concentration_ratio(5).unwrap(),
            243.0,
            max_relative = 1e-12
        );
    }

    #[test]
    fn decaying_scales_give_small_leaves() {
        let scales: Vec<f64> = (1..=8).map(|n| 1.0 / (n * n) as f64).collect();
        let spec = CascadeSpec {
            level_scales: Some(scales),
            ..CascadeSpec::new(vec![1.0], vec![2.0, -1.0, -1.0], 8)
        };
        let m = cascade_measure(&spec, &full(3, 1)).unwrap();
        let path = VertexAddress::from_index(3, 8, 0);
        let verdict = crate::atoms::big_leaf_test(&m, &path, 0.5, Default::default()).unwrap();
        assert!(!verdict.big);
        assert_eq!(verdict.witness_depths, vec![0]);
    }

    #[test]
    fn mixture_identity_and_linearity() {
        let space = full(3, 2);
        let a = random_w_measure(&space, 3, 0.4, 1).unwrap();
        let b = cascade_measure(
            &CascadeSpec::new(vec![0.0, 1.0], vec![2.0, -1.0, -1.0], 3),
            &space,
        )
        .unwrap();
        assert_eq!(
            mixture(&[&a], &[1.0]).unwrap().leaf_values(),
            a.leaf_values()
        );
        let mix = mixture(&[&a, &b], &[0.5, 0.5]).unwrap();
        assert!(max_residual(&space, &mix) < 1e-10);
        assert!(mixture(&[&a], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn adversarial_control_cases() {
        // the full space imposes nothing, so the rank-one cascade is reached
        let v = DVector::from_vec(vec![0.6, 0.8]);
        let (_, report) =
            adversarial_concentration(&full(3, 2), &v, 5, AdversarialOptions::default()).unwrap();
        for level in &report.levels {
            assert_relative_eq!(
                level.concentration_ratio,
                level.control_ratio,
                max_relative = 1e-12
            );
            assert!(level.drift_angle < 1e-12);
        }
        assert!(report.levels[..5]
            .iter()
            .all(|l| l.residual_fraction < 1e-14));

        // a space orthogonal to every v ⊗ w admits no increment
        let w = ConstraintSpace::from_spanning_set(
            3,
            2,
            &[outer(
                &DVector::from_vec(vec![1.0, 0.0]),
                &DVector::from_vec(vec![1.0, -1.0, 0.0]),
            )],
        )
        .unwrap();
        let v = DVector::from_vec(vec![0.0, 1.0]);
        let (m, report) =
            adversarial_concentration(&w, &v, 4, AdversarialOptions::default()).unwrap();
        assert!(m.internal_atoms().all(|a| m.difference_at(a).is_zero()));
        assert!(report
            .levels
            .iter()
            .all(|l| (l.concentration_ratio - 1.0).abs() < 1e-12));
        assert_relative_eq!(report.levels[0].residual_fraction, 1.0, epsilon = 1e-12);
    }

    #[test]
    fn adversarial_budget_caps_increments() {
        let v = DVector::from_vec(vec![0.6, 0.8]);
        let opts = AdversarialOptions {
            increment_budget: Some(0.05),
            ..Default::default()
        };
        let (m, _) = adversarial_concentration(&full(3, 2), &v, 4, opts).unwrap();
        for a in m.internal_atoms() {
            let size: f64 = m.difference_at(a).columns().map(|c| c.norm()).sum();
            assert!(size <= 0.05 * m.value_at(a).norm() * (1.0 + 1e-12));
        }
    }

    #[test]
    fn line_angles() {
        let a = DVector::from_vec(vec![1.0, 0.0]);
        assert_eq!(line_angle(&a, &(-&a * 3.0)), 0.0);
        assert_relative_eq!(
            line_angle(&a, &DVector::from_vec(vec![1.0, 1.0])),
            std::f64::consts::FRAC_PI_4,
            epsilon = 1e-15
        );
        assert_relative_eq!(
            line_angle(&a, &DVector::from_vec(vec![0.0, 1.0])),
            std::f64::consts::FRAC_PI_2,
            epsilon = 1e-15
        );
    }
}
