use nalgebra::DVector;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::json;
use std::f64::consts::{FRAC_PI_3, FRAC_PI_4, FRAC_PI_6};
use std::path::PathBuf;

use super::{csv_artifact, join, ExperimentOutput, SpaceSource};
use crate::atoms::{
    critical_exponent, doob_maximal_profile, estimate_p0, excess, lemma1_check, lemma2_region,
    p_inequality_margin, radial_bound_holds, sample_lemma2_configurations, submartingale_check,
    taylor_remainder, Lemma2Sampler, P_MARGIN,
};
use crate::builders::compliant_w_measure;
use crate::error::{Error, Result};
use crate::rng::{derive_seed, gaussian_matrix, gaussian_vector, stream_rng};
use crate::space::ConstraintSpace;
use crate::tree::{DifferenceMatrix, TruncatedMeasure};

/// Stream offset separating validation draws from estimation draws.
const VALIDATION_STREAM: u64 = 1 << 40;

fn row_centred(m: nalgebra::DMatrix<f64>) -> nalgebra::DMatrix<f64> {
    let mut m = m;
    for mut row in m.row_iter_mut() {
        let mean = row.mean();
        row.add_scalar_mut(-mean);
    }
    m
}

/// Rank-one angle of one direction, or the eigensolver/brute-force
/// comparison over random instances when no space is given.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GammaConfig {
    pub space: Option<SpaceSource>,
    pub direction: Option<Vec<f64>>,
    pub instances: usize,
    /// Brute-force samples per instance; 0 skips the brute force.
    pub samples: usize,
    pub seed: u64,
    /// Allowed gap between the two methods, in radians.
    pub agreement: f64,
}

impl Default for GammaConfig {
    fn default() -> Self {
        GammaConfig {
            space: None,
            direction: None,
            instances: 200,
            samples: 100_000,
            seed: 1,
            agreement: 1e-2,
        }
    }
}

#[derive(Serialize)]
struct GammaRow {
    instance: usize,
    q: usize,
    l: usize,
    dim: usize,
    gamma: f64,
    top_eigenvalue: f64,
    bruteforce: f64,
    difference: f64,
    witness: String,
}

pub(crate) fn run_gamma(c: &GammaConfig) -> Result<ExperimentOutput> {
    let instance = |i: usize, space: &ConstraintSpace, v: &DVector<f64>| -> Result<GammaRow> {
        let g = space.gamma(v)?;
        let brute = if c.samples > 0 {
            space.gamma_bruteforce(
                v,
                c.samples,
                derive_seed(c.seed, VALIDATION_STREAM + i as u64),
            )?
        } else {
            f64::NAN
        };
        Ok(GammaRow {
            instance: i,
            q: space.q(),
            l: space.l(),
            dim: space.dim(),
            gamma: g.angle,
            top_eigenvalue: g.top_eigenvalue,
            bruteforce: brute,
            difference: brute - g.angle,
            witness: join(g.witness_w.iter().copied()),
        })
    };
    let rows: Vec<GammaRow> = match &c.space {
        Some(source) => {
            let space = source.load()?;
            let v = c.direction.as_ref().ok_or_else(|| {
                Error::InvalidParameter("a direction is required with a subspace".into())
            })?;
            vec![instance(0, &space, &DVector::from_column_slice(v))?]
        }
        None => (0..c.instances)
            .into_par_iter()
            .map(|i| {
                let mut rng = stream_rng(c.seed, i as u64);
                let q = [3, 4, 5][rng.gen_range(0..3)];
                let l = [2, 3, 4][rng.gen_range(0..3)];
                let dim = rng.gen_range(1..=(q - 1) * l);
                let gens: Vec<_> = (0..dim)
                    .map(|_| row_centred(gaussian_matrix(&mut rng, l, q)))
                    .collect();
                let space = ConstraintSpace::from_spanning_set(q, l, &gens)?;
                let v = gaussian_vector(&mut rng, l);
                instance(i, &space, &v)
            })
            .collect::<Result<_>>()?,
    };
    let checked = c.samples > 0;
    let violations = if checked {
        rows.iter()
            .filter(|r| r.difference.abs() > c.agreement || r.gamma > r.bruteforce + 1e-9)
            .count()
    } else {
        0
    };
    let max_difference = rows.iter().map(|r| r.difference.abs()).fold(0.0, f64::max);
    let min_difference = rows
        .iter()
        .map(|r| r.difference)
        .fold(f64::INFINITY, f64::min);
    let summary = if rows.len() == 1 && c.space.is_some() {
        json!({
            "angle": rows[0].gamma,
            "top_eigenvalue": rows[0].top_eigenvalue,
            "bruteforce": rows[0].bruteforce,
            "witness": rows[0].witness,
            "violations": violations,
        })
    } else {
        json!({
            "instances": rows.len(),
            "max_abs_difference": max_difference,
            "min_difference": min_difference,
            "violations": violations,
        })
    };
    Ok(ExperimentOutput {
        experiment: "gamma",
        artifacts: vec![csv_artifact("gamma.csv", &rows)?],
        summary,
        violations,
    })
}

/// Wave-cone membership of a direction, or repeated searches for wave-cone
/// directions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WaveconeConfig {
    pub space: SpaceSource,
    pub direction: Option<Vec<f64>>,
    pub tolerance: f64,
    pub searches: usize,
    pub max_iter: usize,
    pub seed: u64,
}

impl Default for WaveconeConfig {
    fn default() -> Self {
        WaveconeConfig {
            space: SpaceSource::Bv { m: 2 },
            direction: None,
            tolerance: 1e-6,
            searches: 10,
            max_iter: 1000,
            seed: 1,
        }
    }
}

#[derive(Serialize)]
struct WaveconeRow {
    search: usize,
    angle: f64,
    top_eigenvalue: f64,
    member: bool,
    direction: String,
    witness: String,
}

pub(crate) fn run_wavecone(c: &WaveconeConfig) -> Result<ExperimentOutput> {
    let space = c.space.load()?;
    let rows: Vec<WaveconeRow> = match &c.direction {
        Some(v) => {
            let v = DVector::from_column_slice(v);
            let g = space.gamma(&v)?;
            let m = space.wave_cone_member(&v, c.tolerance)?;
            vec![WaveconeRow {
                search: 0,
                angle: g.angle,
                top_eigenvalue: g.top_eigenvalue,
                member: m.member,
                direction: join(v.iter().copied()),
                witness: join(g.witness_w.iter().copied()),
            }]
        }
        None => (0..c.searches)
            .into_par_iter()
            .map(|i| {
                let (v, g) = space.search_wave_cone(derive_seed(c.seed, i as u64), c.max_iter)?;
                Ok(WaveconeRow {
                    search: i,
                    angle: g.angle,
                    top_eigenvalue: g.top_eigenvalue,
                    member: !g.degenerate && g.angle <= c.tolerance,
                    direction: join(v.iter().copied()),
                    witness: join(g.witness_w.iter().copied()),
                })
            })
            .collect::<Result<_>>()?,
    };
    let members = rows.iter().filter(|r| r.member).count();
    Ok(ExperimentOutput {
        experiment: "wavecone",
        summary: json!({
            "dim": space.dim(),
            "rows": rows.len(),
            "members": members,
            "min_angle": rows.iter().map(|r| r.angle).fold(f64::INFINITY, f64::min),
        }),
        artifacts: vec![csv_artifact("wavecone.csv", &rows)?],
        violations: 0,
    })
}

/// Random `ε`-flat atoms tested against the orthogonal-increment bound.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Lemma1Config {
    pub q: usize,
    pub l: usize,
    pub eps: Vec<f64>,
    pub trials: usize,
    pub seed: u64,
}

impl Default for Lemma1Config {
    fn default() -> Self {
        Lemma1Config {
            q: 3,
            l: 2,
            eps: vec![1e-4, 1e-3, 1e-2],
            trials: 10_000,
            seed: 1,
        }
    }
}

#[derive(Serialize)]
struct Lemma1Row {
    eps: f64,
    trial: usize,
    excess: f64,
    bound: f64,
    max_orth: f64,
    holds: bool,
}

/// Random `(a, D)` with `D` rescaled to sit just inside the `ε`-flat region,
/// or at a uniform fraction of that scale.
fn flat_atom<R: Rng>(
    rng: &mut R,
    q: usize,
    l: usize,
    eps: f64,
) -> Option<(DVector<f64>, DifferenceMatrix)> {
    let a = gaussian_vector(rng, l);
    let d = row_centred(gaussian_matrix(rng, l, q));
    let target = eps * a.norm();
    let at = |s: f64| excess(&a, &DifferenceMatrix::from_raw(&d * s));
    let mut hi = 1.0;
    let mut doublings = 0;
    while at(hi) < target {
        hi *= 2.0;
        doublings += 1;
        if doublings > 200 {
            return None;
        }
    }
    let mut lo = 0.0;
    for _ in 0..80 {
        let mid = 0.5 * (lo + hi);
        if at(mid) < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let s = if rng.gen_bool(0.5) {
        lo
    } else {
        lo * (1.0 - rng.gen::<f64>())
    };
    Some((a, DifferenceMatrix::from_raw(d * s)))
}

pub(crate) fn run_lemma1(c: &Lemma1Config) -> Result<ExperimentOutput> {
    if c.q < 2 || c.l == 0 {
        return Err(Error::InvalidParameter("need q ≥ 2 and l ≥ 1".into()));
    }
    let mut rows = Vec::with_capacity(c.eps.len() * c.trials);
    let mut per_eps = Vec::new();
    for (e, &eps) in c.eps.iter().enumerate() {
        if !(eps > 0.0 && eps < 1.0) {
            return Err(Error::InvalidParameter(format!(
                "eps = {eps} must lie in (0, 1)"
            )));
        }
        let block: Vec<Lemma1Row> = (0..c.trials)
            .into_par_iter()
            .map(|t| {
                let mut rng = stream_rng(c.seed, ((e as u64) << 32) + t as u64);
                loop {
                    if let Some((a, d)) = flat_atom(&mut rng, c.q, c.l, eps) {
                        let out = lemma1_check(&a, &d, eps)?;
                        return Ok(Lemma1Row {
                            eps,
                            trial: t,
                            excess: out.excess,
                            bound: out.bound,
                            max_orth: out.max_orth,
                            holds: out.holds,
                        });
                    }
                }
            })
            .collect::<Result<_>>()?;
        let worst = block
            .iter()
            .map(|r| r.max_orth / r.bound)
            .fold(0.0, f64::max);
        let failed = block.iter().filter(|r| !r.holds).count();
        per_eps.push(json!({"eps": eps, "violations": failed, "max_ratio": worst}));
        rows.extend(block);
    }
    let violations = rows.iter().filter(|r| !r.holds).count();
    Ok(ExperimentOutput {
        experiment: "lemma1",
        artifacts: vec![csv_artifact("lemma1.csv", &rows)?],
        summary: json!({"trials": rows.len(), "violations": violations, "per_eps": per_eps}),
        violations,
    })
}

/// Critical-exponent estimation over an `(η, δ)` grid with validation on
/// independent draws.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Lemma2Config {
    pub q: usize,
    pub l: usize,
    pub etas: Vec<f64>,
    pub deltas: Vec<f64>,
    pub trials: usize,
    pub seeds: Vec<u64>,
    pub margin: f64,
    /// Allowed deviation of each seed's estimate from the mean over seeds.
    pub stability: f64,
    pub radial_tolerance: f64,
}

impl Default for Lemma2Config {
    fn default() -> Self {
        Lemma2Config {
            q: 3,
            l: 2,
            etas: vec![FRAC_PI_6, FRAC_PI_4, FRAC_PI_3],
            deltas: vec![0.01, 0.05, 0.1],
            trials: 10_000,
            seeds: vec![1, 2, 3, 4, 5],
            margin: P_MARGIN,
            stability: 0.02,
            radial_tolerance: 1e-10,
        }
    }
}

#[derive(Serialize)]
struct Lemma2Row {
    eta: f64,
    delta: f64,
    seed: u64,
    p0: f64,
    worst_trial: usize,
    test_p: f64,
    min_validation_margin: f64,
    p_inequality_failures: usize,
    radial_failures: usize,
    taylor_constant: f64,
}

#[derive(Serialize)]
struct Lemma2Group {
    eta: f64,
    delta: f64,
    p0_mean: f64,
    p0_min: f64,
    p0_max: f64,
    stable: bool,
    below_one: bool,
}

pub(crate) fn run_lemma2(c: &Lemma2Config) -> Result<ExperimentOutput> {
    if c.seeds.is_empty() || c.trials == 0 {
        return Err(Error::InvalidParameter(
            "need at least one seed and one trial".into(),
        ));
    }
    let mut rows = Vec::new();
    let mut groups = Vec::new();
    for &eta in &c.etas {
        for &delta in &c.deltas {
            let sampler = Lemma2Sampler::new(c.q, c.l, eta, delta)?;
            let mut estimates = Vec::new();
            for &seed in &c.seeds {
                let fitted = sample_lemma2_configurations(&sampler, c.trials, seed)?;
                let fresh = sample_lemma2_configurations(
                    &sampler,
                    c.trials,
                    derive_seed(seed, VALIDATION_STREAM),
                )?;
                let criticals: Vec<f64> = fitted
                    .par_iter()
                    .map(|s| critical_exponent(&s.a, &s.d))
                    .collect::<Result<_>>()?;
                let (worst_trial, &p0) = criticals
                    .iter()
                    .enumerate()
                    .max_by(|x, y| x.1.total_cmp(y.1))
                    .expect("trials > 0");
                let test_p = (p0 + c.margin).min(1.0);
                let margins: Vec<f64> = fresh
                    .par_iter()
                    .map(|s| p_inequality_margin(&s.a, &s.d, test_p))
                    .collect::<Result<_>>()?;
                let radial_failures = fitted
                    .iter()
                    .chain(&fresh)
                    .map(|s| radial_bound_holds(&s.a, &s.d, eta, c.radial_tolerance))
                    .collect::<Result<Vec<bool>>>()?
                    .into_iter()
                    .filter(|ok| !ok)
                    .count();
                let taylor_constant = fitted
                    .par_iter()
                    .map(|s| {
                        let size: f64 = s.d.columns().map(|col| col.norm()).sum();
                        let small = DifferenceMatrix::from_raw(s.d.entries() * (1e-3 / size));
                        taylor_remainder(&s.a, &small, test_p).map(|t| t.constant)
                    })
                    .collect::<Result<Vec<f64>>>()?
                    .into_iter()
                    .fold(0.0, f64::max);
                estimates.push(p0);
                rows.push(Lemma2Row {
                    eta,
                    delta,
                    seed,
                    p0,
                    worst_trial,
                    test_p,
                    min_validation_margin: margins.iter().copied().fold(f64::INFINITY, f64::min),
                    p_inequality_failures: margins.iter().filter(|&&m| m < 0.0).count(),
                    radial_failures,
                    taylor_constant,
                });
            }
            let mean = estimates.iter().sum::<f64>() / estimates.len() as f64;
            let (min, max) = estimates
                .iter()
                .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &p| {
                    (lo.min(p), hi.max(p))
                });
            groups.push(Lemma2Group {
                eta,
                delta,
                p0_mean: mean,
                p0_min: min,
                p0_max: max,
                stable: estimates.iter().all(|p| (p - mean).abs() <= c.stability),
                below_one: max < 1.0,
            });
        }
    }
    let p_ineq = rows.iter().map(|r| r.p_inequality_failures).sum::<usize>();
    let radial = rows.iter().map(|r| r.radial_failures).sum::<usize>();
    let unstable = groups.iter().filter(|g| !g.stable || !g.below_one).count();
    let summary = json!({
        "p_inequality_failures": p_ineq,
        "radial_failures": radial,
        "unstable_groups": unstable,
        "max_taylor_constant": rows.iter().map(|r| r.taylor_constant).fold(0.0, f64::max),
        "p0": groups.iter().map(|g| json!({"eta": g.eta, "delta": g.delta, "mean": g.p0_mean, "min": g.p0_min, "max": g.p0_max})).collect::<Vec<_>>(),
    });
    Ok(ExperimentOutput {
        experiment: "lemma2",
        artifacts: vec![
            csv_artifact("lemma2.csv", &rows)?,
            csv_artifact("lemma2_groups.csv", &groups)?,
        ],
        summary,
        violations: p_ineq + radial + unstable,
    })
}

/// The `p`-submartingale inequality and the Doob profile on measures whose
/// atoms satisfy the hypotheses of the `p`-inequality.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SubmartingaleConfig {
    pub q: usize,
    pub l: usize,
    pub depth: usize,
    pub eta: f64,
    pub delta: f64,
    pub seed: u64,
    /// Independent measures; the Doob table reports their mean profile.
    pub realizations: usize,
    /// Exponent to test; estimated as `p₀ + margin` when absent.
    pub p: Option<f64>,
    pub p0_trials: usize,
    pub margin: f64,
    /// Measure to check instead of building compliant ones.
    pub measure: Option<PathBuf>,
}

impl Default for SubmartingaleConfig {
    fn default() -> Self {
        SubmartingaleConfig {
            q: 3,
            l: 2,
            depth: 8,
            eta: FRAC_PI_4,
            delta: 0.05,
            seed: 1,
            realizations: 1,
            p: None,
            p0_trials: 10_000,
            margin: P_MARGIN,
            measure: None,
        }
    }
}

#[derive(Serialize)]
struct AtomRow {
    realization: usize,
    depth: usize,
    index: usize,
    address: String,
    deficit: f64,
    violation: bool,
}

#[derive(Serialize)]
struct DoobTableRow {
    depth: usize,
    l1_mean: f64,
    l1_min: f64,
    l1_max: f64,
    sup_max: f64,
    increment: f64,
}

pub(crate) fn run_submartingale(c: &SubmartingaleConfig) -> Result<ExperimentOutput> {
    let measures: Vec<TruncatedMeasure> = match &c.measure {
        Some(path) => vec![TruncatedMeasure::load(path)?],
        None => {
            if c.realizations == 0 {
                return Err(Error::InvalidParameter(
                    "at least one realization is required".into(),
                ));
            }
            let space = ConstraintSpace::full(c.q, c.l);
            (0..c.realizations)
                .map(|r| {
                    compliant_w_measure(
                        &space,
                        c.depth,
                        c.eta,
                        c.delta,
                        derive_seed(c.seed, r as u64),
                    )
                })
                .collect::<Result<_>>()?
        }
    };
    let shape = measures[0].shape();
    let (p, p0) = match c.p {
        Some(p) => (p, None),
        None => {
            let sampler = Lemma2Sampler::new(shape.q, shape.l, c.eta, c.delta)?;
            let est = estimate_p0(&sampler, c.p0_trials, c.seed)?;
            ((est.p0 + c.margin).min(1.0), Some(est.p0))
        }
    };
    let mut atoms = Vec::new();
    let mut region_sizes = Vec::new();
    let mut max_deficit = f64::NEG_INFINITY;
    for (r, m) in measures.iter().enumerate() {
        let region = lemma2_region(m, c.eta, c.delta);
        let report = submartingale_check(m, p, &region)?;
        region_sizes.push(region.len());
        max_deficit = max_deficit.max(report.max_deficit);
        let violating: std::collections::HashSet<_> =
            report.violations.iter().map(|v| v.0).collect();
        if r == 0 {
            for atom in &region {
                let q = shape.q;
                let parent = m.value_at(*atom).norm();
                let sons: f64 = (0..q)
                    .map(|j| m.value_at(atom.child(q, j)).norm().powf(p))
                    .sum::<f64>()
                    / q as f64;
                atoms.push(AtomRow {
                    realization: r,
                    depth: atom.depth,
                    index: atom.index,
                    address: atom.address(q).to_string(),
                    deficit: 1.0 - sons / parent.powf(p),
                    violation: violating.contains(atom),
                });
            }
        } else {
            for (atom, deficit) in &report.violations {
                atoms.push(AtomRow {
                    realization: r,
                    depth: atom.depth,
                    index: atom.index,
                    address: atom.address(shape.q).to_string(),
                    deficit: *deficit,
                    violation: true,
                });
            }
        }
    }
    let violations = atoms.iter().filter(|a| a.violation).count();

    let profiles: Vec<Vec<f64>> = measures
        .iter()
        .map(|m| doob_maximal_profile(m).iter().map(|r| r.l1).collect())
        .collect();
    let sups: Vec<Vec<f64>> = measures
        .iter()
        .map(|m| doob_maximal_profile(m).iter().map(|r| r.sup).collect())
        .collect();
    let depth = shape.depth;
    let mean: Vec<f64> = (0..=depth)
        .map(|n| profiles.iter().map(|p| p[n]).sum::<f64>() / profiles.len() as f64)
        .collect();
    let doob: Vec<DoobTableRow> = (0..=depth)
        .map(|n| DoobTableRow {
            depth: n,
            l1_mean: mean[n],
            l1_min: profiles.iter().map(|p| p[n]).fold(f64::INFINITY, f64::min),
            l1_max: profiles
                .iter()
                .map(|p| p[n])
                .fold(f64::NEG_INFINITY, f64::max),
            sup_max: sups.iter().map(|s| s[n]).fold(f64::NEG_INFINITY, f64::max),
            increment: if n == 0 { 0.0 } else { mean[n] - mean[n - 1] },
        })
        .collect();
    let bound = doob
        .iter()
        .map(|r| r.l1_max)
        .fold(f64::NEG_INFINITY, f64::max);
    let nonincreasing = doob
        .windows(2)
        .filter(|w| w[0].depth >= 4)
        .all(|w| w[1].increment <= w[0].increment);
    Ok(ExperimentOutput {
        experiment: "submartingale",
        summary: json!({
            "p": p,
            "p0": p0,
            "region_sizes": region_sizes,
            "violations": violations,
            "max_deficit": max_deficit,
            "doob_bound": bound,
            "doob_increments_nonincreasing_after_3": nonincreasing,
        }),
        artifacts: vec![
            csv_artifact("submartingale_atoms.csv", &atoms)?,
            csv_artifact("doob_profile.csv", &doob)?,
        ],
        violations,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flat_atoms_sit_below_the_threshold() {
        let mut rng = stream_rng(3, 0);
        for _ in 0..200 {
            let (a, d) = flat_atom(&mut rng, 4, 3, 1e-3).unwrap();
            let e = excess(&a, &d);
            assert!(e < 1e-3 * a.norm());
        }
    }

    #[test]
    fn small_runs_are_deterministic() {
        let c = Lemma1Config {
            trials: 50,
            ..Default::default()
        };
        let a = run_lemma1(&c).unwrap();
        let b = run_lemma1(&c).unwrap();
        assert_eq!(a.artifacts, b.artifacts);
        assert_eq!(a.violations, 0);
        assert!(a.artifacts[0]
            .contents
            .starts_with("eps,trial,excess,bound,max_orth,holds\n"));
    }

    #[test]
    fn gamma_single_direction() {
        let c = GammaConfig {
            space: Some(SpaceSource::Full { q: 3, l: 2 }),
            direction: Some(vec![1.0, 0.0]),
            samples: 1000,
            ..Default::default()
        };
        let out = run_gamma(&c).unwrap();
        assert!(out.summary["angle"].as_f64().unwrap() < 1e-12);
        let missing = GammaConfig {
            direction: None,
            ..c
        };
        assert!(run_gamma(&missing).is_err());
    }
}
