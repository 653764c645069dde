use nalgebra::DVector;
use num_complex::Complex64;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::json;
use std::collections::BTreeMap;

use super::{csv_artifact, join, Artifact, ExperimentOutput, SpaceSource};
use crate::atoms::{
    doob_maximal_profile, estimate_p0, leaf_report, lemma2_region, submartingale_check,
    Lemma2Sampler, P_MARGIN,
};
use crate::builders::{
    adversarial_concentration, cascade_measure, concentrating_profile, mixture, random_w_measure,
    AdversarialOptions, CascadeSpec,
};
use crate::error::{Error, Result};
use crate::fourier::{
    bv_generator, bv_space, bv_wave_cone_sample, fourier_membership, rank_one_check, BVElement,
    FrequencySymbol, TorusFunction, FOURIER_TOLERANCE,
};
use crate::rng::{derive_seed, gaussian_matrix, gaussian_vector, stream_rng};
use crate::space::ConstraintSpace;
use crate::tree::{AtomId, TruncatedMeasure};

fn complex_gaussian<R: Rng>(rng: &mut R) -> Complex64 {
    let z = gaussian_vector(rng, 2);
    Complex64::new(z[0], z[1])
}

/// Largest relative residual of the difference matrices against `W`.
fn max_residual(space: &ConstraintSpace, m: &TruncatedMeasure) -> Result<f64> {
    let atoms: Vec<AtomId> = m.internal_atoms().collect();
    let residuals: Vec<f64> = atoms
        .par_iter()
        .map(|&a| space.relative_residual(m.difference_at(a).entries()))
        .collect::<Result<_>>()?;
    Ok(residuals.into_iter().fold(0.0, f64::max))
}

/// Angle between the lines through `a` and `b`.
fn line_angle(a: &DVector<f64>, b: &DVector<f64>) -> f64 {
    let a = a.normalize();
    let b = b.normalize();
    let b = if a.dot(&b) < 0.0 { -b } else { b };
    2.0 * (&a - &b).norm().atan2((&a + &b).norm())
}

/// A single cascade with its concentration diagnostics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CascadeConfig {
    pub space: SpaceSource,
    pub cascade: CascadeSpec,
    pub save_measure: bool,
}

impl Default for CascadeConfig {
    fn default() -> Self {
        CascadeConfig {
            space: SpaceSource::Full { q: 3, l: 2 },
            cascade: CascadeSpec::new(vec![1.0, 0.0], vec![1.0, -0.5, -0.5], 8),
            save_measure: false,
        }
    }
}

#[derive(Serialize)]
struct CascadeRow {
    depth: usize,
    heavy_index: usize,
    heavy_address: String,
    heavy_mass: f64,
    concentration_ratio: f64,
    polar_angle: f64,
    doob_l1: f64,
    doob_sup: f64,
}

pub(crate) fn run_cascade(c: &CascadeConfig) -> Result<ExperimentOutput> {
    let space = c.space.load()?;
    let m = cascade_measure(&c.cascade, &space)?;
    let v = DVector::from_column_slice(&c.cascade.direction);
    let q = space.q();
    let doob = doob_maximal_profile(&m);
    let rows: Vec<CascadeRow> = (0..=c.cascade.depth)
        .map(|n| {
            let (atom, mass) = m.heaviest_atom(n)?;
            Ok(CascadeRow {
                depth: n,
                heavy_index: atom.index,
                heavy_address: atom.address(q).to_string(),
                heavy_mass: mass,
                concentration_ratio: m.concentration_ratio(n)?,
                polar_angle: line_angle(&m.polar_at(atom)?, &v),
                doob_l1: doob[n].l1,
                doob_sup: doob[n].sup,
            })
        })
        .collect::<Result<_>>()?;
    let residual = max_residual(&space, &m)?;
    let monotone = rows
        .windows(2)
        .all(|w| w[1].concentration_ratio > w[0].concentration_ratio);
    let mut artifacts = vec![csv_artifact("cascade.csv", &rows)?];
    if c.save_measure {
        artifacts.push(Artifact {
            file_name: "measure.json".into(),
            contents: m.to_json()?,
        });
    }
    let violations = usize::from(residual > crate::builders::CASCADE_TOLERANCE);
    Ok(ExperimentOutput {
        experiment: "cascade",
        summary: json!({
            "max_residual": residual,
            "final_ratio": rows.last().map(|r| r.concentration_ratio),
            "ratio_strictly_increasing": monotone,
            "max_polar_angle": rows.iter().map(|r| r.polar_angle).fold(0.0, f64::max),
        }),
        artifacts,
        violations,
    })
}

/// Cascades along sampled wave-cone directions of the BV space, alone and
/// mixed with an absolutely continuous background.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TheoremDemoConfig {
    pub m: usize,
    pub cascades: usize,
    pub depth: usize,
    pub seed: u64,
    /// Weight of the cascade in the mixture.
    pub mixture_weight: f64,
    /// Scale of the random background measure.
    pub background_scale: f64,
    pub eps: f64,
    pub residual_tolerance: f64,
    pub gamma_tolerance: f64,
}

impl Default for TheoremDemoConfig {
    fn default() -> Self {
        TheoremDemoConfig {
            m: 2,
            cascades: 10,
            depth: 8,
            seed: 1,
            mixture_weight: 0.5,
            background_scale: 0.05,
            eps: 0.1,
            residual_tolerance: 1e-10,
            gamma_tolerance: 1e-8,
        }
    }
}

#[derive(Serialize)]
struct DemoLevelRow {
    run: usize,
    depth: usize,
    heavy_index: usize,
    concentration_ratio: f64,
    lower_bound: f64,
    cascade_gamma: f64,
    mixture_gamma: f64,
    mixture_polar_angle: f64,
}

#[derive(Serialize)]
struct DemoRunRow {
    run: usize,
    gamma1: usize,
    gamma2: usize,
    direction_gamma: f64,
    profile: String,
    cascade_residual: f64,
    mixture_residual: f64,
    captured_mass: f64,
    total_mass: f64,
    ratio_monotone: bool,
    passed: bool,
}

pub(crate) fn run_theorem_demo(c: &TheoremDemoConfig) -> Result<ExperimentOutput> {
    let space = bv_space(c.m)?;
    let freqs = FrequencySymbol::all(c.m);
    let mut runs = Vec::with_capacity(c.cascades);
    let mut levels = Vec::new();
    for run in 0..c.cascades {
        let mut rng = stream_rng(c.seed, run as u64);
        let freq = freqs[rng.gen_range(0..freqs.len())];
        let sample =
            bv_wave_cone_sample(freq, complex_gaussian(&mut rng), complex_gaussian(&mut rng))?;
        let v = sample.to_real().normalize();
        let g = space.gamma(&v)?;
        let profile = concentrating_profile(&g.witness_w)?;
        let spec = CascadeSpec::new(
            v.iter().copied().collect(),
            profile.iter().copied().collect(),
            c.depth,
        );
        let cascade = cascade_measure(&spec, &space)?;
        let background = random_w_measure(
            &space,
            c.depth,
            c.background_scale,
            derive_seed(c.seed, 1 << 32 | run as u64),
        )?;
        let mix = mixture(
            &[&background, &cascade],
            &[1.0 - c.mixture_weight, c.mixture_weight],
        )?;

        let mut ratios = Vec::with_capacity(c.depth + 1);
        let mut ok = true;
        for n in 0..=c.depth {
            let (atom, _) = cascade.heaviest_atom(n)?;
            let ratio = cascade.concentration_ratio(n)?;
            let lower_bound = 2f64.powi(n as i32);
            let cascade_gamma = space.gamma(&cascade.polar_at(atom)?)?.angle;
            let mix_polar = mix.polar_at(atom)?;
            ok &= ratio >= lower_bound * (1.0 - 1e-12) && cascade_gamma <= c.gamma_tolerance;
            ratios.push(ratio);
            levels.push(DemoLevelRow {
                run,
                depth: n,
                heavy_index: atom.index,
                concentration_ratio: ratio,
                lower_bound,
                cascade_gamma,
                mixture_gamma: space.gamma(&mix_polar)?.angle,
                mixture_polar_angle: line_angle(&mix_polar, &v),
            });
        }
        let monotone = ratios.windows(2).all(|w| w[1] > w[0]);
        let cascade_residual = max_residual(&space, &cascade)?;
        let mixture_residual = max_residual(&space, &mix)?;
        let leaves = leaf_report(&mix, c.eps, 0)?;
        ok &= monotone
            && cascade_residual <= c.residual_tolerance
            && mixture_residual <= c.residual_tolerance;
        runs.push(DemoRunRow {
            run,
            gamma1: freq.gamma.0,
            gamma2: freq.gamma.1,
            direction_gamma: g.angle,
            profile: join(profile.iter().copied()),
            cascade_residual,
            mixture_residual,
            captured_mass: leaves.captured_mass,
            total_mass: leaves.total_mass,
            ratio_monotone: monotone,
            passed: ok,
        });
    }
    let failed = runs.iter().filter(|r| !r.passed).count();
    let final_levels: Vec<&DemoLevelRow> = levels.iter().filter(|l| l.depth == c.depth).collect();
    Ok(ExperimentOutput {
        experiment: "theorem-demo",
        summary: json!({
            "runs": runs.len(),
            "failed_runs": failed,
            "max_cascade_residual": runs.iter().map(|r| r.cascade_residual).fold(0.0, f64::max),
            "max_cascade_gamma": levels.iter().map(|l| l.cascade_gamma).fold(0.0, f64::max),
            "max_final_mixture_gamma": final_levels.iter().map(|l| l.mixture_gamma).fold(0.0, f64::max),
            "min_final_ratio": final_levels.iter().map(|l| l.concentration_ratio).fold(f64::INFINITY, f64::min),
        }),
        artifacts: vec![
            csv_artifact("theorem_runs.csv", &runs)?,
            csv_artifact("theorem_levels.csv", &levels)?,
        ],
        violations: failed,
    })
}

/// The BV space: dimension, the two membership tests, and the rank-one
/// structure of its wave cone.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BvDemoConfig {
    pub m: usize,
    /// Eigensolver-certified wave-cone directions to test for rank one.
    pub certified: usize,
    /// Symbol samples `s(γ) ⊗ (a, b)` to test for membership.
    pub symbol_samples: usize,
    pub membership_trials: usize,
    pub rank_tolerance: f64,
    pub gamma_tolerance: f64,
    pub max_iter: usize,
    pub seed: u64,
}

impl Default for BvDemoConfig {
    fn default() -> Self {
        BvDemoConfig {
            m: 2,
            certified: 500,
            symbol_samples: 500,
            membership_trials: 1000,
            rank_tolerance: 1e-6,
            gamma_tolerance: 1e-8,
            max_iter: 1000,
            seed: 1,
        }
    }
}

/// A search counts as certified when the top eigenvalue reaches `1 - 1e-10`.
const CERTIFICATE: f64 = 1.0 - 1e-10;
const SEARCH_ATTEMPTS: u64 = 8;

#[derive(Serialize)]
struct CertifiedRow {
    index: usize,
    attempts: u64,
    certified: bool,
    angle: f64,
    top_eigenvalue: f64,
    det_ratio: f64,
    nearest_gamma1: usize,
    nearest_gamma2: usize,
    symbol_residual: f64,
    rank_one: bool,
}

#[derive(Serialize)]
struct SymbolRow {
    index: usize,
    gamma1: usize,
    gamma2: usize,
    self_conjugate: bool,
    angle: f64,
    passed: bool,
}

#[derive(Serialize)]
struct FrequencyRow {
    gamma1: usize,
    gamma2: usize,
    self_conjugate: bool,
    samples: usize,
    passed: usize,
    max_angle: f64,
}

#[derive(Serialize)]
struct MembershipRow {
    index: usize,
    generated: bool,
    fourier_member: bool,
    projection_member: bool,
    fourier_residual: f64,
    projection_residual: f64,
    agree: bool,
}

pub(crate) fn run_bv_demo(c: &BvDemoConfig) -> Result<ExperimentOutput> {
    if c.m < 2 {
        return Err(Error::InvalidParameter(format!(
            "m = {} must be at least 2",
            c.m
        )));
    }
    let space = bv_space(c.m)?;
    let q = c.m * c.m;
    let expected_dim = 4 * q - 4;
    let freqs = FrequencySymbol::all(c.m);

    let certified: Vec<CertifiedRow> = (0..c.certified)
        .into_par_iter()
        .map(|i| {
            let mut last = None;
            for k in 0..SEARCH_ATTEMPTS {
                let seed = derive_seed(c.seed, i as u64 * SEARCH_ATTEMPTS + k);
                let (v, g) = space.search_wave_cone(seed, c.max_iter)?;
                let done = g.top_eigenvalue >= CERTIFICATE;
                last = Some((k + 1, v, g));
                if done {
                    break;
                }
            }
            let (attempts, v, g) = last.expect("at least one attempt");
            let element = BVElement::from_real(v.as_slice())?;
            let h = element.entries;
            let scale = element.norm().powi(2);
            let (nearest, residual) = freqs
                .iter()
                .map(|f| (f.gamma, f.omega_residual_sqr(&h) / scale))
                .min_by(|x, y| x.1.total_cmp(&y.1))
                .expect("m ≥ 2 has nonzero frequencies");
            let is_certified = g.top_eigenvalue >= CERTIFICATE;
            Ok(CertifiedRow {
                index: i,
                attempts,
                certified: is_certified,
                angle: g.angle,
                top_eigenvalue: g.top_eigenvalue,
                det_ratio: element.det().norm() / (scale / 2.0),
                nearest_gamma1: nearest.0,
                nearest_gamma2: nearest.1,
                symbol_residual: residual.sqrt(),
                rank_one: is_certified && rank_one_check(&element, c.rank_tolerance),
            })
        })
        .collect::<Result<_>>()?;

    let symbols: Vec<SymbolRow> = (0..c.symbol_samples)
        .into_par_iter()
        .map(|i| {
            let mut rng = stream_rng(c.seed, (1 << 32) + i as u64);
            let freq = freqs[rng.gen_range(0..freqs.len())];
            let sample =
                bv_wave_cone_sample(freq, complex_gaussian(&mut rng), complex_gaussian(&mut rng))?;
            let angle = space.gamma(&sample.to_real())?.angle;
            Ok(SymbolRow {
                index: i,
                gamma1: freq.gamma.0,
                gamma2: freq.gamma.1,
                self_conjugate: freq.is_self_conjugate(),
                angle,
                passed: angle <= c.gamma_tolerance,
            })
        })
        .collect::<Result<_>>()?;

    let mut by_freq: BTreeMap<(usize, usize), FrequencyRow> = freqs
        .iter()
        .map(|f| {
            (
                f.gamma,
                FrequencyRow {
                    gamma1: f.gamma.0,
                    gamma2: f.gamma.1,
                    self_conjugate: f.is_self_conjugate(),
                    samples: 0,
                    passed: 0,
                    max_angle: 0.0,
                },
            )
        })
        .collect();
    for s in &symbols {
        let row = by_freq
            .get_mut(&(s.gamma1, s.gamma2))
            .expect("sampled from the list");
        row.samples += 1;
        row.passed += usize::from(s.passed);
        row.max_angle = row.max_angle.max(s.angle);
    }
    let frequencies: Vec<FrequencyRow> = by_freq.into_values().collect();

    let membership: Vec<MembershipRow> = (0..c.membership_trials)
        .into_par_iter()
        .map(|i| {
            let mut rng = stream_rng(c.seed, (2 << 32) + i as u64);
            let generated = i % 2 == 0;
            let d = if generated {
                let f = TorusFunction::from_fn(c.m, |_, _| complex_gaussian(&mut rng))?;
                let g = TorusFunction::from_fn(c.m, |_, _| complex_gaussian(&mut rng))?;
                bv_generator(&f, &g)?
            } else {
                let mut d = gaussian_matrix(&mut rng, 8, q);
                for mut row in d.row_iter_mut() {
                    let mean = row.mean();
                    row.add_scalar_mut(-mean);
                }
                d
            };
            let fm = fourier_membership(c.m, &d)?;
            let p = space.project(&d)?;
            let pm = p.residual_norm <= FOURIER_TOLERANCE * d.norm();
            Ok(MembershipRow {
                index: i,
                generated,
                fourier_member: fm.member,
                projection_member: pm,
                fourier_residual: fm.residual,
                projection_residual: p.residual_norm,
                agree: fm.member == pm,
            })
        })
        .collect::<Result<_>>()?;

    let rank_one_failures = certified.iter().filter(|r| !r.rank_one).count();
    let symbol_failures = symbols.iter().filter(|s| !s.passed).count();
    let disagreements = membership.iter().filter(|r| !r.agree).count();
    let generated_rejected = membership
        .iter()
        .filter(|r| r.generated && !r.fourier_member)
        .count();
    let dim_ok = space.dim() == expected_dim;
    let failing: Vec<(usize, usize)> = frequencies
        .iter()
        .filter(|f| f.passed < f.samples)
        .map(|f| (f.gamma1, f.gamma2))
        .collect();
    let summary = json!({
        "m": c.m,
        "dim": space.dim(),
        "expected_dim": expected_dim,
        "certified_rank_one": certified.len() - rank_one_failures,
        "certified_total": certified.len(),
        "max_det_ratio": certified.iter().map(|r| r.det_ratio).fold(0.0, f64::max),
        "max_symbol_residual": certified.iter().map(|r| r.symbol_residual).fold(0.0, f64::max),
        "symbol_passed": symbols.len() - symbol_failures,
        "symbol_total": symbols.len(),
        "max_symbol_angle": symbols.iter().map(|s| s.angle).fold(0.0, f64::max),
        "failing_frequencies": failing,
        "membership_agree": membership.len() - disagreements,
        "membership_total": membership.len(),
        "generated_rejected": generated_rejected,
    });
    Ok(ExperimentOutput {
        experiment: "bv-demo",
        summary,
        artifacts: vec![
            csv_artifact("bv_certified.csv", &certified)?,
            csv_artifact("bv_symbols.csv", &symbols)?,
            csv_artifact("bv_frequencies.csv", &frequencies)?,
            csv_artifact("bv_membership.csv", &membership)?,
        ],
        violations: usize::from(!dim_ok)
            + rank_one_failures
            + symbol_failures
            + disagreements
            + generated_rejected,
    })
}

/// Concentration attempts along directions away from the wave cone of the
/// BV space, with the `p`-submartingale check on budgeted evolutions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdversarialConfig {
    pub m: usize,
    pub directions: usize,
    /// Only directions with `γ ≥ min_gamma` are used.
    pub min_gamma: f64,
    /// The default 9 is the deepest `q = 4` tree under [`super::MAX_LEAVES`].
    pub depth: usize,
    pub seed: u64,
    pub eta: f64,
    pub delta: f64,
    pub p0_trials: usize,
    pub margin: f64,
    /// A run stalls when its ratio stays below this fraction of `qⁿ`.
    pub concentration_fraction: f64,
    /// A run drifts when the heaviest atom's `γ` falls below this.
    pub drift_tolerance: f64,
}

impl Default for AdversarialConfig {
    fn default() -> Self {
        AdversarialConfig {
            m: 2,
            directions: 10,
            min_gamma: 0.3,
            depth: 9,
            seed: 1,
            eta: 0.3,
            delta: 0.05,
            p0_trials: 10_000,
            margin: P_MARGIN,
            concentration_fraction: 0.1,
            drift_tolerance: 1e-2,
        }
    }
}

#[derive(Serialize)]
struct AdversarialRunRow {
    run: usize,
    direction_gamma: f64,
    final_ratio: f64,
    control_ratio: f64,
    ratio_fraction: f64,
    final_gamma: f64,
    final_drift: f64,
    stalled: bool,
    drifted: bool,
    budget_final_ratio: f64,
    region_atoms: usize,
    submartingale_violations: usize,
    max_deficit: f64,
    direction: String,
}

#[derive(Serialize)]
struct AdversarialLevelRow {
    run: usize,
    depth: usize,
    drift_angle: f64,
    gamma: f64,
    concentration_ratio: f64,
    residual_fraction: f64,
    control_ratio: f64,
}

pub(crate) fn run_adversarial(c: &AdversarialConfig) -> Result<ExperimentOutput> {
    let space = bv_space(c.m)?;
    let (q, l) = (space.q(), space.l());
    let sampler = Lemma2Sampler::new(q, l, c.eta, c.delta)?;
    let p0 = estimate_p0(&sampler, c.p0_trials, c.seed)?.p0;
    let p = (p0 + c.margin).min(1.0);

    let mut directions = Vec::with_capacity(c.directions);
    let mut stream = 0u64;
    while directions.len() < c.directions {
        if stream > 1000 * (c.directions as u64 + 1) {
            return Err(Error::SamplingFailed {
                retries: stream as usize,
                reason: format!("too few directions with γ ≥ {}", c.min_gamma),
            });
        }
        let v = gaussian_vector(&mut stream_rng(c.seed, (1 << 32) + stream), l);
        stream += 1;
        let g = space.gamma(&v)?.angle;
        if g >= c.min_gamma {
            directions.push((v.normalize(), g));
        }
    }

    let mut runs = Vec::with_capacity(directions.len());
    let mut levels = Vec::new();
    for (run, (v, g)) in directions.iter().enumerate() {
        let (_, report) =
            adversarial_concentration(&space, v, c.depth, AdversarialOptions::default())?;
        let budget = AdversarialOptions {
            increment_budget: Some(c.delta),
            ..Default::default()
        };
        let (budgeted, budget_report) = adversarial_concentration(&space, v, c.depth, budget)?;
        let region = lemma2_region(&budgeted, c.eta, c.delta);
        let check = submartingale_check(&budgeted, p, &region)?;
        let last = report.last();
        for lv in &report.levels {
            levels.push(AdversarialLevelRow {
                run,
                depth: lv.depth,
                drift_angle: lv.drift_angle,
                gamma: lv.gamma,
                concentration_ratio: lv.concentration_ratio,
                residual_fraction: lv.residual_fraction,
                control_ratio: lv.control_ratio,
            });
        }
        runs.push(AdversarialRunRow {
            run,
            direction_gamma: *g,
            final_ratio: last.concentration_ratio,
            control_ratio: last.control_ratio,
            ratio_fraction: last.concentration_ratio / last.control_ratio,
            final_gamma: last.gamma,
            final_drift: last.drift_angle,
            stalled: last.concentration_ratio < c.concentration_fraction * last.control_ratio,
            drifted: last.gamma <= c.drift_tolerance,
            budget_final_ratio: budget_report.last().concentration_ratio,
            region_atoms: region.len(),
            submartingale_violations: check.violations.len(),
            max_deficit: if region.is_empty() {
                0.0
            } else {
                check.max_deficit
            },
            direction: join(v.iter().copied()),
        });
    }
    let neither = runs.iter().filter(|r| !r.stalled && !r.drifted).count();
    let sub = runs
        .iter()
        .map(|r| r.submartingale_violations)
        .sum::<usize>();
    Ok(ExperimentOutput {
        experiment: "adversarial",
        summary: json!({
            "p0": p0,
            "p": p,
            "runs": runs.len(),
            "stalled": runs.iter().filter(|r| r.stalled).count(),
            "drifted": runs.iter().filter(|r| r.drifted).count(),
            "neither": neither,
            "submartingale_violations": sub,
            "max_ratio_fraction": runs.iter().map(|r| r.ratio_fraction).fold(0.0, f64::max),
            "min_region_atoms": runs.iter().map(|r| r.region_atoms).min(),
        }),
        artifacts: vec![
            csv_artifact("adversarial_runs.csv", &runs)?,
            csv_artifact("adversarial_levels.csv", &levels)?,
        ],
        violations: neither + sub,
    })
}
