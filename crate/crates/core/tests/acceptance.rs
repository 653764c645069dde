//! Acceptance run: one PASS/FAIL line per criterion, non-zero exit on failure.

use std::time::{Duration, Instant};

use wavecone::atoms::doob_maximal_profile;
use wavecone::builders::{cascade_measure, CascadeSpec};
use wavecone::experiments::{
    run, AdversarialConfig, BvDemoConfig, CascadeConfig, ExperimentConfig, ExperimentOutput,
    GammaConfig, Lemma1Config, Lemma2Config, SpaceSource, SubmartingaleConfig, TheoremDemoConfig,
};
use wavecone::space::ConstraintSpace;
use wavecone::tree::{TreeShape, TruncatedMeasure};

/// Bound asserted for the mean Doob profile of compliant measures: with
/// `Σ‖d_j‖ ≤ δ‖F‖` every value stays below `(1 + δ)ⁿ`, which is 1.63 at
/// depth 10 and `δ = 0.05`.
const DOOB_BOUND: f64 = 2.0;

struct Report {
    failures: usize,
    reruns: Vec<(String, ExperimentConfig, ExperimentOutput)>,
}

impl Report {
    fn line(
        &mut self,
        id: &str,
        passed: bool,
        elapsed: Duration,
        limit: Option<Duration>,
        note: &str,
    ) {
        let in_time = limit.is_none_or(|l| elapsed <= l);
        let ok = passed && in_time;
        if !ok {
            self.failures += 1;
        }
        let limit = limit.map_or(String::new(), |l| format!(" / {}s", l.as_secs()));
        let slow = if in_time { "" } else { " over time limit" };
        println!(
            "criterion {id}: {} ({:.1}s{limit}{slow}) {note}",
            if ok { "PASS" } else { "FAIL" },
            elapsed.as_secs_f64()
        );
    }

    fn run(&mut self, label: &str, config: ExperimentConfig) -> (ExperimentOutput, Duration) {
        let start = Instant::now();
        let out = run(&config).unwrap_or_else(|e| panic!("{label}: {e}"));
        let elapsed = start.elapsed();
        self.reruns.push((label.to_string(), config, out.clone()));
        (out, elapsed)
    }
}

fn detail(text: impl AsRef<str>) {
    println!("    {}", text.as_ref());
}

fn column<'a>(csv: &'a str, name: &str) -> Vec<&'a str> {
    let mut lines = csv.lines();
    let header: Vec<&str> = lines.next().unwrap_or("").split(',').collect();
    let k = header
        .iter()
        .position(|h| *h == name)
        .unwrap_or_else(|| panic!("no column {name}"));
    lines.map(|l| l.split(',').nth(k).unwrap()).collect()
}

fn secs(s: u64) -> Option<Duration> {
    Some(Duration::from_secs(s))
}

fn gamma(r: &mut Report) {
    let (out, t) = r.run("gamma", ExperimentConfig::Gamma(GammaConfig::default()));
    detail(format!(
        "{} instances, max |eigen - brute| = {:.3e}, min (brute - eigen) = {:.3e}",
        out.summary["instances"],
        out.summary["max_abs_difference"].as_f64().unwrap(),
        out.summary["min_difference"].as_f64().unwrap()
    ));
    r.line(
        "1",
        out.violations == 0,
        t,
        secs(60),
        &format!("violations {}", out.violations),
    );
}

fn lemma1(r: &mut Report) {
    let (out, t) = r.run("lemma1", ExperimentConfig::Lemma1(Lemma1Config::default()));
    for e in out.summary["per_eps"].as_array().unwrap() {
        detail(format!(
            "eps {}: violations {}, max ratio {:.4}",
            e["eps"],
            e["violations"],
            e["max_ratio"].as_f64().unwrap()
        ));
    }
    r.line(
        "2",
        out.violations == 0,
        t,
        secs(60),
        &format!("violations {}", out.violations),
    );
}

fn lemma2(r: &mut Report) {
    let (out, t) = r.run("lemma2", ExperimentConfig::Lemma2(Lemma2Config::default()));
    for g in out.summary["p0"].as_array().unwrap() {
        detail(format!(
            "eta {:.4} delta {}: p0 mean {:.4} range [{:.4}, {:.4}]",
            g["eta"].as_f64().unwrap(),
            g["delta"],
            g["mean"].as_f64().unwrap(),
            g["min"].as_f64().unwrap(),
            g["max"].as_f64().unwrap()
        ));
    }
    let s = &out.summary;
    let p_ineq = s["p_inequality_failures"].as_u64().unwrap();
    let unstable = s["unstable_groups"].as_u64().unwrap();
    let radial = s["radial_failures"].as_u64().unwrap();
    r.line(
        "3",
        p_ineq == 0 && unstable == 0,
        t,
        secs(300),
        &format!("p-inequality failures {p_ineq}, unstable or p0 >= 1 groups {unstable}"),
    );
    r.line(
        "4",
        radial == 0,
        t,
        secs(300),
        &format!("radial bound failures {radial} (shares the criterion 3 run)"),
    );
}

fn theorem_demo(r: &mut Report) {
    let (out, t) = r.run(
        "theorem-demo",
        ExperimentConfig::TheoremDemo(TheoremDemoConfig::default()),
    );
    let s = &out.summary;
    detail(format!(
        "max residual {:.2e}, max heavy-atom gamma {:.2e}, min final ratio {}",
        s["max_cascade_residual"].as_f64().unwrap(),
        s["max_cascade_gamma"].as_f64().unwrap(),
        s["min_final_ratio"]
    ));
    r.line(
        "5",
        out.violations == 0,
        t,
        secs(120),
        &format!("failed runs {}", s["failed_runs"]),
    );
}

fn adversarial(r: &mut Report) {
    let (out, t) = r.run(
        "adversarial",
        ExperimentConfig::Adversarial(AdversarialConfig {
            depth: 10,
            ..Default::default()
        }),
    );
    let csv = out.artifact("adversarial_runs.csv").unwrap();
    let cols = [
        "direction_gamma",
        "ratio_fraction",
        "final_gamma",
        "stalled",
        "drifted",
        "region_atoms",
        "submartingale_violations",
    ];
    let data: Vec<Vec<&str>> = cols.iter().map(|c| column(csv, c)).collect();
    #[allow(clippy::needless_range_loop)]
    for i in 0..data[0].len() {
        let f = |k: usize| data[k][i].parse::<f64>().unwrap();
        detail(format!(
            "run {i}: gamma(v) {:.3}, ratio/control {:.2e}, final gamma {:.2e}, stalled {}, drifted {}, region {}, violations {}",
            f(0), f(1), f(2), data[3][i], data[4][i], data[5][i], data[6][i]
        ));
    }
    let s = &out.summary;
    r.line(
        "6",
        out.violations == 0,
        t,
        secs(300),
        &format!(
            "p0 {:.4}, p {:.4}, neither stalled nor drifted {}, submartingale violations {}",
            s["p0"].as_f64().unwrap(),
            s["p"].as_f64().unwrap(),
            s["neither"],
            s["submartingale_violations"]
        ),
    );
}

fn bv_demo(r: &mut Report) {
    let mut all = true;
    let mut total = Duration::ZERO;
    for m in [2, 3] {
        let c = BvDemoConfig {
            m,
            ..Default::default()
        };
        let (out, t) = r.run(&format!("bv-demo m={m}"), ExperimentConfig::BvDemo(c));
        total += t;
        let s = &out.summary;
        detail(format!(
            "m = {m}: dim {} (expected {}), rank one {}/{}, symbol samples {}/{}, membership agree {}/{}, {:.1}s",
            s["dim"], s["expected_dim"], s["certified_rank_one"], s["certified_total"], s["symbol_passed"],
            s["symbol_total"], s["membership_agree"], s["membership_total"], t.as_secs_f64()
        ));
        let csv = out.artifact("bv_frequencies.csv").unwrap();
        let (g1, g2) = (column(csv, "gamma1"), column(csv, "gamma2"));
        let (n, ok, worst) = (
            column(csv, "samples"),
            column(csv, "passed"),
            column(csv, "max_angle"),
        );
        for i in 0..g1.len() {
            if n[i] != ok[i] {
                detail(format!(
                    "  frequency ({}, {}): {}/{} samples pass, max gamma {}",
                    g1[i], g2[i], ok[i], n[i], worst[i]
                ));
            }
        }
        all &= out.violations == 0;
    }
    r.line("7", all, total, secs(120), "");
}

fn doob(r: &mut Report) {
    let start = Instant::now();
    let uniform =
        TruncatedMeasure::uniform(TreeShape::new(3, 10, 2).unwrap(), &[1.0, 0.0]).unwrap();
    let flat = doob_maximal_profile(&uniform)
        .iter()
        .map(|row| (row.l1 - 1.0).abs())
        .fold(0.0, f64::max);
    detail(format!("uniform: max |profile - 1| = {flat:.2e}"));

    let spec = CascadeSpec::new(vec![1.0, 0.0], vec![2.0, -1.0, -1.0], 10);
    let cascade = cascade_measure(&spec, &ConstraintSpace::full(3, 2)).unwrap();
    let profile: Vec<f64> = doob_maximal_profile(&cascade)
        .iter()
        .map(|row| row.l1)
        .collect();
    let increasing = profile[1..].windows(2).all(|w| w[1] > w[0]) && profile[1] > profile[0];
    detail(format!(
        "pure cascade: profile {:.3} .. {:.3}, strictly increasing {increasing}",
        profile[1], profile[10]
    ));
    let mut elapsed = start.elapsed();
    // the same cascade through the runner, for the determinism check
    let config = ExperimentConfig::Cascade(CascadeConfig {
        space: SpaceSource::Full { q: 3, l: 2 },
        cascade: spec,
        save_measure: false,
    });
    let out = run(&config).unwrap();
    r.reruns.push(("cascade".into(), config, out));

    let c = SubmartingaleConfig {
        depth: 10,
        realizations: 64,
        ..Default::default()
    };
    let (out, t) = r.run("submartingale", ExperimentConfig::Submartingale(c));
    elapsed += t;
    let s = &out.summary;
    let bound = s["doob_bound"].as_f64().unwrap();
    let nonincreasing = s["doob_increments_nonincreasing_after_3"]
        .as_bool()
        .unwrap();
    detail(format!(
        "compliant (mean of 64): profile max {bound:.4} (asserted <= {DOOB_BOUND}), increments non-increasing after depth 3 {nonincreasing}"
    ));
    r.line(
        "8",
        flat <= 1e-12 && increasing && bound <= DOOB_BOUND && nonincreasing,
        elapsed,
        secs(60),
        "",
    );
}

fn determinism(r: &mut Report) {
    let start = Instant::now();
    let mut differing = Vec::new();
    let mut files = 0;
    for (label, config, first) in &r.reruns {
        let again = run(config).unwrap();
        files += first.artifacts.len();
        if again.artifacts != first.artifacts {
            differing.push(label.clone());
        }
    }
    if !differing.is_empty() {
        detail(format!("differing: {}", differing.join(", ")));
    }
    let note = format!("{} runs, {files} CSV files compared", r.reruns.len());
    r.line("9", differing.is_empty(), start.elapsed(), None, &note);
}

fn main() {
    let mut r = Report {
        failures: 0,
        reruns: Vec::new(),
    };
    gamma(&mut r);
    lemma1(&mut r);
    lemma2(&mut r);
    theorem_demo(&mut r);
    adversarial(&mut r);
    bv_demo(&mut r);
    doob(&mut r);
    determinism(&mut r);
    if r.failures > 0 {
        println!("{} criteria failed", r.failures);
        std::process::exit(1);
    }
    println!("all criteria passed");
}
