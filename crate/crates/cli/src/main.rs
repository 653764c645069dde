use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use serde_json::json;
use wavecone::builders::{CascadeSpec, HeavySon};
use wavecone::experiments::{
    run, AdversarialConfig, BvDemoConfig, CascadeConfig, ExperimentConfig, GammaConfig,
    Lemma1Config, Lemma2Config, SpaceSource, SubmartingaleConfig, TheoremDemoConfig,
    WaveconeConfig,
};

/// Experiments on vector measures over q-regular trees.
#[derive(Parser, Debug)]
#[command(name = "wavecone", version, allow_negative_numbers = true)]
struct Cli {
    /// Output directory for the manifest and result files.
    #[arg(
        long,
        global = true,
        env = "WAVECONE_OUT_DIR",
        default_value = "wavecone-out"
    )]
    out: PathBuf,
    /// Run configurations beyond the desk-scale limits.
    #[arg(long, global = true)]
    allow_large: bool,
    /// Print the configuration and exit without running.
    #[arg(long, global = true)]
    dry_run: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Rank-one angle of a direction, or the eigensolver/sampling sweep.
    Gamma(GammaArgs),
    /// Wave-cone membership of a direction, or searches for members.
    Wavecone(WaveconeArgs),
    /// Orthogonal increments of random flat atoms.
    Lemma1(Lemma1Args),
    /// Critical exponents and the p-inequality over an (eta, delta) grid.
    Lemma2(Lemma2Args),
    /// The p-submartingale check and Doob profiles of compliant measures.
    Submartingale(SubmartingaleArgs),
    /// A single multiplicative cascade.
    Cascade(CascadeArgs),
    /// Cascades along wave-cone directions of the BV space, mixed with a background.
    TheoremDemo(TheoremDemoArgs),
    /// Dimension, membership tests and rank-one structure of the BV space.
    BvDemo(BvDemoArgs),
    /// Concentration attempts away from the wave cone.
    Adversarial(AdversarialArgs),
    /// Runs the configuration echoed in a manifest, or a bare configuration file.
    Rerun { file: PathBuf },
}

#[derive(Args, Debug, Default)]
struct SpaceArgs {
    #[arg(long)]
    q: Option<usize>,
    #[arg(long)]
    l: Option<usize>,
    /// Constraint space saved as JSON.
    #[arg(long, conflicts_with = "bv")]
    subspace: Option<PathBuf>,
    /// The BV space on the torus of this size.
    #[arg(long)]
    bv: Option<usize>,
}

impl SpaceArgs {
    /// `None` when no space was named.
    fn source(&self) -> anyhow::Result<Option<SpaceSource>> {
        Ok(match (&self.subspace, self.bv, self.q, self.l) {
            (Some(path), ..) => {
                let source = SpaceSource::File { path: path.clone() };
                if self.q.is_some() || self.l.is_some() {
                    let space = source.load()?;
                    if self.q.is_some_and(|q| q != space.q())
                        || self.l.is_some_and(|l| l != space.l())
                    {
                        bail!(
                            "{} holds a space with q = {}, l = {}",
                            path.display(),
                            space.q(),
                            space.l()
                        );
                    }
                }
                Some(source)
            }
            (None, Some(m), ..) => Some(SpaceSource::Bv { m }),
            (None, None, Some(q), Some(l)) => Some(SpaceSource::Full { q, l }),
            (None, None, None, None) => None,
            _ => bail!("--q and --l go together"),
        })
    }
}

#[derive(Args, Debug)]
struct GammaArgs {
    #[command(flatten)]
    space: SpaceArgs,
    /// Direction, comma separated.
    #[arg(long, value_delimiter = ',')]
    v: Option<Vec<f64>>,
    #[arg(long)]
    instances: Option<usize>,
    #[arg(long)]
    samples: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    agreement: Option<f64>,
}

#[derive(Args, Debug)]
struct WaveconeArgs {
    #[command(flatten)]
    space: SpaceArgs,
    #[arg(long, value_delimiter = ',')]
    v: Option<Vec<f64>>,
    #[arg(long)]
    tolerance: Option<f64>,
    #[arg(long)]
    searches: Option<usize>,
    #[arg(long)]
    max_iter: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Debug)]
struct Lemma1Args {
    #[arg(long)]
    q: Option<usize>,
    #[arg(long)]
    l: Option<usize>,
    #[arg(long, value_delimiter = ',')]
    eps: Option<Vec<f64>>,
    #[arg(long)]
    trials: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Debug)]
struct Lemma2Args {
    #[arg(long)]
    q: Option<usize>,
    #[arg(long)]
    l: Option<usize>,
    #[arg(long, value_delimiter = ',')]
    eta: Option<Vec<f64>>,
    #[arg(long, value_delimiter = ',')]
    delta: Option<Vec<f64>>,
    #[arg(long)]
    trials: Option<usize>,
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    #[arg(long)]
    margin: Option<f64>,
    #[arg(long)]
    stability: Option<f64>,
}

#[derive(Args, Debug)]
struct SubmartingaleArgs {
    #[arg(long)]
    q: Option<usize>,
    #[arg(long)]
    l: Option<usize>,
    #[arg(long)]
    depth: Option<usize>,
    #[arg(long)]
    eta: Option<f64>,
    #[arg(long)]
    delta: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    realizations: Option<usize>,
    /// Exponent to test; estimated from sampled atoms when absent.
    #[arg(long)]
    p: Option<f64>,
    #[arg(long)]
    p0_trials: Option<usize>,
    #[arg(long)]
    margin: Option<f64>,
    /// Measure saved as JSON, tested instead of fresh realizations.
    #[arg(long)]
    measure: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct CascadeArgs {
    #[command(flatten)]
    space: SpaceArgs,
    #[arg(long, value_delimiter = ',')]
    direction: Option<Vec<f64>>,
    /// Zero-sum weight; son i is multiplied by 1 + w_i.
    #[arg(long, value_delimiter = ',')]
    weight: Option<Vec<f64>>,
    #[arg(long)]
    depth: Option<usize>,
    /// Rotate the weight so its largest entry sits on this son.
    #[arg(long, conflicts_with = "heavy_seed")]
    heavy_son: Option<usize>,
    /// Choose the heavy son per level from this seed.
    #[arg(long)]
    heavy_seed: Option<u64>,
    #[arg(long)]
    allow_signed: bool,
    #[arg(long)]
    save_measure: bool,
}

#[derive(Args, Debug)]
struct TheoremDemoArgs {
    #[arg(long)]
    m: Option<usize>,
    #[arg(long)]
    cascades: Option<usize>,
    #[arg(long)]
    depth: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    mixture_weight: Option<f64>,
    #[arg(long)]
    background_scale: Option<f64>,
    #[arg(long)]
    eps: Option<f64>,
}

#[derive(Args, Debug)]
struct BvDemoArgs {
    #[arg(long)]
    m: Option<usize>,
    #[arg(long)]
    certified: Option<usize>,
    #[arg(long)]
    symbol_samples: Option<usize>,
    #[arg(long)]
    membership_trials: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Debug)]
struct AdversarialArgs {
    #[arg(long)]
    m: Option<usize>,
    #[arg(long)]
    directions: Option<usize>,
    #[arg(long)]
    min_gamma: Option<f64>,
    #[arg(long)]
    depth: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    eta: Option<f64>,
    #[arg(long)]
    delta: Option<f64>,
    #[arg(long)]
    p0_trials: Option<usize>,
}

fn set<T>(field: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *field = v;
    }
}

fn config(command: Command) -> anyhow::Result<ExperimentConfig> {
    Ok(match command {
        Command::Gamma(a) => {
            let mut c = GammaConfig {
                space: a.space.source()?,
                direction: a.v,
                ..Default::default()
            };
            if c.space.is_some() && c.direction.is_none() {
                bail!("a subspace needs a direction (--v)");
            }
            if c.space.is_none() && c.direction.is_some() {
                bail!("a direction needs a subspace (--subspace, --bv, or --q with --l)");
            }
            set(&mut c.instances, a.instances);
            set(&mut c.samples, a.samples);
            set(&mut c.seed, a.seed);
            set(&mut c.agreement, a.agreement);
            ExperimentConfig::Gamma(c)
        }
        Command::Wavecone(a) => {
            let mut c = WaveconeConfig {
                direction: a.v,
                ..Default::default()
            };
            set(&mut c.space, a.space.source()?);
            set(&mut c.tolerance, a.tolerance);
            set(&mut c.searches, a.searches);
            set(&mut c.max_iter, a.max_iter);
            set(&mut c.seed, a.seed);
            ExperimentConfig::Wavecone(c)
        }
        Command::Lemma1(a) => {
            let mut c = Lemma1Config::default();
            set(&mut c.q, a.q);
            set(&mut c.l, a.l);
            set(&mut c.eps, a.eps);
            set(&mut c.trials, a.trials);
            set(&mut c.seed, a.seed);
            ExperimentConfig::Lemma1(c)
        }
        Command::Lemma2(a) => {
            let mut c = Lemma2Config::default();
            set(&mut c.q, a.q);
            set(&mut c.l, a.l);
            set(&mut c.etas, a.eta);
            set(&mut c.deltas, a.delta);
            set(&mut c.trials, a.trials);
            set(&mut c.seeds, a.seeds);
            set(&mut c.margin, a.margin);
            set(&mut c.stability, a.stability);
            ExperimentConfig::Lemma2(c)
        }
        Command::Submartingale(a) => {
            let mut c = SubmartingaleConfig {
                p: a.p,
                measure: a.measure,
                ..Default::default()
            };
            set(&mut c.q, a.q);
            set(&mut c.l, a.l);
            set(&mut c.depth, a.depth);
            set(&mut c.eta, a.eta);
            set(&mut c.delta, a.delta);
            set(&mut c.seed, a.seed);
            set(&mut c.realizations, a.realizations);
            set(&mut c.p0_trials, a.p0_trials);
            set(&mut c.margin, a.margin);
            ExperimentConfig::Submartingale(c)
        }
        Command::Cascade(a) => {
            let mut c = CascadeConfig {
                save_measure: a.save_measure,
                ..Default::default()
            };
            set(&mut c.space, a.space.source()?);
            let default = c.cascade.clone();
            let mut spec = CascadeSpec::new(
                a.direction.unwrap_or(default.direction),
                a.weight.unwrap_or(default.weight),
                a.depth.unwrap_or(default.depth),
            );
            if let Some(j) = a.heavy_son {
                spec.heavy_son = HeavySon::Fixed(j);
            }
            if let Some(s) = a.heavy_seed {
                spec.heavy_son = HeavySon::Seeded(s);
            }
            spec.allow_signed = a.allow_signed;
            c.cascade = spec;
            ExperimentConfig::Cascade(c)
        }
        Command::TheoremDemo(a) => {
            let mut c = TheoremDemoConfig::default();
            set(&mut c.m, a.m);
            set(&mut c.cascades, a.cascades);
            set(&mut c.depth, a.depth);
            set(&mut c.seed, a.seed);
            set(&mut c.mixture_weight, a.mixture_weight);
            set(&mut c.background_scale, a.background_scale);
            set(&mut c.eps, a.eps);
            ExperimentConfig::TheoremDemo(c)
        }
        Command::BvDemo(a) => {
            let mut c = BvDemoConfig::default();
            set(&mut c.m, a.m);
            set(&mut c.certified, a.certified);
            set(&mut c.symbol_samples, a.symbol_samples);
            set(&mut c.membership_trials, a.membership_trials);
            set(&mut c.seed, a.seed);
            ExperimentConfig::BvDemo(c)
        }
        Command::Adversarial(a) => {
            let mut c = AdversarialConfig::default();
            set(&mut c.m, a.m);
            set(&mut c.directions, a.directions);
            set(&mut c.min_gamma, a.min_gamma);
            set(&mut c.depth, a.depth);
            set(&mut c.seed, a.seed);
            set(&mut c.eta, a.eta);
            set(&mut c.delta, a.delta);
            set(&mut c.p0_trials, a.p0_trials);
            ExperimentConfig::Adversarial(c)
        }
        Command::Rerun { file } => {
            let text =
                fs::read_to_string(&file).with_context(|| format!("reading {}", file.display()))?;
            let value: serde_json::Value = serde_json::from_str(&text)
                .with_context(|| format!("parsing {}", file.display()))?;
            let config = value.get("config").cloned().unwrap_or(value);
            serde_json::from_value(config)
                .with_context(|| format!("no experiment configuration in {}", file.display()))?
        }
    })
}

fn write(path: &Path, contents: &str) -> anyhow::Result<()> {
    fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

/// Exit code 2 when the run found invariant violations.
fn execute(cli: Cli) -> anyhow::Result<u8> {
    let config = config(cli.command)?;
    if let Err(why) = config.check_limits() {
        if !cli.allow_large {
            bail!("{why}; pass --allow-large to run it anyway");
        }
    }
    if cli.dry_run {
        println!("{}", serde_json::to_string_pretty(&config)?);
        return Ok(0);
    }
    let start = Instant::now();
    let output = run(&config)?;
    let seconds = start.elapsed().as_secs_f64();

    fs::create_dir_all(&cli.out).with_context(|| format!("creating {}", cli.out.display()))?;
    for artifact in &output.artifacts {
        write(&cli.out.join(&artifact.file_name), &artifact.contents)?;
    }
    let manifest = json!({
        "experiment": output.experiment,
        "version": env!("CARGO_PKG_VERSION"),
        "config": config,
        "timings": {"run_seconds": seconds},
        "summary": output.summary,
        "violations": output.violations,
        "files": output.artifacts.iter().map(|a| &a.file_name).collect::<Vec<_>>(),
    });
    write(
        &cli.out.join("manifest.json"),
        &serde_json::to_string_pretty(&manifest)?,
    )?;

    println!("{}: {:.2}s", output.experiment, seconds);
    if let Some(map) = output.summary.as_object() {
        for (key, value) in map {
            if key != "violations" {
                println!("{key}: {value}");
            }
        }
    }
    println!("violations: {}", output.violations);
    println!("written to {}", cli.out.display());
    Ok(if output.violations > 0 { 2 } else { 0 })
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let usage = e.use_stderr();
            let _ = e.print();
            return ExitCode::from(if usage { 1 } else { 0 });
        }
    };
    match execute(cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
