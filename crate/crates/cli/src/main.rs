//! `advnet`: train, attack and evaluate classifiers, run the saddle-point
//! lab and the gradient checks.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use advnet::attack::AttackFamily;
use advnet::checkpoint::{load_discriminator, load_generator, AdversarialSet, AdversarialSetMeta, Checkpoint};
use advnet::config::{pixel_box, ExperimentConfig, PRESETS};
use advnet::eval::{accuracy, black_box_transfer, run_attack, sanitize, NamedModel};
use advnet::game::{simulate, spectral_radius_oracle, GameState, QuadraticGame};
use advnet::minimax::train;
use advnet::nn::{gradcheck_suite, GRADCHECK_TOLERANCE};
use advnet::Error;
use clap::{Args, Parser, Subcommand};
use nalgebra::DMatrix;

#[derive(Parser, Debug)]
#[command(name = "advnet", version, about = "Adversarial-network training of robust classifiers")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a model and write its checkpoint, metrics and expanded config.
    Train(Common),
    /// Attack a checkpointed classifier and save the adversarial test set.
    Attack(AttackArgs),
    /// Evaluate defenses white-box and under transfer attacks.
    Eval(EvalArgs),
    /// Simulate regularized gradient dynamics on a quadratic game.
    GameLab(Common),
    /// Check analytic gradients of every layer kind and architecture.
    Gradcheck(GradcheckArgs),
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// Flat `section.key = value` configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Named preset applied before the config file.
    #[arg(long)]
    preset: Option<String>,
    /// Additional `key=value` overrides, applied last.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Worker threads for the evaluation matrix.
    #[arg(long)]
    jobs: Option<usize>,
    /// Ratio between full-scale and run iteration counts.
    #[arg(long)]
    divisor: Option<u64>,
    /// Print the expanded configuration and stop.
    #[arg(long)]
    dry_run: bool,
}

#[derive(Args, Debug)]
struct AttackArgs {
    #[command(flatten)]
    common: Common,
    /// Classifier checkpoint to attack.
    #[arg(long)]
    model: PathBuf,
    /// fgs, pgd, least-likely or generator.
    #[arg(long, default_value = "fgs")]
    attack: String,
    /// Generator checkpoint for generator attacks.
    #[arg(long)]
    generator: Option<PathBuf>,
    /// Budget on the [0, 1] pixel scale; defaults to `eval.eps`.
    #[arg(long)]
    eps: Option<f64>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[command(flatten)]
    common: Common,
    /// Evaluated model as `id=checkpoint`; repeatable.
    #[arg(long = "defense", value_name = "ID=PATH")]
    defenses: Vec<String>,
    /// Transfer-attack source as `id=checkpoint`; repeatable.
    #[arg(long = "surrogate", value_name = "ID=PATH")]
    surrogates: Vec<String>,
}

#[derive(Args, Debug)]
struct GradcheckArgs {
    /// Sampled parameter and input coordinates per model.
    #[arg(long, default_value_t = 60)]
    max_coords: usize,
}

type Result<T> = std::result::Result<T, Error>;

fn build_config(c: &Common) -> Result<ExperimentConfig> {
    let mut cfg = match &c.preset {
        Some(name) => ExperimentConfig::preset(name)?,
        None => ExperimentConfig::default(),
    };
    if let Some(path) = &c.config {
        if !path.exists() {
            return Err(Error::config("--config", format!("{} does not exist", path.display())));
        }
        let text = std::fs::read_to_string(path).map_err(|e| Error::Io { path: path.clone(), source: e })?;
        cfg.apply_text(&text)?;
    }
    for kv in &c.set {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::config("--set", format!("expected key=value, got `{kv}`")))?;
        cfg.set(k.trim(), v.trim())?;
    }
    if let Some(seed) = c.seed {
        cfg.train.seed = seed;
    }
    if let Some(out) = &c.out {
        cfg.out = out.clone();
    }
    if let Some(jobs) = c.jobs {
        cfg.jobs = jobs;
    }
    if let Some(d) = c.divisor {
        cfg.divisor = d;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn require_file(key: &str, path: &Path) -> Result<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(Error::config(key, format!("checkpoint {} not found", path.display())))
    }
}

fn cmd_train(c: &Common) -> Result<()> {
    let cfg = build_config(c)?;
    if c.dry_run {
        print!("{}", cfg.to_text());
        return Ok(());
    }
    for p in &cfg.static_models {
        require_file("train.static_models", p)?;
    }
    if let Some(p) = &cfg.target {
        require_file("train.target", p)?;
    }
    let statics = cfg.static_models.iter().map(|p| load_discriminator(p)).collect::<Result<Vec<_>>>()?;
    let target = cfg.target.as_deref().map(load_discriminator).transpose()?;
    cfg.write_to_dir(&cfg.out)?;
    let train_set = cfg.data.load_train()?;
    let test_set = cfg.data.load_test()?;
    let tc = cfg.resolved_train();
    log::info!("training {} for {} iterations on {} samples", tc.kind, tc.iterations, train_set.len());
    let outcome = train(&tc, &train_set, Some(&test_set), &statics, target.as_ref())?;
    let ckpt = cfg.out.join("model.ckpt");
    Checkpoint::from_outcome(&outcome, cfg.to_text()).save(&ckpt)?;
    outcome.metrics.write_csv(&cfg.out.join("metrics.csv"))?;
    let judged = target.as_ref().unwrap_or(&outcome.discriminator);
    println!("checkpoint {}", ckpt.display());
    println!("test clean accuracy {:.4} on {} samples", accuracy(judged, &test_set)?, test_set.len());
    Ok(())
}

fn cmd_attack(a: &AttackArgs) -> Result<()> {
    let cfg = build_config(&a.common)?;
    if a.common.dry_run {
        print!("{}", cfg.to_text());
        return Ok(());
    }
    require_file("--model", &a.model)?;
    if let Some(g) = &a.generator {
        require_file("--generator", g)?;
    }
    let family: AttackFamily = a.attack.parse()?;
    let mut eval = cfg.eval.clone();
    eval.attacks = vec![family];
    if let Some(eps) = a.eps {
        eval.eps = eps;
    }
    let spec = eval.specs().remove(0);
    let model = load_discriminator(&a.model)?;
    let generator = a.generator.as_deref().map(load_generator).transpose()?;
    let b = pixel_box(&cfg)?;
    let test_set = cfg.data.load_test()?;
    let images = run_attack(&model, &test_set.images, &test_set.labels, &spec, generator.as_ref(), &b, eval.seed)?;
    let set = AdversarialSet {
        meta: AdversarialSetMeta {
            source: a.model.display().to_string(),
            attack: spec.clone(),
            seed: eval.seed,
            dataset: test_set.split.clone(),
        },
        images,
        labels: test_set.labels.clone(),
        classes: test_set.classes,
    };
    std::fs::create_dir_all(&cfg.out).map_err(|e| Error::Io { path: cfg.out.clone(), source: e })?;
    let path = cfg.out.join(format!("{}.advset", family.as_str()));
    set.save(&path)?;
    let adv = advnet::data::Dataset::new(set.images.clone(), set.labels.clone(), set.classes, "adversarial")?;
    println!("{} accuracy {:.4} (clean {:.4}); wrote {}", spec.describe(), accuracy(&model, &adv)?, accuracy(&model, &test_set)?, path.display());
    Ok(())
}

fn named(key: &str, items: &[(String, PathBuf)]) -> Result<Vec<NamedModel>> {
    for (_, p) in items {
        require_file(key, p)?;
    }
    items.iter().map(|(id, p)| Ok(NamedModel::new(id.clone(), load_discriminator(p)?))).collect()
}

fn parse_pairs(key: &str, items: &[String]) -> Result<Vec<(String, PathBuf)>> {
    items
        .iter()
        .map(|s| {
            s.split_once('=')
                .map(|(id, p)| (id.to_string(), PathBuf::from(p)))
                .ok_or_else(|| Error::config(key, format!("expected id=path, got `{s}`")))
        })
        .collect()
}

fn cmd_eval(e: &EvalArgs) -> Result<()> {
    let mut cfg = build_config(&e.common)?;
    cfg.eval.defenses.extend(parse_pairs("--defense", &e.defenses)?);
    cfg.eval.surrogates.extend(parse_pairs("--surrogate", &e.surrogates)?);
    if cfg.eval.defenses.is_empty() {
        return Err(Error::config("eval.defenses", "no defense checkpoints given"));
    }
    if e.common.dry_run {
        print!("{}", cfg.to_text());
        return Ok(());
    }
    let defenses = named("eval.defenses", &cfg.eval.defenses)?;
    let surrogates = named("eval.surrogates", &cfg.eval.surrogates)?;
    let b = pixel_box(&cfg)?;
    cfg.write_to_dir(&cfg.out)?;
    let test_set = cfg.data.load_test()?;
    let set_dir = cfg.out.join("advsets");
    std::fs::create_dir_all(&set_dir).map_err(|err| Error::Io { path: set_dir.clone(), source: err })?;
    let report = black_box_transfer(&defenses, &surrogates, &test_set, &cfg.eval.specs(), &b, cfg.eval.seed, Some(&set_dir), cfg.jobs)?;
    report.write_all(&cfg.out)?;
    print!("{}", report.to_text_table());
    for (defense, source) in report.strongest_transfer_source() {
        println!("strongest transfer source for {defense}: {source}");
    }
    Ok(())
}

fn cmd_game_lab(c: &Common) -> Result<()> {
    let cfg = build_config(c)?;
    let g = &cfg.game;
    let (n, m) = (g.theta.len(), g.phi.len());
    if g.a.len() != n * m {
        return Err(Error::config("game.a", format!("needs {n}x{m} = {} entries, got {}", n * m, g.a.len())));
    }
    if c.dry_run {
        print!("{}", cfg.to_text());
        return Ok(());
    }
    let game = QuadraticGame::bilinear(DMatrix::from_row_slice(n, m, &g.a));
    let trace = simulate(&game, &GameState::new(&g.theta, &g.phi), g.step_sizes(), g.hvp, g.steps)?;
    std::fs::create_dir_all(&cfg.out).map_err(|e| Error::Io { path: cfg.out.clone(), source: e })?;
    cfg.write_to_dir(&cfg.out)?;
    let path = cfg.out.join(format!("trace-{}.csv", sanitize(&format!("gamma{}", g.gamma))));
    trace.write_csv(&path)?;
    let rho = spectral_radius_oracle(&game, g.step_sizes());
    let norms = trace.norms();
    println!(
        "spectral radius {rho:.6}, simulated rate {:.6}, norm {:.3e} -> {:.3e} after {} steps; wrote {}",
        trace.growth_rate(),
        norms[0],
        norms[norms.len() - 1],
        trace.steps(),
        path.display()
    );
    Ok(())
}

fn cmd_gradcheck(a: &GradcheckArgs) -> Result<bool> {
    let mut ok = true;
    for (name, r) in gradcheck_suite(a.max_coords)? {
        let pass = r.passes(GRADCHECK_TOLERANCE);
        ok &= pass;
        println!(
            "{} {name}: max relative error {:.3e} over {} coordinates",
            if pass { "PASS" } else { "FAIL" },
            r.max_rel_error,
            r.coordinates_checked
        );
    }
    Ok(ok)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Train(c) => cmd_train(c).map(|_| true),
        Command::Attack(a) => cmd_attack(a).map(|_| true),
        Command::Eval(e) => cmd_eval(e).map(|_| true),
        Command::GameLab(c) => cmd_game_lab(c).map(|_| true),
        Command::Gradcheck(a) => cmd_gradcheck(a),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e}");
            if matches!(e, Error::Config { .. }) {
                eprintln!("known presets: {}", PRESETS.join(", "));
                ExitCode::from(2)
            } else {
                ExitCode::FAILURE
            }
        }
    }
}
