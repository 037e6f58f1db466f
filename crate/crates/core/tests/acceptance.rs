//! Acceptance suite A-1 to A-9. Prints one PASS/FAIL line per criterion
//! and exits non-zero when any criterion fails.
//!
//! `ADVNET_ACCEPTANCE=A-1,A-3` runs a subset. Trained desk-scale models and
//! reports are written under `target/acceptance`.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::time::{Duration, Instant};

use advnet::attack::{fgs_attack, generator_attack, least_likely_attack, pgd_attack, AttackSpec, GeneratorInput, PixelBox};
use advnet::checkpoint::Checkpoint;
use advnet::config::ExperimentConfig;
use advnet::data::{data_dir, load_idx, load_mnist, make_synthetic, write_idx, Dataset, Split, SyntheticKind};
use advnet::eval::{accuracy, accuracy_on, black_box_transfer, run_attack, white_box_eval, NamedModel, WHITE_BOX};
use advnet::game::{simulate, spectral_radius_oracle, GameState, HvpMode, QuadraticGame, StepSizes};
use advnet::minimax::{hvp_finite_difference, train, BilinearObjective, SaddleObjective, TrainConfig, TrainOutcome};
use advnet::nn::{gradcheck_suite, LayerSpec, Mode, Model, GRADCHECK_TOLERANCE};
use advnet::Tensor;
use proptest::prelude::*;
use proptest::test_runner::{Config as ProptestConfig, TestCaseError, TestRunner};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Desk-scale MNIST protocol.
const TRAIN_SAMPLES: usize = 10_000;
const TEST_SAMPLES: usize = 2_000;
const SEEDS: [u64; 3] = [0, 1, 2];
const EPS: f64 = 0.3;

/// Iteration-budget divisors applied to the 200k-iteration presets.
const STANDARD_DIVISOR: u64 = 100;
const PGD_DIVISOR: u64 = 200;
const ADVNET_DIVISOR: u64 = 200;
const ADVNET_G_UPDATES: usize = 1;
const GENATTACK_ITERATIONS: u64 = 500;

struct Verdict {
    pass: bool,
    detail: String,
}

impl Verdict {
    fn new(pass: bool, detail: impl Into<String>) -> Self {
        Self { pass, detail: detail.into() }
    }
}

fn artifacts() -> PathBuf {
    let dir = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../target/acceptance");
    std::fs::create_dir_all(&dir).expect("artifact directory");
    dir
}

fn within(elapsed: Duration, limit_s: f64) -> (bool, String) {
    let s = elapsed.as_secs_f64();
    (s <= limit_s, format!("{s:.1} s of {limit_s:.0} s"))
}

// A-1

fn gradient_correctness() -> Verdict {
    let t = Instant::now();
    let results = gradcheck_suite(60).expect("gradient checks run");
    let (in_time, time) = within(t.elapsed(), 120.0);
    let worst = results.iter().map(|(_, r)| r.max_rel_error).fold(0.0, f64::max);
    let failing: Vec<&str> = results.iter().filter(|(_, r)| !r.passes(GRADCHECK_TOLERANCE)).map(|(n, _)| n.as_str()).collect();
    Verdict::new(
        failing.is_empty() && in_time,
        format!("{} models, worst relative error {worst:.2e}, failing {failing:?}, {time}", results.len()),
    )
}

// A-2

fn random_bilinear(rng: &mut ChaCha8Rng) -> (BilinearObjective, Vec<f64>) {
    let (n, m) = (rng.random_range(1..=16), rng.random_range(1..=16));
    let mut draw = |k: usize| (0..k).map(|_| rng.random_range(-1.0..1.0)).collect::<Vec<f64>>();
    let mut f = BilinearObjective::new(draw(n * m), draw(n), draw(m)).expect("consistent dims");
    // Quadratic terms do not change the mixed derivative.
    let sym = |a: Vec<f64>, k: usize| (0..k * k).map(|i| a[i] + a[(i % k) * k + i / k]).collect::<Vec<f64>>();
    f.p = Some(sym(draw(n * n), n));
    f.q = Some(sym(draw(m * m), m));
    let v = draw(m);
    (f, v)
}

fn hvp_exactness() -> Verdict {
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (mut worst, mut restored) = (0.0f64, true);
    for _ in 0..100 {
        let (mut f, v) = random_bilinear(&mut rng);
        let exact = f.a_times(&v);
        for h in [1e-3, 1e-1] {
            let phi_before: Vec<u64> = f.phi().iter().map(|x| x.to_bits()).collect();
            let fd = hvp_finite_difference(&mut f, &v, h).expect("finite h");
            restored &= f.phi().iter().map(|x| x.to_bits()).eq(phi_before);
            let diff = fd.iter().zip(&exact).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
            let scale = exact.iter().map(|b| b * b).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
            worst = worst.max(diff / scale);
        }
    }
    let (in_time, time) = within(t.elapsed(), 10.0);
    Verdict::new(
        worst <= 1e-9 && restored && in_time,
        format!("100 games, worst relative error {worst:.2e}, phi restored bit-exactly: {restored}, {time}"),
    )
}

// A-3

fn stabilization() -> Verdict {
    let t = Instant::now();
    let game = QuadraticGame::scalar();
    let start = GameState::new(&[1.0], &[1.0]);
    let mut ok = true;
    let mut parts = Vec::new();
    for (gamma, expect_sq) in [(0.2, 0.99), (0.0, 1.01)] {
        let eta = StepSizes::equal(0.1, gamma);
        let trace = simulate(&game, &start, eta, HvpMode::Exact, 2000).expect("scalar game");
        let last = *trace.norms().last().expect("non-empty trace");
        let rho = spectral_radius_oracle(&game, eta);
        let head = advnet::game::DynamicsTrace {
            points: trace.points[..=1000].to_vec(),
        };
        let rate_err = (head.growth_rate() - rho).abs() / rho;
        let settled = if gamma > 0.0 { last < 1e-3 } else { last > 1e3 };
        ok &= settled && (rho * rho - expect_sq).abs() < 1e-12 && rate_err <= 0.01;
        parts.push(format!("gamma {gamma}: |lambda|^2 {:.4}, norm after 2000 steps {last:.2e}, rate error {:.2e}", rho * rho, rate_err));
    }
    let (in_time, time) = within(t.elapsed(), 5.0);
    Verdict::new(ok && in_time, format!("{}; {time}", parts.join("; ")))
}

// A-7

fn tiny_classifier(rng: &mut ChaCha8Rng) -> Model<f32> {
    let specs = [LayerSpec::conv(3, 1, 3), LayerSpec::Relu, LayerSpec::MaxPool { stride: 2 }, LayerSpec::reshape(&[48]), LayerSpec::dense(4)];
    Model::sequential("probe-d", &[8, 8, 1], &specs, rng).expect("valid layers")
}

fn tiny_generator(rng: &mut ChaCha8Rng) -> Model<f32> {
    let specs = [LayerSpec::conv_bias(3, 1, 2), LayerSpec::Relu, LayerSpec::conv_bias(3, 1, 1), LayerSpec::Tanh];
    Model::sequential("probe-g", &[8, 8, 1], &specs, rng).expect("valid layers")
}

fn perturbation_bounds() -> Verdict {
    let t = Instant::now();
    let cases_per_family = 2500u32;
    let mut failures = Vec::new();
    for family in ["fgs", "pgd", "least-likely", "generator"] {
        let mut runner = TestRunner::new(ProptestConfig {
            cases: cases_per_family,
            failure_persistence: None,
            ..ProptestConfig::default()
        });
        let strategy = (any::<u64>(), 0.0f64..0.6, 1usize..4, -1.0f64..-0.2, 0.2f64..1.0);
        let result = runner.run(&strategy, |(seed, eps, batch, lower, upper)| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let b = PixelBox::new(lower, upper).expect("lower < upper");
            let d = tiny_classifier(&mut rng).with_mode(if seed % 2 == 0 { Mode::Train } else { Mode::Inference });
            let x = Tensor::new(vec![batch, 8, 8, 1], (0..batch * 64).map(|_| rng.random_range(lower..=upper) as f32).collect())
                .expect("shape matches data");
            let labels: Vec<usize> = (0..batch).map(|_| rng.random_range(0..4)).collect();
            let adv = match family {
                "fgs" => fgs_attack(&d, &x, &labels, &AttackSpec::fgs(eps), &b),
                "pgd" => {
                    let mut spec = AttackSpec::pgd(eps);
                    spec.steps = 3;
                    pgd_attack(&d, &x, &labels, &spec, &b, &mut rng)
                }
                "least-likely" => least_likely_attack(&d, &x, &AttackSpec::least_likely(eps), &b),
                _ => generator_attack(&tiny_generator(&mut rng), &x, GeneratorInput::Image, eps, &b),
            }
            .map_err(|e| TestCaseError::fail(e.to_string()))?;
            let bound = b.to_data_scale(eps) + 1e-6;
            for (a, c) in adv.data().iter().zip(x.data()) {
                prop_assert!(((a - c).abs() as f64) <= bound, "|{a} - {c}| > {bound}");
                prop_assert!((*a as f64) >= lower - 1e-6 && (*a as f64) <= upper + 1e-6, "{a} outside [{lower}, {upper}]");
            }
            Ok(())
        });
        if let Err(e) = result {
            failures.push(format!("{family}: {e}"));
        }
    }
    let (in_time, time) = within(t.elapsed(), 60.0);
    Verdict::new(
        failures.is_empty() && in_time,
        format!("{} cases over 4 attack families, failures {failures:?}, {time}", 4 * cases_per_family),
    )
}

// A-9

fn persistence_and_determinism() -> Verdict {
    let dir = tempfile::tempdir().expect("temp dir");
    let mut notes = Vec::new();
    let mut ok = true;

    let data = make_synthetic(SyntheticKind::TinyImages, 96, 5).expect("synthetic data");
    let mut cfg = ExperimentConfig::preset("mnist-standard-desk").expect("preset");
    cfg.full_iterations = 40;
    cfg.divisor = 1;
    cfg.train.batch_size = 16;
    cfg.train.monitor.loss_every = 10;
    cfg.train.monitor.accuracy_every = 20;
    cfg.train.seed = 11;
    let tc = cfg.resolved_train();
    let a = train(&tc, &data, None, &[], None).expect("training runs");
    let b = train(&tc, &data, None, &[], None).expect("training runs");
    let same_metrics = a.metrics.csv_body() == b.metrics.csv_body() && !a.metrics.records.is_empty();
    ok &= same_metrics;
    notes.push(format!("identical metrics {same_metrics}"));

    let path = dir.path().join("d.ckpt");
    Checkpoint::from_outcome(&a, cfg.to_text()).save(&path).expect("save");
    let loaded = Checkpoint::load(&path).expect("load").into_discriminator().expect("classifier present");
    let probe = data.images.slice_batch(0, 32);
    let before = a.discriminator.clone().with_mode(Mode::Inference).predict(&probe).expect("forward");
    let after = loaded.with_mode(Mode::Inference).predict(&probe).expect("forward");
    let bit_exact = before.data().iter().map(|v| v.to_bits()).eq(after.data().iter().map(|v| v.to_bits()));
    ok &= bit_exact;
    notes.push(format!("checkpoint forward bit-identical {bit_exact}"));

    let mnist = data_dir();
    for split in [Split::Train, Split::Test] {
        let (img, lbl) = split.file_names();
        let (img_path, lbl_path) = (mnist.join(img), mnist.join(lbl));
        let round_trip = load_idx(&img_path, &lbl_path).and_then(|ds| {
            let (oi, ol) = (dir.path().join(img), dir.path().join(lbl));
            write_idx(&ds, &oi, &ol)?;
            Ok(std::fs::read(&oi).ok() == std::fs::read(&img_path).ok() && std::fs::read(&ol).ok() == std::fs::read(&lbl_path).ok())
        });
        match round_trip {
            Ok(same) => {
                ok &= same;
                notes.push(format!("{img} byte-identical {same}"));
            }
            Err(e) => {
                ok = false;
                notes.push(format!("{img}: {e}"));
            }
        }
    }
    Verdict::new(ok, notes.join(", "))
}

// A-4, A-5, A-6, A-8 share the trained desk-scale models.

struct Desk {
    train: Dataset,
    test: Dataset,
    standard: Vec<TrainOutcome>,
    pgd: Vec<TrainOutcome>,
    advnet: Vec<TrainOutcome>,
}

fn desk_config(preset: &str, divisor: u64, seed: u64) -> TrainConfig {
    let mut c = ExperimentConfig::preset(preset).expect("preset");
    c.divisor = divisor;
    c.train.seed = seed;
    c.train.minimax.g_updates_per_d = ADVNET_G_UPDATES;
    c.resolved_train()
}

fn train_desk(preset: &str, divisor: u64, train_set: &Dataset, test: &Dataset) -> Vec<TrainOutcome> {
    SEEDS
        .iter()
        .map(|&seed| {
            let cfg = desk_config(preset, divisor, seed);
            let t = Instant::now();
            let out = train(&cfg, train_set, Some(test), &[], None).unwrap_or_else(|e| panic!("{preset} seed {seed}: {e}"));
            let dir = artifacts().join(format!("{preset}-seed{seed}"));
            std::fs::create_dir_all(&dir).expect("run directory");
            Checkpoint::from_outcome(&out, format!("{preset} seed {seed}")).save(&dir.join("model.ckpt")).expect("checkpoint");
            out.metrics.write_csv(&dir.join("metrics.csv")).expect("metrics");
            println!("    trained {preset} seed {seed}: {} iterations in {:.0} s", cfg.iterations, t.elapsed().as_secs_f64());
            out
        })
        .collect()
}

fn load_desk() -> Result<Desk, String> {
    let dir = data_dir();
    let train_set = load_mnist(&dir, Split::Train, Some(TRAIN_SAMPLES)).map_err(|e| format!("MNIST training split: {e}"))?;
    let test = load_mnist(&dir, Split::Test, Some(TEST_SAMPLES)).map_err(|e| format!("MNIST test split: {e}"))?;
    let standard = train_desk("mnist-standard-desk", STANDARD_DIVISOR, &train_set, &test);
    let pgd = train_desk("mnist-pgd-desk", PGD_DIVISOR, &train_set, &test);
    let advnet = train_desk("mnist-advnet-desk", ADVNET_DIVISOR, &train_set, &test);
    Ok(Desk {
        train: train_set,
        test,
        standard,
        pgd,
        advnet,
    })
}

fn named(id: &str, o: &TrainOutcome) -> NamedModel {
    NamedModel::new(id, o.discriminator.clone())
}

/// Clean, FGS and PGD accuracy of one model on the desk test set.
fn white_box(id: &str, o: &TrainOutcome, test: &Dataset) -> [f64; 3] {
    let specs = [AttackSpec::fgs(EPS), AttackSpec::pgd(EPS)];
    let cells = white_box_eval(&named(id, o), test, &specs, None, &PixelBox::default(), 0).expect("white-box evaluation");
    [cells[0].accuracy, cells[1].accuracy, cells[2].accuracy]
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v[v.len() / 2]
}

fn robustness_ordering(desk: &Desk, rows: &mut Vec<[[f64; 3]; 3]>) -> Verdict {
    for i in 0..SEEDS.len() {
        rows.push([
            white_box("A", &desk.standard[i], &desk.test),
            white_box("B", &desk.pgd[i], &desk.test),
            white_box("C", &desk.advnet[i], &desk.test),
        ]);
    }
    let med = |m: usize, k: usize| median(rows.iter().map(|r| r[m][k]).collect());
    let (a_clean, a_fgs, a_pgd) = (med(0, 0), med(0, 1), med(0, 2));
    let (b_pgd, c_clean, c_fgs) = (med(1, 2), med(2, 0), med(2, 1));
    let pass = a_clean >= 0.95 && c_clean >= 0.95 && c_fgs - a_fgs >= 0.30 && b_pgd - a_pgd >= 0.30;
    let per_seed: Vec<String> = rows
        .iter()
        .zip(SEEDS)
        .map(|(r, s)| format!("seed {s}: A {:.3}/{:.3}/{:.3} B {:.3}/{:.3}/{:.3} C {:.3}/{:.3}/{:.3}", r[0][0], r[0][1], r[0][2], r[1][0], r[1][1], r[1][2], r[2][0], r[2][1], r[2][2]))
        .collect();
    Verdict::new(
        pass,
        format!(
            "medians: clean A {a_clean:.4} C {c_clean:.4}; FGS C-A {:+.4}; PGD B-A {:+.4} (clean/FGS/PGD per seed: {})",
            c_fgs - a_fgs,
            b_pgd - a_pgd,
            per_seed.join("; ")
        ),
    )
}

fn attack_strength(rows: &[[[f64; 3]; 3]]) -> Verdict {
    let ok = rows.iter().all(|r| r[0][2] <= r[0][1] && r[0][1] <= r[0][0]);
    let detail: Vec<String> = rows
        .iter()
        .zip(SEEDS)
        .map(|(r, s)| format!("seed {s}: PGD {:.4} <= FGS {:.4} <= clean {:.4}", r[0][2], r[0][1], r[0][0]))
        .collect();
    Verdict::new(ok, detail.join("; "))
}

fn generator_power(desk: &Desk) -> Verdict {
    let t = Instant::now();
    let target = &desk.standard[0].discriminator;
    let mut c = ExperimentConfig::preset("mnist-genattack-desk").expect("preset");
    c.divisor = 1;
    c.full_iterations = GENATTACK_ITERATIONS;
    c.full_lr_drop_at = Vec::new();
    let cfg = c.resolved_train();
    let out = train(&cfg, &desk.train, Some(&desk.test), &[], Some(target)).expect("generator training");
    let g = out.generator.as_ref().expect("generator-only run keeps its generator");
    let spec = AttackSpec::generator(EPS, None);
    let adv = run_attack(target, &desk.test.images, &desk.test.labels, &spec, Some(g), &PixelBox::default(), 0).expect("generator attack");
    let clean = accuracy(target, &desk.test).expect("accuracy");
    let attacked = accuracy_on(target, &adv, &desk.test.labels).expect("accuracy");
    let (in_time, time) = within(t.elapsed(), 1200.0);
    Verdict::new(
        attacked <= 0.5 * clean && in_time,
        format!("{} iterations: accuracy {attacked:.4} vs clean {clean:.4} (ratio {:.3}), {time}", cfg.iterations, attacked / clean),
    )
}

fn transfer_protocol(desk: &Desk) -> Verdict {
    let defenses = vec![
        named("A", &desk.standard[0]),
        named("B", &desk.pgd[0]),
        named("C", &desk.advnet[0]),
        named("A'", &desk.standard[1]),
        named("B'", &desk.pgd[1]),
        named("C'", &desk.advnet[1]),
    ];
    let surrogates = defenses[3..].to_vec();
    let specs = [AttackSpec::fgs(EPS), AttackSpec::pgd(EPS)];
    let out = artifacts().join("transfer");
    let sets = out.join("advsets");
    std::fs::create_dir_all(&sets).expect("set directory");
    let b = PixelBox::default();
    let first = black_box_transfer(&defenses, &surrogates, &desk.test, &specs, &b, 0, Some(&sets), 1).expect("transfer matrix");
    let second = black_box_transfer(&defenses, &surrogates, &desk.test, &specs, &b, 0, None, 2).expect("transfer matrix");
    first.write_all(&out).expect("report files");
    let deterministic = first.to_csv() == second.to_csv() && first.to_json() == second.to_json();
    let mut consistent = true;
    for s in &surrogates {
        for a in ["fgs", "pgd"] {
            let wb = first.accuracy(&s.id, a, WHITE_BOX).expect("white-box cell");
            let st = first.accuracy(&s.id, a, &s.id).expect("self-transfer cell");
            consistent &= wb.to_bits() == st.to_bits();
        }
    }
    let complete = first.cells.len() == defenses.len() * (1 + specs.len()) + defenses.len() * surrogates.len() * specs.len();
    println!("{}", first.to_text_table());
    Verdict::new(
        deterministic && consistent && complete,
        format!(
            "{} cells, self-transfer equals white-box: {consistent}, repeat run identical: {deterministic}, strongest sources {:?}",
            first.cells.len(),
            first.strongest_transfer_source()
        ),
    )
}

fn run(id: &str, name: &str, selected: &dyn Fn(&str) -> bool, results: &mut Vec<bool>, f: impl FnOnce() -> Verdict) {
    if !selected(id) {
        return;
    }
    let t = Instant::now();
    let v = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
        let msg = e.downcast_ref::<String>().cloned().or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()));
        Verdict::new(false, format!("panicked: {}", msg.unwrap_or_default()))
    });
    println!("{id} {} {name} ({:.1} s): {}", if v.pass { "PASS" } else { "FAIL" }, t.elapsed().as_secs_f64(), v.detail);
    results.push(v.pass);
}

fn main() {
    let only = std::env::var("ADVNET_ACCEPTANCE").ok();
    let selected = move |id: &str| only.as_deref().is_none_or(|list| list.split(',').any(|s| s.trim() == id));
    let mut results = Vec::new();
    run("A-1", "gradient correctness", &selected, &mut results, gradient_correctness);
    run("A-2", "HVP exactness", &selected, &mut results, hvp_exactness);
    run("A-3", "stabilization mechanism", &selected, &mut results, stabilization);
    run("A-7", "perturbation bounds", &selected, &mut results, perturbation_bounds);
    run("A-9", "persistence and determinism", &selected, &mut results, persistence_and_determinism);

    let desk_ids = ["A-4", "A-5", "A-6", "A-8"];
    if desk_ids.iter().any(|id| selected(id)) {
        println!("training desk-scale MNIST models ({} seeds)", SEEDS.len());
        match catch_unwind(load_desk) {
            Ok(Ok(desk)) => {
                let mut rows = Vec::new();
                let needs_rows = selected("A-4") || selected("A-5");
                if needs_rows {
                    run("A-4", "desk-scale robustness ordering", &|_| true, &mut results, || robustness_ordering(&desk, &mut rows));
                    run("A-5", "attack-strength ordering", &selected, &mut results, || attack_strength(&rows));
                }
                run("A-6", "generator attack power", &selected, &mut results, || generator_power(&desk));
                run("A-8", "black-box protocol consistency", &selected, &mut results, || transfer_protocol(&desk));
            }
            Ok(Err(msg)) => {
                for id in desk_ids.into_iter().filter(|id| selected(id)) {
                    println!("{id} FAIL desk-scale MNIST: {msg} (set ADVNET_DATA_DIR)");
                    results.push(false);
                }
            }
            Err(_) => {
                for id in desk_ids.into_iter().filter(|id| selected(id)) {
                    println!("{id} FAIL desk-scale MNIST: training panicked");
                    results.push(false);
                }
            }
        }
    }
    let failed = results.iter().filter(|p| !**p).count();
    println!("acceptance: {} passed, {failed} failed", results.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
