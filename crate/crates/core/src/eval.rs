//! White-box and transfer evaluation of classifiers, and report output.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attack::{apply_perturbation, fgs_attack, least_likely_attack, pgd_attack, AttackFamily, AttackSpec, PixelBox};
use crate::checkpoint::{AdversarialSet, AdversarialSetMeta};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::minimax::generator_input_for;
use crate::nn::{Mode, Model};
use crate::tensor::Tensor;

/// Rows per forward pass during evaluation.
pub const EVAL_CHUNK: usize = 250;

/// Source label of cells whose attack ran against the evaluated model.
pub const WHITE_BOX: &str = "white-box";

/// Attack label of clean-accuracy cells.
pub const NO_ATTACK: &str = "none";

fn inference(model: &Model<f32>) -> Model<f32> {
    model.clone().with_mode(Mode::Inference)
}

fn check_classes(model: &Model<f32>, classes: usize) -> Result<()> {
    let out = model.output_shape().iter().product::<usize>();
    if out != classes {
        return Err(Error::config(
            "eval.model",
            format!("{} predicts {out} classes but the data has {classes}", model.arch()),
        ));
    }
    Ok(())
}

/// Fraction of rows whose arg-max logit (lowest index on ties) equals the
/// label, with the model in inference mode.
pub fn accuracy_on(model: &Model<f32>, images: &Tensor<f32>, labels: &[usize]) -> Result<f64> {
    if images.batch() != labels.len() {
        return Err(Error::dim("accuracy", &[images.batch()], &[labels.len()]));
    }
    let m = inference(model);
    let mut correct = 0usize;
    for start in (0..labels.len()).step_by(EVAL_CHUNK) {
        let end = (start + EVAL_CHUNK).min(labels.len());
        let pred = m.predict(&images.slice_batch(start, end))?.argmax_rows();
        correct += pred.iter().zip(&labels[start..end]).filter(|(p, y)| p == y).count();
    }
    Ok(if labels.is_empty() { 0.0 } else { correct as f64 / labels.len() as f64 })
}

pub fn accuracy(model: &Model<f32>, data: &Dataset) -> Result<f64> {
    check_classes(model, data.classes)?;
    accuracy_on(model, &data.images, &data.labels)
}

/// Runs `spec` against `model` (inference mode) in row chunks. PGD draws its
/// random starts from a generator seeded with `seed`; generator attacks use
/// `generator` and, for noise inputs, the same seeded stream.
pub fn run_attack(
    model: &Model<f32>,
    images: &Tensor<f32>,
    labels: &[usize],
    spec: &AttackSpec,
    generator: Option<&Model<f32>>,
    pixel_box: &PixelBox,
    seed: u64,
) -> Result<Tensor<f32>> {
    spec.validate()?;
    let m = inference(model);
    let g = match spec.family {
        AttackFamily::Generator => Some(inference(
            generator.ok_or_else(|| Error::config("attack.generator", "generator attack without a generator model"))?,
        )),
        _ => None,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut parts = Vec::new();
    for start in (0..labels.len()).step_by(EVAL_CHUNK) {
        let end = (start + EVAL_CHUNK).min(labels.len());
        let (x, y) = (images.slice_batch(start, end), &labels[start..end]);
        parts.push(match spec.family {
            AttackFamily::Fgs => fgs_attack(&m, &x, y, spec, pixel_box)?,
            AttackFamily::Pgd => pgd_attack(&m, &x, y, spec, pixel_box, &mut rng)?,
            AttackFamily::LeastLikely => least_likely_attack(&m, &x, spec, pixel_box)?,
            AttackFamily::Generator => {
                let g = g.as_ref().expect("checked above");
                let input = generator_input_for(g, &x, y, &mut rng)?;
                let eps_data = pixel_box.to_data_scale(spec.eps) as f32;
                apply_perturbation(&x, &g.predict(&input)?, eps_data, pixel_box)?
            }
        });
    }
    if parts.is_empty() {
        return Ok(images.clone());
    }
    Tensor::concat(&parts.iter().collect::<Vec<_>>())
}

/// Short column label of an attack family.
pub fn attack_label(family: AttackFamily) -> &'static str {
    family.as_str()
}

fn attack_title(attack: &str) -> String {
    match attack {
        NO_ATTACK => "No Noise".into(),
        "fgs" => "FGS".into(),
        "pgd" => "PGD".into(),
        "least-likely" => "LL".into(),
        "generator" => "Gen".into(),
        other => other.into(),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub defense: String,
    pub attack: String,
    /// [`WHITE_BOX`] or the identifier of the surrogate model.
    pub source: String,
    pub accuracy: f64,
    pub n: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ReportMeta {
    pub eps: f64,
    pub seeds: Vec<u64>,
    pub bn_mode: String,
    pub dataset: String,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub meta: ReportMeta,
    pub cells: Vec<Cell>,
}

impl EvalReport {
    pub fn new(meta: ReportMeta) -> Self {
        Self { meta, cells: Vec::new() }
    }

    pub fn cell(&self, defense: &str, attack: &str, source: &str) -> Option<&Cell> {
        self.cells.iter().find(|c| c.defense == defense && c.attack == attack && c.source == source)
    }

    pub fn accuracy(&self, defense: &str, attack: &str, source: &str) -> Option<f64> {
        self.cell(defense, attack, source).map(|c| c.accuracy)
    }

    /// Defense ids in first-appearance order.
    pub fn defenses(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for c in &self.cells {
            if !out.contains(&c.defense) {
                out.push(c.defense.clone());
            }
        }
        out
    }

    /// Column keys: clean, then white-box attacks, then transfer attacks
    /// grouped by source, each group in first-appearance order.
    pub fn columns(&self) -> Vec<(String, String)> {
        let mut white: Vec<(String, String)> = Vec::new();
        let mut by_source: Vec<(String, Vec<String>)> = Vec::new();
        for c in &self.cells {
            if c.source == WHITE_BOX {
                let key = (c.attack.clone(), c.source.clone());
                if !white.contains(&key) {
                    white.push(key);
                }
            } else {
                match by_source.iter_mut().find(|(s, _)| *s == c.source) {
                    Some((_, attacks)) if !attacks.contains(&c.attack) => attacks.push(c.attack.clone()),
                    Some(_) => {}
                    None => by_source.push((c.source.clone(), vec![c.attack.clone()])),
                }
            }
        }
        white.sort_by_key(|(a, _)| a != NO_ATTACK);
        let mut cols = white;
        for (source, attacks) in by_source {
            cols.extend(attacks.into_iter().map(|a| (a, source.clone())));
        }
        cols
    }

    /// One line per cell: `defense,attack,source,accuracy,n`.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("defense,attack,source,accuracy,n\n");
        for c in &self.cells {
            let _ = writeln!(s, "{},{},{},{:.6},{}", c.defense, c.attack, c.source, c.accuracy, c.n);
        }
        s
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        serde_json::from_str(s).map_err(|e| Error::Format {
            offset: e.column() as u64,
            message: format!("report json: {e}"),
        })
    }

    /// Accuracies in percent, one row per defense, white-box columns first.
    pub fn to_text_table(&self) -> String {
        let cols = self.columns();
        let header: Vec<String> = cols
            .iter()
            .map(|(a, s)| if s == WHITE_BOX { attack_title(a) } else { format!("{}({s})", attack_title(a)) })
            .collect();
        let rows = self.defenses();
        let first = rows.iter().map(|r| r.len()).chain(["Defense".len()]).max().unwrap_or(7);
        let widths: Vec<usize> = header.iter().map(|h| h.len().max(8)).collect();
        let mut out = format!("{:<first$}", "Defense");
        for (h, w) in header.iter().zip(&widths) {
            let _ = write!(out, " | {h:>w$}");
        }
        out.push('\n');
        out.push_str(&"-".repeat(first));
        for w in &widths {
            out.push_str(&format!("-+-{}", "-".repeat(*w)));
        }
        out.push('\n');
        for r in rows {
            let _ = write!(out, "{r:<first$}");
            for ((a, s), w) in cols.iter().zip(&widths) {
                let cell = self.accuracy(&r, a, s).map_or("-".to_string(), |v| format!("{:.2}%", 100.0 * v));
                let _ = write!(out, " | {cell:>w$}");
            }
            out.push('\n');
        }
        out
    }

    /// For each defense, the transfer source whose attacks hurt it most.
    /// Ties go to the first source in column order.
    pub fn strongest_transfer_source(&self) -> BTreeMap<String, String> {
        let mut out = BTreeMap::new();
        for d in self.defenses() {
            let mut best: Option<(&str, f64)> = None;
            for c in self.cells.iter().filter(|c| c.defense == d && c.source != WHITE_BOX) {
                if best.is_none_or(|(_, acc)| c.accuracy < acc) {
                    best = Some((&c.source, c.accuracy));
                }
            }
            if let Some((s, _)) = best {
                out.insert(d, s.to_string());
            }
        }
        out
    }

    /// Writes `report.csv`, `report.json` and `report.txt` into `dir`.
    pub fn write_all(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for (name, body) in [("report.csv", self.to_csv()), ("report.json", self.to_json()), ("report.txt", self.to_text_table())] {
            let p = dir.join(name);
            std::fs::write(&p, body).map_err(|e| Error::io(&p, e))?;
        }
        Ok(())
    }
}

/// A named classifier taking part in an evaluation.
#[derive(Clone, Debug)]
pub struct NamedModel {
    pub id: String,
    pub model: Model<f32>,
}

impl NamedModel {
    pub fn new(id: impl Into<String>, model: Model<f32>) -> Self {
        Self { id: id.into(), model }
    }
}

/// Clean accuracy plus one cell per attack, each attack run against the
/// evaluated model itself.
pub fn white_box_eval(
    defense: &NamedModel,
    data: &Dataset,
    specs: &[AttackSpec],
    generator: Option<&Model<f32>>,
    pixel_box: &PixelBox,
    seed: u64,
) -> Result<Vec<Cell>> {
    check_classes(&defense.model, data.classes)?;
    let n = data.len();
    let mut cells = vec![Cell {
        defense: defense.id.clone(),
        attack: NO_ATTACK.into(),
        source: WHITE_BOX.into(),
        accuracy: accuracy_on(&defense.model, &data.images, &data.labels)?,
        n,
    }];
    for spec in specs {
        let adv = run_attack(&defense.model, &data.images, &data.labels, spec, generator, pixel_box, seed)?;
        cells.push(Cell {
            defense: defense.id.clone(),
            attack: attack_label(spec.family).into(),
            source: WHITE_BOX.into(),
            accuracy: accuracy_on(&defense.model, &adv, &data.labels)?,
            n,
        });
    }
    Ok(cells)
}

/// Attacks `source` once and packages the result with its provenance.
pub fn materialize(source: &NamedModel, data: &Dataset, spec: &AttackSpec, pixel_box: &PixelBox, seed: u64) -> Result<AdversarialSet> {
    check_classes(&source.model, data.classes)?;
    let images = run_attack(&source.model, &data.images, &data.labels, spec, None, pixel_box, seed)?;
    Ok(AdversarialSet {
        meta: AdversarialSetMeta {
            source: source.id.clone(),
            attack: spec.clone(),
            seed,
            dataset: data.split.clone(),
        },
        images,
        labels: data.labels.clone(),
        classes: data.classes,
    })
}

/// Maps `f` over `items` on up to `jobs` threads, keeping input order.
fn par_map<I: Sync, R: Send>(items: &[I], jobs: usize, f: impl Fn(&I) -> Result<R> + Sync) -> Result<Vec<R>> {
    if jobs <= 1 || items.len() <= 1 {
        return items.iter().map(f).collect();
    }
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<Result<R>>>> = Mutex::new((0..items.len()).map(|_| None).collect());
    std::thread::scope(|s| {
        for _ in 0..jobs.min(items.len()) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                let Some(item) = items.get(i) else { break };
                let r = f(item);
                slots.lock().expect("no worker panicked")[i] = Some(r);
            });
        }
    });
    slots
        .into_inner()
        .expect("no worker panicked")
        .into_iter()
        .map(|r| r.expect("every item processed"))
        .collect()
}

/// Full protocol: white-box rows for every defense, then every
/// (surrogate, attack) adversarial set generated once, written to
/// `set_dir` when given and read back, and scored on every defense.
/// Work is spread over `jobs` threads; the report order does not depend
/// on it.
#[allow(clippy::too_many_arguments)]
pub fn black_box_transfer(
    defenses: &[NamedModel],
    surrogates: &[NamedModel],
    data: &Dataset,
    specs: &[AttackSpec],
    pixel_box: &PixelBox,
    seed: u64,
    set_dir: Option<&Path>,
    jobs: usize,
) -> Result<EvalReport> {
    if specs.is_empty() {
        return Err(Error::config("eval.attacks", "no attacks configured"));
    }
    let mut report = EvalReport::new(ReportMeta {
        eps: specs[0].eps,
        seeds: vec![seed],
        bn_mode: Mode::Inference.as_str().into(),
        dataset: data.split.clone(),
    });
    for row in par_map(defenses, jobs, |d| white_box_eval(d, data, specs, None, pixel_box, seed))? {
        report.cells.extend(row);
    }
    let pairs: Vec<(&NamedModel, &AttackSpec)> = surrogates.iter().flat_map(|s| specs.iter().map(move |spec| (s, spec))).collect();
    let columns = par_map(&pairs, jobs, |&(s, spec)| {
        let mut set = materialize(s, data, spec, pixel_box, seed)?;
        if let Some(dir) = set_dir {
            let path = dir.join(format!("{}-{}.advset", sanitize(&s.id), attack_label(spec.family)));
            set.save(&path)?;
            set = AdversarialSet::load(&path)?;
        }
        defenses
            .iter()
            .map(|d| {
                check_classes(&d.model, set.classes)?;
                Ok(Cell {
                    defense: d.id.clone(),
                    attack: attack_label(spec.family).into(),
                    source: s.id.clone(),
                    accuracy: accuracy_on(&d.model, &set.images, &set.labels)?,
                    n: set.labels.len(),
                })
            })
            .collect::<Result<Vec<_>>>()
    })?;
    report.cells.extend(columns.into_iter().flatten());
    Ok(report)
}

/// File-name-safe form of a model id (`A'` becomes `A_prime`).
pub fn sanitize(id: &str) -> String {
    id.chars()
        .flat_map(|c| match c {
            '\'' => "_prime".chars().collect::<Vec<_>>(),
            c if c.is_ascii_alphanumeric() || c == '-' || c == '_' => vec![c],
            _ => vec!['_'],
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{make_synthetic, SyntheticKind};
    use crate::nn::LayerSpec;
    use crate::zoo::{build_network_for, ArchitectureId, Family};

    fn constant_model(classes: usize) -> Model<f32> {
        let mut m = Model::sequential("const", &[8, 8, 1], &[LayerSpec::reshape(&[64]), LayerSpec::dense(classes)], &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        m.params_mut().fill(0.0);
        m
    }

    fn balanced(n_per_class: usize) -> Dataset {
        let n = 10 * n_per_class;
        let images = Tensor::zeros(&[n, 8, 8, 1]);
        Dataset::new(images, (0..n).map(|i| i % 10).collect(), 10, "balanced").unwrap()
    }

    #[test]
    fn constant_logits_score_one_over_classes() {
        // Every tie goes to class 0, which holds a tenth of the labels.
        assert_eq!(accuracy(&constant_model(10), &balanced(7)).unwrap(), 0.1);
    }

    #[test]
    fn lookup_model_scores_one() {
        // Image i carries its label as the value of pixel `label`.
        let n = 30;
        let labels: Vec<usize> = (0..n).map(|i| (i * 7) % 10).collect();
        let mut images = Tensor::zeros(&[n, 8, 8, 1]);
        for (i, &y) in labels.iter().enumerate() {
            images.data_mut()[i * 64 + y] = 1.0;
        }
        let data = Dataset::new(images, labels, 10, "lookup").unwrap();
        let mut m = constant_model(10);
        for c in 0..10 {
            m.params_mut()[c * 10 + c] = 1.0;
        }
        assert_eq!(accuracy(&m, &data).unwrap(), 1.0);
    }

    #[test]
    fn class_count_mismatch_is_config_error() {
        assert!(matches!(accuracy(&constant_model(3), &balanced(1)), Err(Error::Config { .. })));
    }

    fn tiny_d1(seed: u64) -> NamedModel {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        NamedModel::new(format!("M{seed}"), build_network_for(&ArchitectureId::new(Family::D1), &[8, 8, 1], &mut rng).unwrap())
    }

    #[test]
    fn zero_budget_rows_equal_clean_accuracy() {
        let data = make_synthetic(SyntheticKind::TinyImages, 40, 2).unwrap();
        let specs = [AttackSpec::fgs(0.0), AttackSpec::pgd(0.0), AttackSpec::least_likely(0.0)];
        let cells = white_box_eval(&tiny_d1(1), &data, &specs, None, &PixelBox::default(), 0).unwrap();
        assert_eq!(cells.len(), 4);
        for c in &cells {
            assert_eq!(c.accuracy, cells[0].accuracy);
            assert_eq!(c.n, 40);
        }
    }

    #[test]
    fn self_transfer_matches_white_box_bit_for_bit() {
        let data = make_synthetic(SyntheticKind::TinyImages, 30, 4).unwrap();
        let models = [tiny_d1(1), tiny_d1(2)];
        let specs = [AttackSpec::fgs(0.3), AttackSpec::pgd(0.3)];
        let dir = tempfile::tempdir().unwrap();
        let r = black_box_transfer(&models, &models, &data, &specs, &PixelBox::default(), 9, Some(dir.path()), 1).unwrap();
        for m in &models {
            for a in ["fgs", "pgd"] {
                let wb = r.accuracy(&m.id, a, WHITE_BOX).unwrap();
                let st = r.accuracy(&m.id, a, &m.id).unwrap();
                assert_eq!(wb.to_bits(), st.to_bits());
            }
        }
        assert!(dir.path().join("M1-pgd.advset").exists());
        let again = black_box_transfer(&models, &models, &data, &specs, &PixelBox::default(), 9, None, 3).unwrap();
        assert_eq!(again.to_csv(), r.to_csv());
        assert_eq!(r.strongest_transfer_source().len(), 2);
    }

    fn sample_report() -> EvalReport {
        let cell = |d: &str, a: &str, s: &str, acc: f64| Cell {
            defense: d.into(),
            attack: a.into(),
            source: s.into(),
            accuracy: acc,
            n: 100,
        };
        EvalReport {
            meta: ReportMeta {
                eps: 0.3,
                seeds: vec![0, 1],
                bn_mode: "inference".into(),
                dataset: "mnist:test".into(),
            },
            cells: vec![
                cell("A", "fgs", WHITE_BOX, 0.25),
                cell("A", NO_ATTACK, WHITE_BOX, 0.99),
                cell("A", "pgd", WHITE_BOX, 0.0),
                cell("A", "fgs", "B'", 0.7),
                cell("A", "pgd", "B'", 0.8),
                cell("A", "fgs", "A'", 0.3),
            ],
        }
    }

    #[test]
    fn csv_has_one_line_per_cell() {
        let csv = sample_report().to_csv();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "defense,attack,source,accuracy,n");
        assert_eq!(lines.len(), 7);
        assert_eq!(lines[1], "A,fgs,white-box,0.250000,100");
    }

    #[test]
    fn json_round_trips() {
        let r = sample_report();
        assert_eq!(EvalReport::from_json(&r.to_json()).unwrap(), r);
        assert!(EvalReport::from_json("{").is_err());
    }

    #[test]
    fn text_table_column_order() {
        let t = sample_report().to_text_table();
        let header = t.lines().next().unwrap();
        let order: Vec<&str> = header.split('|').map(str::trim).collect();
        assert_eq!(order, ["Defense", "No Noise", "FGS", "PGD", "FGS(B')", "PGD(B')", "FGS(A')"]);
        assert!(t.lines().nth(2).unwrap().contains("99.00%"));
        assert_eq!(sample_report().strongest_transfer_source()["A"], "A'");
    }

    #[test]
    fn sanitized_ids_are_file_safe() {
        assert_eq!(sanitize("A'"), "A_prime");
        assert_eq!(sanitize("C seed/2"), "C_seed_2");
    }
}
