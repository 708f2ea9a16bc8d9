//! Experiment orchestration: configuration, the on-disk results store with a
//! manifest for idempotent re-runs, the staged train → distill → evaluate →
//! summarize pipeline, and the alpha-ablation sweep.
//!
//! Evaluation walks the epsilon grid in ascending order. Certified upper
//! bounds carry a running per-example maximum (box nesting makes the true
//! bound monotone; the running maximum makes the reported one exactly so),
//! and disagreement attacks at each epsilon are seeded with the witness from
//! the previous, smaller epsilon, so agreement is nonincreasing per example.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::attacks::{emp_lb, AttackConfig, InputRegion};
use crate::bounds::{faith_ub_with, oracle_delta_grid, BoundMethod, FaithfulnessRecord};
use crate::data::{
    generate_synthetic2d, generate_synthetic_images, ingest_idx, Dataset, Split, Synthetic2dSpec,
    SyntheticImageSpec,
};
use crate::distillation::{adversarial_train, distill, DistillationConfig, Method, TrainingRecipe};
use crate::error::{Error, Result};
use crate::metrics::{
    agreement_records, histogram, summarize, summarize_group, AgreementRecord, SummaryTable,
};
use crate::network::{ArchPreset, FeedForwardNetwork, TeacherStudentPair};

/// Where the train/test splits come from.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DatasetSpec {
    /// Local IDX files (the MNIST distribution format).
    Idx {
        train_images: PathBuf,
        train_labels: PathBuf,
        test_images: PathBuf,
        test_labels: PathBuf,
        class_count: usize,
    },
    Synthetic2d { spec: Synthetic2dSpec },
    SyntheticImages { spec: SyntheticImageSpec },
}

impl DatasetSpec {
    pub fn load(&self, seed: u64) -> Result<(Dataset, Dataset)> {
        match self {
            DatasetSpec::Idx { train_images, train_labels, test_images, test_labels, class_count } => {
                let train = ingest_idx(train_images, train_labels, *class_count, Split::Train)?;
                let test = ingest_idx(test_images, test_labels, *class_count, Split::Test)?;
                Ok((train, test))
            }
            DatasetSpec::Synthetic2d { spec } => generate_synthetic2d(spec, seed),
            DatasetSpec::SyntheticImages { spec } => generate_synthetic_images(spec, seed),
        }
    }
}

/// Teacher adversarial-training stage parameters.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TeacherSpec {
    pub recipe: TrainingRecipe,
    pub epsilon: f64,
    pub attack: AttackConfig,
}

/// Full experiment description; hashable for the run manifest.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub dataset: DatasetSpec,
    pub teacher_arch: ArchPreset,
    pub student_arch: ArchPreset,
    pub teacher: TeacherSpec,
    /// One distillation configuration per method; methods must be distinct.
    pub students: Vec<DistillationConfig>,
    /// Ascending evaluation radii.
    pub epsilon_grid: Vec<f64>,
    /// Evaluation subset size; 0 means the full test split.
    pub eval_count: usize,
    pub bound_method: BoundMethod,
    /// Grid resolution for the exhaustive oracle; only honoured for inputs
    /// of dimension at most 2.
    pub oracle_resolution: Option<usize>,
    pub output_dir: PathBuf,
    pub seed: u64,
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.students.is_empty() {
            return Err(Error::InvalidParameter("at least one student method required".into()));
        }
        let mut methods: Vec<Method> = Vec::new();
        for s in &self.students {
            if methods.contains(&s.method) {
                return Err(Error::InvalidParameter("duplicate student methods".into()));
            }
            methods.push(s.method);
        }
        if self.epsilon_grid.is_empty()
            || self.epsilon_grid.windows(2).any(|w| w[0] >= w[1])
            || self.epsilon_grid.iter().any(|e| !e.is_finite() || *e < 0.0)
        {
            return Err(Error::InvalidParameter(
                "epsilon grid must be nonempty, nonnegative, and strictly ascending".into(),
            ));
        }
        self.teacher.recipe.validate()?;
        for s in &self.students {
            s.validate()?;
        }
        Ok(())
    }

    /// SHA-256 over every field that affects results (the output directory
    /// is excluded).
    pub fn manifest_hash(&self) -> Result<String> {
        let mut clone = self.clone();
        clone.output_dir = PathBuf::new();
        let json = serde_json::to_string(&clone)?;
        let digest = Sha256::digest(json.as_bytes());
        Ok(format!("{digest:x}"))
    }

    fn dataset_name(&self) -> &'static str {
        match self.dataset {
            DatasetSpec::Idx { .. } => "idx",
            DatasetSpec::Synthetic2d { .. } => "synthetic2d",
            DatasetSpec::SyntheticImages { .. } => "synthetic-images",
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub config_hash: String,
    pub seed: u64,
    pub version: String,
    pub stages: BTreeMap<String, String>,
}

/// Directory layout of one experiment run.
#[derive(Debug, Clone)]
pub struct ResultsStore {
    pub root: PathBuf,
}

impl ResultsStore {
    pub fn open(root: impl Into<PathBuf>) -> Result<Self> {
        let root = root.into();
        fs::create_dir_all(root.join("models"))?;
        fs::create_dir_all(root.join("logs"))?;
        fs::create_dir_all(root.join("records"))?;
        Ok(Self { root })
    }

    pub fn manifest_path(&self) -> PathBuf {
        self.root.join("manifest.json")
    }

    pub fn model_path(&self, name: &str) -> PathBuf {
        self.root.join("models").join(format!("{name}.json"))
    }

    pub fn log_path(&self, name: &str) -> PathBuf {
        self.root.join("logs").join(format!("{name}.jsonl"))
    }

    pub fn records_path(&self, name: &str) -> PathBuf {
        self.root.join("records").join(format!("{name}.json"))
    }

    pub fn summary_csv_path(&self) -> PathBuf {
        self.root.join("summary.csv")
    }

    pub fn read_manifest(&self) -> Result<Option<Manifest>> {
        let path = self.manifest_path();
        if !path.exists() {
            return Ok(None);
        }
        Ok(Some(serde_json::from_str(&fs::read_to_string(path)?)?))
    }

    pub fn write_manifest(&self, manifest: &Manifest) -> Result<()> {
        fs::write(self.manifest_path(), serde_json::to_string_pretty(manifest)?)?;
        Ok(())
    }

    fn stage_done(&self, manifest: &Manifest, stage: &str) -> bool {
        manifest.stages.get(stage).is_some_and(|s| s == "done")
    }

    fn write_json<T: Serialize>(&self, path: &Path, value: &T) -> Result<()> {
        fs::write(path, serde_json::to_string_pretty(value)?)?;
        Ok(())
    }

    fn write_log(&self, name: &str, records: &[crate::distillation::EpochRecord]) -> Result<()> {
        let mut out = String::new();
        for r in records {
            out.push_str(&serde_json::to_string(r)?);
            out.push('\n');
        }
        fs::write(self.log_path(name), out)?;
        Ok(())
    }
}

/// Per-(method, epsilon) evaluation artifacts kept on disk.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct EvaluationRecords {
    method: String,
    epsilon: f64,
    faithfulness: Vec<FaithfulnessRecord>,
    agreement: Vec<AgreementRecord>,
    robust_flags: Vec<bool>,
}

fn eval_subset(test: &Dataset, count: usize) -> Dataset {
    if count == 0 {
        test.clone()
    } else {
        test.take(count)
    }
}

fn run_stage<F>(
    store: &ResultsStore,
    manifest: &mut Manifest,
    stage: &str,
    force: bool,
    f: F,
) -> Result<bool>
where
    F: FnOnce() -> Result<()>,
{
    if !force && store.stage_done(manifest, stage) {
        return Ok(false);
    }
    match f() {
        Ok(()) => {
            manifest.stages.insert(stage.to_string(), "done".to_string());
            store.write_manifest(manifest)?;
            Ok(true)
        }
        Err(e) => {
            manifest.stages.insert(stage.to_string(), format!("failed: {e}"));
            store.write_manifest(manifest)?;
            Err(Error::Stage { stage: stage.to_string(), detail: e.to_string() })
        }
    }
}

/// Evaluates one frozen pair over the epsilon grid. Returns per-epsilon
/// records with monotone certified bounds and nested disagreement witnesses.
fn evaluate_pair(
    pair: &TeacherStudentPair,
    eval: &Dataset,
    cfg: &ExperimentConfig,
    method: &str,
) -> Result<Vec<EvaluationRecords>> {
    let oracle_ok = eval.input_dim() <= 2 && cfg.oracle_resolution.is_some();
    let mut out = Vec::new();
    let mut running_ub = vec![0.0f64; eval.len()];
    let mut prev_witness: Vec<Option<Vec<f64>>> = vec![None; eval.len()];

    for (eps_idx, &eps) in cfg.epsilon_grid.iter().enumerate() {
        let attack = AttackConfig::fifty_step(eps, cfg.seed.wrapping_add(eps_idx as u64));
        let mut faithfulness = Vec::with_capacity(eval.len());
        for (i, x) in eval.inputs.iter().enumerate() {
            let region = InputRegion::unit_box(x.clone(), eps)?;
            let lb = emp_lb(pair, &region, &attack.for_example(i as u64))?;
            let ub = faith_ub_with(pair, &region, cfg.bound_method)?;
            running_ub[i] = if eps_idx == 0 { ub } else { running_ub[i].max(ub) };
            let oracle = if oracle_ok {
                Some(oracle_delta_grid(pair, &region, cfg.oracle_resolution.unwrap())?)
            } else {
                None
            };
            let record = FaithfulnessRecord {
                example_id: i,
                epsilon: eps,
                emp_lb: lb.objective_value,
                faith_ub: running_ub[i],
                oracle_delta: oracle,
            };
            record.validate()?;
            faithfulness.push(record);
        }

        let agreement = agreement_records(pair, eval, eps, &attack, Some(&prev_witness))?;
        for (slot, r) in prev_witness.iter_mut().zip(&agreement) {
            if let Some(w) = &r.witness {
                *slot = Some(w.clone());
            }
        }

        let mut robust_flags = Vec::with_capacity(eval.len());
        for (i, (x, &y)) in eval.inputs.iter().zip(&eval.labels).enumerate() {
            let region = InputRegion::unit_box(x.clone(), eps)?;
            let (flipped, _) = crate::attacks::robust_accuracy_attack(
                &pair.student,
                y,
                &region,
                &attack.for_example(i as u64),
            )?;
            robust_flags.push(!flipped);
        }

        out.push(EvaluationRecords {
            method: method.to_string(),
            epsilon: eps,
            faithfulness,
            agreement,
            robust_flags,
        });
    }
    Ok(out)
}

fn summarize_evaluations(
    dataset: &str,
    evaluations: &[EvaluationRecords],
) -> Result<(SummaryTable, BTreeMap<String, Vec<usize>>)> {
    let mut table = SummaryTable::default();
    let mut histograms = BTreeMap::new();
    for ev in evaluations {
        let faith_table = summarize(dataset, &ev.method, &ev.faithfulness)?;
        for row in faith_table.rows {
            table.push(row);
        }
        let agreement_terms: Vec<f64> =
            ev.agreement.iter().map(AgreementRecord::agreement_term).collect();
        if let Some(row) = summarize_group(dataset, &ev.method, ev.epsilon, "agreement", &agreement_terms) {
            table.push(row);
        }
        let robust: Vec<f64> = ev.robust_flags.iter().map(|&b| f64::from(b)).collect();
        if let Some(row) = summarize_group(dataset, &ev.method, ev.epsilon, "robust_acc", &robust) {
            table.push(row);
        }
        let emp: Vec<f64> = ev.faithfulness.iter().map(|r| r.emp_lb).collect();
        let ub: Vec<f64> = ev.faithfulness.iter().map(|r| r.faith_ub).collect();
        histograms.insert(format!("{}-eps{}-emp_lb", ev.method, ev.epsilon), histogram(&emp, 20));
        histograms.insert(format!("{}-eps{}-faith_ub", ev.method, ev.epsilon), histogram(&ub, 20));
    }
    table.sort();
    Ok((table, histograms))
}

/// Runs the full staged pipeline: teacher, students, evaluation, summary.
/// Completed stages are skipped when the manifest hash matches, unless
/// `force` is set; a changed configuration invalidates the old manifest.
pub fn run_pipeline(cfg: &ExperimentConfig, force: bool) -> Result<ResultsStore> {
    cfg.validate()?;
    let store = ResultsStore::open(&cfg.output_dir)?;
    let hash = cfg.manifest_hash()?;
    let mut manifest = match store.read_manifest()? {
        Some(m) if m.config_hash == hash && !force => m,
        _ => Manifest {
            config_hash: hash,
            seed: cfg.seed,
            version: env!("CARGO_PKG_VERSION").to_string(),
            stages: BTreeMap::new(),
        },
    };
    store.write_manifest(&manifest)?;

    let (train, test) = cfg.dataset.load(cfg.seed)?;
    let dataset_name = cfg.dataset_name().to_string();

    run_stage(&store, &mut manifest, "teacher", force, || {
        let init = FeedForwardNetwork::init(&cfg.teacher_arch, cfg.seed)?;
        let outcome = adversarial_train(
            init,
            &train,
            &test,
            &cfg.teacher.recipe,
            cfg.teacher.epsilon,
            &cfg.teacher.attack,
        )?;
        outcome.network.save(&store.model_path("teacher"))?;
        store.write_log("teacher", &outcome.log)
    })?;
    let teacher = FeedForwardNetwork::load(&store.model_path("teacher"))?;

    for student_cfg in &cfg.students {
        let name = format!("student-{}", student_cfg.method);
        run_stage(&store, &mut manifest, &format!("distill-{}", student_cfg.method), force, || {
            let outcome = distill(&teacher, &cfg.student_arch, &train, &test, student_cfg)?;
            outcome.network.save(&store.model_path(&name))?;
            store.write_log(&name, &outcome.log)
        })?;
    }

    let eval = eval_subset(&test, cfg.eval_count);
    let mut all_evaluations: Vec<EvaluationRecords> = Vec::new();
    for student_cfg in &cfg.students {
        let method = student_cfg.method.to_string();
        let stage = format!("evaluate-{method}");
        let records_name = format!("eval-{method}");
        run_stage(&store, &mut manifest, &stage, force, || {
            let student =
                FeedForwardNetwork::load(&store.model_path(&format!("student-{method}")))?;
            let pair = TeacherStudentPair::new(teacher.clone(), student)?;
            let evaluations = evaluate_pair(&pair, &eval, cfg, &method)?;
            store.write_json(&store.records_path(&records_name), &evaluations)
        })?;
        let stored: Vec<EvaluationRecords> =
            serde_json::from_str(&fs::read_to_string(store.records_path(&records_name))?)?;
        all_evaluations.extend(stored);
    }

    run_stage(&store, &mut manifest, "summarize", true, || {
        let (table, histograms) = summarize_evaluations(&dataset_name, &all_evaluations)?;
        fs::write(store.summary_csv_path(), table.to_csv())?;
        store.write_json(&store.root.join("summary.json"), &table)?;
        store.write_json(&store.root.join("histograms.json"), &histograms)
    })?;

    Ok(store)
}

/// Distills an FD student per alpha (other fields from the FD entry of the
/// config) and evaluates each over the epsilon grid; emits
/// `ablation.csv` alongside the main summary.
pub fn ablate_alpha(cfg: &ExperimentConfig, alphas: &[f64]) -> Result<ResultsStore> {
    cfg.validate()?;
    if alphas.is_empty() {
        return Err(Error::InvalidParameter("alpha list must be nonempty".into()));
    }
    let mut seen = alphas.to_vec();
    seen.sort_by(f64::total_cmp);
    if seen.windows(2).any(|w| w[0] == w[1]) {
        return Err(Error::InvalidParameter("duplicate alpha values".into()));
    }
    if alphas.iter().any(|a| !(0.0..=1.0).contains(a)) {
        return Err(Error::InvalidParameter("alpha values must lie in [0,1]".into()));
    }
    let fd = cfg
        .students
        .iter()
        .find(|s| s.method == Method::Fd)
        .ok_or_else(|| Error::InvalidParameter("ablation requires an FD student config".into()))?;

    let store = ResultsStore::open(&cfg.output_dir)?;
    let teacher_path = store.model_path("teacher");
    if !teacher_path.exists() {
        run_pipeline(cfg, false)?;
    }
    let teacher = FeedForwardNetwork::load(&teacher_path)?;
    let (train, test) = cfg.dataset.load(cfg.seed)?;
    let eval = eval_subset(&test, cfg.eval_count);
    let dataset_name = cfg.dataset_name().to_string();

    let mut evaluations = Vec::new();
    for &alpha in alphas {
        let mut student_cfg = fd.clone();
        student_cfg.alpha = alpha;
        let label = format!("fd-alpha{alpha}");
        let outcome = distill(&teacher, &cfg.student_arch, &train, &test, &student_cfg)?;
        outcome.network.save(&store.model_path(&format!("ablate-{label}")))?;
        store.write_log(&format!("ablate-{label}"), &outcome.log)?;
        let pair = TeacherStudentPair::new(teacher.clone(), outcome.network)?;
        evaluations.extend(evaluate_pair(&pair, &eval, cfg, &label)?);
    }
    let (table, _) = summarize_evaluations(&dataset_name, &evaluations)?;
    fs::write(store.root.join("ablation.csv"), table.to_csv())?;
    store.write_json(&store.root.join("ablation.json"), &table)?;
    Ok(store)
}

/// A small synthetic2d configuration that exercises every stage quickly;
/// used by tests and as a CLI template.
pub fn synthetic2d_config(output_dir: PathBuf, seed: u64) -> ExperimentConfig {
    let (recipe, teacher_eps, teacher_attack) = crate::distillation::synthetic2d_teacher_preset(seed);
    ExperimentConfig {
        dataset: DatasetSpec::Synthetic2d {
            spec: Synthetic2dSpec { train_count: 400, test_count: 80, ..Default::default() },
        },
        teacher_arch: ArchPreset::named("synthetic2d-teacher").expect("known preset"),
        student_arch: ArchPreset::named("synthetic2d-student").expect("known preset"),
        teacher: TeacherSpec { recipe, epsilon: teacher_eps, attack: teacher_attack },
        students: vec![
            crate::distillation::synthetic2d_distill_preset(Method::Sd, seed),
            crate::distillation::synthetic2d_distill_preset(Method::Fd, seed),
        ],
        epsilon_grid: vec![0.025, 0.05, 0.1],
        eval_count: 40,
        bound_method: BoundMethod::Interval,
        oracle_resolution: Some(128),
        output_dir,
        seed,
    }
}
