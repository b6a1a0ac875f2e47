//! Experiment drivers: fusion-mode ablation, data-efficiency sweep, cutout
//! robustness curves and half-slice training.
//!
//! A cell is one `(mode, pct, seed)` triple. Every cell of an experiment sees
//! the same patient split and the same nested training subset for a given pct.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::datamodel::{load_sample, split_patientwise, subsample_training, DatasetManifest, MaskGrid, SplitSpec, StudySample};
use crate::error::{Error, Result};
use crate::metrics::{wilcoxon_signed_rank, EvalItem, MetricsReport, PairedScores, RankPooling, BINARIZE_THRESHOLD};
use crate::network::{ArchitectureConfig, FusionMode};
use crate::preprocess::{apply_cutout, CutoutSpec, Preprocessing};
use crate::synthgen::{derive_seed, generate_dataset, load_exclusive, SceneSpec, EXCLUSIVE_FILE};
use crate::training::{select_top_checkpoints, train_samples, write_text, CheckpointRecord, Ensemble, RunArtifacts, RUN_FILE};

pub const REPORT_HEADER: &str = "mode,pct,seed,dice_mean,dice_std,hd95_mean,auroc,aupr,p_vs_baseline";
pub const CURVES_HEADER: &str = "mode,n_masks,aupr";
pub const CONFIG_ECHO: &str = "experiment_config.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetSource {
    /// Synthetic scenes written to `dir` (reused when its manifest and spec match).
    Generated { spec: SceneSpec, n_patients: usize, samples_per_patient: usize, seed: u64, dir: PathBuf },
    Existing(PathBuf),
}

const SPEC_ECHO: &str = "generator.json";

impl DatasetSource {
    pub fn prepare(&self) -> Result<DatasetManifest> {
        match self {
            DatasetSource::Existing(dir) => DatasetManifest::load(dir),
            DatasetSource::Generated { dir, .. } => {
                let echo = serde_json::to_string_pretty(self).expect("source serializes");
                let echo_path = dir.join(SPEC_ECHO);
                if fs::read_to_string(&echo_path).ok().as_deref() == Some(echo.as_str()) {
                    if let Ok(m) = DatasetManifest::load(dir) {
                        return Ok(m);
                    }
                }
                let DatasetSource::Generated { spec, n_patients, samples_per_patient, seed, .. } = self else { unreachable!() };
                let m = generate_dataset(spec, *n_patients, *samples_per_patient, *seed, dir)?;
                write_text(&echo_path, &echo)?;
                Ok(m)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub dataset: DatasetSource,
    pub arch: ArchitectureConfig,
    pub train: crate::training::TrainConfig,
    pub modes: Vec<FusionMode>,
    pub pcts: Vec<f64>,
    pub noise_levels: Vec<usize>,
    pub seeds: Vec<u64>,
    pub split_fractions: [f64; 3],
    pub split_seed: u64,
    pub baseline: FusionMode,
    pub rank_pooling: RankPooling,
    pub out_dir: PathBuf,
    /// Print one line per finished cell and every few epochs to stderr.
    #[serde(default)]
    pub verbose: bool,
}

impl ExperimentConfig {
    pub fn new(dataset: DatasetSource, out_dir: impl Into<PathBuf>) -> Self {
        Self {
            dataset,
            arch: ArchitectureConfig::default(),
            train: crate::training::TrainConfig::default(),
            modes: vec![FusionMode::VolumeOnly, FusionMode::Multiscale],
            pcts: vec![1.0],
            noise_levels: vec![0, 4, 8, 16, 32],
            seeds: vec![0, 1, 2],
            split_fractions: [0.6, 0.1, 0.3],
            split_seed: 0,
            baseline: FusionMode::VolumeOnly,
            rank_pooling: RankPooling::Pooled,
            out_dir: out_dir.into(),
            verbose: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.modes.is_empty() || self.seeds.is_empty() || self.pcts.is_empty() {
            return Err(Error::Config("experiment needs at least one mode, seed and pct".into()));
        }
        if let Some(p) = self.pcts.iter().find(|p| !(**p > 0.0 && **p <= 1.0)) {
            return Err(Error::Config(format!("pct {p} outside (0, 1]")));
        }
        self.train.validate()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellKey {
    pub mode: FusionMode,
    pub pct: f64,
    pub seed: u64,
}

impl CellKey {
    pub fn dir_name(&self) -> String {
        format!("{}_pct{:03}_seed{}", self.mode.name(), (self.pct * 100.0).round() as u32, self.seed)
    }
}

impl std::fmt::Display for CellKey {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{} pct={} seed={}", self.mode, self.pct, self.seed)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub report: MetricsReport,
    /// Fraction of 2D-exclusive mask pixels predicted positive, pooled over samples.
    pub exclusive_recall: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub key: CellKey,
    pub run_dir: PathBuf,
    /// Ensemble members used for evaluation.
    pub checkpoints: Vec<CheckpointRecord>,
    pub outcome: std::result::Result<Evaluation, String>,
    pub p_vs_baseline: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportTable {
    pub baseline: FusionMode,
    pub rows: Vec<ReportRow>,
    /// Patient lists per pct, for checking the nested-subset property.
    pub train_patients: BTreeMap<String, BTreeSet<String>>,
}

fn fmt_f(v: f64) -> String {
    format!("{v}")
}

impl ReportTable {
    pub fn row(&self, mode: FusionMode, pct: f64, seed: u64) -> Option<&ReportRow> {
        self.rows.iter().find(|r| r.key.mode == mode && r.key.pct == pct && r.key.seed == seed)
    }

    /// Seed-mean of a metric over the successful cells of `(mode, pct)`.
    pub fn seed_mean(&self, mode: FusionMode, pct: f64, metric: impl Fn(&Evaluation) -> f64) -> Option<f64> {
        let vals: Vec<f64> = self
            .rows
            .iter()
            .filter(|r| r.key.mode == mode && r.key.pct == pct)
            .filter_map(|r| r.outcome.as_ref().ok().map(&metric))
            .collect();
        (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
    }

    pub fn failed(&self) -> impl Iterator<Item = &ReportRow> {
        self.rows.iter().filter(|r| r.outcome.is_err())
    }

    pub fn to_csv(&self) -> String {
        let mut s = format!("{REPORT_HEADER}\n");
        for r in &self.rows {
            let k = &r.key;
            let _ = write!(s, "{},{},{},", k.mode, k.pct, k.seed);
            match &r.outcome {
                Ok(e) => {
                    let m = &e.report;
                    let p = r.p_vs_baseline.map(fmt_f).unwrap_or_default();
                    let _ = writeln!(s, "{},{},{},{},{},{p}", fmt_f(m.dice_mean), fmt_f(m.dice_std), fmt_f(m.hd95_mean), fmt_f(m.auroc), fmt_f(m.aupr));
                }
                Err(_) => s.push_str("failed,failed,failed,failed,failed,\n"),
            }
        }
        s
    }

    pub fn recall_csv(&self) -> String {
        let mut s = String::from("mode,pct,seed,exclusive_recall\n");
        for r in &self.rows {
            if let Ok(Evaluation { exclusive_recall: Some(v), .. }) = &r.outcome {
                let _ = writeln!(s, "{},{},{},{v}", r.key.mode, r.key.pct, r.key.seed);
            }
        }
        s
    }

    fn attach_p_values(&mut self) {
        let baseline: BTreeMap<(String, u64), BTreeMap<String, f64>> = self
            .rows
            .iter()
            .filter(|r| r.key.mode == self.baseline)
            .filter_map(|r| Some(((r.key.pct.to_string(), r.key.seed), r.outcome.as_ref().ok()?.report.per_sample_dice())))
            .collect();
        for r in &mut self.rows {
            if r.key.mode == self.baseline {
                continue;
            }
            let (Some(base), Ok(e)) = (baseline.get(&(r.key.pct.to_string(), r.key.seed)), &r.outcome) else { continue };
            r.p_vs_baseline = PairedScores::align(&e.report.per_sample_dice(), base).ok().map(|p| wilcoxon_signed_rank(&p));
        }
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write_text(&dir.join("report.csv"), &self.to_csv())?;
        write_text(&dir.join("exclusive_recall.csv"), &self.recall_csv())?;
        let failures: String = self.failed().map(|r| format!("{}: {}\n", r.key, r.outcome.as_ref().unwrap_err())).collect();
        write_text(&dir.join("failures.txt"), &failures)?;
        write_text(&dir.join("table.json"), &serde_json::to_string_pretty(self).expect("table serializes"))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join("table.json");
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Descriptor { path, reason: e.to_string() })
    }
}

/// A sample prepared for evaluation: raw data plus optional 2D-exclusive map.
#[derive(Debug, Clone)]
pub struct EvalSample {
    pub id: String,
    pub raw: StudySample,
    pub exclusive: Option<MaskGrid>,
}

pub fn load_eval_samples(manifest: &DatasetManifest, patients: &BTreeSet<String>) -> Result<Vec<EvalSample>> {
    let mut out = Vec::new();
    for e in manifest.samples.iter().filter(|e| patients.contains(&e.patient_id)) {
        let dir = manifest.root.join(&e.sample_dir);
        let raw = load_sample(&dir)?;
        let exclusive = if dir.join(EXCLUSIVE_FILE).exists() { Some(load_exclusive(&dir, raw.mask.dims())?) } else { None };
        out.push(EvalSample { id: e.sample_dir.clone(), raw, exclusive });
    }
    if out.is_empty() {
        return Err(Error::InvalidArgument("evaluation split has no samples".into()));
    }
    Ok(out)
}

/// Per-sample ensemble prediction and metrics. With `noise`, cutout is
/// applied to each raw volume before preprocessing, seeded per sample.
pub fn evaluate_ensemble(
    ensemble: &Ensemble,
    samples: &[EvalSample],
    pre: &Preprocessing,
    noise: Option<(&CutoutSpec, u64)>,
    pooling: RankPooling,
) -> Result<Evaluation> {
    let mut probs = Vec::with_capacity(samples.len());
    let mut prepared = Vec::with_capacity(samples.len());
    let (mut hit, mut total) = (0usize, 0usize);
    let mut have_exclusive = false;
    for (i, s) in samples.iter().enumerate() {
        let mut raw = s.raw.clone();
        if let Some((spec, seed)) = noise {
            raw.volume = apply_cutout(&raw.volume, spec, derive_seed(seed, i as u64))?;
        }
        let p = pre.apply(&raw)?;
        let prob = ensemble.predict(&p)?;
        if let Some(ex) = &s.exclusive {
            have_exclusive = true;
            for (&e, &q) in ex.data().iter().zip(prob.iter()) {
                if e == 1 {
                    total += 1;
                    hit += usize::from(q >= BINARIZE_THRESHOLD);
                }
            }
        }
        probs.push(prob);
        prepared.push(p);
    }
    let items: Vec<EvalItem<'_>> = samples
        .iter()
        .zip(&probs)
        .zip(&prepared)
        .map(|((s, prob), p)| EvalItem { id: &s.id, prob, target: &p.mask, spacing: p.spacing })
        .collect();
    let report = MetricsReport::evaluate(&items, pooling)?;
    let exclusive_recall = (have_exclusive && total > 0).then(|| hit as f64 / total as f64);
    Ok(Evaluation { report, exclusive_recall })
}

/// Loads the checkpoints as an ensemble and evaluates the given patients.
pub fn evaluate_model(
    checkpoints: &[CheckpointRecord],
    arch: &ArchitectureConfig,
    manifest: &DatasetManifest,
    patients: &BTreeSet<String>,
    noise: Option<(&CutoutSpec, u64)>,
    pre: &Preprocessing,
    pooling: RankPooling,
) -> Result<Evaluation> {
    let ensemble = Ensemble::load(checkpoints, arch)?;
    let samples = load_eval_samples(manifest, patients)?;
    evaluate_ensemble(&ensemble, &samples, pre, noise, pooling)
}

/// Dataset, split and preprocessed training/validation data shared by all cells.
pub struct Workspace {
    pub manifest: DatasetManifest,
    pub split: SplitSpec,
    prepared: BTreeMap<String, StudySample>,
    pub test: Vec<EvalSample>,
}

impl Workspace {
    pub fn open(cfg: &ExperimentConfig) -> Result<Self> {
        cfg.validate()?;
        let manifest = cfg.dataset.prepare()?;
        let split = split_patientwise(&manifest, cfg.split_fractions, cfg.split_seed)?;
        let mut prepared = BTreeMap::new();
        let both: BTreeSet<String> = split.train.union(&split.val).cloned().collect();
        for e in manifest.samples.iter().filter(|e| both.contains(&e.patient_id)) {
            let s = load_sample(&manifest.root.join(&e.sample_dir))?;
            prepared.insert(e.sample_dir.clone(), cfg.train.preprocess.apply(&s)?);
        }
        let test = load_eval_samples(&manifest, &split.test)?;
        Ok(Self { manifest, split, prepared, test })
    }

    pub fn subset(&self, pct: f64) -> Result<SplitSpec> {
        subsample_training(&self.split, pct, self.split.seed)
    }

    fn samples_of(&self, patients: &BTreeSet<String>) -> Vec<StudySample> {
        self.manifest
            .samples
            .iter()
            .filter(|e| patients.contains(&e.patient_id))
            .map(|e| self.prepared[&e.sample_dir].clone())
            .collect()
    }
}

fn run_cell(cfg: &ExperimentConfig, ws: &Workspace, key: &CellKey) -> (PathBuf, Vec<CheckpointRecord>, std::result::Result<Evaluation, String>) {
    let run_dir = cfg.out_dir.join("cells").join(key.dir_name());
    let mut ckpts = Vec::new();
    let result = (|| -> Result<Evaluation> {
        let split = ws.subset(key.pct)?;
        let arch = ArchitectureConfig { fusion_mode: key.mode, ..cfg.arch.clone() };
        let train_cfg = crate::training::TrainConfig { seed: key.seed, ..cfg.train.clone() };
        let verbose = cfg.verbose;
        let every = (train_cfg.epochs / 10).max(1);
        let mut progress = |e: &crate::training::EpochLog| {
            if verbose && (e.epoch % every == 0 || e.epoch == 1) {
                eprintln!("  [{key}] epoch {:>4} loss {:.4} val dice {:.4}", e.epoch, e.train_loss, e.val_dice);
            }
            std::ops::ControlFlow::Continue(())
        };
        let run = train_samples(&train_cfg, &arch, &ws.samples_of(&split.train), &ws.samples_of(&split.val), &run_dir, &mut progress)?;
        ckpts = select_top_checkpoints(&run.checkpoints, train_cfg.top_k);
        let ensemble = Ensemble::load(&ckpts, &run.arch)?;
        evaluate_ensemble(&ensemble, &ws.test, &train_cfg.preprocess, None, cfg.rank_pooling)
    })();
    if cfg.verbose {
        match &result {
            Ok(e) => eprintln!("[{key}] test dice {:.4} aupr {:.4}", e.report.dice_mean, e.report.aupr),
            Err(err) => eprintln!("[{key}] failed: {err}"),
        }
    }
    (run_dir, ckpts, result.map_err(|e| e.to_string()))
}

fn run_grid(cfg: &ExperimentConfig, ws: &Workspace) -> Result<ReportTable> {
    fs::create_dir_all(&cfg.out_dir).map_err(|e| Error::io(&cfg.out_dir, e))?;
    write_text(&cfg.out_dir.join(CONFIG_ECHO), &serde_json::to_string_pretty(cfg).expect("config serializes"))?;
    let mut train_patients = BTreeMap::new();
    for &pct in &cfg.pcts {
        train_patients.insert(pct.to_string(), ws.subset(pct)?.train);
    }
    let mut rows = Vec::new();
    for &pct in &cfg.pcts {
        for &seed in &cfg.seeds {
            for &mode in &cfg.modes {
                let key = CellKey { mode, pct, seed };
                let (run_dir, checkpoints, outcome) = run_cell(cfg, ws, &key);
                rows.push(ReportRow { key, run_dir, checkpoints, outcome, p_vs_baseline: None });
            }
        }
    }
    let mut table = ReportTable { baseline: cfg.baseline, rows, train_patients };
    table.attach_p_values();
    table.write(&cfg.out_dir)?;
    Ok(table)
}

/// Trains and evaluates every `(mode, pct, seed)` cell with p-values against the baseline mode.
pub fn run_ablation(cfg: &ExperimentConfig) -> Result<ReportTable> {
    let ws = Workspace::open(cfg)?;
    run_grid(cfg, &ws)
}

/// Same grid as [`run_ablation`]; smaller pcts train on nested subsets of larger ones.
pub fn run_data_efficiency(cfg: &ExperimentConfig) -> Result<ReportTable> {
    let table = run_ablation(cfg)?;
    let mut pcts = cfg.pcts.clone();
    pcts.sort_by(f64::total_cmp);
    for w in pcts.windows(2) {
        let (a, b) = (&table.train_patients[&w[0].to_string()], &table.train_patients[&w[1].to_string()]);
        if !a.is_subset(b) {
            return Err(Error::Invariant(format!("training subset at pct {} is not contained in pct {}", w[0], w[1])));
        }
    }
    if cfg.verbose {
        for &m in &cfg.modes {
            if let (Some(lo), Some(hi)) = (table.seed_mean(m, pcts[0], |e| e.report.dice_mean), table.seed_mean(m, pcts[pcts.len() - 1], |e| e.report.dice_mean)) {
                eprintln!("{m}: mean dice {lo:.4} at pct {} vs {hi:.4} at pct {}", pcts[0], pcts[pcts.len() - 1]);
            }
        }
    }
    Ok(table)
}

/// Training on every other B-scan (H slice); evaluation on full volumes and masks.
pub fn run_superres(cfg: &ExperimentConfig) -> Result<ReportTable> {
    let cfg = ExperimentConfig { train: crate::training::TrainConfig { train_slice_step: 2, ..cfg.train.clone() }, ..cfg.clone() };
    run_ablation(&cfg)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub mode: FusionMode,
    pub seed: u64,
    pub n_masks: usize,
    pub aupr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurveData {
    pub pct: f64,
    pub points: Vec<CurvePoint>,
}

impl CurveData {
    /// Seed-mean AUPR of `mode` at `n_masks`.
    pub fn mean_aupr(&self, mode: FusionMode, n_masks: usize) -> Option<f64> {
        let v: Vec<f64> = self.points.iter().filter(|p| p.mode == mode && p.n_masks == n_masks).map(|p| p.aupr).collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    }

    pub fn to_csv(&self) -> String {
        let mut keys: Vec<(String, usize)> = Vec::new();
        for p in &self.points {
            let k = (p.mode.name().to_string(), p.n_masks);
            if !keys.contains(&k) {
                keys.push(k);
            }
        }
        let mut s = format!("{CURVES_HEADER}\n");
        for (m, n) in keys {
            let mode = FusionMode::parse(&m).expect("own name");
            let _ = writeln!(s, "{m},{n},{}", self.mean_aupr(mode, n).expect("key present"));
        }
        s
    }
}

/// Base seed of the cutout boxes for one noise level and training seed.
/// Every mode trained with that seed sees the same boxes; each seed draws its own.
pub fn noise_seed(cfg: &ExperimentConfig, n_masks: usize, seed: u64) -> u64 {
    derive_seed(derive_seed(derive_seed(cfg.split_seed, 0xc0ffee), n_masks as u64), seed)
}

/// Pooled AUPR under increasing cutout on the test volumes, for the cells of
/// the largest pct in `trained`.
pub fn run_noise_sweep(cfg: &ExperimentConfig, trained: &ReportTable) -> Result<CurveData> {
    let manifest = cfg.dataset.prepare()?;
    let split = split_patientwise(&manifest, cfg.split_fractions, cfg.split_seed)?;
    let test = load_eval_samples(&manifest, &split.test)?;
    let pct = trained.rows.iter().map(|r| r.key.pct).fold(f64::NEG_INFINITY, f64::max);
    let mut points = Vec::new();
    for row in trained.rows.iter().filter(|r| r.key.pct == pct) {
        if row.outcome.is_err() || row.checkpoints.is_empty() {
            return Err(Error::InvalidArgument(format!("cell {} has no trained checkpoints", row.key)));
        }
        let run = RunArtifacts::load(&row.run_dir).map_err(|e| Error::InvalidArgument(format!("cell {}: {e}", row.key)))?;
        let ensemble = Ensemble::load(&row.checkpoints, &run.arch)?;
        for &n in &cfg.noise_levels {
            let spec = CutoutSpec::new(n);
            let eval = evaluate_ensemble(&ensemble, &test, &run.config.preprocess, Some((&spec, noise_seed(cfg, n, row.key.seed))), cfg.rank_pooling)?;
            if cfg.verbose {
                eprintln!("[{}] n_masks {n:>2} aupr {:.4}", row.key, eval.report.aupr);
            }
            points.push(CurvePoint { mode: row.key.mode, seed: row.key.seed, n_masks: n, aupr: eval.report.aupr });
        }
    }
    let curves = CurveData { pct, points };
    write_text(&cfg.out_dir.join("curves.csv"), &curves.to_csv())?;
    write_text(&cfg.out_dir.join("curves.json"), &serde_json::to_string_pretty(&curves).expect("curves serialize"))?;
    Ok(curves)
}

/// Rebuilds the checkpoint list of a finished cell directory.
pub fn cell_checkpoints(run_dir: &Path, top_k: usize) -> Result<Vec<CheckpointRecord>> {
    if !run_dir.join(RUN_FILE).exists() {
        return Err(Error::MissingFile(run_dir.join(RUN_FILE)));
    }
    Ok(select_top_checkpoints(&RunArtifacts::load(run_dir)?.checkpoints, top_k))
}
