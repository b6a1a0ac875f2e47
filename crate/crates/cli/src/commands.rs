use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use hetfuse::datamodel::{load_sample, save_sample, split_patientwise, subsample_training, DatasetManifest, SplitSpec};
use hetfuse::experiments::{
    evaluate_model, run_ablation, run_data_efficiency, run_noise_sweep, run_superres, CellKey, ReportRow, ReportTable,
};
use hetfuse::preprocess::CutoutSpec;
use hetfuse::synthgen::{EXCLUSIVE_FILE, TRUTH_FILE};
use hetfuse::training::{select_top_checkpoints, train, RunArtifacts};
use serde::{Deserialize, Serialize};

use crate::plot;
use crate::settings::Settings;
use crate::CliError;

pub const RESOLVED_CONFIG: &str = "resolved.conf";
const RUN_INFO: &str = "cli_run.json";

fn io(path: &Path, e: std::io::Error) -> CliError {
    CliError::Runtime(hetfuse::Error::io(path, e))
}

fn write(path: &Path, text: &str) -> Result<(), CliError> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| io(parent, e))?;
    }
    fs::write(path, text).map_err(|e| io(path, e))
}

pub fn echo_config(s: &Settings) -> Result<(), CliError> {
    write(&s.out.join(RESOLVED_CONFIG), &s.resolved_text())
}

pub fn generate(s: &Settings) -> Result<(), CliError> {
    let m = s.dataset_source()?.prepare()?;
    println!("dataset: {} samples from {} patients in {}", m.samples.len(), m.patients().len(), m.root.display());
    Ok(())
}

/// Writes the preprocessed copy of every sample under `<out>/preprocessed`.
pub fn preprocess(s: &Settings) -> Result<(), CliError> {
    let src = s.dataset_source()?.prepare()?;
    let pre = s.preprocessing()?;
    let root = s.out.join("preprocessed");
    for e in &src.samples {
        let from = src.root.join(&e.sample_dir);
        let to = root.join(&e.sample_dir);
        save_sample(&pre.apply(&load_sample(&from)?)?, &to)?;
        for extra in [EXCLUSIVE_FILE, TRUTH_FILE] {
            if from.join(extra).exists() {
                fs::copy(from.join(extra), to.join(extra)).map_err(|err| io(&to.join(extra), err))?;
            }
        }
    }
    let m = DatasetManifest::new(&root, src.samples.clone())?;
    m.save()?;
    println!("preprocessed {} samples into {}", m.samples.len(), root.display());
    Ok(())
}

/// What `eval` needs to find the data a run was trained on.
#[derive(Serialize, Deserialize)]
struct RunInfo {
    dataset: PathBuf,
    split: SplitSpec,
}

pub fn train_cmd(s: &Settings) -> Result<(), CliError> {
    let manifest = s.dataset_source()?.prepare()?;
    let split = split_patientwise(&manifest, s.split_fractions()?, s.get("split.seed")?)?;
    let split = subsample_training(&split, s.get("train.pct")?, split.seed)?;
    let run_dir = s.path("eval.run").unwrap_or_else(|| s.out.join("run"));
    let cfg = s.train()?;
    let run = train(&cfg, &s.arch()?, &manifest, &split, &run_dir)?;
    let info = RunInfo { dataset: manifest.root.clone(), split };
    write(&run_dir.join(RUN_INFO), &serde_json::to_string_pretty(&info).expect("run info serializes"))?;
    let last = run.log.last().expect("at least one epoch");
    println!("trained {} epochs: final loss {:.4}, val dice {:.4}; run in {}", last.epoch, last.train_loss, last.val_dice, run_dir.display());
    Ok(())
}

pub fn eval_cmd(s: &Settings) -> Result<(), CliError> {
    let run_dir = s.path("eval.run").unwrap_or_else(|| s.out.join("run"));
    let run = RunArtifacts::load(&run_dir)?;
    let info_path = run_dir.join(RUN_INFO);
    let info: RunInfo = serde_json::from_str(&fs::read_to_string(&info_path).map_err(|e| io(&info_path, e))?)
        .map_err(|e| CliError::Runtime(hetfuse::Error::Descriptor { path: info_path.clone(), reason: e.to_string() }))?;
    let manifest = DatasetManifest::load(&info.dataset)?;
    let part: &BTreeSet<String> = match s.raw("eval.part") {
        "test" => &info.split.test,
        "val" => &info.split.val,
        other => return Err(CliError::Usage(format!("invalid value `{other}` for `eval.part`"))),
    };
    let ckpts = select_top_checkpoints(&run.checkpoints, run.config.top_k);
    let n_masks: usize = s.get("eval.n_masks")?;
    let spec = CutoutSpec::new(n_masks);
    let noise = (n_masks > 0).then_some((&spec, s.get::<u64>("eval.noise_seed")?));
    let eval = evaluate_model(&ckpts, &run.arch, &manifest, part, noise, &run.config.preprocess, s.pooling()?)?;
    let key = CellKey { mode: run.arch.fusion_mode, pct: info.split.train_pct, seed: run.config.seed };
    println!("{key}: dice {:.4} ± {:.4}, hd95 {:.4}, auroc {:.4}, aupr {:.4}", eval.report.dice_mean, eval.report.dice_std, eval.report.hd95_mean, eval.report.auroc, eval.report.aupr);
    write(&s.out.join("metrics.txt"), &eval.report.to_kv_text())?;
    let table = ReportTable {
        baseline: run.arch.fusion_mode,
        rows: vec![ReportRow { key, run_dir, checkpoints: ckpts, outcome: Ok(eval), p_vs_baseline: None }],
        train_patients: Default::default(),
    };
    table.write(&s.out)?;
    Ok(())
}

pub fn sweep(s: &Settings) -> Result<(), CliError> {
    let cfg = s.experiment()?;
    let table = match s.raw("sweep.kind") {
        "ablation" => run_ablation(&cfg)?,
        "data_efficiency" => run_data_efficiency(&cfg)?,
        "superres" => run_superres(&cfg)?,
        other => return Err(CliError::Usage(format!("invalid value `{other}` for `sweep.kind`"))),
    };
    for r in table.failed() {
        eprintln!("cell failed: {}: {}", r.key, r.outcome.as_ref().unwrap_err());
    }
    if s.get::<bool>("sweep.noise")? {
        if table.failed().next().is_some() {
            eprintln!("skipping the cutout sweep: some cells failed");
        } else {
            run_noise_sweep(&cfg, &table)?;
        }
    }
    println!("report in {}", s.out.join("report.csv").display());
    Ok(())
}

pub fn plot_cmd(s: &Settings) -> Result<(), CliError> {
    let input = s.path("plot.input").unwrap_or_else(|| s.out.clone());
    let mut wrote = Vec::new();
    let report = input.join("report.csv");
    if report.exists() {
        let svg = plot::report_svg(&plot::read_csv(&report)?)?;
        let path = s.out.join("dice.svg");
        write(&path, &svg)?;
        wrote.push(path);
    }
    let curves = input.join("curves.csv");
    if curves.exists() {
        let svg = plot::curves_svg(&plot::read_csv(&curves)?)?;
        let path = s.out.join("aupr_vs_noise.svg");
        write(&path, &svg)?;
        wrote.push(path);
    }
    if wrote.is_empty() {
        return Err(CliError::Runtime(hetfuse::Error::MissingFile(report)));
    }
    for p in wrote {
        println!("wrote {}", p.display());
    }
    Ok(())
}
