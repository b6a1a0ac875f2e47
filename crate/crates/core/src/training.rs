//! SGD training loop, checkpoint selection and ensemble inference.

use std::fmt::Write as _;
use std::fs;
use std::ops::ControlFlow;
use std::path::{Path, PathBuf};

use hetfuse_tensor::{Grads, Graph, ParamStore, Tensor};
use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datamodel::{load_sample, DatasetManifest, MaskGrid, SplitSpec, StudySample};
use crate::error::{Error, Result};
use crate::metrics::{dice_score, BINARIZE_THRESHOLD};
use crate::network::{build_model, image_tensor, volume_tensor, ArchitectureConfig, Model};
use crate::objectives::dice_bce_from_logits;
use crate::preprocess::{augment_sample, subsample_slices, AugmentPolicy, Preprocessing};
use crate::synthgen::derive_seed;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub augment: AugmentPolicy,
    pub checkpoint_every: usize,
    pub top_k: usize,
    pub preprocess: Preprocessing,
    /// Keep every n-th H slice of training volumes and masks (1 keeps all).
    pub train_slice_step: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 800,
            lr: 0.1,
            momentum: 0.9,
            batch_size: 8,
            seed: 0,
            augment: AugmentPolicy::default(),
            checkpoint_every: 10,
            top_k: 5,
            preprocess: Preprocessing::default(),
            train_slice_step: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0) || !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("lr must be >= 0 and momentum in [0, 1), got {} / {}", self.lr, self.momentum)));
        }
        if self.batch_size == 0 || self.top_k == 0 || self.checkpoint_every == 0 || self.train_slice_step == 0 {
            return Err(Error::Config("batch_size, top_k, checkpoint_every and train_slice_step must be >= 1".into()));
        }
        self.augment.validate()
    }
}

/// SGD with classical momentum: `v ← μv + g`, `w ← w − lr·v`.
pub struct Sgd {
    pub lr: f64,
    pub momentum: f64,
    velocity: Vec<Option<Tensor<f32>>>,
}

impl Sgd {
    pub fn new(lr: f64, momentum: f64) -> Self {
        Self { lr, momentum, velocity: Vec::new() }
    }

    pub fn step(&mut self, params: &mut ParamStore<f32>, grads: &Grads<f32>) {
        if self.velocity.len() < params.len() {
            self.velocity.resize(params.len(), None);
        }
        let (lr, mu) = (self.lr as f32, self.momentum as f32);
        for (i, p) in params.iter_mut().enumerate() {
            let Some(g) = grads.by_param.get(i).and_then(Option::as_ref) else { continue };
            if !p.trainable {
                continue;
            }
            let v = self.velocity[i].get_or_insert_with(|| Tensor::zeros(g.shape()));
            for ((w, v), &g) in p.value.data_mut().iter_mut().zip(v.data_mut()).zip(g.data()) {
                *v = mu * *v + g;
                *w -= lr * *v;
            }
        }
    }
}

/// Network inputs and target of one preprocessed sample.
pub struct Batch {
    pub volume: Option<Tensor<f32>>,
    pub image: Option<Tensor<f32>>,
    pub target: Tensor<f32>,
}

pub fn sample_inputs(sample: &StudySample, arch: &ArchitectureConfig) -> Result<Batch> {
    let volume = arch.fusion_mode.uses_volume().then(|| volume_tensor(&sample.volume));
    let image = match arch.image_modality() {
        Some(name) if arch.fusion_mode.uses_image() || sample.images.contains_key(name) => {
            let img = sample.image(Some(name)).ok_or_else(|| Error::MissingModality(format!("sample has no `{name}` image")))?;
            Some(image_tensor(img))
        }
        _ => None,
    };
    let (h, w) = sample.mask.dims();
    let target = Tensor::from_vec([1, 1, h, w, 1], sample.mask.data().iter().map(|&m| f32::from(m)).collect()).expect("dims match");
    Ok(Batch { volume, image, target })
}

/// Loss and parameter gradients for one sample.
pub fn loss_and_grads(model: &Model, b: &Batch) -> Result<(f64, Grads<f32>)> {
    let mut g = Graph::new();
    let v = b.volume.as_ref().map(|t| g.input(t.clone()));
    let i = b.image.as_ref().map(|t| g.input(t.clone()));
    let logits = model.forward_logits(&mut g, &model.params, v, i)?;
    if g.shape(logits) != b.target.shape() {
        return Err(Error::ShapeMismatch {
            what: "prediction vs mask".into(),
            expected: b.target.shape().to_vec(),
            found: g.shape(logits).to_vec(),
        });
    }
    let (loss, grad) = dice_bce_from_logits(g.value(logits).data(), b.target.data())?;
    let grad = Tensor::from_vec(g.shape(logits), grad).expect("one gradient per logit");
    let l = g.external_scalar(logits, loss as f32, grad);
    Ok((loss, g.backward(l, model.params.len())))
}

fn probability_map(p: &Tensor<f32>) -> Array2<f32> {
    let [_, _, h, w, _] = p.shape();
    Array2::from_shape_vec((h, w), p.data().to_vec()).expect("single-channel map")
}

pub fn predict_sample(model: &Model, sample: &StudySample) -> Result<Array2<f32>> {
    let b = sample_inputs(sample, model.config())?;
    Ok(probability_map(&model.predict(b.volume.as_ref(), b.image.as_ref())?))
}

/// Mean per-sample Dice at the 0.5 threshold.
pub fn mean_dice(model: &Model, samples: &[StudySample]) -> Result<f64> {
    if samples.is_empty() {
        return Ok(f64::NAN);
    }
    let mut total = 0.0;
    for s in samples {
        let p = predict_sample(model, s)?;
        total += dice_score(&MaskGrid::from_probabilities(&p, BINARIZE_THRESHOLD), &s.mask);
    }
    Ok(total / samples.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointRecord {
    pub path: PathBuf,
    pub epoch: usize,
    pub val_dice: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_dice: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunArtifacts {
    pub out_dir: PathBuf,
    pub checkpoints: Vec<CheckpointRecord>,
    pub log: Vec<EpochLog>,
    pub config: TrainConfig,
    pub arch: ArchitectureConfig,
}

impl RunArtifacts {
    pub fn log_csv(&self) -> String {
        let mut s = String::from("epoch,train_loss,val_dice\n");
        for e in &self.log {
            let _ = writeln!(s, "{},{},{}", e.epoch, e.train_loss, e.val_dice);
        }
        s
    }

    /// Reads `run.json` written at the end of [`train_samples`].
    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(RUN_FILE);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let mut a: Self = serde_json::from_str(&text).map_err(|e| Error::Descriptor { path: path.clone(), reason: e.to_string() })?;
        for c in &mut a.checkpoints {
            if c.path.is_relative() {
                c.path = dir.join(&c.path);
            }
        }
        a.out_dir = dir.to_path_buf();
        Ok(a)
    }
}

pub const RUN_FILE: &str = "run.json";
pub const LOG_FILE: &str = "log.csv";

/// Loads and preprocesses the samples of `patients`, keyed by sample directory.
pub fn load_prepared(manifest: &DatasetManifest, patients: &std::collections::BTreeSet<String>, pre: &Preprocessing) -> Result<Vec<(String, StudySample)>> {
    let mut out = Vec::new();
    for e in manifest.samples.iter().filter(|e| patients.contains(&e.patient_id)) {
        let s = load_sample(&manifest.root.join(&e.sample_dir))?;
        out.push((e.sample_dir.clone(), pre.apply(&s)?));
    }
    Ok(out)
}

/// Trains on the split's training patients, validating on its validation patients.
pub fn train(config: &TrainConfig, arch: &ArchitectureConfig, manifest: &DatasetManifest, split: &SplitSpec, out_dir: &Path) -> Result<RunArtifacts> {
    config.validate()?;
    let train: Vec<StudySample> = load_prepared(manifest, &split.train, &config.preprocess)?.into_iter().map(|(_, s)| s).collect();
    let val: Vec<StudySample> = load_prepared(manifest, &split.val, &config.preprocess)?.into_iter().map(|(_, s)| s).collect();
    train_samples(config, arch, &train, &val, out_dir, &mut |_| ControlFlow::Continue(()))
}

/// Training loop over already preprocessed samples. `progress` sees every
/// epoch and may end training early; the stopping epoch is checkpointed.
pub fn train_samples(
    config: &TrainConfig,
    arch: &ArchitectureConfig,
    train: &[StudySample],
    val: &[StudySample],
    out_dir: &Path,
    progress: &mut dyn FnMut(&EpochLog) -> ControlFlow<()>,
) -> Result<RunArtifacts> {
    config.validate()?;
    if train.is_empty() {
        return Err(Error::InvalidArgument("training split is empty".into()));
    }
    let train: Vec<StudySample> = if config.train_slice_step > 1 {
        train.iter().map(|s| subsample_slices(s, config.train_slice_step, true)).collect::<Result<_>>()?
    } else {
        train.to_vec()
    };
    let arch = ArchitectureConfig { init_seed: config.seed, ..arch.clone() };
    let mut model = build_model(&arch)?;
    // surface data/architecture mismatches before the first epoch
    loss_and_grads(&model, &sample_inputs(&train[0], &arch)?)?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;

    let mut sgd = Sgd::new(config.lr, config.momentum);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut log = Vec::with_capacity(config.epochs);
    let mut checkpoints = Vec::new();
    for epoch in 1..=config.epochs {
        let epoch_seed = derive_seed(config.seed, epoch as u64);
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(epoch_seed));
        let mut loss_sum = 0.0;
        for batch in order.chunks(config.batch_size) {
            let mut acc: Option<Grads<f32>> = None;
            for &idx in batch {
                let aug = augment_sample(&train[idx], &config.augment, derive_seed(epoch_seed, idx as u64))?;
                let (loss, grads) = loss_and_grads(&model, &sample_inputs(&aug, &arch)?)?;
                loss_sum += loss;
                match acc.as_mut() {
                    Some(a) => a.accumulate(grads),
                    None => acc = Some(grads),
                }
            }
            let mut grads = acc.expect("non-empty batch");
            grads.scale(1.0 / batch.len() as f32);
            sgd.step(&mut model.params, &grads);
        }
        let val_dice = mean_dice(&model, val)?;
        let entry = EpochLog { epoch, train_loss: loss_sum / train.len() as f64, val_dice };
        let stop = progress(&entry).is_break();
        log.push(entry);
        if stop || epoch % config.checkpoint_every == 0 || epoch == config.epochs {
            let name = format!("ckpt_epoch{epoch:04}.bin");
            model.save(&out_dir.join(&name))?;
            checkpoints.push(CheckpointRecord { path: out_dir.join(name), epoch, val_dice });
        }
        if stop {
            break;
        }
    }

    let artifacts = RunArtifacts { out_dir: out_dir.to_path_buf(), checkpoints, log, config: config.clone(), arch };
    write_text(&out_dir.join(LOG_FILE), &artifacts.log_csv())?;
    let mut rel = artifacts.clone();
    for c in &mut rel.checkpoints {
        c.path = c.path.file_name().map(PathBuf::from).unwrap_or_default();
    }
    write_text(&out_dir.join(RUN_FILE), &serde_json::to_string_pretty(&rel).expect("artifacts serialize"))?;
    Ok(artifacts)
}

pub(crate) fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// The `k` checkpoints with the highest validation Dice; ties go to the
/// later epoch and a missing (NaN) score ranks last.
pub fn select_top_checkpoints(checkpoints: &[CheckpointRecord], k: usize) -> Vec<CheckpointRecord> {
    let key = |c: &CheckpointRecord| if c.val_dice.is_nan() { f64::NEG_INFINITY } else { c.val_dice };
    let mut sorted = checkpoints.to_vec();
    sorted.sort_by(|a, b| key(b).total_cmp(&key(a)).then(b.epoch.cmp(&a.epoch)));
    sorted.truncate(k);
    sorted
}

/// Models whose sigmoid outputs are averaged.
#[derive(Debug, Clone)]
pub struct Ensemble {
    models: Vec<Model>,
}

fn same_architecture(a: &ArchitectureConfig, b: &ArchitectureConfig) -> bool {
    ArchitectureConfig { init_seed: 0, ..a.clone() } == ArchitectureConfig { init_seed: 0, ..b.clone() }
}

impl Ensemble {
    pub fn new(models: Vec<Model>) -> Result<Self> {
        let first = models.first().ok_or_else(|| Error::InvalidArgument("ensemble needs at least one model".into()))?;
        if models.iter().any(|m| !same_architecture(m.config(), first.config())) {
            return Err(Error::Config("ensemble members disagree on architecture".into()));
        }
        Ok(Self { models })
    }

    /// Loads checkpoints and checks that they match `arch` (ignoring the init seed).
    pub fn load(checkpoints: &[CheckpointRecord], arch: &ArchitectureConfig) -> Result<Self> {
        let mut models = Vec::with_capacity(checkpoints.len());
        for c in checkpoints {
            let m = Model::load(&c.path)?;
            if !same_architecture(m.config(), arch) {
                return Err(Error::Checkpoint { path: c.path.clone(), reason: "architecture differs from the requested one".into() });
            }
            models.push(m);
        }
        Self::new(models)
    }

    pub fn models(&self) -> &[Model] {
        &self.models
    }

    pub fn config(&self) -> &ArchitectureConfig {
        self.models[0].config()
    }

    /// Per-pixel mean of the members' probabilities. Values are summed in
    /// sorted order so the result does not depend on member order.
    pub fn predict(&self, sample: &StudySample) -> Result<Array2<f32>> {
        let maps = self.models.iter().map(|m| predict_sample(m, sample)).collect::<Result<Vec<_>>>()?;
        let k = maps.len() as f64;
        let mut buf = vec![0f32; maps.len()];
        Ok(Array2::from_shape_fn(maps[0].dim(), |ix| {
            for (b, m) in buf.iter_mut().zip(&maps) {
                *b = m[ix];
            }
            buf.sort_by(f32::total_cmp);
            (buf.iter().map(|&v| f64::from(v)).sum::<f64>() / k) as f32
        }))
    }
}

pub fn predict_ensemble(checkpoints: &[CheckpointRecord], arch: &ArchitectureConfig, sample: &StudySample) -> Result<Array2<f32>> {
    Ensemble::load(checkpoints, arch)?.predict(sample)
}
