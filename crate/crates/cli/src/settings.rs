//! Flat dotted-key configuration: `key = value` lines, `#` comments.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use hetfuse::experiments::{DatasetSource, ExperimentConfig};
use hetfuse::metrics::RankPooling;
use hetfuse::network::{ArchitectureConfig, FusionMode, VOLUME_MODALITY};
use hetfuse::preprocess::{AugmentPolicy, Preprocessing};
use hetfuse::synthgen::{derive_seed, SceneSpec, Task};
use hetfuse::training::TrainConfig;

use crate::CliError;

pub const CACHE_ENV: &str = "HETFUSE_CACHE";

pub struct KeySpec {
    pub key: &'static str,
    pub default: String,
    pub help: &'static str,
}

fn list<T: ToString>(v: &[T]) -> String {
    v.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

fn pair((a, b): (f64, f64)) -> String {
    format!("{a},{b}")
}

/// Every accepted key with its default and a one-line description.
pub fn keys() -> Vec<KeySpec> {
    let arch = ArchitectureConfig::default();
    let train = TrainConfig::default();
    let aug = AugmentPolicy::default();
    let pre = Preprocessing::default();
    let scene = SceneSpec::vessel();
    let exp = ExperimentConfig::new(DatasetSource::Existing(PathBuf::new()), "");
    let k = |key, default: String, help| KeySpec { key, default, help };
    vec![
        k("data.dir", String::new(), "existing dataset directory; empty generates a synthetic one"),
        k("data.task", "vessel".into(), "synthetic task: vessel | lesion"),
        k("data.dims", list(&[scene.dims.0, scene.dims.1, scene.dims.2]), "synthetic volume dims H,W,D"),
        k("data.n_patients", "30".into(), "synthetic patients"),
        k("data.samples_per_patient", "1".into(), "synthetic samples per patient"),
        k("data.n_structures", "auto".into(), "structures per scene (auto: task default)"),
        k("data.structure_scale", "auto".into(), "lesion radius / vessel half-width in W voxels (auto: task default)"),
        k("data.exclusive_frac", scene.modality2d_exclusive_frac.to_string(), "fraction of each structure visible only in the 2D image"),
        k("data.confounders", scene.confounder_count.to_string(), "volume-only mimic structures per scene"),
        k("data.noise_sigma", scene.noise_sigma.to_string(), "Gaussian noise sigma on both modalities"),
        k("data.surface_tilt", scene.surface_tilt.to_string(), "surface depth change per W voxel"),
        k("data.seed", "0".into(), "dataset generation seed"),
        k("preprocess.out_depth", pre.out_depth.to_string(), "depth of the cropped volume"),
        k("preprocess.above_frac", pre.above_frac.to_string(), "fraction of the crop above the flattened surface"),
        k("preprocess.zscore", pre.zscore.to_string(), "z-score each modality"),
        k("augment.flip_prob", aug.flip_prob.to_string(), "probability of each en-face flip"),
        k("augment.mult_noise", pair(aug.mult_noise_range), "multiplicative gain range lo,hi"),
        k("augment.add_noise_sigma", aug.add_noise_sigma.to_string(), "additive Gaussian noise sigma"),
        k("augment.contrast", pair(aug.contrast_range), "contrast factor range lo,hi"),
        k("augment.shift", pair(aug.intensity_shift_range), "intensity shift range lo,hi"),
        k("arch.levels", arch.levels.to_string(), "encoder/decoder levels"),
        k("arch.base_channels", arch.base_channels.to_string(), "channels at level 0 (doubling per level)"),
        k("arch.max_channels", arch.max_channels.to_string(), "channel cap"),
        k("arch.channels", String::new(), "explicit per-level widths; overrides base/max"),
        k("arch.enc_convs", arch.enc_convs_per_block.to_string(), "convolutions per encoder block (even)"),
        k("arch.dec_convs", arch.dec_convs_per_block.to_string(), "convolutions per decoder block (even)"),
        k("arch.fpb_convs", arch.fpb_convs.to_string(), "convolutions per projection block"),
        k("arch.fpb_depth_stride", arch.fpb_depth_stride.to_string(), "depth stride of the first projection convolution"),
        k("arch.fusion_mode", arch.fusion_mode.to_string(), "volume_only | image_only | late | multiscale"),
        k("arch.image_modality", "auto".into(), "2D modality name (auto: slo for vessel, faf for lesion)"),
        k("train.epochs", train.epochs.to_string(), "training epochs"),
        k("train.lr", train.lr.to_string(), "SGD learning rate"),
        k("train.momentum", train.momentum.to_string(), "SGD momentum"),
        k("train.batch_size", train.batch_size.to_string(), "samples per step"),
        k("train.seed", train.seed.to_string(), "seed for init, shuffling and augmentation"),
        k("train.checkpoint_every", train.checkpoint_every.to_string(), "epochs between checkpoints"),
        k("train.top_k", train.top_k.to_string(), "checkpoints in the evaluation ensemble"),
        k("train.slice_step", train.train_slice_step.to_string(), "keep every n-th B-scan of training volumes"),
        k("train.pct", "1".into(), "fraction of training patients used"),
        k("split.fractions", list(&exp.split_fractions), "train,val,test patient fractions"),
        k("split.seed", exp.split_seed.to_string(), "patient split seed"),
        k("eval.run", "run".into(), "run directory to evaluate"),
        k("eval.part", "test".into(), "split part: val | test"),
        k("eval.pooling", "pooled".into(), "AUROC/AUPR pooling: pooled | per-sample"),
        k("eval.n_masks", "0".into(), "cutout boxes applied to evaluation volumes"),
        k("eval.noise_seed", "0".into(), "cutout seed"),
        k("sweep.kind", "ablation".into(), "ablation | data_efficiency | superres"),
        k("sweep.modes", list(&exp.modes), "fusion modes compared"),
        k("sweep.baseline", exp.baseline.to_string(), "mode the p-values are computed against"),
        k("sweep.pcts", list(&exp.pcts), "training fractions"),
        k("sweep.seeds", list(&exp.seeds), "training seeds"),
        k("sweep.noise", "true".into(), "also run the cutout sweep"),
        k("sweep.noise_levels", list(&exp.noise_levels), "cutout box counts"),
        k("plot.input", String::new(), "directory holding report.csv / curves.csv (default: --out)"),
    ]
}

pub fn help_table() -> String {
    let ks = keys();
    let w = ks.iter().map(|k| k.key.len()).max().unwrap_or(0);
    let mut s = String::from("Config keys (key = value; file via --config, overrides as key=value):\n");
    for k in ks {
        let d = if k.default.is_empty() { "\"\"".to_string() } else { k.default };
        s.push_str(&format!("  {:w$}  {} [default: {d}]\n", k.key, k.help));
    }
    s.push_str(&format!("\nEnvironment: {CACHE_ENV} sets the synthetic dataset cache root.\n"));
    s
}

#[derive(Debug, Clone)]
pub struct Settings {
    values: BTreeMap<String, String>,
    explicit: std::collections::BTreeSet<String>,
    pub out: PathBuf,
}

fn parse_line(line: &str) -> Option<Result<(String, String), String>> {
    let line = line.split('#').next().unwrap_or("").trim();
    if line.is_empty() {
        return None;
    }
    Some(match line.split_once('=') {
        Some((k, v)) => Ok((k.trim().to_string(), v.trim().to_string())),
        None => Err(format!("expected `key = value`, got `{line}`")),
    })
}

impl Settings {
    pub fn new(out: impl Into<PathBuf>) -> Self {
        let values = keys().into_iter().map(|k| (k.key.to_string(), k.default)).collect();
        Self { values, explicit: Default::default(), out: out.into() }
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<(), CliError> {
        match self.values.get_mut(key) {
            Some(v) => {
                *v = value.to_string();
                self.explicit.insert(key.to_string());
                Ok(())
            }
            None => Err(CliError::Usage(format!("unknown config key `{key}`"))),
        }
    }

    pub fn apply_text(&mut self, text: &str, origin: &str) -> Result<(), CliError> {
        for (n, line) in text.lines().enumerate() {
            match parse_line(line) {
                None => {}
                Some(Ok((k, v))) => self.set(&k, &v)?,
                Some(Err(e)) => return Err(CliError::Usage(format!("{origin}:{}: {e}", n + 1))),
            }
        }
        Ok(())
    }

    pub fn apply_override(&mut self, kv: &str) -> Result<(), CliError> {
        let (k, v) = kv.split_once('=').ok_or_else(|| CliError::Usage(format!("override `{kv}` is not key=value")))?;
        self.set(k.trim(), v.trim())
    }

    /// Routes one seed to every stochastic component.
    pub fn apply_seed(&mut self, seed: u64) {
        let s = seed.to_string();
        for k in ["data.seed", "split.seed", "train.seed", "sweep.seeds", "eval.noise_seed"] {
            self.set(k, &s).expect("registered key");
        }
    }

    pub fn is_explicit(&self, key: &str) -> bool {
        self.explicit.contains(key)
    }

    pub fn raw(&self, key: &str) -> &str {
        self.values.get(key).map(String::as_str).unwrap_or_else(|| panic!("unregistered key {key}"))
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<T, CliError> {
        let raw = self.raw(key);
        raw.parse().map_err(|_| CliError::Usage(format!("invalid value `{raw}` for `{key}`")))
    }

    pub fn list<T: FromStr>(&self, key: &str) -> Result<Vec<T>, CliError> {
        let raw = self.raw(key);
        raw.split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(|s| s.parse().map_err(|_| CliError::Usage(format!("invalid list item `{s}` for `{key}`"))))
            .collect()
    }

    fn range(&self, key: &str) -> Result<(f64, f64), CliError> {
        match self.list::<f64>(key)?[..] {
            [a, b] => Ok((a, b)),
            _ => Err(CliError::Usage(format!("`{key}` needs two values lo,hi"))),
        }
    }

    fn mode(&self, key: &str) -> Result<FusionMode, CliError> {
        FusionMode::parse(self.raw(key)).map_err(|e| CliError::Usage(format!("`{key}`: {e}")))
    }

    /// Path relative to `--out` unless absolute.
    pub fn path(&self, key: &str) -> Option<PathBuf> {
        let raw = self.raw(key);
        (!raw.is_empty()).then(|| self.out.join(raw))
    }

    /// Every key with its current value, parseable by [`Settings::apply_text`].
    pub fn resolved_text(&self) -> String {
        self.values.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    pub fn task(&self) -> Result<Task, CliError> {
        match self.raw("data.task") {
            "vessel" => Ok(Task::Vessel),
            "lesion" => Ok(Task::Lesion),
            other => Err(CliError::Usage(format!("invalid value `{other}` for `data.task`"))),
        }
    }

    pub fn scene_spec(&self) -> Result<SceneSpec, CliError> {
        let task = self.task()?;
        let base = SceneSpec::for_task(task);
        let dims = match self.list::<usize>("data.dims")?[..] {
            [h, w, d] => (h, w, d),
            _ => return Err(CliError::Usage("`data.dims` needs three values H,W,D".into())),
        };
        let auto = |k: &str| self.raw(k) == "auto";
        Ok(SceneSpec {
            dims,
            task,
            n_structures: if auto("data.n_structures") { base.n_structures } else { self.get("data.n_structures")? },
            structure_scale: if auto("data.structure_scale") { base.structure_scale } else { self.get("data.structure_scale")? },
            modality2d_exclusive_frac: self.get("data.exclusive_frac")?,
            confounder_count: self.get("data.confounders")?,
            noise_sigma: self.get("data.noise_sigma")?,
            surface_tilt: self.get("data.surface_tilt")?,
            ..base
        })
    }

    /// Explicit `data.dir`, else a cache slot under `$HETFUSE_CACHE`, else `<out>/data`.
    pub fn dataset_source(&self) -> Result<DatasetSource, CliError> {
        if let Some(dir) = self.path("data.dir").filter(|_| self.is_explicit("data.dir")) {
            if dir.join("manifest.json").exists() {
                return Ok(DatasetSource::Existing(dir));
            }
            return self.generated_at(dir);
        }
        let dir = match std::env::var_os(CACHE_ENV).filter(|v| !v.is_empty()) {
            Some(root) => PathBuf::from(root).join(self.cache_slug()?),
            None => self.out.join("data"),
        };
        self.generated_at(dir)
    }

    fn generated_at(&self, dir: PathBuf) -> Result<DatasetSource, CliError> {
        Ok(DatasetSource::Generated {
            spec: self.scene_spec()?,
            n_patients: self.get("data.n_patients")?,
            samples_per_patient: self.get("data.samples_per_patient")?,
            seed: self.get("data.seed")?,
            dir,
        })
    }

    fn cache_slug(&self) -> Result<String, CliError> {
        let key = serde_json::to_string(&(self.scene_spec()?, self.raw("data.n_patients"), self.raw("data.samples_per_patient"), self.raw("data.seed")))
            .expect("spec serializes");
        let h = key.bytes().fold(0u64, |h, b| derive_seed(h, u64::from(b)));
        Ok(format!("synth-{h:016x}"))
    }

    pub fn preprocessing(&self) -> Result<Preprocessing, CliError> {
        Ok(Preprocessing { out_depth: self.get("preprocess.out_depth")?, above_frac: self.get("preprocess.above_frac")?, zscore: self.get("preprocess.zscore")? })
    }

    pub fn augment(&self) -> Result<AugmentPolicy, CliError> {
        Ok(AugmentPolicy {
            flip_prob: self.get("augment.flip_prob")?,
            mult_noise_range: self.range("augment.mult_noise")?,
            add_noise_sigma: self.get("augment.add_noise_sigma")?,
            contrast_range: self.range("augment.contrast")?,
            intensity_shift_range: self.range("augment.shift")?,
        })
    }

    pub fn arch(&self) -> Result<ArchitectureConfig, CliError> {
        let schedule = self.list::<usize>("arch.channels")?;
        let image = match self.raw("arch.image_modality") {
            "auto" => self.task()?.image_name().to_string(),
            name => name.to_string(),
        };
        let cfg = ArchitectureConfig {
            levels: self.get("arch.levels")?,
            base_channels: self.get("arch.base_channels")?,
            max_channels: self.get("arch.max_channels")?,
            channel_schedule: (!schedule.is_empty()).then_some(schedule),
            enc_convs_per_block: self.get("arch.enc_convs")?,
            dec_convs_per_block: self.get("arch.dec_convs")?,
            fpb_convs: self.get("arch.fpb_convs")?,
            fpb_depth_stride: self.get("arch.fpb_depth_stride")?,
            fusion_mode: self.mode("arch.fusion_mode")?,
            modalities: vec![VOLUME_MODALITY.to_string(), image],
            init_seed: self.get("train.seed")?,
        };
        cfg.validate().map_err(|e| CliError::Usage(e.to_string()))?;
        Ok(cfg)
    }

    pub fn train(&self) -> Result<TrainConfig, CliError> {
        let cfg = TrainConfig {
            epochs: self.get("train.epochs")?,
            lr: self.get("train.lr")?,
            momentum: self.get("train.momentum")?,
            batch_size: self.get("train.batch_size")?,
            seed: self.get("train.seed")?,
            augment: self.augment()?,
            checkpoint_every: self.get("train.checkpoint_every")?,
            top_k: self.get("train.top_k")?,
            preprocess: self.preprocessing()?,
            train_slice_step: self.get("train.slice_step")?,
        };
        cfg.validate().map_err(|e| CliError::Usage(e.to_string()))?;
        Ok(cfg)
    }

    pub fn split_fractions(&self) -> Result<[f64; 3], CliError> {
        match self.list::<f64>("split.fractions")?[..] {
            [a, b, c] => Ok([a, b, c]),
            _ => Err(CliError::Usage("`split.fractions` needs three values train,val,test".into())),
        }
    }

    pub fn pooling(&self) -> Result<RankPooling, CliError> {
        match self.raw("eval.pooling") {
            "pooled" => Ok(RankPooling::Pooled),
            "per-sample" => Ok(RankPooling::PerSample),
            other => Err(CliError::Usage(format!("invalid value `{other}` for `eval.pooling`"))),
        }
    }

    pub fn experiment(&self) -> Result<ExperimentConfig, CliError> {
        let mut cfg = ExperimentConfig::new(self.dataset_source()?, self.out.clone());
        cfg.arch = self.arch()?;
        cfg.train = self.train()?;
        cfg.modes = self.raw("sweep.modes").split(',').map(|m| FusionMode::parse(m.trim())).collect::<Result<_, _>>().map_err(|e| CliError::Usage(format!("`sweep.modes`: {e}")))?;
        cfg.baseline = self.mode("sweep.baseline")?;
        cfg.pcts = self.list("sweep.pcts")?;
        cfg.seeds = self.list("sweep.seeds")?;
        cfg.noise_levels = self.list("sweep.noise_levels")?;
        cfg.split_fractions = self.split_fractions()?;
        cfg.split_seed = self.get("split.seed")?;
        cfg.rank_pooling = self.pooling()?;
        cfg.verbose = true;
        cfg.validate().map_err(|e| CliError::Usage(e.to_string()))?;
        Ok(cfg)
    }
}

pub fn read_config(path: &Path) -> Result<String, CliError> {
    std::fs::read_to_string(path).map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))
}
