//! Declarative experiments: the generic-model variance survey and the three
//! bank/fusion comparisons, driven by one TOML manifest.
//!
//! Every output lands under `<out>/run-<hash>/`, where `<hash>` is the SHA-256
//! of the canonical manifest text. Trained checkpoints are reused when the run
//! directory already holds them, so the four experiments share one bank.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::checkpoint;
use crate::data::{synth_corpus, ClassDataset, DatasetManifest, PatchSpec, Split, SynthClass};
use crate::degradation::DegradationSpec;
use crate::error::{bail, Error, Result};
use crate::fusion::{make_fusion_dataset, FusionConfig, FusionMode, FusionNet, SkipMode};
use crate::metrics::{aggregate, format_mean_var, score_image, MetricProtocol, MetricsReport};
use crate::rng;
use crate::scalar::Scalar;
use crate::sr::{ModelBank, SrModel, SrModelConfig};
use crate::tensor::Tensor;
use crate::train::{stream_losses, train_fusion, train_sr, LossCurve, LossKind, StreamLosses, TrainOptions, TrainSchedule};

/// Label of the bank member trained on the union of all class sets.
pub const GENERIC_LABEL: &str = "generic";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case")]
pub enum DataSpec {
    /// Generated on the fly from the manifest seed.
    Synthetic {
        size: usize,
        n_train: usize,
        n_test: usize,
        n_mixed_test: usize,
        noise_psnr_db: f64,
    },
    /// A `dataset.toml` written by `write_datasets` or by hand.
    External { manifest: PathBuf },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FusionSpec {
    pub n_features: usize,
    pub n_res_blocks: usize,
    /// Fusion runs at HR resolution, so it trains on smaller crops than the bank.
    pub hr_patch: usize,
    pub batch: usize,
    pub schedule: TrainSchedule,
}

/// Directional margins asserted by the comparisons (dB unless noted).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Thresholds {
    /// Class-specific over generic on the focus class.
    pub class_margin_db: f64,
    /// Allowed shortfall of class-specific fusion against the best single model.
    pub fusion_floor_db: f64,
    /// Relative slack of the fusion training loss over the best single model.
    pub fusion_loss_slack: f64,
    /// Generic fusion over every single model on the mixed set.
    pub generic_fusion_margin_db: f64,
}

impl Default for Thresholds {
    fn default() -> Self {
        Thresholds {
            class_margin_db: 0.2,
            fusion_floor_db: 0.05,
            fusion_loss_slack: 0.05,
            generic_fusion_margin_db: 0.3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentManifest {
    pub seed: u64,
    /// Class-specific bank members, in bank order. The generic model is appended.
    pub classes: Vec<String>,
    /// Class the single-class comparisons are asserted on.
    pub focus_class: String,
    /// Label of the non-homogeneous test set.
    pub mixed_label: String,
    pub loss: LossKind,
    pub hr_patch: usize,
    pub batch: usize,
    /// Save intermediate checkpoints every this many steps (0 disables).
    pub checkpoint_every: u64,
    /// Held-out minibatches used to compare training-stream losses.
    pub eval_batches: u64,
    pub data: DataSpec,
    pub model: SrModelConfig,
    pub sr_schedule: TrainSchedule,
    pub fusion: FusionSpec,
    pub protocol: MetricProtocol,
    pub thresholds: Thresholds,
}

impl ExperimentManifest {
    /// CPU-sized setup: 2-block/8-feature models, 3k iterations, synthetic corpus.
    pub fn desk(seed: u64) -> Self {
        ExperimentManifest {
            seed,
            classes: vec!["text".into(), "texture".into()],
            focus_class: "text".into(),
            mixed_label: "mixed".into(),
            loss: LossKind::L1,
            hr_patch: 96,
            batch: 8,
            checkpoint_every: 0,
            eval_batches: 16,
            data: DataSpec::Synthetic {
                size: 192,
                n_train: 40,
                n_test: 10,
                n_mixed_test: 10,
                noise_psnr_db: 40.0,
            },
            model: SrModelConfig::desk(),
            sr_schedule: TrainSchedule::desk(),
            fusion: FusionSpec {
                n_features: 32,
                n_res_blocks: 2,
                hr_patch: 32,
                batch: 8,
                schedule: TrainSchedule::desk(),
            },
            protocol: MetricProtocol::new(4),
            thresholds: Thresholds::default(),
        }
    }

    /// Full-size models and the 130k-iteration schedule. Takes days on a CPU.
    pub fn paper(seed: u64) -> Self {
        let mut m = Self::desk(seed);
        m.model = SrModelConfig::paper();
        m.sr_schedule = TrainSchedule::paper();
        m.fusion.schedule = TrainSchedule::paper();
        m
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.patch_spec(0).validate()?;
        if self.classes.is_empty() {
            bail!(Config, "manifest lists no classes");
        }
        if !self.classes.contains(&self.focus_class) {
            bail!(Config, "focus class {:?} is not one of {:?}", self.focus_class, self.classes);
        }
        if self.classes.iter().any(|c| c == GENERIC_LABEL || *c == self.mixed_label) {
            bail!(Config, "class labels may not be {GENERIC_LABEL:?} or the mixed label");
        }
        if self.fusion.n_features == 0 {
            bail!(Config, "fusion feature count must be positive");
        }
        PatchSpec {
            hr_patch: self.fusion.hr_patch,
            batch: self.fusion.batch,
            ..self.patch_spec(0)
        }
        .validate()?;
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let m: Self = toml::from_str(text).map_err(|e| Error::Config(format!("experiment manifest: {e}")))?;
        m.validate()?;
        Ok(m)
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(format!("experiment manifest: {e}")))
    }

    /// Hex SHA-256 of the canonical TOML text.
    pub fn hash(&self) -> Result<String> {
        Ok(hex(&Sha256::digest(self.to_toml()?.as_bytes())))
    }

    pub fn degradation(&self) -> DegradationSpec {
        let noise_psnr_db = match &self.data {
            DataSpec::Synthetic { noise_psnr_db, .. } => *noise_psnr_db,
            DataSpec::External { .. } => DegradationSpec::new(0).noise_psnr_db,
        };
        DegradationSpec {
            scale: self.model.scale,
            noise_psnr_db,
            seed: 0,
        }
    }

    fn patch_spec(&self, seed: u64) -> PatchSpec {
        PatchSpec {
            hr_patch: self.hr_patch,
            scale: self.model.scale,
            batch: self.batch,
            seed,
        }
    }

    fn fusion_config(&self) -> FusionConfig {
        FusionConfig {
            n_inputs: self.classes.len() + 1,
            n_features: self.fusion.n_features,
            n_res_blocks: self.fusion.n_res_blocks,
            skip_mode: SkipMode::MeanSkip,
        }
    }

    fn sub_seed(&self, path: &[u64]) -> u64 {
        rng::derive_seed(self.seed, path)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Experiment {
    Table1,
    Table2,
    Table3,
    Table4,
}

impl Experiment {
    pub const ALL: [Experiment; 4] = [Self::Table1, Self::Table2, Self::Table3, Self::Table4];

    pub fn name(self) -> &'static str {
        match self {
            Experiment::Table1 => "table1",
            Experiment::Table2 => "table2",
            Experiment::Table3 => "table3",
            Experiment::Table4 => "table4",
        }
    }

    pub fn title(self) -> &'static str {
        match self {
            Experiment::Table1 => "PSNR mean (variance) of the generic model per test set",
            Experiment::Table2 => "generic vs class-specific models on class test sets",
            Experiment::Table3 => "bank models and class-specific fusion on the focus class",
            Experiment::Table4 => "bank models and generic fusion on the mixed set",
        }
    }
}

impl std::str::FromStr for Experiment {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Experiment::ALL
            .into_iter()
            .find(|e| e.name() == s)
            .ok_or_else(|| Error::Usage(format!("unknown experiment {s:?} (expected table1..table4)")))
    }
}

/// One row of an experiment table: a model scored on a test set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Row {
    pub model: String,
    pub test_set: String,
    pub report: MetricsReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    /// Informational checks are reported but do not fail the experiment.
    pub gating: bool,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Outcome {
    pub experiment: Experiment,
    pub manifest_sha256: String,
    pub rows: Vec<Row>,
    pub checks: Vec<Check>,
    /// Training-stream losses of the bank and the fusion net, when a fusion net is involved.
    pub stream_losses: Option<StreamLosses>,
}

impl Outcome {
    pub fn passed(&self) -> bool {
        self.checks.iter().filter(|c| c.gating).all(|c| c.passed)
    }

    pub fn row(&self, model: &str, test_set: &str) -> Option<&MetricsReport> {
        self.rows
            .iter()
            .find(|r| r.model == model && r.test_set == test_set)
            .map(|r| &r.report)
    }

    /// Plain-text table with the metric-protocol header.
    pub fn render(&self) -> String {
        let mut out = format!(
            "# manifest sha256: {}\n# {}: {}\n",
            self.manifest_sha256,
            self.experiment.name(),
            self.experiment.title()
        );
        if let Some(first) = self.rows.first() {
            out.push_str(&format!("# {}\n", first.report.protocol.header()));
        }
        let decimals = if self.experiment == Experiment::Table1 { 2 } else { 3 };
        out.push_str(&format!("{:<14} {:<10} {:<20} {}\n", "model", "test set", "PSNR mean (var)", "SSIM"));
        for r in &self.rows {
            out.push_str(&format!(
                "{:<14} {:<10} {:<20} {:.4}\n",
                r.model,
                r.test_set,
                format_mean_var(r.report.mean_psnr, r.report.var_psnr, decimals),
                r.report.mean_ssim
            ));
        }
        if let Some(sl) = &self.stream_losses {
            let singles: Vec<String> = sl.per_model.iter().map(|l| format!("{l:.5}")).collect();
            out.push_str(&format!(
                "training-stream L: singles [{}], mean {:.5}, fusion {}\n",
                singles.join(", "),
                sl.mean_baseline,
                sl.fusion.map_or("-".to_string(), |f| format!("{f:.5}"))
            ));
        }
        for c in &self.checks {
            let tag = match (c.passed, c.gating) {
                (true, _) => "PASS",
                (false, true) => "FAIL",
                (false, false) => "NOTE",
            };
            out.push_str(&format!("{tag} {}: {}\n", c.name, c.detail));
        }
        out
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Train and test sets resolved from the manifest.
#[derive(Debug, Clone)]
pub struct Corpus {
    pub train: Vec<ClassDataset<f32>>,
    pub test: Vec<ClassDataset<f32>>,
    pub mixed_test: Option<ClassDataset<f32>>,
}

impl Corpus {
    /// Hex SHA-256 over every item id and pixel.
    pub fn fingerprint(&self) -> String {
        let mut hasher = Sha256::new();
        let mut buf = Vec::new();
        for ds in self.train.iter().chain(&self.test).chain(&self.mixed_test) {
            hasher.update(ds.class_label.as_bytes());
            for item in &ds.items {
                hasher.update(item.id.as_bytes());
                buf.clear();
                for &v in item.hr.data().iter().chain(item.lr.data()) {
                    v.write_le(&mut buf);
                }
                hasher.update(&buf);
            }
        }
        hex(&hasher.finalize())
    }

    pub fn load(manifest: &ExperimentManifest, manifest_dir: &Path) -> Result<Self> {
        match &manifest.data {
            DataSpec::Synthetic {
                size,
                n_train,
                n_test,
                n_mixed_test,
                ..
            } => {
                let seed = manifest.sub_seed(&[1]);
                let deg = manifest.degradation();
                let class_of = |label: &str| -> Result<SynthClass> {
                    label
                        .parse()
                        .map_err(|_| Error::Config(format!("no synthetic generator for class {label:?}")))
                };
                let mut train = Vec::new();
                let mut test = Vec::new();
                for label in &manifest.classes {
                    let class = class_of(label)?;
                    train.push(synth_corpus(class, Split::Train, *n_train, *size, seed, deg)?);
                    test.push(synth_corpus(class, Split::Test, *n_test, *size, seed, deg)?);
                }
                let mixed_test = if *n_mixed_test > 0 {
                    let mut ds = synth_corpus(SynthClass::Mixed, Split::Test, *n_mixed_test, *size, seed, deg)?;
                    ds.class_label = manifest.mixed_label.clone();
                    Some(ds)
                } else {
                    None
                };
                Ok(Corpus { train, test, mixed_test })
            }
            DataSpec::External { manifest: path } => {
                let path = if path.is_absolute() { path.clone() } else { manifest_dir.join(path) };
                let dm = DatasetManifest::read(&path)?;
                if dm.scale != manifest.model.scale {
                    bail!(Config, "dataset scale x{} differs from model scale x{}", dm.scale, manifest.model.scale);
                }
                let base = path.parent().unwrap_or(Path::new("."));
                let mut all_train = dm.load::<f32>(base, Split::Train)?;
                let mut all_test = dm.load::<f32>(base, Split::Test)?;
                let take = |sets: &mut Vec<ClassDataset<f32>>, label: &str| {
                    sets.iter()
                        .position(|d| d.class_label == label)
                        .map(|i| sets.remove(i))
                };
                let mut train = Vec::new();
                let mut test = Vec::new();
                for label in &manifest.classes {
                    train.push(take(&mut all_train, label).ok_or_else(|| Error::Data(format!("no train split for class {label:?}")))?);
                    test.push(take(&mut all_test, label).ok_or_else(|| Error::Data(format!("no test split for class {label:?}")))?);
                }
                let mixed_test = take(&mut all_test, &manifest.mixed_label);
                Ok(Corpus { train, test, mixed_test })
            }
        }
    }

    fn train_set(&self, label: &str) -> Result<&ClassDataset<f32>> {
        self.train
            .iter()
            .find(|d| d.class_label == label)
            .ok_or_else(|| Error::Data(format!("no training set for class {label:?}")))
    }

    fn test_set(&self, label: &str) -> Result<&ClassDataset<f32>> {
        self.test
            .iter()
            .chain(self.mixed_test.as_ref())
            .find(|d| d.class_label == label)
            .ok_or_else(|| Error::Data(format!("no test set labelled {label:?}")))
    }
}

/// Scores `predict` on every item of `ds`, one image at a time, with outputs clamped to `[0, 1]`.
pub fn evaluate(
    label: &str,
    ds: &ClassDataset<f32>,
    protocol: MetricProtocol,
    predict: &dyn Fn(&Tensor<f32>) -> Result<Tensor<f32>>,
) -> Result<MetricsReport> {
    let scores = ds
        .items
        .iter()
        .map(|item| {
            let [c, h, w] = item.lr.dims3()?;
            let lr = item.lr.clone().reshape(&[1, c, h, w])?;
            let sr = predict(&lr)?.clamp01().reshape(item.hr.shape())?;
            score_image(&item.id, &sr, &item.hr, &protocol)
        })
        .collect::<Result<Vec<_>>>()?;
    aggregate(label, protocol, scores)
}

/// A run directory plus the data it was built from.
pub struct Run {
    pub manifest: ExperimentManifest,
    pub hash: String,
    pub dir: PathBuf,
    pub corpus: Corpus,
    /// Print progress lines to stdout.
    pub verbose: bool,
}

impl Run {
    /// Creates (or reopens) `<out_dir>/run-<hash prefix>` and writes the manifest there.
    /// Relative external dataset paths resolve against `manifest_dir`.
    pub fn open(manifest: ExperimentManifest, out_dir: &Path, manifest_dir: &Path) -> Result<Self> {
        manifest.validate()?;
        let hash = manifest.hash()?;
        let corpus = Corpus::load(&manifest, manifest_dir)?;
        // the data takes part in the key too, so cached models never outlive
        // a change to the generator or to files on disk
        let mut key = Sha256::new();
        key.update(hash.as_bytes());
        key.update(corpus.fingerprint().as_bytes());
        let key = hex(&key.finalize());
        let dir = out_dir.join(format!("run-{}", &key[..16]));
        std::fs::create_dir_all(&dir)?;
        std::fs::write(dir.join("manifest.toml"), manifest.to_toml()?)?;
        Ok(Run {
            manifest,
            hash,
            dir,
            corpus,
            verbose: false,
        })
    }

    fn progress(&self, msg: &str) {
        if self.verbose {
            println!("{msg}");
        }
    }

    fn header_lines(&self, what: &str) -> Vec<String> {
        vec![format!("manifest sha256: {}", self.hash), what.to_string()]
    }

    fn write_curve(&self, path: &Path, what: &str, curve: &LossCurve) -> Result<()> {
        let mut text: String = self.header_lines(what).iter().map(|l| format!("# {l}\n")).collect();
        text.push_str(&curve.to_tsv());
        std::fs::write(path, text)?;
        Ok(())
    }

    fn options(&self) -> TrainOptions {
        TrainOptions {
            loss: self.manifest.loss,
            ..TrainOptions::default()
        }
    }

    pub fn model_path(&self, label: &str) -> PathBuf {
        self.dir.join("models").join(format!("{label}.mmsr"))
    }

    pub fn fusion_path(&self, mode: FusionMode) -> PathBuf {
        self.dir.join("fusion").join(format!("{}.mmsr", fusion_mode_name(mode)))
    }

    /// Loads the checkpoint for `label` if present, otherwise trains and saves it.
    pub fn sr_model(&self, label: &str) -> Result<SrModel<f32>> {
        let path = self.model_path(label);
        if path.exists() {
            let m: SrModel<f32> = checkpoint::load(&path)?;
            if m.config() != &self.manifest.model || m.class_label() != label {
                bail!(Data, "{} does not match the manifest; remove it to retrain", path.display());
            }
            self.progress(&format!("loaded {}", path.display()));
            return Ok(m);
        }
        let union;
        let ds = if label == GENERIC_LABEL {
            let parts: Vec<&ClassDataset<f32>> = self.corpus.train.iter().collect();
            union = ClassDataset::union(GENERIC_LABEL, &parts)?;
            &union
        } else {
            self.corpus.train_set(label)?
        };
        let tag = rng::label_tag(label);
        let mut model = SrModel::build(self.manifest.model, label, self.manifest.sub_seed(&[2, tag]))?;
        let spec = self.manifest.patch_spec(self.manifest.sub_seed(&[3, tag]));
        let every = self.manifest.checkpoint_every;
        let total = self.manifest.sr_schedule.total_iters;
        let verbose = self.verbose;
        let mut hook = |step: u64, m: &SrModel<f32>| -> Result<()> {
            if every > 0 && (step + 1).is_multiple_of(every) && step + 1 < total {
                checkpoint::save(m, &path.with_extension(format!("step{}.mmsr", step + 1)))?;
            }
            if verbose && (step + 1).is_multiple_of(500) {
                println!("  {label}: step {}/{total}", step + 1);
            }
            Ok(())
        };
        self.progress(&format!("training SR model {label} on {} images", ds.len()));
        let curve = train_sr(&mut model, ds, &spec, &self.manifest.sr_schedule, &self.options(), Some(&mut hook))?;
        checkpoint::save(&model, &path)?;
        self.write_curve(&path.with_extension("loss.tsv"), &format!("SR model {label}"), &curve)?;
        Ok(model)
    }

    /// Class-specific models in manifest order, then the generic model; frozen.
    pub fn bank(&self) -> Result<ModelBank<f32>> {
        let mut models = Vec::new();
        for label in self.manifest.classes.iter().map(String::as_str).chain([GENERIC_LABEL]) {
            models.push(self.sr_model(label)?);
        }
        let mut bank = ModelBank::new(models)?;
        bank.freeze();
        Ok(bank)
    }

    fn fusion_classes(&self, mode: FusionMode) -> Vec<&ClassDataset<f32>> {
        match mode {
            FusionMode::ClassSpecific => self.corpus.train_set(&self.manifest.focus_class).into_iter().collect(),
            FusionMode::Generic => self.corpus.train.iter().collect(),
        }
    }

    fn fusion_patch_spec(&self, mode: FusionMode) -> PatchSpec {
        PatchSpec {
            hr_patch: self.manifest.fusion.hr_patch,
            batch: self.manifest.fusion.batch,
            ..self.manifest.patch_spec(self.manifest.sub_seed(&[5, mode as u64]))
        }
    }

    /// Loads or trains the fusion net for `mode` on top of `bank`.
    pub fn fusion_net(&self, mode: FusionMode, bank: &ModelBank<f32>) -> Result<FusionNet<f32>> {
        let path = self.fusion_path(mode);
        if path.exists() {
            let net: FusionNet<f32> = checkpoint::load(&path)?;
            if net.config() != &self.manifest.fusion_config() {
                bail!(Data, "{} does not match the manifest; remove it to retrain", path.display());
            }
            self.progress(&format!("loaded {}", path.display()));
            return Ok(net);
        }
        let sets = self.fusion_classes(mode);
        let stream = make_fusion_dataset(mode, &sets)?;
        let mut net = FusionNet::build(self.manifest.fusion_config(), self.manifest.sub_seed(&[4, mode as u64]))?;
        let spec = self.fusion_patch_spec(mode);
        let schedule = self.manifest.fusion.schedule;
        let before = bank.checksums();
        let verbose = self.verbose;
        let name = fusion_mode_name(mode);
        let mut hook = |step: u64, _: &FusionNet<f32>| -> Result<()> {
            if verbose && (step + 1).is_multiple_of(100) {
                println!("  fusion {name}: step {}/{}", step + 1, schedule.total_iters);
            }
            Ok(())
        };
        self.progress(&format!("training {name} fusion over {} bank models", bank.len()));
        let curve = train_fusion(&mut net, bank, &stream, &spec, &schedule, &self.options(), Some(&mut hook))?;
        if bank.checksums() != before {
            bail!(Numeric, "bank parameters changed during fusion training");
        }
        checkpoint::save(&net, &path)?;
        self.write_curve(&path.with_extension("loss.tsv"), &format!("{name} fusion"), &curve)?;
        Ok(net)
    }

    /// Held-out minibatches of the fusion training stream, just past the trained steps.
    pub fn training_stream_losses(&self, mode: FusionMode, bank: &ModelBank<f32>, net: &FusionNet<f32>) -> Result<StreamLosses> {
        let sets = self.fusion_classes(mode);
        let stream = make_fusion_dataset(mode, &sets)?;
        stream_losses(
            bank,
            Some(net),
            &stream,
            &self.fusion_patch_spec(mode),
            self.manifest.fusion.schedule.total_iters,
            self.manifest.eval_batches,
            self.manifest.loss,
        )
    }

    fn eval_model(&self, model: &SrModel<f32>, test: &str) -> Result<Row> {
        let ds = self.corpus.test_set(test)?;
        let report = evaluate(model.class_label(), ds, self.manifest.protocol, &|x| model.super_resolve(x))?;
        Ok(Row {
            model: model.class_label().to_string(),
            test_set: test.to_string(),
            report,
        })
    }

    fn eval_fusion(&self, bank: &ModelBank<f32>, net: &FusionNet<f32>, test: &str) -> Result<Row> {
        let ds = self.corpus.test_set(test)?;
        let report = evaluate("mmsr", ds, self.manifest.protocol, &|x| net.fuse(&bank.forward(x)?))?;
        Ok(Row {
            model: "mmsr".into(),
            test_set: test.to_string(),
            report,
        })
    }

    pub fn run(&self, experiment: Experiment) -> Result<Outcome> {
        let outcome = match experiment {
            Experiment::Table1 => self.table1()?,
            Experiment::Table2 => self.table2()?,
            Experiment::Table3 => self.table3()?,
            Experiment::Table4 => self.table4()?,
        };
        self.write_outcome(&outcome)?;
        Ok(outcome)
    }

    fn outcome(&self, experiment: Experiment, rows: Vec<Row>, checks: Vec<Check>, sl: Option<StreamLosses>) -> Outcome {
        Outcome {
            experiment,
            manifest_sha256: self.hash.clone(),
            rows,
            checks,
            stream_losses: sl,
        }
    }

    /// Writes `reports/<exp>/<model>__<test>.csv`, `<exp>.json` and `<exp>.txt`.
    pub fn write_outcome(&self, outcome: &Outcome) -> Result<()> {
        let name = outcome.experiment.name();
        let dir = self.dir.join("reports").join(name);
        std::fs::create_dir_all(&dir)?;
        for r in &outcome.rows {
            let what = format!("experiment: {name}; model {} on {}", r.model, r.test_set);
            std::fs::write(
                dir.join(format!("{}__{}.csv", r.model, r.test_set)),
                r.report.to_csv(&self.header_lines(&what)),
            )?;
        }
        let json = serde_json::to_string_pretty(outcome).map_err(|e| Error::Config(e.to_string()))?;
        std::fs::write(self.dir.join("reports").join(format!("{name}.json")), json + "\n")?;
        std::fs::write(self.dir.join("reports").join(format!("{name}.txt")), outcome.render())?;
        Ok(())
    }

    /// Generic model on every test set, including the mixed one when present.
    pub fn table1(&self) -> Result<Outcome> {
        let generic = self.sr_model(GENERIC_LABEL)?;
        let mut rows = Vec::new();
        for label in self.manifest.classes.iter().chain(self.corpus.mixed_test.iter().map(|d| &d.class_label)) {
            rows.push(self.eval_model(&generic, label)?);
        }
        let mut checks = Vec::new();
        let exact = rows
            .iter()
            .all(|r| r.report.recompute().is_ok_and(|again| again == r.report));
        checks.push(Check {
            name: "summary reproducible from per-image rows".into(),
            passed: exact,
            gating: true,
            detail: format!("{} reports recomputed", rows.len()),
        });
        let focus = &self.manifest.focus_class;
        if let (Some(mixed), Some(homog)) = (
            rows.iter().find(|r| r.test_set == self.manifest.mixed_label),
            rows.iter().find(|r| &r.test_set == focus),
        ) {
            checks.push(Check {
                name: format!("mixed variance exceeds {focus} variance"),
                passed: mixed.report.var_psnr > homog.report.var_psnr,
                gating: false,
                detail: format!("{:.3} vs {:.3} dB^2", mixed.report.var_psnr, homog.report.var_psnr),
            });
        }
        Ok(self.outcome(Experiment::Table1, rows, checks, None))
    }

    /// Class-specific vs generic on each class test set; asserted on the focus class.
    pub fn table2(&self) -> Result<Outcome> {
        let generic = self.sr_model(GENERIC_LABEL)?;
        let mut rows = Vec::new();
        for label in &self.manifest.classes {
            let specific = self.sr_model(label)?;
            rows.push(self.eval_model(&generic, label)?);
            rows.push(self.eval_model(&specific, label)?);
        }
        let focus = &self.manifest.focus_class;
        let g = &rows.iter().find(|r| r.model == GENERIC_LABEL && &r.test_set == focus).expect("row").report;
        let s = &rows.iter().find(|r| &r.model == focus && &r.test_set == focus).expect("row").report;
        let margin = self.manifest.thresholds.class_margin_db;
        let checks = vec![
            Check {
                name: format!("{focus}-specific beats generic by >= {margin} dB on {focus}"),
                passed: s.mean_psnr >= g.mean_psnr + margin,
                gating: true,
                detail: format!("{:.3} vs {:.3} dB (gap {:+.3})", s.mean_psnr, g.mean_psnr, s.mean_psnr - g.mean_psnr),
            },
            Check {
                name: format!("{focus}-specific variance <= generic variance"),
                passed: s.var_psnr <= g.var_psnr,
                gating: true,
                detail: format!("{:.3} vs {:.3} dB^2", s.var_psnr, g.var_psnr),
            },
        ];
        Ok(self.outcome(Experiment::Table2, rows, checks, None))
    }

    /// Every bank model plus class-specific fusion on the focus test set.
    pub fn table3(&self) -> Result<Outcome> {
        let bank = self.bank()?;
        let net = self.fusion_net(FusionMode::ClassSpecific, &bank)?;
        let focus = self.manifest.focus_class.clone();
        let mut rows = bank
            .models()
            .iter()
            .map(|m| self.eval_model(m, &focus))
            .collect::<Result<Vec<_>>>()?;
        rows.push(self.eval_fusion(&bank, &net, &focus)?);
        let sl = self.training_stream_losses(FusionMode::ClassSpecific, &bank, &net)?;
        let t = self.manifest.thresholds;
        let (best, best_psnr) = best_single(&rows);
        let mmsr = rows.last().expect("mmsr row").report.mean_psnr;
        let min_loss = sl.per_model.iter().copied().fold(f64::INFINITY, f64::min);
        let fusion_loss = sl.fusion.expect("fusion loss");
        let focus_psnr = rows.iter().find(|r| r.model == focus).expect("row").report.mean_psnr;
        let others: Vec<&Row> = rows
            .iter()
            .filter(|r| r.model != focus && r.model != GENERIC_LABEL && r.model != "mmsr")
            .collect();
        let others_below = others.iter().all(|r| r.report.mean_psnr < focus_psnr);
        let others_detail = others
            .iter()
            .map(|r| format!("{} {:.3}", r.model, r.report.mean_psnr))
            .collect::<Vec<_>>()
            .join(", ");
        let checks = vec![
            Check {
                name: format!("fusion >= best single - {} dB on {focus}", t.fusion_floor_db),
                passed: mmsr >= best_psnr - t.fusion_floor_db,
                gating: true,
                detail: format!("{mmsr:.3} vs {best} {best_psnr:.3} dB (gap {:+.3})", mmsr - best_psnr),
            },
            Check {
                name: format!("fusion training-stream loss <= best single + {}%", t.fusion_loss_slack * 100.0),
                passed: fusion_loss <= min_loss * (1.0 + t.fusion_loss_slack),
                gating: true,
                detail: format!("{fusion_loss:.5} vs {min_loss:.5}"),
            },
            Check {
                name: format!("other class specialists score below the {focus} specialist"),
                passed: others_below,
                gating: false,
                detail: format!("{others_detail} vs {focus} {focus_psnr:.3} dB"),
            },
        ];
        Ok(self.outcome(Experiment::Table3, rows, checks, Some(sl)))
    }

    /// Every bank model plus generic fusion on the mixed test set.
    pub fn table4(&self) -> Result<Outcome> {
        let mixed = self.manifest.mixed_label.clone();
        if self.corpus.mixed_test.is_none() {
            bail!(Data, "no {mixed:?} test set in the corpus");
        }
        if self.manifest.classes.len() < 2 {
            bail!(Usage, "generic fusion needs at least two classes");
        }
        let bank = self.bank()?;
        let net = self.fusion_net(FusionMode::Generic, &bank)?;
        let mut rows = bank
            .models()
            .iter()
            .map(|m| self.eval_model(m, &mixed))
            .collect::<Result<Vec<_>>>()?;
        rows.push(self.eval_fusion(&bank, &net, &mixed)?);
        let sl = self.training_stream_losses(FusionMode::Generic, &bank, &net)?;
        let margin = self.manifest.thresholds.generic_fusion_margin_db;
        let (best, best_psnr) = best_single(&rows);
        let mmsr = rows.last().expect("mmsr row").report.mean_psnr;
        let checks = vec![Check {
            name: format!("fusion beats every single model by >= {margin} dB on {mixed}"),
            passed: mmsr >= best_psnr + margin,
            gating: true,
            detail: format!("{mmsr:.3} vs {best} {best_psnr:.3} dB (gap {:+.3})", mmsr - best_psnr),
        }];
        Ok(self.outcome(Experiment::Table4, rows, checks, Some(sl)))
    }
}

fn best_single(rows: &[Row]) -> (String, f64) {
    rows.iter()
        .filter(|r| r.model != "mmsr")
        .map(|r| (r.model.clone(), r.report.mean_psnr))
        .fold((String::new(), f64::NEG_INFINITY), |a, b| if b.1 > a.1 { b } else { a })
}

pub fn fusion_mode_name(mode: FusionMode) -> &'static str {
    match mode {
        FusionMode::ClassSpecific => "class-specific",
        FusionMode::Generic => "generic",
    }
}
