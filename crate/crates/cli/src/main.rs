use std::path::{Component, Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use mmsr::checkpoint::{self, CheckpointMeta};
use mmsr::data::{load_image, save_image, synth_corpus, write_datasets, ClassDataset, DatasetManifest, PatchSpec, Split, SynthClass};
use mmsr::degradation::{bicubic_resize, degrade, DegradationSpec};
use mmsr::experiment::{evaluate, fusion_mode_name, DataSpec, Experiment, ExperimentManifest, Run, GENERIC_LABEL};
use mmsr::fusion::{make_fusion_dataset, FusionMode, FusionNet};
use mmsr::rng;
use mmsr::sr::{ModelBank, SrModel};
use mmsr::train::{train_fusion, train_sr, TrainOptions};
use mmsr::{Error, Result, Tensor};

#[derive(Debug, Parser)]
#[command(name = "mmsr", version, about = "Multi-model super-resolution: a bank of SR networks plus a learned fusion stage")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Args)]
struct Common {
    /// Seed for every random stream of this invocation
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Experiment manifest (TOML); replaces the --scale preset
    #[arg(long, global = true)]
    manifest: Option<PathBuf>,
    /// Directory that receives every output file
    #[arg(long, global = true, default_value = ".")]
    out_dir: PathBuf,
    /// Preset used when no manifest is given; `paper` takes days on a CPU
    #[arg(long, global = true, value_enum, default_value_t = Scale::Desk)]
    scale: Scale,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Scale {
    Desk,
    Paper,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum ModeArg {
    ClassSpecific,
    Generic,
}

impl From<ModeArg> for FusionMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::ClassSpecific => FusionMode::ClassSpecific,
            ModeArg::Generic => FusionMode::Generic,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum TableArg {
    Table1,
    Table2,
    Table3,
    Table4,
}

impl From<TableArg> for Experiment {
    fn from(t: TableArg) -> Self {
        match t {
            TableArg::Table1 => Experiment::Table1,
            TableArg::Table2 => Experiment::Table2,
            TableArg::Table3 => Experiment::Table3,
            TableArg::Table4 => Experiment::Table4,
        }
    }
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate the synthetic corpus as PNGs plus a dataset.toml
    Synth {
        /// Classes with train and test splits
        #[arg(long, value_delimiter = ',', default_values_t = ["text".to_string(), "texture".to_string()])]
        classes: Vec<String>,
        #[arg(long)]
        n_train: Option<usize>,
        #[arg(long)]
        n_test: Option<usize>,
        /// Mixed text/texture test images (0 to skip)
        #[arg(long)]
        n_mixed: Option<usize>,
        /// HR side length in pixels
        #[arg(long)]
        size: Option<usize>,
    },
    /// Bicubic downscale plus white Gaussian noise
    Degrade {
        #[arg(long = "in")]
        input: PathBuf,
        /// Output PNG, relative to --out-dir
        #[arg(long = "out")]
        output: PathBuf,
        /// Noise level as the PSNR of noisy vs clean
        #[arg(long, default_value_t = 40.0)]
        noise_db: f64,
        #[arg(long)]
        factor: Option<usize>,
    },
    /// Train one SR model on a class of a dataset (or `generic` for all classes)
    TrainModel {
        /// dataset.toml
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        class: String,
        /// Checkpoint name; defaults to the class
        #[arg(long)]
        name: Option<String>,
        /// Override the preset iteration count
        #[arg(long)]
        iters: Option<u64>,
    },
    /// Train a fusion network on top of frozen SR checkpoints
    TrainFusion {
        #[arg(long, value_enum)]
        mode: ModeArg,
        #[arg(long)]
        data: PathBuf,
        /// SR checkpoints in bank order
        #[arg(long, value_delimiter = ',', required = true)]
        bank: Vec<PathBuf>,
        /// Target class for class-specific fusion; defaults to the manifest focus class
        #[arg(long)]
        class: Option<String>,
        #[arg(long)]
        iters: Option<u64>,
    },
    /// Upscale PNGs with one model, or with a bank plus fusion network
    SuperResolve {
        /// SR checkpoints; several require --fusion
        #[arg(long, value_delimiter = ',', required = true)]
        model: Vec<PathBuf>,
        #[arg(long)]
        fusion: Option<PathBuf>,
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
    },
    /// Score a model, an MMSR stack or bicubic upsampling on a dataset split
    Evaluate {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        class: String,
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long, value_delimiter = ',')]
        model: Vec<PathBuf>,
        #[arg(long)]
        fusion: Option<PathBuf>,
        /// Score plain bicubic upsampling instead of a model
        #[arg(long, conflicts_with_all = ["model", "fusion"])]
        bicubic: bool,
    },
    /// Run one of the table experiments end to end
    Experiment {
        #[arg(value_enum)]
        table: TableArg,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("mmsr: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    let common = cli.common;
    let manifest = manifest_for(&common)?;
    std::fs::create_dir_all(&common.out_dir)?;
    match cli.command {
        Command::Synth {
            classes,
            n_train,
            n_test,
            n_mixed,
            size,
        } => synth(&common, &manifest, &classes, n_train, n_test, n_mixed, size),
        Command::Degrade {
            input,
            output,
            noise_db,
            factor,
        } => {
            let out = output_path(&common.out_dir, &output)?;
            let hr: Tensor<f32> = load_image(&input)?;
            let spec = DegradationSpec {
                scale: factor.unwrap_or(manifest.model.scale),
                noise_psnr_db: noise_db,
                seed: common.seed.unwrap_or(0),
            };
            save_image(&degrade(&hr, &spec)?, &out)?;
            println!("wrote {}", out.display());
            Ok(())
        }
        Command::TrainModel { data, class, name, iters } => train_model(&common, &manifest, &data, &class, name, iters),
        Command::TrainFusion {
            mode,
            data,
            bank,
            class,
            iters,
        } => train_fusion_cmd(&common, &manifest, mode.into(), &data, &bank, class, iters),
        Command::SuperResolve { model, fusion, inputs } => {
            let predictor = Predictor::load(&model, fusion.as_deref())?;
            for input in &inputs {
                let lr: Tensor<f32> = load_image(input)?;
                let [c, h, w] = lr.dims3()?;
                let sr = predictor.predict(&lr.reshape(&[1, c, h, w])?)?;
                let [_, c, h, w] = sr.dims4()?;
                let stem = input.file_stem().and_then(|s| s.to_str()).unwrap_or("image");
                let out = output_path(&common.out_dir, Path::new(&format!("{stem}_sr.png")))?;
                save_image(&sr.clamp01().reshape(&[c, h, w])?, &out)?;
                println!("wrote {}", out.display());
            }
            Ok(())
        }
        Command::Evaluate {
            data,
            class,
            split,
            model,
            fusion,
            bicubic,
        } => {
            let split: Split = split.parse()?;
            let ds = load_class(&data, split, &class)?;
            let (name, report) = if bicubic {
                let scale = ds.scale;
                ("bicubic".to_string(), evaluate("bicubic", &ds, manifest.protocol, &|x| upsample_bicubic(x, scale))?)
            } else {
                if model.is_empty() {
                    return Err(Error::Usage("evaluate needs --model or --bicubic".into()));
                }
                let predictor = Predictor::load(&model, fusion.as_deref())?;
                let name = predictor.name();
                let report = evaluate(&name, &ds, manifest.protocol, &|x| predictor.predict(x))?;
                (name, report)
            };
            let stem = format!("eval-{name}-{class}-{}", split.as_str());
            let header = vec![format!("data: {}", data.display()), format!("seed: {}", common.seed.unwrap_or(0))];
            std::fs::write(output_path(&common.out_dir, Path::new(&format!("{stem}.csv")))?, report.to_csv(&header))?;
            let json = serde_json::to_string_pretty(&report).map_err(|e| Error::Config(e.to_string()))?;
            std::fs::write(output_path(&common.out_dir, Path::new(&format!("{stem}.json")))?, json + "\n")?;
            println!("{name} on {class}/{}: {}", split.as_str(), report.summary(3));
            Ok(())
        }
        Command::Experiment { table } => {
            let manifest_dir = common
                .manifest
                .as_deref()
                .and_then(Path::parent)
                .map(Path::to_path_buf)
                .unwrap_or_else(|| PathBuf::from("."));
            let mut run = Run::open(manifest, &common.out_dir, &manifest_dir)?;
            run.verbose = true;
            println!("run directory {}", run.dir.display());
            let outcome = run.run(table.into())?;
            print!("{}", outcome.render());
            if !outcome.passed() {
                eprintln!("mmsr: {} directional check failed; see the report", outcome.experiment.name());
            }
            Ok(())
        }
    }
}

fn manifest_for(common: &Common) -> Result<ExperimentManifest> {
    let mut m = match &common.manifest {
        Some(path) => ExperimentManifest::read(path)?,
        None => match common.scale {
            Scale::Desk => ExperimentManifest::desk(0),
            Scale::Paper => ExperimentManifest::paper(0),
        },
    };
    if let Some(seed) = common.seed {
        m.seed = seed;
    }
    Ok(m)
}

/// Resolves `rel` inside `out_dir`, refusing paths that would escape it.
fn output_path(out_dir: &Path, rel: &Path) -> Result<PathBuf> {
    if rel.components().any(|c| matches!(c, Component::ParentDir)) {
        return Err(Error::Usage(format!("output path {} may not contain '..'", rel.display())));
    }
    if rel.is_absolute() {
        if rel.starts_with(out_dir) {
            return Ok(rel.to_path_buf());
        }
        return Err(Error::Usage(format!(
            "output path {} is outside --out-dir {}",
            rel.display(),
            out_dir.display()
        )));
    }
    let path = out_dir.join(rel);
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    Ok(path)
}

fn upsample_bicubic(lr: &Tensor<f32>, scale: usize) -> Result<Tensor<f32>> {
    let [n, c, h, w] = lr.dims4()?;
    let img = lr.clone().reshape(&[n * c, h, w])?;
    bicubic_resize(&img, h * scale, w * scale)?.reshape(&[n, c, h * scale, w * scale])
}

#[allow(clippy::too_many_arguments)]
fn synth(
    common: &Common,
    manifest: &ExperimentManifest,
    classes: &[String],
    n_train: Option<usize>,
    n_test: Option<usize>,
    n_mixed: Option<usize>,
    size: Option<usize>,
) -> Result<()> {
    let (d_size, d_train, d_test, d_mixed) = match manifest.data {
        DataSpec::Synthetic {
            size,
            n_train,
            n_test,
            n_mixed_test,
            ..
        } => (size, n_train, n_test, n_mixed_test),
        DataSpec::External { .. } => (192, 40, 10, 10),
    };
    let seed = common.seed.unwrap_or(manifest.seed);
    let deg = manifest.degradation();
    let size = size.unwrap_or(d_size);
    let mut sets = Vec::new();
    for label in classes {
        let class: SynthClass = label.parse()?;
        sets.push(synth_corpus::<f32>(class, Split::Train, n_train.unwrap_or(d_train), size, seed, deg)?);
        sets.push(synth_corpus::<f32>(class, Split::Test, n_test.unwrap_or(d_test), size, seed, deg)?);
    }
    let n_mixed = n_mixed.unwrap_or(d_mixed);
    if n_mixed > 0 {
        sets.push(synth_corpus::<f32>(SynthClass::Mixed, Split::Test, n_mixed, size, seed, deg)?);
    }
    let refs: Vec<&ClassDataset<f32>> = sets.iter().collect();
    let path = write_datasets(&refs, &common.out_dir)?;
    let count: usize = sets.iter().map(|s| s.len()).sum();
    println!("wrote {count} image pairs; dataset manifest {}", path.display());
    Ok(())
}

fn load_split(data: &Path, split: Split) -> Result<Vec<ClassDataset<f32>>> {
    let dm = DatasetManifest::read(data)?;
    dm.load(data.parent().unwrap_or(Path::new(".")), split)
}

fn load_class(data: &Path, split: Split, class: &str) -> Result<ClassDataset<f32>> {
    load_split(data, split)?
        .into_iter()
        .find(|d| d.class_label == class)
        .ok_or_else(|| Error::Data(format!("no {} split for class {class:?} in {}", split.as_str(), data.display())))
}

fn train_model(
    common: &Common,
    manifest: &ExperimentManifest,
    data: &Path,
    class: &str,
    name: Option<String>,
    iters: Option<u64>,
) -> Result<()> {
    let sets = load_split(data, Split::Train)?;
    let ds = if class == GENERIC_LABEL {
        let parts: Vec<&ClassDataset<f32>> = sets.iter().collect();
        ClassDataset::union(GENERIC_LABEL, &parts)?
    } else {
        sets.into_iter()
            .find(|d| d.class_label == class)
            .ok_or_else(|| Error::Data(format!("no train split for class {class:?}")))?
    };
    let mut schedule = manifest.sr_schedule;
    if let Some(n) = iters {
        schedule.total_iters = n;
    }
    let seed = common.seed.unwrap_or(manifest.seed);
    let tag = rng::label_tag(class);
    let mut model = SrModel::<f32>::build(manifest.model, class, rng::derive_seed(seed, &[2, tag]))?;
    let spec = PatchSpec {
        hr_patch: manifest.hr_patch,
        scale: manifest.model.scale,
        batch: manifest.batch,
        seed: rng::derive_seed(seed, &[3, tag]),
    };
    let options = TrainOptions {
        loss: manifest.loss,
        ..TrainOptions::default()
    };
    let total = schedule.total_iters;
    let mut hook = |step: u64, _: &SrModel<f32>| -> Result<()> {
        if (step + 1).is_multiple_of(500) {
            println!("step {}/{total}", step + 1);
        }
        Ok(())
    };
    println!("training {class} model on {} images for {total} steps", ds.len());
    let curve = train_sr(&mut model, &ds, &spec, &schedule, &options, Some(&mut hook))?;
    let name = name.unwrap_or_else(|| class.to_string());
    let path = output_path(&common.out_dir, Path::new(&format!("{name}.mmsr")))?;
    checkpoint::save(&model, &path)?;
    std::fs::write(path.with_extension("loss.tsv"), curve.to_tsv())?;
    println!("wrote {}", path.display());
    Ok(())
}

fn load_bank(paths: &[PathBuf]) -> Result<ModelBank<f32>> {
    let models = paths
        .iter()
        .map(|p| checkpoint::load::<f32, SrModel<f32>>(p))
        .collect::<Result<Vec<_>>>()?;
    let mut bank = ModelBank::new(models)?;
    bank.freeze();
    Ok(bank)
}

fn train_fusion_cmd(
    common: &Common,
    manifest: &ExperimentManifest,
    mode: FusionMode,
    data: &Path,
    bank_paths: &[PathBuf],
    class: Option<String>,
    iters: Option<u64>,
) -> Result<()> {
    let sets = load_split(data, Split::Train)?;
    let chosen: Vec<&ClassDataset<f32>> = match mode {
        FusionMode::ClassSpecific => {
            let class = class.unwrap_or_else(|| manifest.focus_class.clone());
            let ds = sets
                .iter()
                .find(|d| d.class_label == class)
                .ok_or_else(|| Error::Data(format!("no train split for class {class:?}")))?;
            vec![ds]
        }
        FusionMode::Generic => sets.iter().collect(),
    };
    let stream = make_fusion_dataset(mode, &chosen)?;
    let bank = load_bank(bank_paths)?;
    let mut schedule = manifest.fusion.schedule;
    if let Some(n) = iters {
        schedule.total_iters = n;
    }
    let seed = common.seed.unwrap_or(manifest.seed);
    let config = mmsr::fusion::FusionConfig {
        n_inputs: bank.len(),
        n_features: manifest.fusion.n_features,
        n_res_blocks: manifest.fusion.n_res_blocks,
        skip_mode: Default::default(),
    };
    let mut net = FusionNet::<f32>::build(config, rng::derive_seed(seed, &[4, mode as u64]))?;
    let spec = PatchSpec {
        hr_patch: manifest.fusion.hr_patch,
        scale: manifest.model.scale,
        batch: manifest.fusion.batch,
        seed: rng::derive_seed(seed, &[5, mode as u64]),
    };
    let options = TrainOptions {
        loss: manifest.loss,
        ..TrainOptions::default()
    };
    let total = schedule.total_iters;
    let mut hook = |step: u64, _: &FusionNet<f32>| -> Result<()> {
        if (step + 1).is_multiple_of(100) {
            println!("step {}/{total}", step + 1);
        }
        Ok(())
    };
    let before = bank.checksums();
    println!("training {} fusion over {} models for {total} steps", fusion_mode_name(mode), bank.len());
    let curve = train_fusion(&mut net, &bank, &stream, &spec, &schedule, &options, Some(&mut hook))?;
    if bank.checksums() != before {
        return Err(Error::Numeric("bank parameters changed during fusion training".into()));
    }
    let path = output_path(&common.out_dir, Path::new(&format!("fusion-{}.mmsr", fusion_mode_name(mode))))?;
    checkpoint::save(&net, &path)?;
    std::fs::write(path.with_extension("loss.tsv"), curve.to_tsv())?;
    println!("wrote {}", path.display());
    Ok(())
}

/// One SR model, or a bank plus fusion network.
enum Predictor {
    Single(SrModel<f32>),
    Fused(ModelBank<f32>, FusionNet<f32>),
}

impl Predictor {
    fn load(models: &[PathBuf], fusion: Option<&Path>) -> Result<Self> {
        match fusion {
            None if models.len() == 1 => {
                if let CheckpointMeta::Fusion { .. } = checkpoint::peek_meta(&models[0])? {
                    return Err(Error::Usage("--model expects an SR checkpoint; pass fusion nets with --fusion".into()));
                }
                Ok(Predictor::Single(checkpoint::load(&models[0])?))
            }
            None => Err(Error::Usage(format!("{} models given without --fusion", models.len()))),
            Some(f) => {
                let bank = load_bank(models)?;
                let net: FusionNet<f32> = checkpoint::load(f)?;
                if net.config().n_inputs != bank.len() {
                    return Err(Error::Usage(format!(
                        "fusion net expects {} models, got {}",
                        net.config().n_inputs,
                        bank.len()
                    )));
                }
                Ok(Predictor::Fused(bank, net))
            }
        }
    }

    fn name(&self) -> String {
        match self {
            Predictor::Single(m) => m.class_label().to_string(),
            Predictor::Fused(..) => "mmsr".to_string(),
        }
    }

    fn predict(&self, lr: &Tensor<f32>) -> Result<Tensor<f32>> {
        match self {
            Predictor::Single(m) => m.super_resolve(lr),
            Predictor::Fused(bank, net) => net.fuse(&bank.forward(lr)?),
        }
    }
}
