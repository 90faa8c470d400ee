use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use serde::{Deserialize, Serialize};
use tscan::metrics::{compare_csv, EvalResult};
use tscan::model::{attention_report, sidecar_path, Fusion, ModelConfig, Task, Tscan};
use tscan::pipeline::prepared::{DICTIONARY_FILE, PREPARED_MANIFEST, SAMPLES_FILE};
use tscan::pipeline::{
    prepare, read_cohort, synth_cohort_with, write_cohort, PrepareConfig, PreparedDataset, Sample,
    Split, SynthNoise, VariableDictionary, EVENTS_FILE, PHENOTYPES_FILE, STAYS_FILE,
};
use tscan::train::{
    ablate, evaluate, logistic_baseline, train_model, write_ablation_csv, BaselineConfig,
    TrainConfig,
};

use crate::output::{RunManifest, StagedDir};
use crate::{
    AblateArgs, BaselineArgs, Cli, Command, CompareArgs, EvalArgs, ExperimentArgs, ExplainArgs,
    Hyper, PrepareArgs, SynthArgs, TrainArgs,
};

const DEFAULT_CHUNKS: usize = 4;
const CHECKPOINT: &str = "model.ckpt";

pub fn run(cli: Cli) -> Result<()> {
    let root = cli.data_root.as_deref();
    match cli.command {
        Command::Synth(a) => synth(a, root),
        Command::Prepare(a) => prepare_cmd(a, root),
        Command::Train(a) => train_cmd(a, root),
        Command::Eval(a) => eval_cmd(a, root),
        Command::Ablate(a) => ablate_cmd(a, root),
        Command::Explain(a) => explain_cmd(a, root),
        Command::Baseline(a) => baseline_cmd(a, root),
        Command::Compare(a) => compare_cmd(a),
    }
}

/// An explicit path, else `<root>/<default>`.
fn locate(
    given: Option<PathBuf>,
    root: Option<&Path>,
    default: &str,
    flag: &str,
) -> Result<PathBuf> {
    match (given, root) {
        (Some(p), _) => Ok(p),
        (None, Some(r)) => Ok(r.join(default)),
        (None, None) => bail!("{flag} is required when TSCAN_DATA_DIR is not set"),
    }
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(value)? + "\n")
        .with_context(|| format!("writing {}", path.display()))
}

/// Prints to stdout; a closed pipe is not an error.
fn print_json(value: &impl Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    match writeln!(std::io::stdout().lock(), "{text}") {
        Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => Err(e.into()),
        _ => Ok(()),
    }
}

fn synth(a: SynthArgs, root: Option<&Path>) -> Result<()> {
    let out = locate(a.out, root, "raw", "--out")?;
    let noise = SynthNoise {
        minor_rate: a.minor_rate,
        second_stay_rate: a.second_stay_rate,
        transfer_rate: a.transfer_rate,
        missing_hadm_rate: a.missing_hadm_rate,
        missing_icustay_rate: a.missing_icustay_rate,
    };
    for (name, r) in [
        ("minor-rate", noise.minor_rate),
        ("second-stay-rate", noise.second_stay_rate),
        ("transfer-rate", noise.transfer_rate),
        ("missing-hadm-rate", noise.missing_hadm_rate),
        ("missing-icustay-rate", noise.missing_icustay_rate),
    ] {
        ensure!((0.0..=1.0).contains(&r), "--{name} {r} is outside [0, 1]");
    }
    let dict = VariableDictionary::builtin_24();
    let staged = StagedDir::create(&out, a.force)?;
    let cohort = synth_cohort_with(a.seed, a.patients as usize, &dict, &noise)?;
    write_cohort(staged.path(), &cohort)?;
    std::fs::write(staged.path().join(DICTIONARY_FILE), dict.to_json()?)?;
    log::info!(
        "{} stays, {} events written to {}",
        cohort.stays.len(),
        cohort.events.len(),
        out.display()
    );

    #[derive(Serialize)]
    struct Config {
        seed: u64,
        patients: u32,
        noise: SynthNoise,
    }
    let config = Config {
        seed: a.seed,
        patients: a.patients,
        noise,
    };
    let manifest = RunManifest::new("synth", &config, Some(a.seed))?;
    manifest.finish(
        staged,
        &[STAYS_FILE, EVENTS_FILE, PHENOTYPES_FILE, DICTIONARY_FILE],
    )?;
    Ok(())
}

fn prepare_cmd(a: PrepareArgs, root: Option<&Path>) -> Result<()> {
    let input = locate(a.input, root, "raw", "--in")?;
    let out = locate(a.out, root, "prepared", "--out")?;
    ensure!(
        input.is_dir(),
        "input directory {} does not exist",
        input.display()
    );
    let dict_path = a
        .dict
        .or_else(|| Some(input.join(DICTIONARY_FILE)).filter(|p| p.exists()));
    let dict = match &dict_path {
        Some(p) => VariableDictionary::load(p)
            .with_context(|| format!("loading dictionary {}", p.display()))?,
        None => VariableDictionary::builtin_24(),
    };
    let (stays, events, phenotypes) = read_cohort(&input)
        .with_context(|| format!("reading cohort tables in {}", input.display()))?;

    let mut cfg = PrepareConfig::new(a.task);
    cfg.t = a.t.unwrap_or(cfg.t);
    cfg.stride = a.stride.unwrap_or(cfg.stride);
    cfg.split_seed = a.split_seed;
    let ds = prepare(&stays, &events, phenotypes.as_deref(), &dict, &cfg)?;
    for s in &ds.manifest.stages {
        log::info!(
            "{}: {} in, {} kept, dropped {:?}",
            s.stage,
            s.input,
            s.kept,
            s.dropped
        );
    }
    ensure!(
        ds.manifest.stages.iter().all(|s| s.is_conserved()),
        "stage counts do not add up"
    );
    if ds.index.is_empty() {
        log::warn!("no {} samples were extracted", a.task);
    }

    let staged = StagedDir::create(&out, a.force)?;
    ds.write(staged.path())?;
    let mut manifest = RunManifest::new("prepare", &cfg, Some(cfg.split_seed))?;
    for f in [STAYS_FILE, EVENTS_FILE, PHENOTYPES_FILE] {
        let p = input.join(f);
        if p.exists() {
            manifest.input(&p, f)?;
        }
    }
    if let Some(p) = &dict_path {
        manifest.input(p, "dictionary")?;
    }
    manifest.finish(
        staged,
        &["episodes", SAMPLES_FILE, DICTIONARY_FILE, PREPARED_MANIFEST],
    )?;
    Ok(())
}

/// Paths, task, split seed, model and training configuration of one run.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ExperimentSpec {
    pub data_dir: PathBuf,
    pub out_dir: PathBuf,
    pub task: Task,
    /// When set, its columns must match the dataset's.
    #[serde(default)]
    pub dictionary: Option<PathBuf>,
    pub split_seed: u64,
    pub model: ModelConfig,
    #[serde(default)]
    pub train: TrainConfig,
}

/// The reproducible part of a spec: everything but the paths.
#[derive(Serialize)]
struct RunConfig<'a> {
    task: Task,
    split_seed: u64,
    model: &'a ModelConfig,
    train: &'a TrainConfig,
}

impl ExperimentSpec {
    fn run_config(&self) -> RunConfig<'_> {
        RunConfig {
            task: self.task,
            split_seed: self.split_seed,
            model: &self.model,
            train: &self.train,
        }
    }
}

fn apply(h: &Hyper, model: &mut ModelConfig, train: &mut TrainConfig) {
    model.n = h.n.unwrap_or(model.n);
    model.layer.d_model = h.d_model.unwrap_or(model.layer.d_model);
    model.layer.n_heads = h.heads.unwrap_or(model.layer.n_heads);
    model.layer.d_ff = h.d_ff.unwrap_or(model.layer.d_ff);
    model.layer.dropout_rate = h.dropout.unwrap_or(model.layer.dropout_rate);
    train.epochs = h.epochs.unwrap_or(train.epochs);
    train.batch_size = h.batch_size.unwrap_or(train.batch_size);
    train.learning_rate = h.learning_rate.unwrap_or(train.learning_rate);
    train.early_stop_patience = h.patience.unwrap_or(train.early_stop_patience);
    train.seed = h.seed.unwrap_or(train.seed);
    train.class_weight = h.class_weight.or(train.class_weight);
}

fn load_dataset(dir: &Path) -> Result<PreparedDataset> {
    ensure!(
        dir.is_dir(),
        "dataset directory {} does not exist",
        dir.display()
    );
    PreparedDataset::load(dir).with_context(|| format!("loading dataset {}", dir.display()))
}

/// Checks a model configuration against the dataset it will see.
fn check_against(model: &ModelConfig, ds: &PreparedDataset) -> Result<()> {
    let m = &ds.manifest;
    let mismatch = |what: &str, model_v: String, data_v: String| {
        anyhow::anyhow!(
            "checkpoint/config mismatch: model {what} = {model_v}, dataset {what} = {data_v}"
        )
    };
    if model.task != m.config.task {
        return Err(mismatch(
            "task",
            model.task.to_string(),
            m.config.task.to_string(),
        ));
    }
    if model.t != m.config.t {
        return Err(mismatch("t", model.t.to_string(), m.config.t.to_string()));
    }
    if model.d != m.d {
        return Err(mismatch("d", model.d.to_string(), m.d.to_string()));
    }
    model.validate().context("checkpoint/config mismatch")?;
    Ok(())
}

/// Builds the spec from the experiment file (if any), the dataset manifest
/// and command-line overrides, and validates it.
fn resolve_experiment(
    a: &ExperimentArgs,
    fusion: Option<Fusion>,
    out: Option<PathBuf>,
    root: Option<&Path>,
    default_out: &str,
) -> Result<(ExperimentSpec, PreparedDataset)> {
    let file: Option<ExperimentSpec> = match &a.experiment {
        Some(p) => Some(
            serde_json::from_str(
                &std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?,
            )
            .with_context(|| format!("parsing experiment {}", p.display()))?,
        ),
        None => None,
    };
    let data_dir = match (&a.data, &file) {
        (Some(d), _) => d.clone(),
        (None, Some(f)) => f.data_dir.clone(),
        (None, None) => locate(None, root, "prepared", "--data")?,
    };
    let out_dir = match (out, &file) {
        (Some(o), _) => o,
        (None, Some(f)) => f.out_dir.clone(),
        (None, None) => locate(None, root, default_out, "--out")?,
    };
    let ds = load_dataset(&data_dir)?;
    let m = &ds.manifest;
    let mut spec = match file {
        Some(f) => ExperimentSpec {
            data_dir,
            out_dir,
            ..f
        },
        None => ExperimentSpec {
            data_dir,
            out_dir,
            task: m.config.task,
            dictionary: None,
            split_seed: m.config.split_seed,
            model: ModelConfig::new(m.config.task, m.config.t, m.d, DEFAULT_CHUNKS),
            train: TrainConfig::default(),
        },
    };
    apply(&a.hyper, &mut spec.model, &mut spec.train);
    if let Some(f) = fusion {
        spec.model.fusion = f;
    }

    ensure!(
        spec.task == m.config.task,
        "experiment task {} but the dataset was prepared for {}",
        spec.task,
        m.config.task
    );
    ensure!(
        spec.split_seed == m.config.split_seed,
        "experiment split seed {} but the dataset was split with seed {}",
        spec.split_seed,
        m.config.split_seed
    );
    if let Some(p) = &spec.dictionary {
        let dict = VariableDictionary::load(p)
            .with_context(|| format!("loading dictionary {}", p.display()))?;
        ensure!(
            dict.column_names() == m.columns,
            "dictionary {} does not describe the dataset's columns",
            p.display()
        );
    }
    check_against(&spec.model, &ds)?;
    spec.train.validate()?;
    Ok((spec, ds))
}

fn dataset_inputs(manifest: &mut RunManifest, dir: &Path) -> Result<()> {
    for f in [PREPARED_MANIFEST, SAMPLES_FILE, "episodes/episodes.json"] {
        manifest.input(&dir.join(f), &format!("data/{f}"))?;
    }
    Ok(())
}

fn split_samples(ds: &PreparedDataset, split: Split) -> Result<Vec<Sample>> {
    let s = ds.samples(Some(split))?;
    log::info!("{} {} samples", s.len(), split.as_str());
    Ok(s)
}

fn train_cmd(a: TrainArgs, root: Option<&Path>) -> Result<()> {
    let (spec, ds) = resolve_experiment(&a.exp, a.fusion, a.out, root, "runs/train")?;
    let train_set = split_samples(&ds, Split::Train)?;
    let val_set = split_samples(&ds, Split::Val)?;
    ensure!(!train_set.is_empty(), "the training split is empty");

    let staged = StagedDir::create(&spec.out_dir, a.force)?;
    let ckpt = staged.path().join(CHECKPOINT);
    let model = Tscan::new(spec.model.clone(), spec.train.seed)?;
    log::info!("{} parameters", model.params().num_scalars());
    let (model, log) = train_model(model, &train_set, &val_set, &spec.train, Some(&ckpt))?;
    model.save(&ckpt)?;
    log.write_csv(BufWriter::new(File::create(
        staged.path().join("train_log.csv"),
    )?))?;
    write_json(&staged.path().join("experiment.json"), &spec)?;
    let mut declared = vec![
        CHECKPOINT,
        "model.ckpt.json",
        "train_log.csv",
        "experiment.json",
    ];
    if !val_set.is_empty() {
        match evaluate(&model, &val_set, None) {
            Ok(r) => {
                write_json(&staged.path().join("eval_val.json"), &r)?;
                declared.push("eval_val.json");
            }
            Err(e) => log::warn!("validation metrics unavailable: {e}"),
        }
    }

    // The saved checkpoint must reproduce the in-memory model.
    let reloaded = Tscan::load(&ckpt)?;
    let probe = &train_set[0].x;
    ensure!(
        reloaded.predict(probe)? == model.predict(probe)?,
        "reloaded checkpoint does not reproduce the trained model"
    );
    eprintln!(
        "best epoch {} of {}: val {} = {}",
        log.best_epoch,
        log.epochs.len(),
        log.metric,
        log.best().val_metric
    );

    let mut manifest = RunManifest::new("train", &spec.run_config(), Some(spec.train.seed))?;
    dataset_inputs(&mut manifest, &spec.data_dir)?;
    manifest.finish(staged, &declared)?;
    Ok(())
}

fn load_model(path: &Path, ds: &PreparedDataset) -> Result<Tscan> {
    ensure!(
        path.is_file(),
        "checkpoint {} does not exist",
        path.display()
    );
    ensure!(
        sidecar_path(path).is_file(),
        "checkpoint config {} does not exist",
        sidecar_path(path).display()
    );
    let model =
        Tscan::load(path).with_context(|| format!("loading checkpoint {}", path.display()))?;
    check_against(model.config(), ds)?;
    Ok(model)
}

fn eval_cmd(a: EvalArgs, root: Option<&Path>) -> Result<()> {
    let ckpt = locate(a.model, root, "runs/train/model.ckpt", "--model")?;
    let data = locate(a.data, root, "prepared", "--data")?;
    let ds = load_dataset(&data)?;
    let model = load_model(&ckpt, &ds)?;
    let out = match a.out {
        Some(o) => o,
        None => ckpt
            .parent()
            .unwrap_or(Path::new("."))
            .join(format!("eval-{}", a.split.as_str())),
    };
    let samples = split_samples(&ds, a.split)?;
    ensure!(
        !samples.is_empty(),
        "the {} split is empty",
        a.split.as_str()
    );
    let bootstrap = (a.bootstrap > 0).then_some((a.bootstrap, a.bootstrap_seed));
    let mut result = evaluate(&model, &samples, bootstrap)?;
    result
        .metadata
        .insert("split".into(), a.split.as_str().into());

    let staged = StagedDir::create(&out, a.force)?;
    write_json(&staged.path().join("eval.json"), &result)?;
    #[derive(Serialize)]
    struct Config {
        model: ModelConfig,
        split: Split,
        bootstrap: usize,
        bootstrap_seed: u64,
    }
    let config = Config {
        model: model.config().clone(),
        split: a.split,
        bootstrap: a.bootstrap,
        bootstrap_seed: a.bootstrap_seed,
    };
    let mut manifest = RunManifest::new("eval", &config, bootstrap.map(|b| b.1))?;
    manifest.input(&ckpt, "model.ckpt")?;
    dataset_inputs(&mut manifest, &data)?;
    manifest.finish(staged, &["eval.json"])?;
    print_json(&result)?;
    Ok(())
}

fn ablate_cmd(a: AblateArgs, root: Option<&Path>) -> Result<()> {
    let (spec, ds) = resolve_experiment(&a.exp, None, a.out, root, "runs/ablate")?;
    let fusions = if a.fusions.is_empty() {
        Fusion::ALL.to_vec()
    } else {
        a.fusions.clone()
    };
    let train_set = split_samples(&ds, Split::Train)?;
    let val_set = split_samples(&ds, Split::Val)?;
    let test_set = split_samples(&ds, Split::Test)?;
    ensure!(!train_set.is_empty(), "the training split is empty");

    let staged = StagedDir::create(&spec.out_dir, a.force)?;
    let rows = ablate(
        &train_set,
        &val_set,
        &test_set,
        &spec.model,
        &spec.train,
        &fusions,
    )?;
    write_ablation_csv(
        &rows,
        BufWriter::new(File::create(staged.path().join("ablation.csv"))?),
    )?;
    write_json(&staged.path().join("ablation.json"), &rows)?;
    std::fs::create_dir(staged.path().join("logs"))?;
    for r in &rows {
        let f = File::create(staged.path().join("logs").join(format!("{}.csv", r.fusion)))?;
        r.log.write_csv(BufWriter::new(f))?;
    }
    let mut declared = vec!["ablation.csv", "ablation.json", "logs"];
    for (set, file) in [("test", "compare_test.csv"), ("val", "compare_val.csv")] {
        let runs: Option<Vec<(String, EvalResult)>> = rows
            .iter()
            .map(|r| {
                let e = if set == "test" { &r.test } else { &r.val };
                e.clone().map(|e| (r.fusion.to_string(), e))
            })
            .collect();
        if let Some(runs) = runs {
            std::fs::write(staged.path().join(file), compare_csv(&runs)?)?;
            declared.push(file);
        }
    }
    for r in &rows {
        eprintln!(
            "{:>14}: best val {} = {:.4}",
            r.fusion,
            r.log.metric,
            r.log.best().val_metric
        );
    }
    write_json(&staged.path().join("experiment.json"), &spec)?;

    #[derive(Serialize)]
    struct Config<'a> {
        #[serde(flatten)]
        run: RunConfig<'a>,
        fusions: &'a [Fusion],
    }
    let config = Config {
        run: spec.run_config(),
        fusions: &fusions,
    };
    let mut manifest = RunManifest::new("ablate", &config, Some(spec.train.seed))?;
    dataset_inputs(&mut manifest, &spec.data_dir)?;
    manifest.finish(staged, &declared)?;
    Ok(())
}

fn explain_cmd(a: ExplainArgs, root: Option<&Path>) -> Result<()> {
    let ckpt = locate(a.model, root, "runs/train/model.ckpt", "--model")?;
    let data = locate(a.data, root, "prepared", "--data")?;
    let out = locate(a.out, root, "runs/explain", "--out")?;
    let ds = load_dataset(&data)?;
    let model = load_model(&ckpt, &ds)?;
    let mut samples = split_samples(&ds, a.split)?;
    if let Some(k) = a.max_samples {
        samples.truncate(k);
    }
    ensure!(
        !samples.is_empty(),
        "no {} samples to explain",
        a.split.as_str()
    );
    let report = attention_report(&model, samples.iter().map(|s| &s.x), &ds.manifest.columns)?;

    let staged = StagedDir::create(&out, a.force)?;
    let written = report.write(staged.path())?;
    for (name, w) in report.top_indicators(5) {
        log::info!("indicator {name}: {w:.4}");
    }
    let names: Vec<String> = written
        .iter()
        .map(|p| {
            p.file_name()
                .expect("report files have names")
                .to_string_lossy()
                .into_owned()
        })
        .collect();

    #[derive(Serialize)]
    struct Config {
        model: ModelConfig,
        split: Split,
        max_samples: Option<usize>,
    }
    let config = Config {
        model: model.config().clone(),
        split: a.split,
        max_samples: a.max_samples,
    };
    let mut manifest = RunManifest::new("explain", &config, None)?;
    manifest.input(&ckpt, "model.ckpt")?;
    dataset_inputs(&mut manifest, &data)?;
    let declared: Vec<&str> = names.iter().map(String::as_str).collect();
    manifest.finish(staged, &declared)?;
    Ok(())
}

fn baseline_cmd(a: BaselineArgs, root: Option<&Path>) -> Result<()> {
    let data = locate(a.data, root, "prepared", "--data")?;
    let out = locate(a.out, root, "runs/baseline", "--out")?;
    let ds = load_dataset(&data)?;
    let train_set = split_samples(&ds, Split::Train)?;
    let eval_set = split_samples(&ds, a.split)?;
    ensure!(
        !train_set.is_empty() && !eval_set.is_empty(),
        "the training or {} split is empty",
        a.split.as_str()
    );
    let cfg = BaselineConfig {
        l2: a.l2,
        learning_rate: a.learning_rate,
        iterations: a.iterations,
    };
    let (model, mut result) = logistic_baseline(&train_set, &eval_set, ds.task(), &cfg)?;
    result
        .metadata
        .insert("split".into(), a.split.as_str().into());

    let staged = StagedDir::create(&out, a.force)?;
    write_json(&staged.path().join("baseline.json"), &model)?;
    write_json(&staged.path().join("eval.json"), &result)?;
    #[derive(Serialize)]
    struct Config {
        task: Task,
        split: Split,
        baseline: BaselineConfig,
    }
    let config = Config {
        task: ds.task(),
        split: a.split,
        baseline: cfg,
    };
    let mut manifest = RunManifest::new("baseline", &config, None)?;
    dataset_inputs(&mut manifest, &data)?;
    manifest.finish(staged, &["baseline.json", "eval.json"])?;
    print_json(&result)?;
    Ok(())
}

fn compare_cmd(a: CompareArgs) -> Result<()> {
    let mut runs = Vec::with_capacity(a.runs.len());
    let mut files = Vec::with_capacity(a.runs.len());
    for arg in &a.runs {
        let (name, path) = match arg.split_once('=') {
            Some((n, p)) => (n.to_string(), PathBuf::from(p)),
            None => {
                let p = PathBuf::from(arg);
                let name = p
                    .parent()
                    .and_then(|d| d.file_name())
                    .map(|n| n.to_string_lossy().into_owned())
                    .unwrap_or_else(|| arg.clone());
                (name, p)
            }
        };
        let text = std::fs::read_to_string(&path)
            .with_context(|| format!("reading {}", path.display()))?;
        let result: EvalResult =
            serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
        files.push((name.clone(), path));
        runs.push((name, result));
    }
    let staged = StagedDir::create(&a.out, a.force)?;
    std::fs::write(staged.path().join("compare.csv"), compare_csv(&runs)?)?;
    let names: Vec<&str> = runs.iter().map(|(n, _)| n.as_str()).collect();
    let mut manifest = RunManifest::new("compare", &names, None)?;
    for (name, path) in &files {
        manifest.input(path, name)?;
    }
    manifest.finish(staged, &["compare.csv"])?;
    Ok(())
}
