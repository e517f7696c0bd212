use crate::lists::parse_usize_list;
use crate::manifest::RunManifest;
use crate::plot::{self, Panel};
use crate::{DataArgs, EvalArgs, SampleArgs, SynthArgs, TrainArgs, UsageError};
use anyhow::{bail, Context, Result};
use cgp_core::baselines::NnIndex;
use cgp_core::checkpoint;
use cgp_core::data::{self, DatasetSplit, LabeledSequence, SynthConfig, SynthMeta, DEFAULT_CLASSES, SEQUENCE_LENGTH};
use cgp_core::distribution::ConstrainOptions;
use cgp_core::evaluation::{self, EvalConfig, Metric, Predictor};
use cgp_core::network::{init_model, Model, ModelConfig, ModelKind};
use cgp_core::prediction::{self, RolloutRecord};
use cgp_core::training::{self, TrainConfig};
use serde::Serialize;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

/// `<path><suffix>`, e.g. `data.tsv` → `data.tsv.meta.json`.
fn sidecar(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

struct Loaded {
    items: Vec<LabeledSequence>,
    split: DatasetSplit,
    num_classes: usize,
}

impl Loaded {
    fn subset(&self, idx: &[usize]) -> Vec<LabeledSequence> {
        idx.iter().map(|&i| self.items[i].clone()).collect()
    }
}

/// Class count from the flag, else the synth sidecar, else the default.
fn resolve_classes(args: &DataArgs) -> Result<usize> {
    if let Some(k) = args.classes {
        return Ok(k);
    }
    let meta = sidecar(&args.data, ".meta.json");
    if meta.exists() {
        let meta: SynthMeta = serde_json::from_str(&std::fs::read_to_string(&meta)?)
            .with_context(|| format!("reading {}", meta.display()))?;
        return Ok(meta.classes.len());
    }
    Ok(DEFAULT_CLASSES)
}

fn load_data(args: &DataArgs) -> Result<Loaded> {
    if !args.data.exists() {
        return Err(usage(format!("data file {} does not exist", args.data.display())));
    }
    let num_classes = resolve_classes(args)?;
    let samples = data::load_trajectories(&args.data, num_classes)
        .with_context(|| format!("loading {}", args.data.display()))?;
    let items = data::prepare(&samples, SEQUENCE_LENGTH)?;
    let split = data::split_dataset(items.len(), args.split_seed)?;
    Ok(Loaded {
        items,
        split,
        num_classes,
    })
}

pub fn synth(args: &SynthArgs) -> Result<()> {
    let text = std::fs::read_to_string(&args.config)
        .map_err(|e| usage(format!("cannot read config {}: {e}", args.config.display())))?;
    let config = SynthConfig::from_toml(&text).map_err(|e| usage(e.to_string()))?;
    let seed = args.seed.or(config.seed).unwrap_or(0);
    let meta_path = sidecar(&args.out, ".meta.json");
    RunManifest::new("synth", &config)
        .seed("synth", seed)
        .input("config", &args.config)
        .output("data", &args.out)
        .output("meta", &meta_path)
        .write(&sidecar(&args.out, ".manifest.json"))?;
    let dataset = data::synth_generate(&config, seed).map_err(|e| usage(e.to_string()))?;
    data::write_trajectories(&args.out, &dataset.samples)?;
    std::fs::write(&meta_path, serde_json::to_string_pretty(&dataset.meta)? + "\n")?;
    for b in &dataset.meta.bifurcations {
        eprintln!("{} / {} diverge at step {}", b.a, b.b, b.step);
    }
    eprintln!("wrote {} samples to {}", dataset.samples.len(), args.out.display());
    Ok(())
}

#[derive(Serialize)]
struct TrainSettings<'a> {
    model: ModelConfig,
    train: &'a TrainConfig,
    num_classes: usize,
    split_seed: u64,
    sequence_length: usize,
    log_sigma_floor: Option<f64>,
    train_items: usize,
    validation_items: usize,
}

pub fn train(args: &TrainArgs) -> Result<()> {
    let kind: ModelKind = args.model.parse().map_err(|e: String| usage(e))?;
    let loaded = load_data(&args.data)?;
    let config = ModelConfig::new(kind, loaded.num_classes, args.components, args.hidden);
    config.validate().map_err(|e| usage(e.to_string()))?;
    let train_config = TrainConfig {
        learning_rate: args.lr,
        batch_size: args.batch,
        max_epochs: args.max_epochs,
        patience: args.patience,
        seed: args.seed,
        ..TrainConfig::default()
    };
    train_config.validate().map_err(|e| usage(e.to_string()))?;
    let options = ConstrainOptions::default();
    let train_set = loaded.subset(&loaded.split.train);
    let val_set = loaded.subset(&loaded.split.validation);

    std::fs::create_dir_all(&args.out)?;
    let ckpt = args.out.join("model.ckpt");
    let log_path = args.out.join("train_log.jsonl");
    let timing_path = args.out.join("timing.jsonl");
    let settings = TrainSettings {
        model: config,
        train: &train_config,
        num_classes: loaded.num_classes,
        split_seed: args.data.split_seed,
        sequence_length: SEQUENCE_LENGTH,
        log_sigma_floor: options.log_sigma_floor,
        train_items: train_set.len(),
        validation_items: val_set.len(),
    };
    RunManifest::new("train", &settings)
        .seed("init_and_shuffle", args.seed)
        .seed("split", args.data.split_seed)
        .input("data", &args.data.data)
        .output("checkpoint", &ckpt)
        .output("epoch_log", &log_path)
        .output("timing", &timing_path)
        .write(&args.out.join("manifest.json"))?;

    let model = init_model(config, args.seed)?;
    if args.max_epochs == 0 {
        eprintln!("warning: --max-epochs 0, writing the untrained model");
    }
    checkpoint::save(&model, &ckpt)?;
    let mut log = BufWriter::new(File::create(&log_path)?);
    let mut timing = BufWriter::new(File::create(&timing_path)?);
    let mut io_error = None;
    let outcome = training::train(model, &train_set, &val_set, &train_config, options, |record, best| {
        let write = (|| -> Result<()> {
            writeln!(log, "{}", serde_json::to_string(record)?)?;
            log.flush()?;
            writeln!(timing, "{{\"epoch\":{},\"wall_time_s\":{}}}", record.epoch, record.wall_time_s)?;
            if let Some(best) = best {
                checkpoint::save(best, &ckpt)?;
            }
            Ok(())
        })();
        if let Err(e) = write {
            io_error.get_or_insert(e);
        }
        eprintln!(
            "epoch {:>4}  train {:>10.4}  val {:>10.4}{}  ({:.1}s)",
            record.epoch,
            record.train_loss,
            record.val_loss,
            if record.improved { " *" } else { "" },
            record.wall_time_s
        );
    })
    .context("training failed")?;
    if let Some(e) = io_error {
        return Err(e);
    }
    timing.flush()?;
    checkpoint::save(&outcome.model, &ckpt)?;
    match outcome.best_epoch {
        Some(e) => eprintln!(
            "best epoch {e} of {}{}; checkpoint {}",
            outcome.history.len(),
            if outcome.stopped_early { " (early stop)" } else { "" },
            ckpt.display()
        ),
        None => eprintln!("no epochs run; checkpoint {}", ckpt.display()),
    }
    Ok(())
}

#[derive(Serialize)]
struct EvalSettings<'a> {
    model: &'a str,
    eval: &'a EvalConfig,
    metrics: Vec<Metric>,
    num_classes: usize,
    split_seed: u64,
    subset: &'static str,
    items: usize,
}

fn parse_metrics(text: &str) -> Result<Vec<Metric>> {
    text.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| s.parse::<Metric>().map_err(|e| usage(e.to_string())))
        .collect()
}

fn load_model(path: &Path) -> Result<Model> {
    if !path.exists() {
        return Err(usage(format!("checkpoint {} does not exist", path.display())));
    }
    checkpoint::load(path).with_context(|| format!("loading {}", path.display()))
}

fn check_labels(model: &Model, items: &[LabeledSequence]) -> Result<()> {
    if let Some(bad) = items.iter().find(|it| it.label >= model.config.num_classes) {
        bail!(
            "item {} has class {} but the model has {} classes",
            bad.id,
            bad.label,
            model.config.num_classes
        );
    }
    Ok(())
}

pub fn eval(args: &EvalArgs) -> Result<()> {
    let metrics = parse_metrics(&args.metrics)?;
    let config = EvalConfig {
        n_samples: args.samples,
        horizons: parse_usize_list("dt", &args.dt)?,
        times: parse_usize_list("t", &args.t)?,
        seed: args.seed,
        threads: evaluation::threads_from_env(),
        constrain: ConstrainOptions::default(),
    };
    if config.n_samples == 0 {
        return Err(usage("--samples must be at least 1"));
    }
    let loaded = load_data(&args.data)?;
    let items = if args.all {
        loaded.items.clone()
    } else {
        loaded.subset(&loaded.split.test)
    };
    std::fs::create_dir_all(&args.out)?;
    let report_path = args.out.join("report.jsonl");
    let summary_path = args.out.join("summary.txt");
    let settings = EvalSettings {
        model: &args.model,
        eval: &config,
        metrics: metrics.clone(),
        num_classes: loaded.num_classes,
        split_seed: args.data.split_seed,
        subset: if args.all { "all" } else { "test" },
        items: items.len(),
    };
    let mut manifest = RunManifest::new("eval", &settings)
        .seed("rollouts", args.seed)
        .seed("split", args.data.split_seed)
        .input("data", &args.data.data)
        .output("report", &report_path)
        .output("summary", &summary_path);
    let is_nn = args.model == "1nn";
    if !is_nn {
        manifest = manifest.input("checkpoint", Path::new(&args.model));
    }
    manifest.write(&args.out.join("manifest.json"))?;

    let report = if is_nn {
        let index = NnIndex::from_items(&loaded.subset(&loaded.split.train))?;
        evaluation::evaluate(Predictor::NearestNeighbor(&index), &items, &metrics, &config)?
    } else {
        let model = load_model(Path::new(&args.model))?;
        check_labels(&model, &items)?;
        evaluation::evaluate(Predictor::Model(&model), &items, &metrics, &config)?
    };
    for w in &report.warnings {
        eprintln!("warning: {w}");
    }
    if report.records.is_empty() {
        return Err(usage(format!(
            "no (t, dt) pair fits the sequences (need t + dt <= {}); nothing evaluated",
            SEQUENCE_LENGTH - 1
        )));
    }
    std::fs::write(&report_path, report.to_jsonl())?;
    let summary = report.summary_table();
    std::fs::write(&summary_path, &summary)?;
    print!("{summary}");
    Ok(())
}

#[derive(Serialize)]
struct SampleSettings<'a> {
    item: &'a str,
    times: &'a [usize],
    horizons: &'a [usize],
    samples: usize,
    class_means: bool,
    num_classes: usize,
    split_seed: u64,
}

pub fn sample(args: &SampleArgs) -> Result<()> {
    let times = parse_usize_list("t", &args.t)?;
    let horizons = parse_usize_list("dt", &args.dt)?;
    if args.samples == 0 {
        return Err(usage("--samples must be at least 1"));
    }
    let loaded = load_data(&args.data)?;
    let item = match &args.item {
        Some(id) => loaded
            .items
            .iter()
            .find(|it| &it.id == id)
            .ok_or_else(|| usage(format!("no item with id `{id}`")))?,
        None => &loaded.items[loaded.split.test[0]],
    };
    let last = item.seq.len();
    for &t in &times {
        for &dt in &horizons {
            if t == 0 || dt == 0 || t + dt > last {
                return Err(usage(format!(
                    "t = {t}, dt = {dt} does not fit a sequence of {} points (need 1 <= t, 1 <= dt, t + dt <= {last})",
                    last + 1
                )));
            }
        }
    }
    let rollouts_path = sidecar(&args.out, ".rollouts.tsv");
    let settings = SampleSettings {
        item: &item.id,
        times: &times,
        horizons: &horizons,
        samples: args.samples,
        class_means: args.class_means,
        num_classes: loaded.num_classes,
        split_seed: args.data.split_seed,
    };
    RunManifest::new("sample", &settings)
        .seed("rollouts", args.seed)
        .seed("split", args.data.split_seed)
        .input("checkpoint", &args.model)
        .input("data", &args.data.data)
        .output("figure", &args.out)
        .output("rollouts", &rollouts_path)
        .write(&sidecar(&args.out, ".manifest.json"))?;
    let model = load_model(&args.model)?;
    check_labels(&model, std::slice::from_ref(item))?;

    let absolute = item.absolute();
    let mut rows = Vec::new();
    let mut records = Vec::new();
    for &t in &times {
        let mut row = Vec::new();
        for &dt in &horizons {
            let prefix = item.seq.prefix(t);
            let results = prediction::rollout_batch(&model, &prefix, dt, args.samples, args.seed)?;
            let means = if args.class_means && model.config.kind == ModelKind::Cgp {
                (0..model.config.num_classes)
                    .map(|c| Ok((c, prediction::classwise_mean_rollout(&model, &prefix, dt, c)?.absolute)))
                    .collect::<Result<Vec<_>>>()?
            } else {
                Vec::new()
            };
            row.push(Panel {
                title: format!("{}  t={t}  dt={dt}  n={}", item.id, args.samples),
                observed: absolute[..=t].to_vec(),
                truth: absolute[t + 1..=t + dt].to_vec(),
                rollouts: results.iter().map(|r| (r.first_class(), r.absolute.clone())).collect(),
                means,
            });
            records.extend(results.into_iter().enumerate().map(|(s, result)| RolloutRecord {
                id: format!("{}@t{t}dt{dt}#{s}", item.id),
                label: item.label,
                result,
            }));
        }
        rows.push(row);
    }
    svg::save(&args.out, &plot::render(&rows)).with_context(|| format!("writing {}", args.out.display()))?;
    std::fs::write(&rollouts_path, prediction::format_rollouts(&records))?;
    eprintln!("wrote {} and {}", args.out.display(), rollouts_path.display());
    Ok(())
}
