use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::error::ErrorKind;
use clap::CommandFactory;
use clicktrack_core::evaluation::experiments::{
    draw_seeds, run_attempts_experiment, run_click_robustness, run_deviation_experiment, run_heldout_evaluation,
    run_refiner_comparison, AttemptPolicy, InitMethod, ModelSet, SequenceSet,
};
use clicktrack_core::evaluation::{emit_report, Experiment, Report};
use clicktrack_core::refiners::{Model, RefinerKind};
use clicktrack_core::tracker::{track_sequence, TrackRecord};
use clicktrack_core::training::checkpoint::{load_checkpoint, save_checkpoint, MANIFEST};
use clicktrack_core::training::corpus::{stored_split, write_corpus, Split};
use clicktrack_core::training;
use clicktrack_core::{BBox, Image, Point};
use clicktrack_service::ServiceConfig;
use serde::Serialize;
use serde_json::{json, Value};

use crate::settings::{
    at, flags, read_config, resolve, EvalSettings, ExperimentName, GenDataSettings, RefineSettings, TrackSettings,
    TrainSettings,
};
use crate::{Cli, Command, BUILD};

/// Settings go to stderr as one JSON line so that stdout stays the payload.
fn echo<S: Serialize>(command: &str, settings: &S) -> Result<()> {
    let v = serde_json::to_value(settings)?;
    eprintln!("{}", json!({ "command": command, "build": BUILD, "settings": v }));
    Ok(())
}

fn emit<S: Serialize>(out: &mut impl Write, v: &S) -> Result<()> {
    serde_json::to_writer(&mut *out, v)?;
    writeln!(out)?;
    out.flush()?;
    Ok(())
}

pub fn dispatch(cli: Cli) -> Result<()> {
    let file = read_config(cli.config.as_deref())?;
    let seed = cli.seed;
    match cli.command {
        Command::GenData(a) => {
            let f = flags(vec![
                at(&["out"], a.out),
                at(&["corpus", "seed"], seed),
                at(&["corpus", "train_scenes"], a.scenes),
                at(&["corpus", "heldout_scenes"], a.heldout),
                at(&["corpus", "sequences"], a.sequences),
                at(&["corpus", "frames"], a.frames),
            ])?;
            gen_data(resolve(&GenDataSettings::default(), &file, f)?)
        }
        Command::Train(a) => {
            let refiner = match a.refiner {
                Some(r) => r,
                None => match file.get("refiner") {
                    Some(v) => serde_json::from_value(v.clone()).context("invalid refiner in config")?,
                    None => RefinerKind::Gcr,
                },
            };
            let f = flags(vec![
                at(&["refiner"], Some(refiner)),
                at(&["out"], a.out),
                at(&["data"], a.data),
                at(&["train", "steps"], a.steps),
                at(&["train", "seed"], seed),
                at(&["train", "model", "init_seed"], seed),
                at(&["train", "schedule", "initial"], a.lr),
            ])?;
            train(resolve(&TrainSettings::new(refiner), &file, f)?)
        }
        Command::Eval(a) => {
            let f = flags(vec![
                at(&["experiment"], a.experiment),
                at(&["models"], a.models),
                at(&["out"], a.out),
                at(&["data"], a.data),
                at(&["sequences"], a.sequences),
                at(&["heldout_scenes"], a.heldout_scenes),
                at(&["guided"], a.guided.then_some(true)),
                at(&["eval", "seed"], seed),
                at(&["eval", "deviation_rates"], a.rates),
                at(&["eval", "draws"], a.draws),
                at(&["eval", "stages"], a.stages),
            ])?;
            eval(resolve(&EvalSettings::default(), &file, f)?)
        }
        Command::Refine(a) => {
            let f = flags(vec![
                at(&["image"], a.image),
                at(&["point"], a.point),
                at(&["category"], a.category),
                at(&["model"], a.model),
                at(&["refiner"], a.refiner),
                at(&["stages"], a.stages),
            ])?;
            require(&file, &f, &["image", "point", "model"], "refine")?;
            refine(resolve(&RefineSettings::default(), &file, f)?)
        }
        Command::Track(a) => {
            let f = flags(vec![at(&["frames"], a.frames), at(&["box"], a.bbox)])?;
            require(&file, &f, &["frames", "box"], "track")?;
            track(resolve(&TrackSettings::default(), &file, f)?)
        }
        Command::Serve(a) => {
            let f = flags(vec![
                at(&["model"], a.model),
                at(&["refiner"], a.refiner),
                at(&["host"], a.host),
                at(&["port"], a.port),
                at(&["scenes"], a.scenes),
                at(&["corpus", "seed"], seed),
            ])?;
            serve(resolve(&ServiceConfig::default(), &file, f)?)
        }
    }
}

/// Settings without a meaningful default must come from a flag or the
/// file; a missing one is a usage error.
fn require(file: &Value, flags: &Value, keys: &[&str], command: &str) -> Result<()> {
    for k in keys {
        if file.get(k).is_none() && flags.get(k).is_none() {
            let mut cmd = Cli::command();
            let sub = cmd.find_subcommand_mut(command).map(|c| c.clone()).unwrap_or(cmd);
            sub.bin_name(format!("clicktrack {command}"))
                .error(ErrorKind::MissingRequiredArgument, format!("--{k} is required (flag or config file)"))
                .exit();
        }
    }
    Ok(())
}

fn gen_data(s: GenDataSettings) -> Result<()> {
    echo("gen-data", &s)?;
    s.corpus.scene.validate()?;
    let index = write_corpus(&s.out, &s.corpus)?;
    emit(
        &mut std::io::stdout(),
        &json!({
            "out": s.out,
            "train": index.train.len(),
            "heldout": index.heldout.len(),
            "sequences": index.sequences.len(),
        }),
    )
}

fn train(s: TrainSettings) -> Result<()> {
    echo("train", &s)?;
    if s.train.model.kind != s.refiner {
        bail!("train.model.kind is {} but the refiner is {}", s.train.model.kind, s.refiner);
    }
    let source = match &s.data {
        Some(dir) => stored_split(dir, Split::Train)?.0,
        None => s.corpus.source(Split::Train),
    };
    fs::create_dir_all(&s.out).with_context(|| format!("creating {}", s.out.display()))?;
    let log_path = s.out.join("train_log.jsonl");
    let mut log = BufWriter::new(File::create(&log_path).with_context(|| format!("creating {}", log_path.display()))?);
    let mut stdout = std::io::stdout();
    let mut io_error = None;
    let outcome = training::train(&s.train, &source, |e| {
        let r = emit(&mut log, e).and_then(|_| emit(&mut stdout, e));
        if let Err(err) = r {
            io_error.get_or_insert(err);
        }
    })?;
    if let Some(e) = io_error {
        return Err(e);
    }
    let settings = serde_json::to_value(&s)?;
    save_checkpoint(&outcome.model, outcome.steps_completed as u64, settings, &s.out)?;
    emit(
        &mut stdout,
        &json!({
            "checkpoint": s.out,
            "steps": outcome.steps_completed,
            "final_loss": outcome.losses.last(),
            "aborted": outcome.aborted,
            "skipped_targets": outcome.skipped_targets,
        }),
    )?;
    if let Some(reason) = outcome.aborted {
        bail!("training stopped early at {reason}; the last good state was saved");
    }
    Ok(())
}

fn load_models(root: &Path, kinds: &[RefinerKind]) -> Result<(ModelSet, Value)> {
    let mut set = ModelSet::default();
    let mut provenance = serde_json::Map::new();
    for &k in kinds {
        let dir = root.join(k.name());
        let (model, manifest) =
            load_checkpoint(&dir).with_context(|| format!("loading the {k} checkpoint from {}", dir.display()))?;
        if model.kind() != k {
            bail!("{} holds a {} model", dir.display(), model.kind());
        }
        provenance.insert(k.name().into(), json!({ "path": dir, "step": manifest.step }));
        set.insert(model);
    }
    Ok((set, Value::Object(provenance)))
}

fn eval(s: EvalSettings) -> Result<()> {
    echo("eval", &s)?;
    let started = Instant::now();
    let kinds: &[RefinerKind] = match s.experiment {
        ExperimentName::Compare | ExperimentName::Heldout => &[RefinerKind::Gcr, RefinerKind::Pfr, RefinerKind::Bfr],
        ExperimentName::Robustness | ExperimentName::Attempts => &[RefinerKind::Gcr],
        ExperimentName::Deviation => &[],
    };
    let (models, provenance) = load_models(&s.models, kinds)?;
    let sequences = || -> Result<SequenceSet> {
        let set = match &s.data {
            Some(dir) => SequenceSet::stored(dir, s.sequences)?,
            None => SequenceSet::generated(&s.corpus, s.sequences),
        };
        if set.is_empty() {
            bail!("no evaluation sequences");
        }
        Ok(set)
    };
    let gcr = || models.gcr.as_ref().context("no gcr model loaded");
    let cfg = &s.eval;
    let (experiment, n) = match s.experiment {
        ExperimentName::Compare => {
            let seqs = sequences()?;
            let c = run_refiner_comparison(&models, &seqs, cfg, &InitMethod::ALL)?;
            (Experiment::Compare(c), seqs.len())
        }
        ExperimentName::Deviation => {
            let seqs = sequences()?;
            let d = run_deviation_experiment(&seqs, cfg, &cfg.deviation_rates)?;
            (Experiment::Deviation(d), seqs.len())
        }
        ExperimentName::Robustness => {
            let seqs = sequences()?;
            let r = run_click_robustness(gcr()?, &seqs, cfg, &draw_seeds(cfg.seed, cfg.draws), s.guided)?;
            (Experiment::Robustness(r), seqs.len())
        }
        ExperimentName::Attempts => {
            let seqs = sequences()?;
            let policies = [
                AttemptPolicy::Once,
                AttemptPolicy::Multiple {
                    max_attempts: cfg.attempts.max_attempts,
                    accept_iou: cfg.attempts.accept_iou,
                },
            ];
            let a = run_attempts_experiment(gcr()?, &seqs, cfg, &policies)?;
            (Experiment::Attempts(a), seqs.len())
        }
        ExperimentName::Heldout => {
            let source = match &s.data {
                Some(dir) => stored_split(dir, Split::Heldout)?.0,
                None => s.corpus.source(Split::Heldout),
            };
            let source = source.take(s.heldout_scenes);
            let n = source.len();
            (Experiment::Heldout(run_heldout_evaluation(&models, &source, cfg)?), n)
        }
    };
    let inputs = json!({
        "models": provenance,
        "data": s.data,
        "corpus": if s.data.is_none() { serde_json::to_value(&s.corpus)? } else { Value::Null },
        "items": n,
    });
    let mut report = Report::new(BUILD, cfg.clone(), inputs);
    report.experiments.push(experiment);
    report.elapsed_s = started.elapsed().as_secs_f64();
    let files = emit_report(&report, &s.out)?;
    emit(
        &mut std::io::stdout(),
        &json!({ "experiment": s.experiment, "elapsed_s": report.elapsed_s, "files": files }),
    )
}

/// A checkpoint directory, or one per refiner below `dir`.
fn load_refiner(dir: &Path, refiner: Option<RefinerKind>) -> Result<Model<f32>> {
    let path: PathBuf = if dir.join(MANIFEST).is_file() {
        dir.to_path_buf()
    } else {
        dir.join(refiner.unwrap_or(RefinerKind::Gcr).name())
    };
    let (model, _) = load_checkpoint(&path).with_context(|| format!("loading {}", path.display()))?;
    if let Some(r) = refiner {
        if model.kind() != r {
            bail!("{} holds a {} model, expected {r}", path.display(), model.kind());
        }
    }
    Ok(model)
}

fn refine(s: RefineSettings) -> Result<()> {
    echo("refine", &s)?;
    let model = load_refiner(&s.model, s.refiner)?;
    let img = Image::load_png(&s.image)?;
    let stages = s.stages.unwrap_or(model.config.inference_stages);
    let p = Point::new(s.point[0], s.point[1]);
    let started = Instant::now();
    let out = model.refine_with(&img, p, s.category.as_deref(), stages)?;
    let latency_ms = started.elapsed().as_secs_f64() * 1e3;
    emit(
        &mut std::io::stdout(),
        &json!({
            "refiner": out.refiner,
            "box": out.final_box,
            "stage_boxes": out.stage_boxes,
            "scores": out.iou_scores,
            "selected_index": out.selected_index,
            "guidance": out.guidance_kind,
            "latency_ms": latency_ms,
        }),
    )
}

fn frame_files(inputs: &[PathBuf]) -> Result<Vec<PathBuf>> {
    let mut files = Vec::new();
    for p in inputs {
        if p.is_dir() {
            let mut v: Vec<PathBuf> = fs::read_dir(p)
                .with_context(|| format!("listing {}", p.display()))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|f| f.extension().is_some_and(|x| x.eq_ignore_ascii_case("png")))
                .collect();
            v.sort();
            files.extend(v);
        } else {
            files.push(p.clone());
        }
    }
    if files.is_empty() {
        bail!("no frames given");
    }
    Ok(files)
}

fn track(s: TrackSettings) -> Result<()> {
    echo("track", &s)?;
    let frames = frame_files(&s.frames)?
        .iter()
        .map(|f| Image::load_png(f).with_context(|| format!("loading {}", f.display())))
        .collect::<Result<Vec<_>>>()?;
    let [x0, y0, x1, y1] = s.bbox;
    let b0 = BBox::new(x0, y0, x1, y1)?;
    let records = track_sequence(&frames, &b0, &s.tracker)?;
    let first = TrackRecord {
        frame: 0,
        bbox: b0.clip(frames[0].size())?,
        score: 1.0,
    };
    let mut out = std::io::stdout().lock();
    for r in std::iter::once(&first).chain(&records) {
        emit(&mut out, r)?;
    }
    Ok(())
}

fn serve(s: ServiceConfig) -> Result<()> {
    echo("serve", &s)?;
    let rt = tokio::runtime::Builder::new_multi_thread().enable_all().build()?;
    rt.block_on(clicktrack_service::serve(s))?;
    Ok(())
}

