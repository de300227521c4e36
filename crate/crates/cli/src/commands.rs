use std::fs;
use std::path::{Path, PathBuf};

use dualatt::checkpoint::Checkpoint;
use dualatt::config::{DatasetConfig, ExperimentConfig, Preset};
use dualatt::dataset::{load_dataset, write_dataset};
use dualatt::glimpse_env::TileView;
use dualatt::kv::KvMap;
use dualatt::metrics::PointTable;
use dualatt::scalar::Scalar;
use dualatt::trainer::{
    evaluate_slides, identity, slide_tiles, stratified_folds, train as run_training, EpochHook, EpochLog, EvalOutput, Models,
    PreparedSlide, RunDir, Split,
};
use dualatt::viz::{attention_overlay, contact_sheet, replay_glimpses, save_attention_png16, save_rgb, EpisodeTrace};
use dualatt::{Error, Result};
use serde::Serialize;

use crate::{ConfigArgs, Precision, PresetArg, SplitArg};

fn io(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |source| Error::Io { path: path.to_path_buf(), source }
}

/// `key=value` overrides as a map.
fn parse_sets(sets: &[String]) -> Result<KvMap> {
    let mut kv = KvMap::default();
    for s in sets {
        let (k, v) = s.split_once('=').ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got `{s}`")))?;
        kv.insert(k.trim(), v.trim());
    }
    Ok(kv)
}

/// File, then `--preset`, then each `--set`.
fn read_kv(args: &ConfigArgs, p: Option<PresetArg>) -> Result<KvMap> {
    let mut kv = match &args.config {
        Some(path) => KvMap::parse(&fs::read_to_string(path).map_err(io(path))?)?,
        None => KvMap::default(),
    };
    if let Some(p) = p {
        kv.insert("preset", preset(p));
    }
    kv.merge(parse_sets(&args.sets)?);
    Ok(kv)
}

fn preset(p: PresetArg) -> Preset {
    match p {
        PresetArg::Her2 => Preset::Her2,
        PresetArg::Mmr => Preset::Mmr,
        PresetArg::Reduced => Preset::Reduced,
    }
}

fn experiment_config(p: Option<PresetArg>, args: &ConfigArgs) -> Result<ExperimentConfig> {
    ExperimentConfig::from_kv(read_kv(args, p)?)
}

pub fn print_config(p: Option<PresetArg>, args: &ConfigArgs) -> Result<()> {
    print!("{}", experiment_config(p, args)?.to_kv().to_text());
    Ok(())
}

pub fn synth(out: &Path, args: &ConfigArgs) -> Result<()> {
    let mut kv = read_kv(args, None)?;
    let cfg = DatasetConfig::from_kv(&mut kv)?;
    kv.finish()?;
    write_dataset(&cfg, out)?;
    log::info!("wrote {} slides to {}", cfg.count, out.display());
    Ok(())
}

struct Data {
    slides: Vec<PreparedSlide>,
    folds: Vec<usize>,
    split: Split,
}

fn load(data: &Path, cfg: &ExperimentConfig) -> Result<Data> {
    let slides = PreparedSlide::prepare_all(load_dataset(data)?, cfg)?;
    if slides.is_empty() {
        return Err(Error::Format(format!("{}: dataset has no slides", data.display())));
    }
    let labels: Vec<usize> = slides.iter().map(|s| s.label).collect();
    if let Some(&bad) = labels.iter().find(|&&l| l >= cfg.agent.num_classes) {
        return Err(Error::Format(format!("label {bad} outside the {} configured classes", cfg.agent.num_classes)));
    }
    let folds = stratified_folds(&labels, cfg.train.folds, cfg.train.seed);
    let split = Split::from_folds(&folds, cfg.train.folds, cfg.train.test_fold, cfg.train.validation);
    Ok(Data { slides, folds, split })
}

fn overlay<S: Scalar>(models: &Models<S>, cfg: &ExperimentConfig, slide: &PreparedSlide, dir: &Path) -> Result<()> {
    let st = slide_tiles(models, cfg, slide)?;
    let tile_side = cfg.sampler.tile_size_base / cfg.sampler.scale as usize;
    let img = attention_overlay(&slide.i0, &st.map.probs, cfg.soft.pool_size, &st.cells, tile_side);
    save_rgb(&img, &dir.join(format!("{}.png", slide.id)))
}

/// Writes the loss log, periodic checkpoints and overlays as training runs.
struct RunHook<'a> {
    run: &'a RunDir,
    cfg: &'a ExperimentConfig,
    overlay_slides: Vec<&'a PreparedSlide>,
}

impl<S: Scalar> EpochHook<S> for RunHook<'_> {
    fn on_epoch(&mut self, models: &Models<S>, log: &EpochLog) -> Result<()> {
        self.run.append_line("loss.csv", &log.csv_row())?;
        log::info!(
            "{} epoch {}: l_j {:.4} reward {:.3} tile accuracy {:.3} roi ratio {:.2}",
            log.phase,
            log.epoch,
            log.l_j,
            log.reward,
            log.tile_accuracy,
            log.roi_mass_ratio
        );
        let every = self.cfg.train.checkpoint_every;
        if every > 0 && (log.epoch + 1) % every == 0 {
            let tag = format!("{}_{:03}", log.phase, log.epoch + 1);
            self.checkpoint(models, &tag)?;
        }
        Ok(())
    }

    fn on_non_finite(&mut self, dump: &serde_json::Value) {
        let text = serde_json::to_string_pretty(dump).unwrap_or_default();
        if let Err(e) = self.run.write("nonfinite.json", &text) {
            log::error!("could not write nonfinite.json: {e}");
        }
    }
}

impl RunHook<'_> {
    fn checkpoint<S: Scalar>(&self, models: &Models<S>, tag: &str) -> Result<()> {
        let ckpts = self.run.subdir("checkpoints")?;
        models.to_checkpoint(self.cfg).save(&ckpts.join(format!("{tag}.ckpt")))?;
        let dir = self.run.subdir(&format!("overlays/{tag}"))?;
        for s in &self.overlay_slides {
            overlay(models, self.cfg, s, &dir)?;
        }
        Ok(())
    }
}

fn write_metrics(dir: &Path, ev: &EvalOutput) -> Result<()> {
    fs::create_dir_all(dir).map_err(io(dir))?;
    let p = dir.join("metrics.json");
    fs::write(&p, ev.to_json()?).map_err(io(&p))?;
    let p = dir.join("metrics.csv");
    fs::write(&p, ev.to_csv()).map_err(io(&p))
}

fn train_with<S: Scalar>(cfg: &ExperimentConfig, data: &Data, run: &RunDir) -> Result<()> {
    let overlay_idx = if data.split.val.is_empty() { &data.split.test } else { &data.split.val };
    let mut hook = RunHook { run, cfg, overlay_slides: overlay_idx.iter().map(|&i| &data.slides[i]).collect() };
    let out = run_training::<S>(cfg, &data.slides, &data.split, &mut hook)?;
    hook.checkpoint(&out.models, "final")?;
    if let Some(e) = out.soft_stopped_at {
        log::info!("soft attention stopped after epoch {}", e + 1);
    }
    if data.split.test.is_empty() {
        log::warn!("test fold {} is empty; no metrics written", cfg.train.test_fold);
        return Ok(());
    }
    let ev = evaluate_slides(&out.models, cfg, &data.slides, &data.split.test, &data.folds, &PointTable::default())?;
    write_metrics(run.root(), &ev)?;
    log::info!(
        "test accuracy {:.3}, max processed fraction {:.4}",
        ev.report.accuracy,
        ev.max_processed_fraction()
    );
    Ok(())
}

pub fn train(data: &Path, run: &Path, p: Option<PresetArg>, precision: Precision, args: &ConfigArgs) -> Result<()> {
    let cfg = experiment_config(p, args)?;
    let d = load(data, &cfg)?;
    let run = RunDir::create(run)?;
    run.write("config.txt", &cfg.to_kv().to_text())?;
    run.write("loss.csv", &format!("{}\n", EpochLog::CSV_HEADER))?;
    log::info!(
        "{} slides: {} train, {} validation, {} test",
        d.slides.len(),
        d.split.train.len(),
        d.split.val.len(),
        d.split.test.len()
    );
    match precision {
        Precision::F32 => train_with::<f32>(&cfg, &d, &run),
        Precision::F64 => train_with::<f64>(&cfg, &d, &run),
    }
}

/// Rebuilds config and models from a checkpoint, with optional overrides.
fn restore<S: Scalar>(ck: &Checkpoint, sets: &[String]) -> Result<(ExperimentConfig, Models<S>)> {
    let (base, models) = Models::<S>::from_checkpoint(ck)?;
    if sets.is_empty() {
        return Ok((base, models));
    }
    let mut kv = base.to_kv();
    kv.merge(parse_sets(sets)?);
    let cfg = ExperimentConfig::from_kv(kv)?;
    if cfg.soft != base.soft || cfg.agent != base.agent {
        return Err(Error::Config("overrides may not change the network architecture of a checkpoint".into()));
    }
    Ok((cfg, models))
}

fn eval_with<S: Scalar>(ck: &Checkpoint, data: &Path, split: SplitArg, out: Option<&Path>, sets: &[String]) -> Result<()> {
    let (cfg, models) = restore::<S>(ck, sets)?;
    let d = load(data, &cfg)?;
    let indices: Vec<usize> = match split {
        SplitArg::Train => d.split.train.clone(),
        SplitArg::Val => d.split.val.clone(),
        SplitArg::Test => d.split.test.clone(),
        SplitArg::All => (0..d.slides.len()).collect(),
    };
    if indices.is_empty() {
        return Err(Error::Config(format!("the {split:?} split is empty under this configuration")));
    }
    let ev = evaluate_slides(&models, &cfg, &d.slides, &indices, &d.folds, &PointTable::default())?;
    match out {
        Some(dir) => {
            write_metrics(dir, &ev)?;
            log::info!("accuracy {:.3} over {} slides", ev.report.accuracy, indices.len());
        }
        None => println!("{}", ev.to_json()?),
    }
    Ok(())
}

fn checkpoint_scalar(ck: &Checkpoint) -> Result<Precision> {
    match ck.scalar_bytes {
        4 => Ok(Precision::F32),
        8 => Ok(Precision::F64),
        n => Err(Error::Format(format!("checkpoint stores {n}-byte scalars"))),
    }
}

pub fn eval(data: &Path, checkpoint: &Path, split: SplitArg, out: Option<&Path>, sets: &[String]) -> Result<()> {
    let ck = Checkpoint::load(checkpoint)?;
    match checkpoint_scalar(&ck)? {
        Precision::F32 => eval_with::<f32>(&ck, data, split, out, sets),
        Precision::F64 => eval_with::<f64>(&ck, data, split, out, sets),
    }
}

#[derive(Serialize)]
struct InspectReport {
    slide_id: String,
    checkpoint: String,
    tiles: usize,
    steps: usize,
    pixels_read: u64,
    base_area: u64,
    processed_fraction: f64,
    selected: Vec<(usize, usize)>,
    tile_centres: Vec<(i64, i64)>,
}

fn inspect_with<S: Scalar>(ck: &Checkpoint, name: &str, data: &Path, slide_id: &str, out: &Path, full: bool) -> Result<()> {
    let (cfg, models) = Models::<S>::from_checkpoint(ck)?;
    let slides = PreparedSlide::prepare_all(load_dataset(data)?, &cfg)?;
    let slide = slides
        .iter()
        .find(|s| s.id == slide_id)
        .ok_or_else(|| Error::Format(format!("{}: no slide `{slide_id}`", data.display())))?;
    let st = slide_tiles(&models, &cfg, slide)?;
    let tile_side = cfg.sampler.tile_size_base / cfg.sampler.scale as usize;
    let img = attention_overlay(&slide.i0, &st.map.probs, cfg.soft.pool_size, &st.cells, tile_side);
    save_rgb(&img, &out.join(format!("{name}_overlay.png")))?;
    save_attention_png16(&st.map.probs, &out.join(format!("{name}_attention.png")))?;
    if !full {
        return Ok(());
    }

    let mut traces = Vec::new();
    for (i, ((window, centre), ep)) in st.windows.iter().zip(&st.episodes).enumerate() {
        let view = TileView::new(&slide.pyramid, *window, identity());
        let pairs = replay_glimpses(view, &cfg.agent.glimpse, ep)?;
        save_rgb(&contact_sheet(&pairs), &out.join(format!("tile_{i:02}_glimpses.png")))?;
        traces.push(EpisodeTrace::new(&slide.id, i, *centre, ep));
    }
    let p = out.join("episodes.json");
    fs::write(&p, serde_json::to_string_pretty(&traces)?).map_err(io(&p))?;

    let pixels_read: u64 = st.episodes.iter().map(|e| e.pixels_read).sum();
    let base_area = slide.pyramid.base_area();
    let report = InspectReport {
        slide_id: slide.id.clone(),
        checkpoint: name.to_string(),
        tiles: st.episodes.len(),
        steps: cfg.agent.glimpse.steps,
        pixels_read,
        base_area,
        processed_fraction: pixels_read as f64 / base_area as f64,
        selected: st.cells.clone(),
        tile_centres: st.windows.iter().map(|(_, c)| *c).collect(),
    };
    let p = out.join("inspect.json");
    fs::write(&p, serde_json::to_string_pretty(&report)?).map_err(io(&p))?;
    println!("{}: processed fraction {:.6} ({} of {} base pixels)", slide.id, report.processed_fraction, pixels_read, base_area);
    Ok(())
}

/// Checkpoints of a run in training order, `final` last.
fn run_checkpoints(run: &Path) -> Result<Vec<PathBuf>> {
    let dir = run.join("checkpoints");
    let mut paths: Vec<PathBuf> = fs::read_dir(&dir)
        .map_err(io(&dir))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "ckpt"))
        .collect();
    let order = |p: &PathBuf| {
        let stem = p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        let phase = match stem.split('_').next() {
            Some("soft") => 0,
            Some("agent") => 1,
            Some("joint") => 2,
            _ => 3,
        };
        (phase, stem)
    };
    paths.sort_by_key(order);
    Ok(paths)
}

pub fn inspect(data: &Path, slide: &str, checkpoints: &[PathBuf], run: Option<&Path>, out: &Path) -> Result<()> {
    let paths = match run {
        Some(r) => run_checkpoints(r)?,
        None => checkpoints.to_vec(),
    };
    if paths.is_empty() {
        return Err(Error::Config("inspect needs --checkpoint or a run directory with checkpoints".into()));
    }
    fs::create_dir_all(out).map_err(io(out))?;
    for (i, path) in paths.iter().enumerate() {
        let ck = Checkpoint::load(path)?;
        let name = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| format!("checkpoint{i}"));
        let full = i + 1 == paths.len();
        match checkpoint_scalar(&ck)? {
            Precision::F32 => inspect_with::<f32>(&ck, &name, data, slide, out, full)?,
            Precision::F64 => inspect_with::<f64>(&ck, &name, data, slide, out, full)?,
        }
    }
    Ok(())
}
