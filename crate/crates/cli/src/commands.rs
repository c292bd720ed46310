use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use cobl::compositor::{composite, CompositeImage, LayerStack, DEFAULT_DELTA};
use cobl::diffusion::checkpoint::{self, CheckpointHeader};
use cobl::diffusion::train::{layer_samples, stack_samples, train_adapter, train_base, TrainLog};
use cobl::diffusion::{CoupledDenoiser, NoiseSchedule, ParamGroup};
use cobl::eval::{evaluate, EvalReport};
use cobl::guidance::{sample, SampleTrace};
use cobl::io::{
    read_dataset, read_json, read_rgb_png, read_stack, write_dataset, write_json, write_rgb_png, write_stack,
    COMPOSITE_PNG, DATASET_MANIFEST, STACK_MANIFEST,
};
use cobl::scenegen::{generate_dataset, quantize, Dataset, Split};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::config::RunConfig;
use crate::run::{hash_input, Output, Stamp};
use crate::{Cli, Command, CompositeArgs, EvalArgs, Failure, GenArgs, SampleArgs, TrainFlags};

/// Prefix of the per-seed directories written by `sample`.
pub const SEED_DIR_PREFIX: &str = "seed_";
/// Per-sample trace file.
pub const TRACE_JSON: &str = "trace.json";
/// Index of everything one `sample` run produced.
pub const SAMPLES_JSON: &str = "samples.json";

struct Ctx<'a> {
    cli: &'a Cli,
    args: &'a [String],
    threads: usize,
}

impl Ctx<'_> {
    fn stamp<'a>(&'a self, command: &'a str, config: &'a RunConfig) -> Stamp<'a> {
        Stamp {
            command,
            args: self.args,
            threads: self.threads,
            config,
            inputs: BTreeMap::new(),
            extra: Value::Null,
        }
    }
}

pub(crate) fn run(cli: &Cli, args: &[String], threads: usize) -> Result<(), Failure> {
    let mut config = crate::load_config(cli.config.as_deref())?;
    let ctx = Ctx { cli, args, threads };
    match &cli.command {
        Command::Gen(a) => gen(&ctx, a, &mut config),
        Command::TrainBase(a) => train_base_cmd(&ctx, &a.train, &mut config),
        Command::TrainAdapter(a) => train_adapter_cmd(&ctx, &a.train, &a.base, a.cond_dropout, &mut config),
        Command::Sample(a) => sample_cmd(&ctx, a, &mut config),
        Command::Eval(a) => eval_cmd(&ctx, a, &config),
        Command::Composite(a) => composite_cmd(&ctx, a, &config),
    }
}

fn set<T>(slot: &mut T, flag: Option<T>) {
    if let Some(v) = flag {
        *slot = v;
    }
}

fn gen(ctx: &Ctx, a: &GenArgs, config: &mut RunConfig) -> Result<(), Failure> {
    let g = &mut config.gen;
    set(&mut g.n_scenes, a.n_scenes);
    set(&mut g.min_objects, a.min_objects);
    set(&mut g.max_objects, a.max_objects);
    set(&mut g.size, a.size);
    set(&mut g.n_layers, a.n_layers);
    set(&mut g.texture_variants, a.texture_variants);
    set(&mut g.val_fraction, a.val_fraction);
    set(&mut config.seed, a.seed);
    let out = Output::Dir(a.out.clone());
    out.prepare(ctx.cli.overwrite)?;
    let dataset = generate_dataset(&config.gen.dataset_config(config.seed))?;
    write_dataset(&dataset, &a.out)?;
    let mut stamp = ctx.stamp("gen", config);
    stamp.extra = json!({ "n_entries": dataset.entries.len() });
    stamp.write(&out)
}

fn subset(ds: &Dataset, split: Split) -> Dataset {
    Dataset {
        config: ds.config.clone(),
        entries: ds.split(split).cloned().collect(),
    }
}

fn apply_train_flags(section: &mut crate::config::TrainSection, seed: &mut u64, t: &TrainFlags) {
    set(&mut section.steps, t.steps);
    set(&mut section.lr, t.lr);
    set(&mut section.batch_size, t.batch_size);
    set(seed, t.seed);
}

fn log_summary(log: &TrainLog) -> Value {
    json!({
        "optimizer": log.optimizer,
        "steps": log.losses.len(),
        "final_loss": log.losses.last(),
        "heldout": log.heldout,
        "theta_checksum": log.theta_checksum,
    })
}

fn train_base_cmd(ctx: &Ctx, t: &TrainFlags, config: &mut RunConfig) -> Result<(), Failure> {
    apply_train_flags(&mut config.train_base, &mut config.seed, t);
    let out = Output::File(t.ckpt_out.clone());
    out.prepare(ctx.cli.overwrite)?;
    let ds = read_dataset(&t.data)?;
    let c = &ds.config;
    let arch = config.model.arch(c.n_layers, c.height, c.width);
    let schedule = NoiseSchedule::new(config.model.schedule(config.sample.steps))?;
    let mut model = CoupledDenoiser::new(arch, schedule, config.seed)?;
    let layers = layer_samples(&subset(&ds, Split::Train));
    let heldout = layer_samples(&subset(&ds, Split::Val));
    let tc = config.train_base.train_config(config.seed, vec![ParamGroup::Theta]);
    let log = train_base(&mut model, &layers, &heldout, &tc)?;
    let mut stamp = ctx.stamp("train-base", config);
    hash_input(&mut stamp.inputs, "data_manifest", &t.data.join(DATASET_MANIFEST))?;
    let mut meta = log_summary(&log);
    meta["stage"] = json!("base");
    meta["train"] = serde_json::to_value(&tc).map_err(cobl::Error::from)?;
    meta["data_manifest_sha256"] = json!(stamp.inputs["data_manifest"]);
    checkpoint::save(&model, meta, &t.ckpt_out)?;
    stamp.extra = json!({ "log": log });
    stamp.write(&out)
}

fn train_adapter_cmd(
    ctx: &Ctx,
    t: &TrainFlags,
    base: &Path,
    cond_dropout: Option<f64>,
    config: &mut RunConfig,
) -> Result<(), Failure> {
    apply_train_flags(&mut config.train_adapter, &mut config.seed, t);
    set(&mut config.train_adapter.cond_dropout, cond_dropout);
    let out = Output::File(t.ckpt_out.clone());
    out.prepare(ctx.cli.overwrite)?;
    let (mut model, header) = checkpoint::load(base)?;
    let ds = read_dataset(&t.data)?;
    let c = &ds.config;
    if (c.n_layers, c.height, c.width) != (model.arch.n_layers, model.arch.height, model.arch.width) {
        return Err(cobl::Error::Structural(format!(
            "dataset has {} layers of {}x{}, base model expects {} of {}x{}",
            c.n_layers, c.height, c.width, model.arch.n_layers, model.arch.height, model.arch.width
        ))
        .into());
    }
    let samples = stack_samples(&subset(&ds, Split::Train));
    let heldout = stack_samples(&subset(&ds, Split::Val));
    let tc = config
        .train_adapter
        .train_config(config.seed, vec![ParamGroup::Phi, ParamGroup::Psi]);
    let log = train_adapter(&mut model, &samples, &heldout, &tc)?;
    let mut stamp = ctx.stamp("train-adapter", config);
    hash_input(&mut stamp.inputs, "base_checkpoint", base)?;
    hash_input(&mut stamp.inputs, "data_manifest", &t.data.join(DATASET_MANIFEST))?;
    let mut meta = log_summary(&log);
    meta["stage"] = json!("adapter");
    meta["train"] = serde_json::to_value(&tc).map_err(cobl::Error::from)?;
    meta["base"] = header.metadata;
    meta["base_sha256"] = json!(stamp.inputs["base_checkpoint"]);
    meta["data_manifest_sha256"] = json!(stamp.inputs["data_manifest"]);
    checkpoint::save(&model, meta, &t.ckpt_out)?;
    stamp.extra = json!({ "log": log });
    stamp.write(&out)
}

/// Trace written next to each sampled stack.
#[derive(Debug, Serialize, Deserialize)]
pub struct TraceFile {
    pub scene: String,
    pub seed: u64,
    #[serde(flatten)]
    pub trace: SampleTrace,
}

/// One entry of `samples.json`.
#[derive(Debug, Serialize, Deserialize)]
pub struct SampleEntry {
    pub scene: String,
    pub seed: u64,
    pub dir: String,
    pub final_composite_mse: f64,
}

pub fn seed_dir_name(seed: u64) -> String {
    format!("{SEED_DIR_PREFIX}{seed:04}")
}

fn sample_cmd(ctx: &Ctx, a: &SampleArgs, config: &mut RunConfig) -> Result<(), Failure> {
    let s = &mut config.sample;
    set(&mut s.steps, a.steps);
    set(&mut s.w, a.w);
    set(&mut s.lambda, a.lambda);
    set(&mut s.cfg, a.cfg);
    set(&mut s.period, a.period);
    set(&mut s.n_seeds, a.n_seeds);
    set(&mut config.seed, a.seed);
    if a.exact_grad {
        s.exact_grad = Some(true);
    }
    if a.no_guidance {
        s.w = 0.0;
        s.lambda = 0.0;
    }
    if a.unconditioned {
        s.conditioning = false;
        s.w = 0.0;
        s.lambda = 0.0;
        s.cfg = 1.0;
        s.period = 0;
    }
    if s.n_seeds == 0 {
        return Err(Failure::Usage("--n-seeds must be at least 1".into()));
    }
    let guidance = config.sample.guidance();
    guidance.validate()?;
    let (model, _) = checkpoint::load(&a.ckpt)?;
    let scenes: Vec<(String, CompositeImage)> = match (&a.image, &a.data) {
        (Some(img), _) => {
            let name = img
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_else(|| "image".into());
            vec![(name, read_rgb_png(img)?)]
        }
        (None, Some(dir)) => {
            let ds = read_dataset(dir)?;
            let keep = |sp: Split| match a.split.as_str() {
                "all" => Ok(true),
                "train" => Ok(sp == Split::Train),
                "val" => Ok(sp == Split::Val),
                other => Err(Failure::Usage(format!("unknown split {other:?}; use train, val or all"))),
            };
            let mut v = Vec::new();
            for e in ds.entries {
                if keep(e.split)? {
                    v.push((e.id, e.scene.composite));
                }
            }
            v.truncate(a.limit.unwrap_or(usize::MAX));
            v
        }
        (None, None) => return Err(Failure::Usage("sample needs --image or --data".into())),
    };
    if scenes.is_empty() {
        return Err(Failure::Usage("no scenes to sample".into()));
    }
    let out = Output::Dir(a.out.clone());
    out.prepare(ctx.cli.overwrite)?;
    let single = a.image.is_some();
    let seeds: Vec<u64> = (0..config.sample.n_seeds as u64).map(|k| config.seed + k).collect();
    let jobs: Vec<(u64, usize)> = seeds
        .iter()
        .flat_map(|&sd| (0..scenes.len()).map(move |i| (sd, i)))
        .collect();
    let n_layers = model.arch.n_layers;
    let results: Vec<(LayerStack, SampleTrace)> = jobs
        .par_iter()
        .map(|&(seed, i)| {
            log::info!("sampling {} with seed {seed}", scenes[i].0);
            sample(&model, &scenes[i].1, n_layers, &guidance, seed)
        })
        .collect::<Result<_, _>>()?;
    let mut index = Vec::with_capacity(jobs.len());
    for (&(seed, i), (stack, trace)) in jobs.iter().zip(results) {
        let seed_dir = seed_dir_name(seed);
        let rel = if single {
            seed_dir
        } else {
            format!("{seed_dir}/{}", scenes[i].0)
        };
        let dir = a.out.join(&rel);
        write_stack(&stack, &dir)?;
        write_rgb_png(&composite(&stack, DEFAULT_DELTA)?, &dir.join(COMPOSITE_PNG))?;
        index.push(SampleEntry {
            scene: scenes[i].0.clone(),
            seed,
            dir: rel,
            final_composite_mse: trace.final_composite_mse,
        });
        write_json(
            &dir.join(TRACE_JSON),
            &TraceFile {
                scene: scenes[i].0.clone(),
                seed,
                trace,
            },
        )?;
    }
    write_json(&a.out.join(SAMPLES_JSON), &index)?;
    let mut stamp = ctx.stamp("sample", config);
    hash_input(&mut stamp.inputs, "checkpoint", &a.ckpt)?;
    if let Some(img) = &a.image {
        hash_input(&mut stamp.inputs, "image", img)?;
    }
    if let Some(d) = &a.data {
        hash_input(&mut stamp.inputs, "data_manifest", &d.join(DATASET_MANIFEST))?;
    }
    stamp.extra = json!({ "n_samples": index.len() });
    stamp.write(&out)
}

/// A run directory to score, with the label used in the report.
struct PredRun {
    label: String,
    dir: PathBuf,
}

fn expand_runs(dirs: &[PathBuf]) -> Result<Vec<PredRun>, Failure> {
    let mut runs = Vec::new();
    for d in dirs {
        let mut seeds: Vec<PathBuf> = fs::read_dir(d)
            .map_err(|e| Failure::io(d, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| {
                p.is_dir()
                    && p.file_name()
                        .is_some_and(|n| n.to_string_lossy().starts_with(SEED_DIR_PREFIX))
            })
            .collect();
        seeds.sort();
        let label_of = |p: &Path| {
            p.file_name()
                .map(|n| n.to_string_lossy().into_owned())
                .unwrap_or_else(|| p.display().to_string())
        };
        if seeds.is_empty() {
            runs.push(PredRun {
                label: label_of(d),
                dir: d.clone(),
            });
        } else {
            runs.extend(seeds.into_iter().map(|p| PredRun {
                label: label_of(&p),
                dir: p,
            }));
        }
    }
    Ok(runs)
}

/// Per-scene part of the evaluation report.
#[derive(Debug, Serialize, Deserialize)]
pub struct SceneReport {
    pub id: String,
    pub run_labels: Vec<String>,
    #[serde(flatten)]
    pub report: EvalReport,
}

#[derive(Debug, Serialize, Deserialize, PartialEq)]
pub struct Aggregate {
    pub n_scenes: usize,
    pub n_runs: usize,
    pub distance_best: f64,
    pub distance_mean: f64,
    pub ari_best: f64,
    pub ari_mean: f64,
    pub composite_mse_best: f64,
    pub composite_mse_mean: f64,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct Report {
    pub scenes: Vec<SceneReport>,
    pub aggregate: Aggregate,
}

struct TruthScene {
    id: String,
    stack: LayerStack,
    image: CompositeImage,
    /// Directory of this scene inside each run, relative to the run.
    rel: Option<String>,
}

fn truth_scenes(truth: &Path, first_run: &Path) -> Result<Vec<TruthScene>, Failure> {
    if truth.join(DATASET_MANIFEST).exists() {
        let ds = read_dataset(truth)?;
        let scenes: Vec<TruthScene> = ds
            .entries
            .into_iter()
            .filter(|e| first_run.join(&e.id).join(STACK_MANIFEST).exists())
            .map(|e| TruthScene {
                rel: Some(e.id.clone()),
                id: e.id,
                stack: e.scene.stack,
                image: e.scene.composite,
            })
            .collect();
        if scenes.is_empty() {
            return Err(Failure::Usage(format!(
                "{} holds no scenes of the dataset in {}",
                first_run.display(),
                truth.display()
            )));
        }
        Ok(scenes)
    } else {
        let stack = read_stack(truth)?;
        let png = truth.join(COMPOSITE_PNG);
        let image = if png.exists() {
            read_rgb_png(&png)?
        } else {
            composite(&stack, DEFAULT_DELTA)?
        };
        let id = truth
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_else(|| "scene".into());
        Ok(vec![TruthScene {
            id,
            stack,
            image,
            rel: None,
        }])
    }
}

fn mean(v: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    s / n.max(1) as f64
}

/// Scores prediction runs against ground truth.
pub fn build_report(pred: &[PathBuf], truth: &Path) -> Result<Report, Failure> {
    let runs = expand_runs(pred)?;
    if runs.is_empty() {
        return Err(Failure::Usage("no prediction runs given".into()));
    }
    let scenes = truth_scenes(truth, &runs[0].dir)?;
    let labels: Vec<String> = runs.iter().map(|r| r.label.clone()).collect();
    let reports: Vec<SceneReport> = scenes
        .par_iter()
        .map(|s| {
            let preds = runs
                .iter()
                .map(|r| {
                    let dir = match &s.rel {
                        Some(rel) => r.dir.join(rel),
                        None => r.dir.clone(),
                    };
                    read_stack(&dir)
                })
                .collect::<Result<Vec<_>, _>>()?;
            Ok(SceneReport {
                id: s.id.clone(),
                run_labels: labels.clone(),
                report: evaluate(&preds, &s.stack, &s.image)?,
            })
        })
        .collect::<Result<_, cobl::Error>>()?;
    let aggregate = Aggregate {
        n_scenes: reports.len(),
        n_runs: runs.len(),
        distance_best: mean(reports.iter().map(|r| r.report.distance_best)),
        distance_mean: mean(reports.iter().map(|r| r.report.distance_mean)),
        ari_best: mean(reports.iter().map(|r| r.report.ari_best)),
        ari_mean: mean(reports.iter().map(|r| r.report.ari_mean)),
        composite_mse_best: mean(reports.iter().map(|r| r.report.composite_mse_best)),
        composite_mse_mean: mean(reports.iter().map(|r| r.report.composite_mse_mean)),
    };
    Ok(Report {
        scenes: reports,
        aggregate,
    })
}

fn eval_cmd(ctx: &Ctx, a: &EvalArgs, config: &RunConfig) -> Result<(), Failure> {
    let out = Output::File(a.out.clone());
    out.prepare(ctx.cli.overwrite)?;
    let report = build_report(&a.pred, &a.truth)?;
    write_json(&a.out, &report)?;
    let mut stamp = ctx.stamp("eval", config);
    stamp.extra = serde_json::to_value(&report.aggregate).map_err(cobl::Error::from)?;
    stamp.write(&out)
}

/// Difference between a composite and its target image.
#[derive(Debug, Serialize, Deserialize, PartialEq)]
pub struct CompositeDiff {
    pub mse: f64,
    pub max_abs_diff: f64,
    pub within_one_level: bool,
}

fn composite_cmd(ctx: &Ctx, a: &CompositeArgs, config: &RunConfig) -> Result<(), Failure> {
    let out = Output::File(a.out.clone());
    out.prepare(ctx.cli.overwrite)?;
    let stack = read_stack(&a.stack)?;
    let image = composite(&stack, DEFAULT_DELTA)?;
    write_rgb_png(&image, &a.out)?;
    let target = a
        .target
        .clone()
        .or_else(|| Some(a.stack.join(COMPOSITE_PNG)).filter(|p| p.exists()));
    let mut stamp = ctx.stamp("composite", config);
    hash_input(&mut stamp.inputs, "stack_manifest", &a.stack.join(STACK_MANIFEST))?;
    if let Some(t) = target {
        let target_img = read_rgb_png(&t)?;
        let stored = image.pixels.mapv(quantize);
        if stored.dim() != target_img.pixels.dim() {
            return Err(cobl::Error::Structural(format!(
                "target {} is {:?}, composite is {:?}",
                t.display(),
                target_img.dims(),
                image.dims()
            ))
            .into());
        }
        let max_abs_diff = stored
            .iter()
            .zip(&target_img.pixels)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        let diff = CompositeDiff {
            mse: image.mse(&target_img)?,
            max_abs_diff,
            within_one_level: max_abs_diff <= 1.0 / 255.0 + 1e-12,
        };
        println!("{}", serde_json::to_string(&diff).map_err(cobl::Error::from)?);
        hash_input(&mut stamp.inputs, "target", &t)?;
        stamp.extra = serde_json::to_value(&diff).map_err(cobl::Error::from)?;
    }
    stamp.write(&out)
}

/// Reads a checkpoint header without building the model.
pub fn checkpoint_header(path: &Path) -> Result<CheckpointHeader, Failure> {
    Ok(checkpoint::load(path)?.1)
}

/// Reads the trace of one sampled stack.
pub fn read_trace(dir: &Path) -> Result<TraceFile, Failure> {
    Ok(read_json(&dir.join(TRACE_JSON))?)
}
