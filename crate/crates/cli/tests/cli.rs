use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

use cobl_cli::commands::{Report, SampleEntry, SAMPLES_JSON};
use cobl_cli::{parse_config, RunConfig, EXIT_RUNTIME, EXIT_USAGE, JOBS_ENV};
use serde_json::Value;
use tempfile::TempDir;

fn cobl(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cobl"))
        .args(args)
        .env_remove(JOBS_ENV)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = cobl(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// A tiny dataset and trained checkpoint shared by the tests.
struct Fixture {
    _dir: TempDir,
    root: PathBuf,
    data: PathBuf,
    ckpt: PathBuf,
    config: PathBuf,
}

fn fixture() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| {
        let dir = TempDir::new().unwrap();
        let root = dir.path().to_path_buf();
        let config = root.join("small.toml");
        fs::write(
            &config,
            "seed = 3\n[model]\nchannels = [4, 8, 8]\nadapter_channels = [4, 4, 8]\ntime_dim = 8\n\
             [train_base]\nsteps = 3\nbatch_size = 4\n[train_adapter]\nsteps = 2\nbatch_size = 2\n\
             [sample]\nsteps = 4\nw = 10.0\nperiod = 2\n",
        )
        .unwrap();
        let data = root.join("data");
        let base = root.join("base.ckpt");
        let ckpt = root.join("adapter.ckpt");
        let c = s(&config);
        ok(&["gen", "--config", c, "--out", s(&data), "--n-scenes", "6", "--size", "16", "--n-layers", "4",
            "--max-objects", "3", "--val-fraction", "0.5"]);
        ok(&["train-base", "--config", c, "--data", s(&data), "--ckpt-out", s(&base)]);
        ok(&["train-adapter", "--config", c, "--data", s(&data), "--base", s(&base), "--ckpt-out", s(&ckpt)]);
        Fixture {
            _dir: dir,
            root,
            data,
            ckpt,
            config,
        }
    })
}

fn read_json(p: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(p).unwrap()).unwrap()
}

fn tree(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else if p.file_name().unwrap() != "run.json" {
                out.push((p.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn no_arguments_prints_usage() {
    let out = cobl(&[]);
    assert_eq!(out.status.code(), Some(EXIT_USAGE));
    assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"));
}

#[test]
fn unknown_subcommand_is_a_usage_error() {
    assert_eq!(cobl(&["frobnicate"]).status.code(), Some(EXIT_USAGE));
}

#[test]
fn empty_config_gives_defaults() {
    let c = parse_config("").unwrap();
    assert_eq!(c, RunConfig::default());
    assert_eq!(c.sample.w, 1e4);
    assert_eq!(c.sample.lambda, 1e-7);
    assert_eq!(c.sample.steps, 30);
    assert_eq!(c.sample.period, 5);
    assert_eq!(c.sample.cfg, 3.0);
}

#[test]
fn misspelled_key_is_named_with_its_line() {
    let msg = match parse_config("[sample]\nw = 1.0\nlamda = 0.1\n") {
        Err(cobl_cli::Failure::Usage(m)) => m,
        other => panic!("expected usage error, got {other:?}"),
    };
    assert!(msg.contains("lamda"), "{msg}");
    assert!(msg.contains("line 3"), "{msg}");

    let dir = TempDir::new().unwrap();
    let cfg = dir.path().join("bad.toml");
    fs::write(&cfg, "[sample]\nlamda = 0.1\n").unwrap();
    let out = cobl(&["gen", "--config", s(&cfg), "--out", s(&dir.path().join("d"))]);
    assert_eq!(out.status.code(), Some(EXIT_USAGE));
    assert!(String::from_utf8_lossy(&out.stderr).contains("lamda"));
    assert!(!dir.path().join("d").exists());
}

#[test]
fn flags_override_the_config_file() {
    let f = fixture();
    let out = f.root.join("override");
    ok(&["sample", "--config", s(&f.config), "--ckpt", s(&f.ckpt), "--data", s(&f.data), "--limit", "1",
        "--w", "0", "--out", s(&out)]);
    let run = read_json(&out.join("run.json"));
    assert_eq!(run["config"]["sample"]["w"], 0.0);
    assert_eq!(run["config"]["sample"]["steps"], 4);
    let saved: RunConfig = toml::from_str(&fs::read_to_string(out.join("config.toml")).unwrap()).unwrap();
    assert_eq!(saved.sample.w, 0.0);
    assert_eq!(saved.seed, 3);
}

#[test]
fn outputs_are_not_overwritten_without_permission() {
    let dir = TempDir::new().unwrap();
    let d = dir.path().join("data");
    let args = ["gen", "--out", s(&d), "--n-scenes", "2", "--size", "16"];
    ok(&args);
    let again = cobl(&args);
    assert_eq!(again.status.code(), Some(EXIT_USAGE));
    assert!(String::from_utf8_lossy(&again.stderr).contains("--overwrite"));
    let mut forced = args.to_vec();
    forced.push("--overwrite");
    ok(&forced);
}

#[test]
fn runtime_failures_are_reported_as_json() {
    let dir = TempDir::new().unwrap();
    let out = cobl(&["composite", "--stack", s(&dir.path().join("missing")), "--out", s(&dir.path().join("c.png"))]);
    assert_eq!(out.status.code(), Some(EXIT_RUNTIME));
    let line: Value = serde_json::from_slice(&out.stderr).unwrap();
    assert_eq!(line["error"]["category"], "io");
}

#[test]
fn dataset_scenes_composite_back_to_their_images() {
    let f = fixture();
    let ds = read_json(&f.data.join("manifest.json"));
    let scenes = ds["scenes"].as_array().unwrap();
    assert_eq!(scenes.len(), 6);
    for (k, scene) in scenes.iter().enumerate() {
        let id = scene["dir"].as_str().unwrap();
        let png = f.root.join(format!("composite_{k}.png"));
        let out = ok(&["composite", "--stack", s(&f.data.join(id)), "--out", s(&png)]);
        let diff: Value = serde_json::from_slice(&out.stdout).unwrap();
        assert_eq!(diff["within_one_level"], true, "{id}: {diff}");
        assert!(png.exists());
        assert!(f.root.join(format!("composite_{k}.png.run.json")).exists());
    }
}

#[test]
fn sample_then_eval_covers_every_scene_and_seed() {
    let f = fixture();
    let out = f.root.join("samples");
    ok(&["sample", "--config", s(&f.config), "--ckpt", s(&f.ckpt), "--data", s(&f.data), "--n-seeds", "2",
        "--out", s(&out)]);
    let index: Vec<SampleEntry> = serde_json::from_value(read_json(&out.join(SAMPLES_JSON))).unwrap();
    assert_eq!(index.len(), 6);
    for e in &index {
        assert!(out.join(&e.dir).join("stack.json").exists());
        assert!(out.join(&e.dir).join("trace.json").exists());
        let trace = read_json(&out.join(&e.dir).join("trace.json"));
        assert_eq!(trace["steps"].as_array().unwrap().len(), 4);
    }
    let report_path = f.root.join("report.json");
    ok(&["eval", "--pred", s(&out), "--truth", s(&f.data), "--out", s(&report_path)]);
    let report: Report = serde_json::from_value(read_json(&report_path)).unwrap();
    let mut sampled: Vec<&str> = index.iter().filter(|e| e.seed == 3).map(|e| e.scene.as_str()).collect();
    sampled.sort();
    let mut scored: Vec<&str> = report.scenes.iter().map(|r| r.id.as_str()).collect();
    scored.sort();
    assert_eq!(sampled, scored);
    assert_eq!(report.aggregate.n_runs, 2);
    for r in &report.scenes {
        assert_eq!(r.run_labels, ["seed_0003", "seed_0004"]);
        assert!(r.report.distance_best <= r.report.distance_mean + 1e-12);
        assert!(r.report.ari_best >= r.report.ari_mean - 1e-12);
    }
}

#[test]
fn single_image_sampling_and_eval() {
    let f = fixture();
    let ds = read_json(&f.data.join("manifest.json"));
    let id = ds["scenes"][0]["dir"].as_str().unwrap();
    let scene = f.data.join(id);
    let out = f.root.join("single");
    ok(&["sample", "--config", s(&f.config), "--ckpt", s(&f.ckpt), "--image", s(&scene.join("composite.png")),
        "--no-guidance", "--out", s(&out)]);
    assert!(out.join("seed_0003/stack.json").exists());
    let report_path = f.root.join("single.json");
    ok(&["eval", "--pred", s(&out), "--truth", s(&scene), "--out", s(&report_path)]);
    let report: Report = serde_json::from_value(read_json(&report_path)).unwrap();
    assert_eq!(report.aggregate.n_scenes, 1);
    let run = read_json(&out.join("run.json"));
    assert_eq!(run["config"]["sample"]["w"], 0.0);
    assert_eq!(run["config"]["sample"]["cfg"], 3.0);
}

#[test]
fn unconditioned_sampling_drops_the_image() {
    let f = fixture();
    let out = f.root.join("uncond");
    ok(&["sample", "--config", s(&f.config), "--ckpt", s(&f.ckpt), "--data", s(&f.data), "--limit", "1",
        "--unconditioned", "--out", s(&out)]);
    let cfg = &read_json(&out.join("run.json"))["config"]["sample"];
    assert_eq!(cfg["conditioning"], false);
    assert_eq!(cfg["period"], 0);
    assert_eq!(cfg["w"], 0.0);
    assert_eq!(cfg["lambda"], 0.0);
}

#[test]
fn results_do_not_depend_on_worker_count() {
    let f = fixture();
    let a = f.root.join("jobs1");
    let b = f.root.join("jobs3");
    let base = ["sample", "--config", s(&f.config), "--ckpt", s(&f.ckpt), "--data", s(&f.data), "--split", "all",
        "--n-seeds", "2"];
    let mut one = base.to_vec();
    one.extend(["--jobs", "1", "--out", s(&a)]);
    ok(&one);
    let mut three = base.to_vec();
    three.extend(["--out", s(&b)]);
    let out = Command::new(env!("CARGO_BIN_EXE_cobl"))
        .args(&three)
        .env(JOBS_ENV, "3")
        .output()
        .unwrap();
    assert!(out.status.success());
    assert_eq!(read_json(&b.join("run.json"))["environment"]["threads"], 3);
    assert_eq!(tree(&a), tree(&b));

    let (ra, rb) = (f.root.join("jobs1.json"), f.root.join("jobs3.json"));
    ok(&["eval", "--jobs", "1", "--pred", s(&a), "--truth", s(&f.data), "--out", s(&ra)]);
    ok(&["eval", "--jobs", "3", "--pred", s(&b), "--truth", s(&f.data), "--out", s(&rb)]);
    assert_eq!(fs::read(&ra).unwrap(), fs::read(&rb).unwrap());
}

#[test]
fn zero_jobs_is_rejected() {
    let dir = TempDir::new().unwrap();
    let out = cobl(&["gen", "--jobs", "0", "--out", s(&dir.path().join("d"))]);
    assert_eq!(out.status.code(), Some(EXIT_USAGE));
}

#[test]
fn checkpoints_record_training_metadata() {
    let f = fixture();
    let header = cobl_cli::commands::checkpoint_header(&f.ckpt).unwrap();
    assert_eq!(header.metadata["stage"], "adapter");
    assert_eq!(header.metadata["base"]["stage"], "base");
    assert!(header.metadata["optimizer"].as_str().unwrap().starts_with("adam"));
    let run = read_json(&PathBuf::from(format!("{}.run.json", f.ckpt.display())));
    assert_eq!(run["command"], "train-adapter");
    assert_eq!(run["inputs"]["base_checkpoint"].as_str().unwrap().len(), 64);
}
