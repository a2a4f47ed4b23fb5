use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Stdio};

use mar3d_cli::config::{ConfigError, ExperimentConfig, OUTPUT_ROOT_ENV};
use mar3d_cli::pipeline::{self, Layout, Overrides, PipelineError};
use mar3d_core::artifact_sim::ProjectionGeometry;
use mar3d_core::metrics::improvement_rate;
use mar3d_core::translate::UpdateMode;
use mar3d_model::losses::Variant;
use mar3d_model::nets::{DiscriminatorConfig, EncoderConfig, GeneratorConfig};

fn default_toml() -> String {
    fs::read_to_string(Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/default.toml")).unwrap()
}

fn tiny_config(root: &Path) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::from_toml(&default_toml()).unwrap();
    cfg.output_root = root.to_path_buf();
    cfg.phantoms.image_size = (64, 64);
    cfg.phantoms.n_slices = 4;
    cfg.geometry = ProjectionGeometry::for_width(64);
    cfg.dataset.n_clean = 1;
    cfg.dataset.n_artifact = 1;
    cfg.dataset.n_test_phantoms = 1;
    cfg.dataset.test_m_values = vec![1, 2];
    cfg.train.epochs = 1;
    cfg.train.steps_per_epoch = 2;
    cfg.train.crop = Some(16);
    cfg.train.checkpoint_interval = 1;
    cfg.train.model.generator = GeneratorConfig {
        depth: 2,
        base_width: 4,
        zero_head: true,
    };
    cfg.train.model.discriminator = DiscriminatorConfig {
        n_blocks: 2,
        base_width: 4,
    };
    cfg.train.model.encoder = EncoderConfig {
        widths: vec![4, 4],
        feature_block: 2,
        seed: 1,
    };
    cfg.metrics.figure_slices = vec![1];
    cfg.validate().unwrap();
    cfg
}

fn write_config(dir: &Path, cfg: &ExperimentConfig) -> PathBuf {
    let path = dir.join("config.toml");
    fs::write(&path, cfg.to_toml()).unwrap();
    path
}

fn csv_rows(path: &Path) -> (Vec<String>, Vec<Vec<String>>) {
    let text = fs::read_to_string(path).unwrap();
    let mut lines = text.lines();
    let header = lines.next().unwrap().split(',').map(str::to_string).collect();
    let rows = lines.map(|l| l.split(',').map(str::to_string).collect()).collect();
    (header, rows)
}

fn column(header: &[String], name: &str) -> usize {
    header
        .iter()
        .position(|h| h == name)
        .unwrap_or_else(|| panic!("no column {name}"))
}

fn mar3d() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_mar3d"));
    c.env_remove(OUTPUT_ROOT_ENV)
        .stdout(Stdio::null())
        .stderr(Stdio::null());
    c
}

#[test]
fn default_config_parses_and_round_trips() {
    let cfg = ExperimentConfig::from_toml(&default_toml()).unwrap();
    assert_eq!(ExperimentConfig::from_toml(&cfg.to_toml()).unwrap(), cfg);
    assert_eq!(cfg.train.variant, Variant::Proposed);
    assert!(cfg.train_config().total_steps() <= 30_000);
}

#[test]
fn unknown_keys_are_rejected() {
    let top = format!("{}\nlearning_rate = 0.1\n", default_toml());
    assert!(matches!(ExperimentConfig::from_toml(&top), Err(ConfigError::Schema(_))));
    let nested = default_toml().replace("[train]", "[train]\nwarmup = 3");
    assert!(matches!(
        ExperimentConfig::from_toml(&nested),
        Err(ConfigError::Schema(_))
    ));
}

#[test]
fn semantic_violations_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let base = tiny_config(dir.path());
    let mut c = base.clone();
    c.train.crop = Some(96);
    assert!(matches!(c.validate(), Err(ConfigError::Invalid(_))));
    let mut c = base.clone();
    c.train.model.n_slices = 5;
    assert!(c.validate().is_err());
    let mut c = base.clone();
    c.metrics.figure_slices = vec![4];
    assert!(c.validate().is_err());
    let mut c = base;
    c.metrics.ssim.window = 6;
    assert!(c.validate().is_err());
}

#[test]
fn substream_seeds_differ_per_stage() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    assert_ne!(cfg.dataset_config().seed, cfg.train_config().seed);
    let mut other = cfg.clone();
    other.seed += 1;
    assert_ne!(other.dataset_config().seed, cfg.dataset_config().seed);
}

#[test]
fn layout_names_encode_the_setting() {
    let layout = Layout::new("/r");
    let dir = tempfile::tempdir().unwrap();
    let t = tiny_config(dir.path()).translate_config();
    assert_eq!(
        layout.checkpoint(Variant::CganId),
        Path::new("/r/runs/cgan_id/checkpoint.mrck")
    );
    assert_eq!(
        layout.eval_dir(Variant::Proposed, &t),
        Path::new("/r/runs/proposed/eval/sequential-topdown-n3")
    );
}

#[test]
fn exit_codes_follow_the_failure_class() {
    assert_eq!(PipelineError::Io(std::io::Error::other("x")).exit_code(), 1);
    assert_eq!(PipelineError::Config("x".into()).exit_code(), 2);
    assert_eq!(PipelineError::Data("x".into()).exit_code(), 3);
    assert_eq!(PipelineError::Numeric("x".into()).exit_code(), 4);

    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.toml");
    fs::write(&bad, format!("{}\nbogus = 1\n", default_toml())).unwrap();
    let s = mar3d().args(["build-data", "--config"]).arg(&bad).status().unwrap();
    assert_eq!(s.code(), Some(2));

    let cfg = tiny_config(&dir.path().join("out"));
    let path = write_config(dir.path(), &cfg);
    let s = mar3d().args(["evaluate", "--config"]).arg(&path).status().unwrap();
    assert_eq!(s.code(), Some(3), "evaluating without data");
    let s = mar3d().args(["translate", "--config"]).arg(&path).status().unwrap();
    assert_eq!(s.code(), Some(3), "translating without a checkpoint");
}

#[test]
fn output_root_precedence() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(&dir.path().join("from-config"));
    let path = write_config(dir.path(), &cfg);
    let env_root = dir.path().join("from-env");
    let flag_root = dir.path().join("from-flag");

    let s = mar3d()
        .args(["build-data", "--config"])
        .arg(&path)
        .env(OUTPUT_ROOT_ENV, &env_root)
        .status()
        .unwrap();
    assert!(s.success());
    assert!(env_root.join("data/train.jsonl").is_file());
    assert!(!dir.path().join("from-config").exists());

    let s = mar3d()
        .args(["build-data", "--config"])
        .arg(&path)
        .arg("--out")
        .arg(&flag_root)
        .env(OUTPUT_ROOT_ENV, &env_root)
        .status()
        .unwrap();
    assert!(s.success());
    assert!(flag_root.join("data/test.jsonl").is_file());
    assert_eq!(
        fs::read(env_root.join("data/test.jsonl")).unwrap(),
        fs::read(flag_root.join("data/test.jsonl")).unwrap()
    );
}

#[test]
fn full_pipeline_on_a_tiny_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let layout = Layout::new(dir.path());
    let o = Overrides::default();

    let b = pipeline::build_data(&cfg).unwrap();
    assert_eq!(b.n_train, 2);
    assert!(pipeline::data_is_current(&cfg));
    let mut other = cfg.clone();
    other.seed += 1;
    assert!(!pipeline::data_is_current(&other));

    let t = pipeline::train_variant(&cfg, &o).unwrap();
    assert_eq!((t.steps, t.resumed_from), (2, None));
    let again = pipeline::train_variant(&cfg, &o).unwrap();
    assert_eq!(again.resumed_from, Some(2));
    assert_eq!(fs::read_to_string(&t.loss_csv).unwrap().lines().count(), 3);

    // The checkpoint was trained with N = 3.
    let wrong_n = Overrides {
        n_slices: Some(1),
        ..Overrides::default()
    };
    match pipeline::translate_test_set(&cfg, None, &wrong_n) {
        Err(e @ PipelineError::Config(_)) => assert!(e.to_string().contains("N mismatch"), "{e}"),
        other => panic!("expected a config error, got {other:?}"),
    }

    let tr = pipeline::translate_test_set(&cfg, None, &o).unwrap();
    assert_eq!(tr.n_volumes, 2);
    let single = Overrides {
        mode: Some(UpdateMode::Single),
        ..Overrides::default()
    };
    let tr_single = pipeline::translate_test_set(&cfg, None, &single).unwrap();
    assert_ne!(tr_single.out_dir, tr.out_dir);

    let e = pipeline::evaluate(&cfg, None, &o).unwrap();
    assert!(e.summary.omissions.is_empty());
    assert_eq!(e.summary.n_evaluated, 2);
    for name in ["metrics.csv", "aggregate.csv", "omissions.txt", "summary.json"] {
        assert!(e.out_dir.join(name).is_file(), "{name}");
    }
    assert!(fs::read_dir(e.out_dir.join("figures")).unwrap().next().is_some());

    // One aggregate row per (m, method).
    let (header, rows) = csv_rows(&e.out_dir.join("aggregate.csv"));
    let (mi, me, ci) = (
        column(&header, "m"),
        column(&header, "method"),
        column(&header, "count"),
    );
    let keys: BTreeSet<(String, String)> = rows.iter().map(|r| (r[mi].clone(), r[me].clone())).collect();
    assert_eq!(keys.len(), rows.len());
    assert_eq!(rows.len(), 4);
    assert!(rows.iter().all(|r| r[ci] == "1"));

    // R_s agrees with the SSIM columns it is derived from.
    let (header, rows) = csv_rows(&e.out_dir.join("metrics.csv"));
    let (s, so, rs) = (
        column(&header, "ssim"),
        column(&header, "ssim_original"),
        column(&header, "r_s"),
    );
    for r in &rows {
        let parse = |i: usize| r[i].parse::<f64>().unwrap();
        let expected = improvement_rate(parse(s), parse(so)).unwrap();
        assert!((parse(rs) - expected).abs() < 1e-9);
    }

    // A missing translated volume is listed, not silently dropped.
    let victim = fs::read_dir(&tr.out_dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .find(|p| p.extension().is_some_and(|x| x == "vxm"))
        .unwrap();
    let id = victim.file_stem().unwrap().to_string_lossy().to_string();
    fs::remove_file(&victim).unwrap();
    let e = pipeline::evaluate(&cfg, None, &o).unwrap();
    assert_eq!(e.summary.omissions, vec![id.clone()]);
    assert_eq!(e.summary.n_evaluated, 1);
    assert!(fs::read_to_string(e.out_dir.join("omissions.txt"))
        .unwrap()
        .contains(&id));
    let (_, rows) = csv_rows(&e.out_dir.join("metrics.csv"));
    assert_eq!(rows.len(), 3, "both originals and the surviving correction");

    assert!(layout.checkpoint(Variant::Proposed).is_file());
}
