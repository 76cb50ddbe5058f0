use std::fs;
use std::path::Path;
use std::process::Command;

use fsl_core::data::Phase;
use fsl_core::meta::{meta_test, repeat_seed, target_data, test_seed, ReportMeta, Trained};
use fsl_core::synthetic::{generate_synthetic_dataset, SyntheticConfig};
use fsl_harness::checkpoint::load_trained;
use fsl_harness::config::{DatasetConfig, ExperimentConfig, SourceConfig};
use fsl_harness::dataset::{export_synthetic, load_dataset, load_directory_dataset};
use fsl_harness::report::cmd_report;
use fsl_harness::run::{
    cmd_eval, cmd_generate_data, cmd_train, general_run_dir, parallel_meta_test, run_dir, CHECKPOINT_FILE, REPORT_FILE,
};

fn tiny(out: &Path, method: &str, scenario: &str) -> ExperimentConfig {
    let text = format!(
        r#"
method = "{method}"
scenario = "{scenario}"
seed = 3
repeats = 1
test_tasks = 12
output_dir = "{}"

[target]
name = "target"
[target.source]
kind = "synthetic"
n_classes = 10
per_class = 20
image_size = 48
noise_level = 0.3
seed = 5
[target.split]
train = 4
val = 3
test = 3

[general]
name = "general"
[general.source]
kind = "synthetic"
n_classes = 12
per_class = 20
image_size = 48
noise_level = 0.3
seed = 6
[general.split]
train = 6
val = 3
test = 3

[episodes.general_train]
shots = 2
ways = 3
targets = 2
unlabeled = 2
[episodes.target_train]
shots = 2
ways = 3
targets = 2
unlabeled = 2
[episodes.eval]
shots = 2
ways = 3
targets = 2
unlabeled = 2

[budget.general]
total_tasks = 6
validation_period = 3
validation_tasks = 4
[budget.target]
total_tasks = 6
validation_period = 3
validation_tasks = 4

[backbone]
filters = 4

[baseline]
batches = 6
batch_size = 8
decay_every = 3
validation_period = 3
validation_tasks = 4
finetune_iterations = 3
"#,
        out.display()
    );
    let mut c = ExperimentConfig::from_toml(&text).unwrap();
    c.min_class_size = 10;
    c
}

fn write_png(path: &Path, w: u32, h: u32, seed: u8) {
    let img = image::RgbImage::from_fn(w, h, |x, y| {
        image::Rgb([(x as u8).wrapping_mul(seed), (y as u8).wrapping_add(seed), seed])
    });
    img.save(path).unwrap();
}

#[test]
fn generate_data_writes_one_directory_per_class() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = ExperimentConfig {
        output_dir: tmp.path().to_path_buf(),
        ..Default::default()
    };
    cfg.target.source = SourceConfig::Synthetic {
        n_classes: 18,
        per_class: 60,
        image_size: 20,
        channels: 1,
        noise_level: 0.5,
        seed: 4,
    };
    // The default 84-pixel backbone would reject 20-pixel images.
    cfg.backbone.padding = 1;
    let out = cmd_generate_data(&cfg).unwrap();
    assert_eq!(out.len(), 1);
    let (dir, manifest) = &out[0];
    let classes: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .filter_map(|e| e.ok())
        .filter(|e| e.path().is_dir())
        .collect();
    assert_eq!(classes.len(), 18);
    for c in &classes {
        assert_eq!(fs::read_dir(c.path()).unwrap().count(), 60);
    }
    assert_eq!(manifest.images, 18 * 60);
    assert!(dir.join("manifest.json").is_file());

    let again = tempfile::tempdir().unwrap();
    cfg.output_dir = again.path().to_path_buf();
    let second = cmd_generate_data(&cfg).unwrap();
    assert_eq!(second[0].1.sha256, manifest.sha256);
    assert_eq!(
        fs::read(dir.join("manifest.json")).unwrap(),
        fs::read(second[0].0.join("manifest.json")).unwrap()
    );
}

#[test]
fn generate_data_rejects_single_class() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = tiny(tmp.path(), "pn", "target-only");
    if let SourceConfig::Synthetic { n_classes, .. } = &mut cfg.target.source {
        *n_classes = 1;
    }
    assert!(cmd_generate_data(&cfg).is_err());
    assert_eq!(
        fs::read_dir(tmp.path()).unwrap().count(),
        0,
        "nothing written before validation"
    );
}

#[test]
fn exported_dataset_loads_back_at_pixel_resolution() {
    let tmp = tempfile::tempdir().unwrap();
    let synth = SyntheticConfig {
        n_classes: 3,
        per_class: 4,
        image_size: 16,
        channels: 1,
        noise_level: 0.2,
        seed: 9,
    };
    export_synthetic(&synth, "s", tmp.path()).unwrap();
    let back = load_directory_dataset::<f32>(tmp.path(), 16, 1).unwrap();
    let orig = generate_synthetic_dataset::<f32>(&synth).unwrap();
    assert_eq!(back.class_names(), orig.class_names());
    assert_eq!(back.labels(), orig.labels());
    for (a, b) in back.pixels().iter().zip(orig.pixels()) {
        assert!((a - b.clamp(0.0, 1.0)).abs() <= 0.5 / 255.0 + 1e-6);
    }
}

#[test]
fn directory_loader_counts_classes_and_resizes() {
    let tmp = tempfile::tempdir().unwrap();
    for class in ["cat", "dog"] {
        let d = tmp.path().join(class);
        fs::create_dir(&d).unwrap();
        for i in 0..3 {
            write_png(&d.join(format!("{i}.png")), 100, 60, i as u8 + 1);
        }
    }
    let ds = load_directory_dataset::<f32>(tmp.path(), 84, 3).unwrap();
    assert_eq!(ds.num_classes(), 2);
    assert_eq!(ds.len(), 6);
    assert_eq!(ds.image_shape(), [3, 84, 84]);
    assert!(ds.pixels().iter().all(|&v| (0.0..=1.0).contains(&v)));
    let gray = load_directory_dataset::<f32>(tmp.path(), 30, 1).unwrap();
    assert_eq!(gray.image_shape(), [1, 30, 30]);

    let cfg = DatasetConfig {
        source: SourceConfig::Directory {
            path: tmp.path().to_path_buf(),
            image_size: 84,
            channels: 3,
        },
        ..Default::default()
    };
    assert_eq!(load_dataset::<f32>(&cfg, Path::new(".")).unwrap(), ds);
}

#[test]
fn directory_loader_errors_name_the_path() {
    let tmp = tempfile::tempdir().unwrap();
    let missing = tmp.path().join("nope");
    let err = load_directory_dataset::<f32>(&missing, 84, 3).unwrap_err();
    assert!(err.to_string().contains("nope"));

    fs::create_dir(tmp.path().join("empty")).unwrap();
    let err = load_directory_dataset::<f32>(tmp.path(), 84, 3).unwrap_err();
    assert!(err.to_string().contains("empty"), "{err}");

    let bad = tempfile::tempdir().unwrap();
    fs::create_dir(bad.path().join("a")).unwrap();
    fs::write(bad.path().join("a").join("broken.png"), b"not an image").unwrap();
    let err = load_directory_dataset::<f32>(bad.path(), 84, 3).unwrap_err();
    assert!(err.to_string().contains("broken.png"), "{err}");
}

#[test]
fn skm_mask_target_only_trains_and_evaluates_reproducibly() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny(tmp.path(), "skm-mask", "target-only");
    let runs = cmd_train(&cfg).unwrap();
    assert_eq!(runs.len(), 1);
    let dir = run_dir(&cfg, 0);
    assert!(dir.ends_with("skm-mask__target-only__r0__s3"));
    let log = fs::read_to_string(dir.join("train_log.csv")).unwrap();
    assert_eq!(log.lines().count(), 1 + 6);
    assert!(log.starts_with("task,loss,val_acc\n"));

    cmd_eval(&cfg).unwrap();
    let first = fs::read(dir.join(REPORT_FILE)).unwrap();
    cmd_eval(&cfg).unwrap();
    assert_eq!(fs::read(dir.join(REPORT_FILE)).unwrap(), first, "byte-identical report");

    let table = cmd_report(&[tmp.path().to_path_buf()], None).unwrap();
    assert_eq!(table.lines().count(), 2);
    assert!(table.lines().nth(1).unwrap().starts_with("skm-mask,target-only,"));
}

#[test]
fn parallel_meta_test_matches_sequential() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny(tmp.path(), "pn", "target-only");
    cmd_train(&cfg).unwrap();
    let model: Trained<f32> = load_trained(&run_dir(&cfg, 0).join(CHECKPOINT_FILE)).unwrap();
    let target = generate_synthetic_dataset::<f32>(&cfg.target.source.synthetic().unwrap()).unwrap();
    let spec = cfg.scenario_spec(None, &target).unwrap();
    let seed = repeat_seed(cfg.seed, 0);
    let data = target_data(&spec, seed).unwrap();
    let eval = cfg.episodes.eval.into();
    let a = parallel_meta_test(&model, &data, 30, &eval, test_seed(seed), ReportMeta::default()).unwrap();
    let b = meta_test(&model, &data, 30, &eval, test_seed(seed), ReportMeta::default()).unwrap();
    assert_eq!(a, b);
    assert!(data.split.classes(Phase::Test).len() == 3);
}

#[test]
fn general_then_target_needs_and_resumes_general_checkpoint() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = tiny(tmp.path(), "pn", "general-then-target");
    let err = cmd_train(&cfg).unwrap_err();
    assert!(err.to_string().contains("general-only"), "{err}");

    let general = tiny(tmp.path(), "pn", "general-only");
    cmd_train(&general).unwrap();
    let ckpt: Trained<f32> = load_trained(&general_run_dir(&cfg, 0).join(CHECKPOINT_FILE)).unwrap();

    cfg.budget.target.total_tasks = 0;
    let runs = cmd_train(&cfg).unwrap();
    assert_eq!(
        runs[0].checksum,
        ckpt.checksum(),
        "zero target budget keeps the general checkpoint"
    );

    cfg.budget.target.total_tasks = 6;
    let runs = cmd_train(&cfg).unwrap();
    assert_ne!(runs[0].checksum, ckpt.checksum());
    cmd_eval(&cfg).unwrap();
}

#[test]
fn fine_tune_baseline_runs_through_the_cli_path() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny(tmp.path(), "convnet-ft", "target-only");
    cmd_train(&cfg).unwrap();
    let reports = cmd_eval(&cfg).unwrap();
    assert_eq!(reports[0].n_tasks, 12);
    assert!(reports[0].accuracies.iter().all(|a| (0.0..=1.0).contains(a)));
}

#[test]
fn eval_without_checkpoint_is_an_error() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny(tmp.path(), "pn", "target-only");
    let err = cmd_eval(&cfg).unwrap_err();
    assert!(err.to_string().contains("train"), "{err}");
}

#[test]
fn binary_exits_nonzero_with_message_on_bad_config() {
    let tmp = tempfile::tempdir().unwrap();
    let path = tmp.path().join("bad.toml");
    fs::write(&path, "method = \"pn\"\nlearning_rate = 3\n").unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_fsl"))
        .args(["train", "--config"])
        .arg(&path)
        .output()
        .unwrap();
    assert!(!out.status.success());
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("learning_rate"), "{stderr}");
}

#[test]
fn binary_generates_data_with_seed_and_out_overrides() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg_path = tmp.path().join("c.toml");
    fs::write(
        &cfg_path,
        "[target.source]\nkind = \"synthetic\"\nn_classes = 18\nper_class = 2\nimage_size = 84\n",
    )
    .unwrap();
    let out_dir = tmp.path().join("data");
    let status = Command::new(env!("CARGO_BIN_EXE_fsl"))
        .args(["generate-data", "--seed", "11", "--config"])
        .arg(&cfg_path)
        .arg("--out")
        .arg(&out_dir)
        .status()
        .unwrap();
    assert!(status.success());
    assert!(out_dir.join("target").join("manifest.json").is_file());
}
