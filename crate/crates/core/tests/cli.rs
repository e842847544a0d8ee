use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::OnceLock;

use bpreg::apps::metadata::METADATA_KEYS;
use bpreg::cli::{
    cmd_evaluate, cmd_phantom, cmd_predict, cmd_train, EvalReport, EvaluateArgs, PhantomArgs, PredictArgs, TrainArgs,
    EXIT_CONFIG, EXIT_OK, EXIT_PARTIAL,
};
use bpreg::landmarks::{Annotations, EVALUATION_LANDMARKS};
use bpreg::train::EpochRecord;

const QUICK_CONFIG: &str = r#"{
  "m": 4, "learning_rate": 0.001, "slices_per_batch": 16, "total_slices_per_volume": 20,
  "model": {"backbone": "tiny", "pretrained": false, "pretrained_weights": null, "input_channels": 1}
}"#;

struct Fixture {
    _dir: tempfile::TempDir,
    data: PathBuf,
    model: PathBuf,
    config: PathBuf,
}

fn train_args(config: &Path, data: &Path, out: &Path) -> TrainArgs {
    TrainArgs {
        config: config.to_path_buf(),
        data: data.to_path_buf(),
        out: out.to_path_buf(),
        resume: false,
        stop_after: None,
        jobs: None,
    }
}

fn fixture() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let data = dir.path().join("data");
        let code = cmd_phantom(&PhantomArgs {
            out: data.clone(),
            train: 8,
            val: 2,
            test: 3,
            seed: 5,
            config: None,
        });
        assert_eq!(code, EXIT_OK);
        let config = dir.path().join("quick.json");
        std::fs::write(&config, QUICK_CONFIG).unwrap();
        let model = dir.path().join("model");
        assert_eq!(cmd_train(&train_args(&config, &data, &model)), EXIT_OK);
        Fixture {
            _dir: dir,
            data,
            model,
            config,
        }
    })
}

fn predict_args(input: &Path, output: &Path) -> PredictArgs {
    PredictArgs {
        input: input.to_path_buf(),
        output: output.to_path_buf(),
        model: Some(fixture().model.clone()),
        plot: false,
        theta: None,
        boundaries: None,
        recursive: false,
        jobs: None,
    }
}

fn copy_volumes(n: usize, to: &Path) {
    std::fs::create_dir_all(to).unwrap();
    for i in 0..n {
        let name = format!("test_{i:04}.json");
        std::fs::copy(fixture().data.join("test").join(&name), to.join(&name)).unwrap();
    }
}

fn outputs(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), std::fs::read(&p).unwrap()))
        .collect()
}

#[test]
fn train_writes_artifacts() {
    let f = fixture();
    for name in ["model.ckpt", "characteristics.json", "history.json"] {
        assert!(f.model.join(name).exists(), "{name}");
    }
}

#[test]
fn predict_two_volumes() {
    let tmp = tempfile::tempdir().unwrap();
    let input = tmp.path().join("in");
    copy_volumes(2, &input);
    let out = tmp.path().join("out");
    assert_eq!(cmd_predict(&predict_args(&input, &out)), EXIT_OK);
    let files = outputs(&out);
    assert_eq!(files.len(), 3);
    assert!(files.contains_key("README.md"));
    for name in ["test_0000.json", "test_0001.json"] {
        let v: serde_json::Value = serde_json::from_slice(&files[name]).unwrap();
        let obj = v.as_object().unwrap();
        assert_eq!(obj.len(), 14);
        for k in METADATA_KEYS {
            assert!(obj.contains_key(k), "{k}");
        }
        let n = obj["z"].as_array().unwrap().len();
        assert_eq!(obj["cleaned slice scores"].as_array().unwrap().len(), n);
        assert_eq!(obj["unprocessed slice scores"].as_array().unwrap().len(), n);
    }
}

#[test]
fn predict_is_byte_identical_across_runs_and_jobs() {
    let tmp = tempfile::tempdir().unwrap();
    let input = tmp.path().join("in");
    copy_volumes(3, &input);
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    assert_eq!(cmd_predict(&predict_args(&input, &a)), EXIT_OK);
    let mut args = predict_args(&input, &b);
    args.jobs = Some(2);
    assert_eq!(cmd_predict(&args), EXIT_OK);
    assert_eq!(outputs(&a), outputs(&b));
}

#[test]
fn predict_partial_failure() {
    let tmp = tempfile::tempdir().unwrap();
    let input = tmp.path().join("in");
    copy_volumes(1, &input);
    std::fs::write(input.join("corrupt.json"), "not a volume").unwrap();
    let out = tmp.path().join("out");
    assert_eq!(cmd_predict(&predict_args(&input, &out)), EXIT_PARTIAL);
    let files = outputs(&out);
    assert!(files.contains_key("test_0000.json"));
    assert!(!files.contains_key("corrupt.json"));
}

#[test]
fn predict_plot_writes_png() {
    let tmp = tempfile::tempdir().unwrap();
    let input = tmp.path().join("in");
    copy_volumes(1, &input);
    let out = tmp.path().join("out");
    let mut args = predict_args(&input, &out);
    args.plot = true;
    assert_eq!(cmd_predict(&args), EXIT_OK);
    let png = std::fs::read(out.join("test_0000.png")).unwrap();
    assert_eq!(&png[1..4], b"PNG");
}

#[test]
fn predict_rejects_empty_input_and_missing_model() {
    let tmp = tempfile::tempdir().unwrap();
    let empty = tmp.path().join("empty");
    std::fs::create_dir_all(&empty).unwrap();
    assert_ne!(cmd_predict(&predict_args(&empty, &tmp.path().join("o"))), EXIT_OK);
    let input = tmp.path().join("in");
    copy_volumes(1, &input);
    let mut args = predict_args(&input, &tmp.path().join("o2"));
    args.model = Some(tmp.path().join("nothing"));
    assert_ne!(cmd_predict(&args), EXIT_OK);
    let mut args = predict_args(&input, &tmp.path().join("o3"));
    args.theta = Some(-1.0);
    assert_eq!(cmd_predict(&args), EXIT_CONFIG);
}

#[test]
fn train_rejects_non_divisor_m() {
    let f = fixture();
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("bad.json");
    std::fs::write(&cfg, QUICK_CONFIG.replace("\"m\": 4", "\"m\": 5")).unwrap();
    assert_eq!(cmd_train(&train_args(&cfg, &f.data, &tmp.path().join("o"))), EXIT_CONFIG);
    assert!(!tmp.path().join("o").exists());
}

#[test]
fn resumed_training_extends_history() {
    let f = fixture();
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("run");
    let mut args = train_args(&f.config, &f.data, &out);
    args.stop_after = Some(2);
    assert_eq!(cmd_train(&args), EXIT_OK);
    args.stop_after = None;
    args.resume = true;
    assert_eq!(cmd_train(&args), EXIT_OK);
    let hist: Vec<EpochRecord> = serde_json::from_slice(&std::fs::read(out.join("history.json")).unwrap()).unwrap();
    let epochs: Vec<usize> = hist.iter().map(|r| r.epoch).collect();
    assert_eq!(epochs, (0..epochs.len()).collect::<Vec<_>>());
    assert!(epochs.len() > 2);
}

fn eval_args(annotations: &Path) -> EvaluateArgs {
    EvaluateArgs {
        model: Some(fixture().model.clone()),
        volumes: None,
        annotations: annotations.to_path_buf(),
        scores: None,
        compare: None,
        output: None,
        jobs: None,
    }
}

#[test]
fn evaluate_oracle_scores_give_zero_lmse() {
    let tmp = tempfile::tempdir().unwrap();
    let mut ann = Annotations::new();
    let mut scores = BTreeMap::new();
    for (v, off) in [("a", 2usize), ("b", 5)] {
        let lms = EVALUATION_LANDMARKS.iter().enumerate().map(|(k, l)| (l.to_string(), off + 4 * k)).collect();
        ann.insert(v, lms);
        let curve: Vec<f64> = (0..60).map(|i| (i as f64 - off as f64) / 4.0 * 10.0).collect();
        scores.insert(v.to_string(), curve);
    }
    let ann_path = tmp.path().join("ann.json");
    ann.save(&ann_path).unwrap();
    let scores_path = tmp.path().join("scores.json");
    std::fs::write(&scores_path, serde_json::to_string(&scores).unwrap()).unwrap();
    let report_path = tmp.path().join("report.json");
    let mut args = eval_args(&ann_path);
    args.model = None;
    args.scores = Some(scores_path);
    args.output = Some(report_path.clone());
    assert_eq!(cmd_evaluate(&args), EXIT_OK);
    let report: EvalReport = serde_json::from_slice(&std::fs::read(&report_path).unwrap()).unwrap();
    assert_eq!(report.lmse.mean, 0.0);
    let again: EvalReport = serde_json::from_str(&serde_json::to_string(&report).unwrap()).unwrap();
    assert_eq!(again, report);
}

#[test]
fn evaluate_model_with_comparison() {
    let f = fixture();
    let tmp = tempfile::tempdir().unwrap();
    let report_path = tmp.path().join("report.json");
    let mut args = eval_args(&f.data.join("val_annotations.json"));
    args.volumes = Some(f.data.join("val"));
    args.compare = Some(f.model.clone());
    args.output = Some(report_path.clone());
    assert_eq!(cmd_evaluate(&args), EXIT_OK);
    let report: EvalReport = serde_json::from_slice(&std::fs::read(&report_path).unwrap()).unwrap();
    assert!(report.lmse.mean.is_finite());
    let cmp = report.compare.unwrap();
    assert_eq!(cmp.t, 0.0);
    assert!(!cmp.significant);
}

#[test]
fn evaluate_requires_anchor_landmarks() {
    let tmp = tempfile::tempdir().unwrap();
    let mut ann = Annotations::new();
    ann.insert("a", [("L5".to_string(), 3usize)].into_iter().collect());
    let p = tmp.path().join("ann.json");
    ann.save(&p).unwrap();
    let mut args = eval_args(&p);
    args.volumes = Some(fixture().data.join("val"));
    assert_eq!(cmd_evaluate(&args), EXIT_CONFIG);
}

#[test]
fn binary_reports_exit_codes() {
    let exe = env!("CARGO_BIN_EXE_bpreg");
    let tmp = tempfile::tempdir().unwrap();
    let status = std::process::Command::new(exe)
        .args(["phantom", "--out"])
        .arg(tmp.path().join("ds"))
        .args(["--train", "1", "--val", "1", "--test", "1"])
        .status()
        .unwrap();
    assert!(status.success());
    assert!(tmp.path().join("ds/val_annotations.json").exists());
    let status = std::process::Command::new(exe)
        .args(["predict", "-i"])
        .arg(tmp.path().join("ds/test"))
        .args(["-o"])
        .arg(tmp.path().join("out"))
        .env_remove("BPREG_MODEL_DIR")
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(EXIT_CONFIG));
}
