use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use lungforge::model::{init_params, ModelParams};
use lungforge::trainer::TrainConfig;

fn lungforge(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lungforge"))
        .args(args)
        .env_remove("LUNGFORGE_THREADS")
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn ok(args: &[&str]) -> Output {
    let out = lungforge(args);
    assert_eq!(code(&out), 0, "{args:?}\n{}", String::from_utf8_lossy(&out.stderr));
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn phantoms(dir: &Path, n: usize, seed: u64, domain: &str, positive: f64) {
    ok(&[
        "phantom-gen",
        "--n",
        &n.to_string(),
        "--seed",
        &seed.to_string(),
        "--domain",
        domain,
        "--positive-fraction",
        &positive.to_string(),
        "--out",
        s(dir),
    ]);
}

/// Every file under `dir` except run manifests, keyed by relative path.
fn snapshot(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    fn walk(root: &Path, dir: &Path, out: &mut BTreeMap<PathBuf, Vec<u8>>) {
        for entry in std::fs::read_dir(dir).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                walk(root, &p, out);
            } else if !p.to_string_lossy().ends_with("manifest.json") {
                out.insert(p.strip_prefix(root).unwrap().to_path_buf(), std::fs::read(&p).unwrap());
            }
        }
    }
    let mut out = BTreeMap::new();
    walk(dir, dir, &mut out);
    out
}

fn manifest(path: &Path) -> serde_json::Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn phantom_gen_writes_images_and_manifest_reproducibly() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path().join("d");
    phantoms(&d, 10, 0, "A", 0.5);
    let pngs = std::fs::read_dir(&d)
        .unwrap()
        .filter(|e| e.as_ref().unwrap().path().extension().is_some_and(|x| x == "png"))
        .count();
    assert_eq!(pngs, 10);
    let csv = std::fs::read_to_string(d.join("manifest.csv")).unwrap();
    assert_eq!(csv.lines().count(), 11);
    let m = manifest(&d.join("manifest.json"));
    assert_eq!(m["subcommand"], "phantom-gen");
    assert_eq!(m["seeds"], serde_json::json!([0]));
    assert_eq!(m["config_hash"].as_str().unwrap().len(), 64);
    assert!(m["version"].is_string() && m["command"].is_array());
    assert!(!d.join(".lungforge.lock").exists());

    let first = snapshot(&d);
    std::fs::remove_dir_all(&d).unwrap();
    phantoms(&d, 10, 0, "A", 0.5);
    assert_eq!(snapshot(&d), first);
    let again = manifest(&d.join("manifest.json"));
    assert_eq!(again["config_hash"], m["config_hash"]);
}

#[test]
fn usage_errors_exit_2() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("x");
    let bad_domain = lungforge(&["phantom-gen", "--n", "3", "--seed", "0", "--domain", "Q", "--out", s(&out)]);
    assert_eq!(code(&bad_domain), 2);
    assert_eq!(code(&lungforge(&["phantom-gen", "--n", "3"])), 2);
    assert_eq!(code(&lungforge(&["no-such-command"])), 2);

    let threads = Command::new(env!("CARGO_BIN_EXE_lungforge"))
        .args(["phantom-gen", "--n", "3", "--seed", "0", "--domain", "A", "--out", s(&out)])
        .env("LUNGFORGE_THREADS", "many")
        .output()
        .unwrap();
    assert_eq!(code(&threads), 2);
    let capped = Command::new(env!("CARGO_BIN_EXE_lungforge"))
        .args(["phantom-gen", "--n", "3", "--seed", "0", "--domain", "A", "--out", s(&out)])
        .env("LUNGFORGE_THREADS", "1")
        .output()
        .unwrap();
    assert_eq!(code(&capped), 0);
}

#[test]
fn locked_output_directory_is_refused() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path().join("d");
    std::fs::create_dir_all(&d).unwrap();
    std::fs::write(d.join(".lungforge.lock"), "1\n").unwrap();
    let out = lungforge(&["phantom-gen", "--n", "2", "--seed", "0", "--domain", "A", "--out", s(&d)]);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("locked"));
    assert!(!d.join("manifest.csv").exists());
}

#[test]
fn help_documents_every_flag() {
    let help = String::from_utf8(ok(&["enhance", "--help"]).stdout).unwrap();
    for flag in ["--checkpoint", "--input", "--out", "--text-mask-dir", "--bins", "--x-shift", "--y-shift"] {
        assert!(help.contains(flag), "{flag}");
    }
    let top = String::from_utf8(ok(&["--help"]).stdout).unwrap();
    for cmd in ["phantom-gen", "train-dce", "enhance", "domain-gap", "pretrain", "evaluate", "hit-rate"] {
        assert!(top.contains(cmd), "{cmd}");
    }
}

#[test]
fn train_dce_outputs_and_zero_epochs() {
    let tmp = tempfile::tempdir().unwrap();
    let corpus = tmp.path().join("corpus");
    phantoms(&corpus, 3, 1, "A", 0.5);
    let out = tmp.path().join("out");
    let ckpt = out.join("model.dce");
    let report = out.join("report.json");
    ok(&["train-dce", "--corpus", s(&corpus), "--epochs", "1", "--out", s(&ckpt), "--report", s(&report)]);
    assert!(ckpt.is_file() && report.is_file());
    let r: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&report).unwrap()).unwrap();
    assert_eq!(r["epochs"].as_array().unwrap().len(), 1);
    assert!(r.get("wall_clock_secs").is_none());
    assert!(out.join("model.dce.manifest.json").is_file());

    let zero = out.join("zero.dce");
    ok(&["train-dce", "--corpus", s(&corpus), "--epochs", "0", "--seed", "9", "--out", s(&zero), "--report", s(&report)]);
    let (params, meta) = ModelParams::load(&zero).unwrap();
    assert_eq!(params, init_params(TrainConfig::default().unet, 9).unwrap());
    assert_eq!(meta.epochs_run, 0);
}

#[test]
fn train_dce_rejects_empty_corpus() {
    let tmp = tempfile::tempdir().unwrap();
    let empty = tmp.path().join("empty");
    std::fs::create_dir_all(&empty).unwrap();
    let ckpt = tmp.path().join("m.dce");
    let report = tmp.path().join("r.json");
    let out = lungforge(&["train-dce", "--corpus", s(&empty), "--out", s(&ckpt), "--report", s(&report)]);
    assert_eq!(code(&out), 2);
    assert!(!ckpt.exists());
}

#[test]
fn train_dce_divergence_exits_3_with_last_good_checkpoint() {
    let tmp = tempfile::tempdir().unwrap();
    let corpus = tmp.path().join("corpus");
    phantoms(&corpus, 2, 2, "A", 0.5);
    let cfg = tmp.path().join("blowup.toml");
    std::fs::write(&cfg, "learning_rate = 1e300\nforce = true\nepochs = 2\n").unwrap();
    let ckpt = tmp.path().join("m.dce");
    let report = tmp.path().join("r.json");
    let out = lungforge(&[
        "train-dce",
        "--corpus",
        s(&corpus),
        "--config",
        s(&cfg),
        "--out",
        s(&ckpt),
        "--report",
        s(&report),
    ]);
    assert_eq!(code(&out), 3, "{}", String::from_utf8_lossy(&out.stderr));
    let (params, _) = ModelParams::load(&ckpt).unwrap();
    assert!(params.tensors.all_finite());
    let m = manifest(&tmp.path().join("m.dce.manifest.json"));
    assert!(m["status"].as_str().unwrap().starts_with("diverged"));
}

fn trained_checkpoint(dir: &Path) -> PathBuf {
    let corpus = dir.join("train");
    phantoms(&corpus, 2, 3, "A", 0.5);
    let ckpt = dir.join("m.dce");
    ok(&[
        "train-dce",
        "--corpus",
        s(&corpus),
        "--epochs",
        "1",
        "--out",
        s(&ckpt),
        "--report",
        s(&dir.join("r.json")),
    ]);
    ckpt
}

#[test]
fn enhance_inpaints_first_and_reports_entropy_and_bad_files() {
    let tmp = tempfile::tempdir().unwrap();
    let ckpt = trained_checkpoint(tmp.path());
    let input = tmp.path().join("b");
    phantoms(&input, 4, 5, "B", 0.5);
    std::fs::write(input.join("zz_broken.png"), b"not an image").unwrap();
    let masks = input.join("masks");
    assert!(masks.is_dir(), "domain B draws text");
    let out = tmp.path().join("enhanced");
    ok(&[
        "enhance",
        "--checkpoint",
        s(&ckpt),
        "--input",
        s(&input),
        "--out",
        s(&out),
        "--text-mask-dir",
        s(&masks),
    ]);
    let log = std::fs::read_to_string(out.join("pipeline.log")).unwrap();
    let mut inpainted = 0;
    for mask in std::fs::read_dir(&masks).unwrap() {
        let name = mask.unwrap().file_name().to_string_lossy().into_owned();
        let inpaint = log.find(&format!("{name}\tinpaint")).expect("mask applied");
        let enhance = log.find(&format!("{name}\tenhance")).unwrap();
        assert!(inpaint < enhance);
        inpainted += 1;
    }
    assert!(inpainted >= 1);
    let entropy = std::fs::read_to_string(out.join("entropy.csv")).unwrap();
    assert_eq!(entropy.lines().count(), 1 + 4);
    assert!(entropy.starts_with("file,output,masked_pixels,entropy_original,entropy_enhanced"));
    let errors = std::fs::read_to_string(out.join("errors.csv")).unwrap();
    assert_eq!(errors.lines().count(), 2);
    assert!(errors.contains("zz_broken.png"));
    assert!(out.join("phantom_00000-dce.png").is_file());
    let m = manifest(&out.join("manifest.json"));
    assert_eq!(m["status"], "1 of 5 files failed");
}

#[test]
fn enhance_without_checkpoint_exits_2() {
    let tmp = tempfile::tempdir().unwrap();
    let input = tmp.path().join("a");
    phantoms(&input, 1, 0, "A", 0.5);
    let out = lungforge(&[
        "enhance",
        "--checkpoint",
        s(&tmp.path().join("missing.dce")),
        "--input",
        s(&input),
        "--out",
        s(&tmp.path().join("o")),
    ]);
    assert_eq!(code(&out), 2);
}

fn distances(dir: &Path) -> Vec<Vec<f64>> {
    let v = manifest(&dir.join("distances.json"));
    serde_json::from_value(v["matrix"]["distances"].clone()).unwrap()
}

#[test]
fn domain_gap_matrix_scatter_and_duplicates() {
    let tmp = tempfile::tempdir().unwrap();
    let mut args = vec!["domain-gap".to_string(), "--datasets".into()];
    for d in ["A", "B", "C"] {
        let dir = tmp.path().join(d);
        phantoms(&dir, 4, 7, d, 0.5);
        args.push(format!("{d}={}", dir.display()));
    }
    let out = tmp.path().join("gap");
    args.extend(["--out".into(), out.display().to_string()]);
    ok(&args.iter().map(String::as_str).collect::<Vec<_>>());
    let d = distances(&out);
    assert_eq!(d.len(), 3);
    for i in 0..3 {
        assert_eq!(d[i][i], 0.0);
        for j in 0..3 {
            assert_eq!(d[i][j], d[j][i]);
        }
    }
    assert!(d[0][1] > 0.0);
    let svg = std::fs::read_to_string(out.join("scatter.svg")).unwrap();
    assert_eq!(svg.matches("<circle").count(), 3);
    assert_eq!(std::fs::read_to_string(out.join("mds.csv")).unwrap().lines().count(), 4);
    let features = std::fs::read_to_string(out.join("features.csv")).unwrap();
    assert_eq!(features.lines().count(), 1 + 12);

    let a = tmp.path().join("A");
    let dup = tmp.path().join("dup");
    ok(&[
        "domain-gap",
        "--datasets",
        &format!("first={}", a.display()),
        &format!("second={}", a.display()),
        "--out",
        s(&dup),
    ]);
    let d = distances(&dup);
    assert!(d[0][1].abs() < 1e-12, "{d:?}");

    let single = lungforge(&["domain-gap", "--datasets", &format!("a={}", a.display()), "--out", s(&dup)]);
    assert_eq!(code(&single), 2);
}

#[test]
fn pretrain_writes_encoder_and_report() {
    let tmp = tempfile::tempdir().unwrap();
    let corpus = tmp.path().join("pool");
    phantoms(&corpus, 4, 11, "A", 0.5);
    let cfg = tmp.path().join("pre.toml");
    std::fs::write(
        &cfg,
        "[encoder]\nchannels = [4, 8]\nprojection_hidden = 8\nprojection_dim = 4\ninput_side = 32\n\
         [pretrain]\nbatch_size = 4\nforce = true\n[pretrain.augment]\noutput_width = 32\noutput_height = 32\n",
    )
    .unwrap();
    let out = tmp.path().join("enc");
    let args = |o: &Path| {
        vec![
            "pretrain".to_string(),
            "--corpus".into(),
            corpus.display().to_string(),
            "--config".into(),
            cfg.display().to_string(),
            "--epochs".into(),
            "2".into(),
            "--out".into(),
            o.join("encoder.enc").display().to_string(),
            "--report".into(),
            o.join("report.json").display().to_string(),
        ]
    };
    ok(&args(&out).iter().map(String::as_str).collect::<Vec<_>>());
    let report = manifest(&out.join("report.json"));
    assert_eq!(report["epoch_losses"].as_array().unwrap().len(), 2);
    let enc = lungforge::contrastive::EncoderParams::load(out.join("encoder.enc")).unwrap();
    assert_eq!(enc.spec.channels, vec![4, 8]);

    let first = snapshot(&out);
    std::fs::remove_dir_all(&out).unwrap();
    ok(&args(&out).iter().map(String::as_str).collect::<Vec<_>>());
    assert_eq!(snapshot(&out), first);
}

const TINY_SPEC: &str = r#"
seeds = [3]
few_shot_fractions = [0.5, 1.0]

[data]
id_count = 20
ood_count = 20
unlabeled_count = 4
ood = ["phantom:B"]

[encoder]
channels = [4, 8]
input_side = 32

[dce]
epochs = 1

[dce.unet]
base_channels = 4

[pretrain]
epochs = 1
batch_size = 4
force = true

[classifier]
steps = 20

[few_shot]
steps = 10
"#;

#[test]
fn evaluate_writes_table_shaped_report_and_is_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let spec = tmp.path().join("spec.toml");
    std::fs::write(&spec, TINY_SPEC).unwrap();
    let out = tmp.path().join("report");
    ok(&["evaluate", "--spec", s(&spec), "--out", s(&out)]);
    let report = manifest(&out.join("report.json"));
    let rows = report["rows"].as_array().unwrap();
    assert_eq!(rows.len(), 4);
    for row in rows {
        assert!(row["in_distribution"]["mean"].is_number());
        let ood = &row["ood"][0];
        assert_eq!(ood["domain"], "B");
        assert!(ood["ood_zero"]["mean"].is_number());
        assert_eq!(ood["ood_fraction"].as_array().unwrap().len(), 2);
    }
    assert_eq!(report["std_over"], "seeds");
    let csv = std::fs::read_to_string(out.join("few_shot.csv")).unwrap();
    assert!(csv.starts_with("variant,domain,fraction,auc_mean,auc_std,seeds"));
    let m = manifest(&out.join("manifest.json"));
    assert_eq!(m["config_hash"].as_str().unwrap().len(), 64);
    assert_eq!(m["seeds"], serde_json::json!([3]));
    assert!(out.join("runs/scc-seed3.json").is_file());

    let first = snapshot(&out);
    std::fs::remove_dir_all(&out).unwrap();
    ok(&["evaluate", "--spec", s(&spec), "--out", s(&out)]);
    assert_eq!(snapshot(&out), first);
}

#[test]
fn evaluate_spec_violation_exits_2() {
    let tmp = tempfile::tempdir().unwrap();
    let spec = tmp.path().join("bad.toml");
    std::fs::write(&spec, "few_shot_fractions = [0.5, 0.1]\n").unwrap();
    let out = lungforge(&["evaluate", "--spec", s(&spec), "--out", s(&tmp.path().join("o"))]);
    assert_eq!(code(&out), 2);
    let stock = String::from_utf8(ok(&["evaluate", "--print-spec"]).stdout).unwrap();
    assert!(stock.contains("variants = [\"baseline\", \"dce\", \"simclr\", \"scc\"]"));
}

#[test]
fn failed_evaluation_leaves_partial_runs_readable() {
    let tmp = tempfile::tempdir().unwrap();
    // an OOD corpus with no positives makes the zero-shot AUC undefined,
    // after the in-distribution folds have been stored
    let negatives = tmp.path().join("neg");
    phantoms(&negatives, 12, 4, "C", 0.0);
    let spec = tmp.path().join("spec.toml");
    let text = TINY_SPEC
        .replace("ood = [\"phantom:B\"]", &format!("ood = [\"dir:{}\"]", negatives.display()))
        .replace("seeds = [3]", "seeds = [3]\nvariants = [\"baseline\"]");
    std::fs::write(&spec, text).unwrap();
    let out = tmp.path().join("o");
    let res = lungforge(&["evaluate", "--spec", s(&spec), "--out", s(&out)]);
    assert_eq!(code(&res), 2, "{}", String::from_utf8_lossy(&res.stderr));
    let partial = manifest(&out.join("runs/baseline-seed3.json"));
    assert_eq!(partial["complete"], false);
    assert_eq!(partial["folds"].as_array().unwrap().len(), 5);
    assert!(manifest(&out.join("manifest.json"))["status"].as_str().unwrap().starts_with("failed"));
    assert!(!out.join("report.json").exists());
}

#[test]
fn hit_rate_counts_points_in_boxes() {
    let tmp = tempfile::tempdir().unwrap();
    let points = tmp.path().join("p.csv");
    let boxes = tmp.path().join("b.csv");
    std::fs::write(&points, "image,x,y\na.png,5,5\nb.png,50,50\nc.png,10,12\n").unwrap();
    std::fs::write(
        &boxes,
        "image,x_min,y_min,x_max,y_max,category\na.png,0,0,9,9,nodule\nb.png,0,0,9,9,nodule\nc.png,10,10,20,20,effusion\n",
    )
    .unwrap();
    let out = tmp.path().join("hits.json");
    ok(&["hit-rate", "--points", s(&points), "--boxes", s(&boxes), "--out", s(&out)]);
    let r = manifest(&out);
    assert!((r["overall"].as_f64().unwrap() - 2.0 / 3.0).abs() < 1e-15);
    assert_eq!(r["by_category"]["nodule"], 0.5);
    assert_eq!(r["by_category"]["effusion"], 1.0);
    std::fs::write(&points, "image,x,y\na.png,5,5\n").unwrap();
    assert_eq!(code(&lungforge(&["hit-rate", "--points", s(&points), "--boxes", s(&boxes), "--out", s(&out)])), 2);
}
