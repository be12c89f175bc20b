//! End-to-end behavior of the command-line interface: output layout, seeds,
//! config precedence, error contracts.

use std::path::{Path, PathBuf};
use std::process::Command;

fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_ecdiff")
}

fn run(args: &[&str]) -> std::process::Output {
    Command::new(bin()).args(args).output().expect("failed to launch ecdiff")
}

fn assert_success(out: &std::process::Output) {
    assert!(
        out.status.success(),
        "command failed\nstdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn tempdir() -> tempfile::TempDir {
    tempfile::tempdir().unwrap()
}

fn synth_small(dir: &Path, seed: &str) {
    let out = run(&[
        "--seed",
        seed,
        "--out",
        dir.to_str().unwrap(),
        "synth",
        "--n-rois",
        "6",
        "--length",
        "32",
        "--subjects-per-class",
        "5",
        "--classes",
        "2",
    ]);
    assert_success(&out);
}

fn read(path: &Path) -> Vec<u8> {
    std::fs::read(path).unwrap_or_else(|e| panic!("cannot read {}: {}", path.display(), e))
}

#[test]
fn synth_creates_class_directories_and_is_seed_reproducible() {
    let d1 = tempdir();
    let d2 = tempdir();
    synth_small(d1.path(), "123");
    synth_small(d2.path(), "123");
    assert!(d1.path().join("c0").is_dir());
    assert!(d1.path().join("c1").is_dir());
    assert!(d1.path().join("manifest.csv").is_file());
    // identical bytes for every data file
    assert_eq!(read(&d1.path().join("manifest.csv")), read(&d2.path().join("manifest.csv")));
    for entry in std::fs::read_dir(d1.path().join("c0")).unwrap() {
        let p1 = entry.unwrap().path();
        let p2 = d2.path().join("c0").join(p1.file_name().unwrap());
        assert_eq!(read(&p1), read(&p2), "mismatch for {}", p1.display());
    }
}

#[test]
fn synth_density_zero_writes_zero_connectivity() {
    let d = tempdir();
    let out = run(&[
        "--seed",
        "7",
        "--out",
        d.path().to_str().unwrap(),
        "synth",
        "--n-rois",
        "5",
        "--length",
        "24",
        "--subjects-per-class",
        "2",
        "--classes",
        "1",
        "--density",
        "0",
    ]);
    assert_success(&out);
    for entry in std::fs::read_dir(d.path().join("c0")).unwrap() {
        let p = entry.unwrap().path();
        if p.file_name().unwrap().to_string_lossy().starts_with("truebec_") {
            let text = std::fs::read_to_string(&p).unwrap();
            for tok in text.split([',', '\n']).filter(|s| !s.is_empty()) {
                assert_eq!(tok.parse::<f64>().unwrap(), 0.0);
            }
        }
    }
}

#[test]
fn extract_discards_leading_volumes_and_validates_dims() {
    use ndarray::{Array3, Array4};
    let d = tempdir();
    let vol_path = d.path().join("vol.nii");
    let atlas_path = d.path().join("atlas.nii");
    // 197 time points so ten discards leave 187
    let mut vol = Array4::<f64>::zeros((3, 2, 1, 197));
    for (i, v) in vol.iter_mut().enumerate() {
        *v = (i % 31) as f64 * 0.1;
    }
    let mut atlas = Array3::<f64>::zeros((3, 2, 1));
    atlas[[0, 0, 0]] = 1.0;
    atlas[[1, 0, 0]] = 2.0;
    atlas[[2, 1, 0]] = 2.0;
    nifti::writer::WriterOptions::new(&vol_path).write_nifti(&vol).unwrap();
    nifti::writer::WriterOptions::new(&atlas_path).write_nifti(&atlas).unwrap();

    let out_dir = d.path().join("extracted");
    let out = run(&[
        "--out",
        out_dir.to_str().unwrap(),
        "extract",
        "--volume",
        vol_path.to_str().unwrap(),
        "--atlas",
        atlas_path.to_str().unwrap(),
        "--discard",
        "10",
    ]);
    assert_success(&out);
    let series = ecdiff::ingest::read_matrix_csv(&out_dir.join("series.csv")).unwrap();
    assert_eq!(series.dim(), (2, 187));

    // mismatched dims produce a named validation error with exit code 2
    let bad_atlas = d.path().join("bad_atlas.nii");
    let small = Array3::<f64>::from_elem((2, 2, 1), 1.0);
    nifti::writer::WriterOptions::new(&bad_atlas).write_nifti(&small).unwrap();
    let out = run(&[
        "--out",
        out_dir.to_str().unwrap(),
        "extract",
        "--volume",
        vol_path.to_str().unwrap(),
        "--atlas",
        bad_atlas.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("atlas"));
}

#[test]
fn extract_matches_brute_force_on_toy_volume() {
    use ndarray::{Array3, Array4};
    let d = tempdir();
    let vol_path = d.path().join("vol.nii");
    let atlas_path = d.path().join("atlas.nii");
    let mut vol = Array4::<f64>::zeros((2, 1, 1, 3));
    vol[[0, 0, 0, 0]] = 1.0;
    vol[[1, 0, 0, 0]] = 3.0;
    vol[[0, 0, 0, 1]] = 5.0;
    vol[[1, 0, 0, 1]] = 7.0;
    vol[[0, 0, 0, 2]] = -1.0;
    vol[[1, 0, 0, 2]] = 2.0;
    let atlas = Array3::<f64>::from_elem((2, 1, 1), 1.0);
    nifti::writer::WriterOptions::new(&vol_path).write_nifti(&vol).unwrap();
    nifti::writer::WriterOptions::new(&atlas_path).write_nifti(&atlas).unwrap();
    let out_dir = d.path().join("x");
    let out = run(&[
        "--out",
        out_dir.to_str().unwrap(),
        "extract",
        "--volume",
        vol_path.to_str().unwrap(),
        "--atlas",
        atlas_path.to_str().unwrap(),
        "--discard",
        "0",
    ]);
    assert_success(&out);
    let series = ecdiff::ingest::read_matrix_csv(&out_dir.join("series.csv")).unwrap();
    assert_eq!(series.dim(), (1, 3));
    assert_eq!(series[[0, 0]], 2.0);
    assert_eq!(series[[0, 1]], 6.0);
    assert_eq!(series[[0, 2]], 0.5);
}

fn quick_train(data: &Path, run_dir: &Path, extra: &[&str]) -> std::process::Output {
    let mut args = vec![
        "--seed",
        "21",
        "--out",
        run_dir.to_str().unwrap(),
        "train",
        "--manifest",
    ];
    let manifest = data.join("manifest.csv");
    let manifest_str = manifest.to_str().unwrap().to_string();
    args.push(Box::leak(manifest_str.into_boxed_str()));
    args.extend([
        "--epochs",
        "2",
        "--batch-size",
        "5",
        "--t-total",
        "8",
        "--stride",
        "4",
        "--levels",
        "1",
    ]);
    args.extend(extra);
    run(&args)
}

#[test]
fn train_sample_evaluate_pipeline_produces_expected_files() {
    let data = tempdir();
    synth_small(data.path(), "3");
    let run_dir = tempdir();
    let out = quick_train(data.path(), run_dir.path(), &[]);
    assert_success(&out);
    assert!(run_dir.path().join("config.toml").is_file());
    assert!(run_dir.path().join("metrics.jsonl").is_file());
    assert!(run_dir.path().join("checkpoint.bin").is_file());
    assert!(run_dir.path().join("run_manifest.json").is_file());

    // sampling with several draws also writes the spread files
    let samp = tempdir();
    let out = run(&[
        "--seed",
        "5",
        "--out",
        samp.path().to_str().unwrap(),
        "sample",
        "--checkpoint",
        run_dir.path().join("checkpoint.bin").to_str().unwrap(),
        "--manifest",
        data.path().join("manifest.csv").to_str().unwrap(),
        "--n-samples",
        "5",
    ]);
    assert_success(&out);
    let bec = ecdiff::ingest::read_matrix_csv(&samp.path().join("bec_c0s000.csv")).unwrap();
    assert_eq!(bec.dim(), (6, 6));
    for i in 0..6 {
        assert_eq!(bec[[i, i]], 0.0, "sampled connectivity must have a zero diagonal");
    }
    assert!(samp.path().join("bec_std_c0s000.csv").is_file());

    // evaluation emits metrics for every class pair and bounded rankings
    let eval = tempdir();
    let out = run(&[
        "--seed",
        "5",
        "--out",
        eval.path().to_str().unwrap(),
        "evaluate",
        "--manifest",
        data.path().join("manifest.csv").to_str().unwrap(),
        "--bec-dir",
        samp.path().to_str().unwrap(),
        "--top-k",
        "10",
    ]);
    assert_success(&out);
    let metrics: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(eval.path().join("metrics.json")).unwrap())
            .unwrap();
    assert!(metrics.get("c0_vs_c1").is_some());
    let tops: serde_json::Value = serde_json::from_str(
        &std::fs::read_to_string(eval.path().join("top_connections.json")).unwrap(),
    )
    .unwrap();
    let pair = tops.get("c0_vs_c1").unwrap();
    assert!(pair["enhanced"].as_array().unwrap().len() <= 10);
    assert!(pair["diminished"].as_array().unwrap().len() <= 10);
    assert!(eval.path().join("bec_avg_c0.csv").is_file());
    assert!(eval.path().join("bec_avg_c1.csv").is_file());
    assert!(eval.path().join("delta_c0_c1.csv").is_file());
    assert!(eval.path().join("roi_importance.csv").is_file());

    // rerunning evaluation reproduces identical bytes
    let eval2 = tempdir();
    let out = run(&[
        "--seed",
        "5",
        "--out",
        eval2.path().to_str().unwrap(),
        "evaluate",
        "--manifest",
        data.path().join("manifest.csv").to_str().unwrap(),
        "--bec-dir",
        samp.path().to_str().unwrap(),
    ]);
    assert_success(&out);
    assert_eq!(
        read(&eval.path().join("metrics.json")),
        read(&eval2.path().join("metrics.json"))
    );
}

#[test]
fn train_resume_reproduces_continued_losses() {
    let data = tempdir();
    synth_small(data.path(), "3");

    // one uninterrupted 4-epoch run
    let full = tempdir();
    let out = quick_train(data.path(), full.path(), &["--checkpoint-every", "0"]);
    assert_success(&out);
    let full4 = tempdir();
    let manifest = data.path().join("manifest.csv");
    let out = run(&[
        "--seed",
        "21",
        "--out",
        full4.path().to_str().unwrap(),
        "train",
        "--manifest",
        manifest.to_str().unwrap(),
        "--epochs",
        "4",
        "--batch-size",
        "5",
        "--t-total",
        "8",
        "--stride",
        "4",
        "--levels",
        "1",
    ]);
    assert_success(&out);

    // resume the 2-epoch run to 4 epochs
    let resumed = tempdir();
    let out = run(&[
        "--out",
        resumed.path().to_str().unwrap(),
        "train",
        "--manifest",
        manifest.to_str().unwrap(),
        "--resume",
        full.path().join("checkpoint.bin").to_str().unwrap(),
        "--epochs",
        "4",
    ]);
    assert_success(&out);

    // epochs 3 and 4 of the uninterrupted run match the resumed run
    let read_lines = |p: PathBuf| -> Vec<String> {
        std::fs::read_to_string(p).unwrap().lines().map(|s| s.to_string()).collect()
    };
    let full_lines = read_lines(full4.path().join("metrics.jsonl"));
    let resumed_lines = read_lines(resumed.path().join("metrics.jsonl"));
    assert_eq!(full_lines[2..4], resumed_lines[..]);
}

#[test]
fn invalid_ablation_combination_is_rejected() {
    let data = tempdir();
    synth_small(data.path(), "3");
    let run_dir = tempdir();
    let out = quick_train(
        data.path(),
        run_dir.path(),
        &["--no-sma", "--no-tma", "--sete-as-conv"],
    );
    assert_eq!(out.status.code(), Some(2));
    let msg = String::from_utf8_lossy(&out.stderr);
    assert!(msg.contains("sete_as_conv"), "unhelpful error: {}", msg);
}

#[test]
fn config_precedence_defaults_file_flags() {
    let data = tempdir();
    synth_small(data.path(), "3");
    let d = tempdir();
    // file sets epochs=3 and gamma=0.5 over defaults (100, 1.9)
    let cfg_path = d.path().join("cfg.toml");
    std::fs::write(
        &cfg_path,
        "epochs = 3\ngamma = 0.5\nt_total = 8\nstride = 4\nlevels = 1\nblocks_per_level = [2]\nbatch_size = 5\n",
    )
    .unwrap();
    // flag overrides epochs to 1; gamma stays from file
    let run_dir = tempdir();
    let out = run(&[
        "--seed",
        "21",
        "--config",
        cfg_path.to_str().unwrap(),
        "--out",
        run_dir.path().to_str().unwrap(),
        "train",
        "--manifest",
        data.path().join("manifest.csv").to_str().unwrap(),
        "--epochs",
        "1",
    ]);
    assert_success(&out);
    let echo = std::fs::read_to_string(run_dir.path().join("config.toml")).unwrap();
    assert!(echo.contains("epochs = 1"), "flag should win: {}", echo);
    assert!(echo.contains("gamma = 0.5"), "file should beat default: {}", echo);
    assert!(echo.contains("lambda_rec = 10.0"), "default should remain: {}", echo);
    let lines = std::fs::read_to_string(run_dir.path().join("metrics.jsonl")).unwrap();
    assert_eq!(lines.lines().count(), 1, "exactly one epoch should have run");
}

#[test]
fn missing_manifest_exits_with_validation_code() {
    let run_dir = tempdir();
    let out = run(&[
        "--out",
        run_dir.path().to_str().unwrap(),
        "train",
        "--manifest",
        "/nonexistent/manifest.csv",
    ]);
    assert_eq!(out.status.code(), Some(2));
}
