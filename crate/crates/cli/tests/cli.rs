use std::path::Path;
use std::process::{Command, Output};

use dehaze_core::datasets::Manifest;
use dehaze_core::imagecore::{load_image, save_image, Image};
use dehaze_core::metrics::psnr;

fn dehaze(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dehaze"))
        .args(args)
        .env_remove("DEHAZE_CONFIG")
        .output()
        .expect("spawn dehaze")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn help_exits_zero_for_every_subcommand() {
    assert_eq!(dehaze(&["--help"]).status.code(), Some(0));
    for sub in ["synth", "train", "dehaze", "eval", "bench", "params", "gradcheck"] {
        let o = dehaze(&[sub, "--help"]);
        assert_eq!(o.status.code(), Some(0), "{sub}");
        assert!(stdout(&o).contains("--seed"), "{sub} help lists the global flags");
    }
    let synth = stdout(&dehaze(&["synth", "--help"]));
    for flag in ["--clean", "--depth", "--out", "--variations", "--procedural", "--config"] {
        assert!(synth.contains(flag), "{flag}");
    }
}

#[test]
fn usage_errors_exit_two() {
    assert_eq!(dehaze(&["params", "--bogus"]).status.code(), Some(2));
    assert_eq!(dehaze(&[]).status.code(), Some(2));
    assert_eq!(dehaze(&["params", "--model", "huge"]).status.code(), Some(2));
    assert_eq!(dehaze(&["eval", "--checkpoint", "x.fdhz"]).status.code(), Some(2));
}

#[test]
fn synth_missing_depth_dir_exits_two_and_names_it() {
    let dir = tempfile::tempdir().unwrap();
    let clean = dir.path().join("clean");
    std::fs::create_dir(&clean).unwrap();
    let missing = dir.path().join("no_such_depth");
    let o = dehaze(&["synth", "--clean", p(&clean), "--depth", p(&missing), "--out", p(&dir.path().join("out"))]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("no_such_depth"));
}

#[test]
fn synth_defaults_to_four_variations() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("ds");
    let o = dehaze(&["synth", "--procedural", "3", "--size", "32x32", "--out", p(&out)]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).starts_with("12 records"));
    let m = Manifest::read(out.join("manifest.jsonl")).unwrap();
    assert_eq!(m.records.len(), 12);
    let mut per_scene = std::collections::BTreeMap::new();
    for r in &m.records {
        *per_scene.entry(r.scene.clone()).or_insert(0) += 1;
    }
    assert!(per_scene.values().all(|&n| n == 4));
}

#[test]
fn synth_is_deterministic_under_seed() {
    let dir = tempfile::tempdir().unwrap();
    let run = |name: &str| {
        let out = dir.path().join(name);
        let o = dehaze(&["--seed", "9", "synth", "--procedural", "2", "--size", "32x32", "--out", p(&out)]);
        assert_eq!(o.status.code(), Some(0));
        std::fs::read_to_string(out.join("manifest.jsonl")).unwrap()
    };
    assert_eq!(run("a"), run("b"));
}

#[test]
fn params_small_prints_total_and_reference_delta() {
    let o = dehaze(&["params", "--model", "small"]);
    assert_eq!(o.status.code(), Some(0));
    let text = stdout(&o);
    let total = text.lines().find(|l| l.starts_with("total")).expect("total line");
    assert!(total.ends_with("11,546,275"), "{total}");
    let reference = text.lines().find(|l| l.starts_with("reference")).expect("reference line");
    assert_eq!(reference, "reference 11,554,167 (delta -7892, -0.07%)");
    assert!(text.lines().any(|l| l.starts_with("trunk.encoder")));
}

fn gray_image(v: f32) -> Image<f32> {
    Image::filled(16, 16, 3, v).unwrap()
}

#[test]
fn eval_pairs_golden_row() {
    let dir = tempfile::tempdir().unwrap();
    let (pred, truth) = (dir.path().join("pred"), dir.path().join("truth"));
    std::fs::create_dir(&pred).unwrap();
    std::fs::create_dir(&truth).unwrap();
    // One identical pair and one pair off by 51/255 = 0.2: PSNR 20log10(5) = 13.98 dB.
    save_image(&gray_image(0.4), pred.join("a.png")).unwrap();
    save_image(&gray_image(0.4), truth.join("a.png")).unwrap();
    save_image(&gray_image(0.6), pred.join("b.png")).unwrap();
    save_image(&gray_image(0.4), truth.join("b.png")).unwrap();
    let o = dehaze(&["eval", "--pairs", p(&pred), p(&truth)]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let text = stdout(&o);
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("Model\tPSNR\tSSIM\tParameters"));
    let row: Vec<&str> = lines.next().unwrap().split('\t').collect();
    assert_eq!(row[0], "-");
    assert_eq!(row[1], "13.98");
    assert_eq!(row[3], "-");
    assert_eq!(row[2].len(), 6, "four decimals");
    assert!(lines.next().is_none());
}

#[test]
fn gradcheck_passes_on_toy_graph() {
    let o = dehaze(&["gradcheck"]);
    assert_eq!(o.status.code(), Some(0), "{}", stdout(&o));
    assert!(stdout(&o).starts_with("grad check: PASS"));
}

#[test]
fn train_then_dehaze_improves_psnr() {
    let dir = tempfile::tempdir().unwrap();
    let ds = dir.path().join("ds");
    let run = dir.path().join("run");
    let out = dir.path().join("out");
    let o = dehaze(&["--seed", "3", "synth", "--procedural", "1", "--variations", "1", "--out", p(&ds)]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let manifest = ds.join("manifest.jsonl");
    let o = dehaze(&["--seed", "3", "train", "--data", p(&manifest), "--out", p(&run), "--epochs", "200", "--patience", "200"]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    for f in ["final.fdhz", "best_loss.fdhz", "best_ssim.fdhz", "history.jsonl"] {
        assert!(run.join(f).is_file(), "{f}");
    }

    let m = Manifest::read(&manifest).unwrap();
    let rec = &m.records[0];
    let hazy_path = ds.join(&rec.hazy);
    let o = dehaze(&["dehaze", "--checkpoint", p(&run.join("final.fdhz")), "--out", p(&out), p(&hazy_path)]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));

    let stem = hazy_path.file_stem().unwrap().to_str().unwrap();
    let clean = load_image::<f32>(ds.join(&rec.clean)).unwrap();
    let hazy = load_image::<f32>(&hazy_path).unwrap();
    let restored = load_image::<f32>(out.join(format!("{stem}_dehazed.png"))).unwrap();
    let compare = load_image::<f32>(out.join(format!("{stem}_compare.png"))).unwrap();
    assert_eq!(compare.width(), 2 * hazy.width());
    let before = psnr(&hazy, &clean, 1.0).unwrap().finite().unwrap();
    let after = psnr(&restored, &clean, 1.0).unwrap().finite().unwrap();
    assert!(after > before + 3.0, "hazy {before:.2} dB, dehazed {after:.2} dB");

    // Same flags, same checkpoint bytes.
    let run2 = dir.path().join("run2");
    let o = dehaze(&["--seed", "3", "train", "--data", p(&manifest), "--out", p(&run2), "--epochs", "5"]);
    assert_eq!(o.status.code(), Some(0));
    let run3 = dir.path().join("run3");
    dehaze(&["--seed", "3", "train", "--data", p(&manifest), "--out", p(&run3), "--epochs", "5"]);
    assert_eq!(std::fs::read(run2.join("final.fdhz")).unwrap(), std::fs::read(run3.join("final.fdhz")).unwrap());
}

#[test]
fn config_file_values_apply_and_flags_win() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("dehaze.toml");
    std::fs::write(&cfg, "[synth]\nvariations = 2\n\n[model]\npreset = \"toy\"\n").unwrap();
    let out = dir.path().join("a");
    let o = dehaze(&["--config", p(&cfg), "synth", "--procedural", "1", "--size", "32x32", "--out", p(&out)]);
    assert!(stdout(&o).starts_with("2 records"), "{}", stdout(&o));
    let out = dir.path().join("b");
    let o = dehaze(&["--config", p(&cfg), "synth", "--procedural", "1", "--size", "32x32", "--variations", "3", "--out", p(&out)]);
    assert!(stdout(&o).starts_with("3 records"));
    let o = dehaze(&["--config", p(&cfg), "params"]);
    assert!(stdout(&o).lines().any(|l| l.starts_with("total") && l.ends_with("107,539")), "{}", stdout(&o));

    std::fs::write(&cfg, "[synth]\nvariatons = 2\n").unwrap();
    let o = dehaze(&["--config", p(&cfg), "params"]);
    assert_eq!(o.status.code(), Some(2), "unknown config keys are rejected");
}
