use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn algm(args: &[&str], config: &Path, out: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_algm"))
        .args(args)
        .arg("--config")
        .arg(config)
        .arg("--out")
        .arg(out)
        .output()
        .expect("binary runs")
}

fn write_config(dir: &Path, body: &str) -> PathBuf {
    let p = dir.join("config.json");
    std::fs::write(&p, body).unwrap();
    p
}

const SMALL: &str = r#"{
  "model": {"image_h": 32, "image_w": 32, "patch_size": 4, "depth": 3, "dim": 16, "heads": 2,
            "gbm_layers": [2], "num_classes": 3, "tau_clap": 0.2, "tau_gbm": 0.2},
  "weights": {"random": true, "seed": 3},
  "data": {"synthetic": {"seed": 1, "n_images": 2, "classes": 3, "noise": 0.05}}
}"#;

fn ok(o: &Output) -> String {
    assert!(o.status.success(), "failed: {}", String::from_utf8_lossy(&o.stderr));
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[test]
fn init_is_byte_identical_for_the_same_seed() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL);
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    std::fs::create_dir(&a).unwrap();
    std::fs::create_dir(&b).unwrap();
    ok(&algm(&["init"], &cfg, &a));
    ok(&algm(&["init"], &cfg, &b));
    let wa = std::fs::read(a.join("weights.tmw")).unwrap();
    assert_eq!(&wa[..4], b"TMW1");
    assert_eq!(wa, std::fs::read(b.join("weights.tmw")).unwrap());
}

#[test]
fn missing_out_dir_is_an_io_error_naming_the_path() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL);
    let missing = dir.path().join("nope");
    let o = algm(&["init"], &cfg, &missing);
    assert_eq!(o.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&o.stderr).contains("nope"));
}

#[test]
fn inventory_lists_every_layer() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        r#"{"model": {"image_h": 64, "image_w": 64, "patch_size": 16, "depth": 12, "dim": 384, "heads": 6,
            "gbm_layers": [5], "num_classes": 4}}"#,
    );
    let stdout = ok(&algm(&["init"], &cfg, dir.path()));
    for i in 1..=12 {
        assert!(stdout.contains(&format!("layer{i}.mlp.fc2.w")), "layer {i} missing");
    }
    assert!(!stdout.contains("layer13."));
    assert!(stdout.contains("12 layers"));
}

#[test]
fn weights_flag_loads_the_written_file() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL);
    ok(&algm(&["init"], &cfg, dir.path()));
    let w = dir.path().join("weights.tmw");
    let a = dir.path().join("a");
    std::fs::create_dir(&a).unwrap();
    ok(&algm(&["run", "--weights", w.to_str().unwrap()], &cfg, &a));
    ok(&algm(&["run"], &cfg, dir.path()));
    assert_eq!(std::fs::read(a.join("pred_000.pgm")).unwrap(), std::fs::read(dir.path().join("pred_000.pgm")).unwrap());
}

#[test]
fn baseline_and_unreachable_threshold_predict_identically() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL);
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    std::fs::create_dir(&a).unwrap();
    std::fs::create_dir(&b).unwrap();
    ok(&algm(&["run", "--mode", "baseline"], &cfg, &a));
    let stdout = ok(&algm(&["run", "--mode", "algm", "--tau", "1.01"], &cfg, &b));
    assert!(stdout.contains("N 64 -> N' 64 -> N'' 64"), "{stdout}");
    for i in 0..2 {
        let name = format!("pred_{i:03}.pgm");
        assert_eq!(std::fs::read(a.join(&name)).unwrap(), std::fs::read(b.join(&name)).unwrap());
    }
}

#[test]
fn run_prints_a_shrinking_schedule_and_writes_reports() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL);
    let stdout = ok(&algm(&["run", "--tau", "-1"], &cfg, dir.path()));
    assert!(stdout.contains("N 64 -> N' 16 -> N'' 8"), "{stdout}");
    let schedule = std::fs::read_to_string(dir.path().join("schedule.csv")).unwrap();
    assert_eq!(schedule.lines().next(), Some("image_id,layer,tokens_mhsa,tokens_mlp,tokens_out"));
    assert_eq!(schedule.lines().nth(1), Some("0,1,64,16,16"));
    let flops: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(dir.path().join("flops.json")).unwrap()).unwrap();
    assert_eq!(flops["per_image"].as_array().unwrap().len(), 2);
    assert!(flops["per_image"][0]["total_macs"].as_u64() < flops["baseline"]["total_macs"].as_u64());
}

#[test]
fn random_pick_is_reproducible_for_a_seed() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL);
    let outs: Vec<PathBuf> = (0..2).map(|i| dir.path().join(format!("o{i}"))).collect();
    for o in &outs {
        std::fs::create_dir(o).unwrap();
        ok(&algm(&["run", "--merge-op", "random_pick", "--seed", "7", "--tau", "0.0"], &cfg, o));
    }
    for name in ["pred_000.pgm", "pred_001.pgm", "schedule.csv", "flops.json"] {
        assert_eq!(std::fs::read(outs[0].join(name)).unwrap(), std::fs::read(outs[1].join(name)).unwrap(), "{name}");
    }
}

#[test]
fn config_errors_report_the_json_path() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &SMALL.replace("\"gbm_layers\": [2]", "\"gbm_layers\": [2, 9]"));
    let o = algm(&["run"], &cfg, dir.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("model.gbm_layers[1]"));

    let cfg = write_config(dir.path(), &SMALL.replace("\"noise\": 0.05", "\"noise\": \"loud\""));
    let o = algm(&["run"], &cfg, dir.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("data.synthetic.noise"));
    assert!(!dir.path().join("pred_000.pgm").exists());
}

#[test]
fn auto_threshold_needs_calibration() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &SMALL.replace(", \"tau_clap\": 0.2, \"tau_gbm\": 0.2", ""));
    let o = algm(&["run"], &cfg, dir.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("model.tau_clap"));
    ok(&algm(&["calibrate"], &cfg, dir.path()));
    let cal = dir.path().join("calibration.json");
    ok(&algm(&["run", "--calibration", cal.to_str().unwrap()], &cfg, dir.path()));
}

#[test]
fn mismatched_weights_are_a_shape_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL);
    ok(&algm(&["init"], &cfg, dir.path()));
    let other = write_config(dir.path(), &SMALL.replace("\"dim\": 16", "\"dim\": 8"));
    let w = dir.path().join("weights.tmw");
    let o = algm(&["run", "--weights", w.to_str().unwrap()], &other, dir.path());
    assert_eq!(o.status.code(), Some(4), "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn ppm_directory_input() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("imgs");
    std::fs::create_dir(&data).unwrap();
    for (i, shade) in [40u8, 200].into_iter().enumerate() {
        let mut bytes = b"P6\n32 32\n255\n".to_vec();
        bytes.extend((0..32 * 32 * 3).map(|j| shade.wrapping_add((j % 7) as u8)));
        std::fs::write(data.join(format!("img{i}.ppm")), bytes).unwrap();
        let mut labels = b"P5\n32 32\n255\n".to_vec();
        labels.extend((0..32 * 32).map(|j| ((j % 32) / 16) as u8));
        std::fs::write(data.join(format!("img{i}.pgm")), labels).unwrap();
    }
    let body = SMALL.replace(
        r#"{"synthetic": {"seed": 1, "n_images": 2, "classes": 3, "noise": 0.05}}"#,
        r#"{"ppm": {"dir": "imgs"}}"#,
    );
    let cfg = write_config(dir.path(), &body);
    ok(&algm(&["run"], &cfg, dir.path()));
    assert!(dir.path().join("pred_001.pgm").exists());
    ok(&algm(&["analyze", "--windows", "2,4"], &cfg, dir.path()));
    let local = std::fs::read_to_string(dir.path().join("local_similarity.csv")).unwrap();
    assert_eq!(local.lines().count(), 3);
}

#[test]
fn sweep_and_bench_write_their_tables() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL);
    ok(&algm(&["sweep", "--taus", "1.01,0.5,-1", "--floor", "0.99"], &cfg, dir.path()));
    let sweep = std::fs::read_to_string(dir.path().join("sweep.csv")).unwrap();
    let lines: Vec<&str> = sweep.lines().collect();
    assert_eq!(lines[0], "tau,fidelity,mse,gflops,tokens_final");
    assert!(lines[1].starts_with("1.01000000e0,1.00000000e0,"), "{}", lines[1]);
    assert_eq!(lines.len(), 4);

    let o = algm(&["sweep", "--taus", "0.5,0.9"], &cfg, dir.path());
    assert_eq!(o.status.code(), Some(2));

    ok(&algm(&["bench", "--batch", "2", "--warmup", "1", "--iters", "1", "--mode", "algm"], &cfg, dir.path()));
    let bench = std::fs::read_to_string(dir.path().join("bench.csv")).unwrap();
    assert_eq!(bench.lines().next(), Some("image_id,im_per_sec,n_prime,n_dprime"));
    assert_eq!(bench.lines().count(), 3);
    let meta: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(dir.path().join("bench.json")).unwrap()).unwrap();
    assert!(meta["hardware"]["available_parallelism"].as_u64().unwrap() >= 1);
}
