use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn y12(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_y12")).args(args).output().expect("spawn y12")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8(o.stderr.clone()).unwrap()
}

fn csv_rows(text: &str) -> Vec<Vec<String>> {
    text.lines().skip(1).map(|l| l.split(',').map(str::to_string).collect()).collect()
}

#[test]
fn describe_json_is_one_document_with_increasing_totals() {
    let o = y12(&["describe", "--format", "json"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let v: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    let rows = v["variants"].as_array().unwrap();
    assert_eq!(rows.len(), 4);
    let names: Vec<&str> = rows.iter().map(|r| r["variant"].as_str().unwrap()).collect();
    assert_eq!(names, ["12n", "12s", "12m", "12x"]);
    for w in rows.windows(2) {
        assert!(w[0]["params"].as_u64() < w[1]["params"].as_u64());
        assert!(w[0]["flops"].as_u64() < w[1]["flops"].as_u64());
    }
    for r in rows {
        let sum: u64 = r["modules"].as_array().unwrap().iter().map(|m| m["params"].as_u64().unwrap()).sum();
        assert_eq!(Some(sum), r["params"].as_u64());
    }
}

#[test]
fn describe_csv_totals_match_modules() {
    let o = y12(&["describe", "--format", "csv"]);
    assert_eq!(code(&o), 0);
    let text = stdout(&o);
    assert!(text.starts_with("variant,module,params,flops\n"));
    let rows = csv_rows(&text);
    for v in ["12n", "12s", "12m", "12x"] {
        let mine: Vec<_> = rows.iter().filter(|r| r[0] == v).collect();
        let (total, parts): (Vec<_>, Vec<_>) = mine.into_iter().partition(|r| r[1] == "total");
        let sum: u64 = parts.iter().map(|r| r[2].parse::<u64>().unwrap()).sum();
        assert_eq!(sum, total[0][2].parse::<u64>().unwrap());
    }
}

#[test]
fn describe_rejects_unknown_variant_naming_the_key() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.cfg");
    fs::write(&cfg, "variant = 12q\n").unwrap();
    let o = y12(&["describe", "--config", cfg.to_str().unwrap()]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("variant"), "{}", stderr(&o));
    assert!(o.stdout.is_empty());
}

#[test]
fn missing_config_file_is_io_error() {
    let o = y12(&["describe", "--config", "/nonexistent/model.cfg"]);
    assert_eq!(code(&o), 3);
}

#[test]
fn bench_area_flops_are_a_quarter_of_naive() {
    let o = y12(&["bench-attn", "--n", "256", "--d", "32", "--L", "4", "--tiles", "32x32"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let rows = csv_rows(&stdout(&o));
    let flops = |k: &str| rows.iter().find(|r| r[0] == k).unwrap()[6].parse::<u64>().unwrap();
    assert_eq!(flops("naive"), 4 * 256 * 256 * 32);
    assert_eq!(flops("area") * 4, flops("naive"));
    assert_eq!(flops("tiled"), flops("area"));
    for r in &rows {
        assert!(r[8].parse::<u64>().unwrap() > 0);
        assert_eq!(r[11], "30");
    }
}

#[test]
fn bench_tiled_scratch_is_independent_of_n() {
    let o = y12(&["bench-attn", "--n", "128,256,512", "--d", "16", "--L", "1", "--tiles", "16x16", "--format", "json"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let v: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    let tiled: Vec<u64> = v["records"]
        .as_array()
        .unwrap()
        .iter()
        .filter(|r| r["kernel"] == "tiled")
        .map(|r| r["peak_scratch_elements"].as_u64().unwrap())
        .collect();
    assert_eq!(tiled.len(), 3);
    assert!(tiled.iter().all(|&s| s == tiled[0]), "{tiled:?}");
    // Br·Bc score tile, Br·d accumulator and three per-row vectors
    assert!(tiled[0] <= (16 * 16 + 16 * 16 + 3 * 16) as u64);
    let keys: Vec<&String> = v["records"][0].as_object().unwrap().keys().collect();
    assert_eq!(keys.len(), 13);
}

#[test]
fn bench_rejects_indivisible_areas_and_few_reps() {
    assert_eq!(code(&y12(&["bench-attn", "--n", "130", "--L", "4"])), 2);
    assert_eq!(code(&y12(&["bench-attn", "--n", "128", "--reps", "10"])), 2);
    assert_eq!(code(&y12(&["bench-attn", "--n", "128", "--tiles", "8by8"])), 2);
}

#[test]
fn bench_corrupt_kernel_emits_no_rows() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("bench.csv");
    let o = y12(&["bench-attn", "--n", "128", "--corrupt-kernel", "--out", out.to_str().unwrap()]);
    assert_eq!(code(&o), 1);
    assert!(o.stdout.is_empty());
    assert!(!out.exists());
}

#[test]
fn bench_svg_is_written() {
    let dir = tempfile::tempdir().unwrap();
    let svg = dir.path().join("b.svg");
    let o = y12(&["bench-attn", "--n", "64,128", "--d", "8", "--svg", svg.to_str().unwrap()]);
    assert_eq!(code(&o), 0);
    let text = fs::read_to_string(svg).unwrap();
    assert!(text.starts_with("<svg") && text.contains("tiled"));
}

#[test]
fn bench_flop_and_scratch_columns_are_deterministic() {
    let strip = |o: &Output| -> Vec<String> { csv_rows(&stdout(o)).into_iter().map(|r| format!("{}|{}|{}", r[0], r[6], r[7])).collect() };
    let a = y12(&["bench-attn", "--n", "64", "--d", "8", "--seed", "3"]);
    let b = y12(&["bench-attn", "--n", "64", "--d", "8", "--seed", "3"]);
    assert_eq!(strip(&a), strip(&b));
}

#[test]
fn threads_zero_is_usage_error() {
    assert_eq!(code(&y12(&["--threads", "0", "describe"])), 2);
}

#[test]
fn gradcheck_passes_and_is_deterministic() {
    let a = y12(&["gradcheck", "--seed", "5"]);
    assert_eq!(code(&a), 0, "{}", stderr(&a));
    let rows = csv_rows(&stdout(&a));
    assert!(rows.len() >= 27);
    for r in &rows {
        assert!(r[1].parse::<f64>().unwrap() <= 1e-4, "{r:?}");
        assert_eq!(r[3], "true");
    }
    assert_eq!(stdout(&a), stdout(&y12(&["gradcheck", "--seed", "5"])));
}

#[test]
fn gradcheck_broken_gradient_names_the_block() {
    let o = y12(&["gradcheck", "--break-grad", "sigmoid"]);
    assert_eq!(code(&o), 1);
    let err = stderr(&o);
    assert!(err.contains("sigmoid") && err.contains("head_loss"), "{err}");
    assert_eq!(code(&y12(&["gradcheck", "--break-grad", "nope"])), 2);
}

fn synth(dir: &Path, count: usize) {
    let o = y12(&["synth", "--dir", dir.to_str().unwrap(), "--count", &count.to_string(), "--seed", "1"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
}

#[test]
fn train_then_eval_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    synth(&data, 6);
    let ckpt = dir.path().join("model.ckpt");
    let metrics = dir.path().join("metrics.jsonl");
    let p = |x: &Path| x.to_str().unwrap().to_string();
    let o = y12(&[
        "train", "--data", &p(&data), "--checkpoint", &p(&ckpt), "--epochs", "2", "--batch-size", "3", "--warmup-steps", "2",
        "--metrics", &p(&metrics),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let lines: Vec<serde_json::Value> = fs::read_to_string(&metrics).unwrap().lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(lines.len(), 2);
    for (i, l) in lines.iter().enumerate() {
        assert_eq!(l["epoch"], i);
        assert!(l["loss"]["total"].as_f64().unwrap().is_finite());
        assert!(l["lr"].as_f64().unwrap() > 0.0);
        assert!(l["wall_ms"].as_f64().unwrap() > 0.0);
    }

    let report = dir.path().join("eval.json");
    let svg = dir.path().join("frontier.svg");
    let o = y12(&[
        "eval", "--data", &p(&data), "--checkpoint", &p(&ckpt), "--out", &p(&report), "--frontier-svg", &p(&svg),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let r: serde_json::Value = serde_json::from_str(&fs::read_to_string(&report).unwrap()).unwrap();
    assert_eq!(r["variant"], "12n");
    assert_eq!(r["latency"]["samples"], 100);
    let lat = &r["latency"];
    assert!(lat["p10_ms"].as_f64() <= lat["median_ms"].as_f64() && lat["median_ms"].as_f64() <= lat["p90_ms"].as_f64());
    let map = r["map50"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&map));
    assert_eq!(r["per_class_ap50"].as_object().unwrap().len(), 3);
    assert!(fs::read_to_string(&svg).unwrap().contains("12n"));

    let o = y12(&["eval", "--data", &p(&data), "--checkpoint", &p(&ckpt), "--latency-samples", "10"]);
    assert_eq!(code(&o), 2);
}

#[test]
fn train_is_deterministic_apart_from_timing() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    synth(&data, 4);
    let run = |tag: &str| -> Vec<serde_json::Value> {
        let ckpt = dir.path().join(format!("{tag}.ckpt"));
        let o = y12(&[
            "train", "--data", data.to_str().unwrap(), "--checkpoint", ckpt.to_str().unwrap(), "--epochs", "2", "--batch-size", "2",
            "--warmup-steps", "2", "--seed", "9",
        ]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
        stdout(&o)
            .lines()
            .map(|l| {
                let mut v: serde_json::Value = serde_json::from_str(l).unwrap();
                v.as_object_mut().unwrap().remove("wall_ms");
                v
            })
            .collect()
    };
    let a = run("a");
    assert_eq!(a, run("b"));
    assert_eq!(fs::read(dir.path().join("a.ckpt")).unwrap(), fs::read(dir.path().join("b.ckpt")).unwrap());
}

#[test]
fn malformed_dataset_is_io_error_naming_the_file() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    synth(&data, 2);
    let label = fs::read_dir(data.join("labels")).unwrap().next().unwrap().unwrap().path();
    fs::write(&label, "0 0.5 0.5 banana 0.1\n").unwrap();
    let ckpt = dir.path().join("m.ckpt");
    let o = y12(&["train", "--data", data.to_str().unwrap(), "--checkpoint", ckpt.to_str().unwrap(), "--epochs", "1"]);
    assert_eq!(code(&o), 3);
    let name = label.file_name().unwrap().to_str().unwrap();
    assert!(stderr(&o).contains(name), "{}", stderr(&o));
}

#[test]
fn incompatible_checkpoint_is_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    synth(&data, 2);
    let ckpt = dir.path().join("m.ckpt");
    let o = y12(&[
        "train", "--data", data.to_str().unwrap(), "--checkpoint", ckpt.to_str().unwrap(), "--epochs", "1", "--warmup-steps", "1",
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let cfg = dir.path().join("s.cfg");
    fs::write(&cfg, "variant = s\n").unwrap();
    let o = y12(&["eval", "--config", cfg.to_str().unwrap(), "--data", data.to_str().unwrap(), "--checkpoint", ckpt.to_str().unwrap()]);
    assert_eq!(code(&o), 2, "{}", stderr(&o));

    fs::write(&ckpt, b"not a checkpoint").unwrap();
    let o = y12(&["eval", "--data", data.to_str().unwrap(), "--checkpoint", ckpt.to_str().unwrap()]);
    assert_eq!(code(&o), 3);
}
