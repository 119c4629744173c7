//! Subcommand implementations.

use crate::bench::{spread, BenchKernel, BenchRecord, Case, MIN_REPS, VERIFY_TOL};
use crate::svg::{Plot, Series};
use crate::{BenchArgs, CmdResult, DescribeArgs, EvalArgs, Failure, Format, GradcheckArgs, SynthArgs, TrainArgs};
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;
use y12_core::autograd::OpKind;
use y12_core::config::Variant;
use y12_core::data::{read_dataset, synth_dataset, write_dataset, SynthConfig, CLASS_NAMES};
use y12_core::gradsuite::{run_suite, TOLERANCE};
use y12_core::train::{evaluate, train as run_training, EvalSettings, TrainSchedule};
use y12_core::{Model, ModelConfig, Tensor};

pub const MIN_LATENCY_SAMPLES: usize = 100;
const LATENCY_WARMUP: usize = 5;

/// Destination of a command's machine-readable result.
pub struct Output {
    path: Option<PathBuf>,
}

impl Output {
    pub fn new(path: Option<PathBuf>) -> Self {
        Self { path }
    }

    pub fn emit(&self, text: &str) -> CmdResult {
        match &self.path {
            Some(p) => write_file(p, text.as_bytes()),
            None => {
                let mut so = std::io::stdout().lock();
                so.write_all(text.as_bytes())?;
                so.flush()?;
                Ok(())
            }
        }
    }
}

fn write_file(path: &Path, bytes: &[u8]) -> CmdResult {
    fs::write(path, bytes).map_err(|e| Failure::Io(format!("{}: {e}", path.display())))
}

fn load_config(path: Option<&Path>) -> CmdResult<ModelConfig> {
    Ok(match path {
        Some(p) => ModelConfig::load(p)?,
        None => ModelConfig::default(),
    })
}

fn to_json<S: Serialize>(value: &S) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("serializable");
    s.push('\n');
    s
}

#[derive(Serialize)]
struct ModuleRow {
    module: String,
    params: u64,
    flops: u64,
}

#[derive(Serialize)]
struct VariantRow {
    variant: String,
    params: u64,
    flops: u64,
    modules: Vec<ModuleRow>,
}

#[derive(Serialize)]
struct Description {
    input_size: usize,
    num_classes: usize,
    area_count: usize,
    variants: Vec<VariantRow>,
}

pub fn describe(args: &DescribeArgs, out: &Output) -> CmdResult {
    let cfg = load_config(args.config.as_deref())?;
    let mut variants = Vec::new();
    for v in Variant::ALL {
        let model = Model::<f32>::build(&cfg.with_variant(v))?;
        let params = model.count_params();
        let flops = model.count_flops(cfg.input_size)?;
        let modules = flops
            .rows
            .iter()
            .map(|(m, f)| ModuleRow { module: m.clone(), params: params.get(m).unwrap_or(0), flops: *f })
            .collect::<Vec<_>>();
        debug_assert_eq!(modules.iter().map(|m| m.params).sum::<u64>(), params.total);
        variants.push(VariantRow { variant: format!("12{}", v.name), params: params.total, flops: flops.total, modules });
    }
    for w in variants.windows(2) {
        if !(w[0].params < w[1].params && w[0].flops < w[1].flops) {
            return Err(Failure::Verification(format!("totals do not increase from {} to {}", w[0].variant, w[1].variant)));
        }
    }
    let text = match args.format {
        Format::Json => to_json(&Description { input_size: cfg.input_size, num_classes: cfg.num_classes, area_count: cfg.area_count, variants }),
        Format::Csv => {
            let mut s = String::from("variant,module,params,flops\n");
            for v in &variants {
                for m in &v.modules {
                    s += &format!("{},{},{},{}\n", v.variant, m.module, m.params, m.flops);
                }
                s += &format!("{},total,{},{}\n", v.variant, v.params, v.flops);
            }
            s
        }
    };
    out.emit(&text)
}

fn parse_tile(s: &str) -> CmdResult<(usize, usize)> {
    let bad = || Failure::Usage(format!("--tiles entry {s:?} is not of the form BRxBC with positive sizes"));
    let (r, c) = s.split_once(['x', 'X']).ok_or_else(bad)?;
    match (r.trim().parse::<usize>(), c.trim().parse::<usize>()) {
        (Ok(r), Ok(c)) if r > 0 && c > 0 => Ok((r, c)),
        _ => Err(bad()),
    }
}

#[derive(Serialize)]
struct BenchReport<'a> {
    records: &'a [BenchRecord],
}

pub fn bench_attn(args: &BenchArgs, seed: u64, out: &Output) -> CmdResult {
    if args.reps < MIN_REPS {
        return Err(Failure::Usage(format!("--reps must be at least {MIN_REPS}, got {}", args.reps)));
    }
    let tiles = args.tiles.iter().map(|t| parse_tile(t)).collect::<CmdResult<Vec<_>>>()?;
    for (name, list) in [("--n", &args.n), ("--d", &args.d), ("--L", &args.areas)] {
        if list.is_empty() || list.contains(&0) {
            return Err(Failure::Usage(format!("{name} needs positive values")));
        }
    }
    for &n in &args.n {
        for &l in &args.areas {
            if n % l != 0 {
                return Err(Failure::Usage(format!("n = {n} is not divisible by L = {l}")));
            }
        }
    }

    let mut cases = Vec::new();
    for &n in &args.n {
        for &d in &args.d {
            for &l in &args.areas {
                for &t in &tiles {
                    cases.push(Case::new(n, d, l, t, seed));
                }
            }
        }
    }
    for c in &cases {
        let err = c.verify(args.corrupt_kernel)?;
        if !(err <= VERIFY_TOL) {
            return Err(Failure::Verification(format!(
                "tiled kernel differs from the reference by {err:.3e} (> {VERIFY_TOL:e}) at n={} d={} L={} tiles={}x{}; no timings recorded",
                c.n, c.d, c.cfg.num_areas, c.cfg.tile_rows, c.cfg.tile_cols
            )));
        }
    }

    let threads = rayon::current_num_threads();
    let mut records = Vec::new();
    let mut naive_done = BTreeSet::new();
    let mut area_done = BTreeSet::new();
    for c in &cases {
        if naive_done.insert((c.n, c.d)) {
            records.push(c.measure(BenchKernel::Naive, args.reps, threads)?);
        }
        if area_done.insert((c.n, c.d, c.cfg.num_areas)) {
            records.push(c.measure(BenchKernel::Area, args.reps, threads)?);
        }
        records.push(c.measure(BenchKernel::Tiled, args.reps, threads)?);
    }

    if let Some(path) = &args.svg {
        let mut groups: BTreeMap<String, Vec<(f64, f64)>> = BTreeMap::new();
        for r in &records {
            let label = match r.kernel {
                BenchKernel::Naive => format!("naive d={}", r.d),
                BenchKernel::Area => format!("area d={} L={}", r.d, r.areas),
                BenchKernel::Tiled => format!("tiled d={} L={} {}x{}", r.d, r.areas, r.tile_rows, r.tile_cols),
            };
            groups.entry(label).or_default().push((r.n as f64, r.wall_ns_median as f64));
        }
        let plot = Plot {
            title: "attention wall time".into(),
            x_label: "tokens n".into(),
            y_label: "median wall time (ns)".into(),
            log_y: true,
            connect: true,
            series: groups.into_iter().map(|(label, points)| Series { label, points }).collect(),
        };
        write_file(path, plot.render().as_bytes())?;
    }

    let text = match args.format {
        Format::Json => to_json(&BenchReport { records: &records }),
        Format::Csv => {
            let mut s = format!("{}\n", BenchRecord::CSV_HEADER);
            for r in &records {
                s += &r.csv_row();
                s.push('\n');
            }
            s
        }
    };
    out.emit(&text)
}

pub fn gradcheck(args: &GradcheckArgs, seed: u64, out: &Output) -> CmdResult {
    let fault = match &args.break_grad {
        Some(name) => Some(OpKind::from_name(name).ok_or_else(|| Failure::Usage(format!("--break-grad: unknown primitive {name:?}")))?),
        None => None,
    };
    let rows = run_suite(seed, fault)?;
    let text = match args.format {
        Format::Json => to_json(&serde_json::json!({ "seed": seed, "tolerance": TOLERANCE, "rows": rows })),
        Format::Csv => {
            let mut s = String::from("name,max_rel_error,coordinates,passed\n");
            for r in &rows {
                s += &format!("{},{:.6e},{},{}\n", r.name, r.max_rel_error, r.coordinates, r.passed);
            }
            s
        }
    };
    out.emit(&text)?;
    let failed: Vec<&str> = rows.iter().filter(|r| !r.passed).map(|r| r.name.as_str()).collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Failure::Verification(format!("gradient check failed for {}", failed.join(", "))))
    }
}

pub fn train(args: &TrainArgs, seed: u64, out: &Output) -> CmdResult {
    let cfg = load_config(args.config.as_deref())?;
    let defaults = TrainSchedule::default();
    let sched = TrainSchedule {
        epochs: args.epochs,
        batch_size: args.batch_size,
        base_lr: args.lr.unwrap_or(defaults.base_lr),
        warmup_steps: args.warmup_steps.unwrap_or(defaults.warmup_steps),
        seed,
        ..defaults
    };
    sched.validate()?;
    let data = read_dataset(&args.data)?;
    if let Some(bad) = data.iter().find(|s| s.size() != cfg.input_size) {
        return Err(Failure::Usage(format!("dataset images are {0}x{0}, config expects input_size {1}", bad.size(), cfg.input_size)));
    }
    if let Some(p) = &args.metrics {
        write_file(p, b"")?;
    }
    let mut model = Model::build(&cfg)?;
    let mut log = String::new();
    run_training(&mut model, &data, &sched, |m, model| {
        model.save_checkpoint(&args.checkpoint)?;
        let line = serde_json::to_string(m).expect("serializable");
        eprintln!("epoch {} loss {:.4} lr {:.5} {:.0} ms", m.epoch, m.loss.total, m.lr, m.wall_ms);
        match &args.metrics {
            Some(p) => {
                let mut f = fs::OpenOptions::new().create(true).append(true).open(p).map_err(y12_core::Error::Io)?;
                writeln!(f, "{line}").map_err(y12_core::Error::Io)?;
            }
            None => {
                log += &line;
                log.push('\n');
            }
        }
        Ok(())
    })?;
    if args.metrics.is_none() {
        out.emit(&log)?;
    }
    Ok(())
}

#[derive(Debug, Serialize, Deserialize)]
pub struct Latency {
    pub samples: usize,
    pub median_ms: f64,
    pub p10_ms: f64,
    pub p90_ms: f64,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct EvalReport {
    pub variant: String,
    pub images: usize,
    pub map50: f64,
    pub map50_95: f64,
    pub per_class_ap50: BTreeMap<String, Option<f64>>,
    pub latency: Latency,
}

fn class_name(i: usize) -> String {
    CLASS_NAMES.get(i).map_or_else(|| format!("class{i}"), |s| s.to_string())
}

pub fn eval(args: &EvalArgs, out: &Output) -> CmdResult {
    if args.latency_samples < MIN_LATENCY_SAMPLES {
        return Err(Failure::Usage(format!("--latency-samples must be at least {MIN_LATENCY_SAMPLES}, got {}", args.latency_samples)));
    }
    let cfg = load_config(args.config.as_deref())?;
    let model = Model::load_checkpoint(&args.checkpoint, &cfg)?;
    let data = read_dataset(&args.data)?;
    if data.is_empty() {
        return Err(Failure::Io(format!("{}: dataset has no images", args.data.display())));
    }
    if let Some(bad) = data.iter().find(|s| s.size() != cfg.input_size) {
        return Err(Failure::Usage(format!("dataset images are {0}x{0}, config expects input_size {1}", bad.size(), cfg.input_size)));
    }
    let report = evaluate(&model, &data, &EvalSettings::default())?;

    let s = cfg.input_size;
    let single = |i: usize| data[i % data.len()].image.reshape(&[1, 3, s, s]);
    for i in 0..LATENCY_WARMUP {
        model.predict(&single(i)?)?;
    }
    let mut times = Vec::with_capacity(args.latency_samples);
    for i in 0..args.latency_samples {
        let x: Tensor<f32> = single(i)?;
        let t = Instant::now();
        std::hint::black_box(model.predict(&x)?);
        times.push(t.elapsed().as_secs_f64() * 1e3);
    }
    let (median_ms, p10_ms, p90_ms) = spread(&mut times);

    let result = EvalReport {
        variant: format!("12{}", cfg.variant.name),
        images: data.len(),
        map50: report.map50,
        map50_95: report.map50_95,
        per_class_ap50: report.per_class_ap50.iter().enumerate().map(|(i, ap)| (class_name(i), *ap)).collect(),
        latency: Latency { samples: args.latency_samples, median_ms, p10_ms, p90_ms },
    };

    if let Some(path) = &args.frontier_svg {
        let mut points = vec![(result.variant.clone(), result.latency.median_ms, result.map50_95)];
        for p in &args.frontier_from {
            let text = fs::read_to_string(p).map_err(|e| Failure::Io(format!("{}: {e}", p.display())))?;
            let r: EvalReport = serde_json::from_str(&text).map_err(|e| Failure::Io(format!("{}: not an eval report: {e}", p.display())))?;
            points.push((r.variant, r.latency.median_ms, r.map50_95));
        }
        points.sort_by(|a, b| a.1.total_cmp(&b.1));
        let plot = Plot {
            title: "latency vs accuracy".into(),
            x_label: "median latency per image (ms)".into(),
            y_label: "mAP@[.5:.95]".into(),
            log_y: false,
            connect: false,
            series: points.into_iter().map(|(label, x, y)| Series { label, points: vec![(x, y)] }).collect(),
        };
        write_file(path, plot.render().as_bytes())?;
    }
    out.emit(&to_json(&result))
}

pub fn synth(args: &SynthArgs, seed: u64) -> CmdResult {
    if args.size == 0 || args.size % 32 != 0 {
        return Err(Failure::Usage(format!("--size must be a positive multiple of 32, got {}", args.size)));
    }
    let samples = synth_dataset(args.count, &SynthConfig::new(args.size), seed);
    write_dataset(&args.dir, &samples)?;
    Ok(())
}
