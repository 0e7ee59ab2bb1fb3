use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context, Result};
use layoutguide::config::RunConfig;
use layoutguide::eval::benchmark::{
    default_suite, parse_grid, run_benchmark, AblationRow, BenchmarkOptions, BenchmarkReport, Suite, SuiteEntry,
    SUITE_SCHEMA,
};
use layoutguide::image_io::{save_image, write_atomic};
use layoutguide::layout::{parse_layout, LayoutSpec};
use layoutguide::sampler::{generate as sample, NoiseSchedule, SamplerConfig};
use layoutguide::toymodel::train::train_denoiser;
use layoutguide::toymodel::weights::{load_weights, save_weights, weights_checksum, WeightsFile};
use layoutguide::toymodel::ToyModel;
use layoutguide::trace::{read_trace, summarize, write_trace};
use rayon::prelude::*;
use serde::Serialize;

use crate::manifest::ManifestBuilder;
use crate::{AblateArgs, BenchmarkArgs, ConfigArgs, GenerateArgs, SuiteArgs, TraceArgs, TrainArgs, ENV_OUT, ENV_THREADS};

/// Bad input from the user; exits with code 2.
#[derive(Debug)]
pub struct Usage(pub String);

impl fmt::Display for Usage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    Usage(msg.into()).into()
}

pub fn exit_code(e: &anyhow::Error) -> u8 {
    for cause in e.chain() {
        if cause.is::<Usage>() {
            return 2;
        }
        if let Some(err) = cause.downcast_ref::<layoutguide::Error>() {
            let input = err.is_validation() || matches!(err, layoutguide::Error::Weights { .. });
            return if input { 2 } else { 3 };
        }
    }
    3
}

pub fn configure_threads() -> Result<()> {
    let Ok(raw) = std::env::var(ENV_THREADS) else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| usage(format!("{ENV_THREADS} must be a positive integer, got `{raw}`")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .context("configuring worker threads")
}

fn resolve_config(args: &ConfigArgs) -> Result<RunConfig> {
    let mut cfg = match &args.config {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| usage(format!("reading {}: {e}", path.display())))?;
            RunConfig::from_toml(&text).with_context(|| format!("in {}", path.display()))?
        }
        None => RunConfig::default(),
    };
    for o in &args.overrides {
        cfg.apply_override(o)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn output_dir(args: &ConfigArgs, command: &str) -> Result<PathBuf> {
    let dir = match &args.out {
        Some(d) => d.clone(),
        None => std::env::var_os(ENV_OUT)
            .map(PathBuf::from)
            .unwrap_or_else(|| PathBuf::from("runs"))
            .join(command),
    };
    fs::create_dir_all(&dir).with_context(|| format!("creating output directory {}", dir.display()))?;
    Ok(dir)
}

fn load_model_file(path: &Path) -> Result<WeightsFile> {
    if !path.is_file() {
        return Err(usage(format!("weights file {} not found", path.display())));
    }
    Ok(load_weights(path)?)
}

fn read_layout(path: &Path, prompt_file: Option<&Path>) -> Result<LayoutSpec> {
    let text = fs::read_to_string(path).map_err(|e| usage(format!("reading layout {}: {e}", path.display())))?;
    let layout = parse_layout(&text).map_err(layoutguide::Error::from)?;
    let Some(pf) = prompt_file else {
        return Ok(layout);
    };
    let words: Vec<String> = fs::read_to_string(pf)
        .map_err(|e| usage(format!("reading prompt file {}: {e}", pf.display())))?
        .split_whitespace()
        .map(str::to_string)
        .collect();
    Ok(LayoutSpec::new(words, layout.bindings).map_err(layoutguide::Error::from)?)
}

fn seeds_or(explicit: &[u64], fallback: &[u64]) -> Vec<u64> {
    if explicit.is_empty() {
        fallback.to_vec()
    } else {
        explicit.to_vec()
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    write_atomic(path, serde_json::to_string_pretty(value)?.as_bytes())?;
    Ok(())
}

fn upscale_factor(f: usize) -> Result<usize> {
    if (1..=32).contains(&f) {
        Ok(f)
    } else {
        Err(usage("--upscale must be between 1 and 32"))
    }
}

#[derive(Serialize)]
struct TrainSummary {
    weights_checksum: String,
    holdout_initial: f64,
    holdout_final: f64,
    param_count: usize,
}

pub fn train(args: TrainArgs) -> Result<()> {
    let mut cfg = resolve_config(&args.common)?;
    if let Some(s) = args.steps {
        cfg.train.steps = s;
    }
    if let Some(s) = args.seed {
        cfg.train.seed = s;
    }
    cfg.validate()?;
    let dir = output_dir(&args.common, "train")?;
    let mut manifest = ManifestBuilder::start("train", &cfg);
    manifest.seeds(&[cfg.train.seed]);

    let report = train_denoiser(&cfg.train, &mut |p| {
        eprintln!("step {:>6}  loss {:.5}  lr {:.2e}", p.step, p.train_loss, p.lr)
    })?;
    let checksum = weights_checksum(&report.file.weights);

    let weights_path = dir.join("weights.lgw");
    save_weights(&report.file, &weights_path)?;
    let mut csv = String::from("step,train_loss,lr\n");
    for p in &report.loss_curve {
        csv.push_str(&format!("{},{},{}\n", p.step, p.train_loss, p.lr));
    }
    let curve_path = dir.join("loss_curve.csv");
    write_atomic(&curve_path, csv.as_bytes())?;
    let summary_path = dir.join("train_summary.json");
    write_json(
        &summary_path,
        &TrainSummary {
            weights_checksum: checksum.clone(),
            holdout_initial: report.holdout_initial,
            holdout_final: report.holdout_final,
            param_count: report.file.weights.param_count(),
        },
    )?;
    manifest
        .weights(checksum.clone())
        .output(&weights_path)
        .output(&curve_path)
        .output(&summary_path);
    manifest.finish(&dir)?;
    println!(
        "weights {} (sha256 {checksum})\nholdout eps-MSE {:.5} -> {:.5}",
        weights_path.display(),
        report.holdout_initial,
        report.holdout_final
    );
    Ok(())
}

fn ablate_terms(sampler: &mut SamplerConfig, terms: &[String]) -> Result<()> {
    for t in terms {
        let flag = match t.trim() {
            "iou" => &mut sampler.guidance.terms.iou,
            "mask" => &mut sampler.guidance.terms.mask,
            "kl" => &mut sampler.guidance.terms.kl,
            "att" => &mut sampler.guidance.terms.att,
            other => return Err(usage(format!("unknown loss term `{other}` (expected iou, mask, kl or att)"))),
        };
        *flag = false;
    }
    Ok(())
}

pub fn generate(args: GenerateArgs) -> Result<()> {
    let mut cfg = resolve_config(&args.common)?;
    ablate_terms(&mut cfg.sampler, &args.ablate)?;
    let upscale = upscale_factor(args.upscale)?;
    let layout = read_layout(&args.layout, args.prompt_file.as_deref())?;
    let seeds = seeds_or(&args.seeds, &[args.seed.unwrap_or(0)]);
    let file = load_model_file(&args.weights)?;
    let schedule = NoiseSchedule::from_info(&file.schedule)?;
    let model = ToyModel::<f32>::new(&file.weights, &schedule);
    let dir = output_dir(&args.common, "generate")?;

    let mut manifest = ManifestBuilder::start("generate", &cfg);
    manifest.weights(weights_checksum(&file.weights)).seeds(&seeds);
    write_atomic(&dir.join("layout.json"), layoutguide::layout::serialize_layout(&layout).as_bytes())?;

    let runs: Vec<_> = seeds
        .par_iter()
        .map(|&s| sample(&model, &schedule, &layout, s, &cfg.sampler))
        .collect();
    for (seed, run) in seeds.iter().zip(runs) {
        let g = run.with_context(|| format!("seed {seed}"))?;
        let png = dir.join(format!("seed_{seed}.png"));
        let trace = dir.join(format!("seed_{seed}.trace.ndjson"));
        save_image(&g.image.upscale(upscale), &png)?;
        write_trace(&trace, &g.trace)?;
        manifest.output(&png).output(&trace);
        println!("{}", png.display());
    }
    manifest.finish(&dir)?;
    Ok(())
}

fn grid_or_default(explicit: Option<&str>, cfg: &RunConfig) -> Result<Vec<AblationRow>> {
    Ok(match explicit {
        Some(g) => parse_grid(g)?,
        None => cfg.benchmark.rows()?,
    })
}

fn write_report(dir: &Path, report: &BenchmarkReport, manifest: &mut ManifestBuilder) -> Result<()> {
    let json = dir.join("report.json");
    let table = dir.join("table.txt");
    write_json(&json, report)?;
    write_atomic(&table, report.render_table().as_bytes())?;
    manifest.output(&json).output(&table);
    Ok(())
}

pub fn ablate(args: AblateArgs) -> Result<()> {
    let cfg = resolve_config(&args.common)?;
    let upscale = upscale_factor(args.upscale)?;
    let layout = read_layout(&args.layout, None)?;
    let grid = grid_or_default(args.grid.as_deref(), &cfg)?;
    let seeds = seeds_or(&args.seeds, &cfg.benchmark.seeds);
    let file = load_model_file(&args.weights)?;
    let schedule = NoiseSchedule::from_info(&file.schedule)?;
    let model = ToyModel::<f32>::new(&file.weights, &schedule);
    let dir = output_dir(&args.common, "ablate")?;

    let mut manifest = ManifestBuilder::start("ablate", &cfg);
    manifest.weights(weights_checksum(&file.weights)).seeds(&seeds);
    let suite = Suite {
        schema: SUITE_SCHEMA,
        name: args.layout.display().to_string(),
        description: String::new(),
        entries: vec![SuiteEntry {
            id: "layout".into(),
            layout,
        }],
    };
    let opts = BenchmarkOptions { keep_images: true };
    let report = run_benchmark(&model, &schedule, &suite, &seeds, &grid, &cfg.sampler, &opts)?;
    for row in &report.rows {
        let row_dir = dir.join(format!("row{}", row.row.name));
        fs::create_dir_all(&row_dir)?;
        for run in &row.runs {
            if let Some(img) = &run.image {
                let png = row_dir.join(format!("seed_{}.png", run.seed));
                save_image(&img.upscale(upscale), &png)?;
                manifest.output(&png);
            }
        }
    }
    write_report(&dir, &report, &mut manifest)?;
    manifest.finish(&dir)?;
    print!("{}", report.render_table());
    check_failures(&report, cfg.benchmark.max_failure_rate)
}

fn check_failures(report: &BenchmarkReport, max_rate: f64) -> Result<()> {
    let rate = report.failure_rate();
    if rate > max_rate {
        return Err(anyhow!(
            "{:.1}% of runs failed (limit {:.1}%)",
            100.0 * rate,
            100.0 * max_rate
        ));
    }
    Ok(())
}

pub fn benchmark(args: BenchmarkArgs) -> Result<()> {
    let cfg = resolve_config(&args.common)?;
    let suite = match &args.suite {
        Some(p) => {
            if !p.is_file() {
                return Err(usage(format!("suite file {} not found", p.display())));
            }
            Suite::load(p)?
        }
        None => default_suite(cfg.benchmark.suite_size, cfg.benchmark.suite_seed)?,
    };
    let grid = grid_or_default(args.grid.as_deref(), &cfg)?;
    let seeds = seeds_or(&args.seeds, &cfg.benchmark.seeds);
    let file = load_model_file(&args.weights)?;
    let schedule = NoiseSchedule::from_info(&file.schedule)?;
    let model = ToyModel::<f32>::new(&file.weights, &schedule);
    let dir = output_dir(&args.common, "benchmark")?;

    let mut manifest = ManifestBuilder::start("benchmark", &cfg);
    manifest.weights(weights_checksum(&file.weights)).seeds(&seeds);
    let suite_path = dir.join("suite.json");
    write_atomic(&suite_path, suite.to_json()?.as_bytes())?;
    manifest.output(&suite_path);
    eprintln!(
        "{} prompts x {} seeds x {} rows",
        suite.entries.len(),
        seeds.len(),
        grid.len()
    );
    let opts = BenchmarkOptions {
        keep_images: args.save_images,
    };
    let report = run_benchmark(&model, &schedule, &suite, &seeds, &grid, &cfg.sampler, &opts)?;
    if args.save_images {
        for row in &report.rows {
            let row_dir = dir.join("images").join(format!("row{}", row.row.name));
            fs::create_dir_all(&row_dir)?;
            for run in &row.runs {
                if let Some(img) = &run.image {
                    save_image(img, &row_dir.join(format!("{}_seed{}.png", run.prompt, run.seed)))?;
                }
            }
        }
    }
    write_report(&dir, &report, &mut manifest)?;
    manifest.finish(&dir)?;
    print!("{}", report.render_table());
    check_failures(&report, cfg.benchmark.max_failure_rate)
}

pub fn trace(args: TraceArgs) -> Result<()> {
    if !args.path.is_file() {
        return Err(usage(format!("trace file {} not found", args.path.display())));
    }
    let events = read_trace(&args.path)?;
    let s = summarize(&events);
    if args.json {
        println!("{}", serde_json::to_string_pretty(&s)?);
    } else {
        println!("steps            {}", s.steps);
        println!("guided steps     {}", s.guided_steps);
        println!("iterations       {}", s.iterations);
        println!("skipped          {}", s.skipped);
        println!("steps with mask  {}", s.steps_with_mask);
        println!("steps with kl    {}", s.steps_with_kl);
        println!("steps with att   {}", s.steps_with_att);
        println!("steps with iou   {}", s.steps_with_iou);
    }
    Ok(())
}

pub fn suite(args: SuiteArgs) -> Result<()> {
    if args.size == 0 {
        return Err(usage("--size must be at least 1"));
    }
    let suite = default_suite(args.size, args.seed)?;
    if let Some(parent) = args.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    write_atomic(&args.out, suite.to_json()?.as_bytes())?;
    println!("{}", args.out.display());
    Ok(())
}
