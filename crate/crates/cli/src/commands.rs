use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use pchier_core::analysis::{decompose_motion, export_motion, motion_variance_profile, pca_feature_colors, to_rgb8};
use pchier_core::cell::reset_state;
use pchier_core::data::ply::write_ply;
use pchier_core::data::{generate_sequence, load_sequence, save_sequence, MotionPreset, PointCloudSequence, MANIFEST_FILE};
use pchier_core::diffcore::{load_checkpoint, save_checkpoint, ParamStore, Tape};
use pchier_core::network::{de_forward, init_params, ArchitectureConfig};
use pchier_core::training::{evaluate, evaluate_copy_last, loss_csv, train as run_training, EvalResult, MetricMeans};
use serde::Serialize;

use crate::config::{self, usage, DecomposeConfig, EvalConfig, GenerateConfig, TrainRunConfig};
use crate::manifest::RunRecorder;
use crate::{DecomposeArgs, EvalArgs, GenerateArgs, TrainArgs};

pub const ARCHITECTURE_FILE: &str = "architecture.json";
pub const LOSS_FILE: &str = "loss.csv";
pub const FRAMES_FILE: &str = "frames.csv";
pub const SUMMARY_FILE: &str = "summary.csv";
pub const VARIANCE_FILE: &str = "variance.json";
pub const BASELINE_NAME: &str = "copy_last";

fn create_out(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    write(path, &(serde_json::to_string_pretty(value)? + "\n"))
}

pub fn sequence_dir_name(cfg: &GenerateConfig, seed: u64) -> String {
    format!("{}_seed{seed:04}", cfg.preset.name())
}

pub fn generate(args: GenerateArgs) -> Result<()> {
    let rec = RunRecorder::start("generate");
    let mut cfg: GenerateConfig = config::load(args.common.config.as_deref(), "generate")?;
    if let Some(p) = args.preset {
        cfg.preset = p;
    }
    if let Some(n) = args.points {
        cfg.points = n;
    }
    if let Some(f) = args.frames {
        cfg.frames = f;
    }
    if let Some(v) = args.velocity {
        cfg.velocity = v;
    }
    if let Some(w) = args.omega {
        cfg.omega = w;
    }
    if let Some(a) = args.amplitude {
        cfg.amplitude = a;
    }
    if let Some(t) = args.period {
        cfg.period = t;
    }
    if let Some(s) = args.noise {
        cfg.noise_sigma = s;
    }
    match (&args.seeds, args.common.seed) {
        (Some(_), Some(_)) => return Err(usage("give either --seeds or --seed, not both")),
        (Some(list), None) => cfg.seeds = config::parse_seeds(list)?,
        (None, Some(s)) => cfg.seeds = vec![s],
        (None, None) => {}
    }
    if cfg.seeds.is_empty() {
        return Err(usage("no seeds to generate"));
    }
    let presets: Vec<MotionPreset> = cfg
        .seeds
        .iter()
        .map(|&seed| MotionPreset {
            kind: cfg.preset,
            velocity: cfg.velocity,
            omega: cfg.omega,
            amplitude: cfg.amplitude,
            period: cfg.period,
            noise_sigma: cfg.noise_sigma,
            seed,
        })
        .collect();
    // generate everything first so bad parameters fail before any write
    let seqs = presets
        .iter()
        .map(|p| generate_sequence(p, cfg.points, cfg.frames))
        .collect::<pchier_core::Result<Vec<_>>>()
        .map_err(|e| usage(e.to_string()))?;

    let out = &args.common.out;
    create_out(out)?;
    for (seq, &seed) in seqs.iter().zip(&cfg.seeds) {
        let dir = out.join(sequence_dir_name(&cfg, seed));
        save_sequence(seq, &dir)?;
    }
    tracing::info!(sequences = seqs.len(), out = %out.display(), "generated");
    let seed = (cfg.seeds.len() == 1).then(|| cfg.seeds[0]);
    rec.finish(&cfg, seed, out)
}

/// A single sequence directory, or every sequence directory directly
/// inside `dir`, sorted by name.
pub fn load_dataset(dir: &Path) -> Result<Vec<(String, PointCloudSequence)>> {
    let name_of = |p: &Path| p.file_name().map_or_else(|| p.display().to_string(), |n| n.to_string_lossy().into_owned());
    if dir.join(MANIFEST_FILE).is_file() {
        return Ok(vec![(name_of(dir), load_sequence(dir)?)]);
    }
    let entries = fs::read_dir(dir).with_context(|| format!("reading dataset {}", dir.display()))?;
    let mut dirs: Vec<PathBuf> = Vec::new();
    for e in entries {
        let p = e.with_context(|| format!("reading dataset {}", dir.display()))?.path();
        if p.join(MANIFEST_FILE).is_file() {
            dirs.push(p);
        }
    }
    dirs.sort();
    if dirs.is_empty() {
        bail!("no sequences found in {}", dir.display());
    }
    dirs.iter()
        .map(|d| Ok((name_of(d), load_sequence(d).with_context(|| format!("loading {}", d.display()))?)))
        .collect()
}

pub fn train(args: TrainArgs) -> Result<()> {
    let mut rec = RunRecorder::start("train");
    rec.input("data", &args.data);
    let mut cfg: TrainRunConfig = config::load(args.common.config.as_deref(), "train")?;
    let arch = &mut cfg.architecture;
    if let Some(v) = args.variant {
        arch.variant = v;
    }
    if let Some(l) = args.levels {
        arch.levels = l;
    }
    if let Some(f) = args.factor {
        arch.downsample_factor = f;
    }
    if let Some(k) = args.k {
        arch.k = k;
    }
    if let Some(w) = args.feature_widths {
        arch.feature_widths = w;
    }
    if let Some(s) = &args.fp_widths {
        arch.fp_widths = config::parse_fp_widths(s)?;
    }
    let tc = &mut cfg.training;
    if let Some(s) = args.steps {
        tc.steps = s;
    }
    if let Some(lr) = args.lr {
        tc.lr = lr;
    }
    if let Some(l) = args.lambda_emd {
        tc.lambda_emd = l;
    }
    if let Some(s) = args.common.seed {
        cfg.architecture.seed = s;
        cfg.training.seed = s;
    }
    cfg.architecture.validate().map_err(|e| usage(e.to_string()))?;
    cfg.training.validate().map_err(|e| usage(e.to_string()))?;

    let data = load_dataset(&args.data)?;
    let seqs: Vec<PointCloudSequence> = data.into_iter().map(|(_, s)| s).collect();
    tracing::info!(sequences = seqs.len(), variant = %cfg.architecture.variant, steps = cfg.training.steps, "training");
    let outcome = run_training(&cfg.architecture, &seqs, &cfg.training)?;

    let out = &args.common.out;
    create_out(out)?;
    save_checkpoint(&outcome.params, out)?;
    write(&out.join(LOSS_FILE), &loss_csv(&outcome.curve))?;
    write_json(&out.join(ARCHITECTURE_FILE), &cfg.architecture)?;
    if let Some(last) = outcome.curve.last() {
        tracing::info!(loss = last.loss, cd = last.cd, emd = last.emd, "final step");
    }
    rec.finish(&cfg, Some(cfg.training.seed), out)
}

/// Architecture and parameters of a `train` output directory; the
/// parameter names and shapes must match the architecture.
pub fn load_model(dir: &Path) -> Result<(ArchitectureConfig, ParamStore)> {
    let path = dir.join(ARCHITECTURE_FILE);
    let text = fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
    let cfg: ArchitectureConfig = serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
    cfg.validate().with_context(|| format!("checking {}", path.display()))?;
    let params = load_checkpoint(dir).with_context(|| format!("loading checkpoint from {}", dir.display()))?;
    let expected = init_params(&cfg)?;
    let same = expected.len() == params.len()
        && expected.iter().zip(params.iter()).all(|((a, x), (b, y))| a == b && x.shape() == y.shape());
    if !same {
        bail!("checkpoint in {} does not match its architecture", dir.display());
    }
    Ok((cfg, params))
}

fn worker_threads() -> Result<usize> {
    match std::env::var("PCHIER_THREADS") {
        Err(_) => Ok(1),
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n >= 1 => Ok(n),
            _ => Err(usage(format!("PCHIER_THREADS must be a positive integer, got `{v}`"))),
        },
    }
}

fn means_row(model: &str, id: &str, m: &MetricMeans) -> String {
    format!("{model},{id},{},{},{}\n", m.cd, m.emd, m.cd_top5)
}

/// Rows per sequence followed by an `all` row holding their column means.
fn summary_rows(out: &mut String, model: &str, result: &EvalResult) -> MetricMeans {
    let per_seq = result.per_sequence();
    for (id, m) in &per_seq {
        out.push_str(&means_row(model, id, m));
    }
    let n = per_seq.len().max(1) as f64;
    let mean = |f: fn(&MetricMeans) -> f64| per_seq.iter().map(|(_, m)| f(m)).sum::<f64>() / n;
    let all = MetricMeans {
        cd: mean(|m| m.cd),
        emd: mean(|m| m.emd),
        cd_top5: mean(|m| m.cd_top5),
    };
    out.push_str(&means_row(model, "all", &all));
    all
}

pub fn eval(args: EvalArgs) -> Result<()> {
    let mut rec = RunRecorder::start("eval");
    rec.input("checkpoint", &args.checkpoint);
    rec.input("data", &args.data);
    let mut cfg: EvalConfig = config::load(args.common.config.as_deref(), "eval")?;
    if let Some(w) = args.warmup {
        cfg.warmup = w;
    }
    if let Some(c) = args.emd_cap {
        cfg.emd_cap = c;
    }
    if cfg.warmup == 0 || cfg.emd_cap == 0 {
        return Err(usage("warmup and emd_cap must be positive"));
    }
    let threads = worker_threads()?;
    let (arch, params) = load_model(&args.checkpoint)?;
    let data = load_dataset(&args.data)?;
    let model = evaluate(&params, &arch, &data, cfg.warmup, cfg.emd_cap, threads)?;
    let base = evaluate_copy_last(&data, cfg.warmup, cfg.emd_cap)?;

    let out = &args.common.out;
    create_out(out)?;
    let name = arch.variant.name();
    let mut frames = String::from("model,sequence_id,frame,cd,emd,cd_top5\n");
    for (label, res) in [(name, &model), (BASELINE_NAME, &base)] {
        for r in &res.rows {
            let _ = writeln!(frames, "{label},{}", r.report.csv_row(&r.sequence_id, r.frame));
        }
    }
    write(&out.join(FRAMES_FILE), &frames)?;
    let mut summary = String::from("model,sequence_id,cd,emd,cd_top5\n");
    let m = summary_rows(&mut summary, name, &model);
    let b = summary_rows(&mut summary, BASELINE_NAME, &base);
    write(&out.join(SUMMARY_FILE), &summary)?;
    if !args.common.quiet {
        println!("{:<22} {:>14} {:>14} {:>14}", "model", "cd", "emd", "cd_top5");
        for (label, v) in [(name, m), (BASELINE_NAME, b)] {
            println!("{label:<22} {:>14.6e} {:>14.6e} {:>14.6e}", v.cd, v.emd, v.cd_top5);
        }
    }
    rec.finish(&cfg, None, out)
}

#[derive(Debug, Serialize)]
struct LevelVarianceRecord {
    level: usize,
    overall: f64,
    per_segment: std::collections::BTreeMap<i32, f64>,
}

#[derive(Debug, Serialize)]
struct VarianceSummary {
    frame: usize,
    residual: f64,
    levels: Vec<LevelVarianceRecord>,
    full: LevelVarianceRecord,
    /// Variance of the top level's contribution below the bottom level's.
    top_below_bottom: bool,
}

pub fn level_csv_name(level: usize) -> String {
    format!("decomp_level{level}.csv")
}

pub const FULL_CSV: &str = "decomp_full.csv";

pub fn decompose(args: DecomposeArgs) -> Result<()> {
    let mut rec = RunRecorder::start("decompose");
    rec.input("checkpoint", &args.checkpoint);
    rec.input("sequence", &args.sequence);
    let mut cfg: DecomposeConfig = config::load(args.common.config.as_deref(), "decompose")?;
    if args.frame.is_some() {
        cfg.frame = args.frame;
    }
    let Some(t) = cfg.frame else {
        return Err(usage("--frame is required"));
    };
    let (arch, params) = load_model(&args.checkpoint)?;
    let seq = load_sequence(&args.sequence)?;
    if t >= seq.len() {
        bail!("frame {t} is out of range for a sequence of {} frames", seq.len());
    }

    // run the extraction phase up to frame t so the recurrent state is warm
    // cell states refer to tape nodes, so every frame shares one tape
    let mut tape = Tape::new();
    let mut states = reset_state(arch.levels);
    let mut snapshot = None;
    for frame in &seq.frames()[..=t] {
        let (levels, next) = de_forward(&mut tape, &params, &arch, frame, &states)?;
        snapshot = Some(levels.snapshot(&tape));
        states = next;
    }
    let snapshot = snapshot.expect("at least one frame");
    let frame = &seq.frames()[t];
    let decomp = decompose_motion(frame, &snapshot, &params, &arch)?;
    let profile = motion_variance_profile(&decomp, seq.labels())?;

    let out = &args.common.out;
    create_out(out)?;
    for (l, m) in decomp.levels.iter().enumerate() {
        export_motion(frame, &[m], &out.join(level_csv_name(l + 1)))?;
    }
    export_motion(frame, &[&decomp.full, &decomp.bias_field], &out.join(FULL_CSV))?;
    for (l, coords) in snapshot.coords.iter().enumerate() {
        let colors: Vec<[u8; 3]> =
            pca_feature_colors(&snapshot.feats[l], snapshot.widths[l])?.into_iter().map(to_rgb8).collect();
        write_ply(&out.join(format!("features_level{}.ply", l + 1)), coords.points(), None, Some(&colors))?;
    }

    let record = |level: usize, v: &pchier_core::analysis::FieldVariance| LevelVarianceRecord {
        level,
        overall: v.overall,
        per_segment: v.per_segment.clone(),
    };
    let levels: Vec<_> = profile.levels.iter().enumerate().map(|(l, v)| record(l + 1, v)).collect();
    let top_below_bottom = levels.last().map(|v| v.overall) < levels.first().map(|v| v.overall);
    let summary = VarianceSummary {
        frame: t,
        residual: decomp.residual,
        full: record(0, &profile.full),
        levels,
        top_below_bottom,
    };
    write_json(&out.join(VARIANCE_FILE), &summary)?;
    tracing::info!(
        residual = decomp.residual,
        top = summary.levels.last().map(|v| v.overall),
        bottom = summary.levels.first().map(|v| v.overall),
        "decomposed"
    );
    if !top_below_bottom && arch.levels > 1 {
        tracing::warn!("top-level contribution varies more than the bottom level");
    }
    rec.finish(&cfg, None, out)
}
