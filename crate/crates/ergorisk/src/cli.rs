//! Command-line entry point: `score`, `annotate`, `synth`, `train`,
//! `eval`, `gradcheck`, and `selftest` subcommands over the library
//! modules.
//!
//! Exit codes: 0 success, 1 usage error, 2 data/configuration error,
//! 3 numeric fault. Stdout is deterministic for identical arguments and
//! input files; progress and rejects go to stderr. `--json` switches
//! stdout to machine-readable JSON.

use std::ffi::OsString;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use crate::error::{Error, Result};
use crate::geometry::{GeometryConfig, RegionAngles, SidePair};
use crate::metrics;
use crate::model::{self, ViskGatConfig};
use crate::pose::{parse_landmark_file, InputFormat};
use crate::reba::{self, LabelRecord, RebaConfig};
use crate::synth;
use crate::tensor::{load_checkpoint, save_checkpoint, ErgRng, ParamMap, Tensor};
use crate::train::{self, SplitIndices, TrainConfig};

/// Environment variable holding a default scoring-tables path used when
/// `--tables` is not given.
pub const TABLES_ENV: &str = "ERGORISK_TABLES";

#[derive(Parser, Debug)]
#[command(
    name = "ergorisk",
    version,
    about = "Posture risk scoring and multimodal risk classification toolkit"
)]
struct Cli {
    /// Random seed honored by every seeded subcommand.
    #[arg(long, global = true, default_value_t = 42)]
    seed: u64,

    /// Cap worker threads (0 = automatic).
    #[arg(long, global = true, default_value_t = 0)]
    threads: usize,

    /// Emit machine-readable JSON on stdout.
    #[arg(long, global = true)]
    json: bool,

    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Score skeleton records and print one line per record.
    Score {
        /// Landmark file (.jsonl or .csv).
        #[arg(long = "in")]
        input: PathBuf,
        /// Scoring tables JSON (default: $ERGORISK_TABLES, then built-in).
        #[arg(long)]
        tables: Option<PathBuf>,
        /// Drop landmarks below this visibility before assessment.
        #[arg(long, default_value_t = 0.5)]
        min_visibility: f64,
    },
    /// Label a landmark dataset and write the records as JSON lines.
    Annotate {
        /// Landmark file (.jsonl or .csv).
        #[arg(long = "in")]
        input: PathBuf,
        /// Output label file (JSON lines).
        #[arg(long)]
        out: PathBuf,
        /// Scoring tables JSON (default: $ERGORISK_TABLES, then built-in).
        #[arg(long)]
        tables: Option<PathBuf>,
        /// Drop landmarks below this visibility before assessment.
        #[arg(long, default_value_t = 0.5)]
        min_visibility: f64,
    },
    /// Generate a labeled synthetic stick-figure dataset.
    Synth {
        /// Number of samples.
        #[arg(long)]
        n: usize,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
        /// Rendered image edge length in pixels.
        #[arg(long, default_value_t = 64)]
        size: usize,
    },
    /// Train the classifier on a generated dataset directory.
    Train {
        /// Dataset directory (as written by `synth`).
        #[arg(long)]
        data: PathBuf,
        /// Output directory for checkpoint, configs, log, and split.
        #[arg(long)]
        out: PathBuf,
        /// Model preset: default, desk, micro, or tiny.
        #[arg(long, default_value = "micro")]
        preset: String,
        /// Model configuration JSON (overrides --preset).
        #[arg(long)]
        model_config: Option<PathBuf>,
        /// Training configuration JSON.
        #[arg(long)]
        train_config: Option<PathBuf>,
        /// Override the epoch count.
        #[arg(long)]
        epochs: Option<usize>,
        /// Stop once training accuracy reaches this fraction.
        #[arg(long)]
        stop_at: Option<f64>,
    },
    /// Evaluate a training run on a dataset split and print the report.
    Eval {
        /// Dataset directory (as written by `synth`).
        #[arg(long)]
        data: PathBuf,
        /// Training-run directory (as written by `train`).
        #[arg(long)]
        run: PathBuf,
        /// Split to evaluate: train, val, test, or all.
        #[arg(long, default_value = "test")]
        split: String,
    },
    /// Compare analytic gradients against central finite differences.
    Gradcheck {
        /// Number of seeds per primitive case.
        #[arg(long, default_value_t = 2)]
        seeds: u64,
    },
    /// Run the bundled invariant suite and print pass/fail per check.
    Selftest,
}

/// Parse arguments, dispatch, and map errors to exit codes.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return code;
        }
    };
    if cli.threads > 0 {
        // Ignore "already initialized": only the first call can win, and
        // tests drive `run` repeatedly in one process.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(cli.threads).build_global();
    }
    match dispatch(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn dispatch(cli: Cli) -> Result<()> {
    let json = cli.json;
    let seed = cli.seed;
    match cli.cmd {
        Cmd::Score { input, tables, min_visibility } => {
            cmd_score(json, &input, tables.as_deref(), min_visibility)
        }
        Cmd::Annotate { input, out, tables, min_visibility } => {
            cmd_annotate(json, &input, &out, tables.as_deref(), min_visibility)
        }
        Cmd::Synth { n, out, size } => cmd_synth(json, n, seed, size, &out),
        Cmd::Train { data, out, preset, model_config, train_config, epochs, stop_at } => {
            cmd_train(
                json,
                seed,
                &data,
                &out,
                &preset,
                model_config.as_deref(),
                train_config.as_deref(),
                epochs,
                stop_at,
            )
        }
        Cmd::Eval { data, run, split } => cmd_eval(json, &data, &run, &split),
        Cmd::Gradcheck { seeds } => cmd_gradcheck(json, seeds, seed),
        Cmd::Selftest => cmd_selftest(json, seed),
    }
}

fn print_line(line: &str) -> Result<()> {
    let mut out = std::io::stdout().lock();
    writeln!(out, "{line}").map_err(|e| Error::io("<stdout>", e))
}

/// `--tables` flag, then `$ERGORISK_TABLES`, then the built-in tables.
fn resolve_tables(flag: Option<&Path>) -> Result<RebaConfig> {
    if let Some(path) = flag {
        return RebaConfig::from_file(path);
    }
    if let Ok(path) = std::env::var(TABLES_ENV) {
        if !path.is_empty() {
            return RebaConfig::from_file(Path::new(&path));
        }
    }
    Ok(RebaConfig::builtin())
}

fn load_skeletons(input: &Path) -> Result<Vec<crate::pose::Skeleton>> {
    let format = InputFormat::from_path(input).ok_or_else(|| {
        Error::Usage(format!(
            "cannot infer input format from '{}'; expected a .jsonl or .csv file",
            input.display()
        ))
    })?;
    parse_landmark_file(input, format)
}

fn cmd_score(json: bool, input: &Path, tables: Option<&Path>, min_visibility: f64) -> Result<()> {
    let cfg = resolve_tables(tables)?;
    let geo = GeometryConfig::default();
    let skeletons = load_skeletons(input)?;
    let stdout = std::io::stdout();
    let mut out = stdout.lock();
    for s in &skeletons {
        let r = reba::assess(&s.filter_visibility(min_visibility), &geo, &cfg)?;
        let record = LabelRecord {
            id: s.id.clone(),
            scores: r.scores,
            g_a: r.g_a,
            g_b: r.g_b,
            reba: r.s_reba,
            class: r.class_label,
        };
        let line = if json {
            serde_json::to_string(&record)
                .map_err(|e| Error::Value(format!("record serialization failed: {e}")))?
        } else {
            // Terse grep-friendly summary; the class field keeps its JSON
            // spelling so both modes end a line the same way.
            format!("{}\treba={}\t\"class\":{}", record.id, record.reba, record.class)
        };
        writeln!(out, "{line}").map_err(|e| Error::io("<stdout>", e))?;
    }
    Ok(())
}

fn cmd_annotate(
    json: bool,
    input: &Path,
    out_path: &Path,
    tables: Option<&Path>,
    min_visibility: f64,
) -> Result<()> {
    let cfg = resolve_tables(tables)?;
    let geo = GeometryConfig::default();
    let skeletons = load_skeletons(input)?;
    let file = File::create(out_path).map_err(|e| Error::io(out_path, e))?;
    let summary =
        reba::annotate_dataset(&skeletons, &geo, &cfg, min_visibility, BufWriter::new(file))?;
    for (id, reason) in &summary.rejects {
        eprintln!("reject {id}: {reason}");
    }
    if json {
        let value = serde_json::json!({
            "total": summary.total,
            "accepted": summary.accepted,
            "class_counts": summary.class_counts,
            "rejected": summary.rejects.len(),
        });
        print_line(&value.to_string())
    } else {
        print_line(&format!(
            "annotated {}/{} records, classes {:?}",
            summary.accepted, summary.total, summary.class_counts
        ))
    }
}

fn cmd_synth(json: bool, n: usize, seed: u64, size: usize, out: &Path) -> Result<()> {
    let manifest = synth::gen_dataset(n, seed, size, out)?;
    if json {
        let value = serde_json::json!({
            "total": manifest.entries.len(),
            "histogram": manifest.histogram,
        });
        print_line(&value.to_string())
    } else {
        print_line(&format!(
            "wrote {} samples to {}, class histogram {:?}",
            manifest.entries.len(),
            out.display(),
            manifest.histogram
        ))
    }
}

fn preset_by_name(name: &str) -> Result<ViskGatConfig> {
    match name {
        "default" => Ok(ViskGatConfig::default()),
        "desk" => Ok(ViskGatConfig::desk()),
        "micro" => Ok(ViskGatConfig::micro()),
        "tiny" => Ok(ViskGatConfig::tiny()),
        other => Err(Error::Usage(format!(
            "unknown preset '{other}'; expected default, desk, micro, or tiny"
        ))),
    }
}

fn write_json_file<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)
        .map_err(|e| Error::Value(format!("serialization failed: {e}")))?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

#[allow(clippy::too_many_arguments)]
fn cmd_train(
    json: bool,
    seed: u64,
    data: &Path,
    out: &Path,
    preset: &str,
    model_config: Option<&Path>,
    train_config: Option<&Path>,
    epochs: Option<usize>,
    stop_at: Option<f64>,
) -> Result<()> {
    let samples = synth::load_dataset(data)?;
    let model_cfg = match model_config {
        Some(path) => ViskGatConfig::from_file(path)?,
        None => preset_by_name(preset)?,
    };
    let mut cfg = match train_config {
        Some(path) => TrainConfig::from_file(path)?,
        None => TrainConfig::default(),
    };
    cfg.seed = seed;
    if let Some(e) = epochs {
        cfg.epochs = e;
    }
    if let Some(t) = stop_at {
        cfg.stop_at_train_acc = Some(t);
    }
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;

    print_line("epoch,lr,train_loss,train_acc,val_loss,val_acc")?;
    let outcome = train::train(&model_cfg, &cfg, &samples, |line| {
        let _ = print_line(line);
    })?;

    save_checkpoint(&out.join("checkpoint.bin"), &outcome.params)?;
    save_checkpoint(&out.join("final.bin"), &outcome.final_params)?;
    fs::write(out.join("train_log.csv"), &outcome.log_csv)
        .map_err(|e| Error::io(out.join("train_log.csv"), e))?;
    write_json_file(&out.join("model.json"), &model_cfg)?;
    write_json_file(&out.join("train_config.json"), &cfg)?;
    write_json_file(&out.join("split.json"), &outcome.split)?;

    if json {
        let value = serde_json::json!({
            "epochs_run": outcome.epochs_run,
            "best_epoch": outcome.best_epoch,
            "best_val_acc": outcome.best_val_acc,
        });
        print_line(&value.to_string())
    } else {
        print_line(&format!(
            "trained {} epochs; best epoch {} (val_acc {})",
            outcome.epochs_run, outcome.best_epoch, outcome.best_val_acc
        ))
    }
}

fn cmd_eval(json: bool, data: &Path, run: &Path, split: &str) -> Result<()> {
    let samples = synth::load_dataset(data)?;
    let model_cfg = ViskGatConfig::from_file(&run.join("model.json"))?;
    let params: ParamMap<f32> = load_checkpoint(&run.join("checkpoint.bin"))?;
    let split_path = run.join("split.json");
    let text = fs::read_to_string(&split_path).map_err(|e| Error::io(&split_path, e))?;
    let indices: SplitIndices = serde_json::from_str(&text)
        .map_err(|e| Error::Schema(format!("{}: {e}", split_path.display())))?;
    let chosen: Vec<usize> = match split {
        "train" => indices.train,
        "val" => indices.val,
        "test" => indices.test,
        "all" => (0..samples.len()).collect(),
        other => {
            return Err(Error::Usage(format!(
                "unknown split '{other}'; expected train, val, test, or all"
            )))
        }
    };
    let outputs = train::evaluate(&params, &model_cfg, &samples, &chosen, 0.0)?;
    let report =
        metrics::build_report(&outputs.labels, &outputs.preds, &outputs.probs, model_cfg.num_classes)?;
    if json {
        let text = serde_json::to_string_pretty(&report)
            .map_err(|e| Error::Value(format!("report serialization failed: {e}")))?;
        print_line(&text)
    } else {
        let mut out = std::io::stdout().lock();
        write!(out, "{}", metrics::render_tables(&report)).map_err(|e| Error::io("<stdout>", e))?;
        writeln!(out, "mean_loss {}", outputs.mean_loss).map_err(|e| Error::io("<stdout>", e))
    }
}

fn cmd_gradcheck(json: bool, seeds: u64, seed: u64) -> Result<()> {
    let h = 1e-4;
    let tol = 1e-3;
    let cases = crate::autodiff::primitive_grad_suite(seeds, h);
    let model_report = model::grad_check_model(&ViskGatConfig::tiny(), 4, h, seed)?;
    let mut worst: f64 = model_report.max_rel_err;
    for (_, err) in &cases {
        worst = worst.max(*err);
    }
    if json {
        let value = serde_json::json!({
            "cases": cases
                .iter()
                .map(|(name, err)| serde_json::json!({"name": name, "max_rel_err": err}))
                .collect::<Vec<_>>(),
            "model_tiny": {
                "checked": model_report.checked,
                "max_rel_err": model_report.max_rel_err,
                "worst": model_report.worst,
            },
            "tolerance": tol,
        });
        print_line(&value.to_string())?;
    } else {
        for (name, err) in &cases {
            print_line(&format!("{name}: max_rel_err {err:.3e}"))?;
        }
        print_line(&format!(
            "model(tiny): max_rel_err {:.3e} over {} coordinates (worst at {})",
            model_report.max_rel_err, model_report.checked, model_report.worst
        ))?;
    }
    if worst > tol {
        return Err(Error::Numeric(format!(
            "gradient check failed: max relative error {worst:.3e} exceeds {tol:.0e}"
        )));
    }
    Ok(())
}

/// One selftest check: returns a failure description, or `None` on pass.
fn check_attention_rows(seed: u64) -> Option<String> {
    use crate::autodiff::{mha, AttnParams, Graph};
    let g = Graph::<f64>::new();
    let mut rng = ErgRng::seed(seed);
    let d = 16;
    let mut t = |shape: Vec<usize>| {
        let mut x = Tensor::<f64>::zeros(shape);
        rng.fill_uniform(&mut x, -1.0, 1.0);
        g.constant(x)
    };
    let x = t(vec![8, d]);
    let params = AttnParams {
        wq: t(vec![d, d]),
        bq: t(vec![d]),
        wk: t(vec![d, d]),
        bk: t(vec![d]),
        wv: t(vec![d, d]),
        bv: t(vec![d]),
        wo: t(vec![d, d]),
        bo: t(vec![d]),
    };
    let (_, trace) = match mha(x, x, x, 4, &params) {
        Ok(v) => v,
        Err(e) => return Some(format!("attention failed to build: {e}")),
    };
    for (head, probs) in trace.probs.iter().enumerate() {
        let value = probs.value();
        let (rows, cols) = value.dims2();
        for r in 0..rows {
            let sum: f64 = (0..cols).map(|c| value.data()[r * cols + c]).sum();
            if (sum - 1.0).abs() > 1e-6 {
                return Some(format!("head {head} row {r} sums to {sum}"));
            }
        }
    }
    None
}

fn check_layer_norm_stats(seed: u64) -> Option<String> {
    use crate::autodiff::Graph;
    let g = Graph::<f64>::new();
    let mut rng = ErgRng::seed(seed.wrapping_add(1));
    let (rows, cols) = (6, 32);
    let mut x = Tensor::<f64>::zeros(vec![rows, cols]);
    rng.fill_uniform(&mut x, -2.0, 2.0);
    let gamma = g.constant(Tensor::full(vec![cols], 1.0));
    let beta = g.constant(Tensor::zeros(vec![cols]));
    let y = g.constant(x).layer_norm(gamma, beta, model::LN_EPS).value();
    for r in 0..rows {
        let row = &y.data()[r * cols..(r + 1) * cols];
        let mean: f64 = row.iter().sum::<f64>() / cols as f64;
        let var: f64 = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
        if mean.abs() > 1e-6 {
            return Some(format!("row {r} mean {mean} after normalization"));
        }
        if (var - 1.0).abs() > 1e-5 {
            return Some(format!("row {r} variance {var} after normalization"));
        }
    }
    None
}

fn check_tiny_gradients(seed: u64) -> Option<String> {
    match model::grad_check_model(&ViskGatConfig::tiny(), 2, 1e-4, seed) {
        Ok(report) if report.max_rel_err <= 1e-3 => None,
        Ok(report) => Some(format!(
            "max relative error {:.3e} at {}",
            report.max_rel_err, report.worst
        )),
        Err(e) => Some(e.to_string()),
    }
}

fn check_scoring_fixtures() -> Option<String> {
    let cfg = RebaConfig::builtin();
    let pair = |v: f64| SidePair { left: v, right: v };
    let fixtures = [
        (
            "neutral stance",
            RegionAngles {
                trunk_deg: 2.0,
                neck_deg: 5.0,
                leg_deg: pair(10.0),
                upper_arm_deg: pair(10.0),
                lower_arm_deg: pair(90.0),
                wrist_deg: pair(5.0),
            },
            (1, 1, 1, 1),
        ),
        (
            "moderate reach",
            RegionAngles {
                trunk_deg: 10.0,
                neck_deg: 10.0,
                leg_deg: pair(70.0),
                upper_arm_deg: pair(100.0),
                lower_arm_deg: pair(90.0),
                wrist_deg: pair(30.0),
            },
            (4, 5, 5, 5),
        ),
        (
            "severe crouch",
            RegionAngles {
                trunk_deg: 90.0,
                neck_deg: 45.0,
                leg_deg: pair(90.0),
                upper_arm_deg: pair(120.0),
                lower_arm_deg: pair(30.0),
                wrist_deg: pair(40.0),
            },
            (7, 6, 9, 8),
        ),
    ];
    for (name, angles, (g_a, g_b, s_reba, class)) in fixtures {
        let r = match reba::assess_angles(&angles, &cfg) {
            Ok(r) => r,
            Err(e) => return Some(format!("{name}: {e}")),
        };
        if (r.g_a, r.g_b, r.s_reba, r.class_label) != (g_a, g_b, s_reba, class) {
            return Some(format!(
                "{name}: got A={} B={} score={} class={}, expected A={g_a} B={g_b} score={s_reba} class={class}",
                r.g_a, r.g_b, r.s_reba, r.class_label
            ));
        }
    }
    None
}

fn cmd_selftest(json: bool, seed: u64) -> Result<()> {
    let checks: [(&str, Option<String>); 4] = [
        ("attention-row-sums", check_attention_rows(seed)),
        ("layer-norm-stats", check_layer_norm_stats(seed)),
        ("tiny-model-gradients", check_tiny_gradients(seed)),
        ("scoring-fixture-walk", check_scoring_fixtures()),
    ];
    let failed: Vec<&str> = checks
        .iter()
        .filter_map(|(name, fail)| fail.as_ref().map(|_| *name))
        .collect();
    if json {
        let value = serde_json::json!({
            "checks": checks
                .iter()
                .map(|(name, fail)| serde_json::json!({
                    "name": name,
                    "pass": fail.is_none(),
                    "detail": fail,
                }))
                .collect::<Vec<_>>(),
            "passed": failed.is_empty(),
        });
        print_line(&value.to_string())?;
    } else {
        for (name, fail) in &checks {
            match fail {
                None => print_line(&format!("PASS {name}"))?,
                Some(detail) => print_line(&format!("FAIL {name}: {detail}"))?,
            }
        }
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Error::Numeric(format!("selftest failed: {}", failed.join(", "))))
    }
}
