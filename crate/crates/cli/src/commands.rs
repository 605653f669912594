use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, ValueEnum};
use serde::Serialize;
use serde_json::{json, Value};

use esdkit::data::{
    argmax, batch_from_logits, generate_synthetic, split_dataset, Dataset, PredictionBatch,
};
use esdkit::io::{self, LogitDump};
use esdkit::metrics::{self, EceConfig, MmceConfig, SbEceConfig};
use esdkit::objective::CalibrationObjective;
use esdkit::oracle::{self, SyntheticCalibrationModel};
use esdkit::postprocess::{fit_temperature, fit_vector_scaling};
use esdkit::selection::{full_sweep, SweepRunner, TrialRecord};
use esdkit::training::{logit_dump, train_with_state};
use esdkit::Error;

use crate::config::{parse_overrides, RunConfig};
use crate::report::{
    write_json, Baseline, Checkpoint, Cost, Environment, SweepReport, TrainReport, SCHEMA_VERSION,
};
use crate::CliError;

fn load_config(file: Option<&Path>, raw_overrides: &[String]) -> Result<RunConfig, CliError> {
    RunConfig::load(file, &parse_overrides(raw_overrides)?)
}

fn prepare_dir(dir: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(dir)
        .map_err(|e| CliError::runtime(format!("cannot create {}: {e}", dir.display())))
}

fn load_dataset(cfg: &RunConfig) -> Result<Dataset, CliError> {
    let d = match (&cfg.data.path, &cfg.data.labels_path) {
        (Some(images), Some(labels)) => io::read_idx(images, labels)?,
        (Some(path), None) if path.extension().is_some_and(|e| e == "csv") => {
            io::read_csv_examples(path)?
        }
        (Some(path), None) => io::read_dataset_json(path)?,
        (None, Some(_)) => return Err(CliError::usage("`data.labels_path` needs `data.path`")),
        (None, None) => {
            generate_synthetic(&cfg.synthetic_spec()).map_err(|e| CliError::usage(e.to_string()))?
        }
    };
    Ok(d)
}

fn say(cfg: &RunConfig, level: u8, msg: impl AsRef<str>) {
    if cfg.output.verbosity >= level {
        eprintln!("{}", msg.as_ref());
    }
}

pub fn generate(
    file: Option<&Path>,
    out: Option<&Path>,
    overrides: &[String],
) -> Result<(), CliError> {
    let cfg = load_config(file, overrides)?;
    let d = load_dataset(&cfg)?;
    let dir = cfg.out_dir(out);
    prepare_dir(&dir)?;
    let path = dir.join("dataset.json");
    io::write_dataset_json(&path, &d)?;
    say(
        &cfg,
        1,
        format!(
            "wrote {} examples ({} classes, {} features) to {}",
            d.len(),
            d.num_classes,
            d.num_features,
            path.display()
        ),
    );
    Ok(())
}

/// Map split errors to configuration errors; they come from fractions.
fn splits_for(cfg: &RunConfig, d: &Dataset) -> Result<esdkit::data::Splits, CliError> {
    split_dataset(d, &cfg.split).map_err(|e| CliError::usage(e.to_string()))
}

pub fn train(
    file: Option<&Path>,
    out: Option<&Path>,
    overrides: &[String],
) -> Result<(), CliError> {
    let cfg = load_config(file, overrides)?;
    let d = load_dataset(&cfg)?;
    let splits = splits_for(&cfg, &d)?;
    let tc = cfg
        .train_config()
        .map_err(|e| CliError::usage(e.to_string()))?;
    let net = tc.init_network(d.num_features, d.num_classes)?;
    let (net, opt, history) = train_with_state(&splits, net, &tc)?;
    let hash = cfg.hash();

    let dir = cfg.out_dir(out);
    prepare_dir(&dir)?;
    let checkpoint = Checkpoint::new(&net, opt, tc.seed, hash.clone());
    checkpoint.validate()?;
    write_json(&dir.join("checkpoint.json"), &checkpoint)?;
    for (name, part) in [
        ("train", &splits.train),
        ("cal", &splits.cal),
        ("val", &splits.val),
        ("test", &splits.test),
    ] {
        logit_dump(&net, part)?.write(&dir.join(format!("logits_{name}.csv")))?;
    }
    let report = TrainReport {
        schema_version: SCHEMA_VERSION,
        command: "train".into(),
        environment: Environment::new(vec![tc.seed]),
        config: cfg.clone(),
        config_hash: hash,
        history,
    };
    report.validate()?;
    write_json(&dir.join("history.json"), &report)?;

    for e in &report.history.epochs {
        say(
            &cfg,
            2,
            format!(
                "epoch {:>4}  train acc {:.4} ece {:.4} nll {:.4}  val acc {:.4} ece {:.4}",
                e.epoch + 1,
                e.train.accuracy,
                e.train.ece,
                e.train.nll,
                e.val.accuracy,
                e.val.ece
            ),
        );
    }
    let t = &report.history.test;
    say(
        &cfg,
        1,
        format!(
            "{}: test acc {:.4} ece {:.4} nll {:.4} ({} steps, {:.1}s); outputs in {}",
            tc.objective.objective.name(),
            t.accuracy,
            t.ece,
            t.nll,
            report.history.steps,
            report.history.wall_clock_s,
            dir.display()
        ),
    );
    Ok(())
}

fn candidate_table(report: &SweepReport) -> String {
    let mut s = format!(
        "baseline val acc {:.4} (threshold {:.4})\n",
        report.baseline.val_acc,
        report.baseline.val_acc - esdkit::selection::ACCURACY_BUDGET
    );
    for stage in &report.stages {
        for c in &stage.candidates {
            let _ = writeln!(
                s,
                "  {:<8} lambda {:<5} {}  val acc {:.4} ece {:.4}  test acc {:.4} ece {:.4}{}",
                c.config.objective.name(),
                c.config.lambda,
                inner_label(&c.config.objective),
                c.val_acc,
                c.val_ece,
                c.test_acc,
                c.test_ece,
                if c.eligible {
                    ""
                } else {
                    "  (over accuracy budget)"
                }
            );
        }
    }
    s
}

fn inner_label(o: &CalibrationObjective) -> String {
    match o {
        CalibrationObjective::Mmce { kernel_width } => format!("phi {kernel_width}"),
        CalibrationObjective::SbEce {
            num_bins,
            temperature,
        } => format!("M {num_bins} T {temperature}"),
        CalibrationObjective::EceSoft { num_bins } => format!("B {num_bins}"),
        _ => String::new(),
    }
}

pub fn sweep(
    file: Option<&Path>,
    out: Option<&Path>,
    overrides: &[String],
) -> Result<(), CliError> {
    let cfg = load_config(file, overrides)?;
    let objective = cfg
        .objective()
        .map_err(|e| CliError::usage(e.to_string()))?;
    if objective == CalibrationObjective::None {
        return Err(CliError::usage(
            "sweep needs `objective.kind` other than `none`",
        ));
    }
    let inner = cfg
        .inner_grid()
        .map_err(|e| CliError::usage(e.to_string()))?;
    let d = load_dataset(&cfg)?;
    let splits = splits_for(&cfg, &d)?;
    let mut template = cfg
        .train_config()
        .map_err(|e| CliError::usage(e.to_string()))?;
    template.objective = esdkit::objective::CalibrationObjectiveSpec::none();
    let seeds = cfg.seeds();

    let runner = SweepRunner::new(&splits, template, seeds.clone())?;
    let stages = full_sweep(&runner, objective, &cfg.sweep.lambda_grid, inner.as_deref())?;
    let last = stages.last().expect("at least the lambda stage");
    let trials: Vec<&TrialRecord> = stages.iter().flat_map(|s| s.trials.iter()).collect();
    let cost = Cost::from_trials(&trials, last.runs_per_seed, seeds.len());
    let baseline_trials: Vec<&TrialRecord> = runner.baseline_trials().iter().collect();
    let chosen = last.chosen;
    let failure = stages.iter().find_map(|s| s.failure.clone());
    let report = SweepReport {
        schema_version: SCHEMA_VERSION,
        command: "sweep".into(),
        environment: Environment::new(seeds.clone()),
        config: cfg.clone(),
        config_hash: cfg.hash(),
        objective: objective.name().into(),
        baseline: Baseline {
            val_acc: runner.baseline_val_acc(),
            trials: runner.baseline_trials().to_vec(),
            cost: Cost::from_trials(&baseline_trials, 1, seeds.len()),
        },
        chosen: if failure.is_some() { None } else { chosen },
        failure,
        stages,
        cost,
    };
    report.validate()?;

    let dir = cfg.out_dir(out);
    prepare_dir(&dir)?;
    write_json(&dir.join("report.json"), &report)?;
    let mut lines = String::new();
    for t in runner.baseline_trials() {
        lines.push_str(
            &serde_json::to_string(&json!({"stage": "baseline", "trial": t}))
                .map_err(Error::from)?,
        );
        lines.push('\n');
    }
    for (i, stage) in report.stages.iter().enumerate() {
        let name = if i == 0 { "lambda" } else { "inner" };
        for t in &stage.trials {
            lines.push_str(
                &serde_json::to_string(&json!({"stage": name, "trial": t})).map_err(Error::from)?,
            );
            lines.push('\n');
        }
    }
    io::write_string(&dir.join("trials.jsonl"), &lines)?;

    say(&cfg, 2, candidate_table(&report));
    say(
        &cfg,
        1,
        format!(
            "{} sweep: {} runs ({} per seed x {} seeds), {} steps, {:.1}s; report in {}",
            report.objective,
            report.cost.runs,
            report.cost.runs_per_seed,
            report.cost.seeds,
            report.cost.total_steps,
            report.cost.total_wall_clock_s,
            dir.display()
        ),
    );
    match (&report.chosen, &report.failure) {
        (Some(c), _) => {
            let cand = report.stages.last().and_then(|s| s.chosen_candidate());
            say(
                &cfg,
                1,
                format!(
                    "selected lambda {} {}: test acc {:.4} ece {:.4}",
                    c.lambda,
                    inner_label(&c.objective),
                    cand.map_or(f64::NAN, |c| c.test_acc),
                    cand.map_or(f64::NAN, |c| c.test_ece)
                ),
            );
            Ok(())
        }
        (None, failure) => Err(CliError::runtime(format!(
            "selection failed: {}\n{}",
            failure.as_deref().unwrap_or("no candidate"),
            candidate_table(&report)
        ))),
    }
}

/// A prediction CSV or a logit dump, told apart by the header.
fn read_batch(path: &Path) -> Result<PredictionBatch, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::runtime(format!("cannot read {}: {e}", path.display())))?;
    if text.trim_start().starts_with("logit_") {
        let dump = LogitDump::parse_csv(path, &text)?;
        Ok(batch_from_logits(&dump.logits, &dump.labels)?)
    } else {
        Ok(io::parse_predictions_csv(path, &text)?)
    }
}

fn emit(out: Option<&Path>, text: &str) -> Result<(), CliError> {
    match out {
        Some(p) => Ok(io::write_string(p, text)?),
        None => {
            println!("{text}");
            Ok(())
        }
    }
}

fn emit_json<T: Serialize>(out: Option<&Path>, value: &T) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value).map_err(Error::from)?;
    emit(out, &text)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
#[value(rename_all = "snake_case")]
pub enum Metric {
    Ece,
    EsdUnbiased,
    EsdNaive,
    Mmce,
    SbEce,
    DAlpha,
}

impl Metric {
    fn key(self) -> &'static str {
        match self {
            Metric::Ece => "ece",
            Metric::EsdUnbiased => "esd_unbiased",
            Metric::EsdNaive => "esd_naive",
            Metric::Mmce => "mmce",
            Metric::SbEce => "sb_ece",
            Metric::DAlpha => "d_alpha",
        }
    }
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    /// Prediction CSV (`confidence,correct`) or logit dump (`logit_0..,label`).
    pub input: PathBuf,
    /// Metrics to compute (default: all).
    #[arg(long, value_delimiter = ',')]
    pub metrics: Vec<Metric>,
    /// ECE bins.
    #[arg(long, default_value_t = 20)]
    pub bins: usize,
    /// MMCE kernel width.
    #[arg(long, default_value_t = 0.4)]
    pub kernel_width: f64,
    /// SB-ECE bins.
    #[arg(long, default_value_t = 15)]
    pub sb_bins: usize,
    /// SB-ECE softening temperature.
    #[arg(long, default_value_t = 0.01)]
    pub sb_temperature: f64,
    /// Points of the uniform alpha grid for d_alpha.
    #[arg(long, default_value_t = 11)]
    pub alpha_points: usize,
    /// Write the JSON here instead of stdout.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn uniform_grid(points: usize) -> Result<Vec<f64>, CliError> {
    if points < 2 {
        return Err(CliError::usage("grids need at least 2 points"));
    }
    Ok((0..points)
        .map(|i| i as f64 / (points - 1) as f64)
        .collect())
}

fn metric_value(batch: &PredictionBatch, m: Metric, a: &EvaluateArgs) -> esdkit::Result<Value> {
    Ok(match m {
        Metric::Ece => json!({ "value": metrics::ece(batch, &EceConfig::new(a.bins)?) }),
        Metric::EsdUnbiased => json!({ "value": metrics::esd_unbiased(batch)?.value }),
        Metric::EsdNaive => json!({ "value": metrics::esd_naive(batch)? }),
        Metric::Mmce => {
            json!({ "value": metrics::mmce(batch, &MmceConfig::new(a.kernel_width)?).value })
        }
        Metric::SbEce => json!({
            "value": metrics::sb_ece(batch, &SbEceConfig::new(a.sb_bins, a.sb_temperature)?).value
        }),
        Metric::DAlpha => {
            let grid = (0..a.alpha_points.max(2))
                .map(|i| i as f64 / (a.alpha_points.max(2) - 1) as f64)
                .collect::<Vec<_>>();
            let curve = metrics::cumulative_curves(batch, &grid)?;
            json!({
                "alpha": grid,
                "value": curve.iter().map(|p| p.d_alpha).collect::<Vec<_>>(),
            })
        }
    })
}

/// Per-metric results; a failing metric records its error and the rest are
/// still computed.
pub fn evaluate_batch(batch: &PredictionBatch, a: &EvaluateArgs) -> BTreeMap<&'static str, Value> {
    let wanted = if a.metrics.is_empty() {
        vec![
            Metric::Ece,
            Metric::EsdUnbiased,
            Metric::EsdNaive,
            Metric::Mmce,
            Metric::SbEce,
            Metric::DAlpha,
        ]
    } else {
        a.metrics.clone()
    };
    wanted
        .into_iter()
        .map(|m| {
            let v = metric_value(batch, m, a).unwrap_or_else(|e| json!({ "error": e.to_string() }));
            (m.key(), v)
        })
        .collect()
}

pub fn evaluate(a: &EvaluateArgs) -> Result<(), CliError> {
    if a.alpha_points < 2 {
        return Err(CliError::usage("--alpha-points must be >= 2"));
    }
    let batch = read_batch(&a.input)?;
    let report = json!({
        "schema_version": SCHEMA_VERSION,
        "command": "evaluate",
        "input": a.input,
        "n": batch.len(),
        "accuracy": batch.accuracy(),
        "mean_confidence": batch.mean_confidence(),
        "metrics": evaluate_batch(&batch, a),
    });
    emit_json(a.out.as_deref(), &report)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Method {
    Ts,
    Vs,
}

#[derive(Debug, Args)]
pub struct CalibrateArgs {
    /// Validation logit dump (fit).
    #[arg(long)]
    pub val: PathBuf,
    /// Test logit dump (apply).
    #[arg(long)]
    pub test: PathBuf,
    #[arg(long, value_enum, default_value_t = Method::Ts)]
    pub method: Method,
    /// ECE bins for the before/after report.
    #[arg(long, default_value_t = 20)]
    pub bins: usize,
    /// Write the JSON here instead of stdout.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Also write the calibrated test logits here.
    #[arg(long)]
    pub write_logits: Option<PathBuf>,
}

#[derive(Debug, Serialize)]
struct SplitSummary {
    accuracy: f64,
    ece: f64,
    nll: f64,
}

fn summarize(dump: &LogitDump, bins: usize) -> esdkit::Result<SplitSummary> {
    let batch = batch_from_logits(&dump.logits, &dump.labels)?;
    let (nll, _) = esdkit::nn::nll_loss_and_grad(&dump.logits, &dump.labels, dump.num_classes)?;
    Ok(SplitSummary {
        accuracy: batch.accuracy(),
        ece: metrics::ece(&batch, &EceConfig::new(bins)?),
        nll,
    })
}

pub fn calibrate(a: &CalibrateArgs) -> Result<(), CliError> {
    let val = LogitDump::read(&a.val)?;
    let test = LogitDump::read(&a.test)?;
    if val.num_classes != test.num_classes {
        return Err(CliError::runtime(
            "validation and test dumps have different class counts",
        ));
    }
    let (parameters, calibrated, warning) = match a.method {
        Method::Ts => {
            let fit = fit_temperature(&val)?;
            let calibrated = fit.model.apply_dump(&test);
            let moved = test
                .rows()
                .zip(calibrated.rows())
                .filter(|(before, after)| argmax(before).0 != argmax(after).0)
                .count();
            if moved > 0 {
                return Err(CliError::verification(format!(
                    "temperature scaling changed the prediction of {moved} samples"
                )));
            }
            (
                json!({ "temperature": fit.model.temperature }),
                calibrated,
                fit.warning,
            )
        }
        Method::Vs => {
            let fit = fit_vector_scaling(&val)?;
            let calibrated = fit.model.apply_dump(&test)?;
            (
                json!({ "scale": fit.model.scale, "bias": fit.model.bias, "iterations": fit.iterations }),
                calibrated,
                None,
            )
        }
    };
    if let Some(w) = &warning {
        eprintln!("esdkit: warning: {w}");
    }
    if let Some(path) = &a.write_logits {
        calibrated.write(path)?;
    }
    let report = json!({
        "schema_version": SCHEMA_VERSION,
        "command": "calibrate",
        "method": match a.method { Method::Ts => "ts", Method::Vs => "vs" },
        "parameters": parameters,
        "before": summarize(&test, a.bins)?,
        "after": summarize(&calibrated, a.bins)?,
        "warning": warning,
    });
    emit_json(a.out.as_deref(), &report)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Study {
    All,
    Unbiasedness,
    Identity,
    Consistency,
    Gradient,
}

#[derive(Debug, Args)]
pub struct VerifyArgs {
    #[arg(long, value_enum, default_value_t = Study::All)]
    pub study: Study,
    /// R = 100 for every study. Full runs use 10,000 for the bias studies,
    /// 2,000 for consistency and 5,000 for the gradient study.
    #[arg(long)]
    pub smoke: bool,
    /// Override the replication count of every study.
    #[arg(long)]
    pub replications: Option<usize>,
    /// Exponent of the miscalibrated model `c(z) = z^gamma`.
    #[arg(long, default_value_t = 2.0)]
    pub gamma: f64,
    /// Batch size N for the unbiasedness and gradient studies.
    #[arg(long, default_value_t = 50)]
    pub n: usize,
    #[arg(long, default_value_t = 20_231_002)]
    pub seed: u64,
    /// Write the JSON here instead of stdout.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

pub fn verify(a: &VerifyArgs) -> Result<(), CliError> {
    let reps = |full: usize| a.replications.unwrap_or(if a.smoke { 100 } else { full });
    let power = SyntheticCalibrationModel::uniform_power(a.gamma, a.seed)
        .map_err(|e| CliError::usage(e.to_string()))?;
    let identity = SyntheticCalibrationModel::uniform_identity(a.seed);
    let want = |s: Study| a.study == Study::All || a.study == s;
    let mut studies = Vec::new();
    let mut lines = Vec::new();
    let mut pass = true;

    let mut unbiased =
        |name: &str, model: &SyntheticCalibrationModel| -> Result<(), CliError> {
            let mut results = oracle::unbiasedness_study(model, a.n, reps(10_000))
                .map_err(|e| CliError::usage(e.to_string()))?;
            if a.smoke {
                // R = 100 cannot resolve the naive bias; only its sign is checked.
                let unbiased_mean = results[1].mean;
                results[0].pass = results[0].mean >= unbiased_mean;
            }
            for r in &results {
                pass &= r.pass;
                lines.push(format!(
                "{name:<13} {:<9} N={:<5} R={:<6} mean {:+.6e} se {:.2e} truth {:.6e} z {:+7.2} {}",
                serde_json::to_value(r.estimator).map_err(Error::from)?.as_str().unwrap_or(""),
                r.n,
                r.r,
                r.mean,
                r.se,
                r.truth,
                r.z_score,
                if r.pass { "pass" } else { "FAIL" }
            ));
            }
            studies.push(json!({ "study": name, "results": results }));
            Ok(())
        };
    if want(Study::Unbiasedness) {
        unbiased("unbiasedness", &power)?;
    }
    if want(Study::Identity) {
        unbiased("identity", &identity)?;
    }
    if want(Study::Consistency) {
        let report = oracle::consistency_study(&power, &[10, 100, 1000], reps(2_000))
            .map_err(|e| CliError::usage(e.to_string()))?;
        let ok = report.pass.unwrap_or(true);
        pass &= ok;
        lines.push(format!(
            "consistency   variances {:?} ratios {:?} {}",
            report
                .results
                .iter()
                .map(|r| format!("{:.3e}", r.variance()))
                .collect::<Vec<_>>(),
            report
                .variance_ratios
                .iter()
                .map(|q| format!("{q:.3}"))
                .collect::<Vec<_>>(),
            if ok { "pass" } else { "FAIL" }
        ));
        studies.push(json!({ "study": "consistency", "report": report }));
    }
    if want(Study::Gradient) {
        let report = oracle::gradient_expectation_study(
            &power,
            a.n,
            reps(5_000),
            oracle::GRADIENT_STUDY_STEP,
        )
        .map_err(|e| CliError::usage(e.to_string()))?;
        pass &= report.pass;
        lines.push(format!(
            "gradient      analytic {:+.4e} (se {:.1e}) finite-diff {:+.4e} (se {:.1e}) z {:+.2} population {:+.4e} z {:+.2} {}",
            report.analytic_mean,
            report.analytic_se,
            report.finite_difference,
            report.finite_difference_se,
            report.z_score,
            report.population_derivative,
            report.population_z_score,
            if report.pass { "pass" } else { "FAIL" }
        ));
        studies.push(json!({ "study": "gradient", "report": report }));
    }
    for l in &lines {
        eprintln!("{l}");
    }
    let report = json!({
        "schema_version": SCHEMA_VERSION,
        "command": "verify",
        "smoke": a.smoke,
        "studies": studies,
        "pass": pass,
    });
    emit_json(a.out.as_deref(), &report)?;
    if pass {
        Ok(())
    } else {
        Err(CliError::verification("at least one study failed"))
    }
}

#[derive(Debug, Args)]
pub struct CurvesArgs {
    /// Prediction CSV or logit dump.
    pub input: PathBuf,
    /// Points of the uniform alpha grid on [0, 1].
    #[arg(long, default_value_t = 101)]
    pub points: usize,
    /// Write the CSV here instead of stdout.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

pub fn curves(a: &CurvesArgs) -> Result<(), CliError> {
    let grid = uniform_grid(a.points)?;
    let batch = read_batch(&a.input)?;
    let mut csv = String::from("alpha,cum_acc,cum_conf,d_alpha\n");
    for p in metrics::cumulative_curves(&batch, &grid)? {
        let _ = writeln!(
            csv,
            "{},{},{},{}",
            p.alpha, p.cum_acc, p.cum_conf, p.d_alpha
        );
    }
    match &a.out {
        Some(p) => Ok(io::write_string(p, &csv)?),
        None => {
            print!("{csv}");
            Ok(())
        }
    }
}
