//! The `compvae` command line: train, resume, compose, eval, dump-data and
//! kl-debug.
//!
//! Exit codes: 0 on success, 1 for usage, configuration or other errors,
//! 2 when training diverged past its restore budget.

pub mod plot;

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use candle_core::{DType, Device, Tensor};
use clap::{Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::compose::{compose, ComposeMode, Composition};
use crate::config::ExperimentConfig;
use crate::evalkit::{
    amplitude_vs_k_probe, color_field_probe, freq_recovery_probe, mc_kl_oracle, mc_variance_of_sum,
    mean_matched_fraction, random_family, GroundTruthSine, ModelGenerator,
};
use crate::latentcorr::{kl_corr_vs_diag, variance_of_sum};
use crate::nets::CompVae;
use crate::synthgen::{BatchStream, DataSpec, LabeledBatch, PartLabel, SineBatchSpec};
use crate::trainer::{read_metrics, Checkpoint, TrainSummary, Trainer};
use crate::{tensorio, Error};

#[derive(Debug, Parser)]
#[command(
    name = "compvae",
    version,
    about = "Compositional VAE over multisets of parts"
)]
pub struct Cli {
    /// Experiment config (TOML).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the config seed; also seeds generation and evaluation.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory (defaults to $COMPVAE_OUTPUT, then `runs`).
    #[arg(long, global = true, env = "COMPVAE_OUTPUT")]
    pub output: Option<PathBuf>,
    #[arg(long, global = true, value_enum, default_value_t = DeviceArg::Cpu)]
    pub device: DeviceArg,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum DeviceArg {
    Cpu,
    Accelerator,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Preset {
    SineReference,
    GradientReference,
    SineDesk,
    SineTiny,
    GradientTiny,
}

impl Preset {
    fn config(self) -> ExperimentConfig {
        match self {
            Preset::SineReference => ExperimentConfig::sine_reference(),
            Preset::GradientReference => ExperimentConfig::gradient_reference(),
            Preset::SineDesk => ExperimentConfig::sine_desk(),
            Preset::SineTiny => ExperimentConfig::sine_tiny(),
            Preset::GradientTiny => ExperimentConfig::gradient_tiny(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    Incremental,
    Single,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Suite {
    KlOracle,
    Freq,
    Amplitude,
    Color,
    All,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train from --config (or a built-in preset) into the output directory.
    Train {
        #[arg(long, value_enum, conflicts_with = "config")]
        preset: Option<Preset>,
        #[arg(long)]
        max_iterations: Option<usize>,
    },
    /// Continue a run from a checkpoint. Without --output the run directory
    /// holding the checkpoint is reused.
    Resume {
        checkpoint: PathBuf,
        #[arg(long)]
        max_iterations: Option<usize>,
    },
    /// Generate wholes from part labels: `3 1 4` (1D) or `red@0.2,-0.4` (2D).
    Compose {
        checkpoint: PathBuf,
        #[arg(required = true, num_args = 1..)]
        labels: Vec<PartLabel>,
        #[arg(long, value_enum, default_value_t = ModeArg::Incremental)]
        mode: ModeArg,
        /// Decoder draws saved next to each mean.
        #[arg(long, default_value_t = 4)]
        samples: usize,
    },
    /// Run evaluation probes and write `report.jsonl` plus `summary.txt`.
    Eval {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = Suite::All)]
        suite: Suite,
        /// Generations per probe.
        #[arg(long, default_value_t = 100)]
        trials: usize,
        /// Monte Carlo draws for the KL oracle.
        #[arg(long, default_value_t = 200_000)]
        mc_samples: usize,
        /// Part counts for the amplitude probe.
        #[arg(long, value_delimiter = ',', default_values_t = vec![1, 2, 4, 8])]
        ks: Vec<usize>,
    },
    /// Write generator batches to `data.safetensors` with a `manifest.txt`.
    DumpData {
        #[arg(long, default_value_t = 1)]
        batches: usize,
        /// Fixed part count; otherwise drawn per batch from the parts range.
        #[arg(long)]
        k: Option<usize>,
    },
    /// Print closed-form KL and variance-of-sum next to Monte Carlo estimates
    /// for a seeded random correlated family.
    KlDebug {
        #[arg(long, default_value_t = 3)]
        k: usize,
        #[arg(long, default_value_t = 4)]
        d: usize,
        #[arg(long, default_value_t = 200_000)]
        samples: usize,
    },
}

/// Parses `args`, runs the command and maps the outcome to an exit code.
pub fn main_with_args<I, T>(args: I) -> ExitCode
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

pub fn exit_code(e: &anyhow::Error) -> u8 {
    match e.downcast_ref::<Error>() {
        Some(Error::Diverged(_)) => 2,
        _ => 1,
    }
}

pub fn run(cli: Cli) -> Result<()> {
    if cli.device == DeviceArg::Accelerator {
        bail!("this build has no accelerator backend; use --device cpu");
    }
    let output = cli.output.clone();
    let out_root = || output.clone().unwrap_or_else(|| PathBuf::from("runs"));
    match cli.command {
        Command::Train {
            preset,
            max_iterations,
        } => {
            let mut cfg = match (&cli.config, preset) {
                (Some(path), _) => ExperimentConfig::load(path)?,
                (None, Some(p)) => p.config(),
                (None, None) => bail!("train needs --config PATH or --preset NAME"),
            };
            if let Some(seed) = cli.seed {
                cfg.seed = seed;
            }
            if let Some(m) = max_iterations {
                cfg.train.max_iterations = m;
            }
            cfg.validate()?;
            let dir = out_root();
            let mut trainer = Trainer::new(cfg, Some(dir.clone()))?;
            finish_training(&mut trainer, &dir)
        }
        Command::Resume {
            checkpoint,
            max_iterations,
        } => {
            if cli.seed.is_some() || cli.config.is_some() {
                bail!("resume takes its seed and config from the checkpoint");
            }
            let dir = match output {
                Some(d) => d,
                None => run_dir_of(&checkpoint)?,
            };
            let mut trainer = Trainer::resume(&checkpoint, Some(dir.clone()), max_iterations)?;
            finish_training(&mut trainer, &dir)
        }
        Command::Compose {
            checkpoint,
            labels,
            mode,
            samples,
        } => cmd_compose(
            &checkpoint,
            &labels,
            mode,
            samples,
            cli.seed.unwrap_or(0),
            &out_root(),
        ),
        Command::Eval {
            checkpoint,
            suite,
            trials,
            mc_samples,
            ks,
        } => cmd_eval(
            checkpoint.as_deref(),
            cli.config.as_deref(),
            suite,
            EvalOptions {
                trials,
                mc_samples,
                ks,
                seed: cli.seed.unwrap_or(0),
            },
            &out_root(),
        ),
        Command::DumpData { batches, k } => {
            let path = cli
                .config
                .as_deref()
                .ok_or_else(|| anyhow!("dump-data needs --config PATH"))?;
            let mut cfg = ExperimentConfig::load(path)?;
            if let Some(seed) = cli.seed {
                cfg.seed = seed;
            }
            cmd_dump_data(&cfg, batches, k, &out_root())
        }
        Command::KlDebug { k, d, samples } => {
            print!("{}", kl_debug_report(k, d, samples, cli.seed.unwrap_or(0))?);
            Ok(())
        }
    }
}

/// `<run>/checkpoints/x.safetensors` belongs to `<run>`.
fn run_dir_of(checkpoint: &Path) -> Result<PathBuf> {
    let parent = checkpoint
        .parent()
        .ok_or_else(|| anyhow!("cannot infer a run directory from {}", checkpoint.display()))?;
    if parent.file_name().is_some_and(|n| n == "checkpoints") {
        Ok(parent
            .parent()
            .map_or_else(|| PathBuf::from("."), Path::to_path_buf))
    } else {
        Ok(parent.to_path_buf())
    }
}

fn finish_training(trainer: &mut Trainer, dir: &Path) -> Result<()> {
    let result = trainer.run();
    let metrics = dir.join("metrics.tsv");
    let rows = read_metrics(&metrics)?;
    plot::loss_plot(&rows, &dir.join("loss.svg"))?;
    let summary: TrainSummary = result?;
    println!(
        "{} iterations ({:?}), {} restores",
        summary.iterations, summary.stop, summary.restores
    );
    if let Some(r) = summary.last {
        println!(
            "last window: L_w {:.3} L_z {:.3} L_x {:.3} ELBO {:.3} bits",
            r.l_w, r.l_z, r.l_x, r.elbo
        );
    }
    if let Some(ck) = trainer.latest_checkpoint() {
        println!("checkpoint: {}", ck.display());
    }
    Ok(())
}

#[derive(Serialize)]
struct ComposeRecord<'a> {
    checkpoint_iteration: usize,
    problem: &'a str,
    mode: &'a str,
    seed: u64,
    samples: usize,
    /// Labels in generation order (canonical order in single mode).
    labels: Vec<String>,
}

pub fn cmd_compose(
    checkpoint: &Path,
    labels: &[PartLabel],
    mode: ModeArg,
    samples: usize,
    seed: u64,
    out: &Path,
) -> Result<()> {
    let ck = Checkpoint::load(checkpoint)?;
    let want = match labels.first() {
        Some(PartLabel::Frequency(_)) => "sine1d",
        Some(PartLabel::Site { .. }) => "gradient2d",
        None => bail!("compose needs at least one label"),
    };
    if labels
        .iter()
        .any(|l| (l.frequency().is_some()) != (want == "sine1d"))
    {
        bail!("labels mix frequencies and colored sites");
    }
    ck.expect_problem(want)?;
    let model = ck.build_model()?;
    let mode_c = match mode {
        ModeArg::Incremental => ComposeMode::Incremental,
        ModeArg::Single => ComposeMode::Single,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let c = compose(&model, labels, mode_c, samples, &mut rng)?;
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;

    let record = ComposeRecord {
        checkpoint_iteration: ck.iteration(),
        problem: want,
        mode: match mode {
            ModeArg::Incremental => "incremental",
            ModeArg::Single => "single",
        },
        seed,
        samples,
        labels: c.parts.iter().map(|g| g.labels[0].to_string()).collect(),
    };
    write_compose_tensors(&model, &c, &record, &out.join("compose.safetensors"))?;
    if want == "sine1d" {
        render_curves(&c, out)
    } else {
        render_images(&c, out)
    }
}

fn write_compose_tensors(
    model: &CompVae,
    c: &Composition,
    record: &ComposeRecord<'_>,
    path: &Path,
) -> Result<()> {
    let x_shape = model.config().x_shape();
    let stack = |means: Vec<&[f64]>| -> Result<Tensor> {
        let mut shape = vec![means.len()];
        shape.extend(&x_shape);
        let flat: Vec<f64> = means.into_iter().flatten().copied().collect();
        Ok(Tensor::from_vec(flat, shape, &Device::Cpu)?)
    };
    let mut tensors = BTreeMap::new();
    tensors.insert(
        "part_means".into(),
        stack(c.parts.iter().map(|g| g.mean.as_slice()).collect())?,
    );
    tensors.insert(
        "whole_means".into(),
        stack(c.wholes.iter().map(|g| g.mean.as_slice()).collect())?,
    );
    if record.samples > 0 {
        for (name, gens) in [("part_samples", &c.parts), ("whole_samples", &c.wholes)] {
            let t = stack(
                gens.iter()
                    .flat_map(|g| g.samples.iter().map(Vec::as_slice))
                    .collect(),
            )?;
            let mut shape = vec![gens.len(), record.samples];
            shape.extend(&x_shape);
            tensors.insert(name.to_string(), t.reshape(shape)?);
        }
    }
    let meta = HashMap::from([("compose".to_string(), serde_json::to_string(record)?)]);
    tensorio::save(path, &tensors, meta)?;
    Ok(())
}

fn render_curves(c: &Composition, out: &Path) -> Result<()> {
    for (i, p) in c.parts.iter().enumerate() {
        let title = format!("part {}: frequency {}", i + 1, p.labels[0]);
        plot::curve_plot(
            &title,
            &p.mean,
            &p.samples,
            &out.join(format!("part_{}.svg", i + 1)),
        )?;
    }
    for (i, w) in c.wholes.iter().enumerate() {
        let names: Vec<String> = w.labels.iter().map(ToString::to_string).collect();
        let title = format!("whole from {{{}}}", names.join(", "));
        plot::curve_plot(
            &title,
            &w.mean,
            &w.samples,
            &out.join(format!("whole_{}.svg", i + 1)),
        )?;
    }
    // one row per step: the part added at that step, then the whole so far
    let rows: Vec<Vec<(String, Vec<f64>)>> = if c.wholes.len() == c.parts.len() {
        c.parts
            .iter()
            .zip(&c.wholes)
            .map(|(p, w)| {
                vec![
                    (format!("part {}", p.labels[0]), p.mean.clone()),
                    (format!("whole, {} parts", w.labels.len()), w.mean.clone()),
                ]
            })
            .collect()
    } else {
        let mut rows: Vec<Vec<(String, Vec<f64>)>> = c
            .parts
            .iter()
            .map(|p| vec![(format!("part {}", p.labels[0]), p.mean.clone())])
            .collect();
        for w in &c.wholes {
            rows.push(vec![(
                format!("whole, {} parts", w.labels.len()),
                w.mean.clone(),
            )]);
        }
        rows
    };
    plot::curve_panel(&rows, &out.join("panel.svg"))
}

fn render_images(c: &Composition, out: &Path) -> Result<()> {
    const SCALE: u32 = 4;
    for (i, p) in c.parts.iter().enumerate() {
        let mut row = vec![p.mean.clone()];
        row.extend(p.samples.iter().cloned());
        plot::image_panel(&[row], SCALE, &out.join(format!("part_{}.png", i + 1)))?;
    }
    for (i, w) in c.wholes.iter().enumerate() {
        let mut row = vec![w.mean.clone()];
        row.extend(w.samples.iter().cloned());
        plot::image_panel(&[row], SCALE, &out.join(format!("whole_{}.png", i + 1)))?;
    }
    let rows = vec![
        c.parts.iter().map(|g| g.mean.clone()).collect(),
        c.wholes.iter().map(|g| g.mean.clone()).collect(),
    ];
    plot::image_panel(&rows, SCALE, &out.join("panel.png"))
}

pub struct EvalOptions {
    pub trials: usize,
    pub mc_samples: usize,
    pub ks: Vec<usize>,
    pub seed: u64,
}

#[derive(Serialize)]
#[serde(tag = "probe", rename_all = "snake_case")]
enum Record {
    KlOracle {
        k: usize,
        d: usize,
        closed_form: f64,
        monte_carlo: f64,
        std_err: f64,
        rel_err: f64,
        agrees: bool,
    },
    Freq {
        target_freqs: Vec<u32>,
        detected_freqs: Vec<u32>,
        matched_fraction: f64,
    },
    Amplitude {
        source: &'static str,
        k: usize,
        mean_abs: f64,
        all_finite: bool,
    },
    Color {
        labels: Vec<String>,
        error: f64,
        ground_truth_error: f64,
    },
}

fn suites(s: Suite) -> Vec<Suite> {
    match s {
        Suite::All => vec![Suite::KlOracle, Suite::Freq, Suite::Amplitude, Suite::Color],
        other => vec![other],
    }
}

pub fn cmd_eval(
    checkpoint: Option<&Path>,
    config: Option<&Path>,
    suite: Suite,
    opts: EvalOptions,
    out: &Path,
) -> Result<()> {
    let ck = checkpoint.map(Checkpoint::load).transpose()?;
    let model = ck.as_ref().map(Checkpoint::build_model).transpose()?;
    let problem = ck.as_ref().map(Checkpoint::problem_name);
    let mut records = Vec::new();
    let mut summary = String::new();
    for s in suites(suite) {
        // each probe gets its own stream so suites do not perturb each other
        let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
        rng.set_stream(s as u64);
        let applicable = match s {
            Suite::KlOracle => true,
            Suite::Freq => problem == Some("sine1d"),
            Suite::Amplitude => problem != Some("gradient2d"),
            Suite::Color => problem == Some("gradient2d"),
            Suite::All => unreachable!(),
        };
        if !applicable {
            if suite == Suite::All {
                continue;
            }
            bail!(
                "suite {s:?} needs a {} checkpoint",
                if s == Suite::Color { "2D" } else { "1D" }
            );
        }
        match s {
            Suite::KlOracle => {
                let _ = writeln!(summary, "KL oracle ({} Monte Carlo draws)", opts.mc_samples);
                let _ = writeln!(
                    summary,
                    "  K  d   closed-form    monte-carlo    std-err   rel-err  agrees"
                );
                for k in [1, 2, 4, 8] {
                    for d in [2, 8] {
                        let (q, p) = random_family(&mut rng, k, d)?;
                        let closed = kl_corr_vs_diag(&q, &p)?.to_scalar::<f64>()?;
                        let mc = mc_kl_oracle(&q, &p, opts.mc_samples, &mut rng)?;
                        let rel_err = (closed - mc.mean).abs() / closed.abs().max(1e-12);
                        let agrees =
                            rel_err <= 0.01 || (closed - mc.mean).abs() <= 3.0 * mc.std_err;
                        let _ = writeln!(
                            summary,
                            "{k:>3} {d:>2} {closed:>14.6} {:>14.6} {:>10.2e} {rel_err:>9.2e}  {agrees}",
                            mc.mean, mc.std_err
                        );
                        records.push(Record::KlOracle {
                            k,
                            d,
                            closed_form: closed,
                            monte_carlo: mc.mean,
                            std_err: mc.std_err,
                            rel_err,
                            agrees,
                        });
                    }
                }
            }
            Suite::Freq => {
                let (model, ck) = (
                    model.as_ref().expect("checked"),
                    ck.as_ref().expect("checked"),
                );
                let DataSpec::Sine1d(spec) = &ck.config.data else {
                    bail!("checkpoint data spec is not 1D");
                };
                let max_k = ck.config.train.curriculum_max_k;
                let reports = freq_recovery_probe(
                    model,
                    spec.resolution,
                    spec.freq_range,
                    max_k,
                    opts.trials,
                    &mut rng,
                )?;
                let _ = writeln!(
                    summary,
                    "Frequency recovery over {} generations (K <= {max_k}): mean matched fraction {:.3}",
                    reports.len(),
                    mean_matched_fraction(&reports)
                );
                records.extend(reports.into_iter().map(|r| Record::Freq {
                    target_freqs: r.target_freqs,
                    detected_freqs: r.detected_freqs,
                    matched_fraction: r.matched_fraction,
                }));
            }
            Suite::Amplitude => {
                let (rows, source, range) = match (&model, &ck) {
                    (Some(m), Some(ck)) => {
                        let DataSpec::Sine1d(spec) = &ck.config.data else {
                            bail!("checkpoint data spec is not 1D");
                        };
                        let mut gen = ModelGenerator {
                            model: m,
                            rng: ChaCha8Rng::seed_from_u64(opts.seed ^ 0x5eed),
                        };
                        let rows = amplitude_vs_k_probe(
                            &mut gen,
                            &opts.ks,
                            opts.trials,
                            spec.freq_range,
                            &mut rng,
                        )?;
                        (rows, "model", spec.freq_range)
                    }
                    _ => {
                        let spec = match config {
                            Some(p) => match ExperimentConfig::load(p)?.data {
                                DataSpec::Sine1d(s) => s,
                                DataSpec::Gradient2d(_) => {
                                    bail!("amplitude probe needs a 1D data spec")
                                }
                            },
                            None => SineBatchSpec::default(),
                        };
                        let range = spec.freq_range;
                        let mut gen = GroundTruthSine {
                            spec,
                            rng: ChaCha8Rng::seed_from_u64(opts.seed ^ 0x5eed),
                        };
                        let rows =
                            amplitude_vs_k_probe(&mut gen, &opts.ks, opts.trials, range, &mut rng)?;
                        (rows, "ground_truth", range)
                    }
                };
                let _ = writeln!(
                    summary,
                    "Amplitude vs K ({source}, frequencies {}..={}, {} wholes each)",
                    range.0, range.1, opts.trials
                );
                for r in &rows {
                    let _ = writeln!(
                        summary,
                        "  K={:<3} mean |x| {:.4}  finite {}",
                        r.k, r.mean_abs, r.all_finite
                    );
                }
                let monotone = rows.windows(2).all(|w| w[1].mean_abs > w[0].mean_abs);
                let _ = writeln!(summary, "  strictly increasing: {monotone}");
                records.extend(rows.into_iter().map(|r| Record::Amplitude {
                    source,
                    k: r.k,
                    mean_abs: r.mean_abs,
                    all_finite: r.all_finite,
                }));
            }
            Suite::Color => {
                let (model, ck) = (
                    model.as_ref().expect("checked"),
                    ck.as_ref().expect("checked"),
                );
                let DataSpec::Gradient2d(spec) = &ck.config.data else {
                    bail!("checkpoint data spec is not 2D");
                };
                let max_k = ck.config.train.curriculum_max_k;
                let rows = color_field_probe(model, spec, max_k, opts.trials, &mut rng)?;
                let mean = |f: fn(&crate::evalkit::ColorFieldRow) -> f64| {
                    rows.iter().map(f).sum::<f64>() / rows.len().max(1) as f64
                };
                let _ = writeln!(
                    summary,
                    "Color-field error over {} generations: model {:.4}, ground-truth sample {:.4}",
                    rows.len(),
                    mean(|r| r.error),
                    mean(|r| r.ground_truth_error)
                );
                records.extend(rows.into_iter().map(|r| Record::Color {
                    labels: r.labels.iter().map(ToString::to_string).collect(),
                    error: r.error,
                    ground_truth_error: r.ground_truth_error,
                }));
            }
            Suite::All => unreachable!(),
        }
    }
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let mut jsonl = String::new();
    for r in &records {
        jsonl.push_str(&serde_json::to_string(r)?);
        jsonl.push('\n');
    }
    let report = out.join("report.jsonl");
    std::fs::write(&report, jsonl).with_context(|| format!("writing {}", report.display()))?;
    let path = out.join("summary.txt");
    std::fs::write(&path, &summary).with_context(|| format!("writing {}", path.display()))?;
    print!("{summary}");
    Ok(())
}

fn batch_tensors(
    b: usize,
    batch: &LabeledBatch,
    tensors: &mut BTreeMap<String, Tensor>,
) -> Result<()> {
    let dev = &Device::Cpu;
    tensors.insert(
        format!("batch{b}.x"),
        Tensor::from_vec(batch.data.clone(), batch.shape.clone(), dev)?,
    );
    let (n, k) = (batch.batch_size(), batch.parts());
    let first = batch.labels.iter().flatten().next();
    match first {
        Some(PartLabel::Frequency(_)) => {
            let f: Vec<u32> = batch
                .labels
                .iter()
                .flatten()
                .filter_map(PartLabel::frequency)
                .collect();
            tensors.insert(
                format!("batch{b}.frequencies"),
                Tensor::from_vec(f, (n, k), dev)?,
            );
        }
        Some(PartLabel::Site { .. }) => {
            let mut colors = Vec::with_capacity(n * k);
            let mut locs: Vec<f64> = Vec::with_capacity(2 * n * k);
            for l in batch.labels.iter().flatten() {
                if let PartLabel::Site { color, location } = l {
                    colors.push(color.id());
                    locs.extend(location);
                }
            }
            tensors.insert(
                format!("batch{b}.colors"),
                Tensor::from_vec(colors, (n, k), dev)?,
            );
            tensors.insert(
                format!("batch{b}.locations"),
                Tensor::from_vec(locs, (n, k, 2), dev)?,
            );
        }
        None => {}
    }
    Ok(())
}

pub fn cmd_dump_data(
    cfg: &ExperimentConfig,
    batches: usize,
    k: Option<usize>,
    out: &Path,
) -> Result<()> {
    let spec = cfg.effective_data();
    let (lo, hi) = spec.parts_range();
    let mut stream = BatchStream::new(spec.clone(), hi)?;
    let mut tensors = BTreeMap::new();
    let mut manifest = String::new();
    let _ = writeln!(manifest, "# compvae data dump");
    let _ = writeln!(manifest, "file = \"data.safetensors\"");
    let _ = writeln!(manifest, "seed = {}", spec.seed());
    let _ = writeln!(manifest, "batches = {batches}");
    for b in 0..batches {
        let batch = match k {
            Some(k) => {
                if !(lo..=hi).contains(&k) {
                    bail!("k = {k} outside the parts range {lo}..={hi}");
                }
                let mut rng = stream.rng().clone();
                let batch = spec.sample(k, &mut rng)?;
                stream.set_rng(rng);
                batch
            }
            None => stream.next_batch()?,
        };
        batch_tensors(b, &batch, &mut tensors)?;
        let _ = writeln!(
            manifest,
            "batch{b}.x: shape {:?}, dtype f64; parts per example {}",
            batch.shape,
            batch.parts()
        );
    }
    let _ = writeln!(manifest, "labels: batch<i>.frequencies u32 (B, K) for 1D; batch<i>.colors u32 (B, K) and batch<i>.locations f64 (B, K, 2) for 2D");
    let _ = writeln!(manifest, "\n[spec]");
    manifest.push_str(&toml::to_string(&spec).map_err(|e| anyhow!("serializing spec: {e}"))?);
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let meta = HashMap::from([("spec".to_string(), serde_json::to_string(&spec)?)]);
    tensorio::save(&out.join("data.safetensors"), &tensors, meta)?;
    let path = out.join("manifest.txt");
    std::fs::write(&path, manifest).with_context(|| format!("writing {}", path.display()))?;
    println!("wrote {batches} batches to {}", out.display());
    Ok(())
}

/// Text report comparing closed forms with Monte Carlo estimates for one
/// seeded random family.
pub fn kl_debug_report(k: usize, d: usize, samples: usize, seed: u64) -> Result<String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (q, p) = random_family(&mut rng, k, d)?;
    let closed = kl_corr_vs_diag(&q, &p)?.to_scalar::<f64>()?;
    let mc = mc_kl_oracle(&q, &p, samples, &mut rng)?;
    let analytic: Vec<f64> = variance_of_sum(&q)?.to_dtype(DType::F64)?.to_vec1()?;
    let mc_var = mc_variance_of_sum(&q, samples, &mut rng)?;
    let sigma: Vec<f64> = q.sigma()?.flatten_all()?.to_vec1()?;
    let rho: Vec<f64> = q.rho()?.flatten_all()?.to_vec1()?;
    let mut s = String::new();
    let _ = writeln!(
        s,
        "random family: K = {k}, d = {d}, seed = {seed}, {samples} Monte Carlo draws"
    );
    let _ = writeln!(
        s,
        "KL(q || p): closed form {closed:.6}, Monte Carlo {:.6} +/- {:.2e} (rel. diff {:.2e})",
        mc.mean,
        mc.std_err,
        (closed - mc.mean).abs() / closed.abs().max(1e-12)
    );
    let _ = writeln!(s, "Var(sum_i w_ij):");
    let _ = writeln!(
        s,
        "   j      analytic   monte-carlo    std-err  sum(sigma^2)(1-sum rho)^2"
    );
    for j in 0..d {
        let s2: f64 = (0..k).map(|i| sigma[i * d + j].powi(2)).sum();
        let r: f64 = (0..k).map(|i| rho[i * d + j]).sum();
        let _ = writeln!(
            s,
            "{j:>4} {:>13.6} {:>13.6} {:>10.2e} {:>13.6}",
            analytic[j],
            mc_var[j].mean,
            mc_var[j].std_err,
            s2 * (1.0 - r).powi(2)
        );
    }
    Ok(s)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_labels_and_rejects_unknown_suite() {
        let cli =
            Cli::try_parse_from(["compvae", "compose", "ck.safetensors", "red@0.2,-0.4", "3"])
                .unwrap();
        let Command::Compose { labels, .. } = cli.command else {
            panic!()
        };
        assert_eq!(labels.len(), 2);
        assert!(Cli::try_parse_from(["compvae", "eval", "--suite", "nope"]).is_err());
    }

    #[test]
    fn run_dir_is_inferred_from_checkpoint_path() {
        assert_eq!(
            run_dir_of(Path::new("runs/a/checkpoints/latest.safetensors")).unwrap(),
            PathBuf::from("runs/a")
        );
        assert_eq!(
            run_dir_of(Path::new("x/ck.safetensors")).unwrap(),
            PathBuf::from("x")
        );
    }

    #[test]
    fn divergence_maps_to_exit_code_two() {
        assert_eq!(exit_code(&anyhow::Error::new(Error::Diverged(3))), 2);
        let wrapped = anyhow::Error::new(Error::Diverged(3)).context("training");
        assert_eq!(exit_code(&wrapped), 2);
        assert_eq!(exit_code(&anyhow!("other")), 1);
    }

    #[test]
    fn kl_debug_report_lists_every_coordinate() {
        let r = kl_debug_report(3, 2, 2000, 1).unwrap();
        assert!(r.contains("closed form"));
        assert_eq!(r.lines().count(), 4 + 2);
    }
}
