//! The four commands.

use std::path::{Path, PathBuf};
use std::process::Command as Process;

use cat_core::trainer::{
    adversarial_probabilities, check_metrics, load_metrics_csv, save_metrics_csv, Clock, FrozenClock, SystemClock,
};
use cat_core::{
    init_network, load_mnist_idx, mean_cosine_similarity, mlp_specs, rng, robust_accuracy, small_cnn_specs, split,
    Dataset, FeatureShape, MetricsRecord, Network, Scheme, Session, SplitTag, Tensor,
};
use rand::Rng as _;
use serde::Serialize;

use crate::spec::{CommandSpec, DatasetSpec, Manifest, ModelSpec, RunSpec};
use crate::summary::{fastest, summarize, write_summary, SummaryRow};
use crate::CliError;

pub const METRICS_FILE: &str = "metrics.csv";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const CHECKPOINT_FILE: &str = "checkpoint.catn";
pub const WEIGHTS_FILE: &str = "weights.csv";
pub const SUMMARY_FILE: &str = "summary.csv";
pub const FIG1_FILE: &str = "fig1.csv";
pub const EVAL_FILE: &str = "eval.json";

/// Directory of one sweep member.
pub fn sweep_member_dir(out: &Path, sampling_number: usize) -> PathBuf {
    out.join(format!("sn_{sampling_number}"))
}

pub fn execute(spec: &RunSpec) -> Result<(), CliError> {
    spec.check_paths()?;
    create_dir(&spec.output_dir)?;
    spec.manifest().save(&spec.output_dir.join(MANIFEST_FILE))?;
    match &spec.command {
        CommandSpec::Train => run_train(spec).map(|_| ()),
        CommandSpec::Sweep { .. } => run_sweep(spec),
        CommandSpec::Fig1 { .. } => run_fig1(spec),
        CommandSpec::Eval { .. } => run_eval(spec),
    }
}

fn create_dir(dir: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))
}

/// Training and evaluation sets for a spec.
pub fn load_data(spec: &RunSpec) -> Result<(Dataset, Dataset), CliError> {
    Ok(match &spec.dataset {
        DatasetSpec::Mnist {
            train_images,
            train_labels,
            test_images,
            test_labels,
        } => {
            let train = load_mnist_idx(train_images, train_labels)?;
            let test: Dataset = load_mnist_idx(test_images, test_labels)?;
            (train, test.with_split(SplitTag::Eval))
        }
        DatasetSpec::Blobs {
            n,
            k,
            d,
            spread,
            eval_fraction,
        } => {
            let all = cat_core::make_blobs(*n, *k, *d, *spread, spec.train.seed)?;
            split(&all, *eval_fraction, spec.train.seed)?
        }
    })
}

pub fn build_network(spec: &RunSpec, train: &Dataset) -> Result<Network, CliError> {
    let classes = train.num_classes();
    let seed = spec.train.seed;
    Ok(match &spec.model {
        ModelSpec::Mlp { hidden } => init_network(&mlp_specs(train.dim(), hidden, classes), seed)?,
        ModelSpec::Cnn => match train.feature_shape() {
            shape @ FeatureShape::Image {
                channels,
                height,
                width,
            } => Network::new(shape, &small_cnn_specs(channels, height, width, classes), seed)?,
            FeatureShape::Flat(_) => {
                return Err(CliError::Usage("the convolutional model needs image data".into()))
            }
        },
    })
}

fn clock(spec: &RunSpec) -> Box<dyn Clock> {
    if spec.frozen_clock {
        Box::new(FrozenClock)
    } else {
        Box::new(SystemClock::new())
    }
}

fn report(r: &MetricsRecord) {
    eprintln!(
        "iter {:>6}  natural {:.4}  robust {:.4}  crafted {:>9}  {:.1}s",
        r.iteration, r.natural_acc, r.robust_acc, r.cumulative_crafted, r.wall_seconds
    );
}

/// Steps `session` up to `until`, evaluating on the configured cadence.
fn advance(session: &mut Session<'_>, until: u64, records: &mut Vec<MetricsRecord>) -> Result<(), CliError> {
    let every = session.config().eval_every as u64;
    while session.iteration() < until {
        session.step()?;
        if session.iteration() % every == 0 {
            let r = session.evaluate()?;
            report(&r);
            records.push(r);
        }
    }
    Ok(())
}

/// Trains and writes metrics, the final checkpoint and (for CAT) the weight table.
pub fn run_train(spec: &RunSpec) -> Result<Vec<MetricsRecord>, CliError> {
    let (train, eval) = load_data(spec)?;
    let net = build_network(spec, &train)?;
    let mut session = Session::with_clock(net, &train, &eval, spec.train.clone(), clock(spec))?;
    let mut records = Vec::new();
    advance(&mut session, spec.train.iterations as u64, &mut records)?;
    let out = &spec.output_dir;
    save_metrics_csv(&records, out.join(METRICS_FILE))?;
    session.network().save(out.join(CHECKPOINT_FILE))?;
    if let Some(table) = session.weights() {
        table.save_csv(out.join(WEIGHTS_FILE))?;
    }
    Ok(records)
}

fn run_sweep(spec: &RunSpec) -> Result<(), CliError> {
    let CommandSpec::Sweep {
        sampling_numbers,
        thresholds,
        natural_threshold,
        parallel,
    } = &spec.command
    else {
        unreachable!("sweep spec");
    };
    let members: Vec<RunSpec> = sampling_numbers
        .iter()
        .map(|&s| {
            let mut m = spec.clone();
            m.command = CommandSpec::Train;
            m.train.scheme = Scheme::Cat;
            m.train.sampling_number = s;
            m.output_dir = sweep_member_dir(&spec.output_dir, s);
            m
        })
        .collect();
    for m in &members {
        create_dir(&m.output_dir)?;
        m.manifest().save(&m.output_dir.join(MANIFEST_FILE))?;
    }
    if *parallel {
        run_children(&members)?;
    } else {
        for m in &members {
            eprintln!("sampling number {}", m.train.sampling_number);
            run_train(m)?;
        }
    }

    let mut rows: Vec<SummaryRow> = Vec::new();
    for m in &members {
        let records = load_metrics_csv(m.output_dir.join(METRICS_FILE))?;
        check_metrics(&records)?;
        rows.extend(summarize(m.train.sampling_number, &records, thresholds, *natural_threshold));
    }
    let path = spec.output_dir.join(SUMMARY_FILE);
    let file = std::fs::File::create(&path).map_err(|e| CliError::io(&path, e))?;
    write_summary(&rows, file)?;
    for (t, best) in fastest(&rows) {
        match best {
            Some((s, b)) => println!("robust {t}: fastest sampling number {s} ({b} crafted)"),
            None => println!("robust {t}: not reached"),
        }
    }
    Ok(())
}

/// Runs each member as a separate `rerun` process.
fn run_children(members: &[RunSpec]) -> Result<(), CliError> {
    let exe = std::env::current_exe().map_err(|e| CliError::Runtime(format!("locating executable: {e}")))?;
    let mut children = Vec::new();
    for m in members {
        let child = Process::new(&exe)
            .arg("rerun")
            .arg(m.output_dir.join(MANIFEST_FILE))
            .spawn()
            .map_err(|e| CliError::Runtime(format!("spawning {}: {e}", exe.display())))?;
        children.push((m.train.sampling_number, child));
    }
    let mut failed = Vec::new();
    for (s, mut child) in children {
        let status = child
            .wait()
            .map_err(|e| CliError::Runtime(format!("waiting for sampling number {s}: {e}")))?;
        if !status.success() {
            failed.push(s);
        }
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::Runtime(format!("runs for sampling numbers {failed:?} failed")))
    }
}

/// One row of `fig1.csv`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Fig1Row {
    pub iteration: u64,
    pub next_iteration: u64,
    pub similarity: f64,
    pub baseline_iteration: Option<u64>,
    pub baseline_similarity: Option<f64>,
}

/// Pairs every checkpoint with its successor and with a random checkpoint
/// that is neither itself nor its successor.
pub fn similarity_rows(iterations: &[u64], probs: &[Tensor], seed: u64) -> Result<Vec<Fig1Row>, CliError> {
    let c = probs.len();
    let mut rows = Vec::with_capacity(c.saturating_sub(1));
    for i in 0..c.saturating_sub(1) {
        let similarity = mean_cosine_similarity(&probs[i], &probs[i + 1])?;
        let others: Vec<usize> = (0..c).filter(|&j| j != i && j != i + 1).collect();
        let (baseline_iteration, baseline_similarity) = if others.is_empty() {
            (None, None)
        } else {
            let mut r = rng::stream(seed, "fig1-baseline", &[i as u64]);
            let j = others[r.random_range(0..others.len())];
            (Some(iterations[j]), Some(mean_cosine_similarity(&probs[i], &probs[j])?))
        };
        rows.push(Fig1Row {
            iteration: iterations[i],
            next_iteration: iterations[i + 1],
            similarity,
            baseline_iteration,
            baseline_similarity,
        });
    }
    Ok(rows)
}

fn write_fig1(rows: &[Fig1Row], path: &Path) -> Result<(), CliError> {
    let fail = |e: csv::Error| CliError::Runtime(format!("{}: {e}", path.display()));
    let mut w = csv::Writer::from_path(path).map_err(fail)?;
    w.write_record(["iteration", "next_iteration", "similarity", "baseline_iteration", "baseline_similarity"])
        .map_err(fail)?;
    for r in rows {
        let na = || "NA".to_owned();
        w.write_record([
            r.iteration.to_string(),
            r.next_iteration.to_string(),
            r.similarity.to_string(),
            r.baseline_iteration.map_or_else(na, |v| v.to_string()),
            r.baseline_similarity.map_or_else(na, |v| v.to_string()),
        ])
        .map_err(fail)?;
    }
    w.flush().map_err(|e| CliError::io(path, e))
}

fn run_fig1(spec: &RunSpec) -> Result<(), CliError> {
    let CommandSpec::Fig1 { checkpoints, examples } = spec.command else {
        unreachable!("fig1 spec");
    };
    let (train, eval) = load_data(spec)?;
    let net = build_network(spec, &train)?;
    let (x, y) = train.head(examples.min(train.len()))?;
    let attack = spec
        .train
        .attack
        .clone()
        .with_seed(rng::derive_seed(spec.train.seed, "fig1-attack", &[spec.train.attack.seed]));
    let spacing = (spec.train.iterations / (checkpoints - 1)) as u64;
    let ckpt_dir = spec.output_dir.join("checkpoints");
    create_dir(&ckpt_dir)?;

    let mut session = Session::with_clock(net, &train, &eval, spec.train.clone(), clock(spec))?;
    let mut records = Vec::new();
    let mut iterations = Vec::with_capacity(checkpoints);
    let mut probs = Vec::with_capacity(checkpoints);
    for c in 0..checkpoints as u64 {
        advance(&mut session, c * spacing, &mut records)?;
        let net = session.network();
        net.save(ckpt_dir.join(format!("iter_{:06}.catn", c * spacing)))?;
        iterations.push(c * spacing);
        probs.push(adversarial_probabilities(net, &x, &y, &attack)?);
    }
    save_metrics_csv(&records, spec.output_dir.join(METRICS_FILE))?;

    let rows = similarity_rows(&iterations, &probs, spec.train.seed)?;
    write_fig1(&rows, &spec.output_dir.join(FIG1_FILE))?;
    let mean = |v: Vec<f64>| v.iter().sum::<f64>() / v.len().max(1) as f64;
    let baseline: Vec<f64> = rows.iter().filter_map(|r| r.baseline_similarity).collect();
    println!("neighbour similarity {:.4}", mean(rows.iter().map(|r| r.similarity).collect()));
    if !baseline.is_empty() {
        println!("random-pair baseline {:.4}", mean(baseline));
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, serde::Deserialize)]
pub struct EvalReport {
    pub checkpoint: PathBuf,
    pub examples: usize,
    pub natural_acc: f64,
    pub robust_acc: f64,
}

fn run_eval(spec: &RunSpec) -> Result<(), CliError> {
    let CommandSpec::Eval { checkpoint } = &spec.command else {
        unreachable!("eval spec");
    };
    let net = Network::load(checkpoint)?;
    let (_, eval) = load_data(spec)?;
    let (x, y) = eval.head(spec.train.eval_size.min(eval.len()))?;
    let atk = spec.train.evaluation_attack();
    let atk = atk
        .clone()
        .with_seed(rng::derive_seed(spec.train.seed, "eval-attack", &[atk.seed]));
    let report = EvalReport {
        checkpoint: checkpoint.clone(),
        examples: y.len(),
        natural_acc: net.accuracy(&x, &y)?,
        robust_acc: robust_accuracy(&net, &x, &y, &atk)?,
    };
    let text = serde_json::to_string_pretty(&report).expect("report serializes");
    let path = spec.output_dir.join(EVAL_FILE);
    std::fs::write(&path, format!("{text}\n")).map_err(|e| CliError::io(&path, e))?;
    println!("{text}");
    Ok(())
}

/// Re-executes a saved manifest.
pub fn rerun(path: &Path) -> Result<(), CliError> {
    let manifest = Manifest::load(path)?;
    execute(&manifest.spec)
}
