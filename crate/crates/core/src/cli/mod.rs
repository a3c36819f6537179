//! Experiment runner behind the `gipip` binary.
//!
//! Every command validates the whole configuration before doing work,
//! runs attacks on a bounded worker pool, and merges results by run index
//! so that CSV bodies do not depend on the number of workers.

pub mod config;
pub mod output;

use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use rayon::prelude::*;

use crate::attack::{run_attack, AttackConfig, AttackResult, Method};
use crate::data::{load_cifar10_dir, load_image, load_mnist_dir, save_image, synthetic_dataset, Dataset};
use crate::error::{Error, Result};
use crate::flsim::{partition_dataset, simulate_round, DatasetSplit, RoundCapture};
use crate::metrics::{evaluate_batch, MetricReport};
use crate::nn::{init_classifier, AutoEncoderParams, ClassifierParams, ClassifierSpec, InitScheme};
use crate::prior::{load_autoencoder, save_model, train_autoencoder};
use crate::tensor::Tensor;

use config::{derive_seed, DataSource, ExperimentConfig, Resolved, Stream};
use output::{num, Csv, Manifest};

pub const RESULTS_CSV: &str = "results.csv";
pub const ABLATION_CSV: &str = "ablation.csv";
pub const PRIOR_TRACE_CSV: &str = "prior_trace.csv";
pub const EVALUATION_CSV: &str = "evaluation.csv";
pub const MANIFEST: &str = "manifest.txt";
pub const PRIOR_MANIFEST: &str = "prior_manifest.txt";

pub const RESULT_COLUMNS: [&str; 14] = [
    "run_id",
    "method",
    "dataset",
    "batch_size",
    "seed",
    "lambda_as",
    "lambda_tv",
    "iterations",
    "final_grad_loss",
    "final_as_loss",
    "final_tv_loss",
    "psnr",
    "ssim",
    "mse",
];

pub const ABLATION_COLUMNS: [&str; 9] =
    ["row", "lambda_as", "seed", "psnr", "ssim", "mse", "final_grad_loss", "final_as_loss", "final_tv_loss"];

/// Process exit code for an error: 2 configuration, 3 format, 1 otherwise.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config(_) => 2,
        Error::Format { .. } => 3,
        _ => 1,
    }
}

/// Command-line values that take precedence over the file.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Overrides {
    pub output: Option<PathBuf>,
    pub seed: Option<u64>,
    pub jobs: Option<usize>,
}

impl Overrides {
    pub fn apply(&self, cfg: &mut ExperimentConfig) {
        if let Some(o) = &self.output {
            cfg.output.dir = o.display().to_string();
        }
        if let Some(s) = self.seed {
            cfg.experiment.seed = s;
        }
        if let Some(j) = self.jobs {
            cfg.experiment.parallel_runs = j;
        }
    }
}

/// Loaded data, split and global model shared by the commands.
pub struct Setup {
    pub resolved: Resolved,
    pub dataset: Dataset,
    pub split: DatasetSplit,
    pub model: ClassifierParams,
}

pub fn load_dataset(source: &DataSource, seed: u64) -> Result<Dataset> {
    match source {
        DataSource::Synthetic { train, test, shape, num_classes } => {
            synthetic_dataset(*train, *test, *shape, *num_classes, derive_seed(seed, Stream::Data, 0))
        }
        DataSource::Mnist(p) => load_mnist_dir(p),
        DataSource::Cifar10(p) => load_cifar10_dir(p),
    }
}

pub fn setup(cfg: &ExperimentConfig) -> Result<Setup> {
    let resolved = cfg.resolve()?;
    let seed = cfg.experiment.seed;
    let dataset = load_dataset(&resolved.source, seed)?;
    let k = dataset.train.num_classes();
    for &c in cfg.data.aux_classes.iter().chain(&cfg.data.target_classes) {
        if c >= k {
            return Err(Error::config(format!("class {c} out of range for {k} classes")));
        }
    }
    let mut split = partition_dataset(&dataset, resolved.aux_mode, derive_seed(seed, Stream::Partition, 0))?;
    if !cfg.data.aux_classes.is_empty() {
        split = split.restrict_auxiliary(&dataset, &cfg.data.aux_classes)?;
    }
    split.verify()?;
    let spec = ClassifierSpec::new(resolved.arch, dataset.train.image_shape(), k);
    let model = init_classifier(spec, resolved.init)?;
    Ok(Setup { resolved, dataset, split, model })
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn base_manifest(cfg: &ExperimentConfig, command: &str) -> Result<Manifest> {
    let mut m = Manifest::default();
    m.set("tool", "gipip");
    m.set("version", env!("CARGO_PKG_VERSION"));
    m.set("command", command);
    let created = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0);
    m.set("created_unix", created);
    let value = toml::Value::try_from(cfg).map_err(|e| Error::config(e.to_string()))?;
    m.set_toml("config", &value);
    let seed = cfg.experiment.seed;
    for (name, stream) in [
        ("data", Stream::Data),
        ("model", Stream::Model),
        ("prior_init", Stream::PriorInit),
        ("prior_shuffle", Stream::PriorShuffle),
        ("partition", Stream::Partition),
    ] {
        m.set(format!("seed.{name}"), derive_seed(seed, stream, 0));
    }
    Ok(m)
}

fn describe_split(m: &mut Manifest, s: &Setup) {
    m.set("split.provenance", format!("{:?}", s.split.provenance()));
    m.set("split.auxiliary", s.split.auxiliary().len());
    m.set("split.targets", s.split.targets().len());
    m.set("model.fingerprint", s.model.fingerprint());
}

#[derive(Clone, Debug, PartialEq)]
pub struct PriorOutcome {
    pub model_path: PathBuf,
    pub trace: Vec<f64>,
}

/// Trains the auto-encoder on the auxiliary split and writes the model
/// file, `prior_trace.csv` and `prior_manifest.txt`.
pub fn cmd_train_prior(cfg: &ExperimentConfig) -> Result<PriorOutcome> {
    let s = setup(cfg)?;
    let aux = s.split.auxiliary_images(&s.dataset)?;
    if aux.is_empty() {
        return Err(Error::config("auxiliary split is empty"));
    }
    let r = &s.resolved;
    let init = InitScheme::kaiming(derive_seed(cfg.experiment.seed, Stream::PriorInit, 0));
    let (ae, trace) = train_autoencoder(&aux, &r.prior, init)?;

    create_dir(&r.output_dir)?;
    if let Some(parent) = r.model_path.parent() {
        create_dir(parent)?;
    }
    save_model(&ae.params, &r.model_path)?;
    let mut csv = Csv::new(&["epoch", "mean_loss"]);
    for (e, l) in trace.iter().enumerate() {
        csv.push(vec![(e + 1).to_string(), num(*l)]);
    }
    let trace_path = r.output_dir.join(PRIOR_TRACE_CSV);
    csv.write(&trace_path)?;

    let mut m = base_manifest(cfg, "train-prior")?;
    describe_split(&mut m, &s);
    m.set("prior.fingerprint", ae.params.fingerprint());
    m.set("prior.aux_images", aux.len());
    m.artifact(&r.model_path);
    m.artifact(&trace_path);
    m.write(&r.output_dir.join(PRIOR_MANIFEST))?;
    Ok(PriorOutcome { model_path: r.model_path.clone(), trace })
}

fn load_prior(r: &Resolved, model: &ClassifierParams) -> Result<AutoEncoderParams> {
    if !r.model_path.exists() {
        return Err(Error::config(format!(
            "prior model {} not found; run train-prior first",
            r.model_path.display()
        )));
    }
    let ae = load_autoencoder(&r.model_path)?;
    if ae.channels != model.spec.input[0] {
        return Err(Error::config(format!(
            "prior model has {} channels, data has {}",
            ae.channels, model.spec.input[0]
        )));
    }
    Ok(ae)
}

fn pool(jobs: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| Error::config(format!("cannot start {jobs} workers: {e}")))
}

/// Runs one attack per capture on `jobs` workers, in capture order.
fn attack_all(
    captures: &[RoundCapture],
    configs: &[AttackConfig],
    model: &ClassifierParams,
    ae: Option<&AutoEncoderParams>,
    jobs: usize,
) -> Result<Vec<Result<AttackResult>>> {
    Ok(pool(jobs)?.install(|| {
        captures
            .par_iter()
            .zip(configs.par_iter())
            .map(|(c, a)| run_attack(a, &c.shared, model, if a.method == Method::GiPip { ae } else { None }))
            .collect()
    }))
}

fn pick_captures(cfg: &ExperimentConfig, s: &Setup) -> Result<Vec<RoundCapture>> {
    let targets = s.split.pick_targets(&s.dataset, &cfg.data.target_classes, cfg.data.num_targets)?;
    simulate_round(&s.model, &s.dataset, &s.split, &targets, cfg.data.batch_size)
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttackOutcome {
    pub csv: Csv,
    pub failures: usize,
    pub runs: usize,
}

/// Attacks every target batch and writes `results.csv`, `manifest.txt`
/// and recovered / ground-truth images.
pub fn cmd_attack(cfg: &ExperimentConfig) -> Result<AttackOutcome> {
    let s = setup(cfg)?;
    let r = &s.resolved;
    let ae = if r.attack.method == Method::GiPip { Some(load_prior(r, &s.model)?) } else { None };
    let captures = pick_captures(cfg, &s)?;
    let seed = cfg.experiment.seed;
    let configs: Vec<AttackConfig> = (0..captures.len())
        .map(|i| AttackConfig { seed: derive_seed(seed, Stream::Attack, i as u64), ..r.attack })
        .collect();
    let results = attack_all(&captures, &configs, &s.model, ae.as_ref(), cfg.experiment.parallel_runs)?;

    // evaluation stage: attacks are done, the sealed truth may be opened
    create_dir(&r.output_dir)?;
    let mut m = base_manifest(cfg, "attack")?;
    describe_split(&mut m, &s);
    if let Some(ae) = &ae {
        m.set("prior.fingerprint", ae.params.fingerprint());
    }
    m.set("resolved.attack", format!("{:?}", r.attack));
    m.set("metrics.assignment", cfg.attack.assignment);
    m.set("metrics.clamped_to_unit_box", true);
    for d in r.attack.deviations() {
        m.set("deviation", d);
    }
    let mut csv = Csv::new(&RESULT_COLUMNS);
    let mut failures = 0;
    for (i, ((cap, res), ac)) in captures.iter().zip(&results).zip(&configs).enumerate() {
        m.set(format!("run{i}.seed"), ac.seed);
        let res = match res {
            Ok(res) => res,
            Err(e) => {
                failures += 1;
                m.set(format!("run{i}.failure"), e);
                continue;
            }
        };
        let report = cap.truth.evaluate(res, cfg.attack.assignment)?;
        let (truth, _) = cap.truth.reveal(res)?;
        write_pairs(&r.output_dir, i, res.recovered(), truth, &report, &mut m)?;
        m.set(format!("run{i}.wall_time_s"), res.wall_time().as_secs_f64());
        m.set(format!("run{i}.best_restart"), res.best_restart());
        m.set(format!("run{i}.infinite_psnr"), report.infinite_psnr);
        if res.stalled() {
            m.set(format!("run{i}.stalled"), true);
        }
        let t = res.final_terms();
        csv.push(vec![
            i.to_string(),
            ac.method.to_string(),
            s.dataset.name.clone(),
            cap.shared.batch_size().to_string(),
            ac.seed.to_string(),
            num(ac.weights.lambda_as),
            num(ac.weights.lambda_tv),
            ac.iterations.to_string(),
            num(t.grad_matching),
            num(t.anomaly),
            num(t.tv),
            num(report.mean_psnr),
            num(report.mean_ssim),
            num(report.mean_mse),
        ]);
    }
    let csv_path = r.output_dir.join(RESULTS_CSV);
    csv.write(&csv_path)?;
    m.artifact(&csv_path);
    m.set("runs", captures.len());
    m.set("failures", failures);
    m.write(&r.output_dir.join(MANIFEST))?;
    Ok(AttackOutcome { csv, failures, runs: captures.len() })
}

fn image_ext(t: &Tensor) -> &'static str {
    if t.shape()[1] == 1 {
        "pgm"
    } else {
        "ppm"
    }
}

/// Recovered image paired with truth `j` goes to `run<i>_img<j>`, the truth
/// itself to `truth_run<i>_img<j>`.
fn write_pairs(
    dir: &Path,
    run: usize,
    recovered: &Tensor,
    truth: &Tensor,
    report: &MetricReport,
    m: &mut Manifest,
) -> Result<()> {
    let ext = image_ext(truth);
    for (j, &src) in report.pairing.iter().enumerate() {
        let rp = dir.join(format!("run{run}_img{j}.{ext}"));
        let tp = dir.join(format!("truth_run{run}_img{j}.{ext}"));
        save_image(&recovered.select(src)?, &rp)?;
        save_image(&truth.select(j)?, &tp)?;
        m.artifact(&rp);
        m.artifact(&tp);
    }
    Ok(())
}

fn finite_mean(v: impl Iterator<Item = f64>) -> f64 {
    let (mut s, mut n, mut total) = (0.0, 0usize, 0usize);
    for x in v {
        total += 1;
        if x.is_finite() {
            s += x;
            n += 1;
        }
    }
    if n == 0 && total > 0 {
        f64::INFINITY
    } else {
        s / n as f64
    }
}

/// Median with the mean of the two middle values for even counts.
pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        v[n / 2]
    } else if v[n / 2 - 1] == v[n / 2] {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationOutcome {
    pub csv: Csv,
    /// Per weight, the median over seeds of the mean PSNR.
    pub median_psnr: Vec<(f64, f64)>,
    pub failures: usize,
}

/// Sweeps the anomaly-score weight over `[ablation] weights` and seeds.
///
/// One row per (weight, seed) holding the mean over all target batches,
/// then one `median` row per weight.
pub fn cmd_ablate_as(cfg: &ExperimentConfig) -> Result<AblationOutcome> {
    cfg.validate_ablation()?;
    let s = setup(cfg)?;
    let r = &s.resolved;
    if r.attack.method != Method::GiPip {
        return Err(Error::config("ablate-as sweeps the gipip objective; set [attack] method = \"gipip\""));
    }
    let ae = load_prior(r, &s.model)?;
    let captures = pick_captures(cfg, &s)?;
    let ab = &cfg.ablation;
    let nb = captures.len();

    let mut jobs_caps = Vec::new();
    let mut configs = Vec::new();
    for &w in &ab.weights {
        for &seed in &ab.seeds {
            for (b, cap) in captures.iter().enumerate() {
                let mut a = r.attack;
                a.weights.lambda_as = w;
                a.seed = derive_seed(seed, Stream::Attack, b as u64);
                configs.push(a);
                jobs_caps.push(cap.clone());
            }
        }
    }
    let results = attack_all(&jobs_caps, &configs, &s.model, Some(&ae), cfg.experiment.parallel_runs)?;

    create_dir(&r.output_dir)?;
    let mut m = base_manifest(cfg, "ablate-as")?;
    describe_split(&mut m, &s);
    m.set("prior.fingerprint", ae.params.fingerprint());
    let mut csv = Csv::new(&ABLATION_COLUMNS);
    let mut failures = 0;
    let mut medians = Vec::new();
    let mut idx = 0;
    for &w in &ab.weights {
        let mut per_seed: Vec<[f64; 6]> = Vec::new();
        for &seed in &ab.seeds {
            let mut rows = Vec::new();
            for cap in &captures {
                match &results[idx] {
                    Ok(res) => {
                        let rep = cap.truth.evaluate(res, cfg.attack.assignment)?;
                        let t = res.final_terms();
                        m.set(format!("sweep{idx}.wall_time_s"), res.wall_time().as_secs_f64());
                        rows.push([rep.mean_psnr, rep.mean_ssim, rep.mean_mse, t.grad_matching, t.anomaly, t.tv]);
                    }
                    Err(e) => {
                        failures += 1;
                        m.set(format!("sweep{idx}.failure"), e);
                    }
                }
                idx += 1;
            }
            if rows.len() < nb {
                continue;
            }
            let mean: [f64; 6] = std::array::from_fn(|k| finite_mean(rows.iter().map(|r| r[k])));
            csv.push(
                ["seed".to_string(), num(w), seed.to_string()]
                    .into_iter()
                    .chain(mean.iter().map(|v| num(*v)))
                    .collect(),
            );
            per_seed.push(mean);
        }
        let med: [f64; 6] = std::array::from_fn(|k| median(&per_seed.iter().map(|r| r[k]).collect::<Vec<_>>()));
        csv.push(
            ["median".to_string(), num(w), String::new()].into_iter().chain(med.iter().map(|v| num(*v))).collect(),
        );
        medians.push((w, med[0]));
    }
    let path = r.output_dir.join(ABLATION_CSV);
    csv.write(&path)?;
    m.artifact(&path);
    m.set("failures", failures);
    m.write(&r.output_dir.join(MANIFEST))?;
    Ok(AblationOutcome { csv, median_psnr: medians, failures })
}

/// Re-scores image files already in `dir`: every `run<i>_img<j>` against
/// its `truth_` twin. Works on the quantised files, so values can differ
/// slightly from the in-memory scores in `results.csv`.
pub fn cmd_evaluate(dir: &Path) -> Result<Csv> {
    let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut pairs = Vec::new();
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let name = entry.file_name().to_string_lossy().to_string();
        let Some(stem) = name.strip_suffix(".ppm").or_else(|| name.strip_suffix(".pgm")) else { continue };
        let Some(rest) = stem.strip_prefix("run") else { continue };
        let Some((run, img)) = rest.split_once("_img") else { continue };
        let (Ok(run), Ok(img)) = (run.parse::<usize>(), img.parse::<usize>()) else { continue };
        pairs.push((run, img, name));
    }
    pairs.sort();
    if pairs.is_empty() {
        return Err(Error::config(format!("no run<i>_img<j> images in {}", dir.display())));
    }
    let mut csv = Csv::new(&["run_id", "image", "psnr", "ssim", "mse"]);
    for (run, img, name) in pairs {
        let rec = load_image(&dir.join(&name))?;
        let tru = load_image(&dir.join(format!("truth_{name}")))?;
        let shape: Vec<usize> = std::iter::once(1).chain(rec.shape().iter().copied()).collect();
        let rep = evaluate_batch(&rec.reshape(shape.clone())?, &tru.reshape(shape)?, false)?;
        let mi = rep.per_image[0];
        csv.push(vec![run.to_string(), img.to_string(), num(mi.psnr), num(mi.ssim), num(mi.mse)]);
    }
    csv.write(&dir.join(EVALUATION_CSV))?;
    Ok(csv)
}
