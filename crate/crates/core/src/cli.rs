//! Command-line workflows. Every numeric step lives in the library; this
//! module reads configs and files, calls it, and writes artifacts plus a
//! provenance manifest.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::bench;
use crate::cokriging::{fit_mle, initial_lmc, initial_matern, CokrigingModel};
use crate::config::{CokrigingFamily, Method, Paths, RunConfig, SCHEMA};
use crate::covariance::CovarianceModel;
use crate::deepkriging::{fit, DeepKrigingModel};
use crate::error::{Error, Result};
use crate::metrics::{format_table, write_reports_file, EvalReport};
use crate::rng;
use crate::simulate::{generate, write_scenario};
use crate::spatial::{
    read_observations_file, read_sites_file, split, write_observations_file, BivariateObservations, SiteSet, SplitSpec,
};
use crate::uncertainty::prediction_intervals;

#[derive(Debug, Parser)]
#[command(name = "deepkrig", version, about = "Bivariate spatial prediction with basis-embedded neural networks")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Draw scenario replicates.
    Simulate(Common),
    /// Train a network, or estimate cokriging parameters.
    Fit(Common),
    /// Point predictions at new sites.
    Predict(Common),
    /// Prediction intervals at new sites.
    Interval(Common),
    /// Score predictions against held-out truth.
    Evaluate(Common),
    /// Time both methods over growing training sizes.
    Bench(Common),
    /// Print the annotated configuration reference.
    Schema,
}

#[derive(Debug, Clone, Args)]
pub struct Common {
    /// TOML config, or a manifest.json from an earlier run.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Worker threads; defaults to the available parallelism.
    #[arg(long)]
    pub workers: Option<usize>,
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
}

/// Exit status for an error: 2 for bad inputs, 3 for numerical or
/// runtime failures.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        _ if e.is_numeric() => 3,
        Error::Io(io) if io.kind() == std::io::ErrorKind::NotFound => 2,
        Error::Io(_) => 3,
        _ => 2,
    }
}

#[derive(Debug, Serialize, Deserialize)]
pub struct Manifest {
    pub tool: String,
    pub version: String,
    pub command: String,
    pub seed: u64,
    pub workers: usize,
    pub config_sha256: String,
    pub config: RunConfig,
    /// Command-specific settings after defaults were applied.
    #[serde(default, skip_serializing_if = "serde_json::Value::is_null")]
    pub resolved: serde_json::Value,
    /// Output file name to SHA-256 of its bytes.
    pub outputs: BTreeMap<String, String>,
    /// Files holding wall-clock measurements; listed but not hashed.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub timings: Vec<String>,
}

/// Fitted cokriging parameters written by `fit`.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CokrigingFile {
    pub covariance: CovarianceModel,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub neg_log_likelihood: Option<f64>,
    pub evals: usize,
    pub converged: bool,
}

impl CokrigingFile {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(crate::error::at(path))?;
        serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
    }
}

struct Run {
    cfg: RunConfig,
    out: PathBuf,
    command: &'static str,
    outputs: Vec<String>,
    timings: Vec<String>,
    resolved: serde_json::Value,
}

impl Run {
    fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    fn resolve<T: Serialize>(&mut self, value: &T) {
        self.resolved = serde_json::to_value(value).expect("settings serialize");
    }

    fn wrote(&mut self, name: &str) {
        self.outputs.push(name.to_string());
    }

    fn timed(&mut self, name: &str) {
        self.timings.push(name.to_string());
    }

    fn write_json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<()> {
        let text = serde_json::to_string_pretty(value).map_err(|e| Error::Format(e.to_string()))?;
        fs::write(self.path(name), text + "\n")?;
        self.wrote(name);
        Ok(())
    }

    fn finish(self) -> Result<()> {
        let mut outputs = BTreeMap::new();
        for name in &self.outputs {
            let bytes = fs::read(self.out.join(name))?;
            outputs.insert(name.clone(), hex::encode(Sha256::digest(&bytes)));
        }
        let m = Manifest {
            tool: "deepkrig".into(),
            version: env!("CARGO_PKG_VERSION").into(),
            command: self.command.into(),
            seed: self.cfg.seed,
            workers: rayon::current_num_threads(),
            config_sha256: self.cfg.sha256(),
            config: self.cfg,
            resolved: self.resolved,
            outputs,
            timings: self.timings,
        };
        let text = serde_json::to_string_pretty(&m).map_err(|e| Error::Format(e.to_string()))?;
        fs::write(self.out.join("manifest.json"), text + "\n")?;
        Ok(())
    }
}

fn prepare(common: &Common, command: &'static str) -> Result<Run> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    if let Some(w) = common.workers {
        if w == 0 {
            return Err(Error::Config("--workers must be >= 1".into()));
        }
        // the global pool can only be set once per process
        let _ = rayon::ThreadPoolBuilder::new().num_threads(w).build_global();
    }
    fs::create_dir_all(&common.out)?;
    Ok(Run {
        cfg,
        out: common.out.clone(),
        command,
        outputs: Vec::new(),
        timings: Vec::new(),
        resolved: serde_json::Value::Null,
    })
}

/// Runs a parsed command line.
pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Schema => {
            print!("{SCHEMA}");
            Ok(())
        }
        Command::Simulate(c) => simulate(prepare(&c, "simulate")?),
        Command::Fit(c) => fit_cmd(prepare(&c, "fit")?),
        Command::Predict(c) => predict(prepare(&c, "predict")?),
        Command::Interval(c) => interval(prepare(&c, "interval")?),
        Command::Evaluate(c) => evaluate(prepare(&c, "evaluate")?),
        Command::Bench(c) => bench_cmd(prepare(&c, "bench")?),
    }
}

fn simulate(mut run: Run) -> Result<()> {
    let section = run
        .cfg
        .scenario
        .clone()
        .ok_or_else(|| Error::Config("[scenario] is required for simulate".into()))?;
    let scn = section.resolve(run.cfg.seed)?;
    run.resolve(&scn);
    let reps = generate(&scn)?;
    let manifest = write_scenario(&run.out, &scn, &reps)?;
    for f in &manifest.files {
        run.wrote(f);
    }
    run.wrote("scenario.json");
    if let Some(frac) = section.test_fraction {
        for (r, obs) in reps.iter().enumerate() {
            let spec = SplitSpec::new(rng::derive(scn.replicate_seed(r), 9), vec![1.0 - frac, frac]);
            let parts = split(obs, &spec)?;
            for (part, tag) in parts.iter().zip(["train", "test"]) {
                let name = format!("replicate_{r:04}_{tag}.csv");
                write_observations_file(part, &run.path(&name))?;
                run.wrote(&name);
            }
        }
    }
    println!("simulated {} replicate(s) into {}", reps.len(), run.out.display());
    run.finish()
}

fn train_data(cfg: &RunConfig) -> Result<BivariateObservations> {
    read_observations_file(Paths::require(&cfg.paths.train, "train")?)
}

/// Prediction sites: `paths.sites`, else the sites of `paths.test`.
fn target_sites(cfg: &RunConfig) -> Result<SiteSet> {
    match (&cfg.paths.sites, &cfg.paths.test) {
        (Some(p), _) | (None, Some(p)) => read_sites_file(p),
        (None, None) => Err(Error::Config("paths.sites or paths.test is required for this command".into())),
    }
}

fn estimate_cokriging(cfg: &RunConfig, train: &BivariateObservations) -> Result<CokrigingFile> {
    if let Some(m) = &cfg.cokriging.model {
        return Ok(CokrigingFile {
            covariance: m.clone(),
            neg_log_likelihood: None,
            evals: 0,
            converged: true,
        });
    }
    let init = match cfg.cokriging.family {
        CokrigingFamily::Matern => initial_matern(train),
        CokrigingFamily::Lmc => initial_lmc(train),
    };
    let est = fit_mle(&init, train, None, &cfg.mle_config())?;
    Ok(CokrigingFile {
        covariance: est.model,
        neg_log_likelihood: Some(est.nll),
        evals: est.evals,
        converged: est.converged,
    })
}

fn fit_cmd(mut run: Run) -> Result<()> {
    let train = train_data(&run.cfg)?;
    match run.cfg.method {
        Method::Deepkriging => {
            let fit_cfg = run.cfg.fit_config()?;
            run.resolve(&fit_cfg);
            let (model, reports) = fit(&train, None, &fit_cfg)?;
            model.save(&run.path("model.json"))?;
            run.wrote("model.json");
            let mut w = csv::Writer::from_path(run.path("history.csv"))?;
            w.write_record(["net", "epoch", "train_loss", "val_loss"])?;
            for (k, rep) in reports.iter().enumerate() {
                for (e, tl) in rep.train_loss.iter().enumerate() {
                    let vl = rep.val_loss.get(e).map(|v| format!("{v}")).unwrap_or_default();
                    w.write_record([k.to_string(), (e + 1).to_string(), format!("{tl}"), vl])?;
                }
            }
            w.flush()?;
            run.wrote("history.csv");
            let best: Vec<String> = reports.iter().map(|r| r.best_epoch.to_string()).collect();
            println!("trained on {} sites; best epoch {}", train.len(), best.join(", "));
        }
        Method::Cokriging => {
            let mle = run.cfg.mle_config();
            run.resolve(&mle);
            let file = estimate_cokriging(&run.cfg, &train)?;
            run.write_json("cokriging.json", &file)?;
            println!("estimated cokriging parameters from {} sites ({} evaluations)", train.len(), file.evals);
        }
    }
    run.finish()
}

fn cokriging_model(cfg: &RunConfig, train: &BivariateObservations) -> Result<CokrigingModel> {
    let file = match &cfg.paths.model {
        Some(p) => CokrigingFile::load(p)?,
        None => estimate_cokriging(cfg, train)?,
    };
    CokrigingModel::fit(&file.covariance, train, None)
}

fn predict(mut run: Run) -> Result<()> {
    let sites = target_sites(&run.cfg)?;
    let pred = match run.cfg.method {
        Method::Deepkriging => {
            let model = DeepKrigingModel::load(Paths::require(&run.cfg.paths.model, "model")?)?;
            model.check_basis(&run.cfg.basis())?;
            model.predict(&sites, None)?
        }
        Method::Cokriging => {
            let train = train_data(&run.cfg)?;
            let p = cokriging_model(&run.cfg, &train)?.predict(&sites, None)?;
            BivariateObservations::new(sites.clone(), p.means(0), p.means(1))?
        }
    };
    write_observations_file(&pred, &run.path("predictions.csv"))?;
    run.wrote("predictions.csv");
    println!("predicted {} sites", pred.len());
    run.finish()
}

fn interval(mut run: Run) -> Result<()> {
    let train = train_data(&run.cfg)?;
    let sites = target_sites(&run.cfg)?;
    match run.cfg.method {
        Method::Deepkriging => {
            let fit_cfg = run.cfg.fit_config()?;
            run.resolve(&serde_json::json!({ "fit": fit_cfg, "ensemble": run.cfg.ensemble }));
            let res = prediction_intervals(
                &train,
                None,
                &sites,
                None,
                &fit_cfg,
                &run.cfg.ensemble,
                rng::derive(run.cfg.seed, 17),
            )?;
            res.report.write_csv_file(&run.path("intervals.csv"))?;
            println!("intervals at {} sites, t with {} degrees of freedom", sites.len(), res.report.df);
        }
        Method::Cokriging => {
            let alpha = run.cfg.cokriging.alpha;
            let p = cokriging_model(&run.cfg, &train)?.predict(&sites, None)?;
            let (lo1, hi1) = p.bounds(0, alpha)?;
            let (lo2, hi2) = p.bounds(1, alpha)?;
            let mut w = csv::Writer::from_path(run.path("intervals.csv"))?;
            w.write_record(["x", "y", "mean1", "lo1", "hi1", "mean2", "lo2", "hi2", "var1", "var2"])?;
            for (i, s) in sites.sites().iter().enumerate() {
                let row = [
                    s.x,
                    s.y,
                    p.mean[i][0],
                    lo1[i],
                    hi1[i],
                    p.mean[i][1],
                    lo2[i],
                    hi2[i],
                    p.cov[i][0][0],
                    p.cov[i][1][1],
                ];
                w.write_record(row.iter().map(|v| format!("{v}")))?;
            }
            w.flush()?;
            println!("Gaussian intervals at {} sites", sites.len());
        }
    }
    run.wrote("intervals.csv");
    run.finish()
}

/// Predictions read back from `predictions.csv` or `intervals.csv`.
pub struct PredictionTable {
    pub sites: Vec<(f64, f64)>,
    pub mean: [Vec<f64>; 2],
    pub bounds: Option<([Vec<f64>; 2], [Vec<f64>; 2])>,
}

pub fn read_prediction_table(path: &Path) -> Result<PredictionTable> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(crate::error::open(path)?);
    let headers = rdr.headers()?.clone();
    let col = |name: &str| headers.iter().position(|h| h == name);
    let need = |name: &str| col(name).ok_or_else(|| Error::Format(format!("{}: missing column {name}", path.display())));
    let (ix, iy) = (need("x")?, need("y")?);
    let means = match (col("z1"), col("z2"), col("mean1"), col("mean2")) {
        (Some(a), Some(b), _, _) | (_, _, Some(a), Some(b)) => [a, b],
        _ => return Err(Error::Format(format!("{}: needs z1,z2 or mean1,mean2 columns", path.display()))),
    };
    let bound_cols = match (col("lo1"), col("hi1"), col("lo2"), col("hi2")) {
        (Some(a), Some(b), Some(c), Some(d)) => Some([a, b, c, d]),
        _ => None,
    };
    let mut t = PredictionTable {
        sites: Vec::new(),
        mean: [Vec::new(), Vec::new()],
        bounds: bound_cols.map(|_| ([Vec::new(), Vec::new()], [Vec::new(), Vec::new()])),
    };
    for (line, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let num = |i: usize| -> Result<f64> {
            rec.get(i)
                .unwrap_or("")
                .parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| Error::Format(format!("{}: row {}: bad number", path.display(), line + 1)))
        };
        t.sites.push((num(ix)?, num(iy)?));
        t.mean[0].push(num(means[0])?);
        t.mean[1].push(num(means[1])?);
        if let (Some(c), Some((lo, hi))) = (bound_cols, t.bounds.as_mut()) {
            lo[0].push(num(c[0])?);
            hi[0].push(num(c[1])?);
            lo[1].push(num(c[2])?);
            hi[1].push(num(c[3])?);
        }
    }
    Ok(t)
}

fn evaluate(mut run: Run) -> Result<()> {
    let truth = read_observations_file(Paths::require(&run.cfg.paths.test, "test")?)?;
    let table = read_prediction_table(Paths::require(&run.cfg.paths.predictions, "predictions")?)?;
    if table.sites.len() != truth.len() {
        return Err(Error::Schema(format!(
            "{} predictions for {} test sites",
            table.sites.len(),
            truth.len()
        )));
    }
    for (i, (s, p)) in truth.sites.sites().iter().zip(&table.sites).enumerate() {
        let tol = 1e-9 * (1.0 + s.x.abs().max(s.y.abs()));
        if (s.x - p.0).abs() > tol || (s.y - p.1).abs() > tol {
            return Err(Error::Schema(format!("row {}: prediction site differs from test site", i + 1)));
        }
    }
    let [m1, m2] = table.mean;
    let pred = BivariateObservations::new(truth.sites.clone(), m1, m2)?;
    let mut report = EvalReport::point(run.cfg.method.name(), &truth, &pred)?;
    if let Some((lo, hi)) = &table.bounds {
        report = report.with_intervals(&truth, [&lo[0], &lo[1]], [&hi[0], &hi[1]])?;
    }
    report.check()?;
    write_reports_file(std::slice::from_ref(&report), &run.path("eval.csv"))?;
    run.wrote("eval.csv");
    print!("{}", format_table(&[report]));
    run.finish()
}

fn bench_cmd(mut run: Run) -> Result<()> {
    let bcfg = run.cfg.bench_config();
    run.resolve(&bcfg);
    let table = bench::run(&bcfg)?;
    table.write_csv_file(&run.path("bench.csv"))?;
    run.timed("bench.csv");
    table.write_dat(fs::File::create(run.path("bench.dat"))?)?;
    run.timed("bench.dat");
    print!("{}", table.format_table());
    run.finish()
}
