//! `seqeb` command line tool.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use log::{info, warn};

use seqeb::io::{
    self, results_columns, write_prediction, write_records, write_table, DayStream, ResultsWriter, RunConfig,
    Sidecar, SiteIndex,
};
use seqeb::mcmc::{kde_mode, run_offline, McmcOutput, OfflineProblem};
use seqeb::orchestrator::Engine;
use seqeb::rng::stream;
use seqeb::sim::{quantile_sorted, replicate_study, MonitoringScenario, Scenario, Study};
use seqeb::spatial::{ObsBatch, ObservationModel};
use seqeb::{Error, Result};

#[derive(Parser)]
#[command(name = "seqeb", version, about = "Online spatiotemporal filtering with sequential empirical Bayes range estimation")]
struct Cli {
    /// Print errors to stderr as a JSON object.
    #[arg(long, global = true)]
    json_errors: bool,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic dataset with a matching run configuration.
    Simulate(SimulateArgs),
    /// Run the online estimator over a dataset, one results row per step.
    Filter(FilterArgs),
    /// Fit the offline MCMC baseline.
    Mcmc(McmcArgs),
    /// Predict the latent field at target locations.
    Predict(PredictArgs),
    /// Run a replication study and write its tables.
    Report(ReportArgs),
}

#[derive(Args)]
struct SimulateArgs {
    /// `base`, `estimation`, `long_run`, `simplified_<phi>`,
    /// `monitoring`, or a scenario TOML file.
    scenario: String,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    /// Number of time steps (days for `monitoring`).
    #[arg(long)]
    t_max: Option<usize>,
}

#[derive(Args)]
struct FilterArgs {
    #[arg(long)]
    config: PathBuf,
    /// Observation CSV, or `-` for standard input.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Site table; required with `--data -`.
    #[arg(long)]
    sites: Option<PathBuf>,
    /// Results CSV.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    checkpoint_every: Option<usize>,
    /// Continue from `--checkpoint`, appending to `--out`.
    #[arg(long)]
    resume: bool,
    /// Stop once this many steps have been processed.
    #[arg(long)]
    max_steps: Option<usize>,
}

#[derive(Args)]
struct McmcArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    data: Option<PathBuf>,
    /// Summary CSV, one row per fitted time.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Fit the first `t` steps for each listed `t`; defaults to all steps.
    #[arg(long, value_delimiter = ',')]
    times: Vec<usize>,
    /// Also write every retained draw here.
    #[arg(long)]
    samples: Option<PathBuf>,
}

#[derive(Args)]
struct PredictArgs {
    /// Run configuration of the filter run to reproduce.
    #[arg(long)]
    run: PathBuf,
    #[arg(long)]
    data: Option<PathBuf>,
    /// CSV with columns `target,coord_x,coord_y`.
    #[arg(long)]
    targets: PathBuf,
    #[arg(long, value_delimiter = ',', required = true)]
    times: Vec<usize>,
    /// Output directory; one `prediction_t<t>.csv` per time.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ReportArgs {
    #[arg(long)]
    study: String,
    /// Full-scale replication counts.
    #[arg(long)]
    full: bool,
    /// Override the number of replications.
    #[arg(long)]
    seeds: Option<usize>,
    #[arg(long, default_value_t = 1)]
    first_seed: u64,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let res = match cli.cmd {
        Cmd::Simulate(a) => simulate(a),
        Cmd::Filter(a) => filter(a),
        Cmd::Mcmc(a) => mcmc(a),
        Cmd::Predict(a) => predict(a),
        Cmd::Report(a) => report(a),
    };
    match res {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let code = e.exit_code();
            if cli.json_errors {
                let mut v = serde_json::json!({
                    "error": e.kind(),
                    "message": e.to_string(),
                    "exit_code": code,
                });
                if let Error::Data { row, .. } = &e {
                    v["row"] = serde_json::json!(row);
                }
                eprintln!("{v}");
            } else {
                eprintln!("error: {e}");
            }
            ExitCode::from(code as u8)
        }
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::Config(format!("cannot create {}: {e}", dir.display())))
}

fn required(p: Option<PathBuf>, what: &str) -> Result<PathBuf> {
    p.ok_or_else(|| Error::Config(format!("no {what} path: pass --{what} or set io.{what} in the config")))
}

// ---------------------------------------------------------------------

fn simulate(a: SimulateArgs) -> Result<()> {
    create_dir(&a.out)?;
    let data_path = a.out.join("data.csv");
    let mut config = if a.scenario == "monitoring" {
        let mut sc = MonitoringScenario::default();
        if let Some(s) = a.seed {
            sc.seed = s;
        }
        if let Some(t) = a.t_max {
            sc.n_days = t;
        }
        write_records(fs::File::create(&data_path)?, &sc.generate()?)?;
        sc.run_config()
    } else {
        let mut sc = if a.scenario.ends_with(".toml") {
            let text = fs::read_to_string(&a.scenario)
                .map_err(|e| Error::Config(format!("cannot read {}: {e}", a.scenario)))?;
            toml::from_str::<Scenario>(&text).map_err(|e| Error::Config(e.to_string()))?
        } else {
            Scenario::by_name(&a.scenario)?
        };
        if let Some(s) = a.seed {
            sc.seed = s;
        }
        if let Some(t) = a.t_max {
            sc.t_max = t;
        }
        let data = sc.generate()?;
        write_records(fs::File::create(&data_path)?, &data.records(&sc))?;
        let mut w = csv::Writer::from_path(a.out.join("truth.csv"))?;
        w.write_record(["t", "site", "x"])?;
        let ids = sc.site_ids();
        for (t, x) in data.x.iter().enumerate() {
            for (i, id) in ids.iter().enumerate() {
                w.write_record([t.to_string(), id.clone(), x[i].to_string()])?;
            }
        }
        w.flush()?;
        fs::write(
            a.out.join("scenario.toml"),
            toml::to_string_pretty(&sc).map_err(|e| Error::Config(e.to_string()))?,
        )?;
        sc.run_config()
    };
    config.io.data = Some("data.csv".into());
    config.io.out = Some("results.csv".into());
    fs::write(a.out.join("config.toml"), config.to_toml_string()?)?;
    info!("wrote {}", a.out.display());
    Ok(())
}

// ---------------------------------------------------------------------

type Batches = Box<dyn Iterator<Item = Result<(i64, ObsBatch)>>>;

/// Sites and a day-batch iterator. With a site table the input is
/// streamed; otherwise the whole file is read first to find the sites.
fn open_batches(config: &RunConfig, data: &Path, sites: Option<&Path>) -> Result<(SiteIndex, Batches)> {
    let family = config.model.family;
    if let Some(s) = sites {
        let idx = SiteIndex::load(s)?;
        let reader: Box<dyn std::io::Read> = if data.as_os_str() == "-" {
            Box::new(std::io::stdin().lock())
        } else {
            Box::new(fs::File::open(data).map_err(|e| Error::Config(format!("cannot open {}: {e}", data.display())))?)
        };
        let st = DayStream::new(reader, idx.clone(), family)?;
        return Ok((idx, Box::new(st)));
    }
    if data.as_os_str() == "-" {
        return Err(Error::Config(
            "reading observations from standard input needs a site table (--sites or io.sites)".into(),
        ));
    }
    let ds = io::ingest(data, family, None)?;
    let items: Vec<Result<(i64, ObsBatch)>> = ds.days.into_iter().zip(ds.batches).map(Ok).collect();
    Ok((ds.sites, Box::new(items.into_iter())))
}

fn write_checkpoint(engine: &Engine, path: &Path) -> Result<()> {
    let blob = engine.checkpoint()?;
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    let mut f = fs::File::create(&tmp)?;
    f.write_all(&blob)?;
    f.sync_all()?;
    fs::rename(&tmp, path)?;
    Ok(())
}

fn filter(a: FilterArgs) -> Result<()> {
    let mut config = RunConfig::load(&a.config)?;
    if a.data.is_some() {
        config.io.data = a.data;
    }
    if a.sites.is_some() {
        config.io.sites = a.sites;
    }
    if a.out.is_some() {
        config.io.out = a.out;
    }
    if a.checkpoint.is_some() {
        config.io.checkpoint = a.checkpoint;
    }
    if a.checkpoint_every.is_some() {
        config.io.checkpoint_every = a.checkpoint_every;
    }
    config.validate()?;
    let data = required(config.io.data.clone(), "data")?;
    let out = required(config.io.out.clone(), "out")?;
    let (sites, batches) = open_batches(&config, &data, config.io.sites.as_deref())?;
    let spec = config.model.covariates.clone();
    let site_set = sites.site_set();
    let setup = config.engine_setup(site_set.clone())?;
    let columns = results_columns(&spec.names());

    let (mut engine, mut writer) = if a.resume {
        let ck = config
            .io
            .checkpoint
            .clone()
            .ok_or_else(|| Error::Config("--resume needs --checkpoint".into()))?;
        let blob = fs::read(&ck).map_err(|e| Error::Checkpoint(format!("cannot read {}: {e}", ck.display())))?;
        let engine = Engine::restore(&blob)?;
        if engine.setup() != &setup {
            return Err(Error::Checkpoint(
                "checkpoint was written with a different configuration or site table".into(),
            ));
        }
        info!("resuming at t = {}", engine.t());
        let w = ResultsWriter::resume(&out, &columns, engine.t())?;
        (engine, w)
    } else {
        let engine = Engine::new(setup, spec.design(&site_set, 0))?;
        let sidecar = Sidecar::new("online", config.seed, columns.clone(), &config)?;
        (engine, ResultsWriter::create(&out, &columns, &sidecar)?)
    };

    let every = config.io.checkpoint_every.unwrap_or(10);
    let skip = engine.t();
    for item in batches.skip(skip) {
        let (day, y) = item?;
        if a.max_steps.is_some_and(|m| engine.t() >= m) {
            break;
        }
        let t = engine.t() + 1;
        let r = engine.advance(&y, &spec.design(&site_set, t))?;
        writer.write_report(&r)?;
        info!(
            "t={t} day={day} phi={:.4} alpha={:.3} sigma2={:.3} ess={:.1} ({:.2}s)",
            r.phi_hat, r.theta_hat.alpha, r.theta_hat.sigma2, r.mean_ess, r.step_seconds
        );
        if let Some(ck) = &config.io.checkpoint {
            if t % every == 0 {
                write_checkpoint(&engine, ck)?;
            }
        }
    }
    if let Some(ck) = &config.io.checkpoint {
        write_checkpoint(&engine, ck)?;
    }
    Ok(())
}

// ---------------------------------------------------------------------

fn mcmc(a: McmcArgs) -> Result<()> {
    let mut config = RunConfig::load(&a.config)?;
    if a.data.is_some() {
        config.io.data = a.data;
    }
    if a.out.is_some() {
        config.io.out = a.out;
    }
    let data = required(config.io.data.clone(), "data")?;
    let out = required(config.io.out.clone(), "out")?;
    let ds = io::ingest(&data, config.model.family, config.io.sites.as_deref().map(SiteIndex::load).transpose()?.as_ref())?;
    let spec = &config.model.covariates;
    let gs = ds.designs(spec);
    let sites = ds.site_set();
    let kernel = config.kernel()?;
    let model = ObservationModel::new(config.model.family);
    let prior = config.prior.hyper(spec.dim())?;
    let fine = config.grid.fine_points()?;
    let times = if a.times.is_empty() { vec![ds.n_times()] } else { a.times };
    if let Some(&bad) = times.iter().find(|&&t| t == 0 || t > ds.n_times()) {
        return Err(Error::Config(format!("--times entry {bad} is outside 1..={}", ds.n_times())));
    }

    let columns = results_columns(&spec.names());
    let mut writer = ResultsWriter::create(&out, &columns, &Sidecar::new("offline", config.seed, columns.clone(), &config)?)?;
    let mut sample_writer = match &a.samples {
        Some(p) => {
            let mut cols = vec!["t".to_string(), "draw".to_string(), "alpha".to_string()];
            cols.extend(spec.names().iter().map(|n| format!("beta_{n}")));
            cols.extend(["sigma2".to_string(), "phi".to_string()]);
            Some(ResultsWriter::create(p, &cols, &Sidecar::new("offline_samples", config.seed, cols.clone(), &config)?)?)
        }
        None => None,
    };
    for t in times {
        let start = Instant::now();
        let problem = OfflineProblem {
            sites: &sites,
            kernel: &kernel,
            model: &model,
            prior: &prior,
            ys: &ds.batches[..t],
            gs: &gs[..=t],
        };
        let fit = run_offline(&problem, &config.mcmc, &mut stream(config.seed, &[3, t as u64]))?;
        let secs = start.elapsed().as_secs_f64();
        info!(
            "t={t}: {} draws, acceptance x {:.2} phi {:.2} ({secs:.1}s)",
            fit.samples.len(),
            fit.accept_x,
            fit.accept_phi
        );
        writer.write_row(&offline_row(t, &fit, &fine, config.estimation.ci_level, secs))?;
        if let Some(w) = sample_writer.as_mut() {
            for (d, s) in fit.samples.iter().enumerate() {
                let mut row = vec![t.to_string(), d.to_string(), s.theta.alpha.to_string()];
                row.extend(s.theta.beta.iter().map(|b| b.to_string()));
                row.extend([s.theta.sigma2.to_string(), s.phi.to_string()]);
                w.write_row(&row)?;
            }
        }
    }
    Ok(())
}

/// Posterior means of the temporal parameters, the kernel density mode of
/// the range and its central credible interval. Online-only columns are
/// left as NaN.
fn offline_row(t: usize, fit: &McmcOutput, fine: &[f64], level: f64, secs: f64) -> Vec<String> {
    let n = fit.samples.len() as f64;
    let mean = |f: &dyn Fn(&seqeb::mcmc::McmcSample) -> f64| fit.samples.iter().map(f).sum::<f64>() / n;
    let dim = fit.samples.first().map_or(0, |s| s.theta.beta.len());
    let mut phis = fit.column(|s| s.phi);
    let mode = if fit.samples.iter().all(|s| s.phi == phis[0]) { phis[0] } else { kde_mode(&phis, fine) };
    phis.sort_by(f64::total_cmp);
    let tail = (1.0 - level) / 2.0;
    let mut row = vec![t.to_string(), mean(&|s| s.theta.alpha).to_string()];
    row.extend((0..dim).map(|j| mean(&|s| s.theta.beta[j]).to_string()));
    row.extend(
        [
            mean(&|s| s.theta.sigma2),
            mode,
            quantile_sorted(&phis, tail),
            quantile_sorted(&phis, 1.0 - tail),
            f64::NAN,
            f64::NAN,
            f64::NAN,
            f64::NAN,
            f64::NAN,
            secs,
        ]
        .map(|v| v.to_string()),
    );
    row
}

// ---------------------------------------------------------------------

fn predict(a: PredictArgs) -> Result<()> {
    let mut config = RunConfig::load(&a.run)?;
    if a.data.is_some() {
        config.io.data = a.data;
    }
    let data = required(config.io.data.clone(), "data")?;
    let targets = io::read_targets(&a.targets)?;
    let (sites, batches) = open_batches(&config, &data, config.io.sites.as_deref())?;
    let spec = config.model.covariates.clone();
    let site_set = sites.site_set();
    let target_set = targets.site_set();
    let mut times = a.times.clone();
    times.sort_unstable();
    times.dedup();
    if times.first() == Some(&0) {
        return Err(Error::Config("--times entries start at 1".into()));
    }
    let last = *times.last().expect("clap requires --times");
    create_dir(&a.out)?;
    let mut engine = Engine::new(config.engine_setup(site_set.clone())?, spec.design(&site_set, 0))?;
    let mut next = 0;
    for item in batches {
        let (_, y) = item?;
        let t = engine.t() + 1;
        engine.advance(&y, &spec.design(&site_set, t))?;
        if times[next] == t {
            let pred = engine.predict(&target_set, &spec.design(&target_set, t))?;
            let path = a.out.join(format!("prediction_t{t}.csv"));
            let sidecar = Sidecar::new(
                "prediction",
                config.seed,
                io::PREDICTION_COLUMNS.iter().map(|s| s.to_string()).collect(),
                &config,
            )?;
            write_prediction(&path, t, &targets, &pred, &sidecar)?;
            info!("wrote {}", path.display());
            next += 1;
            if next == times.len() {
                break;
            }
        }
    }
    if next < times.len() {
        return Err(Error::Config(format!(
            "requested time {last} but the data has only {} steps",
            engine.t()
        )));
    }
    Ok(())
}

// ---------------------------------------------------------------------

fn report(a: ReportArgs) -> Result<()> {
    let study: Study = a.study.parse()?;
    let n = a.seeds.unwrap_or_else(|| study.replications(a.full));
    if n == 0 {
        return Err(Error::Config("--seeds must be at least 1".into()));
    }
    let seeds: Vec<u64> = (a.first_seed..a.first_seed + n as u64).collect();
    if !a.full && a.seeds.is_none() {
        warn!("desk-scale run with {n} replications; pass --full for full-scale counts");
    }
    create_dir(&a.out)?;
    let rep = replicate_study(study, &seeds, a.full)?;
    let meta = serde_json::json!({ "study": study.as_str(), "seeds": seeds, "full": a.full });
    for tab in &rep.tables {
        let path = a.out.join(format!("{}.csv", tab.name));
        let sidecar = Sidecar::new(study.as_str(), a.first_seed, tab.header.clone(), &meta)?;
        write_table(&path, &tab.header, &tab.rows, &sidecar)?;
        info!("wrote {}", path.display());
    }
    Ok(())
}
