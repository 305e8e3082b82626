//! Run configuration, CSV ingestion and result files.
//!
//! Observation input is one row per measurement:
//!
//! ```text
//! day,site,coord_x,coord_y,count,exposure
//! ```
//!
//! Rows sharing `(site, day)` are summed. Time steps are the distinct days
//! in ascending order, so `t = 1` is the first day present. A site absent
//! on a day is masked for that step.

use std::collections::{BTreeMap, HashMap};
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::covariates::CovariateSpec;
use crate::eb::{Estimator, GridSpec};
use crate::mcmc::McmcConfig;
use crate::orchestrator::{EngineSetup, Prediction, StepReport};
use crate::proposal::{FilterSettings, InitMethod, NewtonSettings, ProposalMode};
use crate::spatial::{CorrelationKernel, Family, KernelKind, ObsBatch, ObservationModel, SiteSet};
use crate::suffstats::PriorHyper;
use crate::{Error, Result};

pub const CODE_VERSION: &str = env!("CARGO_PKG_VERSION");

pub const OBSERVATION_COLUMNS: [&str; 6] = ["day", "site", "coord_x", "coord_y", "count", "exposure"];

// ---------------------------------------------------------------------
// configuration

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelBlock {
    pub family: Family,
    pub kernel: KernelKind,
    pub nugget: f64,
    pub covariates: CovariateSpec,
}

impl Default for ModelBlock {
    fn default() -> Self {
        Self {
            family: Family::Poisson,
            kernel: KernelKind::Exponential,
            nugget: 0.0,
            covariates: CovariateSpec::intercept_only(),
        }
    }
}

/// `alpha | sigma2 ~ N(a0 / s0, sigma2 / s0)`,
/// `beta | sigma2 ~ N(b0 / q0, sigma2 / q0 I)`,
/// `sigma2 ~ IG(c0 / 2, r0 / 2)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PriorBlock {
    pub a0: f64,
    pub s0: f64,
    /// One entry per covariate; zeros when omitted.
    pub b0: Option<Vec<f64>>,
    pub q0: f64,
    pub c0: f64,
    pub r0: f64,
}

impl Default for PriorBlock {
    fn default() -> Self {
        Self {
            a0: 0.0,
            s0: 0.1,
            b0: None,
            q0: 0.01,
            c0: 3.0,
            r0: 1.0 / 3.0,
        }
    }
}

impl PriorBlock {
    pub fn hyper(&self, dim: usize) -> Result<PriorHyper> {
        let b0 = match &self.b0 {
            Some(v) if v.len() != dim => {
                return Err(Error::Config(format!(
                    "prior.b0 has {} entries but the covariate spec has {dim} columns",
                    v.len()
                )))
            }
            Some(v) => v.clone(),
            None => vec![0.0; dim],
        };
        let h = PriorHyper {
            a0: self.a0,
            s0: self.s0,
            b0,
            q0: self.q0,
            c0: self.c0,
            r0: self.r0,
        };
        h.validate()?;
        Ok(h)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridBlock {
    /// Explicit fine grid; overrides `fine_min`, `fine_max`, `fine_count`.
    pub fine: Option<Vec<f64>>,
    pub fine_min: f64,
    pub fine_max: f64,
    pub fine_count: usize,
    pub coarse: Vec<f64>,
    /// Defaults to the first coarse point.
    pub reference: Option<f64>,
}

impl Default for GridBlock {
    fn default() -> Self {
        Self {
            fine: None,
            fine_min: 0.2,
            fine_max: 0.8,
            fine_count: 41,
            coarse: vec![0.230, 0.335, 0.440, 0.545, 0.650, 0.755],
            reference: None,
        }
    }
}

impl GridBlock {
    pub fn fine_points(&self) -> Result<Vec<f64>> {
        match &self.fine {
            Some(v) => Ok(v.clone()),
            None => {
                if self.fine_count < 1 || !(self.fine_max >= self.fine_min) {
                    return Err(Error::Config(format!(
                        "grid: need fine_count >= 1 and fine_max >= fine_min (got {}, [{}, {}])",
                        self.fine_count, self.fine_min, self.fine_max
                    )));
                }
                Ok(GridSpec::linspace(self.fine_min, self.fine_max, self.fine_count))
            }
        }
    }

    pub fn spec(&self, chains: &[usize]) -> Result<GridSpec> {
        let reference = self
            .reference
            .or_else(|| self.coarse.first().copied())
            .ok_or_else(|| Error::Config("grid.coarse is empty".into()))?;
        GridSpec::new(self.fine_points()?, &self.coarse, reference, chains.to_vec())
            .map_err(|e| Error::Config(format!("grid: {e}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MonteCarloBlock {
    /// Chains per coarse point (`L`).
    pub chains: usize,
    /// Per-point chain counts; overrides `chains`.
    pub chains_per_point: Option<Vec<usize>>,
    /// Particles per chain (`N`).
    pub particles: usize,
    /// Gibbs iterations per step (`L_g`).
    pub gibbs_iters: usize,
    pub init: InitMethod,
}

impl Default for MonteCarloBlock {
    fn default() -> Self {
        Self {
            chains: 100,
            chains_per_point: None,
            particles: 100,
            gibbs_iters: 50,
            init: InitMethod::FirstObservation,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct ProposalBlock {
    pub mode: ProposalMode,
    pub newton: NewtonSettings,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EstimationBlock {
    pub estimator: Estimator,
    pub ci_level: f64,
    pub ess_floor: f64,
}

impl Default for EstimationBlock {
    fn default() -> Self {
        Self {
            estimator: Estimator::Mixture,
            ci_level: 0.95,
            ess_floor: 10.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct IoBlock {
    /// Observation CSV; `-` reads standard input.
    pub data: Option<PathBuf>,
    /// Site table (`site,coord_x,coord_y`). Required when streaming from
    /// standard input; otherwise sites are taken from the data.
    pub sites: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    /// Steps between checkpoint writes.
    pub checkpoint_every: Option<usize>,
}

/// Complete run configuration. Every block and key is optional; omitted
/// keys take the documented defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub model: ModelBlock,
    pub prior: PriorBlock,
    pub grid: GridBlock,
    pub monte_carlo: MonteCarloBlock,
    pub proposal: ProposalBlock,
    pub estimation: EstimationBlock,
    pub mcmc: McmcConfig,
    pub io: IoBlock,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            model: ModelBlock::default(),
            prior: PriorBlock::default(),
            grid: GridBlock::default(),
            monte_carlo: MonteCarloBlock::default(),
            proposal: ProposalBlock::default(),
            estimation: EstimationBlock::default(),
            mcmc: McmcConfig::default(),
            io: IoBlock::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(s).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads and validates a config file. Relative paths in `[io]` are
    /// resolved against the file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        let mut cfg = Self::from_toml_str(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        for p in [&mut cfg.io.data, &mut cfg.io.sites, &mut cfg.io.out, &mut cfg.io.checkpoint]
            .into_iter()
            .flatten()
        {
            if p.is_relative() && p.as_os_str() != "-" {
                *p = base.join(&*p);
            }
        }
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn chains(&self) -> Vec<usize> {
        match &self.monte_carlo.chains_per_point {
            Some(v) => v.clone(),
            None => vec![self.monte_carlo.chains; self.grid.coarse.len()],
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.covariates.validate()?;
        if !(0.0..1.0).contains(&self.model.nugget) {
            return Err(Error::Config(format!("model.nugget must lie in [0, 1), got {}", self.model.nugget)));
        }
        self.prior.hyper(self.model.covariates.dim())?;
        let chains = self.chains();
        if chains.len() != self.grid.coarse.len() {
            return Err(Error::Config(format!(
                "monte_carlo.chains_per_point has {} entries for {} coarse points",
                chains.len(),
                self.grid.coarse.len()
            )));
        }
        if chains.iter().any(|&c| c == 0) {
            return Err(Error::Config("every coarse point needs at least one chain".into()));
        }
        self.grid.spec(&chains)?;
        let mc = &self.monte_carlo;
        if mc.particles == 0 || mc.gibbs_iters == 0 {
            return Err(Error::Config("monte_carlo.particles and monte_carlo.gibbs_iters must be at least 1".into()));
        }
        let est = &self.estimation;
        if !(est.ci_level > 0.0 && est.ci_level < 1.0) {
            return Err(Error::Config(format!("estimation.ci_level must lie in (0, 1), got {}", est.ci_level)));
        }
        let nt = &self.proposal.newton;
        if !(nt.tol > 0.0) || nt.max_iter == 0 {
            return Err(Error::Config("proposal.newton needs tol > 0 and max_iter >= 1".into()));
        }
        self.mcmc.validate()?;
        if self.io.checkpoint_every == Some(0) {
            return Err(Error::Config("io.checkpoint_every must be at least 1".into()));
        }
        Ok(())
    }

    pub fn kernel(&self) -> Result<CorrelationKernel> {
        let reference = self.grid.reference.or_else(|| self.grid.coarse.first().copied()).unwrap_or(1.0);
        CorrelationKernel::new(self.model.kernel, reference, self.model.nugget)
            .map_err(|e| Error::Config(format!("model: {e}")))
    }

    pub fn engine_setup(&self, sites: SiteSet) -> Result<EngineSetup> {
        self.validate()?;
        Ok(EngineSetup {
            sites,
            kernel: self.kernel()?,
            model: ObservationModel::new(self.model.family),
            prior: self.prior.hyper(self.model.covariates.dim())?,
            grid: self.grid.spec(&self.chains())?,
            filter: FilterSettings {
                n_particles: self.monte_carlo.particles,
                gibbs_iters: self.monte_carlo.gibbs_iters,
                mode: self.proposal.mode,
                newton: self.proposal.newton,
            },
            estimator: self.estimation.estimator,
            ci_level: self.estimation.ci_level,
            ess_floor: self.estimation.ess_floor,
            init: self.monte_carlo.init,
            seed: self.seed,
        })
    }
}

// ---------------------------------------------------------------------
// observation ingestion

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObservationRecord {
    pub day: i64,
    pub site: String,
    pub coord_x: f64,
    pub coord_y: f64,
    pub count: f64,
    pub exposure: f64,
}

/// Ordered site table.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct SiteIndex {
    pub ids: Vec<String>,
    pub coords: Vec<[f64; 2]>,
    lookup: HashMap<String, usize>,
}

impl SiteIndex {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<usize> {
        self.lookup.get(id).copied()
    }

    /// Adds a site or checks its coordinates against the stored ones.
    fn register(&mut self, id: &str, xy: [f64; 2], row: usize) -> Result<usize> {
        if let Some(&i) = self.lookup.get(id) {
            let c = self.coords[i];
            if (c[0] - xy[0]).abs() > 1e-9 * (1.0 + c[0].abs()) || (c[1] - xy[1]).abs() > 1e-9 * (1.0 + c[1].abs()) {
                return Err(Error::Data {
                    row,
                    message: format!(
                        "site `{id}` has coordinates ({}, {}) but was first seen at ({}, {})",
                        xy[0], xy[1], c[0], c[1]
                    ),
                });
            }
            return Ok(i);
        }
        if !(xy[0].is_finite() && xy[1].is_finite()) {
            return Err(Error::Data {
                row,
                message: format!("site `{id}` has non-finite coordinates"),
            });
        }
        let i = self.ids.len();
        self.ids.push(id.to_string());
        self.coords.push(xy);
        self.lookup.insert(id.to_string(), i);
        Ok(i)
    }

    pub fn site_set(&self) -> SiteSet {
        SiteSet::planar(self.coords.clone())
    }

    /// Reads `site,coord_x,coord_y`.
    pub fn read<R: Read>(reader: R) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
        check_columns(rdr.headers()?, &["site", "coord_x", "coord_y"])?;
        let mut idx = SiteIndex::default();
        for (i, rec) in rdr.deserialize::<SiteRow>().enumerate() {
            let row = i + 2;
            let r = rec.map_err(|e| Error::Data {
                row,
                message: e.to_string(),
            })?;
            if idx.get(&r.site).is_some() {
                return Err(Error::Data {
                    row,
                    message: format!("site `{}` listed twice", r.site),
                });
            }
            idx.register(&r.site, [r.coord_x, r.coord_y], row)?;
        }
        if idx.is_empty() {
            return Err(Error::Data {
                row: 1,
                message: "site table is empty".into(),
            });
        }
        Ok(idx)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read(open(path)?)
    }

    pub fn write<W: Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        wr.write_record(["site", "coord_x", "coord_y"])?;
        for (id, c) in self.ids.iter().zip(&self.coords) {
            wr.write_record([id.clone(), c[0].to_string(), c[1].to_string()])?;
        }
        wr.flush()?;
        Ok(())
    }

    pub fn from_sites(ids: Vec<String>, coords: Vec<[f64; 2]>) -> Result<Self> {
        let mut idx = SiteIndex::default();
        for (i, (id, c)) in ids.iter().zip(coords).enumerate() {
            if idx.get(id).is_some() {
                return Err(Error::Data {
                    row: i + 2,
                    message: format!("site `{id}` listed twice"),
                });
            }
            idx.register(id, c, i + 2)?;
        }
        Ok(idx)
    }
}

#[derive(Deserialize)]
struct SiteRow {
    site: String,
    coord_x: f64,
    coord_y: f64,
}

fn check_columns(headers: &csv::StringRecord, expected: &[&str]) -> Result<()> {
    for h in headers.iter() {
        if !expected.contains(&h) {
            return Err(Error::Data {
                row: 1,
                message: format!("unknown column `{h}` (expected {})", expected.join(", ")),
            });
        }
    }
    for e in expected {
        if !headers.iter().any(|h| h == *e) {
            return Err(Error::Data {
                row: 1,
                message: format!("missing column `{e}`"),
            });
        }
    }
    Ok(())
}

fn open(path: &Path) -> Result<Box<dyn Read>> {
    if path.as_os_str() == "-" {
        Ok(Box::new(std::io::stdin()))
    } else {
        let f = File::open(path).map_err(|e| Error::Config(format!("cannot open {}: {e}", path.display())))?;
        Ok(Box::new(f))
    }
}

fn validate_record(r: &ObservationRecord, family: Family, row: usize) -> Result<()> {
    let bad = |m: String| Err(Error::Data { row, message: m });
    if !r.count.is_finite() {
        return bad(format!("non-finite count {}", r.count));
    }
    if family == Family::Poisson {
        if r.count < 0.0 {
            return bad(format!("negative count {}", r.count));
        }
        if r.count.fract() != 0.0 {
            return bad(format!("count {} is not an integer", r.count));
        }
    }
    if !(r.exposure >= 0.0) || !r.exposure.is_finite() {
        return bad(format!("exposure must be a nonnegative number, got {}", r.exposure));
    }
    if r.exposure == 0.0 && r.count != 0.0 {
        return bad(format!("zero exposure with nonzero count {}", r.count));
    }
    Ok(())
}

/// Aggregated observations: one batch per distinct day.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub sites: SiteIndex,
    pub days: Vec<i64>,
    pub batches: Vec<ObsBatch>,
}

impl Dataset {
    pub fn n_sites(&self) -> usize {
        self.sites.len()
    }

    pub fn n_times(&self) -> usize {
        self.batches.len()
    }

    pub fn site_set(&self) -> SiteSet {
        self.sites.site_set()
    }

    /// Design matrices `G_0, ..., G_T`.
    pub fn designs(&self, spec: &CovariateSpec) -> Vec<DMatrix<f64>> {
        let s = self.site_set();
        (0..=self.n_times()).map(|t| spec.design(&s, t)).collect()
    }

    /// Canonical form: one row per observed `(day, site)` in day, then
    /// site order. Re-ingesting it reproduces `self`.
    pub fn records(&self) -> Vec<ObservationRecord> {
        let mut out = Vec::new();
        for (day, b) in self.days.iter().zip(&self.batches) {
            for i in 0..b.len() {
                if b.observed[i] {
                    out.push(ObservationRecord {
                        day: *day,
                        site: self.sites.ids[i].clone(),
                        coord_x: self.sites.coords[i][0],
                        coord_y: self.sites.coords[i][1],
                        count: b.y[i],
                        exposure: b.tau[i],
                    });
                }
            }
        }
        out
    }

    pub fn write<W: Write>(&self, w: W) -> Result<()> {
        write_records(w, &self.records())
    }
}

pub fn write_records<W: Write>(w: W, records: &[ObservationRecord]) -> Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    for r in records {
        wr.serialize(r)?;
    }
    wr.flush()?;
    Ok(())
}

fn read_records<R: Read>(reader: R, family: Family) -> Result<Vec<(usize, ObservationRecord)>> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    check_columns(rdr.headers()?, &OBSERVATION_COLUMNS)?;
    let mut out = Vec::new();
    for (i, rec) in rdr.deserialize::<ObservationRecord>().enumerate() {
        let row = i + 2;
        let r = rec.map_err(|e| Error::Data {
            row,
            message: e.to_string(),
        })?;
        validate_record(&r, family, row)?;
        out.push((row, r));
    }
    Ok(out)
}

/// Aggregates `(row, record)` pairs into batches over `sites`.
fn aggregate(rows: &[(usize, ObservationRecord)], sites: &mut SiteIndex, fixed_sites: bool) -> Result<Dataset> {
    let mut order: Vec<usize> = (0..rows.len()).collect();
    order.sort_by_key(|&i| rows[i].1.day);
    let mut per_day: BTreeMap<i64, BTreeMap<usize, (f64, f64)>> = BTreeMap::new();
    for &i in &order {
        let (row, r) = &rows[i];
        let s = if fixed_sites {
            let s = sites.get(&r.site).ok_or_else(|| Error::Data {
                row: *row,
                message: format!("site `{}` is not in the site table", r.site),
            })?;
            let c = sites.coords[s];
            if (c[0] - r.coord_x).abs() > 1e-9 * (1.0 + c[0].abs()) || (c[1] - r.coord_y).abs() > 1e-9 * (1.0 + c[1].abs()) {
                return Err(Error::Data {
                    row: *row,
                    message: format!("site `{}` coordinates disagree with the site table", r.site),
                });
            }
            s
        } else {
            sites.register(&r.site, [r.coord_x, r.coord_y], *row)?
        };
        let e = per_day.entry(r.day).or_default().entry(s).or_insert((0.0, 0.0));
        e.0 += r.count;
        e.1 += r.exposure;
    }
    let n = sites.len();
    let mut days = Vec::with_capacity(per_day.len());
    let mut batches = Vec::with_capacity(per_day.len());
    for (day, obs) in per_day {
        let mut b = ObsBatch::empty(n);
        for (s, (y, tau)) in obs {
            if tau > 0.0 {
                b.y[s] = y;
                b.tau[s] = tau;
                b.observed[s] = true;
            }
        }
        days.push(day);
        batches.push(b);
    }
    Ok(Dataset {
        sites: sites.clone(),
        days,
        batches,
    })
}

/// Reads and aggregates an observation CSV. Sites are ordered by first
/// appearance in day order unless a site table is given.
pub fn ingest_reader<R: Read>(reader: R, family: Family, sites: Option<&SiteIndex>) -> Result<Dataset> {
    let rows = read_records(reader, family)?;
    if rows.is_empty() {
        return Err(Error::Data {
            row: 1,
            message: "no observations".into(),
        });
    }
    match sites {
        Some(s) => aggregate(&rows, &mut s.clone(), true),
        None => aggregate(&rows, &mut SiteIndex::default(), false),
    }
}

pub fn ingest(path: &Path, family: Family, sites: Option<&SiteIndex>) -> Result<Dataset> {
    ingest_reader(open(path)?, family, sites)
}

/// Streams one aggregated batch per day from rows sorted by day. The site
/// table must be known in advance.
pub struct DayStream<R: Read> {
    rows: csv::DeserializeRecordsIntoIter<R, ObservationRecord>,
    sites: SiteIndex,
    family: Family,
    row: usize,
    pending: Option<(usize, ObservationRecord)>,
    last_day: Option<i64>,
}

impl<R: Read> DayStream<R> {
    pub fn new(reader: R, sites: SiteIndex, family: Family) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
        check_columns(rdr.headers()?, &OBSERVATION_COLUMNS)?;
        Ok(Self {
            rows: rdr.into_deserialize(),
            sites,
            family,
            row: 1,
            pending: None,
            last_day: None,
        })
    }

    fn next_row(&mut self) -> Option<Result<(usize, ObservationRecord)>> {
        if let Some(p) = self.pending.take() {
            return Some(Ok(p));
        }
        let rec = self.rows.next()?;
        self.row += 1;
        let row = self.row;
        Some(
            rec.map_err(|e| Error::Data {
                row,
                message: e.to_string(),
            })
            .and_then(|r| validate_record(&r, self.family, row).map(|_| (row, r))),
        )
    }

    fn next_day(&mut self) -> Result<Option<(i64, ObsBatch)>> {
        let mut rows = Vec::new();
        let mut day = None;
        while let Some(r) = self.next_row() {
            let (row, rec) = r?;
            match day {
                None => {
                    if let Some(last) = self.last_day {
                        if rec.day <= last {
                            return Err(Error::Data {
                                row,
                                message: format!("day {} is out of order (streamed input must be sorted by day)", rec.day),
                            });
                        }
                    }
                    day = Some(rec.day);
                    rows.push((row, rec));
                }
                Some(d) if rec.day == d => rows.push((row, rec)),
                Some(_) => {
                    self.pending = Some((row, rec));
                    break;
                }
            }
        }
        let Some(d) = day else {
            return Ok(None);
        };
        self.last_day = Some(d);
        let ds = aggregate(&rows, &mut self.sites.clone(), true)?;
        Ok(ds.batches.into_iter().next().map(|b| (d, b)))
    }
}

impl<R: Read> Iterator for DayStream<R> {
    type Item = Result<(i64, ObsBatch)>;
    fn next(&mut self) -> Option<Self::Item> {
        self.next_day().transpose()
    }
}

// ---------------------------------------------------------------------
// results and sidecars

/// Metadata written next to every output file as `<file>.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sidecar {
    pub tag: String,
    pub code_version: String,
    pub seed: u64,
    pub columns: Vec<String>,
    pub config: serde_json::Value,
}

impl Sidecar {
    pub fn new<C: Serialize>(tag: &str, seed: u64, columns: Vec<String>, config: &C) -> Result<Self> {
        Ok(Self {
            tag: tag.into(),
            code_version: CODE_VERSION.into(),
            seed,
            columns,
            config: serde_json::to_value(config).map_err(|e| Error::Config(e.to_string()))?,
        })
    }

    pub fn path_for(data: &Path) -> PathBuf {
        let mut s = data.as_os_str().to_owned();
        s.push(".json");
        PathBuf::from(s)
    }

    pub fn write(&self, data: &Path) -> Result<()> {
        let f = File::create(Self::path_for(data))?;
        serde_json::to_writer_pretty(f, self).map_err(|e| Error::Io(e.into()))?;
        Ok(())
    }
}

pub fn results_columns(beta_names: &[String]) -> Vec<String> {
    let mut c = vec!["t".to_string(), "alpha".to_string()];
    c.extend(beta_names.iter().map(|n| format!("beta_{n}")));
    c.extend(
        [
            "sigma2",
            "phi",
            "ci_lower",
            "ci_upper",
            "mean_ess",
            "min_ess",
            "reweight_ess",
            "delta_sq_mean",
            "delta_sq_max",
            "step_seconds",
        ]
        .map(String::from),
    );
    c
}

pub fn results_row(r: &StepReport) -> Vec<String> {
    let mut v = vec![r.t.to_string(), r.theta_hat.alpha.to_string()];
    v.extend(r.theta_hat.beta.iter().map(|b| b.to_string()));
    v.extend(
        [
            r.theta_hat.sigma2,
            r.phi_hat,
            r.ci_lower,
            r.ci_upper,
            r.mean_ess,
            r.min_ess,
            r.reweight_ess,
            r.delta_sq_mean,
            r.delta_sq_max,
            r.step_seconds,
        ]
        .map(|x| x.to_string()),
    );
    v
}

/// Line-oriented CSV writer; every row is flushed as soon as it is
/// written, so a partial file is a valid prefix.
pub struct ResultsWriter {
    w: BufWriter<File>,
}

impl ResultsWriter {
    pub fn create(path: &Path, columns: &[String], sidecar: &Sidecar) -> Result<Self> {
        let mut w = BufWriter::new(File::create(path)?);
        writeln!(w, "{}", columns.join(","))?;
        w.flush()?;
        sidecar.write(path)?;
        Ok(Self { w })
    }

    /// Reopens an existing results file for a resumed run, dropping rows
    /// past `t` so the file matches the checkpoint.
    pub fn resume(path: &Path, columns: &[String], t: usize) -> Result<Self> {
        let f = File::open(path).map_err(|e| Error::Checkpoint(format!("cannot reopen {}: {e}", path.display())))?;
        let mut lines = BufReader::new(f).lines();
        let header = lines.next().transpose()?.unwrap_or_default();
        if header != columns.join(",") {
            return Err(Error::Checkpoint(format!("{} has a different header", path.display())));
        }
        let mut keep = vec![header];
        for line in lines {
            let line = line?;
            let step: usize = line.split(',').next().and_then(|s| s.parse().ok()).unwrap_or(usize::MAX);
            if step <= t {
                keep.push(line);
            }
        }
        let mut w = BufWriter::new(File::create(path)?);
        for l in &keep {
            writeln!(w, "{l}")?;
        }
        w.flush()?;
        let f = OpenOptions::new().append(true).open(path)?;
        Ok(Self { w: BufWriter::new(f) })
    }

    pub fn write_row(&mut self, cells: &[String]) -> Result<()> {
        writeln!(self.w, "{}", cells.join(","))?;
        self.w.flush()?;
        Ok(())
    }

    pub fn write_report(&mut self, r: &StepReport) -> Result<()> {
        self.write_row(&results_row(r))
    }
}

/// Reads `target,coord_x,coord_y`.
pub fn read_targets(path: &Path) -> Result<SiteIndex> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(open(path)?);
    check_columns(rdr.headers()?, &["target", "coord_x", "coord_y"])?;
    let mut ids = Vec::new();
    let mut coords = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let row = i + 2;
        let num = |k: usize| -> Result<f64> {
            rec[k].parse::<f64>().map_err(|e| Error::Data {
                row,
                message: format!("bad coordinate `{}`: {e}", &rec[k]),
            })
        };
        ids.push(rec[0].to_string());
        coords.push([num(1)?, num(2)?]);
    }
    SiteIndex::from_sites(ids, coords)
}

pub const PREDICTION_COLUMNS: [&str; 6] = ["t", "target", "coord_x", "coord_y", "mean", "sd"];

pub fn write_prediction(path: &Path, t: usize, targets: &SiteIndex, pred: &Prediction, sidecar: &Sidecar) -> Result<()> {
    let mut wr = csv::Writer::from_path(path)?;
    wr.write_record(PREDICTION_COLUMNS)?;
    for i in 0..targets.len() {
        wr.write_record([
            t.to_string(),
            targets.ids[i].clone(),
            targets.coords[i][0].to_string(),
            targets.coords[i][1].to_string(),
            pred.mean[i].to_string(),
            pred.sd[i].to_string(),
        ])?;
    }
    wr.flush()?;
    sidecar.write(path)
}

pub fn write_table(path: &Path, header: &[String], rows: &[Vec<String>], sidecar: &Sidecar) -> Result<()> {
    let mut wr = csv::Writer::from_path(path)?;
    wr.write_record(header)?;
    for r in rows {
        wr.write_record(r)?;
    }
    wr.flush()?;
    sidecar.write(path)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn csv_of(rows: &[&str]) -> String {
        let mut s = OBSERVATION_COLUMNS.join(",");
        for r in rows {
            s.push('\n');
            s.push_str(r);
        }
        s
    }

    #[test]
    fn duplicate_rows_are_summed() {
        let d = ingest_reader(
            csv_of(&["1,a,0,0,3,1", "1,a,0,0,4,1", "1,b,1,0,0,1"]).as_bytes(),
            Family::Poisson,
            None,
        )
        .unwrap();
        assert_eq!(d.n_times(), 1);
        assert_eq!((d.batches[0].y[0], d.batches[0].tau[0]), (7.0, 2.0));
    }

    #[test]
    fn absent_sites_are_masked() {
        let d = ingest_reader(csv_of(&["1,a,0,0,3,1", "2,b,1,0,2,1"]).as_bytes(), Family::Poisson, None).unwrap();
        assert_eq!(d.days, vec![1, 2]);
        assert_eq!(d.batches[0].observed, vec![true, false]);
        assert_eq!(d.batches[1].observed, vec![false, true]);
        assert_eq!(d.batches[0].y[1], 0.0);
    }

    #[test]
    fn validation_errors_carry_rows() {
        let cases = [
            (csv_of(&["1,a,0,0,3,1", "1,a,0,0,-1,1"]), 3, "negative"),
            (csv_of(&["1,a,0,0,2,0"]), 2, "zero exposure"),
            (csv_of(&["1,a,0,0,2.5,1"]), 2, "integer"),
            (csv_of(&["1,a,0,0,2,1", "2,a,1,0,2,1"]), 3, "coordinates"),
            ("day,site,coord_x,coord_y,count,exposure,extra\n1,a,0,0,1,1,9".to_string(), 1, "unknown column"),
            ("day,site,coord_x,coord_y,count\n1,a,0,0,1".to_string(), 1, "missing column"),
        ];
        for (text, row, needle) in cases {
            match ingest_reader(text.as_bytes(), Family::Poisson, None) {
                Err(Error::Data { row: r, message }) => {
                    assert_eq!(r, row, "{message}");
                    assert!(message.contains(needle), "{message}");
                }
                other => panic!("expected a data error, got {other:?}"),
            }
        }
    }

    #[test]
    fn canonical_output_is_idempotent() {
        let text = csv_of(&["3,b,1,2,1,1", "1,a,0,0,3,1", "1,a,0,0,4,2", "3,c,2,2,0,1", "2,a,0,0,0,1"]);
        let d = ingest_reader(text.as_bytes(), Family::Poisson, None).unwrap();
        let mut buf = Vec::new();
        d.write(&mut buf).unwrap();
        let d2 = ingest_reader(buf.as_slice(), Family::Poisson, None).unwrap();
        assert_eq!(d, d2);
    }

    #[test]
    fn stream_matches_batch_ingest() {
        let text = csv_of(&["1,a,0,0,3,1", "1,b,1,0,4,2", "1,a,0,0,1,1", "4,b,1,0,0,1", "9,a,0,0,5,3"]);
        let d = ingest_reader(text.as_bytes(), Family::Poisson, None).unwrap();
        let s: Vec<(i64, ObsBatch)> = DayStream::new(text.as_bytes(), d.sites.clone(), Family::Poisson)
            .unwrap()
            .collect::<Result<_>>()
            .unwrap();
        assert_eq!(s.iter().map(|p| p.0).collect::<Vec<_>>(), d.days);
        assert_eq!(s.into_iter().map(|p| p.1).collect::<Vec<_>>(), d.batches);
        let bad = csv_of(&["2,a,0,0,3,1", "1,a,0,0,4,2"]);
        let r: Result<Vec<_>> = DayStream::new(bad.as_bytes(), d.sites.clone(), Family::Poisson).unwrap().collect();
        assert!(matches!(r, Err(Error::Data { row: 3, .. })));
    }

    #[test]
    fn config_defaults_and_errors() {
        let c = RunConfig::from_toml_str("").unwrap();
        let p = c.prior.hyper(1).unwrap();
        assert_eq!((p.a0, p.s0, p.b0.clone(), p.q0, p.c0), (0.0, 0.1, vec![0.0], 0.01, 3.0));
        assert!((p.r0 - 1.0 / 3.0).abs() < 1e-15);
        let g = c.grid.spec(&c.chains()).unwrap();
        assert_eq!(g.n_fine(), 41);
        assert_eq!(g.reference_phi(), 0.23);

        let err = |s: &str| match RunConfig::from_toml_str(s) {
            Err(Error::Config(m)) => m,
            other => panic!("expected config error for {s:?}, got {other:?}"),
        };
        assert!(err("[prior]\nb0 = [1.0, 2.0]").contains("b0"));
        assert!(err("[grid]\ncoarse = [0.31]").contains("grid"));
        assert!(err("[estimation]\nci_level = 1.5").contains("ci_level"));
        assert!(err("[model]\nfamliy = \"poisson\"").contains("famliy"));

        let fk = RunConfig::from_toml_str(
            "[model.covariates]\nintercept = true\ndistance_from = [0.0, 0.0]\ntime_trend = true\n[prior]\nb0 = [0.0, 0.0, 0.0]",
        )
        .unwrap();
        assert_eq!(fk.model.covariates.dim(), 3);
        let round = RunConfig::from_toml_str(&fk.to_toml_string().unwrap()).unwrap();
        assert_eq!(round, fk);
    }

    #[test]
    fn results_resume_truncates() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("r.csv");
        let cols = vec!["t".to_string(), "v".to_string()];
        let sc = Sidecar::new("online", 1, cols.clone(), &()).unwrap();
        let mut w = ResultsWriter::create(&p, &cols, &sc).unwrap();
        for t in 1..=5 {
            w.write_row(&[t.to_string(), "0".into()]).unwrap();
        }
        drop(w);
        let mut w = ResultsWriter::resume(&p, &cols, 3).unwrap();
        w.write_row(&["4".into(), "1".into()]).unwrap();
        drop(w);
        let text = std::fs::read_to_string(&p).unwrap();
        assert_eq!(text, "t,v\n1,0\n2,0\n3,0\n4,1\n");
        assert!(Sidecar::path_for(&p).exists());
    }
}
