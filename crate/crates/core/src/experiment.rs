//! Configured end-to-end runs: sensitivity maps, site selection, the twin
//! experiment and its random-subset baseline.
//!
//! A run is fully described by its [`ExperimentConfig`] and the scenario it
//! points to. Both are hashed; artifacts go to `<output_dir>/<hash prefix>/`
//! and carry the hash and tool version. Files in a run directory are never
//! overwritten with different content.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::estimation::{
    reconstruction_error, site_reconstruction_errors, write_trace_csv, EstimationTrace, Estimator,
    EstimatorOptions, StopReason,
};
use crate::forward::io::write_binary;
use crate::forward::{add_noise, BandpassSpec, ForwardModel, FrequencyGrid, ReferenceModel, WavefieldSpectra};
use crate::model::{
    perturb_true_parameters, ParameterVector, PerturbationSpec, Scenario, TruthPerturbation,
    PARAMETER_NAMES, PARAM_COUNT,
};
use crate::selection::{
    brute_force_select, explicit_select, greedy_select, random_select, Candidates, SelectionResult,
};
use crate::sensitivity::{
    export_sensitivity_maps, summed_sensitivity, Normalization, SensitivityMatrix, SensitivityRuns,
    SensitivitySidecar,
};

pub const TOOL_VERSION: &str = concat!(env!("CARGO_PKG_NAME"), " ", env!("CARGO_PKG_VERSION"));

/// Characters of the config hash used for the run directory name.
pub const RUN_DIR_HASH_LEN: usize = 16;

pub const PRESET_PREFIX: &str = "preset:";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Seeds {
    pub truth: u64,
    pub noise: u64,
    pub baseline: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum MethodConfig {
    #[default]
    Greedy,
    Random,
    Brute,
    Explicit,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SelectionConfig {
    pub p: usize,
    /// Regularization; defaults to `1e-8 * trace(D^T D) / r`.
    #[serde(default)]
    pub epsilon: Option<f64>,
    #[serde(default)]
    pub method: MethodConfig,
    /// 1-based network positions for `explicit`.
    #[serde(default)]
    pub sites: Option<Vec<usize>>,
}

/// Finite-difference half steps of the sensitivity matrix.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StepConfig {
    pub structure_fraction: f64,
    pub location_km: f64,
}

impl Default for StepConfig {
    fn default() -> Self {
        StepConfig { structure_fraction: 0.10, location_km: 0.5 }
    }
}

impl StepConfig {
    pub fn spec(&self) -> PerturbationSpec {
        PerturbationSpec::uniform(self.structure_fraction, self.location_km)
    }
}

fn default_band() -> Option<BandpassSpec> {
    Some(BandpassSpec::default())
}

fn default_noise() -> f64 {
    1e-5
}

fn default_baseline_count() -> usize {
    100
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("runs")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Scenario file, relative to the config file, or `preset:<name>`.
    pub scenario: String,
    #[serde(default)]
    pub grid: FrequencyGrid,
    /// `null` disables filtering.
    #[serde(default = "default_band")]
    pub band: Option<BandpassSpec>,
    #[serde(default)]
    pub perturbation: StepConfig,
    #[serde(default)]
    pub normalization: Normalization,
    #[serde(default)]
    pub truth_perturbation: TruthPerturbation,
    pub selection: SelectionConfig,
    /// Variance of the Gaussian noise on every real observation entry.
    #[serde(default = "default_noise")]
    pub noise_variance: f64,
    pub seeds: Seeds,
    #[serde(default)]
    pub estimator: EstimatorOptions,
    #[serde(default = "default_baseline_count")]
    pub baseline_count: usize,
    /// 1-based subsets that replace the random baseline draws.
    #[serde(default)]
    pub baseline_subsets: Option<Vec<Vec<usize>>>,
    #[serde(default)]
    pub forward: ReferenceModel,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Default twin settings around a preset scenario.
    pub fn preset(name: &str, seeds: Seeds) -> Self {
        ExperimentConfig {
            scenario: format!("{PRESET_PREFIX}{name}"),
            grid: FrequencyGrid::default(),
            band: default_band(),
            perturbation: StepConfig::default(),
            normalization: Normalization::default(),
            truth_perturbation: TruthPerturbation::default(),
            selection: SelectionConfig { p: 3, epsilon: None, method: MethodConfig::Greedy, sites: None },
            noise_variance: default_noise(),
            seeds,
            estimator: EstimatorOptions::default(),
            baseline_count: default_baseline_count(),
            baseline_subsets: None,
            forward: ReferenceModel::default(),
            output_dir: default_output_dir(),
        }
    }
}

/// Command-line replacements applied before hashing.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub out: Option<PathBuf>,
    pub seed_truth: Option<u64>,
    pub seed_noise: Option<u64>,
    pub band: Option<BandpassSpec>,
    pub sites: Option<usize>,
    pub epsilon: Option<f64>,
}

impl Overrides {
    pub fn apply(&self, c: &mut ExperimentConfig) {
        if let Some(o) = &self.out {
            c.output_dir = o.clone();
        }
        if let Some(s) = self.seed_truth {
            c.seeds.truth = s;
        }
        if let Some(s) = self.seed_noise {
            c.seeds.noise = s;
        }
        if let Some(b) = self.band {
            c.band = Some(b);
        }
        if let Some(p) = self.sites {
            c.selection.p = p;
        }
        if let Some(e) = self.epsilon {
            c.selection.epsilon = Some(e);
        }
    }
}

/// `LO:HI` in Hz.
pub fn parse_band(s: &str) -> Result<BandpassSpec> {
    let (lo, hi) = s
        .split_once(':')
        .ok_or_else(|| Error::Config(format!("band must look like LO:HI, got {s:?}")))?;
    let num = |t: &str| {
        t.trim()
            .parse::<f64>()
            .map_err(|_| Error::Config(format!("band edge {t:?} is not a number")))
    };
    BandpassSpec::new(num(lo)?, num(hi)?).map_err(|e| Error::Config(e.to_string()))
}

pub fn preset_scenario(name: &str) -> Result<Scenario> {
    match name {
        "hypocenter1" => Ok(Scenario::hypocenter1()),
        "hypocenter2" => Ok(Scenario::hypocenter2()),
        _ => Err(Error::Config(format!("unknown scenario preset {name:?}"))),
    }
}

/// The noisy observations and the field they come from.
#[derive(Debug, Clone)]
pub struct Truth {
    pub parameters: ParameterVector,
    pub scenario: Scenario,
    /// Filtered, noiseless, full network.
    pub clean: WavefieldSpectra,
    /// `clean` plus noise.
    pub observed: WavefieldSpectra,
}

#[derive(Debug, Clone)]
pub struct TwinOutcome {
    pub selection: SelectionResult,
    pub truth: Truth,
    pub trace: EstimationTrace,
    pub initial_field: WavefieldSpectra,
    pub final_field: WavefieldSpectra,
    pub initial_error: f64,
    pub final_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineRun {
    pub final_error: f64,
    pub iterations: usize,
    pub stop_reason: StopReason,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineRow {
    pub subset: usize,
    /// 0-based network positions.
    pub sites: Vec<usize>,
    pub outcome: std::result::Result<BaselineRun, String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineStats {
    pub count: usize,
    pub succeeded: usize,
    pub failed: usize,
    pub mean: Option<f64>,
    pub min: Option<f64>,
    pub max: Option<f64>,
}

impl BaselineStats {
    pub fn of(rows: &[BaselineRow]) -> Self {
        let errs: Vec<f64> = rows
            .iter()
            .filter_map(|r| r.outcome.as_ref().ok().map(|o| o.final_error))
            .collect();
        let n = errs.len();
        BaselineStats {
            count: rows.len(),
            succeeded: n,
            failed: rows.len() - n,
            mean: (n > 0).then(|| errs.iter().sum::<f64>() / n as f64),
            min: errs.iter().copied().reduce(f64::min),
            max: errs.iter().copied().reduce(f64::max),
        }
    }
}

/// A validated config, its resolved scenario and its hash.
#[derive(Debug, Clone)]
pub struct Experiment {
    pub config: ExperimentConfig,
    pub scenario: Scenario,
    pub hash: String,
}

impl Experiment {
    /// Read `path`, apply `overrides`, resolve and validate.
    pub fn load(path: &Path, overrides: &Overrides) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut config = ExperimentConfig::from_json(&text)?;
        overrides.apply(&mut config);
        let base = path.parent().unwrap_or(Path::new("."));
        if config.output_dir.is_relative() && overrides.out.is_none() {
            config.output_dir = base.join(&config.output_dir);
        }
        let scenario = match config.scenario.strip_prefix(PRESET_PREFIX) {
            Some(name) => preset_scenario(name)?,
            None => Scenario::load(&base.join(&config.scenario))?,
        };
        Experiment::new(config, scenario)
    }

    pub fn new(config: ExperimentConfig, scenario: Scenario) -> Result<Self> {
        scenario.validate().map_err(|e| Error::Config(e.to_string()))?;
        validate_config(&config, scenario.stations.len())?;
        let hash = config_hash(&config, &scenario)?;
        Ok(Experiment { config, scenario, hash })
    }

    pub fn run_dir(&self) -> PathBuf {
        self.config.output_dir.join(&self.hash[..RUN_DIR_HASH_LEN])
    }

    fn forward(&self) -> ReferenceModel {
        self.config.forward
    }

    fn preamble(&self) -> String {
        format!("config_hash: {}\ntool_version: {TOOL_VERSION}", self.hash)
    }

    fn filtered(&self, scenario: &Scenario) -> Result<WavefieldSpectra> {
        let w = self.forward().simulate(
            &scenario.layer_model(),
            &scenario.source,
            &scenario.stations,
            &self.config.grid,
        )?;
        match self.config.band {
            Some(b) => b.apply(&w),
            None => Ok(w),
        }
    }

    pub fn sensitivity(&self) -> Result<SensitivityMatrix> {
        let c = &self.config;
        SensitivityRuns::compute(&self.forward(), &self.scenario, &c.grid, &c.perturbation.spec())
            .and_then(|r| r.matrix(c.band, c.normalization))
            .map_err(|e| e.in_stage("sensitivity"))
    }

    pub fn select(&self, sm: &SensitivityMatrix) -> Result<SelectionResult> {
        let sel = &self.config.selection;
        let run = || -> Result<SelectionResult> {
            let cands = Candidates::from_sensitivity(sm)?;
            let eps = sel.epsilon.unwrap_or_else(|| cands.default_epsilon());
            match sel.method {
                MethodConfig::Greedy => greedy_select(&cands, sel.p, eps),
                MethodConfig::Brute => brute_force_select(&cands, sel.p, eps),
                MethodConfig::Random => {
                    let sites = random_select(cands.len(), sel.p, self.config.seeds.baseline, 1)?;
                    let mut r = explicit_select(&cands, &sites[0], eps)?;
                    r.method = crate::selection::SelectionMethod::Random;
                    Ok(r)
                }
                MethodConfig::Explicit => {
                    let sites: Vec<usize> = sel.sites.iter().flatten().map(|j| j - 1).collect();
                    explicit_select(&cands, &sites, eps)
                }
            }
        };
        run().map_err(|e| e.in_stage("selection"))
    }

    pub fn truth(&self) -> Result<Truth> {
        let c = &self.config;
        let run = || -> Result<Truth> {
            let phi0 = self.scenario.parameters()?;
            let parameters = perturb_true_parameters(&phi0, c.truth_perturbation, c.seeds.truth)?;
            let scenario = self.scenario.with_parameters(&parameters)?;
            let clean = self.filtered(&scenario)?;
            let observed = add_noise(&clean, c.noise_variance, c.seeds.noise)?;
            Ok(Truth { parameters, scenario, clean, observed })
        };
        run().map_err(|e| e.in_stage("truth"))
    }

    pub fn estimate(&self, truth: &Truth, selected: &[usize]) -> Result<EstimationTrace> {
        let forward = self.forward();
        let est = Estimator {
            forward: &forward,
            grid: self.config.grid,
            filter: self.config.band,
            options: self.config.estimator,
        };
        truth
            .observed
            .select(selected)
            .and_then(|obs| est.run(&self.scenario, selected, &obs, Some(&truth.clean)))
            .map_err(|e| e.in_stage("estimation"))
    }

    /// Truth, noise, selection, estimation and reconstruction in memory.
    pub fn twin(&self) -> Result<TwinOutcome> {
        let truth = self.truth()?;
        let sm = self.sensitivity()?;
        let selection = self.select(&sm)?;
        let trace = self.estimate(&truth, &selection.selected)?;
        let reconstruct = || -> Result<_> {
            let initial_field = self.filtered(&self.scenario)?;
            let final_field = self.filtered(&self.scenario.with_parameters(&trace.final_parameters())?)?;
            let initial_error = reconstruction_error(&truth.clean, &initial_field)?;
            let final_error = reconstruction_error(&truth.clean, &final_field)?;
            Ok((initial_field, final_field, initial_error, final_error))
        };
        let (initial_field, final_field, initial_error, final_error) =
            reconstruct().map_err(|e| e.in_stage("reconstruction"))?;
        Ok(TwinOutcome { selection, truth, trace, initial_field, final_field, initial_error, final_error })
    }

    /// Subsets used by the baseline, 0-based.
    pub fn baseline_subsets(&self) -> Result<Vec<Vec<usize>>> {
        let c = &self.config;
        match &c.baseline_subsets {
            Some(forced) => Ok(forced.iter().map(|s| s.iter().map(|j| j - 1).collect()).collect()),
            None => random_select(self.scenario.stations.len(), c.selection.p, c.seeds.baseline, c.baseline_count)
                .map_err(|e| e.in_stage("baseline")),
        }
    }

    /// Estimation on every baseline subset with the shared truth and noise.
    pub fn baseline(&self) -> Result<(Truth, Vec<BaselineRow>)> {
        let truth = self.truth()?;
        let subsets = self.baseline_subsets()?;
        let rows = subsets
            .into_par_iter()
            .enumerate()
            .map(|(subset, sites)| {
                let outcome = self
                    .estimate(&truth, &sites)
                    .and_then(|trace| {
                        let last = trace.last();
                        Ok(BaselineRun {
                            final_error: last
                                .reconstruction_error
                                .ok_or_else(|| Error::Argument("trace lacks reconstruction errors".into()))?,
                            iterations: last.iteration,
                            stop_reason: trace.reason.clone(),
                        })
                    })
                    .map_err(|e| e.to_string());
                BaselineRow { subset, sites, outcome }
            })
            .collect();
        Ok((truth, rows))
    }

    fn station_ids(&self, idx: &[usize]) -> Vec<String> {
        idx.iter().map(|&j| self.scenario.stations.as_slice()[j].id.clone()).collect()
    }
}

fn validate_config(c: &ExperimentConfig, n: usize) -> Result<()> {
    let bad = |m: String| Err(Error::Config(m));
    c.grid.validate().map_err(|e| Error::Config(e.to_string()))?;
    if let Some(b) = c.band {
        b.validate().map_err(|e| Error::Config(e.to_string()))?;
        if b.high > c.grid.f_max {
            return bad(format!("band upper edge {} exceeds the grid maximum {}", b.high, c.grid.f_max));
        }
    }
    let s = &c.selection;
    if s.p == 0 || s.p > n {
        return bad(format!("selection.p must lie in 1..={n}, got {}", s.p));
    }
    if let Some(e) = s.epsilon {
        if !(e > 0.0 && e.is_finite()) {
            return bad(format!("selection.epsilon must be positive, got {e}"));
        }
    }
    let check_sites = |sites: &[usize], what: &str| -> Result<()> {
        let mut seen = vec![false; n + 1];
        for &j in sites {
            if j == 0 || j > n || std::mem::replace(&mut seen[j], true) {
                return bad(format!("{what}: site {j} is repeated or outside 1..={n}"));
            }
        }
        if sites.is_empty() {
            return bad(format!("{what}: empty site list"));
        }
        Ok(())
    };
    match (s.method, &s.sites) {
        (MethodConfig::Explicit, Some(sites)) => {
            check_sites(sites, "selection.sites")?;
            if sites.len() != s.p {
                return bad(format!("selection.p is {} but {} explicit sites are listed", s.p, sites.len()));
            }
        }
        (MethodConfig::Explicit, None) => return bad("explicit selection needs selection.sites".into()),
        (_, Some(_)) => return bad("selection.sites is only used by the explicit method".into()),
        _ => {}
    }
    if !(c.noise_variance >= 0.0 && c.noise_variance.is_finite()) {
        return bad(format!("noise_variance must be non-negative, got {}", c.noise_variance));
    }
    let tp = c.truth_perturbation;
    if !(tp.structure_fraction >= 0.0 && tp.location_km >= 0.0) {
        return bad("truth_perturbation scales must be non-negative".into());
    }
    let st = c.perturbation;
    if !(st.structure_fraction > 0.0 && st.structure_fraction < 1.0 && st.location_km > 0.0) {
        return bad("perturbation needs 0 < structure_fraction < 1 and location_km > 0".into());
    }
    if let Normalization::LocationScale(l) = c.normalization {
        if !(l > 0.0 && l.is_finite()) {
            return bad(format!("location normalization length must be positive, got {l}"));
        }
    }
    if !(c.forward.corner_frequency > 0.0 && c.forward.amplitude_scale > 0.0) {
        return bad("forward model needs positive corner_frequency and amplitude_scale".into());
    }
    c.estimator.validate().map_err(|e| Error::Config(e.to_string()))?;
    match &c.baseline_subsets {
        Some(forced) => {
            if forced.is_empty() {
                return bad("baseline_subsets is empty".into());
            }
            for s in forced {
                check_sites(s, "baseline_subsets")?;
            }
        }
        None if c.baseline_count == 0 => return bad("baseline_count must be at least 1".into()),
        None => {}
    }
    Ok(())
}

/// SHA-256 over the canonical JSON of the config (minus its output location
/// and scenario reference), the resolved scenario and the tool version.
pub fn config_hash(config: &ExperimentConfig, scenario: &Scenario) -> Result<String> {
    let mut v = serde_json::to_value(config)?;
    if let Some(map) = v.as_object_mut() {
        map.remove("output_dir");
        map.remove("scenario");
    }
    let mut doc = BTreeMap::new();
    doc.insert("config", v);
    doc.insert("scenario", serde_json::to_value(scenario)?);
    doc.insert("tool_version", serde_json::Value::from(TOOL_VERSION));
    let canonical = serde_json::to_string(&doc)?;
    Ok(hex::encode(Sha256::digest(canonical.as_bytes())))
}

/// Writes into a run directory without ever replacing different content.
#[derive(Debug, Clone)]
pub struct ArtifactWriter {
    pub dir: PathBuf,
}

impl ArtifactWriter {
    pub fn create(dir: PathBuf) -> Result<Self> {
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        Ok(ArtifactWriter { dir })
    }

    pub fn write(&self, name: &str, bytes: &[u8]) -> Result<PathBuf> {
        let path = self.dir.join(name);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        match fs::read(&path) {
            Ok(existing) if existing == bytes => return Ok(path),
            Ok(_) => {
                return Err(Error::io(
                    &path,
                    std::io::Error::new(
                        std::io::ErrorKind::AlreadyExists,
                        "artifact exists with different content",
                    ),
                ))
            }
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => {}
            Err(e) => return Err(Error::io(&path, e)),
        }
        fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }

    pub fn write_json<T: Serialize>(&self, name: &str, value: &T) -> Result<PathBuf> {
        let mut text = serde_json::to_string_pretty(value)?;
        text.push('\n');
        self.write(name, text.as_bytes())
    }
}

#[derive(Serialize)]
struct Stamped<'a, T: Serialize> {
    config_hash: &'a str,
    tool_version: &'a str,
    #[serde(flatten)]
    body: T,
}

impl Experiment {
    fn stamp<T: Serialize>(&self, body: T) -> Stamped<'_, T> {
        Stamped { config_hash: &self.hash, tool_version: TOOL_VERSION, body }
    }

    fn writer(&self) -> Result<ArtifactWriter> {
        ArtifactWriter::create(self.run_dir())
    }

    fn selection_doc(&self, r: &SelectionResult) -> serde_json::Value {
        serde_json::json!({
            "selected": self.station_ids(&r.selected),
            "positions": r.selected.iter().map(|j| j + 1).collect::<Vec<_>>(),
            "objective_trace": r.objective_trace,
            "epsilon": r.epsilon,
            "p": r.p,
            "n": r.n,
            "method": r.method,
            "evaluations": r.evaluations,
        })
    }
}

/// What a command wrote and what it reports on stdout.
#[derive(Debug, Clone)]
pub struct Report {
    pub run_dir: PathBuf,
    pub files: Vec<PathBuf>,
    pub text: String,
}

pub fn cmd_sensitivity(x: &Experiment) -> Result<Report> {
    let sm = x.sensitivity()?;
    let values = sm.site_sensitivities();
    let summed = summed_sensitivity(&values);
    let w = x.writer()?;
    let mut csv = Vec::new();
    export_sensitivity_maps(&values, x.scenario.stations.as_slice(), Some(&x.preamble()), &mut csv)?;
    #[derive(Serialize)]
    struct Doc {
        #[serde(flatten)]
        sidecar: SensitivitySidecar,
        summed: BTreeMap<&'static str, f64>,
    }
    let doc = Doc {
        sidecar: sm.sidecar(),
        summed: PARAMETER_NAMES.iter().copied().zip(summed).collect(),
    };
    let files = vec![
        w.write("sensitivity_map.csv", &csv)?,
        w.write_json("sensitivity.json", &x.stamp(doc))?,
    ];
    let mut text = String::from("parameter summed_S\n");
    for (name, v) in PARAMETER_NAMES.iter().zip(summed) {
        let _ = writeln!(text, "{name} {v:e}");
    }
    Ok(Report { run_dir: w.dir, files, text })
}

pub fn cmd_select(x: &Experiment) -> Result<Report> {
    let sm = x.sensitivity()?;
    let r = x.select(&sm)?;
    let w = x.writer()?;
    let files = vec![w.write_json("selection.json", &x.stamp(x.selection_doc(&r)))?];
    let mut text = String::from("rank site position objective\n");
    for (m, (&j, obj)) in r.selected.iter().zip(&r.objective_trace).enumerate() {
        let id = &x.scenario.stations.as_slice()[j].id;
        let _ = writeln!(text, "{} {id} {} {obj:e}", m + 1, j + 1);
    }
    Ok(Report { run_dir: w.dir, files, text })
}

pub fn cmd_twin(x: &Experiment) -> Result<Report> {
    let out = x.twin()?;
    let w = x.writer()?;
    let pre = x.preamble();
    let mut files = vec![w.write_json("selection.json", &x.stamp(x.selection_doc(&out.selection)))?];

    let mut trace_csv = Vec::new();
    write_trace_csv(&out.trace, Some(&pre), &mut trace_csv)?;
    files.push(w.write("trace.csv", &trace_csv)?);

    let init_sites = site_reconstruction_errors(&out.truth.clean, &out.initial_field)?;
    let final_sites = site_reconstruction_errors(&out.truth.clean, &out.final_field)?;
    let mut buf = preamble_bytes(&pre);
    {
        let mut c = csv::Writer::from_writer(&mut buf);
        c.write_record(["site_id", "ns", "ew", "selected", "initial_error", "final_error"])?;
        for (j, st) in x.scenario.stations.iter().enumerate() {
            let sel = out.selection.selected.contains(&j);
            c.write_record([
                st.id.clone(),
                st.ns.to_string(),
                st.ew.to_string(),
                u8::from(sel).to_string(),
                format!("{:e}", init_sites[j]),
                format!("{:e}", final_sites[j]),
            ])?;
        }
        c.flush().map_err(|e| Error::io("site_errors.csv", e))?;
    }
    files.push(w.write("site_errors.csv", &buf)?);

    let phi0 = x.scenario.parameters()?;
    let fin = out.trace.final_parameters();
    let mut buf = preamble_bytes(&pre);
    {
        let mut c = csv::Writer::from_writer(&mut buf);
        c.write_record(["parameter", "initial", "true", "estimated", "initial_relative_error", "final_relative_error"])?;
        for k in 0..PARAM_COUNT {
            let t = out.truth.parameters[k];
            c.write_record([
                PARAMETER_NAMES[k].to_string(),
                phi0[k].to_string(),
                t.to_string(),
                fin[k].to_string(),
                format!("{:e}", ((phi0[k] - t) / t).abs()),
                format!("{:e}", ((fin[k] - t) / t).abs()),
            ])?;
        }
        c.flush().map_err(|e| Error::io("parameter_errors.csv", e))?;
    }
    files.push(w.write("parameter_errors.csv", &buf)?);

    let mut bin = Vec::new();
    write_binary(&out.truth.observed, &mut bin)?;
    files.push(w.write("observed.wfsp", &bin)?);

    let summary = serde_json::json!({
        "scenario": x.config.scenario,
        "seeds": x.config.seeds,
        "noise_variance": x.config.noise_variance,
        "selected": x.station_ids(&out.selection.selected),
        "initial_parameters": phi0,
        "true_parameters": out.truth.parameters,
        "estimated_parameters": fin,
        "initial_error": out.initial_error,
        "final_error": out.final_error,
        "iterations": out.trace.last().iteration,
        "converged": out.trace.converged,
        "stop_reason": out.trace.reason,
        "jacobian_mode": x.config.estimator.jacobian_mode,
    });
    files.push(w.write_json("summary.json", &x.stamp(summary))?);

    let text = format!(
        "selected {}\ninitial_error {:e}\nfinal_error {:e}\niterations {}\nstop {:?}\n",
        x.station_ids(&out.selection.selected).join(","),
        out.initial_error,
        out.final_error,
        out.trace.last().iteration,
        out.trace.reason,
    );
    Ok(Report { run_dir: w.dir, files, text })
}

pub fn cmd_baseline(x: &Experiment) -> Result<Report> {
    let (_, rows) = x.baseline()?;
    let stats = BaselineStats::of(&rows);
    let w = x.writer()?;
    let mut files = Vec::new();
    // One file per subset, then the merged table in subset order.
    for row in &rows {
        files.push(w.write_json(&format!("baseline/subset_{:03}.json", row.subset), &x.stamp(row))?);
    }
    let mut buf = preamble_bytes(&x.preamble());
    {
        let mut c = csv::Writer::from_writer(&mut buf);
        c.write_record(["subset", "sites", "final_error", "iterations", "status"])?;
        for row in &rows {
            let sites = x.station_ids(&row.sites).join(" ");
            let (err, it, status) = match &row.outcome {
                Ok(r) => (format!("{:e}", r.final_error), r.iterations.to_string(), stop_label(&r.stop_reason)),
                Err(e) => (String::new(), String::new(), format!("failed: {e}")),
            };
            c.write_record([row.subset.to_string(), sites, err, it, status])?;
        }
        c.flush().map_err(|e| Error::io("baseline.csv", e))?;
    }
    files.push(w.write("baseline.csv", &buf)?);
    files.push(w.write_json("baseline_summary.json", &x.stamp(&stats))?);
    let fmt = |v: Option<f64>| v.map(|v| format!("{v:e}")).unwrap_or_else(|| "n/a".into());
    let text = format!(
        "subsets {} failed {}\nmean_error {}\nmin_error {}\nmax_error {}\n",
        stats.count,
        stats.failed,
        fmt(stats.mean),
        fmt(stats.min),
        fmt(stats.max)
    );
    Ok(Report { run_dir: w.dir, files, text })
}

fn stop_label(r: &StopReason) -> String {
    match r {
        StopReason::Converged => "converged".into(),
        StopReason::MaxIterations => "max_iterations".into(),
        StopReason::Stalled => "stalled".into(),
        StopReason::RankDeficient => "rank_deficient".into(),
        StopReason::StepFailure(m) => format!("step_failure: {m}"),
        StopReason::ForwardFailure(m) => format!("forward_failure: {m}"),
    }
}

fn preamble_bytes(p: &str) -> Vec<u8> {
    p.lines().flat_map(|l| format!("# {l}\n").into_bytes()).collect()
}
