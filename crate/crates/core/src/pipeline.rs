//! Configuration, persisted records, and the stages chained by the
//! command-line tool: simulate, train or fit, generate, verify, categorize,
//! cluster, report.
//!
//! Every output is written to a temporary file in the target directory and
//! renamed into place. Record streams are JSON lines whose first line is a
//! header carrying the format version; CSV outputs start with a `#version=`
//! comment line.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::RngCore;
use rayon::prelude::*;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::adversarial::{generate_adversarial, GdaConfig};
use crate::analysis::{
    anomaly_features, kmeans, pca, standardize, verify_candidate, VerifyConfig, FEATURE_COUNT,
};
use crate::categorizer::{categorize, AnomalyCategory, DEFAULT_TOL};
use crate::cpt::{CptModel, CptParams, SimulationKind};
use crate::error::{Error, Result};
use crate::eut::UtilityBasis;
use crate::lottery::{sample_random_menu, Example, ExampleCollection, Menu, Provenance};
use crate::mlp::{MlpModel, TrainConfig};
use crate::morphing::{generate_morphs, MorphConfig};
use crate::predictor::{CptFit, Predictor, PredictorHandle};
use crate::run_rng;
use crate::verifier::DEFAULT_KL_THRESHOLD;

pub const FORMAT_VERSION: u32 = 1;
pub const RECORDS_FORMAT: &str = "anomgen-records";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum PredictorConfig {
    /// Weighting model from a named preset or explicit parameters.
    Cpt {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        preset: Option<String>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        delta: Option<f64>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        gamma: Option<f64>,
    },
    /// Network written by `train-mlp`.
    Mlp { model: PathBuf },
    /// Parameters written by `fit-cpt`.
    CptFit { params: PathBuf },
}

impl Default for PredictorConfig {
    fn default() -> Self {
        PredictorConfig::Cpt {
            preset: Some("bruhin-b".into()),
            delta: None,
            gamma: None,
        }
    }
}

impl PredictorConfig {
    fn cpt_params(preset: &Option<String>, delta: Option<f64>, gamma: Option<f64>) -> Result<CptParams> {
        match (preset, delta, gamma) {
            (Some(name), None, None) => {
                CptParams::preset(name).ok_or_else(|| config_error("predictor.preset", format!("unknown preset `{name}`")))
            }
            (None, Some(d), Some(g)) => CptParams::new(d, g).map_err(|e| config_error("predictor", e.to_string())),
            _ => Err(config_error(
                "predictor",
                "give either `preset` or both `delta` and `gamma`",
            )),
        }
    }

    fn validate(&self) -> Result<()> {
        match self {
            PredictorConfig::Cpt { preset, delta, gamma } => Self::cpt_params(preset, *delta, *gamma).map(|_| ()),
            PredictorConfig::Mlp { model: path } => require_file("predictor.model", path),
            PredictorConfig::CptFit { params: path } => require_file("predictor.params", path),
        }
    }

    /// Short name stored in records and used as a report column.
    pub fn label(&self) -> String {
        let stem = |p: &Path| p.file_stem().map_or_else(String::new, |s| s.to_string_lossy().into_owned());
        match self {
            PredictorConfig::Cpt { preset: Some(name), .. } => format!("cpt:{name}"),
            PredictorConfig::Cpt { delta, gamma, .. } => {
                format!("cpt:{}:{}", delta.unwrap_or(f64::NAN), gamma.unwrap_or(f64::NAN))
            }
            PredictorConfig::Mlp { model } => format!("mlp:{}", stem(model)),
            PredictorConfig::CptFit { params } => format!("cpt_fit:{}", stem(params)),
        }
    }

    pub fn load(&self) -> Result<PredictorHandle> {
        match self {
            PredictorConfig::Cpt { preset, delta, gamma } => {
                Ok(PredictorHandle::Cpt(CptModel::new(Self::cpt_params(preset, *delta, *gamma)?)))
            }
            PredictorConfig::Mlp { model } => {
                let data: serde_json::Value = read_json(model, "anomgen-mlp")?;
                Ok(PredictorHandle::Mlp(MlpModel::from_json(&data.to_string())?))
            }
            PredictorConfig::CptFit { params } => {
                let fit: CptFit = read_json(params, "anomgen-cpt-fit")?;
                Ok(PredictorHandle::CptFit(CptModel::new(fit.params)))
            }
        }
    }
}

fn require_file(field: &str, path: &Path) -> Result<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(config_error(field, format!("file `{}` does not exist", path.display())))
    }
}

fn config_error(field: &str, reason: impl Into<String>) -> Error {
    Error::Config {
        field: field.to_string(),
        reason: reason.into(),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TheoryConfig {
    /// Basis for baseline verification; generated records carry their own.
    pub basis: UtilityBasis,
    /// Payoffs per lottery in simulated and baseline menus.
    pub payoffs: usize,
}

impl Default for TheoryConfig {
    fn default() -> Self {
        Self {
            basis: UtilityBasis::polynomial(6, 0.0, 10.0).expect("valid default basis"),
            payoffs: 2,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimulateConfig {
    pub menus: usize,
    pub kind: SimulationKind,
}

impl Default for SimulateConfig {
    fn default() -> Self {
        Self {
            menus: 1000,
            kind: SimulationKind::Binary,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunCounts {
    pub adversarial: usize,
    pub morph: usize,
    pub baseline: usize,
}

impl Default for RunCounts {
    fn default() -> Self {
        Self {
            adversarial: 100,
            morph: 100,
            baseline: 1000,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VerificationConfig {
    pub kl_threshold: f64,
    pub restarts: usize,
}

impl Default for VerificationConfig {
    fn default() -> Self {
        Self {
            kl_threshold: DEFAULT_KL_THRESHOLD,
            restarts: 5,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AnalysisConfig {
    pub category_tol: f64,
    pub clusters: usize,
    pub kmeans_restarts: usize,
    pub bootstrap_reps: usize,
    pub bootstrap_level: f64,
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        Self {
            category_tol: DEFAULT_TOL,
            clusters: 4,
            kmeans_restarts: 10,
            bootstrap_reps: 1000,
            bootstrap_level: 0.95,
        }
    }
}

/// Everything a pipeline run needs. Stage `seed` fields are replaced by
/// values derived from the master seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    pub seed: u64,
    pub predictor: PredictorConfig,
    pub theory: TheoryConfig,
    pub simulate: SimulateConfig,
    pub train: TrainConfig,
    pub adversarial: GdaConfig,
    pub morph: MorphConfig,
    pub runs: RunCounts,
    pub verification: VerificationConfig,
    pub analysis: AnalysisConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            predictor: PredictorConfig::default(),
            theory: TheoryConfig::default(),
            simulate: SimulateConfig::default(),
            train: TrainConfig::default(),
            adversarial: GdaConfig::default(),
            morph: MorphConfig::default(),
            runs: RunCounts::default(),
            verification: VerificationConfig::default(),
            analysis: AnalysisConfig::default(),
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        let at = |field: &'static str| move |e: Error| config_error(field, e.to_string());
        self.predictor.validate()?;
        if self.theory.payoffs == 0 {
            return Err(config_error("theory.payoffs", "must be at least 1"));
        }
        if self.simulate.menus == 0 {
            return Err(config_error("simulate.menus", "must be at least 1"));
        }
        if let SimulationKind::Rate(0) = self.simulate.kind {
            return Err(config_error("simulate.kind", "rate needs a positive draw count"));
        }
        if self.train.hidden.is_empty() || self.train.hidden.contains(&0) {
            return Err(config_error("train.hidden", "layer widths must be positive"));
        }
        if self.train.batch_size == 0 || self.train.epochs == 0 {
            return Err(config_error("train", "batch_size and epochs must be at least 1"));
        }
        self.adversarial.validate().map_err(at("adversarial"))?;
        self.morph.validate().map_err(at("morph"))?;
        for (field, n) in [
            ("runs.adversarial", self.runs.adversarial),
            ("runs.morph", self.runs.morph),
            ("runs.baseline", self.runs.baseline),
        ] {
            if n == 0 {
                return Err(config_error(field, "must be at least 1"));
            }
        }
        if !(self.verification.kl_threshold > 0.0 && self.verification.kl_threshold.is_finite()) {
            return Err(config_error("verification.kl_threshold", "must be positive and finite"));
        }
        if self.verification.restarts == 0 {
            return Err(config_error("verification.restarts", "must be at least 1"));
        }
        let a = &self.analysis;
        if !(a.category_tol >= 0.0 && a.category_tol.is_finite()) {
            return Err(config_error("analysis.category_tol", "must be nonnegative and finite"));
        }
        if a.clusters == 0 || a.kmeans_restarts == 0 || a.bootstrap_reps == 0 {
            return Err(config_error(
                "analysis",
                "clusters, kmeans_restarts and bootstrap_reps must be at least 1",
            ));
        }
        if !(a.bootstrap_level > 0.0 && a.bootstrap_level < 1.0) {
            return Err(config_error("analysis.bootstrap_level", "must lie in (0, 1)"));
        }
        Ok(())
    }
}

/// Parses and validates a configuration. Parse errors name the offending
/// field path.
pub fn parse_config(json: &str) -> Result<PipelineConfig> {
    let de = &mut serde_json::Deserializer::from_str(json);
    let cfg: PipelineConfig = serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        config_error(if path.is_empty() { "." } else { &path }, e.into_inner().to_string())
    })?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn load_config(path: impl AsRef<Path>) -> Result<PipelineConfig> {
    parse_config(&fs::read_to_string(path)?)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    Simulate = 1,
    Train,
    Adversarial,
    Morph,
    Baseline,
    Verify,
    Cluster,
    Bootstrap,
}

/// Seed for one stage, derived from the master seed.
pub fn stage_seed(master: u64, stage: Stage) -> u64 {
    run_rng(master, u64::MAX - stage as u64).next_u64()
}

/// Runs `f` on a pool of `workers` threads.
pub fn with_workers<T: Send>(workers: usize, f: impl FnOnce() -> T + Send) -> Result<T> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| Error::invalid(e.to_string()))?;
    Ok(pool.install(f))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Procedure {
    Adversarial,
    Morphing,
    Baseline,
}

impl Procedure {
    pub fn as_str(self) -> &'static str {
        match self {
            Procedure::Adversarial => "adversarial",
            Procedure::Morphing => "morphing",
            Procedure::Baseline => "baseline",
        }
    }
}

/// Outcome of both verifications, with the settings needed to rerun them.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Verdict {
    pub kl_threshold: f64,
    pub restarts: usize,
    pub min_kl: f64,
    pub fit_converged: bool,
    pub parametrized_inconsistent: bool,
    pub any_utility_inconsistent: bool,
    pub minimal: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub failing_subset: Option<Vec<usize>>,
    pub margin: f64,
}

impl Verdict {
    pub fn flagged(&self) -> bool {
        self.parametrized_inconsistent || self.any_utility_inconsistent
    }
}

/// One generated collection with everything later stages add to it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnomalyRecord {
    pub id: String,
    pub procedure: Procedure,
    /// Label of the predictor that produced the choice probabilities.
    pub predictor: String,
    pub seed: u64,
    pub run_index: u64,
    /// Basis the generator fitted; used again for verification.
    pub basis: UtilityBasis,
    pub menus: Vec<Menu>,
    pub predicted: Vec<f64>,
    pub choices: Vec<u8>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub flag: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub verification: Option<Verdict>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub category: Option<AnomalyCategory>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub features: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cluster: Option<usize>,
}

impl AnomalyRecord {
    pub fn from_collection(
        procedure: Procedure,
        predictor: &str,
        basis: &UtilityBasis,
        candidate: &ExampleCollection,
        flag: Option<String>,
    ) -> Self {
        let p = &candidate.provenance;
        Self {
            id: format!("{}-{:06}", procedure.as_str(), p.run_index),
            procedure,
            predictor: predictor.to_string(),
            seed: p.master_seed,
            run_index: p.run_index,
            basis: basis.clone(),
            menus: candidate.menus(),
            predicted: candidate.examples.iter().map(|e| e.choice_prob).collect(),
            choices: candidate.examples.iter().map(Example::implied_choice).collect(),
            flag,
            verification: None,
            category: None,
            features: None,
            cluster: None,
        }
    }

    pub fn collection(&self) -> Result<ExampleCollection> {
        let examples = self
            .menus
            .iter()
            .zip(&self.predicted)
            .map(|(m, &p)| Example::new(m.clone(), p))
            .collect();
        ExampleCollection::new(
            examples,
            Provenance {
                procedure: self.procedure.as_str().into(),
                master_seed: self.seed,
                run_index: self.run_index,
                iterations: 0,
            },
        )
    }

    pub fn flagged(&self) -> bool {
        self.verification.as_ref().is_some_and(Verdict::flagged)
    }

    fn check(&self) -> Result<()> {
        let bad = |reason: String| Error::Format {
            path: self.id.clone(),
            reason,
        };
        if self.menus.is_empty() || self.menus.len() != self.predicted.len() || self.menus.len() != self.choices.len() {
            return Err(bad("menus, predicted and choices must have equal nonzero length".into()));
        }
        let implied = self.predicted.iter().map(|&p| u8::from(p >= 0.5));
        if !implied.eq(self.choices.iter().copied()) {
            return Err(bad("choices disagree with predicted probabilities".into()));
        }
        if let Some(f) = &self.features {
            if f.len() != FEATURE_COUNT {
                return Err(bad(format!("expected {FEATURE_COUNT} features, got {}", f.len())));
            }
        }
        Ok(())
    }
}

/// Generator runs for one procedure, as unverified records labeled with
/// `cfg.predictor`.
pub fn generate(
    cfg: &PipelineConfig,
    predictor: &dyn Predictor,
    procedure: Procedure,
    runs: usize,
) -> Result<Vec<AnomalyRecord>> {
    if runs == 0 {
        return Err(config_error("inits", "must be at least 1"));
    }
    let label = cfg.predictor.label();
    match procedure {
        Procedure::Adversarial => {
            let gda = GdaConfig {
                seed: stage_seed(cfg.seed, Stage::Adversarial),
                ..cfg.adversarial.clone()
            };
            Ok(generate_adversarial(predictor, &gda, runs)?
                .into_iter()
                .map(|o| AnomalyRecord::from_collection(procedure, &label, &gda.basis, &o.candidate, o.flag))
                .collect())
        }
        Procedure::Morphing => {
            let morph = MorphConfig {
                seed: stage_seed(cfg.seed, Stage::Morph),
                ..cfg.morph.clone()
            };
            Ok(generate_morphs(predictor, &morph, runs)?
                .into_iter()
                .map(|o| AnomalyRecord::from_collection(procedure, &label, &morph.basis, &o.candidate, o.flag))
                .collect())
        }
        Procedure::Baseline => {
            let seed = stage_seed(cfg.seed, Stage::Baseline);
            let basis = &cfg.theory.basis;
            let (low, high) = basis.domain();
            (0..runs)
                .into_par_iter()
                .map(|i| {
                    let mut rng = run_rng(seed, i as u64);
                    let examples = (0..2)
                        .map(|_| {
                            let m = sample_random_menu(&mut rng, cfg.theory.payoffs, low, high)?;
                            let p = predictor.predict(&m)?;
                            Ok(Example::new(m, p))
                        })
                        .collect::<Result<Vec<_>>>()?;
                    let provenance = Provenance {
                        procedure: procedure.as_str().into(),
                        master_seed: seed,
                        run_index: i as u64,
                        iterations: 0,
                    };
                    let c = ExampleCollection::new(examples, provenance)?;
                    Ok(AnomalyRecord::from_collection(procedure, &label, basis, &c, None))
                })
                .collect()
        }
    }
}

fn verdict_for(record: &AnomalyRecord, cfg: &VerificationConfig) -> Result<Verdict> {
    let vcfg = VerifyConfig {
        basis: record.basis.clone(),
        kl_threshold: cfg.kl_threshold,
        restarts: cfg.restarts,
        seed: 0,
    };
    let mut rng = run_rng(stage_seed(record.seed, Stage::Verify), record.run_index);
    let v = verify_candidate(&record.collection()?, &vcfg, &mut rng)?;
    Ok(Verdict {
        kl_threshold: cfg.kl_threshold,
        restarts: cfg.restarts,
        min_kl: v.min_kl,
        fit_converged: v.fit_converged,
        parametrized_inconsistent: v.parametrized_inconsistent,
        any_utility_inconsistent: v.any_utility_inconsistent,
        minimal: v.minimal,
        failing_subset: v.failing_subset,
        margin: v.margin,
    })
}

/// Attaches both verdicts to every record. Later-stage fields are cleared.
pub fn verify_records(records: &mut [AnomalyRecord], cfg: &VerificationConfig) -> Result<()> {
    records.par_iter_mut().try_for_each(|r| {
        r.verification = Some(verdict_for(r, cfg)?);
        r.category = None;
        r.features = None;
        r.cluster = None;
        Ok(())
    })
}

/// Whether rerunning verification from the record alone reproduces its
/// stored verdict exactly.
pub fn reverify(record: &AnomalyRecord) -> Result<bool> {
    let stored = record
        .verification
        .as_ref()
        .ok_or_else(|| Error::invalid(format!("record {} has not been verified", record.id)))?;
    let cfg = VerificationConfig {
        kl_threshold: stored.kl_threshold,
        restarts: stored.restarts,
    };
    Ok(&verdict_for(record, &cfg)? == stored)
}

/// Categorizes flagged records and attaches clustering features to the
/// flagged two-menu ones.
pub fn categorize_records(records: &mut [AnomalyRecord], tol: f64) -> Result<()> {
    for r in records.iter_mut() {
        if r.verification.is_none() {
            return Err(Error::invalid(format!("record {} has not been verified", r.id)));
        }
        r.cluster = None;
        if !r.flagged() {
            r.category = None;
            r.features = None;
            continue;
        }
        let c = r.collection()?;
        if c.len() == 2 {
            r.category = Some(categorize(&c, tol)?);
            r.features = Some(anomaly_features(&c)?.to_vec());
        } else {
            r.category = Some(AnomalyCategory::Other);
            r.features = None;
        }
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClusterRow {
    pub id: String,
    pub cluster: usize,
    pub pc1: f64,
    pub pc2: f64,
}

/// K-means on standardized features and the first two principal component
/// scores, for every record that carries features.
pub fn cluster_records(
    records: &mut [AnomalyRecord],
    k: usize,
    restarts: usize,
    seed: u64,
) -> Result<Vec<ClusterRow>> {
    let idx: Vec<usize> = (0..records.len()).filter(|&i| records[i].features.is_some()).collect();
    if idx.len() < k.max(2) {
        return Err(Error::invalid(format!(
            "{} records carry features; clustering into {k} groups needs at least {}",
            idx.len(),
            k.max(2)
        )));
    }
    let x: Vec<Vec<f64>> = idx.iter().map(|&i| records[i].features.clone().unwrap_or_default()).collect();
    let km = kmeans(&standardize(&x)?, k, seed, restarts)?;
    let pcs = pca(&x)?;
    let score = |row: usize, c: usize| pcs.scores[row].get(c).copied().unwrap_or(0.0);
    let mut rows = Vec::with_capacity(idx.len());
    for (row, &i) in idx.iter().enumerate() {
        records[i].cluster = Some(km.assignments[row]);
        rows.push(ClusterRow {
            id: records[i].id.clone(),
            cluster: km.assignments[row],
            pc1: score(row, 0),
            pc2: score(row, 1),
        });
    }
    Ok(rows)
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ProcedureSummary {
    pub runs: usize,
    pub parametrized: usize,
    pub any_utility: usize,
    pub flagged: usize,
    pub parametrized_rate: f64,
    pub any_utility_rate: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CategoryCount {
    pub category: String,
    /// Flagged records per predictor label.
    pub counts: BTreeMap<String, usize>,
    pub total: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub procedures: BTreeMap<Procedure, ProcedureSummary>,
    pub predictors: Vec<String>,
    /// Every category tag, including those with no records.
    pub categories: Vec<CategoryCount>,
}

pub fn report(records: &[AnomalyRecord]) -> Result<Report> {
    if records.is_empty() {
        return Err(Error::Empty);
    }
    let mut procedures: BTreeMap<Procedure, ProcedureSummary> = BTreeMap::new();
    let predictors: Vec<String> = records
        .iter()
        .map(|r| r.predictor.clone())
        .collect::<std::collections::BTreeSet<_>>()
        .into_iter()
        .collect();
    let empty: BTreeMap<String, usize> = predictors.iter().map(|p| (p.clone(), 0)).collect();
    let mut counts: BTreeMap<&str, BTreeMap<String, usize>> =
        AnomalyCategory::TAGS.iter().map(|t| (*t, empty.clone())).collect();
    for r in records {
        let v = r
            .verification
            .as_ref()
            .ok_or_else(|| Error::invalid(format!("record {} has not been verified", r.id)))?;
        let s = procedures.entry(r.procedure).or_default();
        s.runs += 1;
        s.parametrized += usize::from(v.parametrized_inconsistent);
        s.any_utility += usize::from(v.any_utility_inconsistent);
        s.flagged += usize::from(v.flagged());
        if let Some(c) = r.category.as_ref().filter(|_| v.flagged()) {
            *counts.entry(c.tag()).or_default().entry(r.predictor.clone()).or_insert(0) += 1;
        }
    }
    for s in procedures.values_mut() {
        s.parametrized_rate = s.parametrized as f64 / s.runs as f64;
        s.any_utility_rate = s.any_utility as f64 / s.runs as f64;
    }
    let categories = AnomalyCategory::TAGS
        .iter()
        .map(|t| CategoryCount {
            category: t.to_string(),
            total: counts[t].values().sum(),
            counts: counts[t].clone(),
        })
        .collect();
    Ok(Report {
        procedures,
        predictors,
        categories,
    })
}

/// Category-by-predictor count table: one row per category, one column per
/// predictor label, then the row total.
pub fn write_category_table(path: &Path, report: &Report) -> Result<()> {
    atomic_write(path, |w| {
        writeln!(w, "#version={FORMAT_VERSION}")?;
        let mut wtr = csv::Writer::from_writer(&mut *w);
        let mut header = vec!["category".to_string()];
        header.extend(report.predictors.iter().cloned());
        header.push("total".into());
        wtr.write_record(&header)?;
        for c in &report.categories {
            let mut row = vec![c.category.clone()];
            row.extend(report.predictors.iter().map(|p| c.counts.get(p).copied().unwrap_or(0).to_string()));
            row.push(c.total.to_string());
            wtr.write_record(&row)?;
        }
        wtr.flush()?;
        Ok(())
    })
}

/// Writes through a temporary file in the destination directory, then
/// renames it into place.
pub fn atomic_write(path: &Path, write: impl FnOnce(&mut dyn Write) -> Result<()>) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    {
        let mut w = BufWriter::new(tmp.as_file_mut());
        write(&mut w)?;
        w.flush()?;
    }
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| Error::Io(e.error))?;
    Ok(())
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    format: String,
    version: u32,
}

fn check_header(path: &Path, header: Header, format: &str) -> Result<()> {
    if header.format != format || header.version != FORMAT_VERSION {
        return Err(Error::Format {
            path: path.display().to_string(),
            reason: format!(
                "expected {format} version {FORMAT_VERSION}, found {} version {}",
                header.format, header.version
            ),
        });
    }
    Ok(())
}

pub fn write_records(path: &Path, records: &[AnomalyRecord]) -> Result<()> {
    atomic_write(path, |w| {
        let header = Header {
            format: RECORDS_FORMAT.into(),
            version: FORMAT_VERSION,
        };
        serde_json::to_writer(&mut *w, &header)?;
        writeln!(w)?;
        for r in records {
            serde_json::to_writer(&mut *w, r)?;
            writeln!(w)?;
        }
        Ok(())
    })
}

pub fn read_records(path: &Path) -> Result<Vec<AnomalyRecord>> {
    let mut lines = BufReader::new(fs::File::open(path)?).lines();
    let format_error = |line: usize, reason: String| Error::Format {
        path: format!("{}:{line}", path.display()),
        reason,
    };
    let first = lines.next().ok_or_else(|| format_error(1, "missing header line".into()))??;
    let header: Header = serde_json::from_str(&first).map_err(|e| format_error(1, e.to_string()))?;
    check_header(path, header, RECORDS_FORMAT)?;
    let mut out = Vec::new();
    for (i, line) in lines.enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let r: AnomalyRecord = serde_json::from_str(&line).map_err(|e| format_error(i + 2, e.to_string()))?;
        r.check()?;
        out.push(r);
    }
    Ok(out)
}

#[derive(Serialize, Deserialize)]
struct Document<T> {
    format: String,
    version: u32,
    data: T,
}

/// Writes `data` as a versioned JSON document.
pub fn write_json<T: Serialize>(path: &Path, format: &str, data: &T) -> Result<()> {
    atomic_write(path, |w| {
        let doc = Document {
            format: format.to_string(),
            version: FORMAT_VERSION,
            data,
        };
        serde_json::to_writer_pretty(&mut *w, &doc)?;
        writeln!(w)?;
        Ok(())
    })
}

pub fn read_json<T: DeserializeOwned>(path: &Path, format: &str) -> Result<T> {
    let doc: Document<T> = serde_json::from_str(&fs::read_to_string(path)?)?;
    check_header(
        path,
        Header {
            format: doc.format,
            version: doc.version,
        },
        format,
    )?;
    Ok(doc.data)
}

/// Writes rows as CSV after a `#version=` comment line.
pub fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    atomic_write(path, |w| {
        writeln!(w, "#version={FORMAT_VERSION}")?;
        let mut wtr = csv::Writer::from_writer(&mut *w);
        for r in rows {
            wtr.serialize(r)?;
        }
        wtr.flush()?;
        Ok(())
    })
}

pub fn read_csv<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let mut rdr = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .from_path(path)?;
    Ok(rdr.deserialize().collect::<std::result::Result<_, _>>()?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_config_gives_defaults() {
        let cfg = parse_config("{}").unwrap();
        assert_eq!(cfg, PipelineConfig::default());
        assert_eq!(cfg.adversarial.step_size, 0.01);
        assert_eq!(cfg.adversarial.iterations, 50);
        assert_eq!(cfg.verification.kl_threshold, 1e-5);
        assert_eq!(cfg.theory.basis, UtilityBasis::polynomial(6, 0.0, 10.0).unwrap());
    }

    #[test]
    fn config_round_trips() {
        let cfg = PipelineConfig::default();
        let back = parse_config(&serde_json::to_string(&cfg).unwrap()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn unknown_keys_are_named() {
        let err = parse_config(r#"{"adversarial": {"step": 1}}"#).unwrap_err().to_string();
        assert!(err.starts_with("adversarial"), "{err}");
        assert!(err.contains("step"), "{err}");
        let err = parse_config(r#"{"predictor": {"kind": "cpt", "preset": "bruhin-a", "x": 1}}"#)
            .unwrap_err()
            .to_string();
        assert!(err.contains('x'), "{err}");
    }

    #[test]
    fn validation_errors_carry_the_field() {
        let err = parse_config(r#"{"runs": {"morph": 0}}"#).unwrap_err().to_string();
        assert!(err.starts_with("runs.morph"), "{err}");
        let err = parse_config(r#"{"predictor": {"kind": "mlp", "model": "/nonexistent/m.json"}}"#)
            .unwrap_err()
            .to_string();
        assert!(err.starts_with("predictor.model"), "{err}");
        let err = parse_config(r#"{"predictor": {"kind": "cpt", "delta": 0.5}}"#).unwrap_err().to_string();
        assert!(err.starts_with("predictor"), "{err}");
        assert!(parse_config(r#"{"morph": {"rank_tol": 1.5}}"#).unwrap_err().to_string().starts_with("morph"));
    }

    #[test]
    fn explicit_parameters_load() {
        let cfg = parse_config(r#"{"predictor": {"kind": "cpt", "delta": 1.0, "gamma": 1.0}}"#).unwrap();
        assert!(matches!(cfg.predictor.load().unwrap(), PredictorHandle::Cpt(_)));
    }

    #[test]
    fn stage_seeds_differ() {
        let seeds: Vec<u64> = [Stage::Adversarial, Stage::Morph, Stage::Baseline, Stage::Verify]
            .iter()
            .map(|&s| stage_seed(7, s))
            .collect();
        for i in 0..seeds.len() {
            for j in 0..i {
                assert_ne!(seeds[i], seeds[j]);
            }
        }
        assert_eq!(stage_seed(7, Stage::Verify), stage_seed(7, Stage::Verify));
    }

    fn small_config() -> PipelineConfig {
        let mut cfg = PipelineConfig::default();
        cfg.morph.samples = 50;
        cfg.morph.iterations = 5;
        cfg.adversarial.iterations = 5;
        cfg
    }

    #[test]
    fn records_round_trip_and_reverify() {
        let cfg = small_config();
        let model = cfg.predictor.load().unwrap();
        let mut records = generate(&cfg, &model, Procedure::Adversarial, 4).unwrap();
        records.extend(generate(&cfg, &model, Procedure::Baseline, 4).unwrap());
        verify_records(&mut records, &cfg.verification).unwrap();
        categorize_records(&mut records, cfg.analysis.category_tol).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("r.jsonl");
        write_records(&path, &records).unwrap();
        let back = read_records(&path).unwrap();
        assert_eq!(back, records);
        for r in &back {
            assert!(reverify(r).unwrap());
        }
        let text = fs::read_to_string(&path).unwrap();
        assert!(text.starts_with(r#"{"format":"anomgen-records","version":1}"#));
    }

    #[test]
    fn tampered_records_are_rejected() {
        let cfg = small_config();
        let model = cfg.predictor.load().unwrap();
        let mut records = generate(&cfg, &model, Procedure::Baseline, 2).unwrap();
        records[0].choices[0] ^= 1;
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("r.jsonl");
        write_records(&path, &records).unwrap();
        assert!(matches!(read_records(&path), Err(Error::Format { .. })));
        fs::write(&path, "{\"format\":\"anomgen-records\",\"version\":2}\n").unwrap();
        assert!(matches!(read_records(&path), Err(Error::Format { .. })));
    }

    #[test]
    fn stages_require_verification() {
        let cfg = small_config();
        let model = cfg.predictor.load().unwrap();
        let mut records = generate(&cfg, &model, Procedure::Baseline, 2).unwrap();
        assert!(categorize_records(&mut records, 1e-6).is_err());
        assert!(report(&records).is_err());
        assert!(reverify(&records[0]).is_err());
        assert!(generate(&cfg, &model, Procedure::Adversarial, 0).is_err());
    }

    #[test]
    fn report_lists_every_category() {
        let cfg = small_config();
        let model = cfg.predictor.load().unwrap();
        let mut records = generate(&cfg, &model, Procedure::Baseline, 3).unwrap();
        verify_records(&mut records, &cfg.verification).unwrap();
        let r = report(&records).unwrap();
        assert_eq!(r.categories.len(), AnomalyCategory::TAGS.len());
        assert_eq!(r.procedures[&Procedure::Baseline].runs, 3);
    }

    #[test]
    fn csv_and_documents_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let rows = vec![
            ClusterRow { id: "a".into(), cluster: 1, pc1: 0.5, pc2: -1.25 },
            ClusterRow { id: "b".into(), cluster: 0, pc1: 2.0, pc2: 0.0 },
        ];
        let path = dir.path().join("c.csv");
        write_csv(&path, &rows).unwrap();
        assert!(fs::read_to_string(&path).unwrap().starts_with("#version=1\nid,cluster,pc1,pc2\n"));
        assert_eq!(read_csv::<ClusterRow>(&path).unwrap(), rows);
        let doc = dir.path().join("d.json");
        write_json(&doc, "thing", &rows).unwrap();
        assert_eq!(read_json::<Vec<ClusterRow>>(&doc, "thing").unwrap(), rows);
        assert!(read_json::<Vec<ClusterRow>>(&doc, "other").is_err());
    }

    #[test]
    fn worker_count_does_not_change_output() {
        let cfg = small_config();
        let model = cfg.predictor.load().unwrap();
        let run = |w| {
            with_workers(w, || {
                let mut r = generate(&cfg, &model, Procedure::Morphing, 6).unwrap();
                verify_records(&mut r, &cfg.verification).unwrap();
                serde_json::to_string(&r).unwrap()
            })
            .unwrap()
        };
        assert_eq!(run(1), run(4));
    }
}
