//! Source pretraining, scenario execution, baselines, metrics and reports.
//!
//! A run follows the online protocol: each batch is predicted and scored
//! before the engine adapts on it, so correctness never depends on the
//! batch's own labels or on later batches.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;
use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::adaptation::{count_errors, AdaptationConfig, Adapter, BatchRecord, Components};
use crate::error::{Error, Result};
use crate::model::{self_training_loss, Checkpoint, Model, ModelConfig};
use crate::numerics::{OptimizerKind, Tape, Tensor};
use crate::rng::rng_for;
use crate::stream::{DomainSpec, DomainTag, DomainTransform, LabeledBatch, ScenarioConfig};

pub const REPORT_SCHEMA_VERSION: u32 = 1;

// ── configuration ────────────────────────────────────────────────────

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Held-out clean error (percent) the fit must reach.
    pub max_error_pct: f64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            epochs: 3,
            batch_size: 64,
            lr: 1e-3,
            max_error_pct: 5.0,
        }
    }
}

/// Everything a run needs besides the scenario: one TOML file with
/// optional `[model]`, `[pretrain]` and `[adaptation]` tables.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HarnessConfig {
    pub model: ModelConfig,
    pub pretrain: PretrainConfig,
    pub adaptation: AdaptationConfig,
    /// Samples per domain in the forgetting probes; 0 disables them.
    pub probe_size: usize,
}

impl Default for HarnessConfig {
    fn default() -> Self {
        HarnessConfig {
            model: ModelConfig::default(),
            pretrain: PretrainConfig::default(),
            adaptation: AdaptationConfig::default(),
            probe_size: 256,
        }
    }
}

impl HarnessConfig {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: HarnessConfig = toml::from_str(s)?;
        cfg.model.validate()?;
        cfg.adaptation.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let s = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&s)
    }
}

// ── pretraining ──────────────────────────────────────────────────────

#[derive(Clone, Debug)]
pub struct Pretrained {
    pub model: Model,
    pub source_error_pct: f64,
    /// Mean training loss per epoch.
    pub loss_trace: Vec<f64>,
    pub task_seed: u64,
}

impl Pretrained {
    /// The checkpoint records the task seed, which fixes the class means
    /// the model was fit to.
    pub fn checkpoint(&self) -> Checkpoint {
        self.model.to_checkpoint(self.task_seed, Some(self.source_error_pct))
    }
}

/// Percent of misclassified rows.
pub fn error_pct(model: &Model, data: &LabeledBatch, amplifier_on: bool) -> Result<f64> {
    let probs = model.predict(&data.inputs, amplifier_on)?;
    Ok(100.0 * count_errors(&probs, &data.labels) as f64 / data.len() as f64)
}

/// Fit encoder and head on clean source data by minibatch cross-entropy.
pub fn pretrain_source(
    task: &crate::stream::BaseTask,
    model_cfg: &ModelConfig,
    cfg: &PretrainConfig,
) -> Result<Pretrained> {
    task.validate()?;
    if model_cfg.input_dim != task.dim || model_cfg.classes != task.classes {
        return Err(Error::config(format!(
            "model expects {} inputs / {} classes, task has {} / {}",
            model_cfg.input_dim, model_cfg.classes, task.dim, task.classes
        )));
    }
    if cfg.epochs == 0 || cfg.batch_size == 0 || !(cfg.lr > 0.0) {
        return Err(Error::config("pretrain epochs, batch_size and lr must be positive"));
    }
    let mut model = Model::new(model_cfg.clone(), task.seed)?;
    let train = task.train_set();
    let test = task.test_set();
    let c = task.classes;
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut trace = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        let mut rng = rng_for(task.seed, "pretrain-shuffle", epoch as u64);
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut count = 0;
        for chunk in order.chunks(cfg.batch_size) {
            let x = train.inputs.select_rows(chunk);
            let mut onehot = Tensor::zeros(&[chunk.len(), c]);
            for (r, &i) in chunk.iter().enumerate() {
                onehot.data_mut()[r * c + train.labels[i]] = 1.0;
            }
            let mut tape = Tape::new();
            let vars = model.encoder.params.bind(&mut tape, true);
            let xv = tape.constant(x);
            let f = model.encoder.features_on(&mut tape, &vars, None, xv)?;
            let p = model.encoder.probs_on(&mut tape, &vars, f)?;
            let l = self_training_loss(&mut tape, p, &onehot)?;
            // reported as plain cross-entropy
            let value = tape.value(l).item()? * c as f64;
            if !value.is_finite() {
                trace.push(value);
                return Err(Error::Pretrain {
                    reason: format!("loss diverged in epoch {epoch}"),
                    trace,
                });
            }
            total += value;
            count += 1;
            let grads = tape.backward(l)?;
            model.encoder.params.absorb_grads(&grads, &vars)?;
            model.encoder.params.step(cfg.lr, OptimizerKind::AdaptiveMoment)?;
        }
        trace.push(total / count as f64);
    }
    model.encoder.params.reset_optimizer();

    let err = error_pct(&model, &test, false)?;
    if err > cfg.max_error_pct {
        return Err(Error::Pretrain {
            reason: format!(
                "held-out source error {err:.2}% exceeds {:.2}%",
                cfg.max_error_pct
            ),
            trace,
        });
    }
    Ok(Pretrained {
        model,
        source_error_pct: err,
        loss_trace: trace,
        task_seed: task.seed,
    })
}

// ── baselines ────────────────────────────────────────────────────────

/// What adapts during a run. The ablation rows add one component at a
/// time, ending at the full method; `NoAmplifier` is the full method with
/// the amplifier removed.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum BaselineKind {
    SourceOnly,
    SelfTrainingOnly,
    SelfInv,
    SelfInvDis,
    SelfInvDisSelect,
    Full,
    NoAmplifier,
    /// Components exactly as given in the adaptation config.
    Custom,
}

impl BaselineKind {
    pub const ALL: [BaselineKind; 8] = [
        BaselineKind::SourceOnly,
        BaselineKind::SelfTrainingOnly,
        BaselineKind::SelfInv,
        BaselineKind::SelfInvDis,
        BaselineKind::SelfInvDisSelect,
        BaselineKind::Full,
        BaselineKind::NoAmplifier,
        BaselineKind::Custom,
    ];

    /// The ablation rows, amplifier block first.
    pub const ABLATION: [BaselineKind; 7] = [
        BaselineKind::NoAmplifier,
        BaselineKind::Full,
        BaselineKind::SourceOnly,
        BaselineKind::SelfTrainingOnly,
        BaselineKind::SelfInv,
        BaselineKind::SelfInvDis,
        BaselineKind::SelfInvDisSelect,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            BaselineKind::SourceOnly => "source-only",
            BaselineKind::SelfTrainingOnly => "self-training-only",
            BaselineKind::SelfInv => "self+inv",
            BaselineKind::SelfInvDis => "self+inv+dis",
            BaselineKind::SelfInvDisSelect => "self+inv+dis+select",
            BaselineKind::Full => "full",
            BaselineKind::NoAmplifier => "no-amplifier",
            BaselineKind::Custom => "custom",
        }
    }

    /// Component flags, or `None` for [`BaselineKind::Custom`].
    pub fn components(self) -> Option<Components> {
        let none = Components::none();
        let c = match self {
            BaselineKind::SourceOnly => none,
            BaselineKind::SelfTrainingOnly => Components {
                self_training: true,
                ..none
            },
            BaselineKind::SelfInv => Components {
                self_training: true,
                invariance: true,
                amplifier: true,
                ..none
            },
            BaselineKind::SelfInvDis => Components {
                discrimination: true,
                ..BaselineKind::SelfInv.components()?
            },
            BaselineKind::SelfInvDisSelect => Components {
                submodular_selection: true,
                ..BaselineKind::SelfInvDis.components()?
            },
            BaselineKind::Full => Components::all(),
            BaselineKind::NoAmplifier => Components {
                amplifier: false,
                ..Components::all()
            },
            BaselineKind::Custom => return None,
        };
        Some(c)
    }

    /// `cfg` with this baseline's components applied.
    pub fn configure(self, cfg: &AdaptationConfig) -> AdaptationConfig {
        let mut out = cfg.clone();
        if let Some(c) = self.components() {
            out.components = c;
        }
        out
    }
}

impl fmt::Display for BaselineKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for BaselineKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "full-testdg" {
            return Ok(BaselineKind::Full);
        }
        BaselineKind::ALL
            .into_iter()
            .find(|b| b.as_str() == s)
            .ok_or_else(|| {
                let names: Vec<_> = BaselineKind::ALL.iter().map(|b| b.as_str()).collect();
                Error::config(format!("unknown baseline '{s}' (expected one of {})", names.join(", ")))
            })
    }
}

impl TryFrom<String> for BaselineKind {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<BaselineKind> for String {
    fn from(b: BaselineKind) -> String {
        b.as_str().to_string()
    }
}

// ── reports ──────────────────────────────────────────────────────────

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ReportKind {
    Run,
    Generalize,
}

/// One streamed batch. Flat so it doubles as a CSV row.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BatchRow {
    pub index: usize,
    pub domain: String,
    pub round: usize,
    /// Ground-truth domain change (hidden from the engine).
    pub change: bool,
    pub detected: bool,
    pub selected: bool,
    pub batch_size: usize,
    pub errors: usize,
    pub error_pct: f64,
    pub confidence: f64,
    pub loss_dis: Option<f64>,
    pub loss_self: Option<f64>,
    pub loss_inv: Option<f64>,
    pub prototype_residual: Option<f64>,
    pub prototype_mmd_before: Option<f64>,
    pub prototype_mmd_after: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DomainError {
    pub domain: String,
    pub batches: usize,
    pub samples: usize,
    pub errors: usize,
    pub error_pct: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectionStats {
    pub true_changes: usize,
    pub detections: usize,
    pub true_positives: usize,
    /// `None` when nothing was detected.
    pub precision: Option<f64>,
    /// `None` when the stream has no changes.
    pub recall: Option<f64>,
}

/// Error on a fixed probe set of one domain, right after the domain's first
/// segment and again at the end of the run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ForgettingRow {
    pub domain: String,
    pub error_after_pct: f64,
    pub error_final_pct: f64,
    pub forgetting_pct: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConfigEcho {
    pub scenario: ScenarioConfig,
    pub adaptation: AdaptationConfig,
    pub probe_size: usize,
    pub source_error_pct: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub schema_version: u32,
    pub kind: ReportKind,
    pub scenario: String,
    pub baseline: BaselineKind,
    pub seed: u64,
    pub batches: Vec<BatchRow>,
    pub domains: Vec<DomainError>,
    pub mean_error_pct: f64,
    pub detection: DetectionStats,
    pub forgetting: Vec<ForgettingRow>,
    pub mean_forgetting_pct: Option<f64>,
    pub generalization: Vec<DomainError>,
    pub generalization_mean_error_pct: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub wall_clock_secs: Option<f64>,
    pub config: ConfigEcho,
}

/// Per-domain errors in order of first appearance.
pub fn domain_errors(rows: &[BatchRow]) -> Vec<DomainError> {
    let mut out: Vec<DomainError> = Vec::new();
    for r in rows {
        let d = match out.iter_mut().find(|d| d.domain == r.domain) {
            Some(d) => d,
            None => {
                out.push(DomainError {
                    domain: r.domain.clone(),
                    batches: 0,
                    samples: 0,
                    errors: 0,
                    error_pct: 0.0,
                });
                out.last_mut().expect("just pushed")
            }
        };
        d.batches += 1;
        d.samples += r.batch_size;
        d.errors += r.errors;
    }
    for d in &mut out {
        d.error_pct = 100.0 * d.errors as f64 / d.samples as f64;
    }
    out
}

/// Average of per-domain errors weighted by batch counts.
pub fn weighted_mean_error(domains: &[DomainError]) -> Option<f64> {
    let total: usize = domains.iter().map(|d| d.batches).sum();
    if total == 0 {
        return None;
    }
    let s: f64 = domains.iter().map(|d| d.batches as f64 * d.error_pct).sum();
    Some(s / total as f64)
}

pub fn detection_stats(rows: &[BatchRow]) -> DetectionStats {
    let true_changes = rows.iter().filter(|r| r.change).count();
    let detections = rows.iter().filter(|r| r.detected).count();
    let true_positives = rows.iter().filter(|r| r.change && r.detected).count();
    DetectionStats {
        true_changes,
        detections,
        true_positives,
        precision: (detections > 0).then(|| true_positives as f64 / detections as f64),
        recall: (true_changes > 0).then(|| true_positives as f64 / true_changes as f64),
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReportFormat {
    #[default]
    Json,
    Csv,
}

impl FromStr for ReportFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "json" => Ok(ReportFormat::Json),
            "csv" => Ok(ReportFormat::Csv),
            _ => Err(Error::config(format!("unknown report format '{s}'"))),
        }
    }
}

impl ReportFormat {
    pub fn extension(self) -> &'static str {
        match self {
            ReportFormat::Json => "json",
            ReportFormat::Csv => "csv",
        }
    }
}

impl RunReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }

    /// Header plus one row per batch.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for r in &self.batches {
            w.serialize(r)?;
        }
        if self.batches.is_empty() {
            return Ok(String::new());
        }
        let bytes = w.into_inner().map_err(|e| Error::contract(e.to_string()))?;
        String::from_utf8(bytes).map_err(|e| Error::contract(e.to_string()))
    }

    pub fn render(&self, format: ReportFormat) -> Result<String> {
        match format {
            ReportFormat::Json => self.to_json(),
            ReportFormat::Csv => self.to_csv(),
        }
    }
}

pub fn emit_report(report: &RunReport, format: ReportFormat, path: &Path) -> Result<()> {
    let s = report.render(format)?;
    fs::write(path, s).map_err(|e| Error::io(path, e))
}

// ── running ──────────────────────────────────────────────────────────

#[derive(Clone, Copy, Debug, Default)]
pub struct RunOptions {
    /// Fill `wall_clock_secs`. Off by default so reports stay reproducible.
    pub record_timing: bool,
}

/// Rebuild the source model, checking it was fit to the scenario's task.
pub fn load_source(ck: &Checkpoint, scenario: &ScenarioConfig) -> Result<Model> {
    if ck.seed != scenario.task.seed {
        return Err(Error::config(format!(
            "checkpoint was fit to task seed {} but the scenario uses task seed {}",
            ck.seed, scenario.task.seed
        )));
    }
    if ck.config.input_dim != scenario.task.dim || ck.config.classes != scenario.task.classes {
        return Err(Error::config("checkpoint model does not match the scenario task"));
    }
    Model::from_checkpoint(ck)
}

struct Probe {
    tag: DomainTag,
    data: LabeledBatch,
    error_after: Option<f64>,
}

fn probe_sets(scenario: &ScenarioConfig, size: usize) -> Result<Vec<Probe>> {
    if size == 0 {
        return Ok(Vec::new());
    }
    let mut specs: Vec<(DomainTag, DomainSpec)> = Vec::new();
    for seg in scenario.schedule() {
        let tag = DomainTag {
            name: seg.spec.name().to_string(),
            severity: seg.spec.severity,
        };
        if !specs.iter().any(|(t, _)| *t == tag) {
            specs.push((tag, seg.spec));
        }
    }
    specs
        .into_iter()
        .enumerate()
        .map(|(i, (tag, spec))| {
            let clean = scenario.task.sample_source(size, "probe", i as u64)?;
            let t = DomainTransform::new(&spec, scenario.task.dim, scenario.seed)?;
            let mut rng = rng_for(scenario.seed, "probe-transform", i as u64);
            Ok(Probe {
                tag,
                data: t.apply(&clean, &mut rng)?,
                error_after: None,
            })
        })
        .collect()
}

fn probe_error(adapter: &Adapter, data: &LabeledBatch) -> Result<f64> {
    let probs = adapter.predict(&data.inputs)?;
    Ok(100.0 * count_errors(&probs, &data.labels) as f64 / data.len() as f64)
}

fn row_from(item_domain: &DomainTag, round: usize, change: bool, r: &BatchRecord) -> BatchRow {
    let errors = r.errors.unwrap_or(0);
    BatchRow {
        index: r.index,
        domain: item_domain.to_string(),
        round,
        change,
        detected: r.detected,
        selected: r.selected,
        batch_size: r.batch_size,
        errors,
        error_pct: 100.0 * errors as f64 / r.batch_size as f64,
        confidence: r.confidence,
        loss_dis: r.loss_dis,
        loss_self: r.loss_self,
        loss_inv: r.loss_inv,
        prototype_residual: r.prototype_residual,
        prototype_mmd_before: r.prototype_mmd_before,
        prototype_mmd_after: r.prototype_mmd_after,
    }
}

/// Stream the scenario through an adapter. Returns the adapter in its
/// final state together with the batch rows and forgetting probes.
fn drive(
    adapter: &mut Adapter,
    scenario: &ScenarioConfig,
    probe_size: usize,
) -> Result<(Vec<BatchRow>, Vec<ForgettingRow>)> {
    let mut probes = probe_sets(scenario, probe_size)?;
    let mut rows = Vec::with_capacity(scenario.total_batches());
    let mut stream = scenario.stream()?.peekable();
    while let Some(item) = stream.next() {
        let item = item?;
        let (_, rec) = adapter.adapt_batch(&item.batch.inputs, Some(&item.batch.labels))?;
        rows.push(row_from(&item.domain, item.round, item.change, &rec));

        let segment_ends = match stream.peek() {
            Some(Ok(next)) => next.domain != item.domain,
            _ => true,
        };
        if segment_ends {
            if let Some(p) = probes
                .iter_mut()
                .find(|p| p.tag == item.domain && p.error_after.is_none())
            {
                p.error_after = Some(probe_error(adapter, &p.data).map_err(|e| e.at_batch(item.index))?);
            }
        }
    }
    let forgetting = probes
        .iter()
        .map(|p| {
            let after = p.error_after.ok_or_else(|| Error::contract("probe never evaluated"))?;
            let fin = probe_error(adapter, &p.data)?;
            Ok(ForgettingRow {
                domain: p.tag.to_string(),
                error_after_pct: after,
                error_final_pct: fin,
                forgetting_pct: fin - after,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((rows, forgetting))
}

fn assemble(
    kind: ReportKind,
    scenario: &ScenarioConfig,
    adaptation: &AdaptationConfig,
    baseline: BaselineKind,
    probe_size: usize,
    source_error_pct: Option<f64>,
    rows: Vec<BatchRow>,
    forgetting: Vec<ForgettingRow>,
    generalization: Vec<DomainError>,
) -> RunReport {
    let domains = domain_errors(&rows);
    let mean_forgetting_pct = (!forgetting.is_empty())
        .then(|| forgetting.iter().map(|f| f.forgetting_pct).sum::<f64>() / forgetting.len() as f64);
    RunReport {
        schema_version: REPORT_SCHEMA_VERSION,
        kind,
        scenario: scenario.name.clone(),
        baseline,
        seed: scenario.seed,
        detection: detection_stats(&rows),
        mean_error_pct: weighted_mean_error(&domains).unwrap_or(0.0),
        domains,
        batches: rows,
        forgetting,
        mean_forgetting_pct,
        generalization_mean_error_pct: weighted_mean_error(&generalization),
        generalization,
        wall_clock_secs: None,
        config: ConfigEcho {
            scenario: scenario.clone(),
            adaptation: adaptation.clone(),
            probe_size,
            source_error_pct,
        },
    }
}

/// Adapter for a run: the baseline's components, seeded by the scenario.
pub fn make_adapter(model: Model, cfg: &HarnessConfig, baseline: BaselineKind, seed: u64) -> Result<Adapter> {
    let mut a = baseline.configure(&cfg.adaptation);
    a.seed = seed;
    Adapter::new(model, a)
}

/// Online run over the scenario stream.
pub fn run_scenario(
    ck: &Checkpoint,
    scenario: &ScenarioConfig,
    cfg: &HarnessConfig,
    baseline: BaselineKind,
    opts: RunOptions,
) -> Result<RunReport> {
    let t0 = Instant::now();
    let model = load_source(ck, scenario)?;
    let mut adapter = make_adapter(model, cfg, baseline, scenario.seed)?;
    let (rows, forgetting) = drive(&mut adapter, scenario, cfg.probe_size)?;
    let mut report = assemble(
        ReportKind::Run,
        scenario,
        adapter.config(),
        baseline,
        cfg.probe_size,
        ck.source_error_pct,
        rows,
        forgetting,
        Vec::new(),
    );
    if opts.record_timing {
        report.wall_clock_secs = Some(t0.elapsed().as_secs_f64());
    }
    Ok(report)
}

fn snapshot(a: &Adapter) -> Vec<crate::numerics::ParamSet> {
    let m = &a.model;
    vec![
        m.encoder.params.clone(),
        m.amplifier.params.clone(),
        m.extractor.params.clone(),
        m.discriminator.params.clone(),
        a.teacher.params.clone(),
    ]
}

/// Adapt over the scenario's domains, then freeze and evaluate each
/// held-out domain without adaptation.
pub fn run_generalization(
    ck: &Checkpoint,
    scenario: &ScenarioConfig,
    cfg: &HarnessConfig,
    baseline: BaselineKind,
    opts: RunOptions,
) -> Result<RunReport> {
    let t0 = Instant::now();
    let model = load_source(ck, scenario)?;
    let mut adapter = make_adapter(model, cfg, baseline, scenario.seed)?;
    let (rows, forgetting) = drive(&mut adapter, scenario, cfg.probe_size)?;

    let frozen = snapshot(&adapter);
    let mut held: BTreeMap<usize, (DomainTag, usize, usize, usize)> = BTreeMap::new();
    let mut order: Vec<DomainTag> = Vec::new();
    for item in scenario.held_out_stream()? {
        let item = item?;
        let probs = adapter.predict(&item.batch.inputs).map_err(|e| e.at_batch(item.index))?;
        let errors = count_errors(&probs, &item.batch.labels);
        let pos = match order.iter().position(|t| *t == item.domain) {
            Some(p) => p,
            None => {
                order.push(item.domain.clone());
                order.len() - 1
            }
        };
        let e = held.entry(pos).or_insert((item.domain.clone(), 0, 0, 0));
        e.1 += 1;
        e.2 += item.batch.len();
        e.3 += errors;
    }
    let after = snapshot(&adapter);
    if frozen.iter().zip(&after).any(|(a, b)| !a.same_values(b)) {
        return Err(Error::contract("parameters changed during held-out evaluation"));
    }
    let generalization = held
        .into_values()
        .map(|(tag, batches, samples, errors)| DomainError {
            domain: tag.to_string(),
            batches,
            samples,
            errors,
            error_pct: 100.0 * errors as f64 / samples as f64,
        })
        .collect();

    let mut report = assemble(
        ReportKind::Generalize,
        scenario,
        adapter.config(),
        baseline,
        cfg.probe_size,
        ck.source_error_pct,
        rows,
        forgetting,
        generalization,
    );
    if opts.record_timing {
        report.wall_clock_secs = Some(t0.elapsed().as_secs_f64());
    }
    Ok(report)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub baseline: BaselineKind,
    pub components: Components,
    pub mean_error_pct: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub schema_version: u32,
    pub scenario: String,
    pub seed: u64,
    pub rows: Vec<AblationRow>,
}

impl AblationReport {
    pub fn render(&self, format: ReportFormat) -> Result<String> {
        match format {
            ReportFormat::Json => Ok(serde_json::to_string_pretty(self)?),
            ReportFormat::Csv => {
                let mut w = csv::Writer::from_writer(Vec::new());
                w.write_record(["baseline", "mean_error_pct"])?;
                for r in &self.rows {
                    w.write_record([r.baseline.as_str(), &r.mean_error_pct.to_string()])?;
                }
                let bytes = w.into_inner().map_err(|e| Error::contract(e.to_string()))?;
                String::from_utf8(bytes).map_err(|e| Error::contract(e.to_string()))
            }
        }
    }
}

/// Every ablation row on one scenario.
pub fn run_ablation(ck: &Checkpoint, scenario: &ScenarioConfig, cfg: &HarnessConfig) -> Result<AblationReport> {
    let rows = BaselineKind::ABLATION
        .into_iter()
        .map(|b| {
            let r = run_scenario(ck, scenario, cfg, b, RunOptions::default())?;
            Ok(AblationRow {
                baseline: b,
                components: r.config.adaptation.components,
                mean_error_pct: r.mean_error_pct,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(AblationReport {
        schema_version: REPORT_SCHEMA_VERSION,
        scenario: scenario.name.clone(),
        seed: scenario.seed,
        rows,
    })
}
