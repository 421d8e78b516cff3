//! Synthetic domain-shifted classification streams.
//!
//! The clean task is a Gaussian class mixture. Test domains apply one of
//! five label-preserving input transforms at severities 1 to 5 (0 is the
//! identity). Each family's distortion magnitude is linear in severity:
//!
//! | family | magnitude at severity `s` |
//! |--------|---------------------------|
//! | `additive-noise` | noise std `0.5·s` |
//! | `coordinate-rotation` | plane rotation angle `0.15·s` rad |
//! | `anisotropic-scale` | per-coordinate log-scale `±0.15·s` |
//! | `affine-contrast` | contrast `1 − 0.1·s`, offset norm `0.5·s` |
//! | `coordinate-dropout` | zeroed coordinate fraction `0.1·s` |
//!
//! Transform parameters other than the magnitude (rotation planes, scale
//! signs, offset direction, dropout order) are drawn once per family from
//! the scenario seed, so severities of one family are nested.

use std::f64::consts::PI;
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::rng::rng_for;

pub const SCENARIO_SCHEMA_VERSION: u32 = 1;
pub const MAX_SEVERITY: u8 = 5;

/// Clean Gaussian-mixture source task.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BaseTask {
    pub classes: usize,
    pub dim: usize,
    /// Norm of every class mean.
    pub mean_radius: f64,
    /// Isotropic within-class standard deviation.
    pub noise_std: f64,
    pub train_size: usize,
    pub test_size: usize,
    pub seed: u64,
}

impl Default for BaseTask {
    fn default() -> Self {
        BaseTask {
            classes: 4,
            dim: 16,
            mean_radius: 4.0,
            noise_std: 1.0,
            train_size: 4000,
            test_size: 1000,
            seed: 0,
        }
    }
}

/// Inputs `[n, dim]` with integer labels.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledBatch {
    pub inputs: Tensor,
    pub labels: Vec<usize>,
}

impl LabeledBatch {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

impl BaseTask {
    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 || self.dim < 2 {
            return Err(Error::config("task needs at least 2 classes and 2 dimensions"));
        }
        if !(self.mean_radius > 0.0) || !(self.noise_std > 0.0) {
            return Err(Error::config("task mean_radius and noise_std must be positive"));
        }
        if self.train_size == 0 || self.test_size == 0 {
            return Err(Error::config("task train_size and test_size must be positive"));
        }
        Ok(())
    }

    /// Class means: random directions scaled to `mean_radius`, redrawn until
    /// every pair is at least `mean_radius` apart.
    pub fn means(&self) -> Vec<Vec<f64>> {
        let mut rng = rng_for(self.seed, "task-means", 0);
        let mut best: Option<(f64, Vec<Vec<f64>>)> = None;
        for _ in 0..200 {
            let means: Vec<Vec<f64>> = (0..self.classes)
                .map(|_| {
                    let v: Vec<f64> = (0..self.dim).map(|_| rng.sample(StandardNormal)).collect();
                    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
                    v.into_iter().map(|x| x * self.mean_radius / norm).collect()
                })
                .collect();
            let mut min_d = f64::INFINITY;
            for i in 0..means.len() {
                for j in (i + 1)..means.len() {
                    let d: f64 = means[i]
                        .iter()
                        .zip(&means[j])
                        .map(|(a, b)| (a - b) * (a - b))
                        .sum::<f64>()
                        .sqrt();
                    min_d = min_d.min(d);
                }
            }
            if min_d >= self.mean_radius {
                return means;
            }
            if best.as_ref().map_or(true, |(d, _)| min_d > *d) {
                best = Some((min_d, means));
            }
        }
        best.expect("at least one draw").1
    }

    /// `n` i.i.d. clean labelled samples.
    pub fn sample_with(&self, means: &[Vec<f64>], n: usize, rng: &mut ChaCha8Rng) -> LabeledBatch {
        let mut data = Vec::with_capacity(n * self.dim);
        let mut labels = Vec::with_capacity(n);
        for _ in 0..n {
            let y = rng.random_range(0..self.classes);
            labels.push(y);
            for &mu in &means[y] {
                data.push(mu + self.noise_std * rng.sample::<f64, _>(StandardNormal));
            }
        }
        LabeledBatch {
            inputs: Tensor::from_parts(vec![n, self.dim], data),
            labels,
        }
    }

    /// Deterministic clean sample keyed by `(purpose, index)`.
    pub fn sample_source(&self, n: usize, purpose: &str, index: u64) -> Result<LabeledBatch> {
        if n == 0 {
            return Err(Error::contract("sample size must be at least 1"));
        }
        let mut rng = rng_for(self.seed, purpose, index);
        Ok(self.sample_with(&self.means(), n, &mut rng))
    }

    pub fn train_set(&self) -> LabeledBatch {
        let mut rng = rng_for(self.seed, "source-train", 0);
        self.sample_with(&self.means(), self.train_size, &mut rng)
    }

    pub fn test_set(&self) -> LabeledBatch {
        let mut rng = rng_for(self.seed, "source-test", 0);
        self.sample_with(&self.means(), self.test_size, &mut rng)
    }
}

// ── domains ──────────────────────────────────────────────────────────

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum Family {
    AdditiveNoise,
    CoordinateRotation,
    AnisotropicScale,
    AffineContrast,
    CoordinateDropout,
}

impl Family {
    pub const ALL: [Family; 5] = [
        Family::AdditiveNoise,
        Family::CoordinateRotation,
        Family::AnisotropicScale,
        Family::AffineContrast,
        Family::CoordinateDropout,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Family::AdditiveNoise => "additive-noise",
            Family::CoordinateRotation => "coordinate-rotation",
            Family::AnisotropicScale => "anisotropic-scale",
            Family::AffineContrast => "affine-contrast",
            Family::CoordinateDropout => "coordinate-dropout",
        }
    }
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Family {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Family::ALL
            .into_iter()
            .find(|f| f.as_str() == s)
            .ok_or_else(|| Error::config(format!("unknown transform family `{s}`")))
    }
}

impl TryFrom<String> for Family {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<Family> for String {
    fn from(f: Family) -> String {
        f.as_str().to_string()
    }
}

/// One corruption domain.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainSpec {
    /// Display name; defaults to the family name.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    pub family: Family,
    pub severity: u8,
    /// Number of batches drawn from this domain (per severity level in
    /// gradual mode).
    #[serde(default = "default_batches")]
    pub batches: usize,
}

fn default_batches() -> usize {
    10
}

impl DomainSpec {
    pub fn new(family: Family, severity: u8, batches: usize) -> Self {
        DomainSpec {
            name: None,
            family,
            severity,
            batches,
        }
    }

    pub fn name(&self) -> &str {
        self.name.as_deref().unwrap_or(self.family.as_str())
    }

    pub fn validate(&self) -> Result<()> {
        if self.severity > MAX_SEVERITY {
            return Err(Error::config(format!(
                "severity {} of {} exceeds {MAX_SEVERITY}",
                self.severity,
                self.name()
            )));
        }
        if self.batches == 0 {
            return Err(Error::config(format!("domain {} has zero batches", self.name())));
        }
        Ok(())
    }

    /// The declared distortion magnitude (see module docs).
    pub fn magnitude(&self) -> f64 {
        let s = f64::from(self.severity);
        match self.family {
            Family::AdditiveNoise => 0.5 * s,
            Family::CoordinateRotation => 0.15 * s,
            Family::AnisotropicScale => 0.15 * s,
            Family::AffineContrast => 0.5 * s,
            Family::CoordinateDropout => 0.1 * s,
        }
    }

    pub fn with_severity(&self, severity: u8) -> Self {
        DomainSpec {
            severity,
            ..self.clone()
        }
    }
}

/// A domain spec with its concrete parameters resolved for a dimension and
/// seed.
#[derive(Clone, Debug)]
pub struct DomainTransform {
    spec: DomainSpec,
    kind: TransformKind,
}

#[derive(Clone, Debug)]
enum TransformKind {
    Identity,
    Noise { std: f64 },
    Rotation { planes: Vec<(usize, usize)>, angle: f64 },
    Scale { factors: Vec<f64> },
    Affine { contrast: f64, offset: Vec<f64> },
    Dropout { mask: Vec<bool> },
}

impl DomainTransform {
    pub fn new(spec: &DomainSpec, dim: usize, seed: u64) -> Result<Self> {
        spec.validate()?;
        let s = f64::from(spec.severity);
        let m = spec.magnitude();
        let mut rng = rng_for(seed, &format!("domain:{}", spec.family), 0);
        let kind = if spec.severity == 0 {
            TransformKind::Identity
        } else {
            match spec.family {
                Family::AdditiveNoise => TransformKind::Noise { std: m },
                Family::CoordinateRotation => {
                    let mut order: Vec<usize> = (0..dim).collect();
                    order.shuffle(&mut rng);
                    let planes = order.chunks_exact(2).map(|c| (c[0], c[1])).collect();
                    TransformKind::Rotation {
                        planes,
                        angle: m,
                    }
                }
                Family::AnisotropicScale => {
                    let factors = (0..dim)
                        .map(|_| {
                            let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
                            (m * sign).exp()
                        })
                        .collect();
                    TransformKind::Scale { factors }
                }
                Family::AffineContrast => {
                    let v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
                    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
                    TransformKind::Affine {
                        contrast: 1.0 - 0.1 * s,
                        offset: v.into_iter().map(|x| m * x / norm).collect(),
                    }
                }
                Family::CoordinateDropout => {
                    let mut order: Vec<usize> = (0..dim).collect();
                    order.shuffle(&mut rng);
                    let k = (m * dim as f64).round() as usize;
                    let mut mask = vec![false; dim];
                    for &i in order.iter().take(k.min(dim)) {
                        mask[i] = true;
                    }
                    TransformKind::Dropout { mask }
                }
            }
        };
        Ok(DomainTransform {
            spec: spec.clone(),
            kind,
        })
    }

    pub fn spec(&self) -> &DomainSpec {
        &self.spec
    }

    /// Transform the inputs; labels are untouched. `rng` feeds the
    /// per-sample noise of the additive family.
    pub fn apply(&self, batch: &LabeledBatch, rng: &mut ChaCha8Rng) -> Result<LabeledBatch> {
        let dim = batch.inputs.cols();
        let mut data = batch.inputs.data().to_vec();
        match &self.kind {
            TransformKind::Identity => {}
            TransformKind::Noise { std } => {
                for v in &mut data {
                    *v += std * rng.sample::<f64, _>(StandardNormal);
                }
            }
            TransformKind::Rotation { planes, angle } => {
                let (sin, cos) = angle.sin_cos();
                for row in data.chunks_mut(dim) {
                    for &(i, j) in planes {
                        if i < dim && j < dim {
                            let (a, b) = (row[i], row[j]);
                            row[i] = cos * a - sin * b;
                            row[j] = sin * a + cos * b;
                        }
                    }
                }
            }
            TransformKind::Scale { factors } => {
                check_dim(factors.len(), dim)?;
                for row in data.chunks_mut(dim) {
                    for (v, f) in row.iter_mut().zip(factors) {
                        *v *= f;
                    }
                }
            }
            TransformKind::Affine { contrast, offset } => {
                check_dim(offset.len(), dim)?;
                for row in data.chunks_mut(dim) {
                    for (v, o) in row.iter_mut().zip(offset) {
                        *v = contrast * *v + o;
                    }
                }
            }
            TransformKind::Dropout { mask } => {
                check_dim(mask.len(), dim)?;
                for row in data.chunks_mut(dim) {
                    for (v, &m) in row.iter_mut().zip(mask) {
                        if m {
                            *v = 0.0;
                        }
                    }
                }
            }
        }
        Ok(LabeledBatch {
            inputs: Tensor::new(batch.inputs.shape().to_vec(), data)?,
            labels: batch.labels.clone(),
        })
    }
}

fn check_dim(expected: usize, got: usize) -> Result<()> {
    if expected != got {
        return Err(Error::dim(format!(
            "transform built for dimension {expected}, batch has {got}"
        )));
    }
    Ok(())
}

/// Convenience: resolve and apply a spec in one call.
pub fn apply_domain(
    spec: &DomainSpec,
    batch: &LabeledBatch,
    seed: u64,
    rng: &mut ChaCha8Rng,
) -> Result<LabeledBatch> {
    DomainTransform::new(spec, batch.inputs.cols(), seed)?.apply(batch, rng)
}

// ── scenarios ────────────────────────────────────────────────────────

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    #[default]
    Sequential,
    Gradual,
    LeaveOneOut,
}

/// An ordered domain sequence, batch schedule, and held-out domains.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    #[serde(default = "schema_v1")]
    pub schema_version: u32,
    #[serde(default)]
    pub name: String,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default)]
    pub mode: Mode,
    #[serde(default = "one")]
    pub rounds: usize,
    #[serde(default)]
    pub task: BaseTask,
    pub domains: Vec<DomainSpec>,
    #[serde(default)]
    pub held_out: Vec<DomainSpec>,
}

fn schema_v1() -> u32 {
    SCENARIO_SCHEMA_VERSION
}

fn default_batch_size() -> usize {
    32
}

fn one() -> usize {
    1
}

/// A contiguous run of batches from one domain at one severity.
#[derive(Clone, Debug, PartialEq)]
pub struct Segment {
    pub spec: DomainSpec,
    pub batches: usize,
    pub round: usize,
}

/// Ground truth attached to each batch; withheld from the adaptation engine.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct DomainTag {
    pub name: String,
    pub severity: u8,
}

impl fmt::Display for DomainTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}@{}", self.name, self.severity)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StreamItem {
    pub index: usize,
    pub batch: LabeledBatch,
    pub domain: DomainTag,
    pub round: usize,
    /// True on the first batch of a new domain (never on batch 0).
    pub change: bool,
}

impl ScenarioConfig {
    /// The five families at one severity, `batches` each, in family order.
    pub fn standard(severity: u8, batches: usize) -> Self {
        ScenarioConfig {
            schema_version: SCENARIO_SCHEMA_VERSION,
            name: format!("standard-s{severity}"),
            seed: 0,
            batch_size: default_batch_size(),
            mode: Mode::Sequential,
            rounds: 1,
            task: BaseTask::default(),
            domains: Family::ALL
                .into_iter()
                .map(|f| DomainSpec::new(f, severity, batches))
                .collect(),
            held_out: Vec::new(),
        }
    }

    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: ScenarioConfig = toml::from_str(s)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let s = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&s)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::config(e.to_string()))
    }

    /// The same scenario with every seed replaced.
    pub fn with_seed(&self, seed: u64) -> Self {
        let mut s = self.clone();
        s.seed = seed;
        s.task.seed = seed;
        s
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCENARIO_SCHEMA_VERSION {
            return Err(Error::config(format!(
                "scenario schema version {} unsupported (expected {SCENARIO_SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        if self.batch_size == 0 || self.rounds == 0 {
            return Err(Error::config("batch_size and rounds must be positive"));
        }
        if self.domains.is_empty() {
            return Err(Error::config("scenario declares no domains"));
        }
        self.task.validate()?;
        for d in self.domains.iter().chain(&self.held_out) {
            d.validate()?;
        }
        Ok(())
    }

    pub fn schedule(&self) -> Vec<Segment> {
        let mut out = Vec::new();
        for round in 0..self.rounds {
            for d in &self.domains {
                match self.mode {
                    Mode::Sequential | Mode::LeaveOneOut => out.push(Segment {
                        spec: d.clone(),
                        batches: d.batches,
                        round,
                    }),
                    Mode::Gradual => {
                        let peak = d.severity.max(1);
                        let ramp = (1..=peak).chain((1..peak).rev());
                        for s in ramp {
                            out.push(Segment {
                                spec: d.with_severity(s),
                                batches: d.batches,
                                round,
                            });
                        }
                    }
                }
            }
        }
        out
    }

    pub fn total_batches(&self) -> usize {
        self.schedule().iter().map(|s| s.batches).sum()
    }

    /// The adaptation stream, in scenario order.
    pub fn stream(&self) -> Result<ScenarioStream> {
        self.validate()?;
        let segments = self
            .schedule()
            .into_iter()
            .map(|seg| {
                let t = DomainTransform::new(&seg.spec, self.task.dim, self.seed)?;
                Ok((seg, t))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(ScenarioStream {
            task: self.task.clone(),
            means: self.task.means(),
            batch_size: self.batch_size,
            seed: self.seed,
            purpose: "stream",
            segments,
            seg: 0,
            within: 0,
            index: 0,
            last: None,
        })
    }

    /// Evaluation batches for each held-out domain (no change flags).
    pub fn held_out_stream(&self) -> Result<ScenarioStream> {
        let segments = self
            .held_out
            .iter()
            .map(|d| {
                let t = DomainTransform::new(d, self.task.dim, self.seed)?;
                Ok((
                    Segment {
                        spec: d.clone(),
                        batches: d.batches,
                        round: 0,
                    },
                    t,
                ))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(ScenarioStream {
            task: self.task.clone(),
            means: self.task.means(),
            batch_size: self.batch_size,
            seed: self.seed,
            purpose: "held-out",
            segments,
            seg: 0,
            within: 0,
            index: 0,
            last: None,
        })
    }
}

/// Lazy, deterministic batch generator.
pub struct ScenarioStream {
    task: BaseTask,
    means: Vec<Vec<f64>>,
    batch_size: usize,
    seed: u64,
    purpose: &'static str,
    segments: Vec<(Segment, DomainTransform)>,
    seg: usize,
    within: usize,
    index: usize,
    last: Option<DomainTag>,
}

impl Iterator for ScenarioStream {
    type Item = Result<StreamItem>;

    fn next(&mut self) -> Option<Self::Item> {
        while self.seg < self.segments.len() && self.within >= self.segments[self.seg].0.batches {
            self.seg += 1;
            self.within = 0;
        }
        let (segment, transform) = self.segments.get(self.seg)?;
        let mut rng = rng_for(self.seed, self.purpose, self.index as u64);
        let clean = self.task.sample_with(&self.means, self.batch_size, &mut rng);
        let batch = match transform.apply(&clean, &mut rng) {
            Ok(b) => b,
            Err(e) => return Some(Err(e)),
        };
        let domain = DomainTag {
            name: segment.spec.name().to_string(),
            severity: segment.spec.severity,
        };
        let change = self.last.as_ref().is_some_and(|l| *l != domain);
        let item = StreamItem {
            index: self.index,
            batch,
            domain: domain.clone(),
            round: segment.round,
            change,
        };
        self.last = Some(domain);
        self.index += 1;
        self.within += 1;
        Some(Ok(item))
    }
}

/// Planar rotation of the first two coordinates by `degrees`.
pub(crate) fn rotate_first_plane(row: &mut [f64], degrees: f64) {
    if row.len() < 2 {
        return;
    }
    let (s, c) = (degrees * PI / 180.0).sin_cos();
    let (a, b) = (row[0], row[1]);
    row[0] = c * a - s * b;
    row[1] = s * a + c * b;
}
