//! The online adaptation engine.
//!
//! One call to [`Adapter::adapt_batch`] runs a full iteration on an
//! unlabeled batch:
//!
//! 1. predict and embed the batch with the current parameters;
//! 2. compare batch confidence with the previous batch and, on a detected
//!    change, select prototypes of the previous domain from the queue;
//! 3. enqueue the batch's domain embeddings;
//! 4. step 1: train amplifier, extractor and discriminator to tell current
//!    embeddings from prototypes (encoder frozen);
//! 5. step 2: train encoder and head on self-training plus invariance to
//!    the prototypes (amplifier, extractor, discriminator frozen), then
//!    move the EMA teacher;
//! 6. move the prototypes so their Chamfer distance to the current batch is
//!    what it was before step 2.

use std::collections::VecDeque;

use rand::seq::index::sample;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels::{
    chamfer_distance, greedy_select, median_heuristic_gamma, mmd_squared, EmbeddingSet,
    KernelConfig, SourceId,
};
use crate::model::{
    discrimination_loss, ema_update, invariance_loss, nearest_l1_pairing, self_training_loss,
    Model, TeacherState,
};
use crate::numerics::{OptimizerKind, ParamSet, Tape, Tensor};
use crate::rng::rng_for;
use crate::stream::rotate_first_plane;

// ── configuration ────────────────────────────────────────────────────

/// Which parts of the method are active. Each flag corresponds to one
/// ablation row.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Components {
    pub amplifier: bool,
    pub self_training: bool,
    pub invariance: bool,
    pub discrimination: bool,
    /// Greedy score-based prototype selection; uniform random when off.
    pub submodular_selection: bool,
    pub prototype_update: bool,
}

impl Default for Components {
    fn default() -> Self {
        Components::all()
    }
}

impl Components {
    pub fn all() -> Self {
        Components {
            amplifier: true,
            self_training: true,
            invariance: true,
            discrimination: true,
            submodular_selection: true,
            prototype_update: true,
        }
    }

    pub fn none() -> Self {
        Components {
            amplifier: false,
            self_training: false,
            invariance: false,
            discrimination: false,
            submodular_selection: false,
            prototype_update: false,
        }
    }

    /// Whether prototypes are needed at all.
    pub fn uses_prototypes(&self) -> bool {
        self.invariance || self.discrimination
    }

    pub fn adapts(&self) -> bool {
        self.self_training || self.invariance || self.discrimination
    }
}

/// Cold-start augmentation: Gaussian input noise and a random rotation of
/// the first input plane.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentationSpec {
    pub noise_std: f64,
    pub max_rotation_deg: f64,
}

impl Default for AugmentationSpec {
    fn default() -> Self {
        AugmentationSpec {
            noise_std: 0.1,
            max_rotation_deg: 10.0,
        }
    }
}

/// Which embeddings of the current batch define the Chamfer distance the
/// prototype update preserves.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum UpdateReference {
    /// Embeddings under the parameters right before step 2.
    PreStep2,
    /// Embeddings under the parameters at the start of the iteration.
    #[default]
    PreStep1,
}

/// How current embeddings are paired with prototypes in the invariance
/// loss.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Pairing {
    /// Each embedding with its L1-nearest prototype.
    #[default]
    Nearest,
    /// One-to-one assignment of minimum total L1 cost.
    Matching,
}

/// Form of the teacher's self-training target.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PseudoLabel {
    /// Teacher class probabilities.
    Soft,
    /// One-hot teacher argmax.
    #[default]
    Hard,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdaptationConfig {
    pub lr_step1: f64,
    pub lr_step2: f64,
    pub lr_prototype: f64,
    pub lambda_inv: f64,
    pub ema_momentum: f64,
    /// Confidence-jump threshold for change detection.
    pub threshold: f64,
    pub queue_capacity: usize,
    pub prototypes: usize,
    pub prototype_steps: usize,
    pub update_reference: UpdateReference,
    pub pseudo_label: PseudoLabel,
    pub pairing: Pairing,
    pub optimizer: OptimizerKind,
    /// Predict with the amplifier switched on (when it is enabled at all).
    pub amplifier_at_inference: bool,
    pub augmentation: AugmentationSpec,
    pub components: Components,
    /// Record prototype-vs-target MMD per batch. Keeps the raw inputs
    /// behind each prototype, for diagnostics only.
    pub prototype_diagnostics: bool,
    pub seed: u64,
}

impl Default for AdaptationConfig {
    fn default() -> Self {
        AdaptationConfig {
            lr_step1: 1e-3,
            lr_step2: 1e-1,
            lr_prototype: 1e-2,
            lambda_inv: 0.1,
            ema_momentum: 0.99,
            threshold: 0.1,
            queue_capacity: 64,
            prototypes: 16,
            prototype_steps: 5,
            update_reference: UpdateReference::default(),
            pseudo_label: PseudoLabel::default(),
            pairing: Pairing::default(),
            optimizer: OptimizerKind::Sgd,
            amplifier_at_inference: false,
            augmentation: AugmentationSpec::default(),
            components: Components::all(),
            prototype_diagnostics: false,
            seed: 0,
        }
    }
}

impl AdaptationConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lr_step1", self.lr_step1),
            ("lr_step2", self.lr_step2),
            ("lr_prototype", self.lr_prototype),
        ] {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::config(format!("{name} must be > 0, got {v}")));
            }
        }
        if !(self.lambda_inv >= 0.0) {
            return Err(Error::config("lambda_inv must be >= 0"));
        }
        if !(self.ema_momentum > 0.0 && self.ema_momentum < 1.0) {
            return Err(Error::config("ema_momentum must lie in (0, 1)"));
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(Error::config("threshold must lie in (0, 1)"));
        }
        if self.queue_capacity == 0 || self.prototypes == 0 || self.prototype_steps == 0 {
            return Err(Error::config(
                "queue_capacity, prototypes and prototype_steps must be >= 1",
            ));
        }
        if self.augmentation.noise_std < 0.0 || self.augmentation.max_rotation_deg < 0.0 {
            return Err(Error::config("augmentation strengths must be >= 0"));
        }
        Ok(())
    }

    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: AdaptationConfig = toml::from_str(s)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &std::path::Path) -> Result<Self> {
        let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&s)
    }
}

// ── queue, prototypes, detector ──────────────────────────────────────

#[derive(Clone, Debug)]
struct QueueEntry {
    embedding: Vec<f64>,
    id: SourceId,
    input: Vec<f64>,
}

/// Bounded FIFO of domain embeddings from the current domain.
#[derive(Clone, Debug)]
pub struct DomainQueue {
    capacity: usize,
    entries: VecDeque<QueueEntry>,
    dim: usize,
}

impl DomainQueue {
    pub fn new(capacity: usize, dim: usize) -> Self {
        DomainQueue {
            capacity,
            entries: VecDeque::with_capacity(capacity),
            dim,
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Append embeddings with their source inputs, evicting the oldest.
    pub fn extend(&mut self, emb: &EmbeddingSet, inputs: &Tensor) -> Result<()> {
        if emb.dim() != self.dim || inputs.rows() != emb.len() {
            return Err(Error::dim("queue entries must match the queue dimension"));
        }
        for i in 0..emb.len() {
            if self.entries.len() == self.capacity {
                self.entries.pop_front();
            }
            self.entries.push_back(QueueEntry {
                embedding: emb.get(i).to_vec(),
                id: emb.source_ids()[i],
                input: inputs.row(i).to_vec(),
            });
        }
        Ok(())
    }

    pub fn to_set(&self) -> EmbeddingSet {
        let mut s = EmbeddingSet::empty(self.dim);
        for e in &self.entries {
            s.push(&e.embedding, e.id).expect("queue entries have the queue dimension");
        }
        s
    }

    pub fn ids(&self) -> Vec<SourceId> {
        self.entries.iter().map(|e| e.id).collect()
    }

    fn inputs(&self) -> Vec<Vec<f64>> {
        self.entries.iter().map(|e| e.input.clone()).collect()
    }

    pub fn clear(&mut self) {
        self.entries.clear();
    }
}

/// The previous domain's prototypes, optimized in place.
#[derive(Clone, Debug)]
pub struct PrototypeState {
    pub set: EmbeddingSet,
    pub kernel: KernelConfig,
    /// Raw inputs behind each prototype (diagnostics only).
    pub inputs: Option<Vec<Vec<f64>>>,
    /// The selection had fewer candidates than requested and was padded.
    pub padded: bool,
}

impl PrototypeState {
    pub fn len(&self) -> usize {
        self.set.len()
    }

    pub fn is_empty(&self) -> bool {
        self.set.is_empty()
    }
}

#[derive(Clone, Debug)]
pub struct DetectorState {
    pub last_confidence: Option<f64>,
    pub threshold: f64,
}

impl DetectorState {
    pub fn new(threshold: f64) -> Result<Self> {
        if !(threshold > 0.0 && threshold < 1.0) {
            return Err(Error::config(format!("threshold {threshold} outside (0, 1)")));
        }
        Ok(DetectorState {
            last_confidence: None,
            threshold,
        })
    }

    /// True iff the confidence moved by more than the threshold since the
    /// previous batch. The first call only initializes.
    pub fn detect_change(&mut self, confidence: f64) -> bool {
        let changed = self
            .last_confidence
            .is_some_and(|last| (confidence - last).abs() > self.threshold);
        self.last_confidence = Some(confidence);
        changed
    }
}

/// Mean over the batch of the top-class probability.
pub fn batch_confidence(probs: &Tensor) -> Result<f64> {
    if probs.rows() == 0 || probs.shape().len() != 2 {
        return Err(Error::contract("confidence of an empty batch"));
    }
    let total: f64 = probs
        .iter_rows()
        .map(|r| r.iter().copied().fold(f64::NEG_INFINITY, f64::max))
        .sum();
    Ok(total / probs.rows() as f64)
}

/// Pick `n` prototypes from `candidates`. Greedy score maximization when
/// `greedy`, otherwise uniform without replacement. Short candidate lists
/// are padded by cycling through the picks.
pub fn select_prototypes(
    candidates: &EmbeddingSet,
    candidate_inputs: Option<&[Vec<f64>]>,
    n: usize,
    greedy: bool,
    rng: &mut ChaCha8Rng,
) -> Result<PrototypeState> {
    if candidates.is_empty() {
        return Err(Error::contract("prototype selection from an empty set"));
    }
    let kernel = if candidates.len() >= 2 {
        median_heuristic_gamma(candidates)?
    } else {
        KernelConfig::new(1.0)?
    };
    let take = n.min(candidates.len());
    let mut picks = if greedy {
        greedy_select(candidates, take, kernel)?.indices
    } else {
        sample(rng, candidates.len(), take).into_vec()
    };
    let padded = take < n;
    let base = picks.len();
    for k in 0..(n - take) {
        picks.push(picks[k % base]);
    }
    Ok(PrototypeState {
        set: candidates.select(&picks),
        kernel,
        inputs: candidate_inputs.map(|inp| picks.iter().map(|&i| inp[i].clone()).collect()),
        padded,
    })
}

// ── records ──────────────────────────────────────────────────────────

/// What happened during one iteration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BatchRecord {
    pub index: usize,
    pub batch_size: usize,
    pub confidence: f64,
    pub detected: bool,
    /// Prototypes were (re)selected on this batch.
    pub selected: bool,
    pub selection_padded: bool,
    pub loss_dis: Option<f64>,
    pub loss_self: Option<f64>,
    pub loss_inv: Option<f64>,
    pub prototype_residual: Option<f64>,
    /// MMD² between targets and prototypes before / after the update.
    pub prototype_mmd_before: Option<f64>,
    pub prototype_mmd_after: Option<f64>,
    /// Misclassified samples, when labels were supplied.
    pub errors: Option<usize>,
}

impl BatchRecord {
    pub fn losses_finite(&self) -> bool {
        [
            Some(self.confidence),
            self.loss_dis,
            self.loss_self,
            self.loss_inv,
            self.prototype_residual,
            self.prototype_mmd_before,
            self.prototype_mmd_after,
        ]
        .into_iter()
        .flatten()
        .all(f64::is_finite)
    }
}

/// Losses of one step-2 update.
#[derive(Clone, Debug)]
pub struct Step2Output {
    /// Student prediction before the update.
    pub probs: Tensor,
    pub loss_self: Option<f64>,
    pub loss_inv: Option<f64>,
    pub total: f64,
}

/// Count of rows whose argmax differs from the label.
pub fn count_errors(probs: &Tensor, labels: &[usize]) -> usize {
    probs
        .iter_rows()
        .zip(labels)
        .filter(|(r, &y)| argmax(r) != y)
        .count()
}

fn greedy_matching(f: &EmbeddingSet, p: &EmbeddingSet) -> Vec<usize> {
    let mut pairs = Vec::new();
    for (i, a) in f.iter().enumerate() {
        for (j, b) in p.iter().enumerate() {
            let d: f64 = a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum();
            pairs.push((d, i, j));
        }
    }
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut out = vec![usize::MAX; f.len()];
    let mut used = vec![false; p.len()];
    for (_, i, j) in pairs {
        if out[i] == usize::MAX && !used[j] {
            out[i] = j;
            used[j] = true;
        }
    }
    out
}

/// One-hot rows at each row's argmax.
pub fn one_hot_argmax(probs: &Tensor) -> Tensor {
    let c = probs.cols();
    let mut out = Tensor::zeros(&[probs.rows(), c]);
    for (i, r) in probs.iter_rows().enumerate() {
        out.data_mut()[i * c + argmax(r)] = 1.0;
    }
    out
}

pub fn argmax(r: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in r.iter().enumerate() {
        if v > r[best] {
            best = i;
        }
    }
    best
}

// ── engine ───────────────────────────────────────────────────────────

/// Adaptation state: student, teacher, queue, prototypes, detector.
pub struct Adapter {
    pub model: Model,
    pub teacher: TeacherState,
    pub queue: DomainQueue,
    pub prototypes: Option<PrototypeState>,
    pub detector: DetectorState,
    cfg: AdaptationConfig,
    rng: ChaCha8Rng,
    batches_seen: usize,
}

impl Adapter {
    pub fn new(model: Model, cfg: AdaptationConfig) -> Result<Self> {
        cfg.validate()?;
        let teacher = TeacherState::from_student(&model.encoder, cfg.ema_momentum)?;
        let queue = DomainQueue::new(cfg.queue_capacity, model.extractor.domain_dim());
        let detector = DetectorState::new(cfg.threshold)?;
        let rng = rng_for(cfg.seed, "adapt", 0);
        Ok(Adapter {
            model,
            teacher,
            queue,
            prototypes: None,
            detector,
            cfg,
            rng,
            batches_seen: 0,
        })
    }

    pub fn config(&self) -> &AdaptationConfig {
        &self.cfg
    }

    pub fn batches_seen(&self) -> usize {
        self.batches_seen
    }

    fn amp_embed(&self) -> bool {
        self.cfg.components.amplifier
    }

    fn amp_infer(&self) -> bool {
        self.cfg.components.amplifier && self.cfg.amplifier_at_inference
    }

    /// Class probabilities under the current student, no adaptation.
    pub fn predict(&self, x: &Tensor) -> Result<Tensor> {
        self.model.predict(x, self.amp_infer())
    }

    /// Domain embeddings under the current parameters (embedding path).
    pub fn embed(&self, x: &Tensor, batch: usize) -> Result<EmbeddingSet> {
        Ok(self.model.embed(x, self.amp_embed(), batch)?.1)
    }

    /// Prototypes from augmented copies of the first batch.
    pub fn cold_start(&mut self, x: &Tensor) -> Result<()> {
        if self.detector.last_confidence.is_some() {
            return Err(Error::contract("cold start after the stream has started"));
        }
        let aug = augment(x, &self.cfg.augmentation, &mut self.rng)?;
        let emb = self.embed(&aug, self.batches_seen)?;
        let inputs: Vec<Vec<f64>> = aug.iter_rows().map(<[f64]>::to_vec).collect();
        let keep = self.cfg.prototype_diagnostics.then_some(inputs.as_slice());
        let state = select_prototypes(
            &emb,
            keep,
            self.cfg.prototypes,
            self.cfg.components.submodular_selection,
            &mut self.rng,
        )?;
        self.prototypes = Some(state);
        Ok(())
    }

    /// Select prototypes from the queue and clear it.
    pub fn on_domain_change(&mut self) -> Result<bool> {
        if self.queue.is_empty() {
            return Err(Error::contract("domain change with an empty queue"));
        }
        let set = self.queue.to_set();
        let inputs = self.queue.inputs();
        let keep = self.cfg.prototype_diagnostics.then_some(inputs.as_slice());
        let state = select_prototypes(
            &set,
            keep,
            self.cfg.prototypes,
            self.cfg.components.submodular_selection,
            &mut self.rng,
        )?;
        let padded = state.padded;
        self.prototypes = Some(state);
        self.queue.clear();
        Ok(padded)
    }

    /// Row indices subsampling `have` down to `want` (all rows when
    /// `have <= want`).
    fn subsample(&mut self, have: usize, want: usize) -> Vec<usize> {
        if have <= want {
            (0..have).collect()
        } else {
            let mut idx = sample(&mut self.rng, have, want).into_vec();
            idx.sort_unstable();
            idx
        }
    }

    /// Step 1: discrimination loss on amplifier, extractor and
    /// discriminator. Encoder and head stay bit-identical.
    pub fn step1(&mut self, x: &Tensor) -> Result<f64> {
        let proto = self
            .prototypes
            .as_ref()
            .ok_or_else(|| Error::contract("step 1 without prototypes"))?
            .set
            .to_tensor();
        let amp_on = self.amp_embed();
        let n = proto.rows().min(x.rows());
        let fi = self.subsample(x.rows(), n);
        let pi = self.subsample(proto.rows(), n);
        let m = &self.model;
        let mut tape = Tape::new();
        let enc = m.encoder.params.bind(&mut tape, false);
        let amp = m.amplifier.params.bind(&mut tape, amp_on);
        let ext = m.extractor.params.bind(&mut tape, true);
        let disc = m.discriminator.params.bind(&mut tape, true);

        let xv = tape.constant(x.clone());
        let amp_arg = amp_on.then_some((&m.amplifier, amp.as_slice()));
        let feats = m.encoder.features_on(&mut tape, &enc, amp_arg, xv)?;
        let emb = m.extractor.embed_on(&mut tape, &ext, feats)?;

        let f_sub = tape.select_rows(emb, &fi)?;
        let p_sub = tape.constant(proto.select_rows(&pi));
        let d_cur = m.discriminator.prob_on(&mut tape, &disc, f_sub)?;
        let d_pre = m.discriminator.prob_on(&mut tape, &disc, p_sub)?;
        let loss = discrimination_loss(&mut tape, d_cur, d_pre)?;
        let value = tape.value(loss).item()?;
        let grads = tape.backward(loss)?;

        let (lr, opt) = (self.cfg.lr_step1, self.cfg.optimizer);
        let m = &mut self.model;
        apply(&mut m.extractor.params, &grads, &ext, lr, opt)?;
        apply(&mut m.discriminator.params, &grads, &disc, lr, opt)?;
        if amp_on {
            apply(&mut m.amplifier.params, &grads, &amp, lr, opt)?;
        }
        Ok(value)
    }

    /// Step 2: self-training plus invariance on encoder and head, then the
    /// EMA teacher update. Amplifier, extractor and discriminator stay
    /// bit-identical.
    pub fn step2(&mut self, x: &Tensor) -> Result<Step2Output> {
        let comps = self.cfg.components;
        let (amp_embed, amp_infer) = (self.amp_embed(), self.amp_infer());
        let m = &self.model;

        let pseudo = if comps.self_training {
            let mut t = Tape::new();
            let tv = self.teacher.params.bind(&mut t, false);
            let av = m.amplifier.params.bind(&mut t, false);
            let xv = t.constant(x.clone());
            let amp_arg = amp_infer.then_some((&m.amplifier, av.as_slice()));
            let f = m.encoder.features_on(&mut t, &tv, amp_arg, xv)?;
            let p = m.encoder.probs_on(&mut t, &tv, f)?;
            let probs = t.value(p).clone();
            Some(match self.cfg.pseudo_label {
                PseudoLabel::Soft => probs,
                PseudoLabel::Hard => one_hot_argmax(&probs),
            })
        } else {
            None
        };

        let mut tape = Tape::new();
        let enc = m.encoder.params.bind(&mut tape, true);
        let amp = m.amplifier.params.bind(&mut tape, false);
        let ext = m.extractor.params.bind(&mut tape, false);
        let xv = tape.constant(x.clone());

        let feats_embed = m.encoder.features_on(
            &mut tape,
            &enc,
            amp_embed.then_some((&m.amplifier, amp.as_slice())),
            xv,
        )?;
        let feats_infer = if amp_infer == amp_embed {
            feats_embed
        } else {
            m.encoder.features_on(
                &mut tape,
                &enc,
                amp_infer.then_some((&m.amplifier, amp.as_slice())),
                xv,
            )?
        };
        let probs = m.encoder.probs_on(&mut tape, &enc, feats_infer)?;
        let probs_value = tape.value(probs).clone();

        let mut terms = Vec::new();
        let mut loss_self = None;
        if let Some(target) = &pseudo {
            let l = self_training_loss(&mut tape, probs, target)?;
            loss_self = Some(tape.value(l).item()?);
            terms.push(l);
        }

        let mut loss_inv = None;
        if comps.invariance {
            if let Some(proto) = &self.prototypes {
                let emb = m.extractor.embed_on(&mut tape, &ext, feats_embed)?;
                let cur = EmbeddingSet::from_tensor(tape.value(emb), self.batches_seen)?;
                let proto_set = proto.set.clone();
                let idx = self.subsample(cur.len(), proto_set.len());
                let cur_sub = cur.select(&idx);
                let pairing = match self.cfg.pairing {
                    Pairing::Nearest => nearest_l1_pairing(&cur_sub, &proto_set),
                    Pairing::Matching => greedy_matching(&cur_sub, &proto_set),
                };
                let paired = proto_set.to_tensor().select_rows(&pairing);
                let f_sub = tape.select_rows(emb, &idx)?;
                let p = tape.constant(paired);
                let l = invariance_loss(&mut tape, f_sub, p)?;
                loss_inv = Some(tape.value(l).item()?);
                let weighted = tape.scale(l, self.cfg.lambda_inv)?;
                terms.push(weighted);
            }
        }

        let Some((&first, rest)) = terms.split_first() else {
            return Ok(Step2Output {
                probs: probs_value,
                loss_self,
                loss_inv,
                total: 0.0,
            });
        };
        let mut total = first;
        for &t in rest {
            total = tape.add(total, t)?;
        }
        let total_value = tape.value(total).item()?;
        let grads = tape.backward(total)?;
        let (lr, opt) = (self.cfg.lr_step2, self.cfg.optimizer);
        apply(&mut self.model.encoder.params, &grads, &enc, lr, opt)?;
        ema_update(&mut self.teacher, &self.model.encoder, self.cfg.ema_momentum)?;

        Ok(Step2Output {
            probs: probs_value,
            loss_self,
            loss_inv,
            total: total_value,
        })
    }

    /// Move the prototypes so their Chamfer distance to the re-embedded
    /// batch matches the distance measured before the model update.
    /// Returns the final residual.
    pub fn update_prototypes(&mut self, before: &EmbeddingSet, after: &EmbeddingSet) -> Result<f64> {
        let steps = self.cfg.prototype_steps;
        let mut lr = self.cfg.lr_prototype;
        let proto = self
            .prototypes
            .as_mut()
            .ok_or_else(|| Error::contract("prototype update without prototypes"))?;
        update_prototype_set(&mut proto.set, before, after, steps, &mut lr)
    }

    /// Run one full online iteration. `labels`, when given, are used only
    /// to score the prediction made before any parameter changes.
    pub fn adapt_batch(&mut self, x: &Tensor, labels: Option<&[usize]>) -> Result<(Tensor, BatchRecord)> {
        let index = self.batches_seen;
        self.adapt_inner(x, labels).map_err(|e| e.at_batch(index))
    }

    fn adapt_inner(&mut self, x: &Tensor, labels: Option<&[usize]>) -> Result<(Tensor, BatchRecord)> {
        let comps = self.cfg.components;
        let index = self.batches_seen;
        if let Some(l) = labels {
            if l.len() != x.rows() {
                return Err(Error::dim("labels do not match the batch"));
            }
        }
        if comps.uses_prototypes() && self.prototypes.is_none() {
            self.cold_start(x)?;
        }

        let probs = self.predict(x)?;
        let confidence = batch_confidence(&probs)?;
        let detected = self.detector.detect_change(confidence);
        let errors = labels.map(|l| count_errors(&probs, l));

        let mut record = BatchRecord {
            index,
            batch_size: x.rows(),
            confidence,
            detected,
            selected: false,
            selection_padded: false,
            loss_dis: None,
            loss_self: None,
            loss_inv: None,
            prototype_residual: None,
            prototype_mmd_before: None,
            prototype_mmd_after: None,
            errors,
        };

        if comps.uses_prototypes() {
            if detected && !self.queue.is_empty() {
                record.selection_padded = self.on_domain_change()?;
                record.selected = true;
            }
            let emb = self.embed(x, index)?;
            self.queue.extend(&emb, x)?;
        }

        let pre_step1 = if comps.prototype_update && self.cfg.update_reference == UpdateReference::PreStep1 {
            Some(self.embed(x, index)?)
        } else {
            None
        };

        if comps.discrimination {
            record.loss_dis = Some(self.step1(x)?);
        }

        let update = comps.prototype_update && self.prototypes.is_some();
        let before = match (update, pre_step1) {
            (true, Some(e)) => Some(e),
            (true, None) => Some(self.embed(x, index)?),
            _ => None,
        };

        if comps.self_training || comps.invariance {
            let out = self.step2(x)?;
            record.loss_self = out.loss_self;
            record.loss_inv = out.loss_inv;
        }

        if let Some(before) = before {
            let after = self.embed(x, index)?;
            let old = self.prototypes.as_ref().map(|p| p.set.clone());
            record.prototype_residual = Some(self.update_prototypes(&before, &after)?);
            if self.cfg.prototype_diagnostics {
                if let (Some(old), Some(p)) = (old, &self.prototypes) {
                    if let Some(inputs) = &p.inputs {
                        let targets = self.embed(&Tensor::from_rows(inputs)?, index)?;
                        record.prototype_mmd_before = Some(mmd_squared(&targets, &old, p.kernel)?);
                        record.prototype_mmd_after = Some(mmd_squared(&targets, &p.set, p.kernel)?);
                    }
                }
            }
        }

        if !record.losses_finite() {
            return Err(Error::NonFinite("batch record".into()));
        }
        self.batches_seen += 1;
        Ok((probs, record))
    }
}

fn apply(
    params: &mut ParamSet,
    grads: &crate::numerics::Gradients,
    vars: &[crate::numerics::Var],
    lr: f64,
    opt: OptimizerKind,
) -> Result<()> {
    params.absorb_grads(grads, vars)?;
    params.step(lr, opt)
}

/// Gradient descent on `|d* − d_CD(after, P)|` over the prototype vectors,
/// with `d* = d_CD(before, P)` at the starting prototypes. A step that
/// increases the residual is reverted and the rate halved.
pub fn update_prototype_set(
    proto: &mut EmbeddingSet,
    before: &EmbeddingSet,
    after: &EmbeddingSet,
    steps: usize,
    lr: &mut f64,
) -> Result<f64> {
    let target = chamfer_distance(before, proto)?;
    let mut residual = (target - chamfer_distance(after, proto)?).abs();
    if residual == 0.0 {
        return Ok(0.0);
    }
    let f = after.to_tensor();
    for _ in 0..steps {
        let mut tape = Tape::new();
        let p = tape.leaf(proto.to_tensor());
        let fv = tape.constant(f.clone());
        let d = tape.chamfer(fv, p)?;
        let t = tape.constant(Tensor::scalar(target));
        let r = tape.sub(t, d)?;
        let loss = tape.abs(r)?;
        let grads = tape.backward(loss)?;
        let g = grads.wrt(p);
        let current = tape.value(p).clone();
        let mut candidate = current.clone();
        for (c, gi) in candidate.data_mut().iter_mut().zip(g.data()) {
            *c -= *lr * gi;
        }
        if !candidate.all_finite() {
            return Err(Error::NonFinite("prototype update".into()));
        }
        proto.set_vectors(&candidate)?;
        let next = (target - chamfer_distance(after, proto)?).abs();
        if next > residual {
            proto.set_vectors(&current)?;
            *lr *= 0.5;
        } else {
            residual = next;
        }
    }
    Ok(residual)
}

/// Gaussian noise plus a random rotation in the first input plane.
pub fn augment(x: &Tensor, spec: &AugmentationSpec, rng: &mut ChaCha8Rng) -> Result<Tensor> {
    let mut rows = Vec::with_capacity(x.rows());
    for r in x.iter_rows() {
        let mut row: Vec<f64> = r
            .iter()
            .map(|&v| v + spec.noise_std * rng.sample::<f64, _>(StandardNormal))
            .collect();
        if spec.max_rotation_deg > 0.0 {
            let deg = rng.random_range(-spec.max_rotation_deg..=spec.max_rotation_deg);
            rotate_first_plane(&mut row, deg);
        }
        rows.push(row);
    }
    Tensor::from_rows(&rows)
}
