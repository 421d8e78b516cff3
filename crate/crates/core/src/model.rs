//! The learnable pieces: encoder with classification head, the residual
//! domain amplifier, the domain-embedding extractor, the domain
//! discriminator, and the EMA teacher. Also the four training losses and the
//! checkpoint format.
//!
//! Forward passes come in two flavours. The `*_on` methods record onto a
//! caller-owned [`Tape`] with caller-bound parameter handles, which is how
//! the adaptation steps choose what is trainable. The plain methods on
//! [`Model`] run a throwaway tape and return values.

use std::fs;
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels::EmbeddingSet;
use crate::numerics::{NamedArray, ParamSet, Tape, Tensor, Var};
use crate::rng::rng_for;

pub const CHECKPOINT_FORMAT: &str = "ctta-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Clamp applied to discriminator outputs before taking logs.
pub const DISCRIMINATOR_EPS: f64 = 1e-7;
/// Floor applied to student probabilities before taking logs.
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub input_dim: usize,
    pub classes: usize,
    pub encoder_layers: usize,
    pub hidden_width: usize,
    pub feature_dim: usize,
    pub bottleneck: usize,
    pub domain_dim: usize,
    pub extractor_hidden: usize,
    /// Hidden widths of the discriminator; empty means a single linear layer.
    pub discriminator_hidden: Vec<usize>,
    /// Multiplier on the extractor's output-layer init scale.
    pub extractor_init_scale: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            input_dim: 16,
            classes: 4,
            encoder_layers: 3,
            hidden_width: 64,
            feature_dim: 32,
            bottleneck: 8,
            domain_dim: 16,
            extractor_hidden: 32,
            discriminator_hidden: Vec::new(),
            extractor_init_scale: 0.01,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let widths = [
            ("input_dim", self.input_dim),
            ("classes", self.classes),
            ("encoder_layers", self.encoder_layers),
            ("hidden_width", self.hidden_width),
            ("feature_dim", self.feature_dim),
            ("bottleneck", self.bottleneck),
            ("domain_dim", self.domain_dim),
            ("extractor_hidden", self.extractor_hidden),
        ];
        for (name, v) in widths {
            if v == 0 {
                return Err(Error::config(format!("model {name} must be positive")));
            }
        }
        if self.classes < 2 {
            return Err(Error::config("need at least two classes"));
        }
        if !(self.extractor_init_scale >= 0.0) {
            return Err(Error::config("extractor_init_scale must be >= 0"));
        }
        if self.discriminator_hidden.contains(&0) {
            return Err(Error::config("discriminator hidden widths must be positive"));
        }
        Ok(())
    }

    fn encoder_widths(&self) -> Vec<(usize, usize)> {
        let mut dims = vec![self.input_dim];
        dims.extend(std::iter::repeat(self.hidden_width).take(self.encoder_layers - 1));
        dims.push(self.feature_dim);
        dims.windows(2).map(|w| (w[0], w[1])).collect()
    }
}

// ── layers ───────────────────────────────────────────────────────────

/// Indices of a dense layer's weight `[in, out]` and bias `[1, out]`.
#[derive(Clone, Copy, Debug)]
struct Linear {
    w: usize,
    b: usize,
}

impl Linear {
    fn new(
        ps: &mut ParamSet,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        std: f64,
        rng: &mut ChaCha8Rng,
    ) -> Linear {
        let w: Vec<f64> = (0..fan_in * fan_out)
            .map(|_| std * rng.sample::<f64, _>(StandardNormal))
            .collect();
        let w = ps.push(format!("{name}.w"), Tensor::from_parts(vec![fan_in, fan_out], w));
        let b = ps.push(format!("{name}.b"), Tensor::zeros(&[1, fan_out]));
        Linear { w, b }
    }

    fn apply(&self, tape: &mut Tape, vars: &[Var], x: Var) -> Result<Var> {
        let y = tape.matmul(x, vars[self.w])?;
        tape.add(y, vars[self.b])
    }
}

fn he(fan_in: usize) -> f64 {
    (2.0 / fan_in as f64).sqrt()
}

fn lecun(fan_in: usize) -> f64 {
    (1.0 / fan_in as f64).sqrt()
}

// ── networks ─────────────────────────────────────────────────────────

/// Fully connected encoder (GELU between layers, linear output) plus a
/// linear classification head.
#[derive(Clone, Debug)]
pub struct EncoderNet {
    pub params: ParamSet,
    layers: Vec<Linear>,
    head: Linear,
    input_dim: usize,
    feature_dim: usize,
    classes: usize,
}

/// One bottleneck adapter per encoder layer, added residually.
#[derive(Clone, Debug)]
pub struct AmplifierNet {
    pub params: ParamSet,
    adapters: Vec<(Linear, Linear)>,
}

/// Two-layer ReLU MLP from features to domain embeddings.
#[derive(Clone, Debug)]
pub struct ExtractorNet {
    pub params: ParamSet,
    hidden: Linear,
    out: Linear,
    domain_dim: usize,
}

/// Sigmoid classifier on domain embeddings; GELU between hidden layers.
#[derive(Clone, Debug)]
pub struct DiscriminatorNet {
    pub params: ParamSet,
    hidden: Vec<Linear>,
    out: Linear,
}

/// EMA copy of the encoder and head parameters.
#[derive(Clone, Debug)]
pub struct TeacherState {
    pub params: ParamSet,
    pub momentum: f64,
}

impl EncoderNet {
    fn new(cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Self {
        let mut params = ParamSet::new();
        let layers = cfg
            .encoder_widths()
            .into_iter()
            .enumerate()
            .map(|(i, (a, b))| Linear::new(&mut params, &format!("enc.{i}"), a, b, he(a), rng))
            .collect();
        let head = Linear::new(
            &mut params,
            "head",
            cfg.feature_dim,
            cfg.classes,
            lecun(cfg.feature_dim),
            rng,
        );
        EncoderNet {
            params,
            layers,
            head,
            input_dim: cfg.input_dim,
            feature_dim: cfg.feature_dim,
            classes: cfg.classes,
        }
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    /// Encoder features. `amp` carries the amplifier and its handles when
    /// the amplifier is switched on.
    pub fn features_on(
        &self,
        tape: &mut Tape,
        enc: &[Var],
        amp: Option<(&AmplifierNet, &[Var])>,
        x: Var,
    ) -> Result<Var> {
        let xv = tape.value(x);
        if xv.shape().len() != 2 || xv.cols() != self.input_dim {
            return Err(Error::dim(format!(
                "encoder expects [batch, {}], got {:?}",
                self.input_dim,
                xv.shape()
            )));
        }
        let mut h = x;
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.apply(tape, enc, h)?;
            if i < last {
                h = tape.gelu(h)?;
            }
            if let Some((amp, av)) = amp {
                let (down, up) = amp.adapters[i];
                let z = down.apply(tape, av, h)?;
                let z = tape.relu(z)?;
                let z = up.apply(tape, av, z)?;
                h = tape.add(h, z)?;
            }
        }
        Ok(h)
    }

    pub fn logits_on(&self, tape: &mut Tape, enc: &[Var], features: Var) -> Result<Var> {
        let fv = tape.value(features);
        if fv.cols() != self.feature_dim {
            return Err(Error::dim(format!(
                "head expects {} features, got {:?}",
                self.feature_dim,
                fv.shape()
            )));
        }
        self.head.apply(tape, enc, features)
    }

    pub fn probs_on(&self, tape: &mut Tape, enc: &[Var], features: Var) -> Result<Var> {
        let logits = self.logits_on(tape, enc, features)?;
        tape.softmax_rows(logits)
    }
}

impl AmplifierNet {
    fn new(cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Self {
        let mut params = ParamSet::new();
        let adapters = cfg
            .encoder_widths()
            .into_iter()
            .enumerate()
            .map(|(i, (_, width))| {
                let down = Linear::new(
                    &mut params,
                    &format!("amp.{i}.down"),
                    width,
                    cfg.bottleneck,
                    he(width),
                    rng,
                );
                // zero up-projection: a fresh amplifier is the identity
                let up = Linear::new(
                    &mut params,
                    &format!("amp.{i}.up"),
                    cfg.bottleneck,
                    width,
                    0.0,
                    rng,
                );
                (down, up)
            })
            .collect();
        AmplifierNet { params, adapters }
    }
}

impl ExtractorNet {
    fn new(cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Self {
        let mut params = ParamSet::new();
        let hidden = Linear::new(
            &mut params,
            "ext.0",
            cfg.feature_dim,
            cfg.extractor_hidden,
            he(cfg.feature_dim),
            rng,
        );
        let out = Linear::new(
            &mut params,
            "ext.1",
            cfg.extractor_hidden,
            cfg.domain_dim,
            cfg.extractor_init_scale * lecun(cfg.extractor_hidden),
            rng,
        );
        ExtractorNet {
            params,
            hidden,
            out,
            domain_dim: cfg.domain_dim,
        }
    }

    pub fn domain_dim(&self) -> usize {
        self.domain_dim
    }

    pub fn embed_on(&self, tape: &mut Tape, vars: &[Var], features: Var) -> Result<Var> {
        let h = self.hidden.apply(tape, vars, features)?;
        let h = tape.relu(h)?;
        self.out.apply(tape, vars, h)
    }
}

impl DiscriminatorNet {
    fn new(cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Self {
        let mut params = ParamSet::new();
        let mut width = cfg.domain_dim;
        let mut hidden = Vec::new();
        for (i, &h) in cfg.discriminator_hidden.iter().enumerate() {
            hidden.push(Linear::new(&mut params, &format!("disc.{i}"), width, h, he(width), rng));
            width = h;
        }
        let out = Linear::new(&mut params, "disc.out", width, 1, lecun(width), rng);
        DiscriminatorNet {
            params,
            hidden,
            out,
        }
    }

    /// Probability `[n, 1]` that each embedding belongs to the current domain.
    pub fn prob_on(&self, tape: &mut Tape, vars: &[Var], emb: Var) -> Result<Var> {
        let mut h = emb;
        for layer in &self.hidden {
            h = layer.apply(tape, vars, h)?;
            h = tape.gelu(h)?;
        }
        let z = self.out.apply(tape, vars, h)?;
        tape.sigmoid(z)
    }

    /// Discrimination loss for two equally sized sets.
    pub fn loss(&self, f_cur: &EmbeddingSet, p_pre: &EmbeddingSet) -> Result<f64> {
        let mut tape = Tape::new();
        let vars = self.params.bind(&mut tape, false);
        let f = tape.constant(f_cur.to_tensor());
        let p = tape.constant(p_pre.to_tensor());
        let df = self.prob_on(&mut tape, &vars, f)?;
        let dp = self.prob_on(&mut tape, &vars, p)?;
        let l = discrimination_loss(&mut tape, df, dp)?;
        tape.value(l).item()
    }
}

impl TeacherState {
    pub fn from_student(student: &EncoderNet, momentum: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&momentum) {
            return Err(Error::config(format!("EMA momentum {momentum} outside [0, 1]")));
        }
        Ok(TeacherState {
            params: student.params.clone(),
            momentum,
        })
    }
}

/// `θ_t ← μ·θ_t + (1 − μ)·θ_s` for every teacher parameter.
pub fn ema_update(teacher: &mut TeacherState, student: &EncoderNet, momentum: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&momentum) {
        return Err(Error::config(format!("EMA momentum {momentum} outside [0, 1]")));
    }
    if teacher.params.len() != student.params.len() {
        return Err(Error::dim("teacher and student parameter counts differ"));
    }
    for i in 0..student.params.len() {
        let s = student.params.get(i);
        let t = teacher.params.get_mut(i);
        if t.shape() != s.shape() {
            return Err(Error::dim("teacher and student parameter shapes differ"));
        }
        for (tv, sv) in t.data_mut().iter_mut().zip(s.data()) {
            *tv = momentum * *tv + (1.0 - momentum) * sv;
        }
    }
    Ok(())
}

// ── losses ───────────────────────────────────────────────────────────

/// Mean over the batch of `−(1/C) Σ_c ỹ_c log ŷ_c`.
pub fn self_training_loss(tape: &mut Tape, probs: Var, targets: &Tensor) -> Result<Var> {
    let pv = tape.value(probs);
    if pv.shape() != targets.shape() {
        return Err(Error::dim(format!(
            "predictions {:?} vs pseudo-labels {:?}",
            pv.shape(),
            targets.shape()
        )));
    }
    let (rows, classes) = (pv.rows().max(1), pv.cols());
    let clamped = tape.clamp(probs, PROB_FLOOR, 1.0)?;
    let logs = tape.log(clamped)?;
    let t = tape.constant(targets.clone());
    let prod = tape.mul(logs, t)?;
    let s = tape.sum(prod)?;
    tape.scale(s, -1.0 / (classes as f64 * rows as f64))
}

/// `−(1/n)[Σ log D(f) + Σ log(1 − D(p))]` over equal-size sets.
pub fn discrimination_loss(tape: &mut Tape, d_cur: Var, d_pre: Var) -> Result<Var> {
    let n = tape.value(d_cur).len();
    if n == 0 || tape.value(d_pre).len() != n {
        return Err(Error::contract(format!(
            "discrimination loss needs equal non-empty sets, got {} and {}",
            n,
            tape.value(d_pre).len()
        )));
    }
    let dc = tape.clamp(d_cur, DISCRIMINATOR_EPS, 1.0 - DISCRIMINATOR_EPS)?;
    let dp = tape.clamp(d_pre, DISCRIMINATOR_EPS, 1.0 - DISCRIMINATOR_EPS)?;
    let log_dc = tape.log(dc)?;
    let one = tape.constant(Tensor::scalar(1.0));
    let comp = tape.sub(one, dp)?;
    let log_comp = tape.log(comp)?;
    let a = tape.sum(log_dc)?;
    let b = tape.sum(log_comp)?;
    let s = tape.add(a, b)?;
    tape.scale(s, -1.0 / n as f64)
}

/// Mean L1 distance between rows of `f` and the paired rows `paired`.
pub fn invariance_loss(tape: &mut Tape, f: Var, paired: Var) -> Result<Var> {
    let (fv, pv) = (tape.value(f), tape.value(paired));
    if fv.shape() != pv.shape() {
        return Err(Error::dim(format!(
            "pairs {:?} vs {:?}",
            fv.shape(),
            pv.shape()
        )));
    }
    let n = fv.rows();
    if n == 0 || fv.is_empty() {
        return Err(Error::contract("invariance loss over an empty pairing"));
    }
    let d = tape.sub(f, paired)?;
    let a = tape.abs(d)?;
    let s = tape.sum(a)?;
    tape.scale(s, 1.0 / n as f64)
}

/// Cross-entropy of one prediction against one pseudo-label, with the
/// `1/C` factor.
pub fn loss_self(pred: &[f64], target: &[f64]) -> Result<f64> {
    if pred.len() != target.len() || pred.is_empty() {
        return Err(Error::dim(format!(
            "prediction of length {} vs target of length {}",
            pred.len(),
            target.len()
        )));
    }
    let c = pred.len() as f64;
    Ok(-pred
        .iter()
        .zip(target)
        .map(|(&p, &t)| t * p.max(PROB_FLOOR).ln())
        .sum::<f64>()
        / c)
}

/// Mean L1 distance between each `f_cur[i]` and `p_pre[pairing[i]]`.
pub fn loss_inv(f_cur: &EmbeddingSet, p_pre: &EmbeddingSet, pairing: &[usize]) -> Result<f64> {
    if pairing.is_empty() {
        return Err(Error::contract("invariance loss over an empty pairing"));
    }
    if pairing.len() != f_cur.len() || f_cur.dim() != p_pre.dim() {
        return Err(Error::dim("pairing does not cover the current embeddings"));
    }
    let mut s = 0.0;
    for (i, &j) in pairing.iter().enumerate() {
        let p = p_pre
            .iter()
            .nth(j)
            .ok_or_else(|| Error::contract(format!("pairing index {j} out of range")))?;
        s += f_cur.get(i).iter().zip(p).map(|(a, b)| (a - b).abs()).sum::<f64>();
    }
    Ok(s / pairing.len() as f64)
}

/// For every current embedding, the index of its L1-nearest prototype
/// (first on ties).
pub fn nearest_l1_pairing(f_cur: &EmbeddingSet, p_pre: &EmbeddingSet) -> Vec<usize> {
    f_cur
        .iter()
        .map(|f| {
            let mut best = (0, f64::INFINITY);
            for (j, p) in p_pre.iter().enumerate() {
                let d: f64 = f.iter().zip(p).map(|(a, b)| (a - b).abs()).sum();
                if d < best.1 {
                    best = (j, d);
                }
            }
            best.0
        })
        .collect()
}

// ── whole model ──────────────────────────────────────────────────────

#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub encoder: EncoderNet,
    pub amplifier: AmplifierNet,
    pub extractor: ExtractorNet,
    pub discriminator: DiscriminatorNet,
}

/// Serialized model. All arrays are named and carry their shapes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub seed: u64,
    pub config: ModelConfig,
    /// Held-out clean error of the source fit, in percent.
    pub source_error_pct: Option<f64>,
    pub encoder: Vec<NamedArray>,
    pub amplifier: Vec<NamedArray>,
    pub extractor: Vec<NamedArray>,
    pub discriminator: Vec<NamedArray>,
}

impl Model {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = rng_for(seed, "model-init", 0);
        let encoder = EncoderNet::new(&config, &mut rng);
        let amplifier = AmplifierNet::new(&config, &mut rng);
        let extractor = ExtractorNet::new(&config, &mut rng);
        let discriminator = DiscriminatorNet::new(&config, &mut rng);
        Ok(Model {
            config,
            encoder,
            amplifier,
            extractor,
            discriminator,
        })
    }

    pub fn features(&self, x: &Tensor, amplifier_on: bool) -> Result<Tensor> {
        let mut tape = Tape::new();
        let enc = self.encoder.params.bind(&mut tape, false);
        let amp = self.amplifier.params.bind(&mut tape, false);
        let xv = tape.constant(x.clone());
        let amp_arg = amplifier_on.then_some((&self.amplifier, amp.as_slice()));
        let f = self.encoder.features_on(&mut tape, &enc, amp_arg, xv)?;
        Ok(tape.value(f).clone())
    }

    /// Class probabilities from features.
    pub fn classify(&self, features: &Tensor) -> Result<Tensor> {
        classify_with(&self.encoder, &self.encoder.params, features)
    }

    pub fn predict(&self, x: &Tensor, amplifier_on: bool) -> Result<Tensor> {
        self.classify(&self.features(x, amplifier_on)?)
    }

    pub fn extract_domain_embeddings(&self, features: &Tensor, batch: usize) -> Result<EmbeddingSet> {
        let mut tape = Tape::new();
        let vars = self.extractor.params.bind(&mut tape, false);
        let f = tape.constant(features.clone());
        let e = self.extractor.embed_on(&mut tape, &vars, f)?;
        EmbeddingSet::from_tensor(tape.value(e), batch)
    }

    /// Features and domain embeddings of a batch in one pass.
    pub fn embed(&self, x: &Tensor, amplifier_on: bool, batch: usize) -> Result<(Tensor, EmbeddingSet)> {
        let f = self.features(x, amplifier_on)?;
        let e = self.extract_domain_embeddings(&f, batch)?;
        Ok((f, e))
    }

    pub fn to_checkpoint(&self, seed: u64, source_error_pct: Option<f64>) -> Checkpoint {
        Checkpoint {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            seed,
            config: self.config.clone(),
            source_error_pct,
            encoder: self.encoder.params.to_named(),
            amplifier: self.amplifier.params.to_named(),
            extractor: self.extractor.params.to_named(),
            discriminator: self.discriminator.params.to_named(),
        }
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        if ck.format != CHECKPOINT_FORMAT || ck.version != CHECKPOINT_VERSION {
            return Err(Error::config(format!(
                "unsupported checkpoint {} v{}",
                ck.format, ck.version
            )));
        }
        let mut m = Model::new(ck.config.clone(), ck.seed)?;
        m.encoder.params.load_named(&ck.encoder)?;
        m.amplifier.params.load_named(&ck.amplifier)?;
        m.extractor.params.load_named(&ck.extractor)?;
        m.discriminator.params.load_named(&ck.discriminator)?;
        Ok(m)
    }
}

/// Class probabilities from features using an arbitrary parameter set laid
/// out like `encoder` (the student's own, or the teacher's).
pub fn classify_with(encoder: &EncoderNet, params: &ParamSet, features: &Tensor) -> Result<Tensor> {
    let mut tape = Tape::new();
    let vars = params.bind(&mut tape, false);
    let f = tape.constant(features.clone());
    let p = encoder.probs_on(&mut tape, &vars, f)?;
    Ok(tape.value(p).clone())
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        let s = serde_json::to_string(self)?;
        fs::write(path, s).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&s)?)
    }
}
