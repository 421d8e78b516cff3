//! Helpers shared by the integration test binaries.

#![allow(dead_code)]

use ctta_core::kernels::{score_j, EmbeddingSet, KernelConfig};
use ctta_core::model::{
    discrimination_loss, invariance_loss, nearest_l1_pairing, self_training_loss, Model, ModelConfig,
};
use ctta_core::numerics::{ParamSet, Tape, Tensor, Var};
use ctta_core::rng::rng_for;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub const FD_STEP: f64 = 1e-5;
pub const FD_TOL: f64 = 1e-4;

pub fn gaussian(rows: usize, cols: usize, scale: f64, rng: &mut ChaCha8Rng) -> Tensor {
    let data = (0..rows * cols)
        .map(|_| scale * rng.sample::<f64, _>(StandardNormal))
        .collect();
    Tensor::new(vec![rows, cols], data).unwrap()
}

pub fn random_set(n: usize, dim: usize, rng: &mut ChaCha8Rng) -> EmbeddingSet {
    EmbeddingSet::from_tensor(&gaussian(n, dim, 1.0, rng), 0).unwrap()
}

pub fn small_model(seed: u64) -> Model {
    let cfg = ModelConfig {
        input_dim: 6,
        classes: 3,
        encoder_layers: 2,
        hidden_width: 8,
        feature_dim: 5,
        bottleneck: 3,
        domain_dim: 4,
        extractor_hidden: 6,
        discriminator_hidden: vec![5],
        extractor_init_scale: 1.0,
    };
    Model::new(cfg, seed).unwrap()
}

/// Relative discrepancy. The 1e-6 floor sits above central-difference
/// round-off (about 1e-11 here), so exact zeros such as dead ReLU units
/// compare cleanly.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

/// Worst relative error between the tape gradient and central differences
/// over every scalar of every tensor in `params`.
///
/// `loss` builds the scalar on a fresh tape from leaves bound to `params`.
pub fn check_params(
    params: &mut [Tensor],
    loss: &dyn Fn(&mut Tape, &[Var]) -> Var,
) -> f64 {
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.leaf(p.clone())).collect();
    let root = loss(&mut tape, &vars);
    let grads = tape.backward(root).unwrap();
    let analytic: Vec<Tensor> = vars.iter().map(|&v| grads.wrt(v)).collect();

    let eval = |params: &[Tensor]| {
        let mut t = Tape::new();
        let vs: Vec<Var> = params.iter().map(|p| t.leaf(p.clone())).collect();
        let r = loss(&mut t, &vs);
        t.value(r).item().unwrap()
    };
    let mut worst = 0.0f64;
    for (pi, g) in analytic.iter().enumerate() {
        for k in 0..g.len() {
            let orig = params[pi].data()[k];
            params[pi].data_mut()[k] = orig + FD_STEP;
            let up = eval(params);
            params[pi].data_mut()[k] = orig - FD_STEP;
            let down = eval(params);
            params[pi].data_mut()[k] = orig;
            let numeric = (up - down) / (2.0 * FD_STEP);
            worst = worst.max(rel_err(g.data()[k], numeric));
        }
    }
    worst
}

fn tensors(ps: &ParamSet) -> Vec<Tensor> {
    (0..ps.len()).map(|i| ps.get(i).clone()).collect()
}

/// Self-training loss through the encoder and head, against one-hot
/// teacher targets.
pub fn grad_self_training(seed: u64) -> f64 {
    let model = small_model(seed);
    let mut rng = rng_for(seed, "fd-self", 0);
    let x = gaussian(7, 6, 1.0, &mut rng);
    let probs = model.predict(&x, false).unwrap();
    let mut targets = Tensor::zeros(&[7, 3]);
    for (i, row) in probs.iter_rows().enumerate() {
        // a mix of agreeing and disagreeing pseudo-labels
        let c = if i % 2 == 0 { argmax(row) } else { (argmax(row) + 1) % 3 };
        targets.data_mut()[i * 3 + c] = 1.0;
    }
    let enc = model.encoder.clone();
    let mut params = tensors(&enc.params);
    check_params(&mut params, &|tape, vars| {
        let xv = tape.constant(x.clone());
        let f = enc.features_on(tape, vars, None, xv).unwrap();
        let p = enc.probs_on(tape, vars, f).unwrap();
        self_training_loss(tape, p, &targets).unwrap()
    })
}

/// Discrimination loss through the extractor and discriminator.
pub fn grad_discrimination(seed: u64) -> f64 {
    let model = small_model(seed);
    let mut rng = rng_for(seed, "fd-dis", 0);
    let feat_cur = gaussian(6, 5, 1.0, &mut rng);
    let p_pre = gaussian(6, 4, 1.0, &mut rng);
    let (ext, disc) = (model.extractor.clone(), model.discriminator.clone());
    let ne = ext.params.len();
    let mut params = tensors(&ext.params);
    params.extend(tensors(&disc.params));
    check_params(&mut params, &|tape, vars| {
        let (ev, dv) = vars.split_at(ne);
        let fc = tape.constant(feat_cur.clone());
        let emb = ext.embed_on(tape, ev, fc).unwrap();
        let d_cur = disc.prob_on(tape, dv, emb).unwrap();
        let pp = tape.constant(p_pre.clone());
        let d_pre = disc.prob_on(tape, dv, pp).unwrap();
        discrimination_loss(tape, d_cur, d_pre).unwrap()
    })
}

/// Invariance loss through encoder and extractor against detached,
/// L1-nearest prototypes.
pub fn grad_invariance(seed: u64) -> f64 {
    let model = small_model(seed);
    let mut rng = rng_for(seed, "fd-inv", 0);
    let x = gaussian(6, 6, 1.0, &mut rng);
    let protos = gaussian(4, 4, 0.5, &mut rng);
    let (_, emb) = model.embed(&x, false, 0).unwrap();
    let proto_set = EmbeddingSet::from_tensor(&protos, 0).unwrap();
    let pairing = nearest_l1_pairing(&emb, &proto_set);
    let paired = protos.select_rows(&pairing);
    let (enc, ext) = (model.encoder.clone(), model.extractor.clone());
    let nenc = enc.params.len();
    let mut params = tensors(&enc.params);
    params.extend(tensors(&ext.params));
    check_params(&mut params, &|tape, vars| {
        let (encv, extv) = vars.split_at(nenc);
        let xv = tape.constant(x.clone());
        let f = enc.features_on(tape, encv, None, xv).unwrap();
        let e = ext.embed_on(tape, extv, f).unwrap();
        let p = tape.constant(paired.clone());
        invariance_loss(tape, e, p).unwrap()
    })
}

/// `|target − d_CD(F, P)|` with respect to the prototypes.
pub fn grad_chamfer_update(seed: u64) -> f64 {
    let mut rng = rng_for(seed, "fd-chamfer", 0);
    let f = gaussian(8, 4, 1.0, &mut rng);
    let p = gaussian(5, 4, 1.0, &mut rng);
    let before = gaussian(8, 4, 1.0, &mut rng);
    let target = ctta_core::kernels::chamfer_distance(
        &EmbeddingSet::from_tensor(&before, 0).unwrap(),
        &EmbeddingSet::from_tensor(&p, 0).unwrap(),
    )
    .unwrap();
    let mut params = vec![p];
    check_params(&mut params, &|tape, vars| {
        let fv = tape.constant(f.clone());
        let d = tape.chamfer(fv, vars[0]).unwrap();
        let t = tape.constant(Tensor::scalar(target));
        let r = tape.sub(t, d).unwrap();
        tape.abs(r).unwrap()
    })
}

pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Best J over every subset of size exactly `n`.
pub fn exhaustive_best(f: &EmbeddingSet, n: usize, cfg: KernelConfig) -> f64 {
    let m = f.len();
    let mut best = f64::NEG_INFINITY;
    let mut idx: Vec<usize> = (0..n).collect();
    loop {
        let p = f.select(&idx);
        best = best.max(score_j(f, Some(&p), cfg).unwrap());
        // next combination in lexicographic order
        let mut i = n;
        loop {
            if i == 0 {
                return best;
            }
            i -= 1;
            if idx[i] < m - n + i {
                idx[i] += 1;
                for j in i + 1..n {
                    idx[j] = idx[j - 1] + 1;
                }
                break;
            }
        }
    }
}
