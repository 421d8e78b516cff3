//! Online adaptation behaviour on a pretrained source model.

mod common;

use ctta_core::adaptation::{AdaptationConfig, Adapter};
use ctta_core::harness::{pretrain_source, HarnessConfig, Pretrained};
use ctta_core::kernels::EmbeddingSet;
use ctta_core::model::self_training_loss;
use ctta_core::numerics::{OptimizerKind, ParamSet, Tape, Tensor};
use ctta_core::stream::{BaseTask, DomainSpec, Family, ScenarioConfig};

fn source(seed: u64) -> Pretrained {
    let cfg = HarnessConfig::default();
    let task = BaseTask {
        seed,
        ..BaseTask::default()
    };
    pretrain_source(&task, &cfg.model, &cfg.pretrain).unwrap()
}

fn scenario(seed: u64, domains: Vec<DomainSpec>) -> ScenarioConfig {
    let mut s = ScenarioConfig::standard(5, 1).with_seed(seed);
    s.domains = domains;
    s
}

fn adapter(p: &Pretrained, seed: u64) -> Adapter {
    let cfg = AdaptationConfig {
        seed,
        ..AdaptationConfig::default()
    };
    Adapter::new(p.model.clone(), cfg).unwrap()
}

#[test]
fn stationary_stream_raises_no_detections() {
    for seed in 0..3 {
        let p = source(seed);
        let mut a = adapter(&p, seed);
        let s = scenario(seed, vec![DomainSpec::new(Family::AnisotropicScale, 2, 40)]);
        for item in s.stream().unwrap() {
            let item = item.unwrap();
            let (_, rec) = a.adapt_batch(&item.batch.inputs, Some(&item.batch.labels)).unwrap();
            if item.index >= 2 {
                assert!(!rec.detected, "seed {seed}: detection at batch {}", item.index);
            }
        }
    }
}

#[test]
fn hard_switch_is_detected_on_the_switch_batch() {
    let p = source(0);
    let mut a = adapter(&p, 0);
    let s = scenario(
        0,
        vec![
            DomainSpec::new(Family::AnisotropicScale, 1, 10),
            DomainSpec::new(Family::CoordinateDropout, 5, 5),
        ],
    );
    let mut flagged = Vec::new();
    for item in s.stream().unwrap() {
        let item = item.unwrap();
        let (_, rec) = a.adapt_batch(&item.batch.inputs, None).unwrap();
        if rec.detected {
            flagged.push(item.index);
        }
    }
    assert!(flagged.contains(&10), "detections at {flagged:?}");
}

/// Softmax regression on frozen embeddings; held-out accuracy.
fn probe_accuracy(train: &EmbeddingSet, ytr: &[usize], test: &EmbeddingSet, yte: &[usize], k: usize) -> f64 {
    let d = train.dim();
    let mut ps = ParamSet::new();
    ps.push("w", Tensor::zeros(&[d, k]));
    ps.push("b", Tensor::zeros(&[1, k]));
    let x = train.to_tensor();
    let mut onehot = Tensor::zeros(&[ytr.len(), k]);
    for (i, &y) in ytr.iter().enumerate() {
        onehot.data_mut()[i * k + y] = 1.0;
    }
    for _ in 0..400 {
        let mut tape = Tape::new();
        let v = ps.bind(&mut tape, true);
        let xv = tape.constant(x.clone());
        let z = tape.matmul(xv, v[0]).unwrap();
        let z = tape.add(z, v[1]).unwrap();
        let p = tape.softmax_rows(z).unwrap();
        let l = self_training_loss(&mut tape, p, &onehot).unwrap();
        let g = tape.backward(l).unwrap();
        ps.absorb_grads(&g, &v).unwrap();
        ps.step(0.05, OptimizerKind::AdaptiveMoment).unwrap();
    }
    let (w, b) = (ps.get(0), ps.get(1));
    let logits = test.to_tensor().matmul(w).unwrap();
    let correct = logits
        .iter_rows()
        .zip(yte)
        .filter(|(row, &y)| {
            let scores: Vec<f64> = row.iter().zip(b.data()).map(|(a, c)| a + c).collect();
            common::argmax(&scores) == y
        })
        .count();
    correct as f64 / yte.len() as f64
}

/// Linear probes on frozen embeddings after a two-domain run, for every
/// family pair. The domain probe wins on about three in five pairs here,
/// so this is kept for measurement rather than gating.
#[test]
#[ignore = "holds for only some family pairs on this model"]
fn embeddings_carry_domain_over_class_all_pairs() {
    let mut failures = Vec::new();
    for (i, f1) in Family::ALL.into_iter().enumerate() {
        for f2 in Family::ALL.into_iter().skip(i + 1) {
            for seed in 0..2 {
                let (d, c) = probe_pair(seed, f1, f2);
                println!("{f1} / {f2}, seed {seed}: domain {d:.3}, class {c:.3}");
                if d <= c {
                    failures.push(format!("{f1}/{f2}@{seed}"));
                }
            }
        }
    }
    assert!(failures.is_empty(), "class probe wins on {failures:?}");
}

fn probe_pair(seed: u64, f1: Family, f2: Family) -> (f64, f64) {
    let p = source(seed);
    let mut a = adapter(&p, seed);
    let s = scenario(
        seed,
        vec![
            DomainSpec::new(f1, 5, 15),
            DomainSpec::new(f2, 5, 15),
        ],
    );
    let items: Vec<_> = s.stream().unwrap().map(|i| i.unwrap()).collect();
    for item in &items {
        a.adapt_batch(&item.batch.inputs, None).unwrap();
    }
    // Re-embed everything under the final, frozen parameters.
    let (mut rows, mut dom, mut cls) = (Vec::new(), Vec::new(), Vec::new());
    for item in &items {
        let e = a.embed(&item.batch.inputs, item.index).unwrap();
        for (r, &y) in e.iter().zip(&item.batch.labels) {
            rows.push(r.to_vec());
            dom.push(usize::from(item.domain.name != items[0].domain.name));
            cls.push(y);
        }
    }
    let half: Vec<usize> = (0..rows.len()).filter(|i| i % 2 == 0).collect();
    let rest: Vec<usize> = (0..rows.len()).filter(|i| i % 2 == 1).collect();
    let pick = |idx: &[usize]| {
        let r: Vec<Vec<f64>> = idx.iter().map(|&i| rows[i].clone()).collect();
        EmbeddingSet::from_rows(rows[0].len(), &r, 0).unwrap()
    };
    let sub = |v: &[usize], idx: &[usize]| idx.iter().map(|&i| v[i]).collect::<Vec<_>>();
    let (tr, te) = (pick(&half), pick(&rest));
    let dom_acc = probe_accuracy(&tr, &sub(&dom, &half), &te, &sub(&dom, &rest), 2);
    let cls_acc = probe_accuracy(&tr, &sub(&cls, &half), &te, &sub(&cls, &rest), 4);
    (dom_acc, cls_acc)
}

#[test]
fn losses_stay_finite_over_the_standard_scenario() {
    let p = source(1);
    let mut a = adapter(&p, 1);
    let s = ScenarioConfig::standard(5, 20).with_seed(1);
    for item in s.stream().unwrap() {
        let item = item.unwrap();
        let (probs, rec) = a.adapt_batch(&item.batch.inputs, Some(&item.batch.labels)).unwrap();
        assert!(rec.losses_finite(), "batch {}", item.index);
        assert!(probs.all_finite());
        assert!(a.queue.len() <= a.queue.capacity());
    }
}
