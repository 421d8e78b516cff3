//! Acceptance run: every criterion at its stated tolerance, one PASS/FAIL
//! line each. Lines go straight to stdout so they show without
//! `--nocapture`; the test fails if any criterion fails.

mod common;

use std::collections::BTreeMap;
use std::io::Write;
use std::path::PathBuf;
use std::time::Instant;

use common::{
    exhaustive_best, grad_chamfer_update, grad_discrimination, grad_invariance, grad_self_training,
    random_set, FD_TOL,
};
use ctta_core::adaptation::{AdaptationConfig, Adapter};
use ctta_core::harness::{
    pretrain_source, run_generalization, run_scenario, BaselineKind, HarnessConfig, RunOptions,
};
use ctta_core::kernels::{
    chamfer_distance, greedy_select, median_heuristic_gamma, mmd_squared, score_j, EmbeddingSet,
};
use ctta_core::model::{loss_self, Checkpoint, Model};
use ctta_core::numerics::ParamSet;
use ctta_core::rng::rng_for;
use ctta_core::stream::{Family, ScenarioConfig};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn scenario_file(name: &str) -> ScenarioConfig {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../scenarios").join(name);
    ScenarioConfig::from_file(&path).unwrap()
}

/// Source checkpoints per task seed, pretrained once.
struct Sources {
    cfg: HarnessConfig,
    cache: BTreeMap<u64, Checkpoint>,
}

impl Sources {
    fn get(&mut self, scenario: &ScenarioConfig) -> Checkpoint {
        let cfg = &self.cfg;
        self.cache
            .entry(scenario.task.seed)
            .or_insert_with(|| {
                pretrain_source(&scenario.task, &cfg.model, &cfg.pretrain)
                    .unwrap()
                    .checkpoint()
            })
            .clone()
    }

    fn mean_error(&mut self, scenario: &ScenarioConfig, cfg: &HarnessConfig, b: BaselineKind) -> f64 {
        let ck = self.get(scenario);
        run_scenario(&ck, scenario, cfg, b, RunOptions::default())
            .unwrap()
            .mean_error_pct
    }
}

fn c1_selection_oracle() -> Outcome {
    let t0 = Instant::now();
    let (mut exact, mut bound_ok) = (0, 0);
    for seed in 0..100u64 {
        let mut rng = rng_for(seed, "oracle", 0);
        let m = 4 + (seed as usize % 7);
        let n = 1 + (seed as usize % 3);
        let f = random_set(m, 16, &mut rng);
        let cfg = median_heuristic_gamma(&f).unwrap();
        let sel = greedy_select(&f, n, cfg).unwrap();
        let greedy = score_j(&f, Some(&sel.prototypes), cfg).unwrap();
        let best = exhaustive_best(&f, n, cfg);
        if greedy >= (1.0 - (-1.0f64).exp()) * best {
            bound_ok += 1;
        }
        if (best - greedy).abs() <= 1e-12 {
            exact += 1;
        }
    }
    let secs = t0.elapsed().as_secs_f64();
    outcome(
        bound_ok == 100 && exact >= 90 && secs < 10.0,
        format!("bound held {bound_ok}/100, exact optimum {exact}/100 (need >= 90), {secs:.2}s"),
    )
}

fn c2_analytic_values() -> Outcome {
    let mut rng = rng_for(2, "analytic", 0);
    let f = random_set(12, 5, &mut rng);
    let a = random_set(9, 5, &mut rng);
    let cfg = median_heuristic_gamma(&f).unwrap();
    let j_empty = score_j(&f, None, cfg).unwrap();
    let mmd_self = mmd_squared(&f, &f, cfg).unwrap();
    let cd_self = chamfer_distance(&a, &a).unwrap();

    let mut model = Model::new(HarnessConfig::default().model, 0).unwrap();
    zero(&mut model.discriminator.params);
    let e1 = random_set(6, model.config.domain_dim, &mut rng);
    let e2 = random_set(6, model.config.domain_dim, &mut rng);
    let dis = model.discriminator.loss(&e1, &e2).unwrap();

    let mut onehot = vec![0.0; 10];
    onehot[3] = 1.0;
    let ls = loss_self(&[0.1; 10], &onehot).unwrap();

    let checks = [
        j_empty == 0.0,
        mmd_self.abs() <= 1e-12,
        cd_self == 0.0,
        (dis - 2.0 * 2f64.ln()).abs() <= 1e-9,
        (ls - 10f64.ln() / 10.0).abs() <= 1e-9,
    ];
    outcome(
        checks.iter().all(|&c| c),
        format!(
            "J(empty)={j_empty}, MMD2(F,F)={mmd_self:e}, d_CD(A,A)={cd_self}, L_dis(D=0.5)={dis:.12}, L_self={ls:.12}"
        ),
    )
}

fn zero(ps: &mut ParamSet) {
    for i in 0..ps.len() {
        ps.get_mut(i).data_mut().fill(0.0);
    }
}

fn c3_gradient_suite() -> Outcome {
    let t0 = Instant::now();
    let suites: [(&str, fn(u64) -> f64); 4] = [
        ("L_self", grad_self_training),
        ("L_dis", grad_discrimination),
        ("L_inv", grad_invariance),
        ("L_update", grad_chamfer_update),
    ];
    let mut worst = Vec::new();
    let mut pass = true;
    for (name, f) in suites {
        let w = (0..20).map(f).fold(0.0f64, f64::max);
        pass &= w <= FD_TOL;
        worst.push(format!("{name} {w:.1e}"));
    }
    let secs = t0.elapsed().as_secs_f64();
    outcome(
        pass && secs < 30.0,
        format!("worst relative error: {}; {secs:.2}s", worst.join(", ")),
    )
}

fn c4_freeze_contracts(src: &mut Sources) -> Outcome {
    let scenario = ScenarioConfig::standard(5, 10).with_seed(4);
    let ck = src.get(&scenario);
    let model = Model::from_checkpoint(&ck).unwrap();
    let cfg = AdaptationConfig {
        seed: 4,
        ..AdaptationConfig::default()
    };
    let mut a = Adapter::new(model, cfg).unwrap();
    let (mut s1_ok, mut s2_ok, mut n) = (true, true, 0);
    for item in scenario.stream().unwrap() {
        let x = item.unwrap().batch.inputs;
        if n == 0 {
            a.cold_start(&x).unwrap();
        }
        let enc = a.model.encoder.params.clone();
        a.step1(&x).unwrap();
        s1_ok &= enc.same_values(&a.model.encoder.params);

        let (amp, ext, disc) = (
            a.model.amplifier.params.clone(),
            a.model.extractor.params.clone(),
            a.model.discriminator.params.clone(),
        );
        a.step2(&x).unwrap();
        s2_ok &= amp.same_values(&a.model.amplifier.params)
            && ext.same_values(&a.model.extractor.params)
            && disc.same_values(&a.model.discriminator.params);
        n += 1;
    }
    outcome(
        s1_ok && s2_ok && n == 50,
        format!("{n} batches; step1 left encoder/head bit-identical: {s1_ok}; step2 left extractor/amplifier/discriminator bit-identical: {s2_ok}"),
    )
}

fn inter_domain_chamfer(a: &Adapter, x1: &ctta_core::numerics::Tensor, x2: &ctta_core::numerics::Tensor) -> f64 {
    let e1: EmbeddingSet = a.embed(x1, 0).unwrap();
    let e2: EmbeddingSet = a.embed(x2, 1).unwrap();
    chamfer_distance(&e1, &e2).unwrap()
}

fn c5_chamfer_shrinks(src: &mut Sources, cfg: &HarnessConfig) -> Outcome {
    let t0 = Instant::now();
    let base = scenario_file("two-domain.toml");
    let mut wins = 0;
    let mut rows = Vec::new();
    for seed in 0..5 {
        let scenario = base.with_seed(seed);
        let ck = src.get(&scenario);
        let model = Model::from_checkpoint(&ck).unwrap();
        let mut acfg = BaselineKind::Full.configure(&cfg.adaptation);
        acfg.seed = seed;
        let mut a = Adapter::new(model, acfg).unwrap();
        // First batch of each domain, fixed for both measurements.
        let items: Vec<_> = scenario.stream().unwrap().map(|i| i.unwrap()).collect();
        let first_b = items.iter().find(|i| i.change).unwrap();
        let (x1, x2) = (items[0].batch.inputs.clone(), first_b.batch.inputs.clone());
        let start = inter_domain_chamfer(&a, &x1, &x2);
        for item in &items {
            a.adapt_batch(&item.batch.inputs, None).unwrap();
        }
        let end = inter_domain_chamfer(&a, &x1, &x2);
        if end < start {
            wins += 1;
        }
        rows.push(format!("s{seed} {start:.4}->{end:.4}"));
    }
    let secs = t0.elapsed().as_secs_f64();
    outcome(
        wins >= 4 && secs < 120.0,
        format!("decreased in {wins}/5 seeds ({}); {secs:.1}s", rows.join(", ")),
    )
}

fn c6_prototype_mmd(src: &mut Sources, cfg: &HarnessConfig) -> Outcome {
    let scenario = scenario_file("standard.toml").with_seed(6);
    let ck = src.get(&scenario);
    let mut cfg = cfg.clone();
    cfg.adaptation.prototype_diagnostics = true;
    let report = run_scenario(&ck, &scenario, &cfg, BaselineKind::Full, RunOptions::default()).unwrap();
    let pairs: Vec<(f64, f64)> = report
        .batches
        .iter()
        .filter_map(|r| Some((r.prototype_mmd_before?, r.prototype_mmd_after?)))
        .collect();
    let n = pairs.len() as f64;
    let before = pairs.iter().map(|p| p.0).sum::<f64>() / n;
    let after = pairs.iter().map(|p| p.1).sum::<f64>() / n;
    outcome(
        !pairs.is_empty() && after < before,
        format!("mean over {} batches: updated {after:.6e} vs pre-update {before:.6e}", pairs.len()),
    )
}

fn c7_ordering(src: &mut Sources, cfg: &HarnessConfig) -> Outcome {
    let t0 = Instant::now();
    let base = scenario_file("standard.toml");
    let bls = [BaselineKind::Full, BaselineKind::SelfTrainingOnly, BaselineKind::SourceOnly];
    let mut per_seed = Vec::new();
    for seed in 0..5 {
        let scenario = base.with_seed(seed);
        per_seed.push(bls.map(|b| src.mean_error(&scenario, cfg, b)));
    }
    let mean = |k: usize| per_seed.iter().map(|r| r[k]).sum::<f64>() / 5.0;
    let (full, selft, source) = (mean(0), mean(1), mean(2));
    let wins = per_seed.iter().filter(|r| r[0] < r[2]).count();
    let secs = t0.elapsed().as_secs_f64();
    outcome(
        full < selft && selft < source && wins >= 4 && secs < 600.0,
        format!(
            "mean error full {full:.3}, self-training-only {selft:.3}, source-only {source:.3}; full beats source in {wins}/5 seeds; {secs:.1}s"
        ),
    )
}

fn c8_leave_one_out(src: &mut Sources, cfg: &HarnessConfig) -> Outcome {
    let base = scenario_file("standard.toml");
    let mut wins = 0;
    let mut rows = Vec::new();
    for seed in 0..5 {
        let mut held = [0.0; 2];
        for (k, b) in [BaselineKind::Full, BaselineKind::SourceOnly].into_iter().enumerate() {
            for fold in Family::ALL {
                let mut s = base.with_seed(seed);
                s.name = format!("leave-out-{fold}");
                let (out, keep): (Vec<_>, Vec<_>) = s.domains.drain(..).partition(|d| d.family == fold);
                s.domains = keep;
                s.held_out = out;
                let ck = src.get(&s);
                let r = run_generalization(&ck, &s, cfg, b, RunOptions::default()).unwrap();
                held[k] += r.generalization_mean_error_pct.unwrap() / Family::ALL.len() as f64;
            }
        }
        if held[0] < held[1] {
            wins += 1;
        }
        rows.push(format!("s{seed} {:.2}/{:.2}", held[0], held[1]));
    }
    outcome(
        wins >= 4,
        format!("held-out mean error full/source: {}; full lower in {wins}/5 seeds", rows.join(", ")),
    )
}

fn c9_stability(src: &mut Sources, cfg: &HarnessConfig) -> Outcome {
    let base = scenario_file("standard.toml");
    let sweep = |src: &mut Sources, set: &dyn Fn(&mut HarnessConfig)| {
        let mut c = cfg.clone();
        set(&mut c);
        (0..3)
            .map(|seed| src.mean_error(&base.with_seed(seed), &c, BaselineKind::Full))
            .sum::<f64>()
            / 3.0
    };
    let taus: Vec<f64> = [0.02, 0.05, 0.1, 0.15, 0.2]
        .into_iter()
        .map(|t| sweep(src, &|c| c.adaptation.threshold = t))
        .collect();
    let caps: Vec<f64> = [16, 32, 64, 128]
        .into_iter()
        .map(|q| sweep(src, &|c| c.adaptation.queue_capacity = q))
        .collect();
    let spread = |v: &[f64]| {
        v.iter().copied().fold(f64::NEG_INFINITY, f64::max) - v.iter().copied().fold(f64::INFINITY, f64::min)
    };
    let (st, sq) = (spread(&taus), spread(&caps));
    let fmt = |v: &[f64]| v.iter().map(|x| format!("{x:.2}")).collect::<Vec<_>>().join(" ");
    outcome(
        st < 2.0 && sq < 2.0,
        format!(
            "threshold sweep [{}] spread {st:.3}; queue sweep [{}] spread {sq:.3}",
            fmt(&taus),
            fmt(&caps)
        ),
    )
}

fn c10_determinism(src: &mut Sources, cfg: &HarnessConfig) -> Outcome {
    let scenario = scenario_file("standard.toml").with_seed(10);
    let ck = src.get(&scenario);
    let run = || {
        run_scenario(&ck, &scenario, cfg, BaselineKind::Full, RunOptions::default())
            .unwrap()
            .to_json()
            .unwrap()
    };
    let (a, b) = (run(), run());
    outcome(a == b, format!("{} bytes, identical: {}", a.len(), a == b))
}

#[test]
fn acceptance() {
    let cfg = HarnessConfig::default();
    let mut src = Sources {
        cfg: cfg.clone(),
        cache: BTreeMap::new(),
    };
    let results = vec![
        ("1 selection oracle", c1_selection_oracle()),
        ("2 analytic values", c2_analytic_values()),
        ("3 gradient suite", c3_gradient_suite()),
        ("4 freeze contracts", c4_freeze_contracts(&mut src)),
        ("5 inter-domain chamfer", c5_chamfer_shrinks(&mut src, &cfg)),
        ("6 prototype mmd", c6_prototype_mmd(&mut src, &cfg)),
        ("7 baseline ordering", c7_ordering(&mut src, &cfg)),
        ("8 leave-one-out", c8_leave_one_out(&mut src, &cfg)),
        ("9 stability sweeps", c9_stability(&mut src, &cfg)),
        ("10 determinism", c10_determinism(&mut src, &cfg)),
    ];
    let mut out = std::io::stdout().lock();
    let mut failed = Vec::new();
    for (name, o) in &results {
        let tag = if o.pass { "PASS" } else { "FAIL" };
        writeln!(out, "acceptance {tag} criterion {name}: {}", o.detail).unwrap();
        if !o.pass {
            failed.push(*name);
        }
    }
    out.flush().unwrap();
    drop(out);
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
