//! Statistical checks on the synthetic source task and shift families.

use ctta_core::harness::{error_pct, pretrain_source, HarnessConfig};
use ctta_core::rng::rng_for;
use ctta_core::stream::{apply_domain, BaseTask, DomainSpec, Family};

#[test]
fn class_means_match_configuration() {
    let task = BaseTask::default();
    let per_class = 10_000;
    let batch = task.sample_source(per_class * task.classes, "monte-carlo", 0).unwrap();
    let mut sums = vec![vec![0.0; task.dim]; task.classes];
    let mut counts = vec![0usize; task.classes];
    for (row, &y) in batch.inputs.iter_rows().zip(&batch.labels) {
        counts[y] += 1;
        for (s, v) in sums[y].iter_mut().zip(row) {
            *s += v;
        }
    }
    let tol = 3.0 * task.noise_std / 100.0;
    for (c, mean) in task.means().iter().enumerate() {
        assert!(counts[c] > per_class / 2);
        for (k, m) in mean.iter().enumerate() {
            let est = sums[c][k] / counts[c] as f64;
            assert!((est - m).abs() <= tol, "class {c} coordinate {k}: {est} vs {m}");
        }
    }
}

#[test]
fn noise_error_nondecreasing_in_severity() {
    let cfg = HarnessConfig::default();
    let seeds = 0..5u64;
    let mut mean_err = vec![0.0; 6];
    for seed in seeds.clone() {
        let task = BaseTask {
            seed,
            ..BaseTask::default()
        };
        let source = pretrain_source(&task, &cfg.model, &cfg.pretrain).unwrap();
        let test = task.test_set();
        for sev in 0..=5u8 {
            let spec = DomainSpec::new(Family::AdditiveNoise, sev, 1);
            let mut rng = rng_for(seed, "severity-sweep", u64::from(sev));
            let shifted = apply_domain(&spec, &test, seed, &mut rng).unwrap();
            mean_err[sev as usize] += error_pct(&source.model, &shifted, false).unwrap() / 5.0;
        }
    }
    for w in mean_err.windows(2) {
        assert!(w[1] >= w[0], "error by severity {mean_err:?}");
    }
    assert!(mean_err[5] > mean_err[0] + 5.0, "{mean_err:?}");
}
