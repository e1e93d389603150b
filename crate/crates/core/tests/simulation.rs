use tsproto::sim::{
    feature_errors, report_metrics, run_distillation, sigma_auc, synth_generate, SimConfig,
};
use tsproto::Hyperparams;

fn small() -> SimConfig {
    SimConfig {
        n_per_class: 30,
        dim_t: 6,
        dim_s: 8,
        epochs: 4,
        steps_per_epoch: 5,
        ..SimConfig::default()
    }
}

#[test]
fn traces_are_bit_identical() {
    let cfg = small();
    let set = synth_generate(&cfg).unwrap();
    let h = Hyperparams::default();
    let a = run_distillation(&set, &h, &cfg).unwrap();
    let b = run_distillation(&set, &h, &cfg).unwrap();
    assert_eq!(serde_json::to_vec(&a).unwrap(), serde_json::to_vec(&b).unwrap());
}

#[test]
fn teacher_is_never_modified() {
    let cfg = small();
    let set = synth_generate(&cfg).unwrap();
    let before: Vec<u64> = set.records.iter().flat_map(|r| r.f_t.iter().map(|v| v.to_bits())).collect();
    let trace = run_distillation(&set, &Hyperparams::default(), &cfg).unwrap();
    let after: Vec<u64> = set.records.iter().flat_map(|r| r.f_t.iter().map(|v| v.to_bits())).collect();
    assert_eq!(before, after);
    assert_ne!(
        trace.final_student,
        set.records.iter().map(|r| r.f_s.clone()).collect::<Vec<_>>()
    );
}

#[test]
fn frozen_run_reports_unit_reduction() {
    let cfg = SimConfig {
        learning_rate: 0.0,
        ..small()
    };
    let set = synth_generate(&cfg).unwrap();
    let trace = run_distillation(&set, &Hyperparams::default(), &cfg).unwrap();
    let report = report_metrics(&trace, &set).unwrap();
    assert_eq!(report.discrepancy_reduction, Some(1.0));
    assert!(report.loss_curve.windows(2).all(|w| w[0] == w[1]));
}

#[test]
fn epoch_count_and_refresh_events() {
    let cfg = small();
    let set = synth_generate(&cfg).unwrap();
    let every = run_distillation(&set, &Hyperparams::default(), &cfg).unwrap();
    assert_eq!(every.epochs.len(), cfg.epochs);
    assert_eq!(every.refresh_count, cfg.epochs);
    let once = Hyperparams {
        refresh_period: cfg.epochs,
        ..Hyperparams::default()
    };
    let single = run_distillation(&set, &once, &cfg).unwrap();
    assert_eq!(single.refresh_count, 1);
    assert_eq!(single.epochs.iter().filter(|e| e.refreshed).count(), 1);
    let two = Hyperparams {
        refresh_period: 2,
        ..Hyperparams::default()
    };
    assert_eq!(run_distillation(&set, &two, &cfg).unwrap().refresh_count, 2);
}

#[test]
fn report_matches_recomputation_from_trace() {
    let cfg = small();
    let set = synth_generate(&cfg).unwrap();
    let trace = run_distillation(&set, &Hyperparams::default(), &cfg).unwrap();
    let report = report_metrics(&trace, &set).unwrap();

    let mut wins = 0.0;
    let mut pairs = 0.0;
    for (i, si) in trace.final_sigma.iter().enumerate() {
        for (j, sj) in trace.final_sigma.iter().enumerate() {
            if trace.ambiguous[i] == Some(false) && trace.ambiguous[j] == Some(true) {
                pairs += 1.0;
                wins += if si > sj { 1.0 } else if si == sj { 0.5 } else { 0.0 };
            }
        }
    }
    assert!((report.sigma_auc.unwrap() - wins / pairs).abs() < 1e-12);

    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let want = mean(&trace.initial_discrepancy) / mean(&trace.final_discrepancy);
    assert!((report.discrepancy_reduction.unwrap() - want).abs() < 1e-12 * want);

    let errors = feature_errors(&trace, &set).unwrap();
    let clean: Vec<f64> = errors
        .iter()
        .zip(&trace.ambiguous)
        .filter(|(_, a)| **a == Some(false))
        .map(|(e, _)| *e)
        .collect();
    assert!((report.clean_feature_error.unwrap() - mean(&clean)).abs() < 1e-12);
}

#[test]
fn auc_absent_without_ambiguous_instances() {
    let cfg = SimConfig {
        ambiguous_fraction: 0.0,
        ..small()
    };
    let set = synth_generate(&cfg).unwrap();
    let trace = run_distillation(&set, &Hyperparams::default(), &cfg).unwrap();
    assert_eq!(report_metrics(&trace, &set).unwrap().sigma_auc, None);
    assert_eq!(sigma_auc(&[0.3, 0.4], &[Some(false), Some(false)]), None);
}

#[test]
fn training_reduces_loss_on_default_fixture() {
    let cfg = SimConfig::default();
    let set = synth_generate(&cfg).unwrap();
    let trace = run_distillation(&set, &Hyperparams::default(), &cfg).unwrap();
    assert!(trace.final_loss.total < trace.epochs[0].loss.total);
    assert!(trace.final_loss.total.is_finite());
}
