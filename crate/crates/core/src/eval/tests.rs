use super::*;
use crate::nn::{attach_weight_generator, drop_branches};
use crate::testutil::{toy_arch, toy_dataset, toy_model};

fn fused_toy() -> Model {
    let mut m = drop_branches(&toy_model(3, 1));
    attach_weight_generator(&mut m, 2).unwrap();
    m
}

#[test]
fn accuracy_definition() {
    assert!((accuracy(&[0, 1, 1], &[0, 1, 0]) - 2.0 / 3.0).abs() < 1e-15);
    assert_eq!(accuracy(&[], &[]), 0.0);
}

#[test]
fn grid_average_and_clean_cell() {
    let data = toy_dataset(30, 0);
    let model = fused_toy();
    let v = Victim::new(&model, Path::Fused);
    let r = eval_grid(&v, &data, &AttackSpec::pgd(0.0, 2), &EPS_GRID, 0, 8).unwrap();
    assert_eq!(r.eps, EPS_GRID);
    let mean = r.accuracy.iter().sum::<f64>() / 5.0;
    assert!((r.average - mean).abs() < 1e-12);
    assert!(r.accuracy.iter().all(|a| (0.0..=1.0).contains(a)));
    let idx: Vec<usize> = (0..30).collect();
    let clean = accuracy(&predict(&v, &data.images(&idx)).unwrap(), &data.labels_of(&idx));
    assert_eq!(r.at(0.0), Some(clean));
    assert_eq!(r.method, "pgd");
}

#[test]
fn blackbox_needs_a_distinct_surrogate() {
    let data = toy_dataset(12, 0);
    let defense = fused_toy();
    let dv = Victim::new(&defense, Path::Fused);
    let spec = AttackSpec::pgd(0.0, 2);
    assert!(blackbox_eval(&dv, &dv, &data, &spec, &EPS_GRID, 0, 8).is_err());
    let surrogate = toy_model(2, 9);
    let sv = Victim::new(&surrogate, Path::Branch(1));
    let bb = blackbox_eval(&dv, &sv, &data, &spec, &[0.0, 8.0], 0, 8).unwrap();
    let wb = eval_grid(&dv, &data, &spec, &[0.0], 0, 8).unwrap();
    assert_eq!(bb.at(0.0), wb.at(0.0));
}

#[test]
fn probe_rejects_unknown_layers_with_the_valid_list() {
    let data = toy_dataset(6, 0);
    let model = toy_model(2, 1);
    let e = probe_feature_stats(&model, &data, "stage9.block1.conv1", &own_branches(&[0.0]), 1, 0, 8)
        .unwrap_err()
        .to_string();
    assert!(e.contains("stage2.block1.conv2") && e.contains("stem.conv"), "{e}");
    let far = [ProbePoint { eps: 0.0, branch: 5 }];
    assert!(probe_feature_stats(&model, &data, "stem.conv", &far, 1, 0, 8).is_err());
}

#[test]
fn probe_single_strength_is_trivially_monotone_and_deterministic() {
    let data = toy_dataset(10, 0);
    let model = toy_model(2, 1);
    let layer = model.arch.default_probe();
    let a = probe_feature_stats(&model, &data, &layer, &own_branches(&[0.0]), 1, 0, 4).unwrap();
    assert_eq!(a.means.len(), 1);
    assert_eq!(a.monotonicity_score(), 1.0);
    assert!(a.vars[0].iter().all(|&v| v >= 0.0));
    let pts = own_branches(&[0.0, 8.0]);
    let b = probe_feature_stats(&model, &data, &layer, &pts, 2, 3, 4).unwrap();
    let c = probe_feature_stats(&model, &data, &layer, &pts, 2, 3, 4).unwrap();
    assert_eq!(b, c);
    assert_eq!(b.samples, 10);
}

#[test]
fn identical_branches_drift_continuously() {
    let data = toy_dataset(30, 0);
    let mut model = toy_model(4, 1);
    let copies: Vec<(String, Tensor)> = model
        .params()
        .iter()
        .filter(|(n, _)| n.contains(".branch0."))
        .map(|(n, t)| (n.clone(), t.clone()))
        .collect();
    for (n, t) in copies {
        for k in 1..4 {
            model.set(&n.replace(".branch0.", &format!(".branch{k}.")), t.clone()).unwrap();
        }
    }
    let p = probe_feature_stats(
        &model,
        &data,
        "stem.conv",
        &own_branches(&[0.0, 2.0, 4.0, 8.0]),
        3,
        0,
        10,
    )
    .unwrap();
    let c = p.continuity();
    assert!(c.continuous, "{c:?}");
}

#[test]
fn monotonicity_and_continuity_on_known_statistics() {
    let probe = FeatureStatsProbe {
        layer: "x".into(),
        eps: vec![0.0, 2.0, 4.0, 8.0],
        means: vec![
            vec![0.0, 1.0, 0.0],
            vec![0.1, 0.9, 0.5],
            vec![0.2, 0.8, 0.1],
            vec![0.4, 0.6, 0.2],
        ],
        vars: vec![vec![1.0; 3]; 4],
        samples: 1,
    };
    assert!((probe.monotonicity_score() - 2.0 / 3.0).abs() < 1e-15);
    let c = probe.continuity();
    assert_eq!(c.jumps.len(), 3);
    assert!((c.widest_gap_jump - (0.2 + 0.2 + 0.1) / 3.0).abs() < 1e-12);
    assert!(!c.continuous);
}

#[test]
fn constant_override_gives_a_flat_curve() {
    let data = toy_dataset(12, 0);
    let model = fused_toy();
    let curve = fusion_curve(&model, &data, &EPS_GRID, 2, Some(0.5), 0, 8).unwrap();
    assert!(curve.w1_mean.iter().all(|&m| m == 0.5));
    assert!(curve.w1_std.iter().all(|&s| s == 0.0));
    let live = fusion_curve(&model, &data, &[0.0, 8.0], 2, None, 0, 8).unwrap();
    assert!(live.w1_mean.iter().chain(&live.w1_std).all(|v| (0.0..=1.0).contains(v)));
    assert!(fusion_curve(&toy_model(2, 1), &data, &[0.0], 1, None, 0, 8).is_err());
}

#[test]
fn spearman_examples() {
    let x = [0.0, 1.0, 2.0, 4.0, 8.0];
    assert!((spearman(&x, &[0.1, 0.2, 0.3, 0.9, 1.0]) - 1.0).abs() < 1e-12);
    assert!((spearman(&x, &[5.0, 4.0, 3.0, 2.0, 1.0]) + 1.0).abs() < 1e-12);
    assert_eq!(spearman(&x, &[1.0; 5]), 0.0);
    // d = (1, -1, 0, 0, 0): 1 - 6*2 / (5*24)
    assert!((spearman(&x, &[2.0, 1.0, 3.0, 4.0, 5.0]) - 0.9).abs() < 1e-12);
    assert_eq!(ranks(&[3.0, 1.0, 3.0]), [2.5, 1.0, 2.5]);
}

#[test]
fn adaptive_sweep_reports_the_minimum() {
    let data = toy_dataset(12, 0);
    let model = fused_toy();
    let v = Victim::new(&model, Path::Fused);
    let s = adaptive_sweep(&v, &data, 8.0, 2, 0, 8).unwrap();
    assert_eq!(s.rows.len(), 7);
    let min = s.rows.iter().map(|r| r.1).fold(1.0, f64::min);
    assert_eq!(s.min_accuracy, min);
    assert!(s.rows.iter().any(|r| r.0 == s.worst_ratio && r.1 == min));
    let plain = adaptive_sweep_with(&v, &data, 8.0, 2, &[(1.0, 0.0)], 0, 8).unwrap();
    let pgd = attacked_accuracy(&v, &data, &AttackSpec::pgd(8.0, 2), 0, 8).unwrap();
    assert_eq!(plain.min_accuracy, pgd);
}

fn toy_ablation() -> AblationConfig {
    AblationConfig {
        arch: toy_arch(2),
        stage1: StageOneConfig {
            epochs: 1,
            decay_epochs: vec![],
            batch_size: 16,
            attack_steps: 1,
            ..StageOneConfig::new(2).unwrap()
        },
        stage2: StageTwoConfig {
            epochs: 1,
            decay_epochs: vec![],
            batch_size: 16,
            attack_steps: 1,
            ..StageTwoConfig::new(EPS_GRID.to_vec())
        },
        eval_steps: 1,
        eps_grid: vec![0.0, 8.0],
        seed: 4,
        batch_size: 16,
    }
}

#[test]
fn ablation_rows_replay_exactly() {
    let train = toy_dataset(16, 0);
    let test = toy_dataset(12, 1);
    let cfg = toy_ablation();
    assert!(k_ablation(&train, &test, &[4], &cfg, &mut ()).is_err());
    let a = k_ablation(&train, &test, &[2, 3], &cfg, &mut ()).unwrap();
    let b = k_ablation(&train, &test, &[2, 3], &cfg, &mut ()).unwrap();
    assert_eq!(a.iter().map(|r| r.k).collect::<Vec<_>>(), [2, 3]);
    for (x, y) in a.iter().zip(&b) {
        assert_eq!(x.report.accuracy, y.report.accuracy);
        assert_eq!(x.report.model_id, y.report.model_id);
    }
}
