use fedgame::config::RunConfig;
use fedgame::exec::Rayon;
use fedgame::experiments::{run_plan, PlanKind};

#[test]
fn symmetric_peers_have_no_systematic_gap() {
    let mut cfg = RunConfig::default();
    cfg.experiment.peer_deltas = vec![0.5, 0.5];
    cfg.experiment.seeds = 1;
    let n_test = cfg.data.test_samples as f64;
    let run = run_plan(PlanKind::PeerGap, &cfg, &Rayon).unwrap();
    let file = &run.traces[0].file;
    let final_epoch = file
        .metric("local_test_accuracy")
        .map(|r| r.epoch)
        .max()
        .unwrap();
    let acc: Vec<f64> = (0..2)
        .map(|k| {
            file.metric("local_test_accuracy")
                .find(|r| r.epoch == final_epoch && r.agent_id == Some(k))
                .unwrap()
                .value
        })
        .collect();
    let p = 0.5 * (acc[0] + acc[1]);
    // Two independent binomial estimates on n_test points.
    let sd = (2.0 * p * (1.0 - p) / n_test).sqrt();
    assert!(
        (acc[0] - acc[1]).abs() < 2.0 * sd,
        "accuracies {acc:?}, 2 sd = {}",
        2.0 * sd
    );

    let gaps: Vec<f64> = file.metric("loss_gap").map(|r| r.value).collect();
    let mean = gaps.iter().sum::<f64>() / gaps.len() as f64;
    let spread =
        (gaps.iter().map(|g| (g - mean).powi(2)).sum::<f64>() / (gaps.len() - 1) as f64).sqrt();
    assert!(
        mean.abs() < 2.0 * spread.max(1e-12) / (gaps.len() as f64).sqrt() + 1e-3,
        "mean gap {mean}, sd {spread}"
    );
}

#[test]
fn unequal_peers_separate() {
    let mut cfg = RunConfig::default();
    cfg.experiment.seeds = 1;
    cfg.hyper.rounds_T = 10;
    let run = run_plan(PlanKind::PeerGap, &cfg, &Rayon).unwrap();
    let file = &run.traces[0].file;
    let gaps: Vec<f64> = file.metric("loss_gap").map(|r| r.value).collect();
    assert_eq!(gaps.len(), 10);
    assert!(gaps[5..].iter().all(|&g| g > 0.0), "{gaps:?}");
    for (g, b) in gaps.iter().zip(file.metric("gap_bound").map(|r| r.value)) {
        assert!(g.abs() <= b);
    }
}
