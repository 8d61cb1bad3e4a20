use std::collections::BTreeMap;
use std::sync::Arc;

use kayra_core::cascade::CascadeParams;
use kayra_core::evalstats::{evaluate_spread, EvalConfig, MatchOutcome};
use kayra_core::pipeline::{in_process, run_cascade, JobState};
use kayra_core::protocol::{GroundTruthRegistry, OracleModels, OracleNoise, StubModels};
use kayra_core::synthgen::{generate_spread, SyntheticSpec};

fn spec(seed: u64, overlap_pairs: usize) -> SyntheticSpec {
    SyntheticSpec {
        seed,
        image_id: format!("e2e-{seed}-{overlap_pairs}"),
        overlap_pairs,
        ..Default::default()
    }
}

#[test]
fn oracle_reproduces_ground_truth() {
    let registry = Arc::new(GroundTruthRegistry::new());
    let spreads: Vec<_> = (0..3).map(|s| generate_spread(&spec(s, 1)).unwrap()).collect();
    for (_, gt) in &spreads {
        registry.register(gt.clone());
    }
    let backends = in_process(OracleModels::new(registry, OracleNoise::default()));
    for (img, gt) in &spreads {
        let run = run_cascade(&gt.image_id, img, &CascadeParams::default(), &backends);
        assert_eq!(run.state, JobState::Done);
        let records = evaluate_spread(gt, &run.annotations, &EvalConfig::default(), &BTreeMap::new()).unwrap();
        for r in &records {
            assert!(matches!(r.outcome, MatchOutcome::Correct(_)), "{r:?}");
            assert!(r.class_correct && r.rotation_correct, "{r:?}");
        }
    }
}

#[test]
fn stubs_segment_disjoint_spreads() {
    let params = CascadeParams::default();
    let backends = in_process(StubModels::new(params.clone()));
    for seed in 0..3 {
        let (img, gt) = generate_spread(&spec(seed, 0)).unwrap();
        let run = run_cascade(&gt.image_id, &img, &params, &backends);
        assert_eq!(run.state, JobState::Done);
        let records = evaluate_spread(&gt, &run.annotations, &EvalConfig::default(), &BTreeMap::new()).unwrap();
        let bad: Vec<_> = records.iter().filter(|r| !matches!(r.outcome, MatchOutcome::Correct(_))).collect();
        assert!(bad.is_empty(), "{bad:?}");
    }
}

#[test]
fn stubs_merge_exactly_the_overlapping_pairs() {
    let params = CascadeParams::default();
    let backends = in_process(StubModels::new(params.clone()));
    for seed in 0..3 {
        let (img, gt) = generate_spread(&spec(seed, 3)).unwrap();
        let run = run_cascade(&gt.image_id, &img, &params, &backends);
        let records = evaluate_spread(&gt, &run.annotations, &EvalConfig::default(), &BTreeMap::new()).unwrap();
        let involved: Vec<u32> = gt.overlap_pairs.iter().flatten().copied().collect();
        for r in &records {
            if involved.contains(&r.gt_id) {
                assert!(matches!(r.outcome, MatchOutcome::MergedWithOther(_)), "{r:?}");
            } else {
                assert!(matches!(r.outcome, MatchOutcome::Correct(_)), "{r:?}");
            }
        }
    }
}
