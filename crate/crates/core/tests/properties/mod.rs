//! Invariant battery driven through the public API. Each property runs a
//! proptest runner and panics with the shrunk counterexample on failure.

use std::collections::HashSet;

use bimem::adapt::{denoise_label, run_adaptation, AdaptConfig, Method};
use bimem::blackbox::{export_predictions, train_source, ExportMode, SourceTraining};
use bimem::data::{gen_shifted_gaussians, GenConfig};
use bimem::eval::{check_partition_identity, Evaluator, PARTITION_TOL};
use bimem::exec::Execution;
use bimem::memory::{
    compute_centroids, sensory_calibration, BiMemState, FlowConfig, LongTermCentroids, MemoryConfig, MemorySlot,
};
use bimem::model::{ClassifierParams, Layout, MomentumModel};
use bimem::numerics::{argmax_label, entropy, reweight_normalize, softmax, ProbVector, PROB_SUM_TOL};
use proptest::prelude::*;
use proptest::test_runner::{Config, TestRunner};

const CASES: u32 = 96;

fn runner() -> TestRunner {
    TestRunner::new(Config {
        cases: CASES,
        failure_persistence: None,
        ..Config::default()
    })
}

fn check<S: Strategy>(name: &str, strategy: S, test: impl Fn(S::Value) -> Result<(), TestCaseError>) {
    if let Err(e) = runner().run(&strategy, test) {
        panic!("property `{name}` failed: {e}");
    }
}

fn prob(classes: usize) -> impl Strategy<Value = ProbVector> {
    prop::collection::vec(-6.0f64..6.0, classes).prop_map(|s| softmax(&s).unwrap())
}

fn slots(classes: usize, dim: usize, len: std::ops::Range<usize>) -> impl Strategy<Value = Vec<MemorySlot>> {
    prop::collection::vec((prop::collection::vec(-3.0f64..3.0, dim), prob(classes)), len).prop_map(|rows| {
        rows.into_iter()
            .enumerate()
            .map(|(i, (feature, prob))| MemorySlot {
                sample_id: i as u64,
                feature,
                prob,
            })
            .collect()
    })
}

fn flows() -> impl Strategy<Value = FlowConfig> {
    prop::array::uniform6(any::<bool>()).prop_map(|b| FlowConfig {
        sm_to_st: b[0],
        sm_to_lt: b[1],
        st_to_lt: b[2],
        sm_from_st: b[3],
        sm_from_lt: b[4],
        st_from_lt: b[5],
    })
}

fn valid(p: &ProbVector) -> bool {
    let sum: f64 = p.as_slice().iter().sum();
    (sum - 1.0).abs() <= PROB_SUM_TOL && p.as_slice().iter().all(|v| *v >= 0.0)
}

/// Several batches pushed through a fresh store, with ids kept unique.
fn batches() -> impl Strategy<Value = (Vec<Vec<MemorySlot>>, FlowConfig)> {
    (prop::collection::vec(slots(3, 2, 4..9), 1..8), flows()).prop_map(|(mut bs, f)| {
        let mut next = 0;
        for b in &mut bs {
            for s in b.iter_mut() {
                s.sample_id = next;
                next += 1;
            }
        }
        (bs, f)
    })
}

fn store() -> BiMemState {
    BiMemState::new(MemoryConfig {
        classes: 3,
        dim: 2,
        top_n: 3,
        queue_capacity: 10,
        gamma_prime: 0.7,
    })
    .unwrap()
}

pub fn softmax_is_valid_and_shift_invariant() {
    check(
        "softmax",
        (prop::collection::vec(-50.0f64..50.0, 1..8), -100.0f64..100.0),
        |(s, c)| {
            let p = softmax(&s).unwrap();
            prop_assert!(valid(&p));
            let shifted: Vec<f64> = s.iter().map(|v| v + c).collect();
            let q = softmax(&shifted).unwrap();
            for (a, b) in p.as_slice().iter().zip(q.as_slice()) {
                prop_assert!((a - b).abs() <= 1e-9);
            }
            Ok(())
        },
    );
}

pub fn entropy_is_bounded() {
    check("entropy", (1usize..7).prop_flat_map(prob), |p| {
        let h = entropy(&p);
        prop_assert!(h >= -1e-12 && h <= (p.len() as f64).ln() + 1e-9);
        Ok(())
    });
}

pub fn argmax_ignores_positive_scaling() {
    check(
        "argmax scaling",
        (prop::collection::vec(0.0f64..1.0, 1..8), 1e-6f64..1e6),
        |(v, k)| {
            let scaled: Vec<f64> = v.iter().map(|x| x * k).collect();
            prop_assert_eq!(argmax_label(&v).unwrap(), argmax_label(&scaled).unwrap());
            Ok(())
        },
    );
}

pub fn reweighting_preserves_product_argmax() {
    check(
        "reweight argmax",
        (prob(4), prop::collection::vec(0.01f64..1.0, 4)),
        |(p, w)| {
            let raw: Vec<f64> = p.as_slice().iter().zip(&w).map(|(a, b)| a * b).collect();
            let q = reweight_normalize(&p, &w).unwrap();
            prop_assert!(valid(&q));
            prop_assert_eq!(q.argmax(), argmax_label(&raw).unwrap());
            Ok(())
        },
    );
}

pub fn denoising_ignores_blackbox_scaling() {
    check(
        "denoise scaling",
        (prop::collection::vec((prob(4), prob(4)), 1..16), prop::collection::vec(1e-3f64..1e3, 16)),
        |(pairs, ks)| {
            for ((mem, bb), k) in pairs.iter().zip(&ks) {
                let scaled: Vec<f64> = mem.as_slice().iter().zip(bb.as_slice()).map(|(a, b)| a * b * k).collect();
                prop_assert_eq!(denoise_label(mem, bb), argmax_label(&scaled).unwrap());
            }
            Ok(())
        },
    );
}

pub fn centroids_are_permutation_invariant_and_in_hull() {
    check("centroids", slots(3, 3, 1..20), |s| {
        let a = compute_centroids(&s, 3).unwrap();
        let mut rev = s.clone();
        rev.reverse();
        let b = compute_centroids(&rev, 3).unwrap();
        prop_assert_eq!(&a.counts, &b.counts);
        for c in 0..3 {
            let members: Vec<&MemorySlot> = s.iter().filter(|m| m.prob.argmax() == c).collect();
            for d in 0..3 {
                prop_assert!((a.centroids[c][d] - b.centroids[c][d]).abs() <= 1e-12);
                if members.is_empty() {
                    prop_assert_eq!(a.centroids[c][d], 0.0);
                    continue;
                }
                let lo = members.iter().map(|m| m.feature[d]).fold(f64::INFINITY, f64::min);
                let hi = members.iter().map(|m| m.feature[d]).fold(f64::NEG_INFINITY, f64::max);
                prop_assert!(a.centroids[c][d] >= lo - 1e-12 && a.centroids[c][d] <= hi + 1e-12);
            }
        }
        Ok(())
    });
}

pub fn consolidation_is_convex() {
    check(
        "consolidation",
        (slots(3, 2, 1..10), slots(3, 2, 1..10), 0.0f64..0.999),
        |(first, second, gp)| {
            let mut lt = LongTermCentroids::new(3, 2, gp).unwrap();
            lt.consolidate(&first, &[], &FlowConfig::ALL).unwrap();
            let old: Vec<Option<Vec<f64>>> = (0..3).map(|c| lt.centroid(c).map(<[f64]>::to_vec)).collect();
            let fresh = compute_centroids(&second, 3).unwrap();
            lt.consolidate(&[], &second, &FlowConfig::ALL).unwrap();
            for c in 0..3 {
                match (&old[c], fresh.is_present(c)) {
                    (Some(o), true) => {
                        let now = lt.centroid(c).unwrap();
                        for d in 0..2 {
                            let (lo, hi) = (o[d].min(fresh.centroids[c][d]), o[d].max(fresh.centroids[c][d]));
                            prop_assert!(now[d] >= lo - 1e-12 && now[d] <= hi + 1e-12);
                        }
                    }
                    (Some(o), false) => prop_assert_eq!(lt.centroid(c).unwrap(), o.as_slice()),
                    (None, true) => prop_assert_eq!(lt.centroid(c).unwrap(), fresh.centroids[c].as_slice()),
                    (None, false) => prop_assert!(!lt.is_initialized(c)),
                }
            }
            Ok(())
        },
    );
}

pub fn calibration_weights_are_normalized() {
    check(
        "calibration weights",
        (slots(4, 3, 1..12), prop::collection::vec(-3.0f64..3.0, 3)),
        |(s, f)| {
            let mut lt = LongTermCentroids::new(4, 3, 0.9).unwrap();
            lt.consolidate(&s, &[], &FlowConfig::ALL).unwrap();
            let w = lt.calibration_weights(&f).unwrap().unwrap();
            prop_assert!((w.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
            for (c, v) in w.iter().enumerate() {
                prop_assert!(*v >= 0.0);
                if !lt.is_initialized(c) {
                    prop_assert_eq!(*v, 0.0);
                }
            }
            Ok(())
        },
    );
}

pub fn store_invariants_hold_under_every_flow_mask() {
    check("store invariants", batches(), |(bs, f)| {
        let mut state = store();
        let mut twin = store();
        for b in bs {
            let out = state.step(b.clone(), &f).unwrap();
            prop_assert_eq!(twin.step(b.clone(), &f).unwrap(), out.clone());
            let st = &state.short_term;
            prop_assert!(st.len() <= st.capacity());
            prop_assert_eq!(st.total_enqueued() - st.total_evicted(), st.len() as u64);
            prop_assert_eq!(state.sensory.slots().len(), b.len());
            prop_assert!(out.probs.iter().all(valid));
            prop_assert!(st.slots().all(|s| valid(&s.prob)));
            prop_assert!(state.sensory.slots().iter().all(|s| valid(&s.prob)));
            let ids: HashSet<u64> = st.slots().map(|s| s.sample_id).collect();
            prop_assert_eq!(ids.len(), st.len());
            if f == FlowConfig::NONE {
                prop_assert!(st.is_empty() && !state.long_term.any_initialized());
                prop_assert_eq!(out.probs, b.iter().map(|s| s.prob.clone()).collect::<Vec<_>>());
            }
        }
        prop_assert_eq!(state, twin);
        Ok(())
    });
}

pub fn calibration_is_translation_equivariant() {
    check(
        "translation",
        (slots(3, 2, 3..12), slots(3, 2, 2..8), prop::collection::vec(-5.0f64..5.0, 2), flows()),
        |(history, probe, shift, f)| {
            let moved = |s: &[MemorySlot]| -> Vec<MemorySlot> {
                s.iter()
                    .map(|m| MemorySlot {
                        feature: m.feature.iter().zip(&shift).map(|(a, b)| a + b).collect(),
                        ..m.clone()
                    })
                    .collect()
            };
            let mut lt = LongTermCentroids::new(3, 2, 0.5).unwrap();
            let mut lt_moved = lt.clone();
            lt.consolidate(&history, &[], &FlowConfig::ALL).unwrap();
            lt_moved.consolidate(&moved(&history), &[], &FlowConfig::ALL).unwrap();
            let st = compute_centroids(&history[..history.len() / 2 + 1], 3).unwrap();
            let st_moved = compute_centroids(&moved(&history[..history.len() / 2 + 1]), 3).unwrap();
            for (a, b) in probe.iter().zip(moved(&probe)) {
                let p = sensory_calibration(&a.feature, &lt, &st, &f).unwrap();
                let q = sensory_calibration(&b.feature, &lt_moved, &st_moved, &f).unwrap();
                match (p, q) {
                    (Some(p), Some(q)) => {
                        for (x, y) in p.as_slice().iter().zip(q.as_slice()) {
                            prop_assert!((x - y).abs() <= 1e-9);
                        }
                    }
                    (None, None) => {}
                    _ => prop_assert!(false, "presence differs after translation"),
                }
            }
            Ok(())
        },
    );
}

pub fn momentum_update_is_convex() {
    check(
        "momentum",
        (any::<u64>(), any::<u64>(), 0.0f64..=1.0),
        |(a, b, gamma)| {
            let layout = Layout::new(3, 4, 2).unwrap();
            let student = ClassifierParams::init_seeded(layout, a);
            let other = ClassifierParams::init_seeded(layout, b);
            let mut m = MomentumModel::new(&student, gamma.min(0.999_999)).unwrap();
            m.update(&other).unwrap();
            for ((old, new), now) in student.values().iter().zip(other.values()).zip(m.params.values()) {
                prop_assert!(*now >= old.min(*new) - 1e-15 && *now <= old.max(*new) + 1e-15);
            }
            Ok(())
        },
    );
}

pub fn trace_partition_identity_holds() {
    let mut runner = TestRunner::new(Config {
        cases: 6,
        failure_persistence: None,
        ..Config::default()
    });
    let strategy = (any::<u64>(), prop::sample::select(vec![Method::Bimem, Method::VanillaSt, Method::ConfidenceSt]));
    let result = runner.run(&strategy, |(seed, method)| {
        let (source, target) = gen_shifted_gaussians(&GenConfig {
            classes: 3,
            dim: 2,
            n_per_class: 30,
            class_separation: 3.0,
            target_shift: vec![1.0, 0.5],
            target_rotation_deg: 20.0,
            noise_sigma: 1.0,
            seed,
        })
        .unwrap();
        let model = train_source(
            &source,
            &SourceTraining {
                hidden: 4,
                epochs: 5,
                lr: 0.1,
                batch_size: 16,
                seed,
            },
        )
        .unwrap();
        let preds = export_predictions(&model, &target, ExportMode::Soft, Execution::Sequential).unwrap();
        let cfg = AdaptConfig {
            method,
            iterations: 40,
            batch_size: 8,
            lr: 0.1,
            gamma: 0.9,
            gamma_prime: 0.9,
            top_n: 4,
            queue_capacity: 16,
            flows: FlowConfig::ALL,
            hidden: 4,
            warmup_iterations: 10,
            refresh_interval: 10,
            confidence_quantile: 0.5,
            eval_interval: 5,
            seed,
        };
        let (_, trace) = run_adaptation(&target, &preds, &cfg, Execution::Sequential).unwrap();
        let ev = Evaluator::new(&target, &preds).unwrap();
        prop_assert!(check_partition_identity(&trace, ev.n_correct(), ev.n_incorrect(), PARTITION_TOL).is_ok());
        Ok(())
    });
    if let Err(e) = result {
        panic!("property `partition identity` failed: {e}");
    }
}

/// Runs every property; returns the names in the order they ran.
pub fn run_all() -> Vec<&'static str> {
    let all: [(&str, fn()); 12] = [
        ("softmax validity and shift invariance", softmax_is_valid_and_shift_invariant),
        ("entropy bounds", entropy_is_bounded),
        ("argmax positive scaling", argmax_ignores_positive_scaling),
        ("reweighting keeps product argmax", reweighting_preserves_product_argmax),
        ("denoising positive scaling", denoising_ignores_blackbox_scaling),
        ("centroid permutation and hull", centroids_are_permutation_invariant_and_in_hull),
        ("consolidation convexity", consolidation_is_convex),
        ("calibration weight rows", calibration_weights_are_normalized),
        ("store invariants over all flow masks", store_invariants_hold_under_every_flow_mask),
        ("calibration translation equivariance", calibration_is_translation_equivariant),
        ("momentum convexity", momentum_update_is_convex),
        ("trace partition identity", trace_partition_identity_holds),
    ];
    all.iter()
        .map(|(name, f)| {
            f();
            *name
        })
        .collect()
}
