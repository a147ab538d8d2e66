use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::Rng as _;
use siamquality::pairing::{build_pairs, make_schedule, sort_curriculum, PairingRules, QualityPair, SegmentIndexEntry};
use siamquality::seed::{derive_indexed, rng, Rng};

/// Exhaustive application of the pairing rules, written without any of the
/// windowing or sorting shortcuts of the implementation.
fn brute_force(index: &[SegmentIndexEntry], rules: &PairingRules) -> Vec<QualityPair> {
    let mut out = Vec::new();
    for a in index {
        if a.y > rules.good_epsilon {
            continue;
        }
        let mut cands: Vec<&SegmentIndexEntry> = index
            .iter()
            .filter(|k| {
                k.segment_id != a.segment_id
                    && k.patient_id == a.patient_id
                    && k.y > rules.bad_threshold
                    && (k.t_start_s - a.t_start_s).abs() < rules.window_s
            })
            .collect();
        cands.sort_by(|p, q| {
            let dp = (p.t_start_s - a.t_start_s).abs();
            let dq = (q.t_start_s - a.t_start_s).abs();
            dq.partial_cmp(&dp)
                .unwrap()
                .then(q.t_start_s.partial_cmp(&p.t_start_s).unwrap())
                .then(p.segment_id.cmp(&q.segment_id))
        });
        if let Some(best) = cands.first() {
            out.push(QualityPair {
                anchor_id: a.segment_id.clone(),
                partner_id: best.segment_id.clone(),
                c: (best.y - a.y).abs(),
            });
        }
    }
    out.sort_by(|p, q| p.anchor_id.cmp(&q.anchor_id));
    out
}

fn random_index(r: &mut Rng) -> Vec<SegmentIndexEntry> {
    let n = r.gen_range(0..=50);
    let n_patients = r.gen_range(1..=4);
    let labels = [0.0, 0.0, 0.1, 0.2, 0.2000001, 0.35, 0.7, 1.0];
    let mut index: Vec<SegmentIndexEntry> = (0..n)
        .map(|k| {
            // A coarse time grid produces exact window boundaries and |dt| ties.
            let t = if r.gen_bool(0.7) {
                r.gen_range(0..40) as f64 * 30.0
            } else {
                r.gen_range(0.0..1200.0)
            };
            let y = if r.gen_bool(0.6) {
                labels[r.gen_range(0..labels.len())]
            } else {
                r.gen_range(0.0..=1.0)
            };
            SegmentIndexEntry {
                segment_id: format!("s{:03}", r.gen_range(0..1000) * 100 + k),
                patient_id: format!("p{}", r.gen_range(0..n_patients)),
                t_start_s: t,
                y,
            }
        })
        .collect();
    index.shuffle(r);
    index
}

#[test]
fn build_pairs_matches_brute_force_on_1000_indexes() {
    let mut n_pairs = 0;
    for trial in 0..1000u64 {
        let mut r = rng(derive_indexed(7, "pairing-oracle", trial));
        let index = random_index(&mut r);
        let rules = if trial % 4 == 3 {
            PairingRules {
                good_epsilon: 0.1,
                ..PairingRules::default()
            }
        } else {
            PairingRules::default()
        };
        let got = build_pairs(&index, &rules).unwrap();
        let want = brute_force(&index, &rules);
        assert_eq!(got, want, "trial {trial}");
        n_pairs += got.len();
    }
    assert!(n_pairs > 1000, "oracle trials produced too few pairs ({n_pairs})");
}

#[test]
fn curriculum_on_random_pairs_is_sorted_and_nested() {
    for trial in 0..200u64 {
        let mut r = rng(derive_indexed(9, "curriculum", trial));
        let pairs = build_pairs(&random_index(&mut r), &PairingRules::default()).unwrap();
        let sorted = sort_curriculum(pairs);
        assert!(sorted.windows(2).all(|w| w[0].c <= w[1].c));
        if sorted.is_empty() {
            continue;
        }
        let n_stages = r.gen_range(1..=sorted.len().min(6));
        let sched = make_schedule(sorted.len(), n_stages, 1).unwrap();
        sched.validate(sorted.len()).unwrap();
        assert_eq!(sched.stages.last().unwrap().len(), sorted.len());
        let max_c = |s: &[usize]| s.iter().map(|&i| sorted[i].c).fold(f64::NEG_INFINITY, f64::max);
        for w in sched.stages.windows(2) {
            assert!(w[0].iter().all(|i| w[1].contains(i)));
            assert!(max_c(&w[0]) <= max_c(&w[1]));
        }
    }
}

proptest! {
    #[test]
    fn pairing_ignores_index_order(seed in any::<u64>(), shuffle_seed in any::<u64>()) {
        let mut r = rng(seed);
        let index = random_index(&mut r);
        let mut shuffled = index.clone();
        shuffled.shuffle(&mut rng(shuffle_seed));
        let rules = PairingRules::default();
        prop_assert_eq!(build_pairs(&index, &rules).unwrap(), build_pairs(&shuffled, &rules).unwrap());
    }

    #[test]
    fn pairs_obey_the_rules(seed in any::<u64>()) {
        let index = random_index(&mut rng(seed));
        let rules = PairingRules::default();
        let by_id = |id: &str| index.iter().find(|e| e.segment_id == id).unwrap();
        for p in build_pairs(&index, &rules).unwrap() {
            let (a, k) = (by_id(&p.anchor_id), by_id(&p.partner_id));
            prop_assert!(a.y <= rules.good_epsilon && k.y > rules.bad_threshold);
            prop_assert_eq!(&a.patient_id, &k.patient_id);
            prop_assert!((a.t_start_s - k.t_start_s).abs() < rules.window_s);
            prop_assert!(p.c >= 0.0 && p.c <= 1.0);
        }
    }
}
