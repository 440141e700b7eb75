use proptest::prelude::*;
use serde_json::{Map, Value};

use wings_lab::cli::{parse_kv, to_kv};
use wings_lab::laws::{attention_shift, laws_curve, pearson};
use wings_lab::model::{AttentionTrace, Segment, SegmentLayout};
use wings_lab::tensor::{Tape, Tensor};
use wings_lab::train::Schedule;
use wings_lab::wings::{pack_single, route_weights, RouterParams};

/// Lower-triangular row-stochastic `s × s` matrix from raw positive weights.
fn causal_matrix(s: usize, raw: &[f64]) -> Tensor {
    let mut v = vec![0.0; s * s];
    for i in 0..s {
        let row = &raw[i * s..i * s + i + 1];
        let z: f64 = row.iter().sum();
        for j in 0..=i {
            v[i * s + j] = row[j] / z;
        }
    }
    Tensor::matrix(s, s, v).unwrap()
}

fn trace_strategy() -> impl Strategy<Value = (AttentionTrace, SegmentLayout)> {
    (4usize..10, 1usize..5, 1usize..3).prop_flat_map(|(s, layers, heads)| {
        let span = (1usize..s - 1).prop_flat_map(move |a| (Just(a), a..s - 1));
        let raw = prop::collection::vec(0.01f64..1.0, layers * heads * s * s);
        (Just((s, layers, heads)), span, raw).prop_map(|((s, layers, heads), (a, b), raw)| {
            let mut chunks = raw.chunks(s * s);
            let trace = AttentionTrace {
                layers: (0..layers)
                    .map(|_| (0..heads).map(|_| causal_matrix(s, chunks.next().unwrap())).collect())
                    .collect(),
            };
            (trace, SegmentLayout { len: s, span: Some((a, b)) })
        })
    })
}

proptest! {
    #[test]
    fn laws_segments_partition_unity((trace, layout) in trace_strategy()) {
        let curves: Vec<_> = [Segment::Before, Segment::Itself, Segment::After]
            .iter()
            .map(|&seg| laws_curve(&trace, &layout, seg).unwrap())
            .collect();
        for l in 0..trace.layers.len() {
            let total: f64 = curves.iter().map(|c| c.values[l]).sum();
            prop_assert!((total - 1.0).abs() < 1e-9);
            for c in &curves {
                prop_assert!((0.0..=1.0).contains(&c.values[l]));
            }
        }
    }

    #[test]
    fn shift_lies_in_range(traces in prop::collection::vec(trace_strategy(), 1..6)) {
        if let Ok(report) = attention_shift(&traces) {
            prop_assert!((0.0..=2.0).contains(&report.mean));
            prop_assert_eq!(report.sequences() + report.skipped, traces.len());
        }
    }

    #[test]
    fn pearson_is_bounded_symmetric_and_affine_invariant(
        pairs in prop::collection::vec((-10.0f64..10.0, -10.0f64..10.0), 3..40),
        scale in 0.1f64..5.0,
        offset in -3.0f64..3.0,
    ) {
        let (u, v): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
        if let Ok(r) = pearson(&u, &v) {
            prop_assert!((-1.0..=1.0).contains(&r));
            prop_assert!((pearson(&v, &u).unwrap() - r).abs() < 1e-12);
            let moved: Vec<f64> = u.iter().map(|x| x * scale + offset).collect();
            prop_assert!((pearson(&moved, &v).unwrap() - r).abs() < 1e-9);
            let flipped: Vec<f64> = v.iter().map(|x| -x).collect();
            prop_assert!((pearson(&u, &flipped).unwrap() + r).abs() < 1e-12);
        }
    }

    #[test]
    fn router_rows_are_probability_pairs(
        (trace, layout) in trace_strategy(),
        w in prop::collection::vec(-3.0f64..3.0, 8),
    ) {
        let router = RouterParams {
            weight: Tensor::matrix(3, 2, w[..6].to_vec()).unwrap(),
            bias: Tensor::new(vec![2], w[6..].to_vec()).unwrap(),
        };
        let mut tape = Tape::new();
        let (probs, packed) = pack_single(&mut tape, &trace.layers[0], layout).unwrap();
        let vars = router.bind(&mut tape, false);
        let out = route_weights(&mut tape, probs, &packed, &vars).unwrap();
        let out = tape.value(out);
        for i in 0..out.rows() {
            prop_assert!(out.row(i).iter().all(|&x| x >= 0.0));
            prop_assert!((out.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn schedule_stays_within_peak(peak in 1e-5f64..1e-1, total in 1usize..500, warm in 0.0f64..0.5, t in 0usize..600) {
        let s = Schedule::new(peak, total, warm, 0.1);
        let r = s.rate(t);
        prop_assert!(r >= 0.0 && r <= peak * (1.0 + 1e-12));
    }

    #[test]
    fn kv_snapshot_round_trips(
        ints in prop::collection::btree_map("[a-z][a-z_]{0,8}", 0u64..1_000_000, 0..5),
        words in prop::collection::btree_map("[A-Z][a-z_]{0,8}", "[a-zA-Z/._-]{1,12}", 0..5),
    ) {
        let mut m = Map::new();
        for (k, v) in ints {
            m.insert(k, Value::from(v));
        }
        for (k, v) in words {
            m.insert(k, Value::from(v));
        }
        let parsed = parse_kv(&to_kv(&m)).unwrap();
        prop_assert_eq!(parsed.len(), m.len());
    }
}
