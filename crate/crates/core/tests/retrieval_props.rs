use ndarray::{Array1, Array2};
use proptest::prelude::*;

use tmal_core::corpus::Taxonomy;
use tmal_core::retrieval::{
    make_avg_index, open_set_classify_nn, read_store, write_store, Branch, KeyIndex, KeyStrategy, RetrievalError,
    StoredEmbeddings,
};

fn normalize(v: Vec<f64>) -> Option<Vec<f64>> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    (n > 1e-3).then(|| v.into_iter().map(|x| x / n).collect())
}

fn unit_vec(d: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-1.0f64..1.0, d).prop_filter_map("zero vector", normalize)
}

fn stack(rows: &[Vec<f64>]) -> Array2<f64> {
    Array2::from_shape_fn((rows.len(), rows[0].len()), |(i, j)| rows[i][j])
}

fn instance() -> impl Strategy<Value = (Vec<Vec<f64>>, Vec<usize>, Vec<f64>, usize)> {
    (1usize..8).prop_flat_map(|d| {
        (prop::collection::vec(unit_vec(d), 1..12), unit_vec(d)).prop_flat_map(|(pool, q)| {
            let p = pool.len();
            (Just(pool), prop::collection::vec(0..p, 1..60), Just(q)).prop_flat_map(|(pool, picks, q)| {
                let n = picks.len();
                (Just(pool), Just(picks), Just(q), 1..=n)
            })
        })
    })
}

fn species(i: usize) -> Taxonomy {
    Taxonomy::from_labels(["O", "F", "G", &format!("G s{i}")]).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn topk_matches_sorted_scan((pool, picks, q, k) in instance()) {
        let rows: Vec<Vec<f64>> = picks.iter().map(|&p| pool[p].clone()).collect();
        let ids: Vec<String> = (0..rows.len()).map(|i| format!("id{:03}", (i * 37) % 101)).collect();
        let index = KeyIndex::from_parts(stack(&rows), ids.clone(), vec![Taxonomy::empty(); rows.len()], KeyStrategy::Image).unwrap();
        let q = Array1::from(q);
        let hits = index.query_topk(q.view(), k).unwrap();

        let mut scan: Vec<(f64, String)> = rows
            .iter()
            .zip(&ids)
            .map(|(r, id)| (r.iter().zip(q.iter()).map(|(a, b)| a * b).sum::<f64>(), id.clone()))
            .collect();
        scan.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then_with(|| a.1.cmp(&b.1)));
        let want: Vec<&String> = scan.iter().take(k).map(|s| &s.1).collect();
        let got: Vec<&String> = hits.iter().map(|h| &h.record_id).collect();
        prop_assert_eq!(got, want);
        prop_assert!(hits.windows(2).all(|w| w[0].similarity >= w[1].similarity));
    }

    #[test]
    fn averaged_keys_are_unit_and_between_sources(a in prop::collection::vec(unit_vec(4), 1..10), seed in any::<u64>()) {
        let n = a.len();
        let b: Vec<Vec<f64>> = a.iter().enumerate().map(|(i, v)| {
            let mut w = v.clone();
            w.rotate_left(1 + (seed as usize + i) % 3);
            w
        }).collect();
        let ids: Vec<String> = (0..n).map(|i| format!("r{i}")).collect();
        let labels: Vec<Taxonomy> = (0..n).map(species).collect();
        let img = KeyIndex::from_parts(stack(&a), ids.clone(), labels.clone(), KeyStrategy::Image).unwrap();
        let mut rev_ids = ids.clone();
        rev_ids.reverse();
        let mut rev_rows = b.clone();
        rev_rows.reverse();
        let dna = KeyIndex::from_parts(stack(&rev_rows), rev_ids, labels.clone(), KeyStrategy::Dna).unwrap();
        match make_avg_index(&img, &dna) {
            Ok(avg) => {
                prop_assert_eq!(avg.ids(), &ids[..]);
                for (i, row) in avg.matrix().rows().into_iter().enumerate() {
                    prop_assert!((row.dot(&row) - 1.0).abs() < 1e-9);
                    let mean: Vec<f64> = (0..4).map(|j| (a[i][j] + b[i][j]) / 2.0).collect();
                    let expected = normalize(mean).unwrap();
                    for j in 0..4 {
                        prop_assert!((row[j] - expected[j]).abs() < 1e-9);
                    }
                }
            }
            Err(e) => prop_assert!(matches!(e, RetrievalError::DegenerateAverage(_))),
        }
    }
}

#[test]
fn thresholds_route_every_query() {
    let seen = KeyIndex::from_parts(stack(&[vec![1.0, 0.0], vec![0.0, 1.0]]), vec!["a".into(), "b".into()], vec![species(0), species(1)], KeyStrategy::Image).unwrap();
    let unseen = KeyIndex::from_parts(stack(&[vec![-1.0, 0.0]]), vec!["c".into()], vec![species(2)], KeyStrategy::Dna).unwrap();
    let q = Array1::from(vec![0.6, 0.8]);
    let low = open_set_classify_nn(q.view(), &seen, &unseen, 0.0).unwrap();
    assert_eq!(low.branch, Branch::Seen);
    assert_eq!(low.taxonomy, species(1));
    let high = open_set_classify_nn(q.view(), &seen, &unseen, 1.0).unwrap();
    assert_eq!(high.branch, Branch::Unseen);
    assert_eq!(high.taxonomy, species(2));
    assert_eq!(high.key_id.as_deref(), Some("c"));
    let edge = open_set_classify_nn(q.view(), &seen, &unseen, 0.8).unwrap();
    assert_eq!(edge.branch, Branch::Seen, "score equal to the threshold stays seen");
    for bad in [-0.1, 1.5, f64::NAN] {
        assert!(matches!(open_set_classify_nn(q.view(), &seen, &unseen, bad), Err(RetrievalError::BadThreshold(_))));
    }
}

#[test]
fn store_rejects_non_unit_rows() {
    let store = StoredEmbeddings { matrix: stack(&[vec![3.0, 4.0]]), record_ids: vec!["x".into()], kind: KeyStrategy::Text };
    let (mut m, mut t) = (Vec::new(), Vec::new());
    write_store(&store, &mut m, &mut t).unwrap();
    assert!(matches!(read_store(m.as_slice(), t.as_slice()), Err(RetrievalError::NotUnitNorm { .. })));
}

#[test]
fn empty_key_set_is_rejected() {
    let err = KeyIndex::from_parts(Array2::zeros((0, 3)), vec![], vec![], KeyStrategy::Dna).unwrap_err();
    assert_eq!(err.to_string(), "empty key set");
}
