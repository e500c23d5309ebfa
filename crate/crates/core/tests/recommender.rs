mod oracle;

use proxrec::ingestion::read_catalog;
use proxrec::model::{
    Category, ItemId, LocalStore, Ontology, RatingRecord, RatingScale, Source, UserId,
};
use proxrec::recommender::{content_score, group_recommend, predict, top_n, Basis, GroupStrategy};
use proxrec::similarity::{blend, pearson, propinquity_from, rating_similarity, Metric};
use proxrec::SimilarityConfig;

use oracle::{item_id, uid, OracleCfg, ToyWorld};

// r(u, i) for 5 users and 6 items; 0 means unrated
const TOY: [[u8; 6]; 5] = [
    [5, 3, 0, 1, 4, 0],
    [4, 0, 0, 1, 5, 2],
    [1, 1, 0, 5, 0, 4],
    [0, 1, 5, 4, 2, 0],
    [3, 4, 4, 0, 3, 5],
];

fn toy_world(metric: Metric) -> ToyWorld {
    ToyWorld {
        ratings: TOY
            .iter()
            .map(|row| {
                row.iter()
                    .map(|&v| (v > 0).then_some(f32::from(v)))
                    .collect()
            })
            .collect(),
        owner: 0,
        encounters: vec![(0, 0), (2, 900), (0, 0), (5, 3600), (1, 60)],
        cfg: OracleCfg {
            metric,
            min_overlap: 1,
            gamma: 1,
            kappa: 5.0,
            tau: 3600.0,
            beta: 0.5,
            w: 0.7,
            fallback: true,
            k: 2,
        },
        scale: (1.0, 5.0),
    }
}

#[test]
fn toy_matrix_predictions_match_brute_force() {
    for metric in [Metric::Pearson, Metric::Cosine] {
        let w = toy_world(metric);
        let store = w.store();
        let cfg = w.cfg.library();
        for u in 0..5 {
            for i in 0..6 {
                let p = predict(uid(u), &item_id(i), &store, &cfg, 2).unwrap();
                let (score, cf, used) = w.predict(u, i);
                assert!(
                    (p.score - score).abs() <= 1e-9,
                    "{metric:?} u{u} i{i}: {} vs {score}",
                    p.score
                );
                assert_eq!(p.basis == Basis::Cf, cf);
                assert_eq!(p.n_neighbors_used, used);
            }
            let top = top_n(uid(u), 1, &store, &cfg, 2, None).unwrap();
            let want = w.ranking(u);
            assert_eq!(
                top.first().map(|p| p.item.clone()),
                want.first().map(|&(i, _)| item_id(i))
            );
        }
    }
}

#[test]
fn three_member_groups_match_enumeration() {
    let w = toy_world(Metric::Pearson);
    let store = w.store();
    let cfg = w.cfg.library();
    let members = [1usize, 2, 3];
    let ids: Vec<UserId> = members.iter().map(|&m| uid(m)).collect();
    for strategy in [
        GroupStrategy::Average,
        GroupStrategy::LeastMisery,
        GroupStrategy::MostPleasure,
    ] {
        let got = group_recommend(&ids, 10, &store, &cfg, 2, strategy).unwrap();
        let want = w.group_ranking(&members, strategy);
        assert_eq!(got.len(), want.len());
        for (g, (i, s)) in got.iter().zip(&want) {
            assert_eq!(g.item, item_id(*i), "{strategy:?}");
            assert!((g.score - s).abs() <= 1e-9);
        }
    }
}

fn rec(rater: u64, key: &str, value: f32) -> RatingRecord {
    RatingRecord {
        rater: UserId(rater),
        item: ItemId::new(Category(0), key).unwrap(),
        value,
        timestamp: 0,
        source: Source::Manual,
        hops: u8::from(rater != 1),
    }
}

#[test]
fn pearson_toy_against_frozen_values() {
    // u = {i1: 4, i2: 2, i3: 5}, v = {i1: 5, i2: 1, i3: 4}; values from an exact-arithmetic oracle
    let core: f64 = pearson(&[4.0, 2.0, 5.0], &[5.0, 1.0, 4.0]).unwrap();
    assert!((core - 0.838_627_869_377_534_6).abs() <= 1e-12);
    assert!(
        (core - oracle::pearson_exact(&[4.0, 2.0, 5.0], &[5.0, 1.0, 4.0]).unwrap()).abs() <= 1e-12
    );

    let mut store = LocalStore::new(UserId(1), RatingScale::default());
    for (k, a, b) in [("i1", 4.0, 5.0), ("i2", 2.0, 1.0), ("i3", 5.0, 4.0)] {
        store.merge_record(rec(1, k, a)).unwrap();
        store.merge_record(rec(2, k, b)).unwrap();
    }
    let s: f64 =
        rating_similarity(UserId(1), UserId(2), &store, &SimilarityConfig::default()).unwrap();
    assert!((s - 0.251_588_360_813_260_4).abs() <= 1e-12);
}

#[test]
fn propinquity_and_blend_closed_forms() {
    let cfg = SimilarityConfig {
        duration_weight: 0.0,
        propinquity_kappa: 5.0,
        ..Default::default()
    };
    let p: f64 = propinquity_from(5, 0, &cfg);
    assert!((p - 0.632_120_558_828_557_7).abs() <= 1e-12);
    let h = blend(Some(0.5), 0.3, &SimilarityConfig::default());
    assert!((h - 0.44).abs() <= 1e-12);
}

#[test]
fn content_score_on_a_two_attribute_catalog() {
    let catalog = read_catalog(
        "category,key,action,drama\nmovies,p,1,0\nmovies,q,0,1\nmovies,s,1,1\nmovies,t,0.5,1\n"
            .as_bytes(),
        &Ontology::default(),
    )
    .unwrap();
    let mut store = LocalStore::new(UserId(1), RatingScale::default());
    for (k, v) in [("p", 5.0), ("q", 2.0), ("s", 4.0)] {
        store.merge_record(rec(1, k, v)).unwrap();
    }
    // profile ~ 2*(1,0) - (0,1) + (1,1) = (3,0); cos with (0.5,1) = 1/sqrt(5)
    let t = ItemId::new(Category(0), "t").unwrap();
    let p = content_score::<f64>(UserId(1), &t, &store, &catalog).unwrap();
    assert_eq!(p.basis, Basis::Content);
    assert!(
        (p.score - 3.894_427_190_999_916).abs() <= 1e-12,
        "{}",
        p.score
    );
}
