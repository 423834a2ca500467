use std::collections::BTreeSet;
use std::fs;

use chrono::NaiveDate;
use proptest::prelude::{prop_assert, prop_assert_eq, proptest, ProptestConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use archboot::corpus::Sample;
use archboot::linear_head::LinearHead;
use archboot::pipeline::{parallel_score, plan_shards, read_scores, select_top_k_global};
use archboot::selection::top_k_heap;
use archboot::tilegrid::TileKey;

fn samples(n: usize, seed: u64) -> Vec<Sample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| Sample {
            id: format!("id{:08}", rng.gen::<u32>() as usize * 1000 + i),
            location_id: format!("l{i}"),
            tile: TileKey { x: 1, y: 1, zoom: 21 },
            capture_date: NaiveDate::from_ymd_opt(2020, 1, 1).unwrap(),
            embedding: (0..4).map(|_| rng.gen_range(-1.0f32..1.0)).collect(),
            seed_label: None,
        })
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn shards_partition_the_ids(n in 0usize..300, k in 1usize..20, seed in 0u64..1000) {
        let ids: Vec<String> = samples(n, seed).into_iter().map(|s| s.id).collect();
        let plan = plan_shards(&ids, k, "unused").unwrap();
        let sizes: Vec<usize> = plan.shards.iter().map(Vec::len).collect();
        prop_assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
        let union: BTreeSet<&String> = plan.shards.iter().flatten().collect();
        prop_assert_eq!(union.len(), ids.len());
        prop_assert_eq!(union, ids.iter().collect::<BTreeSet<_>>());
    }
}

#[test]
fn merged_scores_do_not_depend_on_sharding() {
    let data = samples(5000, 1);
    let ids: Vec<String> = data.iter().map(|s| s.id.clone()).collect();
    let head = LinearHead { w: vec![0.4, -1.1, 0.3, 2.0], b: -0.2 };
    let dir = tempfile::tempdir().unwrap();
    let mut outputs = Vec::new();
    for (shards, workers) in [(1, 1), (2, 2), (4, 4), (7, 3), (33, 4)] {
        let plan = plan_shards(&ids, shards, dir.path().join(format!("{shards}"))).unwrap();
        outputs.push(fs::read(parallel_score(&data, &head, &plan, workers).unwrap()).unwrap());
    }
    assert!(outputs.windows(2).all(|w| w[0] == w[1]));
    let merged = read_scores(&dir.path().join("1/scores.jsonl")).unwrap();
    assert_eq!(merged.len(), 5000);
    for s in &data {
        assert_eq!(merged[&s.id], head.predict_confidence(&s.embedding).unwrap());
    }
}

#[test]
fn global_top_k_matches_full_sort_on_100k() {
    let mut rng = ChaCha8Rng::seed_from_u64(100);
    let dir = tempfile::tempdir().unwrap();
    let mut confs = Vec::new();
    let mut ids = Vec::new();
    let mut files = Vec::new();
    for f in 0..5 {
        let path = dir.path().join(format!("part{f}.jsonl"));
        let mut text = String::new();
        for i in 0..20_000 {
            // coarse grid forces plenty of ties
            let c = f64::from(rng.gen_range(0u32..5000)) / 5000.0;
            let id = format!("f{f}-{i:05}");
            text.push_str(&serde_json::json!({"id": id, "conf": c}).to_string());
            text.push('\n');
            confs.push(c);
            ids.push(id);
        }
        fs::write(&path, text).unwrap();
        files.push(path);
    }
    for k in [0, 1, 100, 12_345, 100_000] {
        let got = select_top_k_global(&files, k).unwrap();
        let mut order: Vec<usize> = (0..confs.len()).collect();
        order.sort_by(|&a, &b| confs[b].total_cmp(&confs[a]).then(a.cmp(&b)));
        let mut want: Vec<usize> = order[..k].to_vec();
        want.sort_unstable();
        let want_ids: Vec<&String> = want.iter().map(|&i| &ids[i]).collect();
        assert_eq!(got.iter().collect::<Vec<_>>(), want_ids, "k = {k}");
        assert_eq!(top_k_heap(&confs, k, true).unwrap(), want);
    }
    assert!(select_top_k_global(&files, 100_001).is_err());
}
