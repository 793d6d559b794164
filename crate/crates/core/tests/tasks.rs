use std::collections::BTreeMap;
use std::path::PathBuf;

use vlreuse::tasks::{
    assemble, cosine, read_catalogue, read_ground_truth, recall_at_k, retrieve, Catalogue,
    Embedder, HashedBagOfWords, PreprocessSpec, ScriptOrder,
};

fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("fixtures")
        .join(name)
}

fn catalogue() -> Catalogue {
    let text = std::fs::read_to_string(fixture("captions.csv")).unwrap();
    read_catalogue(text.as_bytes(), "captions.csv", &PreprocessSpec::default()).unwrap()
}

/// Every clip scored independently, sorted by (score desc, id asc).
fn brute_force(cat: &Catalogue, prompt: &str, k: usize) -> Vec<String> {
    let e = HashedBagOfWords::default();
    let p = e.embed(prompt).unwrap();
    let mut scored: Vec<(f64, String)> = cat
        .entries()
        .iter()
        .map(|x| {
            (
                cosine(&p, &e.embed(&x.caption.text).unwrap()).unwrap(),
                x.clip.clip_id.clone(),
            )
        })
        .collect();
    scored.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then_with(|| a.1.cmp(&b.1)));
    scored.into_iter().take(k).map(|s| s.1).collect()
}

#[test]
fn cooking_prompt_selects_cooking_clips() {
    let cat = catalogue();
    assert_eq!(cat.len(), 12);
    let (manifest, ranked) = assemble(
        &cat,
        "cooking",
        3,
        ScriptOrder::Similarity,
        &HashedBagOfWords::default(),
        None,
    )
    .unwrap();
    let ids: Vec<String> = ranked.iter().map(|r| r.clip_id.clone()).collect();
    assert_eq!(ids, brute_force(&cat, "cooking", 3));
    for id in &ids {
        let caption = &cat.get(id).unwrap().caption.text;
        assert!(
            caption.split_whitespace().any(|w| w == "cooking"),
            "{id}: {caption}"
        );
    }
    assert_eq!(manifest.script_lines.len(), 3);
}

#[test]
fn temporal_order_is_a_permutation() {
    let cat = catalogue();
    let e = HashedBagOfWords::default();
    let (sim, _) = assemble(
        &cat,
        "a dog in the park at sunset",
        5,
        ScriptOrder::Similarity,
        &e,
        None,
    )
    .unwrap();
    let (tmp, _) = assemble(
        &cat,
        "a dog in the park at sunset",
        5,
        ScriptOrder::Temporal,
        &e,
        None,
    )
    .unwrap();
    let mut a: Vec<_> = sim
        .ordered_clips
        .iter()
        .map(|c| c.clip_id.clone())
        .collect();
    let mut b: Vec<_> = tmp
        .ordered_clips
        .iter()
        .map(|c| c.clip_id.clone())
        .collect();
    a.sort();
    b.sort();
    assert_eq!(a, b);
    b.dedup();
    assert_eq!(b.len(), 5);
}

#[test]
fn assembly_bytes_are_stable() {
    let e = HashedBagOfWords::default();
    let first = assemble(
        &catalogue(),
        "children playing",
        4,
        ScriptOrder::Temporal,
        &e,
        None,
    )
    .unwrap()
    .0
    .to_json();
    for _ in 0..3 {
        let again = assemble(
            &catalogue(),
            "children playing",
            4,
            ScriptOrder::Temporal,
            &e,
            None,
        )
        .unwrap()
        .0
        .to_json();
        assert_eq!(first.as_bytes(), again.as_bytes());
    }
}

#[test]
fn fixture_recall() {
    let cat = catalogue();
    let truth = read_ground_truth(
        std::fs::read_to_string(fixture("ground_truth.csv"))
            .unwrap()
            .as_bytes(),
        "gt",
    )
    .unwrap();
    let queries: Vec<String> = truth.keys().cloned().collect();
    let ranked = retrieve(
        &queries,
        &cat.captions(),
        &HashedBagOfWords::default(),
        cat.len(),
    )
    .unwrap();
    let ids: BTreeMap<String, Vec<String>> = ranked
        .into_iter()
        .map(|(q, l)| (q, l.into_iter().map(|r| r.clip_id).collect()))
        .collect();
    let mut prev = 0.0;
    for k in 1..=cat.len() {
        let r = recall_at_k(&ids, &truth, k).unwrap();
        assert!(r >= prev);
        prev = r;
    }
    assert_eq!(prev, 1.0);
    assert!(recall_at_k(&ids, &truth, 1).unwrap() >= 0.5);
}
