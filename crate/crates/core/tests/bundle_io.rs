mod common;

use std::collections::{BTreeMap, BTreeSet};
use std::fs;

use ndarray::{array, Array2};
use rand::Rng;

use perturbench::data::{
    load_bundle, load_link_db, parse_link_db, payload_checksum, write_bundle, Dataset, EmbeddingMatrix,
    ExpressionMatrix, Layout, Metadata,
};

use common::rng;

fn meta(n: usize) -> Metadata {
    let perts: Vec<String> = (0..n)
        .map(|i| if i % 4 == 0 { "non-targeting".into() } else { format!("G{}", i % 3) })
        .collect();
    let batches: Vec<String> = (0..n).map(|i| format!("b{}", i % 2)).collect();
    Metadata::from_labels(&perts, &batches).unwrap()
}

#[test]
fn minimal_expression_bundle() {
    let dir = tempfile::tempdir().unwrap();
    let counts = Array2::from_shape_fn((10, 5), |(i, j)| ((i * 7 + j * 3) % 11) as f64);
    let genes = (0..5).map(|j| format!("G{j}")).collect();
    let ds = Dataset::new(
        meta(10),
        Some(ExpressionMatrix::new(genes, counts, Layout::RawCounts).unwrap()),
        BTreeMap::new(),
    )
    .unwrap();
    write_bundle(&ds, dir.path()).unwrap();
    let back = load_bundle(dir.path()).unwrap();
    assert_eq!(back.n_samples(), 10);
    assert_eq!(back.expression().unwrap().n_genes(), 5);
    assert!(back.embeddings.is_empty());
    assert_eq!(back, ds);
}

#[test]
fn small_embedding_round_trip_is_identical() {
    let dir = tempfile::tempdir().unwrap();
    let values = array![[0.0, 1.0], [-1.0, 0.5], [2.0, -2.0]];
    let mut embeddings = BTreeMap::new();
    embeddings.insert("e".to_string(), EmbeddingMatrix::new(values.clone(), "hand").unwrap());
    let ds = Dataset::new(meta(3), None, embeddings).unwrap();
    write_bundle(&ds, dir.path()).unwrap();
    let back = load_bundle(dir.path()).unwrap();
    assert_eq!(back.embedding("e").unwrap().values(), &values);
}

#[test]
fn negative_counts_rejected_before_write() {
    let counts = array![[1.0, -1.0], [2.0, 3.0]];
    assert!(ExpressionMatrix::new(vec!["A".into(), "B".into()], counts, Layout::RawCounts).is_err());
}

#[test]
fn load_then_write_is_byte_stable() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let values = Array2::from_shape_fn((50, 7), |(i, j)| (i as f64 * 0.37 - j as f64 * 1.13).sin() * 100.0);
    let mut embeddings = BTreeMap::new();
    embeddings.insert("e".to_string(), EmbeddingMatrix::new(values, "sin").unwrap());
    let ds = Dataset::new(meta(50), None, embeddings).unwrap();
    write_bundle(&ds, a.path()).unwrap();
    let loaded = load_bundle(a.path()).unwrap();
    write_bundle(&loaded, b.path()).unwrap();
    let reloaded = load_bundle(b.path()).unwrap();
    assert_eq!(loaded, reloaded);
    for file in ["manifest.json", "metadata.tsv", "embeddings/e.f32"] {
        assert_eq!(fs::read(a.path().join(file)).unwrap(), fs::read(b.path().join(file)).unwrap(), "{file}");
    }
}

#[test]
fn large_payload_checksum_is_stable_and_sensitive() {
    // 20k × 256 stands in for the full-size matrix; the hash path is the same
    let mut r = rng(5);
    let values = Array2::from_shape_simple_fn((20_000, 256), || r.random::<f32>() as f64);
    let first = payload_checksum(&values);
    assert_eq!(first, payload_checksum(&values.clone()));
    let mut nudged = values.clone();
    nudged[[19_999, 255]] += 1.0;
    assert_ne!(first, payload_checksum(&nudged));

    let dir = tempfile::tempdir().unwrap();
    let mut embeddings = BTreeMap::new();
    embeddings.insert("big".to_string(), EmbeddingMatrix::new(values.clone(), "u").unwrap());
    let ds = Dataset::new(meta(20_000), None, embeddings).unwrap();
    write_bundle(&ds, dir.path()).unwrap();
    let back = load_bundle(dir.path()).unwrap();
    assert_eq!(payload_checksum(back.embedding("big").unwrap().values()), first);
}

#[test]
fn ten_thousand_edges_dedup_matches_brute_force() {
    let mut r = rng(17);
    let genes: Vec<String> = (0..150).map(|i| format!("G{i:03}")).collect();
    let mut text = String::from("# synthetic edges\n");
    let mut rows = Vec::new();
    for _ in 0..10_000 {
        let a = &genes[r.random_range(0..genes.len())];
        let b = &genes[r.random_range(0..genes.len())];
        text.push_str(&format!("{a}\t{b}\n"));
        rows.push((a.clone(), b.clone()));
    }
    let mut brute: Vec<(String, String)> = Vec::new();
    let mut selfs = 0;
    for (a, b) in &rows {
        if a == b {
            selfs += 1;
            continue;
        }
        let key = if a < b { (a.clone(), b.clone()) } else { (b.clone(), a.clone()) };
        if !brute.contains(&key) {
            brute.push(key);
        }
    }
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("edges.tsv");
    fs::write(&path, &text).unwrap();
    let load = load_link_db(&path).unwrap();
    assert_eq!(load.db.len(), brute.len());
    assert_eq!(load.self_links_dropped, selfs);
    assert_eq!(load.duplicates_dropped, rows.len() - selfs - brute.len());
    let stored: BTreeSet<(String, String)> = load.db.iter().map(|(a, b)| (a.into(), b.into())).collect();
    let expected: BTreeSet<(String, String)> = brute.into_iter().collect();
    assert_eq!(stored, expected);
    assert!(load.db.iter().all(|(a, b)| a < b));
}

#[test]
fn parse_reports_drops() {
    let load = parse_link_db("db", "A\tB\nB\tA\nC\tC\n", std::path::Path::new("inline")).unwrap();
    assert_eq!(load.db.len(), 1);
    assert!(load.db.contains("B", "A"));
    assert_eq!(load.duplicates_dropped, 1);
    assert_eq!(load.self_links_dropped, 1);
}
