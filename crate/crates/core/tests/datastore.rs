use std::collections::HashSet;
use std::time::Instant;

use camml_core::datastore::*;
use camml_core::encoders::{EncoderConfig, RawImage, RetrievalEmbedder};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn embedder() -> RetrievalEmbedder {
    RetrievalEmbedder::new(&EncoderConfig::default()).unwrap()
}

fn random_samples(count: usize, seed: u64) -> Vec<MultimodalSample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let words = ["red", "blue", "cat", "dog", "tree", "sky", "sun", "boat", "car", "fish"];
    let mut previous: Vec<f64> = Vec::new();
    (0..count)
        .map(|i| {
            // Every fifth entry repeats the previous image under a new id, so
            // exact score ties occur and the id tie-break is exercised.
            let pixels: Vec<f64> = if i % 5 == 4 {
                previous.clone()
            } else {
                (0..8 * 8 * 3).map(|_| rng.gen_range(0..3) as f64 / 2.0).collect()
            };
            previous = pixels.clone();
            let text = (0..3).map(|_| words[rng.gen_range(0..words.len())]).collect::<Vec<_>>().join(" ");
            MultimodalSample {
                id: (count - i) as u64 * 3,
                image: Some(RawImage::new(8, 8, pixels).unwrap()),
                text,
                answer: None,
            }
        })
        .collect()
}

/// Full scan written independently of the index: f64 dot against every
/// stored row, sorted by score then id.
fn oracle(index: &DatastoreIndex, query: &[f64], n: usize, exclude: &HashSet<u64>) -> Vec<(u64, f64)> {
    let mut all = Vec::new();
    for (row, &id) in index.ids().iter().enumerate() {
        if exclude.contains(&id) {
            continue;
        }
        let mut s = 0.0;
        for (a, b) in index.embedding(row).iter().zip(query) {
            s += f64::from(*a) * b;
        }
        all.push((id, s));
    }
    all.sort_by(|a, b| {
        if a.1 > b.1 {
            std::cmp::Ordering::Less
        } else if a.1 < b.1 {
            std::cmp::Ordering::Greater
        } else {
            a.0.cmp(&b.0)
        }
    });
    all.truncate(n);
    all
}

#[test]
fn retrieval_matches_full_scan_oracle() {
    let e = embedder();
    let samples = random_samples(1000, 1);
    let index = DatastoreIndex::build(&samples, &e).unwrap();
    // Queries reuse datastore images half of the time, so their top hits
    // include the duplicated pairs.
    let mut queries = random_samples(50, 2);
    for (i, q) in queries.iter_mut().enumerate().filter(|(i, _)| i % 2 == 1) {
        q.image = samples[i * 10 + 3].image.clone();
    }
    let start = Instant::now();
    let mut ties = 0;
    for (qi, q) in queries.iter().enumerate() {
        let mode = if qi % 2 == 0 { RetrievalMode::TextToImage } else { RetrievalMode::ImageToImage };
        let r = index.retrieve(&e, q, 10, mode, &HashSet::new()).unwrap();
        let qv = match mode {
            RetrievalMode::TextToImage => e.embed_text(&q.text).vector,
            RetrievalMode::ImageToImage => e.embed_image(q.image.as_ref().unwrap()).vector,
        };
        let expect = oracle(&index, &qv, 10, &HashSet::new());
        assert_eq!(r.hits.len(), 10);
        for (got, want) in r.hits.iter().zip(&expect) {
            assert_eq!(got.0, want.0);
            assert_eq!(got.1.to_bits(), want.1.to_bits());
        }
        ties += r.hits.windows(2).filter(|w| w[0].1 == w[1].1).count();
        assert!(!r.short);
    }
    assert!(start.elapsed().as_secs_f64() < 2.0);
    assert!(ties > 0, "oracle test never exercised a tie");
}

#[test]
fn rebuild_is_bitwise_and_rows_are_unit() {
    let e = embedder();
    let samples = random_samples(100, 5);
    let a = DatastoreIndex::build(&samples, &e).unwrap();
    let b = DatastoreIndex::build(&samples, &e).unwrap();
    assert_eq!(a, b);
    for row in 0..a.len() {
        let n: f64 = a.embedding(row).iter().map(|&x| f64::from(x).powi(2)).sum::<f64>().sqrt();
        assert!((n - 1.0).abs() < 1e-6, "row {row} norm {n}");
    }
    let single = DatastoreIndex::build(&samples[..1], &e).unwrap();
    assert_eq!(single.len(), 1);
}

#[test]
fn full_depth_query_is_a_sorted_permutation() {
    let e = embedder();
    let samples = random_samples(40, 9);
    let index = DatastoreIndex::build(&samples, &e).unwrap();
    let r = index
        .retrieve(&e, &samples[2], 40, RetrievalMode::ImageToImage, &HashSet::new())
        .unwrap();
    assert_eq!(r.hits[0].0, samples[2].id);
    assert!((r.hits[0].1 - 1.0).abs() < 1e-6);
    let mut ids = r.ids();
    ids.sort_unstable();
    assert_eq!(ids, index.ids());
    assert!(r.hits.windows(2).all(|w| w[0].1 >= w[1].1));
    assert!(!r.short);
}

#[test]
fn file_round_trip_and_corruption_classes() {
    let e = embedder();
    let index = DatastoreIndex::build(&random_samples(30, 4), &e).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("index.cmix");
    index.save(&path).unwrap();
    let back = DatastoreIndex::load(&path).unwrap();
    assert_eq!(back, index);
    assert_eq!(back.to_bytes(), index.to_bytes());

    let bytes = std::fs::read(&path).unwrap();
    let mut flipped = bytes.clone();
    let at = bytes.len() - 40;
    flipped[at] ^= 0x20;
    std::fs::write(&path, &flipped).unwrap();
    assert!(matches!(DatastoreIndex::load(&path), Err(DatastoreError::ChecksumMismatch { .. })));

    std::fs::write(&path, b"").unwrap();
    assert!(matches!(DatastoreIndex::load(&path), Err(DatastoreError::Truncated(_))));

    std::fs::write(&path, &bytes[..bytes.len() / 2]).unwrap();
    assert!(matches!(DatastoreIndex::load(&path), Err(DatastoreError::Truncated(_))));

    let mut versioned = bytes.clone();
    versioned[4..8].copy_from_slice(&7u32.to_le_bytes());
    std::fs::write(&path, &versioned).unwrap();
    assert!(matches!(DatastoreIndex::load(&path), Err(DatastoreError::UnsupportedVersion(7))));

    assert!(matches!(
        DatastoreIndex::load(&dir.path().join("missing")),
        Err(DatastoreError::Io(_))
    ));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn exclusion_and_ordering_hold(seed in 0u64..1000, n in 1usize..30, excl in prop::collection::hash_set(0u64..20, 0..10)) {
        let e = embedder();
        let samples = random_samples(20, seed);
        let index = DatastoreIndex::build(&samples, &e).unwrap();
        let exclude: HashSet<u64> = excl.into_iter().map(|i| i * 3 + 3).collect();
        let available = index.ids().iter().filter(|id| !exclude.contains(id)).count();
        let q = &samples[(seed % 20) as usize];
        match index.retrieve(&e, q, n, RetrievalMode::ImageToImage, &exclude) {
            Ok(r) => {
                prop_assert_eq!(r.hits.len(), n.min(available));
                prop_assert_eq!(r.short, n > available);
                prop_assert!(r.hits.iter().all(|(id, _)| !exclude.contains(id)));
                prop_assert!(r.hits.windows(2).all(|w| w[0].1 > w[1].1 || (w[0].1 == w[1].1 && w[0].0 < w[1].0)));
                let uniq: HashSet<u64> = r.ids().into_iter().collect();
                prop_assert_eq!(uniq.len(), r.hits.len());
            }
            Err(DatastoreError::NothingAvailable) => prop_assert_eq!(available, 0),
            Err(other) => prop_assert!(false, "{}", other),
        }
    }
}
