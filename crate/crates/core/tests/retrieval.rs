use std::collections::{BTreeSet, HashMap};

use exprag_core::embed::{dot, EmbedError, Embedder, EmbeddingVector, LocalHashEmbedder};
use exprag_core::env::{enumerate_specs, TaskKind, OBJECTS, TARGET_RECEPTACLES};
use exprag_core::index::{
    build_index, ExperienceIndex, IndexError, IndexFilter, KeyMode, Lexicographic, OutcomeClass,
    SeededShuffle, TieBreak,
};
use exprag_core::traj::{
    Outcome, OutcomeState, Split, TaskMeta, Trajectory, TrajectoryStore, Turn,
};
use rand_chacha::rand_core::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Looks keys up in a fixed table, so tests control the vectors exactly.
struct TableEmbedder {
    dim: usize,
    table: HashMap<String, EmbeddingVector>,
}

impl Embedder for TableEmbedder {
    fn id(&self) -> String {
        "table".into()
    }
    fn dim(&self) -> Option<usize> {
        Some(self.dim)
    }
    fn embed_batch(&self, texts: &[&str]) -> Result<Vec<EmbeddingVector>, EmbedError> {
        texts
            .iter()
            .map(|t| {
                self.table
                    .get(*t)
                    .cloned()
                    .ok_or_else(|| EmbedError::Degenerate(t.to_string()))
            })
            .collect()
    }
}

fn traj(id: &str, key: &str, success: bool) -> Trajectory {
    Trajectory {
        id: id.into(),
        meta: TaskMeta {
            env_name: "test".into(),
            task_type: "t".into(),
            split: Split::Easy,
            variation_id: 0,
            seed: 0,
        },
        task_description: key.into(),
        turns: vec![Turn::user("o"), Turn::assistant("a"), Turn::user("o2")],
        outcome: OutcomeState::Resolved(if success {
            Outcome::success()
        } else {
            Outcome::failure()
        }),
    }
}

fn gaussian_unit(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    // Box-Muller on uniform draws.
    let mut u = || (rng.next_u64() >> 11) as f64 / (1u64 << 53) as f64;
    (0..dim)
        .map(|_| {
            let (a, b) = (u().max(1e-300), u());
            (-2.0 * a.ln()).sqrt() * (2.0 * std::f64::consts::PI * b).cos()
        })
        .collect()
}

struct Fixture {
    index: ExperienceIndex,
    vectors: Vec<(String, EmbeddingVector)>,
}

/// 200 unit vectors; a few are exact duplicates so tie groups occur.
fn fixture(seed: u64) -> Fixture {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut table = HashMap::new();
    let mut vectors: Vec<(String, EmbeddingVector)> = Vec::new();
    let mut trajectories = Vec::new();
    for i in 0..200 {
        let v = if i % 25 == 24 {
            vectors[i - 1 - (i % 3)].1.clone()
        } else {
            EmbeddingVector::normalized(&gaussian_unit(&mut rng, 32)).unwrap()
        };
        let id = format!("t{:03}", (i * 37) % 200);
        let key = format!("key-{i}");
        table.insert(key.clone(), v.clone());
        vectors.push((id.clone(), v));
        trajectories.push(traj(&id, &key, i % 3 != 0));
    }
    let store = TrajectoryStore::new("fixture", trajectories);
    let embedder = TableEmbedder { dim: 32, table };
    let index = build_index(
        &store,
        &IndexFilter::all(),
        KeyMode::TaskDescription,
        &embedder,
    )
    .unwrap();
    Fixture { index, vectors }
}

/// Exhaustive scan: score every vector, sort by descending score then id,
/// and keep ties (within 1e-9 of a neighbour) in ascending id order.
fn oracle(vectors: &[(String, EmbeddingVector)], q: &EmbeddingVector, k: usize) -> Vec<String> {
    let mut scored: Vec<(f64, &str)> = vectors
        .iter()
        .map(|(id, v)| {
            let s: f64 = v
                .values()
                .iter()
                .zip(q.values())
                .map(|(a, b)| *a as f64 * *b as f64)
                .sum();
            (s, id.as_str())
        })
        .collect();
    scored.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(b.1)));
    let mut out = Vec::new();
    let mut group: Vec<&str> = Vec::new();
    for (i, (score, id)) in scored.iter().enumerate() {
        if i > 0 && scored[i - 1].0 - score >= 1e-9 {
            group.sort();
            out.append(&mut group);
        }
        group.push(id);
    }
    group.sort();
    out.append(&mut group);
    out.into_iter().take(k).map(String::from).collect()
}

#[test]
fn top_k_matches_exhaustive_scan() {
    for seed in 0..5 {
        let f = fixture(seed);
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
        for qi in 0..20 {
            // Half the queries sit exactly on a stored vector (exact ties at the top).
            let q = if qi % 2 == 0 {
                f.vectors[(rng.next_u64() % 200) as usize].1.clone()
            } else {
                EmbeddingVector::normalized(&gaussian_unit(&mut rng, 32)).unwrap()
            };
            for k in [1, 2, 4] {
                let got: Vec<String> = f
                    .index
                    .search(&q, k, &Lexicographic, seed, &BTreeSet::new())
                    .unwrap()
                    .into_iter()
                    .map(|h| h.traj_id)
                    .collect();
                assert_eq!(
                    got,
                    oracle(&f.vectors, &q, k),
                    "seed {seed} query {qi} k {k}"
                );
            }
        }
    }
}

#[test]
fn k_edge_cases() {
    let f = fixture(9);
    let q = f.vectors[0].1.clone();
    let none = BTreeSet::new();
    assert!(f
        .index
        .search(&q, 0, &Lexicographic, 0, &none)
        .unwrap()
        .is_empty());
    assert_eq!(
        f.index
            .search(&q, 500, &Lexicographic, 0, &none)
            .unwrap()
            .len(),
        200
    );
    let hits = f.index.search(&q, 200, &Lexicographic, 0, &none).unwrap();
    assert!(hits.windows(2).all(|w| w[0].score >= w[1].score));
}

#[test]
fn seeded_shuffle_only_permutes_within_ties() {
    let f = fixture(3);
    let none = BTreeSet::new();
    for (_, q) in f.vectors.iter().skip(20).step_by(25).take(6) {
        let lex = f.index.search(q, 200, &Lexicographic, 0, &none).unwrap();
        for tie_seed in 0..5 {
            let a = f
                .index
                .search(q, 200, &SeededShuffle, tie_seed, &none)
                .unwrap();
            let b = f
                .index
                .search(q, 200, &SeededShuffle, tie_seed, &none)
                .unwrap();
            assert_eq!(a, b);
            let scores =
                |v: &[exprag_core::index::Hit]| v.iter().map(|h| h.score).collect::<Vec<_>>();
            assert_eq!(scores(&a), scores(&lex));
            let ids = |v: &[exprag_core::index::Hit]| {
                v.iter().map(|h| h.traj_id.clone()).collect::<BTreeSet<_>>()
            };
            assert_eq!(ids(&a), ids(&lex));
        }
    }
}

#[test]
fn seeded_shuffle_reorders_some_tie() {
    // Ten identical vectors: every ordering is a tie.
    let v = EmbeddingVector::normalized(&[1.0, 0.0, 0.0]).unwrap();
    let table: HashMap<String, EmbeddingVector> =
        (0..10).map(|i| (format!("k{i}"), v.clone())).collect();
    let store = TrajectoryStore::new(
        "ties",
        (0..10)
            .map(|i| traj(&format!("id{i}"), &format!("k{i}"), true))
            .collect(),
    );
    let e = TableEmbedder { dim: 3, table };
    let index = build_index(&store, &IndexFilter::all(), KeyMode::TaskDescription, &e).unwrap();
    let none = BTreeSet::new();
    let order = |ties: &dyn TieBreak, s| {
        index
            .search(&v, 10, ties, s, &none)
            .unwrap()
            .into_iter()
            .map(|h| h.traj_id)
            .collect::<Vec<_>>()
    };
    let lex = order(&Lexicographic, 0);
    assert_eq!(lex[0], "id0");
    assert!((0..5).any(|s| order(&SeededShuffle, s) != lex));
    assert_ne!(order(&SeededShuffle, 1), order(&SeededShuffle, 2));
}

#[test]
fn exclusion_and_filters() {
    let f = fixture(1);
    let q = f.vectors[5].1.clone();
    let top = f
        .index
        .search(&q, 1, &Lexicographic, 0, &BTreeSet::new())
        .unwrap();
    let excluded: BTreeSet<String> = [top[0].traj_id.clone()].into();
    let next = f.index.search(&q, 3, &Lexicographic, 0, &excluded).unwrap();
    assert!(next.iter().all(|h| h.traj_id != top[0].traj_id));

    let store = TrajectoryStore::new(
        "s",
        vec![
            traj("a", "put a mug in shelf.", true),
            traj("b", "put a cup in shelf.", false),
        ],
    );
    let e = LocalHashEmbedder::default();
    let only_ok = IndexFilter::all().with_outcomes([OutcomeClass::Success]);
    assert_eq!(
        build_index(&store, &only_ok, KeyMode::TaskDescription, &e)
            .unwrap()
            .len(),
        1
    );
    let hard_only = IndexFilter::splits([Split::Hard]);
    assert!(
        build_index(&store, &hard_only, KeyMode::TaskDescription, &e)
            .unwrap()
            .is_empty()
    );
}

#[test]
fn query_dimension_is_checked() {
    let f = fixture(2);
    let q = EmbeddingVector::normalized(&[1.0; 16]).unwrap();
    let err = f
        .index
        .search(&q, 2, &Lexicographic, 0, &BTreeSet::new())
        .unwrap_err();
    assert!(matches!(
        err,
        IndexError::DimensionMismatch {
            index: 32,
            query: 16
        }
    ));
}

#[test]
fn duplicate_ids_are_rejected() {
    let store = TrajectoryStore::new("d", vec![traj("x", "a b", true), traj("x", "c d", true)]);
    let err = build_index(
        &store,
        &IndexFilter::all(),
        KeyMode::TaskDescription,
        &LocalHashEmbedder::default(),
    );
    assert!(matches!(err, Err(IndexError::DuplicateId(_))));
}

#[test]
fn persisted_index_answers_identically() {
    let f = fixture(4);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("i.bin");
    f.index.save(&path).unwrap();
    let back = ExperienceIndex::load(&path).unwrap();
    assert_eq!(back, f.index);
    let q = f.vectors[7].1.clone();
    let none = BTreeSet::new();
    assert_eq!(
        back.search(&q, 4, &Lexicographic, 0, &none).unwrap(),
        f.index.search(&q, 4, &Lexicographic, 0, &none).unwrap()
    );
}

// Calibration of the local hash embedder on the mini-world task phrasings:
// every description must be its own unique nearest neighbour, otherwise a
// static query could retrieve a different task first.
#[test]
fn local_hash_separates_miniworld_descriptions() {
    let e = LocalHashEmbedder::default();
    let mut descriptions: Vec<String> = Vec::new();
    for kind in TaskKind::ALL {
        for o in OBJECTS {
            for r in TARGET_RECEPTACLES {
                descriptions.push(kind.describe(o, r));
            }
        }
    }
    let vecs: Vec<EmbeddingVector> = descriptions.iter().map(|d| e.embed(d).unwrap()).collect();
    let mut worst: f64 = -1.0;
    for (i, a) in vecs.iter().enumerate() {
        assert!((dot(a.values(), a.values()) - 1.0).abs() < 1e-6);
        for (j, b) in vecs.iter().enumerate() {
            if i != j {
                worst = worst.max(dot(a.values(), b.values()));
            }
        }
    }
    // Closest pairs differ only in the last word: 6 of 7 bigrams shared and
    // no bucket collisions at dim 256.
    assert!(
        (worst - 6.0 / 7.0).abs() < 1e-6,
        "closest distinct pair scores {worst}"
    );
    assert_eq!(enumerate_specs(Split::Hard, 0).len(), 54);
}
