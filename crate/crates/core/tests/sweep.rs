use std::path::{Path, PathBuf};

use exprag_core::experiment::{
    default_expert_store, read_cells, report, run_sweep, write_outputs, Composition, EvalSplit,
    ReportStyle, ResultCell, SweepOutput, SweepSpec,
};
use exprag_core::policy::PolicyKind;
use exprag_core::rollout::RetrievalMode;

fn expert_store(dir: &Path) -> PathBuf {
    let path = dir.join("expert.jsonl");
    default_expert_store(4).unwrap().save(&path).unwrap();
    path
}

fn small_spec(store: PathBuf) -> SweepSpec {
    SweepSpec {
        store: Some(store),
        policy: PolicyKind::MemoryFollower,
        ks: vec![0, 1, 2],
        modes: vec![RetrievalMode::Static, RetrievalMode::Dynamic],
        compositions: vec![Composition::All, Composition::Hard, Composition::Mismatched],
        seeds: vec![1, 2],
        eval_split: EvalSplit::All,
        episodes_per_seed: 4,
        max_steps: 30,
        workers: 3,
        ..SweepSpec::default()
    }
}

fn serialized(out: &SweepOutput) -> (String, String) {
    let dir = tempfile::tempdir().unwrap();
    write_outputs(out, dir.path()).unwrap();
    let read = |n: &str| std::fs::read_to_string(dir.path().join(n)).unwrap();
    (
        read("cells.jsonl") + &read("table.csv"),
        read("episodes.jsonl"),
    )
}

fn cell(
    out: &SweepOutput,
    mode: RetrievalMode,
    k: usize,
    c: Composition,
    s: EvalSplit,
) -> &ResultCell {
    out.table
        .cells
        .iter()
        .find(|x| x.mode == mode && x.k == k && x.composition == c && x.eval_split == s)
        .unwrap_or_else(|| panic!("missing cell {mode} {k} {c:?} {s:?}"))
}

#[test]
fn sweep_grid_is_deterministic_and_consistent() {
    let dir = tempfile::tempdir().unwrap();
    let spec = small_spec(expert_store(dir.path()));
    let a = run_sweep(&spec).unwrap();
    let b = run_sweep(&SweepSpec {
        workers: 1,
        ..spec.clone()
    })
    .unwrap();
    assert_eq!(serialized(&a), serialized(&b));

    // k = 0 only ever appears as the no-retrieval row.
    assert!(a
        .table
        .cells
        .iter()
        .all(|c| (c.k == 0) == (c.mode == RetrievalMode::None)));
    // Mismatched rows evaluate hard tasks only.
    assert!(a
        .table
        .cells
        .iter()
        .filter(|c| c.composition == Composition::Mismatched)
        .all(|c| c.eval_split == EvalSplit::Hard));

    // The all column combines easy and hard by episode count, seed by seed.
    for c in a
        .table
        .cells
        .iter()
        .filter(|c| c.eval_split == EvalSplit::All)
    {
        let easy = cell(&a, c.mode, c.k, c.composition, EvalSplit::Easy);
        let hard = cell(&a, c.mode, c.k, c.composition, EvalSplit::Hard);
        for i in 0..c.per_seed_success.len() {
            let combined = (easy.per_seed_success[i] + hard.per_seed_success[i]) / 2.0;
            assert!((c.per_seed_success[i] - combined).abs() < 1e-9);
        }
        assert_eq!(c.n_episodes, easy.n_episodes + hard.n_episodes);
        assert_eq!(c.n_episodes, 2 * 2 * 4);
    }

    // Retrieval of hard experience solves hard tasks the baseline cannot.
    let base = cell(
        &a,
        RetrievalMode::None,
        0,
        Composition::All,
        EvalSplit::Hard,
    );
    let with = cell(
        &a,
        RetrievalMode::Static,
        1,
        Composition::Hard,
        EvalSplit::Hard,
    );
    let mism = cell(
        &a,
        RetrievalMode::Static,
        1,
        Composition::Mismatched,
        EvalSplit::Hard,
    );
    assert_eq!(with.mean_success, 100.0);
    assert_eq!(base.mean_success, 0.0);
    assert_eq!(mism.mean_success, 0.0);

    // The baseline row matches a sweep that only asks for k = 0.
    let only_base = run_sweep(&SweepSpec {
        ks: vec![0],
        compositions: vec![Composition::All],
        ..spec
    })
    .unwrap();
    for c in &only_base.table.cells {
        assert_eq!(
            c,
            cell(&a, RetrievalMode::None, 0, Composition::All, c.eval_split)
        );
    }
}

#[test]
fn reports_reparse() {
    let dir = tempfile::tempdir().unwrap();
    let mut spec = small_spec(expert_store(dir.path()));
    spec.modes = vec![RetrievalMode::Static];
    spec.ks = vec![0, 1];
    let out = run_sweep(&spec).unwrap();
    let out_dir = dir.path().join("out");
    write_outputs(&out, &out_dir).unwrap();
    assert_eq!(read_cells(out_dir.join("cells.jsonl")).unwrap(), out.table);

    let csv = report(&out.table, ReportStyle::Csv);
    let mut lines = csv.lines();
    assert_eq!(lines.next().unwrap(), "mode,k,composition,easy,hard,all");
    let rows: Vec<Vec<&str>> = lines.map(|l| l.split(',').collect()).collect();
    assert_eq!(rows.len(), 6);
    for row in &rows {
        assert_eq!(row.len(), 6);
        for (split, text) in [EvalSplit::Easy, EvalSplit::Hard, EvalSplit::All]
            .into_iter()
            .zip(&row[3..])
        {
            if text.is_empty() {
                continue;
            }
            let (m, s) = text.split_once(" ± ").unwrap();
            let mode: RetrievalMode = row[0].parse().unwrap();
            let k: usize = row[1].parse().unwrap();
            let comp = out
                .table
                .cells
                .iter()
                .find(|c| {
                    c.mode == mode
                        && c.k == k
                        && c.composition.as_str() == row[2]
                        && c.eval_split == split
                })
                .unwrap();
            assert!((m.parse::<f64>().unwrap() - comp.mean_success).abs() <= 0.005);
            assert!((s.parse::<f64>().unwrap() - comp.std_success).abs() <= 0.005);
        }
    }

    let md = report(&out.table, ReportStyle::Markdown);
    let md_lines: Vec<&str> = md.lines().collect();
    assert_eq!(md_lines.len(), 2 + 6);
    assert!(md_lines
        .iter()
        .all(|l| l.starts_with('|') && l.matches('|').count() == 7));
    let mismatched = md_lines.iter().find(|l| l.contains("mismatched")).unwrap();
    assert_eq!(mismatched.matches("| - ").count(), 2);
}

#[test]
fn config_file_resolves_relative_store() {
    let dir = tempfile::tempdir().unwrap();
    expert_store(dir.path());
    let path = dir.path().join("sweep.toml");
    std::fs::write(
        &path,
        "store = \"expert.jsonl\"\nks = [0]\nseeds = [5]\nepisodes_per_seed = 2\n",
    )
    .unwrap();
    let spec = SweepSpec::load(&path).unwrap();
    assert_eq!(
        spec.store.as_deref(),
        Some(dir.path().join("expert.jsonl").as_path())
    );
    let out = run_sweep(&spec).unwrap();
    assert_eq!(out.table.cells.len(), 3);
    assert_eq!(out.episodes.len(), 4);

    std::fs::write(&path, "kz = [0]\n").unwrap();
    assert!(SweepSpec::load(&path).is_err());
}
