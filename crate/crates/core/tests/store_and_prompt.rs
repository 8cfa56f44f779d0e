use exprag_core::prompt::{
    assemble_context, build_dynamic_query, build_memory_block, build_static_query, MemoryBlock,
    PromptTemplate,
};
use exprag_core::traj::{
    format_turns, parse_formatted, Outcome, OutcomeState, Role, Split, TaskMeta, TrajFormat,
    Trajectory, TrajectoryStore, Turn,
};
use proptest::prelude::*;

fn arb_text() -> impl Strategy<Value = String> {
    // Quotes, backslashes, newlines, unicode and the format's own markers.
    prop_oneof![
        "[a-z ]{1,20}",
        "[ -~]{1,30}",
        Just("line one\nline two".to_string()),
        Just("quote \" and \\ backslash".to_string()),
        Just("héllo wörld ✓".to_string()),
        Just("\"role\": \"user\"".to_string()),
    ]
}

fn arb_trajectory() -> impl Strategy<Value = Trajectory> {
    (
        "[a-z0-9-]{1,12}",
        prop::sample::select(vec![
            "pick_and_place",
            "pick_heat_then_place",
            "custom_task",
        ]),
        0u32..100,
        any::<u64>(),
        arb_text(),
        prop::collection::vec((arb_text(), arb_text()), 0..6),
        prop::option::of(any::<bool>()),
        any::<bool>(),
    )
        .prop_map(
            |(id, task_type, variation_id, seed, desc, steps, outcome, system)| {
                let split = if task_type == "pick_and_place" {
                    Split::Easy
                } else {
                    Split::Hard
                };
                let mut turns = Vec::new();
                if system {
                    turns.push(Turn::system("sys"));
                }
                turns.push(Turn::user(format!("Your task is to: {desc}")));
                for (a, o) in steps {
                    turns.push(Turn::assistant(a));
                    turns.push(Turn::user(o));
                }
                Trajectory {
                    id,
                    meta: TaskMeta {
                        env_name: "miniworld".into(),
                        task_type: task_type.into(),
                        split,
                        variation_id,
                        seed,
                    },
                    task_description: desc,
                    turns,
                    outcome: match outcome {
                        None => OutcomeState::Pending,
                        Some(true) => OutcomeState::Resolved(Outcome::success()),
                        Some(false) => OutcomeState::Resolved(Outcome::failure()),
                    },
                }
            },
        )
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(500))]

    #[test]
    fn store_round_trip_and_compact_is_smallest(t in arb_trajectory()) {
        let line = t.to_record();
        prop_assert!(!line.contains('\n'));
        let back = Trajectory::from_record(&line).unwrap();
        prop_assert_eq!(&back, &t);
        prop_assert_eq!(back.to_record(), line);

        let chat = format_turns(&t.turns, TrajFormat::ChatJson);
        let compact = format_turns(&t.turns, TrajFormat::CompactJson);
        prop_assert!(compact.len() <= chat.len());
        for fmt in [TrajFormat::ChatJson, TrajFormat::AgenticJson, TrajFormat::CompactJson] {
            let text = format_turns(&t.turns, fmt);
            prop_assert_eq!(parse_formatted(&text, fmt).unwrap(), t.turns.clone());
        }
    }

    #[test]
    fn dynamic_query_extends_across_prefixes(t in arb_trajectory()) {
        let n = t.observation_count();
        let mut previous: Option<String> = None;
        for step in 1..=n {
            let q = build_dynamic_query(&t.partial_history(step).unwrap()).unwrap();
            if let Some(p) = &previous {
                // Chat-JSON closes with "]", so compare the open prefix.
                prop_assert!(q.starts_with(p.trim_end_matches(']')));
            }
            previous = Some(q);
        }
    }
}

#[test]
fn store_file_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("s.jsonl");
    let t = Trajectory {
        id: "a".into(),
        meta: TaskMeta {
            env_name: "miniworld".into(),
            task_type: "pick_and_place".into(),
            split: Split::Easy,
            variation_id: 1,
            seed: 2,
        },
        task_description: "put a mug in shelf.".into(),
        turns: vec![Turn::user("x Your task is to: put a mug in shelf.")],
        outcome: OutcomeState::Resolved(Outcome::success()),
    };
    let store = TrajectoryStore::new(
        "s",
        vec![
            t.clone(),
            Trajectory {
                id: "b".into(),
                ..t
            },
        ],
    );
    store.save(&path).unwrap();
    let back = TrajectoryStore::load(&path).unwrap();
    assert_eq!(back.trajectories, store.trajectories);
    assert_eq!(std::fs::read_to_string(&path).unwrap(), store.to_jsonl());
}

fn finished(id: &str, success: bool, action: &str) -> Trajectory {
    Trajectory {
        id: id.into(),
        meta: TaskMeta {
            env_name: "miniworld".into(),
            task_type: "pick_and_place".into(),
            split: Split::Easy,
            variation_id: 0,
            seed: 0,
        },
        task_description: "put a mug in shelf.".into(),
        turns: vec![
            Turn::user("obs"),
            Turn::assistant(action),
            Turn::user("done"),
        ],
        outcome: OutcomeState::Resolved(if success {
            Outcome::success()
        } else {
            Outcome::failure()
        }),
    }
}

#[test]
fn memory_block_template() {
    let s1 = finished("s1", true, "a1");
    let s2 = finished("s2", true, "a2");
    let f1 = finished("f1", false, "b1");
    let chat = |t: &Trajectory| format_turns(&t.turns, TrajFormat::ChatJson);

    let both = build_memory_block(&[(&s1, 0.4), (&f1, 0.9), (&s2, 0.7)], TrajFormat::ChatJson);
    let expected = format!(
        "These are examples of successful trajectories: {}\n{}. These are examples of unsuccessful trajectories: {}.",
        chat(&s2),
        chat(&s1),
        chat(&f1)
    );
    assert_eq!(both.rendered, expected);

    let only_ok = build_memory_block(&[(&s1, 0.5)], TrajFormat::ChatJson);
    assert_eq!(
        only_ok.rendered,
        format!(
            "These are examples of successful trajectories: {}.",
            chat(&s1)
        )
    );

    let only_bad = build_memory_block(&[(&f1, 0.5)], TrajFormat::Textual);
    assert_eq!(
        only_bad.rendered,
        "These are examples of unsuccessful trajectories: User: obs\nAssistant: b1\nUser: done."
    );

    let none = build_memory_block(&[], TrajFormat::ChatJson);
    assert_eq!(none.rendered, "");
    assert!(none.is_empty());
}

#[test]
fn context_assembly() {
    let tpl = PromptTemplate::new("x", "RULES");
    let history = finished("h", true, "a").partial_history(1).unwrap();
    let plain =
        assemble_context(&tpl, &MemoryBlock::empty(TrajFormat::ChatJson), &history).unwrap();
    assert_eq!(plain[0], Turn::system("RULES"));
    assert_eq!(plain.len(), 2);

    let mem = build_memory_block(&[(&finished("s", true, "a"), 1.0)], TrajFormat::ChatJson);
    let with = assemble_context(&tpl, &mem, &history).unwrap();
    assert_eq!(with[0].content, format!("RULES\n\n{}", mem.rendered));
    assert_eq!(with[1].role, Role::User);

    let at_action = Trajectory {
        turns: vec![Turn::user("o"), Turn::assistant("a")],
        ..history
    };
    assert!(assemble_context(&tpl, &mem, &at_action).is_err());
    assert!(build_static_query("  ").is_err());
    assert_eq!(
        build_static_query("put a mug in shelf.").unwrap(),
        "put a mug in shelf."
    );
}

#[test]
fn builtin_templates_exist() {
    for name in PromptTemplate::builtin_names() {
        let t = PromptTemplate::builtin(name).unwrap();
        assert!(!t.system_text.ends_with('\n'));
        assert!(
            t.system_text.contains("Only provide one single command"),
            "{name}"
        );
    }
    assert!(PromptTemplate::builtin("nethack").is_err());
}
