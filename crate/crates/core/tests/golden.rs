//! End-to-end run compared against checked-in output. Regenerate with
//! `UPDATE_GOLDEN=1 cargo test -p nbmcts-core --test golden`.

mod common;

use nbmcts_core::persist;

#[test]
fn golden_snapshot_and_answer() {
    let (doc, answer, _) = common::golden_run();
    let answer = answer.unwrap_or_default();
    let dir = common::golden_dir();
    let snap_path = dir.join("e2e_snapshot.json");
    let answer_path = dir.join("e2e_answer.txt");
    if std::env::var_os("UPDATE_GOLDEN").is_some() {
        std::fs::create_dir_all(&dir).unwrap();
        std::fs::write(&snap_path, &doc).unwrap();
        std::fs::write(&answer_path, format!("{answer}\n")).unwrap();
    }
    let expected = std::fs::read_to_string(&snap_path).expect("golden snapshot missing; run with UPDATE_GOLDEN=1");
    assert!(expected == doc, "snapshot differs from {}", snap_path.display());
    assert_eq!(std::fs::read_to_string(&answer_path).unwrap().trim_end(), answer);
}

#[test]
fn golden_run_is_repeatable_and_reloadable() {
    let (a, ans_a, _) = common::golden_run();
    let (b, ans_b, _) = common::golden_run();
    assert_eq!(a, b);
    assert_eq!(ans_a, ans_b);
    let tree = persist::load_tree(&a).unwrap();
    assert_eq!(tree.prompt, common::golden_prompt());
    assert_eq!(persist::snapshot_tree(&tree), a);
}
