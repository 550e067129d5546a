use std::path::Path;

#[test]
fn every_chapter_is_doc_tested() {
    let root = Path::new(env!("CARGO_MANIFEST_DIR"));
    let summary = std::fs::read_to_string(root.join("../../book/src/SUMMARY.md")).unwrap();
    let lib = std::fs::read_to_string(root.join("src/lib.rs")).unwrap();
    let chapters: Vec<&str> = summary
        .split("](")
        .skip(1)
        .filter_map(|s| s.split(')').next())
        .collect();
    assert!(chapters.len() >= 9);
    for c in chapters {
        assert!(root.join("../../book/src").join(c).exists(), "{c} missing");
        assert!(lib.contains(&format!("book/src/{c}\")")), "{c} is not included in the doc-test harness");
    }
}
