mod support;

use support::toy::{indexed, recall_at_1, top_k_mismatches};

#[test]
fn planted_pages_and_chunks_rank_first() {
    let dir = tempfile::tempdir().unwrap();
    let toy = indexed(dir.path());
    let recall = recall_at_1(&toy);
    assert_eq!(recall.len(), 5);
    for (name, page, chunk) in recall {
        assert!(page, "{name}: planted page is not the top page hit");
        assert!(chunk, "{name}: planted chunk is not the top text hit");
    }
}

#[test]
fn top_k_agrees_with_full_scan() {
    let dir = tempfile::tempdir().unwrap();
    let toy = indexed(dir.path());
    assert_eq!(top_k_mismatches(&toy.index, 1000, 11), 0);
}

#[test]
fn index_survives_a_save_load_cycle() {
    let dir = tempfile::tempdir().unwrap();
    let toy = indexed(dir.path());
    let p = dir.path().join("copy.bin");
    pbf_rag_core::index::save_index(&toy.index, &p).unwrap();
    let back = pbf_rag_core::index::load_index(&p).unwrap();
    assert_eq!(back.entries().collect::<Vec<_>>(), toy.index.entries().collect::<Vec<_>>());
}
