use coarsefine::encoder::{ActivationSnapshot, Modality};
use coarsefine::numerics::{l2_normalize, Rng};
use coarsefine::store::*;

fn item(id: u64, exit: usize, rng: &mut Rng) -> (EmbeddingRecord, ActivationSnapshot) {
    let e: Vec<f32> = (0..32).map(|_| rng.normal() as f32).collect();
    let h: Vec<f32> = (0..64).map(|_| rng.normal() as f32).collect();
    let rec = EmbeddingRecord { item_id: id, modality: Modality::A, exit, embedding: l2_normalize(&e), state: RecordState::Coarse };
    (rec, ActivationSnapshot { item_id: id, layer: exit, hidden: h })
}

fn populate(store: &mut EmbeddingStore, n: u64) {
    let mut rng = Rng::new(5);
    for id in 0..n {
        let (r, s) = item(id, 1 + (id as usize % 12), &mut rng);
        store.put_coarse(&r, &s).unwrap();
    }
}

#[test]
fn saved_store_reloads_identically_and_matches_report() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("s.emst");
    let mut store = EmbeddingStore::create(&path, StoreOptions::new(12)).unwrap();
    populate(&mut store, 100);
    store.upgrade_to_fine(7, &store.get(8).unwrap().0.embedding.clone()).unwrap();
    store.save().unwrap();
    let on_disk = std::fs::metadata(&path).unwrap().len() as usize;
    assert_eq!(store.storage_report().total_bytes, on_disk);
    let back = EmbeddingStore::open(&path).unwrap();
    assert_eq!(back, store);
    assert_eq!(back.encode(), std::fs::read(&path).unwrap());
}

#[test]
fn append_log_survives_reopen_without_save() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("s.emst");
    let mut store = EmbeddingStore::create(&path, StoreOptions::new(12)).unwrap();
    populate(&mut store, 10);
    store.upgrade_to_fine(2, &store.get(3).unwrap().0.embedding.clone()).unwrap();
    let back = EmbeddingStore::open(&path).unwrap();
    assert_eq!(back, store);
    back.integrity_check().unwrap();
}

#[test]
fn torn_tail_is_dropped() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("s.emst");
    let mut store = EmbeddingStore::create(&path, StoreOptions::new(12)).unwrap();
    populate(&mut store, 5);
    let full = std::fs::read(&path).unwrap();
    // cut into the last cache block
    std::fs::write(&path, &full[..full.len() - 7]).unwrap();
    let mut back = EmbeddingStore::open(&path).unwrap();
    assert!(back.dropped_tail_bytes() > 0);
    assert_eq!(back.len(), 4);
    back.integrity_check().unwrap();
    // a flipped byte in the final record block drops that block instead
    let mut bad = full.clone();
    let n = bad.len();
    bad[n - 100] ^= 0x55;
    let decoded = EmbeddingStore::decode(&bad).unwrap();
    assert!(decoded.len() < 5 && decoded.dropped_tail_bytes() > 0);
    // appending after a torn tail overwrites it
    let mut rng = Rng::new(99);
    let (r, s) = item(50, 4, &mut rng);
    back.put_coarse(&r, &s).unwrap();
    let again = EmbeddingStore::open(&path).unwrap();
    assert_eq!(again.dropped_tail_bytes(), 0);
    assert_eq!(again.len(), 5);
    again.integrity_check().unwrap();
}

#[test]
fn appends_after_save_replace_the_index() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("s.emst");
    let mut store = EmbeddingStore::create(&path, StoreOptions::new(12)).unwrap();
    populate(&mut store, 4);
    store.save().unwrap();
    let mut store = EmbeddingStore::open(&path).unwrap();
    let mut rng = Rng::new(1);
    let (r, s) = item(9, 2, &mut rng);
    store.put_coarse(&r, &s).unwrap();
    let back = EmbeddingStore::open(&path).unwrap();
    assert_eq!(back, store);
    assert_eq!(back.dropped_tail_bytes(), 0);
}
