#![no_main]
use coarsefine::store::EmbeddingStore;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(store) = EmbeddingStore::decode(data) {
        let again = EmbeddingStore::decode(&store.encode()).expect("re-encoded store decodes");
        assert!(again == store);
    }
});
