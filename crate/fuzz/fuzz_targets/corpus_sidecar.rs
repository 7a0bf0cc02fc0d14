#![no_main]
use coarsefine::datagen::Corpus;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(corpus) = Corpus::from_sidecar(data) {
        assert_eq!(corpus.to_sidecar(), data);
    }
});
