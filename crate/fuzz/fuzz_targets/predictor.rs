#![no_main]
use coarsefine::predictor::read_predictor;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let _ = read_predictor(data);
});
