#![no_main]
use coarsefine::encoder::{read_checkpoint, read_checkpoint_index};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let _ = read_checkpoint_index(data);
    let _ = read_checkpoint(data);
});
