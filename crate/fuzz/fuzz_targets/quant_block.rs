#![no_main]
use coarsefine::numerics::{dequantize_int4, QuantBlock};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(block) = QuantBlock::from_bytes(data) {
        assert_eq!(block.to_bytes(), data);
        let _ = dequantize_int4(&block);
    }
});
