#![no_main]
use libfuzzer_sys::fuzz_target;

use deocc_core::datagen::storage::{decode_mask_png, encode_mask_png};

fuzz_target!(|data: &[u8]| {
    if data.len() > 1 << 16 {
        return;
    }
    if let Ok(m) = decode_mask_png(data) {
        assert_eq!(decode_mask_png(&encode_mask_png(&m)).unwrap(), m);
    }
});
