#![no_main]
use libfuzzer_sys::fuzz_target;

use deocc_core::datagen::storage::decode_image_png;

fuzz_target!(|data: &[u8]| {
    if data.len() > 1 << 16 {
        return;
    }
    if let Ok(img) = decode_image_png(data) {
        assert!(img.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }
});
