#![no_main]
use libfuzzer_sys::fuzz_target;

use deocc_core::datagen::storage::{decode_label_png, encode_label_png};

fuzz_target!(|data: &[u8]| {
    let Some((&parts, png)) = data.split_first() else { return };
    if png.len() > 1 << 16 {
        return;
    }
    if let Ok(p) = decode_label_png(png, parts as usize) {
        assert_eq!(decode_label_png(&encode_label_png(&p), parts as usize).unwrap(), p);
    }
});
