#![no_main]
use libfuzzer_sys::fuzz_target;

use deocc_core::datagen::storage::DatasetIndex;

fuzz_target!(|data: &[u8]| {
    if let Ok(idx) = DatasetIndex::parse(data) {
        for id in &idx.samples {
            assert!(!id.contains('/') && !id.contains('.'));
        }
    }
});
