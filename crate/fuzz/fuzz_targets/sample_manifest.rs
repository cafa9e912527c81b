#![no_main]
use libfuzzer_sys::fuzz_target;

use deocc_core::datagen::storage::SampleManifest;

fuzz_target!(|data: &[u8]| {
    let _ = SampleManifest::parse(data);
});
