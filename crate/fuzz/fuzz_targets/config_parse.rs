#![no_main]
use libfuzzer_sys::fuzz_target;

use deocc_core::harness::TrainConfig;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(cfg) = TrainConfig::parse(text) {
        // Whatever parses must survive its own serialisation.
        let again = TrainConfig::parse(&cfg.to_text()).expect("round trip");
        assert_eq!(again.fingerprint(), cfg.fingerprint());
    }
});
