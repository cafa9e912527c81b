#![no_main]
use libfuzzer_sys::fuzz_target;

use deocc_core::harness::Checkpoint;
use deocc_core::maskcomp::Stage1Model;
use deocc_core::recovery::RecoveryModel;

fuzz_target!(|data: &[u8]| {
    if let Ok(ck) = Checkpoint::decode(data) {
        assert_eq!(Checkpoint::decode(&ck.encode()).unwrap(), ck);
        let _ = Stage1Model::from_checkpoint(&ck);
        let _ = RecoveryModel::from_checkpoint(&ck);
    }
});
