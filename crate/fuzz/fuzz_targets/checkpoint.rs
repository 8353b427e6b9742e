#![no_main]

use libfuzzer_sys::fuzz_target;
use snn_minimax::data::Checkpoint;

fuzz_target!(|data: &[u8]| {
    let Ok(ck) = Checkpoint::from_bytes(data) else {
        return;
    };
    // compare encodings, not values, so NaN weights don't trip the check
    let bytes = ck.to_bytes();
    let again = Checkpoint::from_bytes(&bytes).expect("re-encoded checkpoint must decode");
    assert_eq!(again.to_bytes(), bytes);
    let _ = ck.network();
});
