#![no_main]

use libfuzzer_sys::fuzz_target;
use snn_minimax::RunConfig;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    if let Ok(cfg) = RunConfig::parse(text) {
        if cfg.validate().is_ok() {
            cfg.architecture().expect("validated config has a usable model");
        }
    }
});
