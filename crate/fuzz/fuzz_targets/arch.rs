#![no_main]

use libfuzzer_sys::fuzz_target;
use snn_minimax::snn::Architecture;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    if let Ok(arch) = text.parse::<Architecture>() {
        let shown = arch.to_string();
        let back: Architecture = shown.parse().expect("display form must parse");
        assert_eq!(back, arch);
        arch.geometries().expect("parsed architecture has valid geometry");
    }
});
