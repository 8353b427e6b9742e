#![no_main]

use libfuzzer_sys::fuzz_target;
use snn_minimax::data::parse_idx_images;

fuzz_target!(|data: &[u8]| {
    if let Ok(img) = parse_idx_images(data) {
        // header plus exactly one byte per pixel, nothing left over
        assert_eq!(img.pixels.len(), img.count * img.rows * img.cols);
        assert_eq!(data.len(), 16 + img.pixels.len());
    }
});
