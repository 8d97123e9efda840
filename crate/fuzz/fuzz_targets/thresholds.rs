#![no_main]

use awenc_core::pipeline::Thresholds;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        let _ = Thresholds::from_json(text);
    }
});
