#![no_main]

use awenc_core::verification::VerificationReport;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        let _ = VerificationReport::from_json(text);
    }
});
