#![no_main]

use awenc_core::data::Dataset;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(d) = Dataset::from_bytes(data) {
        let bytes = d.to_bytes();
        let again = Dataset::from_bytes(&bytes).expect("re-encoded dataset decodes");
        assert_eq!(again.to_bytes(), bytes);
    }
});
