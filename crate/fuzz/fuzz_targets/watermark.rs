#![no_main]

use awenc_core::watermark::Watermark;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(w) = Watermark::from_bytes(data) {
        let again = Watermark::from_bytes(&w.to_bytes()).expect("re-encoded watermark decodes");
        assert_eq!(again.to_bytes(), w.to_bytes());
    }
});
