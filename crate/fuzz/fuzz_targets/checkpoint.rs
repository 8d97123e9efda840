#![no_main]

use awenc_core::models::checkpoint::{decode, encode};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok((kind, mlp)) = decode(data) {
        let bytes = encode(kind, &mlp);
        let (k2, m2) = decode(&bytes).expect("re-encoded checkpoint decodes");
        assert_eq!(k2, kind);
        assert_eq!(encode(k2, &m2), bytes);
    }
});
