#![no_main]
use libfuzzer_sys::fuzz_target;

use bss_core::io::{parse_binary_matrix, write_binary_matrix};

fuzz_target!(|data: &[u8]| {
    // Anything accepted must re-encode to the same bytes.
    if let Ok(m) = parse_binary_matrix(data) {
        assert_eq!(write_binary_matrix(&m), data);
    }
});
