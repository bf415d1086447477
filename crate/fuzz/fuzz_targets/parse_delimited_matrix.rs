#![no_main]
use libfuzzer_sys::fuzz_target;

fuzz_target!(|text: &str| {
    if let Ok(m) = bss_core::io::parse_delimited_matrix(text) {
        assert_eq!(m.names.len(), m.data.ncols());
    }
});
