#![no_main]
use libfuzzer_sys::fuzz_target;

use bss_core::io::parse_dataset;
use bss_core::ResponseKind;

// First byte picks the response kind and intercept handling.
fuzz_target!(|data: &[u8]| {
    let Some((&flags, rest)) = data.split_first() else { return };
    let Ok(text) = std::str::from_utf8(rest) else { return };
    let kind = if flags & 1 == 0 { ResponseKind::Continuous } else { ResponseKind::Binary };
    let _ = parse_dataset(text, "y", flags & 2 != 0, kind);
});
