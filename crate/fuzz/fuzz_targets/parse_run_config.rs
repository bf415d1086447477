#![no_main]
use libfuzzer_sys::fuzz_target;

fuzz_target!(|text: &str| {
    if let Ok(cfg) = bss_core::pipeline::parse_run_config(text) {
        let _ = cfg.validate();
    }
});
