#![no_main]

use libfuzzer_sys::fuzz_target;

// Arbitrary TOML must come back as a config or an error, never a panic.
fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        let _ = quorum_ra::config::parse_config_text(text, &[]);
    }
});
