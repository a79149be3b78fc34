#![no_main]

use libfuzzer_sys::fuzz_target;

// A lone override spec applied to the empty config: any dotted path and any
// value payload must parse cleanly or fail cleanly.
fuzz_target!(|data: &[u8]| {
    if let Ok(spec) = std::str::from_utf8(data) {
        let _ = quorum_ra::config::parse_config_text("", &[spec.to_string()]);
    }
});
