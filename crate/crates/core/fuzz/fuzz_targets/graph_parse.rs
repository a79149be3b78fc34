#![no_main]

use libfuzzer_sys::fuzz_target;

// The parser must reject malformed edge lists with an error, never panic.
fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        let _ = quorum_ra::graph::parse_graph_file(text);
    }
});
