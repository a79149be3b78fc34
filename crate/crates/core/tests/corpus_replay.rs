//! Replays the checked-in fuzz corpus through the same entry points the
//! fuzz targets drive, so every seed is exercised by a plain test run.

use std::fs;
use std::path::PathBuf;

fn corpus(target: &str) -> Vec<(String, Vec<u8>)> {
    let dir = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("fuzz/corpus").join(target);
    let mut seeds: Vec<(String, Vec<u8>)> = fs::read_dir(&dir)
        .unwrap_or_else(|e| panic!("missing corpus dir {}: {e}", dir.display()))
        .map(|entry| {
            let entry = entry.unwrap();
            let name = entry.file_name().into_string().unwrap();
            (name, fs::read(entry.path()).unwrap())
        })
        .collect();
    seeds.sort();
    assert!(!seeds.is_empty(), "empty corpus for {target}");
    seeds
}

#[test]
fn graph_parse_seeds_never_panic() {
    for (name, bytes) in corpus("graph_parse") {
        if let Ok(text) = std::str::from_utf8(&bytes) {
            let outcome = quorum_ra::graph::parse_graph_file(text);
            // The well-formed seeds must keep parsing.
            match name.as_str() {
                "ring" | "weighted" => assert!(outcome.is_ok(), "{name} stopped parsing"),
                "mixed" | "bad-count" => assert!(outcome.is_err(), "{name} started parsing"),
                _ => {}
            }
        }
    }
}

#[test]
fn config_parse_seeds_never_panic() {
    for (name, bytes) in corpus("config_parse") {
        if let Ok(text) = std::str::from_utf8(&bytes) {
            let outcome = quorum_ra::config::parse_config_text(text, &[]);
            match name.as_str() {
                "typical" | "graph-section" | "conflict" => {
                    assert!(outcome.is_ok(), "{name} stopped parsing")
                }
                "truncated" => assert!(outcome.is_err(), "{name} started parsing"),
                _ => {}
            }
        }
    }
}

#[test]
fn override_parse_seeds_never_panic() {
    for (name, bytes) in corpus("override_parse") {
        if let Ok(spec) = std::str::from_utf8(&bytes) {
            let outcome = quorum_ra::config::parse_config_text("", &[spec.to_string()]);
            match name.as_str() {
                "scalar" | "dotted" | "array" | "quoted" => {
                    assert!(outcome.is_ok(), "{name} stopped parsing")
                }
                "empty-segment" => assert!(outcome.is_err(), "{name} started parsing"),
                _ => {}
            }
        }
    }
}
