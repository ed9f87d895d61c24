#![no_main]

use libfuzzer_sys::fuzz_target;
use tokenmoe::envs::{format_baselines, parse_baselines};

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        if let Ok(rows) = parse_baselines(text) {
            assert_eq!(parse_baselines(&format_baselines(&rows)).expect("round trip"), rows);
        }
    }
});
