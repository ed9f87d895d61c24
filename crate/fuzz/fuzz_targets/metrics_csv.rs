#![no_main]

use libfuzzer_sys::fuzz_target;
use tokenmoe::rlcore::{metrics_csv_string, parse_metrics_csv};

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        if let Ok(rows) = parse_metrics_csv(text) {
            assert_eq!(parse_metrics_csv(&metrics_csv_string(&rows)).expect("round trip"), rows);
        }
    }
});
