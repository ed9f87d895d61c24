#![no_main]

use libfuzzer_sys::fuzz_target;
use tokenmoe::evalstats::{parse_report_csv, report_csv_string, report_svg};

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        if let Ok(rows) = parse_report_csv(text) {
            assert_eq!(parse_report_csv(&report_csv_string(&rows)).expect("round trip"), rows);
            if !rows.is_empty() {
                report_svg(&rows, &[]).expect("valid rows render");
            }
        }
    }
});
