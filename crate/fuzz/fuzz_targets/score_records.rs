#![no_main]

use libfuzzer_sys::fuzz_target;
use m3po::scoring::parse_score_records;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(records) = parse_score_records(text) {
        assert!(records.iter().all(|r| (0.0..=1.0).contains(&r.mas)));
    }
});
