#![no_main]

use libfuzzer_sys::fuzz_target;
use m3po::records::{encode_pairs, parse_pairs};

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(dataset) = parse_pairs(text, "fuzz") {
        let again = parse_pairs(&encode_pairs(&dataset), "fuzz").unwrap();
        assert_eq!(again.fingerprint, dataset.fingerprint);
        assert_eq!(again.pairs, dataset.pairs);
    }
});
