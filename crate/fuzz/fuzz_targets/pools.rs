#![no_main]

use libfuzzer_sys::fuzz_target;
use m3po::records::{encode_pools, parse_pools};

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok((fingerprint, pools)) = parse_pools(text, "fuzz") {
        let (fp, again) = parse_pools(&encode_pools(&pools, &fingerprint), "fuzz").unwrap();
        assert_eq!(fp, fingerprint);
        assert_eq!(again, pools);
    }
});
