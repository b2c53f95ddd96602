#![no_main]

use libfuzzer_sys::fuzz_target;
use m3po::records::{encode_prompts, parse_prompts};

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(prompts) = parse_prompts(text, "fuzz") {
        assert_eq!(parse_prompts(&encode_prompts(&prompts), "fuzz").unwrap(), prompts);
    }
});
