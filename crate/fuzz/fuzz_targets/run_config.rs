#![no_main]

use libfuzzer_sys::fuzz_target;
use m3po::RunConfig;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(cfg) = RunConfig::parse(text, "fuzz") {
        let again = RunConfig::parse(&cfg.serialize(), "fuzz").expect("serialized config parses");
        assert_eq!(again.serialize(), cfg.serialize());
    }
});
