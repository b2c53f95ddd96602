#![no_main]

use libfuzzer_sys::fuzz_target;
use m3po::records::{encode_tasks, parse_tasks};

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(tasks) = parse_tasks(text, "fuzz") {
        assert_eq!(parse_tasks(&encode_tasks(&tasks), "fuzz").unwrap(), tasks);
    }
});
