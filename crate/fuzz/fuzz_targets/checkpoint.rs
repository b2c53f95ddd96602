#![no_main]

use libfuzzer_sys::fuzz_target;
use m3po::checkpoint::{decode_checkpoint, encode_checkpoint};

fuzz_target!(|data: &[u8]| {
    if let Ok(policy) = decode_checkpoint(data) {
        assert_eq!(encode_checkpoint(&policy), data);
    }
});
