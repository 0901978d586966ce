#![no_main]

use libfuzzer_sys::fuzz_target;
use spectrum_xai::nn::{decode_checkpoint, encode_checkpoint};

fuzz_target!(|data: &[u8]| {
    if let Ok(model) = decode_checkpoint(data) {
        assert_eq!(decode_checkpoint(&encode_checkpoint(&model)).unwrap(), model);
    }
});
