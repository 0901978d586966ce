#![no_main]

use libfuzzer_sys::fuzz_target;
use spectrum_xai::data::{decode_csv, encode_csv};

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(m) = decode_csv(text) {
        let again = decode_csv(&encode_csv(&m)).expect("re-encoded matrix parses");
        assert_eq!((again.bins(), again.time_len()), (m.bins(), m.time_len()));
    }
});
