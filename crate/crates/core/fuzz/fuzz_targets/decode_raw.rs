#![no_main]

use libfuzzer_sys::fuzz_target;
use spectrum_xai::data::{decode_raw, encode_raw};

fuzz_target!(|data: &[u8]| {
    if let Ok(m) = decode_raw(data) {
        let again = decode_raw(&encode_raw(&m)).expect("re-encoded matrix decodes");
        assert_eq!((again.bins(), again.time_len()), (m.bins(), m.time_len()));
        let bits = |v: &[f32]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(again.values()), bits(m.values()));
    }
});
