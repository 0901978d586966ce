#![no_main]

use libfuzzer_sys::fuzz_target;
use spectrum_xai::kmeans::{decode_kmeans, encode_kmeans};

fuzz_target!(|data: &[u8]| {
    if let Ok(model) = decode_kmeans(data) {
        let again = decode_kmeans(&encode_kmeans(&model)).unwrap();
        assert_eq!(encode_kmeans(&again), encode_kmeans(&model));
    }
});
