#![no_main]

use libfuzzer_sys::fuzz_target;
use spectrum_xai::pca::{decode_pca, encode_pca};

fuzz_target!(|data: &[u8]| {
    if let Ok(model) = decode_pca(data) {
        let again = decode_pca(&encode_pca(&model)).unwrap();
        assert_eq!(encode_pca(&again), encode_pca(&model));
    }
});
