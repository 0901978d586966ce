#![no_main]

use libfuzzer_sys::fuzz_target;
use spectrum_xai::cli::parse_cluster_labels;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        let _ = parse_cluster_labels(text);
    }
});
