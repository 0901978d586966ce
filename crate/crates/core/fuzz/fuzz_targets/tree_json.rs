#![no_main]

use libfuzzer_sys::fuzz_target;
use spectrum_xai::tree::ShallowTree;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(tree) = ShallowTree::from_json(text) {
        let json = tree.to_json().expect("parsed tree serializes");
        ShallowTree::from_json(&json).expect("serialized tree parses");
    }
});
