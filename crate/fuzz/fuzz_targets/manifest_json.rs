#![no_main]

use levfed::dataset::DatasetManifest;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    let Ok(m) = DatasetManifest::from_json(text) else {
        return;
    };
    assert!(!m.clients.is_empty());
});
