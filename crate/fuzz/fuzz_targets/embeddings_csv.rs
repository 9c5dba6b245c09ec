#![no_main]

use levfed::vae::{read_embeddings, write_embeddings};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok((ids, rows)) = read_embeddings(data) else { return };
    assert_eq!(ids.len(), rows.len());
    let mut out = Vec::new();
    if write_embeddings(&ids, &rows, &mut out).is_ok() {
        let _ = read_embeddings(out.as_slice());
    }
});
