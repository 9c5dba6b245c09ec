#![no_main]

use levfed::dataset::{read_cells, write_cells};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(cells) = read_cells(data) else { return };
    let mut out = Vec::new();
    write_cells(&cells, &mut out).unwrap();
    assert_eq!(read_cells(out.as_slice()).expect("written cells reparse"), cells);
});
