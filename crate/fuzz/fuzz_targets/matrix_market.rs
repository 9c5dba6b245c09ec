#![no_main]

use levfed::matrix::{read_matrix_market, write_matrix_market};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(m) = read_matrix_market(data) else { return };
    let mut out = Vec::new();
    write_matrix_market(&m, &mut out).unwrap();
    let again = read_matrix_market(out.as_slice()).expect("written matrix reparses");
    assert_eq!(m, again);
});
