#![no_main]

use levfed::vae::load_checkpoint;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok((vae, params)) = load_checkpoint(data) else {
        return;
    };
    assert_eq!(params.len(), vae.n_params());
    let mut out = Vec::new();
    vae.save_checkpoint(&params, &mut out).unwrap();
    let (_, again) = load_checkpoint(out.as_slice()).expect("written checkpoint reloads");
    assert_eq!(params.values.len(), again.values.len());
    assert!(params
        .values
        .iter()
        .zip(&again.values)
        .all(|(a, b)| a.to_bits() == b.to_bits()));
});
