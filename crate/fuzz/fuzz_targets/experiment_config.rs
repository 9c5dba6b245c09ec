#![no_main]

use levfed::experiment::ExperimentConfig;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    let Ok(cfg) = ExperimentConfig::from_json(text) else {
        return;
    };
    assert_eq!(cfg.fed.seed, cfg.seed);
    let again = ExperimentConfig::from_json(&cfg.to_json()).expect("serialized config reparses");
    assert_eq!(cfg.hash(), again.hash());
});
