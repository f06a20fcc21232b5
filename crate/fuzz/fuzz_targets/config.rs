#![no_main]

use libfuzzer_sys::fuzz_target;
use vepe::config::RunConfig;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    let Ok(cfg) = RunConfig::from_toml(text) else { return };
    let again = RunConfig::from_toml(&cfg.to_toml()).expect("printed config parses");
    assert_eq!(again, cfg);
});
