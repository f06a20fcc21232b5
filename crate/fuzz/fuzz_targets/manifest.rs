#![no_main]

use libfuzzer_sys::fuzz_target;
use vepe::harness::Manifest;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    let Ok(m) = Manifest::parse(text) else { return };
    assert_eq!(Manifest::parse(&m.to_text()).expect("printed manifest parses"), m);
});
