#![no_main]

use libfuzzer_sys::fuzz_target;
use vepe::harness::SweepTable;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    let Ok(t) = SweepTable::parse(text) else { return };
    let printed = t.to_text();
    let again = SweepTable::parse(&printed).expect("printed table parses");
    assert_eq!(again.to_text(), printed);
});
