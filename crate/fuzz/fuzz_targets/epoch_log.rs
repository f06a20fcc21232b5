#![no_main]

use libfuzzer_sys::fuzz_target;
use vepe::train::EpochRecord;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    for line in text.lines() {
        if let Some(r) = EpochRecord::parse(line) {
            let printed = r.log_line();
            let again = EpochRecord::parse(&printed).expect("printed record parses");
            assert_eq!(again.log_line(), printed);
        }
    }
});
