#![no_main]

use libfuzzer_sys::fuzz_target;
use vepe::metrics::EvalReport;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    let Ok(r) = EvalReport::parse(text) else { return };
    // Printing rounds, so compare printed forms.
    let printed = r.to_text();
    let again = EvalReport::parse(&printed).expect("printed report parses");
    assert_eq!(again.to_text(), printed);
});
