#![no_main]

use libfuzzer_sys::fuzz_target;
use vepe::clipfile::{decode_clip, encode_clip};

fuzz_target!(|data: &[u8]| {
    let Ok(clip) = decode_clip(data) else { return };
    let bytes = encode_clip(&clip);
    let again = decode_clip(&bytes).expect("re-encoded clip decodes");
    assert_eq!(encode_clip(&again), bytes);
});
