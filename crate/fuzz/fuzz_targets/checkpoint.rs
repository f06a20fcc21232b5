#![no_main]

use libfuzzer_sys::fuzz_target;
use vepe_tensor::checkpoint::{decode, encode};
use vepe_tensor::params::ParamStore;

fuzz_target!(|data: &[u8]| {
    let Ok(entries) = decode(data) else { return };
    let mut store = ParamStore::new();
    for (name, t) in &entries {
        store.add(name.clone(), t.clone());
    }
    let again = decode(&encode(&store)).expect("re-encoded checkpoint decodes");
    assert_eq!(again.len(), entries.len());
    for ((n1, t1), (n2, t2)) in entries.iter().zip(&again) {
        assert_eq!(n1, n2);
        assert_eq!(t1.shape(), t2.shape());
        assert!(t1.data().iter().zip(t2.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
    }
});
