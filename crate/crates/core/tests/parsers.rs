//! Every fuzz seed parses and round-trips, and no prefix or byte-flipped
//! mutation of a seed makes a parser panic.

use std::path::PathBuf;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vepe::clipfile::{decode_clip, encode_clip};
use vepe::config::RunConfig;
use vepe::harness::{Manifest, SweepTable};
use vepe::metrics::EvalReport;
use vepe::train::EpochRecord;
use vepe_tensor::checkpoint;
use vepe_tensor::params::ParamStore;

fn seeds(target: &str) -> Vec<(String, Vec<u8>)> {
    let dir = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../fuzz/corpus").join(target);
    let mut out: Vec<_> = std::fs::read_dir(&dir)
        .unwrap_or_else(|e| panic!("{}: {e}", dir.display()))
        .map(|e| {
            let p = e.unwrap().path();
            (p.file_name().unwrap().to_string_lossy().into_owned(), std::fs::read(&p).unwrap())
        })
        .collect();
    out.sort();
    assert!(!out.is_empty(), "no seeds for {target}");
    out
}

/// Prefixes plus a few hundred random byte flips and splices of each seed.
fn mutations(seed: &[u8], rng: &mut ChaCha8Rng) -> Vec<Vec<u8>> {
    let step = (seed.len() / 200).max(1);
    let mut out: Vec<Vec<u8>> = (0..seed.len()).step_by(step).map(|n| seed[..n].to_vec()).collect();
    for _ in 0..300 {
        let mut m = seed.to_vec();
        if m.is_empty() {
            break;
        }
        for _ in 0..rng.random_range(1..4) {
            let i = rng.random_range(0..m.len());
            match rng.random_range(0..3) {
                0 => m[i] ^= 1 << rng.random_range(0..8),
                1 => m[i] = *b" \n0-9.=[]ex".get(rng.random_range(0..11)).unwrap(),
                _ => {
                    m.insert(i, m[rng.random_range(0..m.len())]);
                }
            }
        }
        out.push(m);
    }
    out
}

fn text(bytes: &[u8]) -> Option<&str> {
    std::str::from_utf8(bytes).ok()
}

fn check(target: &str, mut round_trip: impl FnMut(&[u8]) -> bool) {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    for (name, bytes) in seeds(target) {
        assert!(round_trip(&bytes), "{target}/{name} does not parse");
        for m in mutations(&bytes, &mut rng) {
            round_trip(&m);
        }
    }
}

#[test]
fn checkpoint_seeds() {
    check("checkpoint", |b| {
        let Ok(entries) = checkpoint::decode(b) else { return false };
        let mut store = ParamStore::new();
        for (n, t) in &entries {
            store.add(n.clone(), t.clone());
        }
        let encoded = checkpoint::encode(&store);
        let mut reloaded = store.clone();
        checkpoint::load_into(&mut reloaded, &encoded).unwrap();
        assert_eq!(checkpoint::encode(&reloaded), encoded);
        true
    });
}

#[test]
fn clip_seeds() {
    check("clip", |b| {
        let Ok(clip) = decode_clip(b) else { return false };
        let bytes = encode_clip(&clip);
        assert_eq!(decode_clip(&bytes).unwrap(), clip);
        true
    });
}

#[test]
fn config_seeds() {
    check("config", |b| {
        let Some(Ok(cfg)) = text(b).map(RunConfig::from_toml) else { return false };
        assert_eq!(RunConfig::from_toml(&cfg.to_toml()).unwrap(), cfg);
        true
    });
}

#[test]
fn manifest_seeds() {
    check("manifest", |b| {
        let Some(Ok(m)) = text(b).map(Manifest::parse) else { return false };
        assert_eq!(Manifest::parse(&m.to_text()).unwrap(), m);
        true
    });
}

#[test]
fn report_seeds() {
    check("report", |b| {
        let Some(Ok(r)) = text(b).map(EvalReport::parse) else { return false };
        let printed = r.to_text();
        assert_eq!(EvalReport::parse(&printed).unwrap().to_text(), printed);
        true
    });
}

#[test]
fn sweep_seeds() {
    check("sweep", |b| {
        let Some(Ok(t)) = text(b).map(SweepTable::parse) else { return false };
        let printed = t.to_text();
        assert_eq!(SweepTable::parse(&printed).unwrap().to_text(), printed);
        true
    });
}

#[test]
fn epoch_log_seeds() {
    check("epoch_log", |b| {
        let Some(t) = text(b) else { return false };
        let mut any = false;
        for r in t.lines().filter_map(EpochRecord::parse) {
            let printed = r.log_line();
            assert_eq!(EpochRecord::parse(&printed).unwrap().log_line(), printed);
            any = true;
        }
        any
    });
}
