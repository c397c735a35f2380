//! Runs every corpus seed, plus byte-level mutations of each, through its
//! check. A stable stand-in for a short fuzzing session.

use std::path::Path;

use virreq_fuzz::TARGETS;

fn mutations(seed: &[u8]) -> Vec<Vec<u8>> {
    let mut out = vec![seed.to_vec()];
    for cut in [1, seed.len() / 2, seed.len().saturating_sub(1)] {
        out.push(seed[..cut.min(seed.len())].to_vec());
    }
    for i in (0..seed.len()).step_by(seed.len().div_ceil(64).max(1)) {
        for b in [0u8, b'9', b'-', b'"', 0xff] {
            let mut m = seed.to_vec();
            m[i] = b;
            out.push(m);
        }
    }
    out
}

#[test]
fn every_seed_and_mutation_is_handled() {
    let root = Path::new(env!("CARGO_MANIFEST_DIR")).join("corpus");
    for (name, check) in TARGETS {
        let dir = root.join(name);
        let mut seeds = 0;
        for entry in std::fs::read_dir(&dir).unwrap_or_else(|e| panic!("{}: {e}", dir.display())) {
            let path = entry.unwrap().path();
            let bytes = std::fs::read(&path).unwrap();
            assert!(check(&bytes), "{} is rejected", path.display());
            for m in mutations(&bytes) {
                let _ = check(&m);
            }
            seeds += 1;
        }
        assert!(seeds > 0, "{name} has no seeds");
    }
}
