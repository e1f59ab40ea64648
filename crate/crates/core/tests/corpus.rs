//! Runs the fuzz corpus seeds, and byte-level mutations of them, through the
//! same paths as the fuzz targets.

use std::fs;
use std::path::{Path, PathBuf};

use holdlqg::io::{parse_config, parse_schedule, schedule_to_json};
use proptest::prelude::*;

fn seeds(target: &str) -> Vec<Vec<u8>> {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../fuzz/corpus").join(target);
    let mut paths: Vec<PathBuf> = fs::read_dir(dir).unwrap().map(|e| e.unwrap().path()).collect();
    paths.sort();
    paths.into_iter().map(|p| fs::read(p).unwrap()).collect()
}

fn config_target(data: &[u8]) {
    let Ok(text) = std::str::from_utf8(data) else { return };
    let Ok(exp) = parse_config(text) else { return };
    if exp.model.horizon > 8 || exp.model.n() > 4 || exp.model.m() > 4 {
        return;
    }
    if let Ok(schedule) = holdlqg::synthesize(&exp.model, &exp.pmf) {
        let json = schedule_to_json(&schedule).unwrap();
        let back = parse_schedule(&json).expect("own output parses");
        assert_eq!(schedule_to_json(&back).unwrap(), json);
    }
}

fn schedule_target(data: &[u8]) {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(schedule) = parse_schedule(text) {
        let json = schedule_to_json(&schedule).expect("parsed schedule is finite");
        let again = parse_schedule(&json).expect("reserialized schedule parses");
        assert_eq!(again.stages.len(), schedule.stages.len());
    }
}

#[test]
fn seeds_run_cleanly() {
    let configs = seeds("config_parse");
    assert!(configs.len() >= 2);
    let valid = configs.iter().filter(|c| parse_config(std::str::from_utf8(c).unwrap()).is_ok()).count();
    assert!(valid >= 2);
    configs.iter().for_each(|c| config_target(c));
    let schedules = seeds("schedule_parse");
    let valid = schedules.iter().filter(|s| parse_schedule(std::str::from_utf8(s).unwrap()).is_ok()).count();
    assert!(valid >= 2);
    schedules.iter().for_each(|s| schedule_target(s));
}

/// Overwrites bytes at chosen offsets, mostly with JSON-significant characters
/// so that mutants keep parsing far enough to reach validation.
fn mutate(seed: &[u8], edits: &[(usize, u8)]) -> Vec<u8> {
    const ALPHABET: &[u8] = b"0123456789-+.eE[]{},:\" nul";
    let mut out = seed.to_vec();
    for &(pos, b) in edits {
        if out.is_empty() {
            break;
        }
        let i = pos % out.len();
        out[i] = ALPHABET[b as usize % ALPHABET.len()];
    }
    out
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 512, ..ProptestConfig::default() })]

    #[test]
    fn mutated_configs_never_panic(which in 0usize..8, edits in prop::collection::vec((any::<usize>(), any::<u8>()), 1..4)) {
        let all = seeds("config_parse");
        config_target(&mutate(&all[which % all.len()], &edits));
    }

    #[test]
    fn mutated_schedules_never_panic(which in 0usize..8, edits in prop::collection::vec((any::<usize>(), any::<u8>()), 1..4)) {
        let all = seeds("schedule_parse");
        schedule_target(&mutate(&all[which % all.len()], &edits));
    }
}
