#![no_main]
use holdlqg::io::{parse_schedule, schedule_to_json};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(schedule) = parse_schedule(text) {
        let json = schedule_to_json(&schedule).expect("parsed schedule is finite");
        let again = parse_schedule(&json).expect("reserialized schedule parses");
        assert_eq!(again.stages.len(), schedule.stages.len());
    }
});
