#![no_main]
use holdlqg::io::{parse_config, parse_schedule, schedule_to_json};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    let Ok(exp) = parse_config(text) else { return };
    // keep synthesis cheap; large instances are valid but slow
    if exp.model.horizon > 8 || exp.model.n() > 4 || exp.model.m() > 4 {
        return;
    }
    if let Ok(schedule) = holdlqg::synthesize(&exp.model, &exp.pmf) {
        if let Ok(json) = schedule_to_json(&schedule) {
            let back = parse_schedule(&json).expect("own output parses");
            assert_eq!(schedule_to_json(&back).unwrap(), json);
        }
    }
});
