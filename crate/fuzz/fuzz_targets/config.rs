#![no_main]

use std::path::Path;

use libfuzzer_sys::fuzz_target;
use wb2flow::config::RunConfig;

fuzz_target!(|text: &str| {
    let Ok(cfg) = RunConfig::from_json(text) else {
        return;
    };
    let again = RunConfig::from_json(&cfg.to_json().unwrap()).unwrap();
    assert_eq!(cfg.config_hash(Path::new(".")).ok(), again.config_hash(Path::new(".")).ok());
    let cells = cfg.grid.n.checked_pow(cfg.grid.dim as u32).unwrap_or(usize::MAX);
    if cells <= 4096 {
        let _ = cfg.build(Path::new("."));
    }
});
