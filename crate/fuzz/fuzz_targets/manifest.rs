#![no_main]

use libfuzzer_sys::fuzz_target;
use wb2flow::io::Manifest;

fuzz_target!(|text: &str| {
    let Ok(m) = Manifest::from_json(text) else {
        return;
    };
    let _ = m.validate();
    let again = Manifest::from_json(&m.to_json().unwrap()).unwrap();
    assert_eq!(m.to_json().unwrap(), again.to_json().unwrap());
});
