#![no_main]

use libfuzzer_sys::fuzz_target;
use wb2flow::io::{density_csv_string, read_density_csv};

fuzz_target!(|data: &[u8]| {
    let Ok(rho) = read_density_csv(data) else {
        return;
    };
    let text = density_csv_string(&rho).unwrap();
    let again = read_density_csv(text.as_bytes()).unwrap();
    assert_eq!(rho.density(), again.density());
});
