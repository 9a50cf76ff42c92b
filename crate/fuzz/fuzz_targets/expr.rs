#![no_main]

use libfuzzer_sys::fuzz_target;
use wb2flow::expr::Expr;

fuzz_target!(|src: &str| {
    if let Ok(e) = Expr::parse(src) {
        let x = [0.25, 0.75];
        let _ = e.eval(&x);
        let _ = e.eval_dual(&x);
        assert!(e.arity() <= 2);
    }
});
