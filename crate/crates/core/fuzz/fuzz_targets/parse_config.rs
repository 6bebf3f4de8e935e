#![no_main]

use crackseg::cli::RunConfig;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(cfg) = RunConfig::from_text(text) {
        let _ = cfg.validate();
        let _ = cfg.ensemble().validate();
    }
});
