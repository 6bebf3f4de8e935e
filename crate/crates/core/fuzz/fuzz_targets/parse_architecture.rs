#![no_main]

use crackseg::nn::Architecture;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(arch) = Architecture::from_description(text) {
        assert_eq!(Architecture::from_description(&arch.describe()).unwrap(), arch);
    }
});
