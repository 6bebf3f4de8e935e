#![no_main]

use libfuzzer_sys::fuzz_target;

// PNG and PGM, dispatched on the magic bytes.
fuzz_target!(|data: &[u8]| {
    if let Ok(grid) = crackseg::data::decode_image(data) {
        assert!(grid.in_unit_range());
    }
});
