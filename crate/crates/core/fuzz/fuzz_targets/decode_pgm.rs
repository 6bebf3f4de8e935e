#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(grid) = crackseg::data::image::decode_pgm(data) {
        assert!(grid.in_unit_range());
        assert_eq!(grid.data().len(), grid.height() * grid.width());
    }
});
