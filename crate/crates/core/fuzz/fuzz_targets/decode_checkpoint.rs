#![no_main]

use crackseg::train::{decode_checkpoint, encode_checkpoint};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(model) = decode_checkpoint(data) {
        let again = decode_checkpoint(&encode_checkpoint(&model)).unwrap();
        assert_eq!(again.architecture(), model.architecture());
        assert_eq!(again.params().fingerprint(|_| true), model.params().fingerprint(|_| true));
    }
});
