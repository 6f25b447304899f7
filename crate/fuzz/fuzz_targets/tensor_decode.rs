#![no_main]

use libfuzzer_sys::fuzz_target;
use ridership_core::tensor::Tensor;

fuzz_target!(|data: &[u8]| {
    if let Ok(t) = Tensor::decode(data) {
        assert_eq!(t.encode(), data);
    }
});
