#![no_main]

use libfuzzer_sys::fuzz_target;
use ridership_core::models::StatisticalBaseline;

fuzz_target!(|data: &[u8]| {
    if let Ok(b) = StatisticalBaseline::read_csv(data) {
        let mut out = Vec::new();
        b.write_csv(&mut out).expect("write to memory");
        assert_eq!(StatisticalBaseline::read_csv(out.as_slice()).as_ref(), Ok(&b));
    }
});
