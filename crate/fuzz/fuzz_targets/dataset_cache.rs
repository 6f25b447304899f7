#![no_main]

use libfuzzer_sys::fuzz_target;
use ridership_core::pipeline::DatasetCache;

fuzz_target!(|data: &[u8]| {
    if let Ok(cache) = DatasetCache::decode(data) {
        let _ = cache.into_dataset();
    }
});
