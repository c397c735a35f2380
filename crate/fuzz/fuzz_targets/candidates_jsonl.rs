#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    virreq_fuzz::candidates_jsonl(data);
});
