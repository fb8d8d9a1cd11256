#![no_main]

use libfuzzer_sys::fuzz_target;

use std::path::Path;

// The config parser must reject arbitrary input with an error, never panic,
// and must not touch the filesystem outside the base directory.
fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        let _ = pbcell::config::RunConfig::parse(text, Path::new("/nonexistent"));
    }
});
