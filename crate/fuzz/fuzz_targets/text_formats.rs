#![no_main]
use coarsefine::config::RunConfig;
use coarsefine::datagen::parse_difficulty_csv;
use coarsefine::exit_oracle::parse_labels_csv;
use coarsefine::tracesim::{parse_trace, DeviceProfile};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    let _ = parse_labels_csv(text);
    let _ = parse_difficulty_csv(text);
    let _ = parse_trace(text);
    if let Ok(profile) = DeviceProfile::parse(text) {
        assert_eq!(DeviceProfile::parse(&profile.to_text()).unwrap(), profile);
    }
    if let Ok(cfg) = RunConfig::from_text(text) {
        assert_eq!(RunConfig::from_text(&cfg.echo()).unwrap().echo(), cfg.echo());
    }
});
