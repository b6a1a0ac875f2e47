use hetfuse::gradcheck::{check_problem, random_problem};
use hetfuse::network::{ArchitectureConfig, FusionMode};

fn miniature(mode: FusionMode) -> ArchitectureConfig {
    ArchitectureConfig {
        levels: 2,
        channel_schedule: Some(vec![2, 3]),
        enc_convs_per_block: 2,
        dec_convs_per_block: 2,
        fpb_convs: 2,
        fusion_mode: mode,
        ..ArchitectureConfig::default()
    }
}

#[test]
fn every_fusion_mode_matches_central_differences() {
    for mode in FusionMode::ALL {
        for draw in 0..5 {
            let p = random_problem(&miniature(mode), Some([4, 6, 4]), Some([6, 8]), 100 + draw).unwrap();
            for e in check_problem(&p, 4, draw).unwrap() {
                assert!(e.rel64 < 1e-4, "{mode} draw {draw} {}: rel64 {}", e.name, e.rel64);
                assert!(e.rel32 < 1e-2, "{mode} draw {draw} {}: rel32 {}", e.name, e.rel32);
            }
        }
    }
}
