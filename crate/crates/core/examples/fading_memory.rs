//! Image influence on the next-token distribution, step by step: the
//! Hellinger distance between the model's prediction with the image and
//! without it, averaged over scenes. With geometric decay of the image drive
//! the curve collapses within a few tokens.
//!
//!     cargo run --release --example fading_memory [curve.csv]

use reco_lab::diagnostics;
use reco_lab::experiment::sample_scenes;
use reco_lab::vlm::BOS;
use reco_lab::{ToyVlm, VlmConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let t_max = 96;
    for rho in [0.9, 0.97, 1.0] {
        let model = ToyVlm::build(VlmConfig { rho, ..VlmConfig::default() })?;
        let scenes = sample_scenes(100, model.config().n_obj, 1);
        let curve = diagnostics::influence_curve(&model, &scenes, &[BOS], t_max, None)?;
        let early = curve.window_mean(0..8).unwrap();
        let late = curve.window_mean(64..96).unwrap();
        println!("rho = {rho}: early {early:.4}, late {late:.6}, ratio {:.4}", late / early);

        if rho == 0.9 {
            for t in (0..t_max).step_by(6) {
                let h = curve.hellinger[t];
                println!("  t={t:3} {h:.4} {}", "#".repeat((h * 50.0).round() as usize));
            }
            if let Some(path) = std::env::args().nth(1) {
                diagnostics::export_curve(&curve, &path)?;
                println!("  wrote {path} and {}", diagnostics::sidecar_path(path.as_ref()).display());
            }
        }
    }
    Ok(())
}
