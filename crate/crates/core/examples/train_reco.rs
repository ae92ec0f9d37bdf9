//! Train the binder from an embedding cache. Captions 200 scenes, writes the
//! preference traces to disk, checks the analytic gradient against finite
//! differences, then trains with plain gradient descent and with Adam.
//!
//!     cargo run --release --example train_reco

use reco_lab::cache;
use reco_lab::dpo::{self, DpoConfig, Optimizer, PreferenceQuad};
use reco_lab::experiment::{preference_records, sample_scenes, CaptionSettings};
use reco_lab::vlm::BOS;
use reco_lab::{ReCoParams, ToyVlm, VlmConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let model = ToyVlm::build(VlmConfig::default())?;
    let d = model.config().d;
    let scenes = sample_scenes(200, model.config().n_obj, 11);
    let pairs = preference_records(&model, &scenes, &[BOS], &CaptionSettings::greedy(96))?;
    let records: Vec<_> = pairs.into_iter().map(|(r, _)| r).collect();

    let path = std::env::temp_dir().join(format!("reco-train-{}.reco", std::process::id()));
    let checksum = cache::write_cache(&records, &path)?;
    println!("cached {} records at {} (checksum {checksum:016x})", records.len(), path.display());

    let quads = cache::read_cache(&path)?.records.iter().map(PreferenceQuad::from_record).collect::<Result<Vec<_>, _>>()?;
    let identity = ReCoParams::identity_init(d)?;
    let cfg = DpoConfig::default();
    let batch = &quads[..4];
    let analytic = dpo::grad_analytic(model.head(), &identity, &identity, batch, &cfg)?;
    let numeric = dpo::grad_fd(model.head(), &identity, &identity, batch, &cfg, 1e-5)?;
    println!("gradient check on 4 quads: relative error {:.2e}", analytic.relative_error(&numeric, 1e-12));

    for optimizer in [Optimizer::GradientDescent, Optimizer::adam()] {
        let cfg = DpoConfig { optimizer, ..DpoConfig::default() };
        let (out, _) = dpo::train_from_cache(&path, model.head(), &cfg, None)?;
        let losses: Vec<String> = out.epoch_losses.iter().map(|l| format!("{l:.3}")).collect();
        println!("\n{optimizer:?}");
        println!("  loss {:.4} at init, per epoch [{}]", out.initial_loss, losses.join(", "));
        let diag: f64 = (0..d).map(|i| out.params.w_image()[(i, i)]).sum::<f64>() / d as f64;
        println!("  mean diag(W_I) {diag:.4} after {} steps", out.steps);
    }
    std::fs::remove_file(&path)?;
    Ok(())
}
