//! The binder adds a re-injected image term to the text hidden state before
//! the output head: `b = W_T h + W_I i`. Starting from `W_T = I, W_I = 0`
//! the extended model is the plain model, bit for bit. Raising `W_I` makes
//! late tokens look at the image again.
//!
//!     cargo run --example reco_compose

use reco_lab::diagnostics;
use reco_lab::experiment::sample_scenes;
use reco_lab::vlm::{DecodeMode, BOS};
use reco_lab::{Matrix, ReCoParams, ToyVlm, VlmConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let model = ToyVlm::build(VlmConfig::default())?;
    let scenes = sample_scenes(20, model.config().n_obj, 3);
    let d = model.config().d;

    let identity = ReCoParams::identity_init(d)?;
    let scene = &scenes[0];
    let plain = model.generate(scene, &[BOS], 64, None, DecodeMode::Greedy)?;
    let same = model.generate(scene, &[BOS], 64, Some(&identity), DecodeMode::Greedy)?;
    let identical = plain.tokens == same.tokens
        && plain.logits.iter().flatten().zip(same.logits.iter().flatten()).all(|(a, b)| a.to_bits() == b.to_bits());
    println!("identity binder reproduces the plain model: {identical}");

    // Composition on one state, by hand.
    let bundle = model.image_bundle(scene)?;
    let h = &plain.trace.hidden_states[10];
    let mut w_image = Matrix::zeros(d, d);
    for i in 0..d {
        w_image[(i, i)] = 0.3;
    }
    let boosted = ReCoParams::new(Matrix::identity(d), w_image)?;
    let b = boosted.compose(h, &bundle)?;
    let shift: f64 = b.iter().zip(h).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    println!("|b - h| at step 10 with W_I = 0.3 I: {shift:.4}");

    // Influence in the late window, before and after.
    let late = |reco: Option<&ReCoParams>| -> Result<f64, Box<dyn std::error::Error>> {
        let c = diagnostics::influence_curve(&model, &scenes, &[BOS], 96, reco)?;
        Ok(c.window_mean(64..96).unwrap())
    };
    println!("late Hellinger, identity:    {:.6}", late(Some(&identity))?);
    println!("late Hellinger, W_I = 0.3 I: {:.6}", late(Some(&boosted))?);

    let caption = model.generate(scene, &[BOS], 32, Some(&boosted), DecodeMode::Greedy)?;
    println!("\nscene objects {:?}", scene.present_objects);
    println!("plain   {:?}", &plain.tokens[..plain.tokens.len().min(32)]);
    println!("boosted {:?}", caption.tokens);
    Ok(())
}
