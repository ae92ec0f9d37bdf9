//! CHAIR on toy-model captions, and the yes/no family of scores (POPE,
//! AMBER, accuracy+) on a probe built from the same captions: for every scene
//! ask about one present and one absent object and answer "yes" whenever the
//! caption mentions it.
//!
//!     cargo run --release --example hallucination_metrics

use reco_lab::experiment::{caption_eval, captions, sample_scenes};
use reco_lab::metrics::{self, Answer, BinaryEval, BinaryItem, ChairCorpus, EvalReport, Label};
use reco_lab::vlm::BOS;
use reco_lab::{ToyVlm, VlmConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let model = ToyVlm::build(VlmConfig::default())?;
    let cfg = model.config();
    let scenes = sample_scenes(100, cfg.n_obj, 5);
    let caps = captions(&model, &scenes, &[BOS], 96, None)?;

    let evals: Vec<_> = scenes.iter().zip(&caps).map(|(s, c)| caption_eval(cfg, c, s)).collect();
    let e = &evals[0];
    println!("scene 0: objects {:?}, mentioned {:?}, hallucinated {:?}", e.ground_truth, e.mentioned(), e.hallucinated());
    println!("         {} sentences, {} with a hallucination", e.sentences.len(), e.hallucinated_sentences());
    let corpus = ChairCorpus::from_evals(&evals);

    let mut items = Vec::new();
    for (i, (scene, ev)) in scenes.iter().zip(&evals).enumerate() {
        let mentioned = ev.mentioned();
        let present = *scene.present_objects.iter().next().unwrap();
        let absent = (0..cfg.n_obj as u32).find(|o| !scene.present_objects.contains(o)).unwrap();
        for (object, label) in [(present, Label::Yes), (absent, Label::No)] {
            let text = if mentioned.contains(&object) { "Yes." } else { "No." };
            items.push(BinaryItem { predicted: Answer::parse(text), label, pair_id: Some(format!("scene-{i}")) });
        }
    }
    let eval = BinaryEval { items };
    let pope = metrics::pope_scores(&eval)?;

    let mut report = EvalReport::new("toy-greedy");
    report.add_chair(&corpus)?;
    report.add_pope(&pope);
    report.metrics.insert("amber".into(), metrics::amber_score(100.0 * corpus.chair_i().value, 100.0 * pope.f1)?);
    report.metrics.insert("accuracy_plus".into(), metrics::accuracy_plus(&eval)?);
    println!();
    for (k, v) in &report.metrics {
        println!("{k:>16} {v:.4}");
    }
    for (k, v) in &report.counts {
        println!("{k:>16} {v}");
    }
    Ok(())
}
