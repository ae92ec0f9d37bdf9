//! The embedding cache: write preference traces, read them back as a stream,
//! and watch the checksum catch a flipped byte.
//!
//!     cargo run --example embed_cache

use std::io::Cursor;

use reco_lab::cache::{self, CacheReader, CacheWriter, HEADER_LEN};
use reco_lab::experiment::{preference_records, sample_scenes, CaptionSettings};
use reco_lab::vlm::BOS;
use reco_lab::{ToyVlm, VlmConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let model = ToyVlm::build(VlmConfig::default())?;
    let scenes = sample_scenes(16, model.config().n_obj, 9);
    let pairs = preference_records(&model, &scenes, &[BOS], &CaptionSettings::greedy(48))?;

    let mut writer = CacheWriter::new(Vec::new(), model.config().d, pairs.len() as u64)?;
    for (record, _) in &pairs {
        writer.push(record)?;
    }
    let (checksum, bytes) = writer.finish()?;
    println!("{} records, {} bytes, checksum {checksum:016x}", pairs.len(), bytes.len());

    let reader = CacheReader::new(Cursor::new(&bytes))?;
    println!("header {:?}", reader.header());
    for rec in reader.take(3) {
        let rec = rec?;
        println!(
            "  {}  image tokens {}  prompt {}  chosen {}  rejected {}  from {}/{}",
            rec.example_id,
            rec.image_token_count(),
            rec.prompt.len(),
            rec.chosen.len(),
            rec.rejected.len(),
            rec.source.model,
            rec.source.tap_point
        );
    }

    let mut damaged = bytes.clone();
    damaged[HEADER_LEN + 100] ^= 0x01;
    match cache::decode_cache(&damaged) {
        Ok(_) => println!("flipped bit went unnoticed"),
        Err(e) => println!("flipped bit: {e}"),
    }
    Ok(())
}
