//! Generates the synthetic shapes splits, prints one mask as text and checks
//! the file round trip.
//!
//! `cargo run --example synth_dataset [index]`

use structtoken::data::{generate_sample, Dataset, Split, SynthConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let index: usize = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(0);
    let cfg = SynthConfig::default();
    let sample = generate_sample(&cfg, Split::Train, index);
    let glyphs = ['.', 'o', '#', '^'];
    for row in sample.mask.chunks(sample.width()) {
        println!("{}", row.iter().map(|&m| glyphs[m as usize % glyphs.len()]).collect::<String>());
    }

    let data = Dataset::generate(&cfg, Split::Train)?;
    let mut counts = vec![0usize; cfg.classes];
    for s in &data.samples {
        for (k, c) in counts.iter_mut().enumerate() {
            *c += usize::from(s.mask.iter().any(|&m| m as usize == k));
        }
    }
    println!("{} training samples; samples containing each class: {counts:?}", data.len());

    let dir = std::env::temp_dir().join("structtoken-synth-example");
    let path = dir.join("train.stds");
    std::fs::create_dir_all(&dir)?;
    data.save(&path)?;
    let back = Dataset::load(&path)?;
    println!("round trip through {} identical: {}", path.display(), back == data);
    Ok(())
}
