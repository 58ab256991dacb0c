// Diagnostic probe: inspect features and per-frame CTC posteriors.
use uptb_core::dataio::{generate_corpus, CorpusConfig};
use uptb_core::features::{extract_features, FeatureConfig};
use uptb_core::tape::Tape;

fn main() {
    let mut c = CorpusConfig::fast_4khz();
    c.train_count = 4;
    c.test_count = 0;
    c.words_min = 1;
    c.words_max = 1;
    c.seed = 7;
    let (train, _) = generate_corpus::<f64>(&c).unwrap();
    let fcfg = FeatureConfig::fast_4khz();
    for u in &train {
        let mut tape = Tape::new();
        let f = extract_features(&mut tape, &u.waveform, &fcfg).unwrap();
        let frames = f.shape()[0];
        let mels = f.shape()[1];
        // average feature vector over the middle frames
        let mid0 = frames / 3;
        let mid1 = 2 * frames / 3;
        let mut avg = vec![0.0; mels];
        for t in mid0..mid1 {
            for m in 0..mels {
                avg[m] += f.data()[t * mels + m] / (mid1 - mid0) as f64;
            }
        }
        let argmax = (0..mels).max_by(|&a, &b| avg[a].total_cmp(&avg[b])).unwrap();
        println!(
            "{}: word={:6} frames={} argmax_mel={} avg[argmax]={:.2} avg[0]={:.2}",
            u.id, u.transcript, frames, argmax, avg[argmax], avg[0]
        );
    }
}
