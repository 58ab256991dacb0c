// Scratch harness for tuning corpus/model/attack settings. Not part of
// the deliverable surface; run with `cargo run --release --example scout`.

use std::time::Instant;

use uptb_core::dataio::{generate_corpus, CorpusConfig, Utterance};
use uptb_core::features::FeatureConfig;
use uptb_core::metrics;
use uptb_core::models::{build_model, train, Arch, Model, ModelConfig};

fn env_f(name: &str, default: f64) -> f64 {
    std::env::var(name).ok().and_then(|v| v.parse().ok()).unwrap_or(default)
}
fn env_u(name: &str, default: usize) -> usize {
    std::env::var(name).ok().and_then(|v| v.parse().ok()).unwrap_or(default)
}

fn corpus_cfg() -> CorpusConfig {
    let mut c = CorpusConfig::fast_4khz();
    c.train_count = env_u("TRAIN", 48);
    c.test_count = env_u("TEST", 24);
    c.words_min = 1;
    c.words_max = env_u("WMAX", 4);
    c.seed = 7;
    c
}

fn model_cfg(arch: Arch, vocab: Vec<String>) -> ModelConfig {
    let mut m = ModelConfig::new(arch, vocab);
    m.encoder_layers = 2;
    m.encoder_hidden = env_u("HID", 32);
    m.decoder_hidden = env_u("DEC", 24);
    m.attention_dim = match arch {
        Arch::Attention => Some(env_u("ATT", 16)),
        _ => None,
    };
    m.features = FeatureConfig::fast_4khz();
    m.seed = 1;
    m
}

fn corpus_wer(model: &Model<f64>, set: &[Utterance<f64>]) -> f64 {
    let mut edits = 0;
    let mut words = 0;
    for u in set {
        let hyp = model.transcribe(&u.waveform).unwrap();
        let (e, n) = metrics::wer_counts(&u.transcript, &hyp).unwrap();
        edits += e;
        words += n;
    }
    edits as f64 / words as f64
}

fn main() {
    let ccfg = corpus_cfg();
    let (train_set, test_set) = generate_corpus::<f64>(&ccfg).unwrap();
    let epochs = env_u("EPOCHS", 30);
    let lr = env_f("LR", 3e-3);
    let batch = env_u("BATCH", 8);
    println!("epochs={epochs} lr={lr} batch={batch} train={} hid={}", train_set.len(), env_u("HID", 32));

    let only = std::env::var("ARCH").unwrap_or_default();
    for arch in [Arch::Ctc, Arch::Rnnt, Arch::Attention] {
        if !only.is_empty() && arch.to_string() != only {
            continue;
        }
        let t0 = Instant::now();
        let model = build_model::<f64>(model_cfg(arch, ccfg.vocabulary.clone())).unwrap();
        let out = train(&model, &train_set, epochs, lr, batch, 5).unwrap();
        let train_time = t0.elapsed().as_secs_f64();
        let wer_train = corpus_wer(&out.model, &train_set);
        let wer_test = corpus_wer(&out.model, &test_set);
        println!(
            "{arch}: train {train_time:.1}s, loss {:.3} -> {:.3}, WER train {:.3} test {:.3}",
            out.epoch_loss[0],
            out.epoch_loss.last().unwrap(),
            wer_train,
            wer_test
        );
        if std::env::var("HYPS").is_ok() {
            for u in test_set.iter().take(6) {
                println!("  ref {:24} hyp {}", u.transcript, out.model.transcribe(&u.waveform).unwrap());
            }
        }
    }
}
