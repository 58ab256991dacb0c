//! Plain Adam trainer over the mean batch loss.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::Model;
use crate::dataio::Utterance;
use crate::error::{Error, Result};
use crate::optim::Adam;
use crate::parallel::par_map;
use crate::scalar::Scalar;
use crate::tape::Tape;
use crate::tensor::Tensor;

pub struct TrainOutcome<S: Scalar> {
    pub model: Model<S>,
    /// Mean training loss per epoch.
    pub epoch_loss: Vec<f64>,
}

/// Train a model on the dataset; deterministic given the seed. Batch
/// items run on parallel tapes, but gradients fold in dataset order, so
/// the thread count never changes the result.
pub fn train<S: Scalar>(
    model: &Model<S>,
    dataset: &[Utterance<S>],
    epochs: usize,
    lr: f64,
    batch_size: usize,
    seed: u64,
) -> Result<TrainOutcome<S>> {
    if dataset.is_empty() {
        return Err(Error::contract("training dataset is empty"));
    }
    if batch_size == 0 {
        return Err(Error::config("batch_size must be at least 1"));
    }
    let labels = dataset
        .iter()
        .map(|u| model.encode_transcript(&u.transcript))
        .collect::<Result<Vec<_>>>()?;

    // Working copies in checkpoint (name) order.
    let names: Vec<String> = model.params().keys().cloned().collect();
    let shapes: Vec<Vec<usize>> = names
        .iter()
        .map(|n| model.params()[n].shape().to_vec())
        .collect();
    let mut values: Vec<Vec<S>> = names.iter().map(|n| model.params()[n].to_vec()).collect();
    let sizes: Vec<usize> = values.iter().map(|v| v.len()).collect();
    let mut adam = Adam::new(0.9, 0.999, 1e-8, &sizes);
    let lr_s = S::of(lr);

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut epoch_loss = Vec::with_capacity(epochs);
    let mut indices: Vec<usize> = (0..dataset.len()).collect();

    for epoch in 0..epochs {
        indices.shuffle(&mut rng);
        let mut loss_sum = 0.0f64;
        for batch in indices.chunks(batch_size) {
            let current: Vec<Tensor<S>> = values
                .iter()
                .zip(&shapes)
                .map(|(v, s)| Tensor::new(s.clone(), v.clone()).expect("param shape"))
                .collect();
            let items: Vec<usize> = batch.to_vec();
            let results = par_map(&items, |_, &idx| -> Result<(f64, Vec<Vec<S>>)> {
                let mut tape = Tape::new();
                let leafed: Vec<Tensor<S>> = current.iter().map(|t| tape.leaf(t)).collect();
                let bound = super::BoundParams {
                    map: names
                        .iter()
                        .cloned()
                        .zip(leafed.iter().cloned())
                        .collect(),
                };
                let loss = model.loss_with(&mut tape, &bound, &dataset[idx].waveform, &labels[idx])?;
                let grads = tape.backward(&loss)?;
                let gs: Vec<Vec<S>> = leafed.iter().map(|t| grads.wrt(t).to_vec()).collect();
                Ok((loss.to_scalar()?.as_f64(), gs))
            });

            let scale = S::of(1.0 / batch.len() as f64);
            let mut mean_grads: Vec<Vec<S>> = sizes.iter().map(|&n| vec![S::zero(); n]).collect();
            for r in results {
                let (loss, gs) = r?;
                if !loss.is_finite() {
                    return Err(Error::Divergence(format!(
                        "non-finite loss at epoch {epoch}; lower the learning rate"
                    )));
                }
                loss_sum += loss;
                for (acc, g) in mean_grads.iter_mut().zip(gs) {
                    for (a, v) in acc.iter_mut().zip(g) {
                        *a += v * scale;
                    }
                }
            }
            adam.step(lr_s, &mut values, &mean_grads);
        }
        epoch_loss.push(loss_sum / dataset.len() as f64);
    }

    let params = names
        .into_iter()
        .zip(shapes)
        .zip(values)
        .map(|((name, shape), v)| Ok((name, Tensor::new(shape, v)?)))
        .collect::<Result<std::collections::BTreeMap<_, _>>>()?;
    Ok(TrainOutcome {
        model: Model::from_parts(model.config().clone(), params)?,
        epoch_loss,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataio::{generate_corpus, CorpusConfig};
    use crate::models::{build_model, Arch, ModelConfig};

    fn tiny_corpus() -> Vec<Utterance<f64>> {
        let mut cfg = CorpusConfig::fast_4khz();
        cfg.train_count = 6;
        cfg.test_count = 0;
        cfg.words_min = 1;
        cfg.words_max = 2;
        generate_corpus(&cfg).unwrap().0
    }

    fn tiny_model(arch: Arch) -> Model<f64> {
        let mut cfg = ModelConfig::new(arch, CorpusConfig::default().vocabulary);
        cfg.encoder_hidden = 10;
        cfg.decoder_hidden = 8;
        if arch == Arch::Attention {
            cfg.attention_dim = Some(6);
        }
        cfg.features = crate::features::FeatureConfig::fast_4khz();
        build_model(cfg).unwrap()
    }

    #[test]
    fn zero_lr_leaves_parameters_unchanged() {
        let model = tiny_model(Arch::Ctc);
        let data = tiny_corpus();
        let out = train(&model, &data, 1, 0.0, 4, 7).unwrap();
        for (name, before) in model.params() {
            assert_eq!(before.data(), out.model.params()[name].data(), "{name}");
        }
    }

    #[test]
    fn training_is_deterministic() {
        let model = tiny_model(Arch::Ctc);
        let data = tiny_corpus();
        let a = train(&model, &data, 2, 2e-3, 3, 42).unwrap();
        let b = train(&model, &data, 2, 2e-3, 3, 42).unwrap();
        for (name, pa) in a.model.params() {
            let bits_a: Vec<u64> = pa.data().iter().map(|v| v.to_bits()).collect();
            let bits_b: Vec<u64> =
                b.model.params()[name].data().iter().map(|v| v.to_bits()).collect();
            assert_eq!(bits_a, bits_b, "{name}");
        }
    }

    #[test]
    fn loss_drops_during_training() {
        let model = tiny_model(Arch::Ctc);
        let data = tiny_corpus();
        let out = train(&model, &data, 8, 5e-3, 3, 1).unwrap();
        let first = out.epoch_loss[0];
        let last = *out.epoch_loss.last().unwrap();
        assert!(last < first, "loss went {first} -> {last}");
    }
}

#[cfg(test)]
mod probe {
    use super::*;
    use crate::dataio::{generate_corpus, CorpusConfig};
    use crate::models::{build_model, Arch, ModelConfig};

    #[test]
    #[ignore]
    fn grad_norms_at_plateau() {
        let mut c = CorpusConfig::fast_4khz();
        c.train_count = 128;
        c.test_count = 4;
        c.words_min = 1;
        c.words_max = 1;
        c.seed = 7;
        let (train_set, _) = generate_corpus::<f64>(&c).unwrap();
        let mut m = ModelConfig::new(Arch::Ctc, c.vocabulary.clone());
        m.encoder_layers = 2;
        m.encoder_hidden = 32;
        m.decoder_hidden = 24;
        m.features = crate::features::FeatureConfig::fast_4khz();
        m.seed = 1;
        let model = build_model::<f64>(m).unwrap();
        let trained = train(&model, &train_set, 30, 0.01, 4, 5).unwrap().model;

        let u = &train_set[0];
        let labels = trained.encode_transcript(&u.transcript).unwrap();
        let mut tape = Tape::new();
        let leafed: Vec<(String, Tensor<f64>)> = trained
            .params()
            .iter()
            .map(|(n, t)| (n.clone(), tape.leaf(t)))
            .collect();
        let bound = crate::models::BoundParams {
            map: leafed.iter().cloned().collect(),
        };
        let loss = trained
            .loss_with(&mut tape, &bound, &u.waveform, &labels)
            .unwrap();
        let grads = tape.backward(&loss).unwrap();
        println!("loss on {} ({}): {:.4}", u.id, u.transcript, loss.to_scalar().unwrap());
        for (n, t) in &leafed {
            let g = grads.wrt(t);
            let norm: f64 = g.data().iter().map(|v| v * v).sum::<f64>().sqrt();
            println!("  {:14} |g| = {:.6}", n, norm);
        }

        // also: per-frame argmax of the ctc head
        let mut tape2 = Tape::new();
        let bound2 = trained.bind_frozen();
        let feats = trained.extractor_for_tests().extract(&mut tape2, &u.waveform).unwrap();
        let enc = crate::models::encode(&mut tape2, &bound2, trained.config(), &feats).unwrap();
        let lp = crate::models::ctc_log_probs(&mut tape2, &bound2, &enc).unwrap();
        let width = lp.shape()[1];
        let arg: Vec<usize> = (0..lp.shape()[0])
            .map(|t| {
                let row = lp.row(t);
                (0..width).max_by(|&a, &b| row[a].total_cmp(&row[b])).unwrap()
            })
            .collect();
        println!("frame argmax: {arg:?} (blank = {})", width - 1);
        let peak: Vec<f64> = (0..lp.shape()[0]).map(|t| lp.row(t)[arg[t]].exp()).collect();
        println!("peak probs:   {:?}", peak.iter().map(|p| (p * 100.0).round() / 100.0).collect::<Vec<_>>());
    }
}
