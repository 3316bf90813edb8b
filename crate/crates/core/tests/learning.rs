use f2r_autograd::AdamWConfig;
use f2r_core::corpus::{build_style_corpus, EncodedExample, SplitSpec, StyleTransferExample};
use f2r_core::discriminator::{Discriminator, DiscriminatorConfig};
use f2r_core::experiments::{corpus_vocab, encode_pairs, make_synthetic_corpus, style_vocab, SyntheticSpec, TextPair};
use f2r_core::generator::{held_out_nll, pretrain_generator, Generator, GeneratorConfig, PretrainConfig};
use f2r_core::ranker::{evaluate, train_ranker, Architecture, Ranker, RankerConfig, RankerTrainConfig, RankingExample};
use f2r_core::training::{disc_accuracy, train_discriminator};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Data {
    vocab_size: usize,
    train: Vec<EncodedExample>,
    test: Vec<EncodedExample>,
}

fn synthetic(n: usize) -> Data {
    let spec = SyntheticSpec {
        n_feedback: n,
        n_dialogue: n,
        seed: 21,
        ..SyntheticSpec::default()
    };
    let corpus = make_synthetic_corpus(&spec).unwrap();
    let style = build_style_corpus(&corpus.dialogue, &corpus.feedback(), SplitSpec::default()).unwrap();
    let vocab = style_vocab(&style.train);
    let enc = |xs: &[StyleTransferExample]| -> Vec<EncodedExample> {
        xs.iter().map(|e| EncodedExample::new(&vocab, e, 2, 32, 20)).collect()
    };
    Data {
        vocab_size: vocab.len(),
        train: enc(&style.train),
        test: enc(&style.test),
    }
}

#[test]
fn pretraining_lowers_held_out_nll() {
    let data = synthetic(300);
    let mut gen = Generator::new(GeneratorConfig::desk(data.vocab_size), 4).unwrap();
    let before = held_out_nll(&gen, &data.test).unwrap();
    let report = pretrain_generator(
        &mut gen,
        &data.train,
        &PretrainConfig {
            epochs: 2,
            ..PretrainConfig::default()
        },
    )
    .unwrap();
    let after = held_out_nll(&gen, &data.test).unwrap();
    assert!(after < 0.5 * before, "held-out NLL {before} -> {after}");
    assert!(report.epoch_loss[1] < report.epoch_loss[0], "{:?}", report.epoch_loss);
}

#[test]
fn discriminator_separates_synthetic_styles() {
    let data = synthetic(500);
    let mut disc = Discriminator::new(DiscriminatorConfig::desk(data.vocab_size), 8).unwrap();
    let chance = disc_accuracy(&disc, &data.test).unwrap();
    let losses = train_discriminator(&mut disc, &data.train, 100, 16, AdamWConfig::default(), 3).unwrap();
    let head: f64 = losses[..10].iter().sum::<f64>() / 10.0;
    let tail: f64 = losses[90..].iter().sum::<f64>() / 10.0;
    assert!(tail < head, "loss {head} -> {tail}");
    let acc = disc_accuracy(&disc, &data.test).unwrap();
    assert!(acc > 0.95, "held-out accuracy {acc} (untrained {chance})");
}

#[test]
fn bi_encoder_learns_keyword_matching() {
    let n = 200;
    let pairs: Vec<TextPair> = (0..n)
        .map(|i| TextPair {
            context: format!("[P1] tell me about kw{i} please"),
            response: format!("kw{i} is what i like"),
        })
        .collect();
    let vocab = corpus_vocab(&pairs, 1);
    let config = RankerConfig {
        d_model: 32,
        heads: 2,
        layers: 1,
        d_ff: 64,
        ..RankerConfig::desk(Architecture::Bi, vocab.len())
    };
    let encoded = encode_pairs(&vocab, &pairs, config.max_positions);
    let mut ranker = Ranker::new(config, 5).unwrap();
    let train = RankerTrainConfig {
        steps: 400,
        batch_size: 20,
        ..RankerTrainConfig::default()
    };
    train_ranker(&mut ranker, &encoded, &train).unwrap();

    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let examples: Vec<RankingExample> = (0..n)
        .map(|i| {
            let mut others: Vec<usize> = (0..n).filter(|&j| j != i).collect();
            others.shuffle(&mut rng);
            let mut candidates: Vec<String> = others[..19].iter().map(|&j| pairs[j].response.clone()).collect();
            let correct = rng.gen_range(0..20);
            candidates.insert(correct, pairs[i].response.clone());
            RankingExample {
                context: pairs[i].context.clone(),
                candidates,
                correct,
            }
        })
        .collect();
    let hits = evaluate(&ranker, &vocab, &examples).unwrap();
    assert!(hits > 0.9, "HITS@1/20 {hits}");
}
