use std::f64::consts::LN_2;

use f2r_autograd::{AdamW, AdamWConfig, Graph, Mat};
use f2r_core::corpus::{EncodedExample, StyleLabel, Vocab};
use f2r_core::discriminator::{Discriminator, DiscriminatorConfig};
use f2r_core::generator::{nll_of_picked, Generator, GeneratorConfig, Source};
use f2r_core::training::{discriminator_step, loss_cycle, loss_self, loss_style, StyleLossForm, DEFAULT_EPSILON};

fn example(response: Vec<usize>) -> EncodedExample {
    EncodedExample {
        history: vec![4, 9],
        response,
        style: StyleLabel::Feedback,
    }
}

/// Zeroing the tied embeddings makes every logit equal to the output bias.
fn generator_with_bias(vocab: usize, bias: impl Fn(usize) -> f64) -> Generator {
    let mut gen = Generator::new(GeneratorConfig::tiny(vocab), 5).unwrap();
    let tokens = gen.token_embeddings();
    gen.params.get_mut(tokens).fill(0.0);
    let b = gen.params.find("out_bias").unwrap();
    *gen.params.get_mut(b) = Mat::from_shape_fn((1, vocab), |(_, t)| bias(t));
    gen
}

fn self_loss(gen: &Generator, ex: &EncodedExample) -> f64 {
    let mut g = Graph::new();
    let slot = g.bind(&gen.params, false);
    let l = loss_self(gen, &mut g, slot, ex).unwrap();
    g.scalar(l)
}

fn cycle_loss(gen: &Generator, ex: &EncodedExample) -> f64 {
    let mut g = Graph::new();
    let slot = g.bind(&gen.params, false);
    let l = loss_cycle(gen, &mut g, slot, ex, ex.style.flip(), 5, 1.0).unwrap();
    g.scalar(l)
}

#[test]
fn uniform_predictions_give_length_times_log_vocab() {
    let gen = generator_with_bias(10, |_| 0.0);
    let l = self_loss(&gen, &example(vec![9, 9]));
    assert!((l - 3.0 * 10f64.ln()).abs() < 1e-9, "{l}");
    assert!((l - 6.9078).abs() < 1e-4);
}

#[test]
fn half_probability_tokens_give_two_log_two() {
    let gen = generator_with_bias(12, |t| if t == 9 || t == Vocab::EOS { 0.0 } else { -1e3 });
    let l = self_loss(&gen, &example(vec![9]));
    assert!((l - 2.0 * LN_2).abs() < 1e-9, "{l}");
}

#[test]
fn certain_predictions_give_zero() {
    let mut g = Graph::new();
    let lp = g.constant(Mat::from_shape_fn((3, 10), |(r, c)| {
        if c == r + 4 {
            0.0
        } else {
            f64::NEG_INFINITY
        }
    }));
    let nll = nll_of_picked(&mut g, lp, &[(0, 4), (1, 5), (2, 6)]);
    assert_eq!(g.scalar(nll), 0.0);
}

#[test]
fn losses_ignore_trailing_padding() {
    let gen = Generator::new(GeneratorConfig::tiny(20), 9).unwrap();
    let clean = example(vec![11, 12, 13]);
    let padded = example(vec![11, 12, 13, Vocab::EOS, Vocab::PAD, Vocab::PAD]);
    assert_eq!(self_loss(&gen, &clean), self_loss(&gen, &padded));
    assert_eq!(cycle_loss(&gen, &clean), cycle_loss(&gen, &padded));
}

#[test]
fn losses_are_non_negative() {
    let gen = Generator::new(GeneratorConfig::tiny(20), 9).unwrap();
    for seed in 0..5 {
        let ex = example(vec![10 + seed, 15, 11 + seed]);
        assert!(self_loss(&gen, &ex) >= 0.0);
        assert!(cycle_loss(&gen, &ex) >= 0.0);
    }
}

fn discriminator_with_head(bias: [f64; 2]) -> Discriminator {
    let mut d = Discriminator::new(DiscriminatorConfig::tiny(20), 3).unwrap();
    let w = d.params.find("head.weight").unwrap();
    d.params.get_mut(w).fill(0.0);
    let b = d.params.find("head.bias").unwrap();
    d.params.get_mut(b).assign(&ndarray::arr2(&[bias]));
    d
}

fn style_loss(d: &Discriminator, form: StyleLossForm) -> f64 {
    let mut g = Graph::new();
    let slot = g.bind(&d.params, false);
    let l = loss_style(
        d,
        &mut g,
        slot,
        &[4, 9],
        Source::Hard(&[11, 12]),
        StyleLabel::Natural,
        form,
        DEFAULT_EPSILON,
    )
    .unwrap();
    g.scalar(l)
}

#[test]
fn style_loss_oracles() {
    let even = discriminator_with_head([0.0, 0.0]);
    assert!((style_loss(&even, StyleLossForm::Log) - LN_2).abs() < 1e-9);
    assert!((style_loss(&even, StyleLossForm::Literal) + 0.5).abs() < 1e-9);
    let sure = discriminator_with_head([0.0, -1e3]);
    assert_eq!(style_loss(&sure, StyleLossForm::Log), 0.0);
    assert_eq!(style_loss(&sure, StyleLossForm::Literal), -1.0);
    let never = discriminator_with_head([-1e3, 0.0]);
    assert!((style_loss(&never, StyleLossForm::Log) + 1e-8f64.ln()).abs() < 1e-9);
    assert!((style_loss(&never, StyleLossForm::Log) - 18.4207).abs() < 1e-4);
}

#[test]
fn discriminator_loss_oracles() {
    let mut even = discriminator_with_head([0.0, 0.0]);
    let real = [
        example(vec![11, 12]),
        EncodedExample {
            style: StyleLabel::Natural,
            ..example(vec![13])
        },
    ];
    let refs: Vec<&EncodedExample> = real.iter().collect();
    let mut opt = AdamW::new(AdamWConfig::default(), &even.params);
    let l = discriminator_step(&mut even, &mut opt, &refs, &[], 1.0, None).unwrap();
    assert!((l - LN_2).abs() < 1e-9);

    let mut sure = discriminator_with_head([-1e3, 0.0]);
    let feedback_only = [&real[0]];
    let mut opt = AdamW::new(AdamWConfig::default(), &sure.params);
    assert_eq!(
        discriminator_step(&mut sure, &mut opt, &feedback_only, &[], 1.0, None).unwrap(),
        0.0
    );
}
