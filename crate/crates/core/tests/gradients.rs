mod common;

use common::{check_gradients, tiny_example, worst, GRAD_TOLERANCE};
use f2r_autograd::Graph;
use f2r_core::corpus::StyleLabel;
use f2r_core::discriminator::{Discriminator, DiscriminatorConfig};
use f2r_core::generator::{Generator, GeneratorConfig, Source};
use f2r_core::training::{loss_cycle, loss_self, loss_style, transfer, StyleLossForm, DEFAULT_EPSILON};

const DRAWS: usize = 24;
const MAX_LEN: usize = 4;

fn models() -> (Generator, Discriminator) {
    (
        Generator::new(GeneratorConfig::tiny(20), 11).unwrap(),
        Discriminator::new(DiscriminatorConfig::tiny(20), 12).unwrap(),
    )
}

fn assert_close(label: &str, draws: &[common::Draw]) {
    let w = worst(draws);
    eprintln!("{label}: worst rel {:.3e} ({} = {:.4e})", w.rel, w.name, w.analytic);
    assert!(w.rel < GRAD_TOLERANCE, "{label}: worst draw {w:?}");
}

#[test]
fn self_reconstruction_gradients() {
    let (gen, _) = models();
    let ex = tiny_example(StyleLabel::Feedback);
    let draws = check_gradients(&gen.params, DRAWS, 1, |s| {
        let mut g = Graph::new();
        let slot = g.bind(s, true);
        let l = loss_self(&gen, &mut g, slot, &ex).unwrap();
        (g.scalar(l), g.backward(l).params(&g, slot))
    });
    assert_close("loss_self", &draws);
}

#[test]
fn cycle_gradients_through_soft_decoding() {
    let (gen, _) = models();
    let ex = tiny_example(StyleLabel::Feedback);
    let draws = check_gradients(&gen.params, DRAWS, 2, |s| {
        let mut g = Graph::new();
        let slot = g.bind(s, true);
        let l = loss_cycle(&gen, &mut g, slot, &ex, StyleLabel::Natural, MAX_LEN, 1.0).unwrap();
        (g.scalar(l), g.backward(l).params(&g, slot))
    });
    assert_close("loss_cycle", &draws);
}

#[test]
fn style_gradients_through_soft_decoding() {
    let (gen, disc) = models();
    let ex = tiny_example(StyleLabel::Feedback);
    let draws = check_gradients(&gen.params, DRAWS, 3, |s| {
        let mut g = Graph::new();
        let slot = g.bind(s, true);
        let dslot = g.bind(&disc.params, false);
        let soft = transfer(&gen, &mut g, slot, &ex, StyleLabel::Natural, MAX_LEN, 1.0).unwrap();
        let l = loss_style(
            &disc,
            &mut g,
            dslot,
            &ex.history,
            Source::Soft(soft.probs),
            StyleLabel::Natural,
            StyleLossForm::Log,
            DEFAULT_EPSILON,
        )
        .unwrap();
        (g.scalar(l), g.backward(l).params(&g, slot))
    });
    assert_close("loss_style", &draws);
}

#[test]
fn discriminator_gradient_wrt_soft_input() {
    let (gen, disc) = models();
    let soft = gen
        .forward_soft(&[14, 15, 16], &[4, 11], StyleLabel::Natural, MAX_LEN, 1.0)
        .unwrap();
    let eval = |probs: &ndarray::Array2<f64>| {
        let mut g = Graph::new();
        let dslot = g.bind(&disc.params, false);
        let p = g.input(probs.clone());
        let out = disc.forward(&mut g, dslot, &[4, 11], Source::Soft(p)).unwrap();
        let lp = g.pick(out.log_probs, &[(0, 1)]);
        let grad = g.backward(lp).wrt(p).cloned();
        (g.scalar(lp), grad)
    };
    let (_, analytic) = eval(&soft.probs);
    let analytic = analytic.unwrap();
    let h = 1e-5;
    for ((r, c), &a) in analytic.indexed_iter().step_by(7).take(DRAWS) {
        let mut plus = soft.probs.clone();
        plus[[r, c]] += h;
        let mut minus = soft.probs.clone();
        minus[[r, c]] -= h;
        let numeric = (eval(&plus).0 - eval(&minus).0) / (2.0 * h);
        let rel = f2r_autograd::gradcheck::relative_error(a, numeric, common::GRAD_FLOOR);
        assert!(rel < GRAD_TOLERANCE, "entry ({r},{c}): {a} vs {numeric}");
    }
}

#[test]
fn discriminator_parameter_gradients() {
    let (_, disc) = models();
    let ex = tiny_example(StyleLabel::Natural);
    let draws = check_gradients(&disc.params, DRAWS, 4, |s| {
        let mut g = Graph::new();
        let slot = g.bind(s, true);
        let l = f2r_core::training::disc_cross_entropy(
            &disc,
            &mut g,
            slot,
            &ex.history,
            Source::Hard(&ex.response),
            ex.style,
        )
        .unwrap();
        (g.scalar(l), g.backward(l).params(&g, slot))
    });
    assert_close("disc", &draws);
}
