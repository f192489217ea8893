use std::collections::BTreeSet;

use dsfad_core::captioner::*;
use dsfad_core::datamodel::{Identity, Slot, Split};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Regularized lower incomplete gamma P(a, x) by its power series.
fn gamma_p(a: f64, x: f64) -> f64 {
    let ln_gamma = |z: f64| {
        // Lanczos, g = 7
        const C: [f64; 9] = [
            0.999_999_999_999_809_9,
            676.520_368_121_885_1,
            -1_259.139_216_722_402_8,
            771.323_428_777_653_1,
            -176.615_029_162_140_6,
            12.507_343_278_686_905,
            -0.138_571_095_265_720_12,
            9.984_369_578_019_572e-6,
            1.505_632_735_149_311_6e-7,
        ];
        let z = z - 1.0;
        let mut s = C[0];
        for (i, c) in C.iter().enumerate().skip(1) {
            s += c / (z + i as f64);
        }
        let t = z + 7.5;
        0.5 * (2.0 * std::f64::consts::PI).ln() + (z + 0.5) * t.ln() - t + s.ln()
    };
    let mut term = 1.0 / a;
    let mut sum = term;
    for n in 1..500 {
        term *= x / (a + n as f64);
        sum += term;
    }
    sum * (-x + a * x.ln() - ln_gamma(a)).exp()
}

/// Upper `alpha` quantile of chi-square with `df` degrees of freedom.
fn chi2_critical(df: usize, alpha: f64) -> f64 {
    let (mut lo, mut hi) = (0.0, 200.0);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if 1.0 - gamma_p(df as f64 / 2.0, mid / 2.0) > alpha {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    lo
}

#[test]
fn chi_square_oracle_matches_tables() {
    assert!((chi2_critical(9, 0.001) - 27.877).abs() < 1e-3);
    assert!((chi2_critical(1, 0.05) - 3.841).abs() < 1e-3);
}

#[test]
fn selection_passes_chi_square() {
    let bank = template_bank();
    assert_eq!(bank.len(), 10);
    for seed in [0u64, 1, 2] {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut counts = [0usize; 10];
        for _ in 0..10_000 {
            counts[select_template(&bank, &mut rng).template_id] += 1;
        }
        let stat: f64 = counts.iter().map(|&c| (c as f64 - 1000.0).powi(2) / 1000.0).sum();
        assert!(stat < chi2_critical(9, 0.001), "seed {seed}: {stat}");
        // normal approximation of the 99.9% binomial interval
        let half = 3.2905 * (10_000.0f64 * 0.1 * 0.9).sqrt();
        assert!(counts.iter().all(|&c| (c as f64 - 1000.0).abs() <= half.ceil()));
        assert!(900.0 <= 1000.0 - half && 1000.0 + half <= 1100.0);
    }
}

fn reference_identity() -> Identity {
    let attr = |slot: Slot, phrase: &str| slot.phrases().iter().position(|p| *p == phrase).unwrap() as u8;
    Identity {
        label: 0,
        split: Split::Train,
        attributes: [
            attr(Slot::Gender, "man"),
            attr(Slot::Age, "young"),
            attr(Slot::Hair, "dark hair"),
            attr(Slot::Upper, "a gray shirt"),
            attr(Slot::Lower, "khaki shorts"),
            attr(Slot::Accessory, "a watch"),
        ],
    }
}

#[test]
fn reference_sentence_is_rendered_verbatim() {
    let want = "A young man with dark hair is outfitted in a gray shirt and khaki shorts, accompanied by a watch.";
    let id = reference_identity();
    let hits: Vec<usize> = template_bank()
        .iter()
        .filter(|t| render_caption(&id, t).unwrap() == want)
        .map(|t| t.template_id)
        .collect();
    assert_eq!(hits.len(), 1);
}

#[test]
fn bank_covers_every_slot_with_distinct_skeletons() {
    let bank = template_bank();
    let skeletons: BTreeSet<&str> = bank.iter().map(|t| t.skeleton.as_str()).collect();
    assert_eq!(skeletons.len(), bank.len());
    for slot in Slot::ALL {
        assert!(bank.iter().any(|t| t.slot_order.contains(&slot)));
    }
}

fn identity_strategy() -> impl Strategy<Value = Identity> {
    (0u8..2, 0u8..3, 0u8..4, 0u8..4, 0u8..4, 0u8..4).prop_map(|(a, b, c, d, e, f)| Identity {
        label: 0,
        split: Split::Train,
        attributes: [a, b, c, d, e, f],
    })
}

proptest! {
    #[test]
    fn phrases_are_template_invariant(id in identity_strategy()) {
        for t in template_bank() {
            let text = render_caption(&id, &t).unwrap();
            for slot in &t.slot_order {
                let phrase = id.phrase(*slot).unwrap();
                // articles may be rewritten, the head phrase must survive
                let core = phrase.strip_prefix("a ").unwrap_or(phrase);
                prop_assert!(text.contains(core), "{} missing from {}", core, text);
            }
            let toks = tokenize(&text, DEFAULT_CONTEXT_LENGTH).unwrap();
            prop_assert_eq!(toks.len(), DEFAULT_CONTEXT_LENGTH);
            prop_assert!(detokenize(&toks).eq_ignore_ascii_case(&text));
        }
    }

    #[test]
    fn truncation_keeps_end_marker(len in 8usize..20) {
        let id = reference_identity();
        let text = render_caption(&id, &template_bank()[0]).unwrap();
        let toks = tokenize(&text, len).unwrap();
        prop_assert_eq!(toks.len(), len);
        prop_assert_eq!(toks[0], BEGIN);
        prop_assert!(toks.contains(&END));
    }
}
