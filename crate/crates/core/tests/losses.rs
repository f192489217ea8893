use dsfad_core::autograd::Graph;
use dsfad_core::losses::*;
use dsfad_core::Tensor;
use proptest::prelude::*;

fn rows(g: &mut Graph, data: &[Vec<f64>]) -> dsfad_core::autograd::Var {
    g.constant(Tensor::from_rows(data))
}

fn contrastive(f: &[Vec<f64>], t: &[Vec<f64>]) -> f64 {
    let mut g = Graph::new();
    let (fv, tv) = (rows(&mut g, f), rows(&mut g, t));
    let l = contrastive_loss(&mut g, fv, tv, 1.0).unwrap();
    g.value(l).item()
}

/// Two-direction softmax cross-entropy written out from a similarity matrix.
fn contrastive_oracle(s: &[Vec<f64>]) -> f64 {
    let n = s.len();
    let mut total = 0.0;
    for i in 0..n {
        let row: f64 = (0..n).map(|j| s[i][j].exp()).sum();
        let col: f64 = (0..n).map(|j| s[j][i].exp()).sum();
        total -= (s[i][i].exp() / row).ln() / n as f64;
        total -= (s[i][i].exp() / col).ln() / n as f64;
    }
    total
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    dot / (a.iter().map(|x| x * x).sum::<f64>().sqrt() * b.iter().map(|x| x * x).sum::<f64>().sqrt())
}

#[test]
fn contrastive_unit_values() {
    assert_eq!(contrastive(&[vec![0.3, -1.0]], &[vec![2.0, 0.5]]), 0.0);
    let e = [vec![1.0, 0.0], vec![0.0, 1.0]];
    let v = contrastive(&e, &e);
    assert!((v - 2.0 * (1.0 + (-1.0f64).exp()).ln()).abs() < 1e-12);
    assert!((v - 0.62652).abs() < 1e-5);
    let same = [vec![1.0, 1.0], vec![1.0, 1.0]];
    assert!((contrastive(&same, &same) - 2.0 * 2f64.ln()).abs() < 1e-12);
}

#[test]
fn margin_unit_values() {
    let run = |pos: &[Vec<f64>], neg: &[Vec<f64>], t: &[Vec<f64>]| {
        let mut g = Graph::new();
        let (p, n, tt) = (rows(&mut g, pos), rows(&mut g, neg), rows(&mut g, t));
        let l = semantic_margin_loss(&mut g, p, n, tt, 1.0).unwrap();
        g.value(l).item()
    };
    assert_eq!(run(&[vec![1.0, 0.0]], &[vec![-1.0, 0.0]], &[vec![1.0, 0.0]]), 0.0);
    // both at cosine 0.5 to t
    let c = 0.5f64;
    let s = (1.0 - c * c).sqrt();
    let v = run(&[vec![c, s]], &[vec![c, -s]], &[vec![1.0, 0.0]]);
    assert!((v - 1.0).abs() < 1e-12, "{v}");
}

#[test]
fn identity_loss_unit_values() {
    for n_classes in [2usize, 8, 31] {
        let mut g = Graph::new();
        let logits = g.constant(Tensor::full(&[3, n_classes], 0.7));
        let l = identity_loss(&mut g, logits, &[0, 1, n_classes - 1]).unwrap();
        assert!((g.value(l).item() - (n_classes as f64).ln()).abs() < 1e-9);
    }
    let mut g = Graph::new();
    let logits = g.constant(Tensor::from_rows(&[vec![1.0, 0.0]]));
    let l = identity_loss(&mut g, logits, &[0]).unwrap();
    assert!((g.value(l).item() - 0.31326).abs() < 1e-5);
}

#[test]
fn shared_enhancement_constructed_case() {
    // two visible points one apart, two infrared points one apart, every
    // cross pair two apart
    let y = 3.5f64.sqrt();
    let pts = vec![
        vec![0.0, 0.0, 0.0],
        vec![1.0, 0.0, 0.0],
        vec![0.5, y, 0.5],
        vec![0.5, y, -0.5],
    ];
    let dist = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    assert!((dist(&pts[0], &pts[2]) - 2.0).abs() < 1e-12 && (dist(&pts[2], &pts[3]) - 1.0).abs() < 1e-12);
    let mut g = Graph::new();
    let e = rows(&mut g, &pts);
    let l = modality_shared_enhancement_loss(&mut g, e, &[0, 0, 0, 0], &[0, 0, 1, 1]).unwrap();
    assert!((g.value(l).item() - 1.0).abs() < 1e-9);
}

#[test]
fn total_of_unit_parts() {
    let b = total_loss(1.0, 1.0, 1.0, 1.0, 1.0, &LossConfig::default()).unwrap();
    assert!((b.total - 2.47).abs() < 1e-12);
    assert!(total_loss(1.0, f64::NAN, 0.0, 0.0, 0.0, &LossConfig::default()).is_err());
}

fn finite_difference_check(f: impl Fn(&[f64]) -> f64, analytic: &[f64], x: &[f64]) {
    let h = 1e-6;
    for i in 0..x.len() {
        let mut xp = x.to_vec();
        let mut xm = x.to_vec();
        xp[i] += h;
        xm[i] -= h;
        let num = (f(&xp) - f(&xm)) / (2.0 * h);
        let err = (num - analytic[i]).abs() / num.abs().max(analytic[i].abs()).max(1e-6);
        assert!(err < 1e-4, "coordinate {i}: numeric {num} analytic {}", analytic[i]);
    }
}

fn vec_strategy(len: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(0.3f64..2.0, len).prop_map(|v| {
        v.iter().enumerate().map(|(i, x)| if i % 3 == 1 { -x } else { *x }).collect()
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn contrastive_matches_oracle_and_is_nonnegative(n in 1usize..5, d in 2usize..5, raw in prop::collection::vec(-1.0f64..1.0, 40)) {
        let take = |off: usize| -> Vec<Vec<f64>> {
            (0..n).map(|i| (0..d).map(|j| raw[(off + i * d + j) % raw.len()] + if j == i % d { 1.5 } else { 0.0 }).collect()).collect()
        };
        let (f, t) = (take(0), take(17));
        let s: Vec<Vec<f64>> = f.iter().map(|a| t.iter().map(|b| cosine(a, b)).collect()).collect();
        let v = contrastive(&f, &t);
        prop_assert!(v >= 0.0);
        prop_assert!((v - contrastive_oracle(&s)).abs() < 1e-10);
    }

    #[test]
    fn contrastive_decreases_with_diagonal(a in 0.0f64..0.9, b in -0.9f64..0.9, c in -0.9f64..0.9, d in 0.0f64..0.9, bump in 0.01f64..0.1) {
        let s = vec![vec![a, b], vec![c, d]];
        let up = vec![vec![a + bump, b], vec![c, d]];
        prop_assert!(contrastive_oracle(&up) < contrastive_oracle(&s));
    }

    #[test]
    fn enhancement_loss_is_rotation_invariant(pts in prop::collection::vec(-1.0f64..1.0, 16), theta in 0.0f64..6.28) {
        let rows4: Vec<Vec<f64>> = pts.chunks(2).map(|c| c.to_vec()).collect();
        let (ct, st) = (theta.cos(), theta.sin());
        let rot: Vec<Vec<f64>> = rows4.iter().map(|p| vec![ct * p[0] - st * p[1], st * p[0] + ct * p[1]]).collect();
        let ids = [0, 0, 1, 1, 0, 0, 1, 1];
        let mods = [0, 0, 0, 0, 1, 1, 1, 1];
        let eval = |r: &[Vec<f64>]| {
            let mut g = Graph::new();
            let e = g.constant(Tensor::from_rows(r));
            let l = modality_shared_enhancement_loss(&mut g, e, &ids, &mods).unwrap();
            g.value(l).item()
        };
        prop_assert!((eval(&rows4) - eval(&rot)).abs() < 1e-6);
    }

    #[test]
    fn loss_gradients_match_finite_differences(f in vec_strategy(6), t in vec_strategy(6), neg in vec_strategy(6)) {
        let eval = |which: usize, x: &[f64], want_grad: bool| -> (f64, Vec<f64>) {
            let mut g = Graph::new();
            let shape = if which == 3 { vec![4, 3] } else { vec![2, 3] };
            let xv = g.param(Tensor::new(shape, x.to_vec()));
            let tv = g.constant(Tensor::new(vec![2, 3], t.clone()));
            let nv = g.constant(Tensor::new(vec![2, 3], neg.clone()));
            let l = match which {
                0 => contrastive_loss(&mut g, xv, tv, 1.0).unwrap(),
                1 => semantic_margin_loss(&mut g, xv, nv, tv, 1.0).unwrap(),
                2 => semantic_consistency_loss(&mut g, nv, xv, tv, ConsistencyMode::Signed).unwrap(),
                _ => modality_shared_enhancement_loss(&mut g, xv, &[0, 0, 0, 0], &[0, 0, 1, 1]).unwrap(),
            };
            let v = g.value(l).item();
            let grad = if want_grad {
                g.backward(l).get(xv).map(|t| t.data().to_vec()).unwrap_or_else(|| vec![0.0; x.len()])
            } else {
                Vec::new()
            };
            (v, grad)
        };
        let off_hinge = (0..2).all(|i| {
            let r = |v: &[f64]| v[i * 3..i * 3 + 3].to_vec();
            let gap = 1.0 + cosine(&r(&neg), &r(&t)) - cosine(&r(&f), &r(&t));
            gap.abs() > 1e-3
        });
        for which in 0..4 {
            if which == 1 && !off_hinge {
                continue;
            }
            let x = if which == 3 { [f.clone(), neg.clone()].concat() } else { f.clone() };
            let (_, grad) = eval(which, &x, true);
            finite_difference_check(|x| eval(which, x, false).0, &grad, &x);
        }
    }
}
