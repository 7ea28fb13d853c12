//! CTC forward-algorithm loss against a brute-force oracle that enumerates
//! every alignment path, for all T ≤ 6, |y| ≤ 3 over a 2-symbol alphabet.

use muc_core::{Graph, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Collapse an alignment: merge repeats, then drop blanks.
fn collapse(path: &[usize], blank: usize) -> Vec<usize> {
    let mut out = Vec::new();
    let mut prev = usize::MAX;
    for &p in path {
        if p != prev {
            if p != blank {
                out.push(p);
            }
            prev = p;
        }
    }
    out
}

/// Sum of path probabilities over every alignment that collapses to the
/// transcript; completely independent of the lattice recursion.
fn ctc_brute_force(logits: &Tensor<f64>, targets: &[usize], blank: usize) -> f64 {
    let (t_len, n_class) = logits.dims2();
    // Row softmax.
    let mut probs = vec![0.0f64; t_len * n_class];
    for t in 0..t_len {
        let row = logits.row(t);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for c in 0..n_class {
            let e = (row[c] - max).exp();
            probs[t * n_class + c] = e;
            sum += e;
        }
        for c in 0..n_class {
            probs[t * n_class + c] /= sum;
        }
    }
    let mut total = 0.0f64;
    let n_paths = n_class.pow(t_len as u32);
    let mut path = vec![0usize; t_len];
    for code in 0..n_paths {
        let mut c = code;
        for p in path.iter_mut() {
            *p = c % n_class;
            c /= n_class;
        }
        if collapse(&path, blank) == targets {
            let mut prob = 1.0;
            for (t, &p) in path.iter().enumerate() {
                prob *= probs[t * n_class + p];
            }
            total += prob;
        }
    }
    -total.ln()
}

fn min_frames(targets: &[usize]) -> usize {
    targets.len() + targets.windows(2).filter(|w| w[0] == w[1]).count()
}

#[test]
fn forward_algorithm_matches_exhaustive_enumeration() {
    let blank = 2usize; // 2-symbol alphabet {0, 1} + blank
    let mut rng = ChaCha8Rng::seed_from_u64(404);
    let mut checked = 0;
    for t_len in 1..=6usize {
        for len in 0..=3usize {
            for code in 0..(1usize << len) {
                let targets: Vec<usize> = (0..len).map(|i| (code >> i) & 1).collect();
                if t_len < min_frames(&targets) {
                    continue;
                }
                let logits = Tensor::<f64>::randn(vec![t_len, 3], &mut rng);
                let mut g = Graph::new();
                let id = g.leaf(logits.clone().with_grad());
                let loss = g.ctc_loss(id, &targets, blank).unwrap();
                let fast = g.value(loss).item();
                let slow = ctc_brute_force(&logits, &targets, blank);
                assert!(
                    (fast - slow).abs() < 1e-9,
                    "T={t_len} y={targets:?}: lattice {fast} vs brute force {slow}"
                );
                checked += 1;
            }
        }
    }
    // 3+5+9+13+15+15 feasible (T, y) combinations.
    assert_eq!(checked, 60, "feasible case count drifted");
}

#[test]
fn single_frame_uniform_case_is_ln3() {
    // T=1, y=[a], uniform logits over 3 classes → only one path, -ln(1/3).
    let mut g = Graph::<f64>::new();
    let id = g.constant(Tensor::zeros(vec![1, 3]));
    let loss = g.ctc_loss(id, &[0], 2).unwrap();
    assert!((g.value(loss).item() - 3.0f64.ln()).abs() < 1e-12);
}

#[test]
fn gradient_matches_finite_differences_on_lattice() {
    use muc_core::check::{central_difference, rel_err};
    use muc_core::ParamStore;

    let mut rng = ChaCha8Rng::seed_from_u64(405);
    let logits = Tensor::<f64>::randn(vec![6, 3], &mut rng);
    let targets = vec![0usize, 1, 0];
    let mut params = ParamStore::new();
    params.insert("logits", logits);

    let loss_of = |p: &ParamStore<f64>| {
        let mut g = Graph::new();
        let bound = p.bind(&mut g);
        let l = g.ctc_loss(bound.id("logits"), &targets, 2).unwrap();
        g.value(l).item()
    };
    let analytic = {
        let mut g = Graph::new();
        let bound = params.bind(&mut g);
        let l = g.ctc_loss(bound.id("logits"), &targets, 2).unwrap();
        let grads = g.backward(l).unwrap();
        grads.of(bound.id("logits"), &g)
    };
    for idx in 0..18 {
        let fd = central_difference(&mut { loss_of }, &mut params, "logits", idx, 1e-6);
        let err = rel_err(fd, analytic.data()[idx]);
        assert!(err < 1e-6, "coord {idx}: fd {fd} vs analytic {}", analytic.data()[idx]);
    }
}
