//! Exhaustive-enumeration oracle for the CTC dynamic programs.
//!
//! The oracle walks every one of the C^Z frame-label paths, collapses each
//! (merge repeats, drop blanks) and compares against the reference sequence.
//! It is deliberately independent of the DP implementation it checks.

use xmda_core::ctc::{collapse, ctc_marginal, force_align, CtcError};
use xmda_core::rng::SeededRng;
use xmda_core::tensor::Tensor;

/// Sum and max of path log-probabilities over all paths collapsing to `target`.
fn enumerate_paths(lp: &[f64], z: usize, c: usize, target: &[usize]) -> (f64, f64) {
    let blank = c - 1;
    let mut path = vec![0usize; z];
    let mut sum_p = 0.0f64;
    let mut max_lp = f64::NEG_INFINITY;
    let total = (c as u64).pow(z as u32);
    for mut code in 0..total {
        for slot in path.iter_mut() {
            *slot = (code % c as u64) as usize;
            code /= c as u64;
        }
        if collapse(&path, blank) == target {
            let lp_sum: f64 = path.iter().enumerate().map(|(t, &k)| lp[t * c + k]).sum();
            sum_p += lp_sum.exp();
            if lp_sum > max_lp {
                max_lp = lp_sum;
            }
        }
    }
    (sum_p.ln(), max_lp)
}

fn random_lattice(rng: &mut SeededRng, z: usize, c: usize) -> Tensor {
    let mut data = Vec::with_capacity(z * c);
    for _ in 0..z {
        let logits: Vec<f64> = (0..c).map(|_| 2.0 * rng.std_normal()).collect();
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + logits.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        data.extend(logits.iter().map(|v| v - lse));
    }
    Tensor::new(vec![z, c], data).unwrap()
}

fn random_case(rng: &mut SeededRng) -> (Tensor, Vec<usize>, usize, usize) {
    loop {
        let z = rng.range_inclusive(1, 6);
        let real = rng.range_inclusive(1, 3); // |V_g|
        let v = rng.range_inclusive(1, 3.min(z));
        let labels: Vec<usize> = (0..v).map(|_| rng.below(real)).collect();
        let need = labels.len() + labels.windows(2).filter(|w| w[0] == w[1]).count();
        if z >= need {
            let lat = random_lattice(rng, z, real + 1);
            return (lat, labels, z, real + 1);
        }
    }
}

#[test]
fn marginal_matches_enumeration_on_200_random_cases() {
    let mut rng = SeededRng::stream(4242, "ctc-oracle", 0);
    for case in 0..200 {
        let (lat, labels, z, c) = random_case(&mut rng);
        let got = ctc_marginal(&lat, &labels).unwrap();
        let (want, _) = enumerate_paths(lat.data(), z, c, &labels);
        assert!(
            (got - want).abs() < 1e-9,
            "case {}: dp {} vs enumeration {} (Z={}, C={}, labels={:?})",
            case,
            got,
            want,
            z,
            c,
            labels
        );
    }
}

#[test]
fn viterbi_attains_enumeration_maximum_on_200_random_cases() {
    let mut rng = SeededRng::stream(986, "ctc-oracle", 1);
    for case in 0..200 {
        let (lat, labels, z, c) = random_case(&mut rng);
        let align = force_align(&lat, &labels).unwrap();
        let (_, want_max) = enumerate_paths(lat.data(), z, c, &labels);
        assert!(
            (align.path_log_prob - want_max).abs() < 1e-9,
            "case {}: viterbi {} vs enumeration max {}",
            case,
            align.path_log_prob,
            want_max
        );
        // The recovered path must score what the result claims and collapse
        // back to the reference.
        let scored: f64 = align.path.iter().enumerate().map(|(t, &k)| lat.data()[t * c + k]).sum();
        assert!((scored - align.path_log_prob).abs() < 1e-9);
        assert_eq!(collapse(&align.path, c - 1), labels, "case {}", case);
    }
}

#[test]
fn boundaries_are_ordered_disjoint_and_complete() {
    let mut rng = SeededRng::stream(55, "ctc-oracle", 2);
    for _ in 0..200 {
        let (lat, labels, z, _) = random_case(&mut rng);
        let align = force_align(&lat, &labels).unwrap();
        assert_eq!(align.boundaries.len(), labels.len());
        let mut prev_r: Option<usize> = None;
        for &(l, r) in &align.boundaries {
            assert!(l <= r && r < z);
            if let Some(pr) = prev_r {
                assert!(pr < l, "segments overlap: r={} l={}", pr, l);
            }
            prev_r = Some(r);
        }
    }
}

#[test]
fn marginal_is_at_least_best_path_and_strictly_more_with_multiple_paths() {
    let mut rng = SeededRng::stream(77, "ctc-oracle", 3);
    let mut saw_strict = false;
    for _ in 0..200 {
        let (lat, labels, z, c) = random_case(&mut rng);
        let total = ctc_marginal(&lat, &labels).unwrap();
        let align = force_align(&lat, &labels).unwrap();
        assert!(total >= align.path_log_prob - 1e-12);
        // Count feasible paths; two or more nonzero ones force strictness.
        let blank = c - 1;
        let mut count = 0;
        let mut path = vec![0usize; z];
        for mut code in 0..(c as u64).pow(z as u32) {
            for slot in path.iter_mut() {
                *slot = (code % c as u64) as usize;
                code /= c as u64;
            }
            if collapse(&path, blank) == labels {
                count += 1;
            }
        }
        if count >= 2 {
            assert!(total > align.path_log_prob, "sum must exceed max with {} paths", count);
            saw_strict = true;
        }
    }
    assert!(saw_strict, "test never exercised the strict case");
}

#[test]
fn appending_an_all_blank_frame_does_not_decrease_the_marginal() {
    let mut rng = SeededRng::stream(88, "ctc-oracle", 4);
    for _ in 0..100 {
        let (lat, labels, z, c) = random_case(&mut rng);
        let before = ctc_marginal(&lat, &labels).unwrap();
        let mut data = lat.data().to_vec();
        // New frame: all mass on blank (log prob 0 for blank, -inf-ish rest).
        for k in 0..c {
            data.push(if k == c - 1 { 0.0 } else { -1e30 });
        }
        let grown = Tensor::new(vec![z + 1, c], data).unwrap();
        let after = ctc_marginal(&grown, &labels).unwrap();
        assert!(after >= before - 1e-9, "after {} < before {}", after, before);
    }
}

#[test]
fn infeasible_error_reports_frame_budget() {
    let lat = random_lattice(&mut SeededRng::stream(1, "ctc-oracle", 5), 2, 3);
    match ctc_marginal(&lat, &[0, 0]) {
        Err(CtcError::InfeasibleAlignment { frames, labels, min_frames }) => {
            assert_eq!((frames, labels, min_frames), (2, 2, 3));
        }
        other => panic!("expected infeasible, got {:?}", other),
    }
}
