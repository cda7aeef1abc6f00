//! Random contraction generator shared by the integration targets.
#![allow(dead_code)]

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use tensorslice::expr::{parse, CheckMode, ContractionSpec, ValidatedContraction};
use tensorslice::tensor::{Fill, Tensor, Variance};

pub struct Case {
    pub text: String,
    pub spec: ContractionSpec,
    pub v: ValidatedContraction,
    pub left: Tensor,
    pub right: Tensor,
}

fn index(label: &str, v: Variance) -> String {
    format!("{}{label}", v.symbol())
}

/// Operand ranks in 2..=4, between 1 and 3 contracted labels, extents in
/// `1..=max_extent`, modes and output order shuffled.
pub fn random_case(rng: &mut ChaCha8Rng, max_extent: usize) -> Case {
    let p = rng.gen_range(1..=3usize);
    let rl = rng.gen_range(p.max(2)..=4usize);
    let rr = rng.gen_range(p.max(2)..=4usize);
    let mut names = ('a'..='z').map(|c| c.to_string());
    let contracted: Vec<String> = names.by_ref().take(p).collect();
    let free_l: Vec<String> = names.by_ref().take(rl - p).collect();
    let free_r: Vec<String> = names.by_ref().take(rr - p).collect();

    let mut var = std::collections::BTreeMap::new();
    for l in contracted.iter().chain(&free_l).chain(&free_r) {
        var.insert(l.clone(), if rng.gen_bool(0.5) { Variance::Up } else { Variance::Down });
    }

    let mut left: Vec<String> = contracted.iter().chain(&free_l).cloned().collect();
    let mut right: Vec<String> = contracted.iter().chain(&free_r).cloned().collect();
    let mut out: Vec<String> = free_l.iter().chain(&free_r).cloned().collect();
    left.shuffle(rng);
    right.shuffle(rng);
    out.shuffle(rng);

    let term = |labels: &[String], flip_contracted: bool| -> String {
        labels
            .iter()
            .map(|l| {
                let v = var[l];
                let v = if flip_contracted && contracted.contains(l) { v.flip() } else { v };
                index(l, v)
            })
            .collect::<Vec<_>>()
            .join(",")
    };
    let text = format!("R[{}] = L[{}] * S[{}]", term(&out, false), term(&left, false), term(&right, true));
    let spec = parse(&text, CheckMode::Strict).expect("generated spec parses");
    let extents = spec
        .all_labels()
        .into_iter()
        .map(|l| (l, rng.gen_range(1..=max_extent)))
        .collect();
    let v = ValidatedContraction::from_extents(&spec, &extents).expect("generated extents validate");
    let left = Tensor::new(&v.left_extents(), &spec.left().variances(), Fill::SeededRandom(rng.gen())).unwrap();
    let right = Tensor::new(&v.right_extents(), &spec.right().variances(), Fill::SeededRandom(rng.gen())).unwrap();
    Case {
        text,
        spec,
        v,
        left,
        right,
    }
}

/// Max-norm error of `got` relative to the largest entry of `want`.
pub fn max_rel_err(got: &Tensor, want: &Tensor) -> f64 {
    assert_eq!(got.extents(), want.extents());
    let scale = want.data().iter().fold(0.0f64, |m, x| m.max(x.abs())).max(f64::MIN_POSITIVE);
    got.data()
        .iter()
        .zip(want.data())
        .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()))
        / scale
}
