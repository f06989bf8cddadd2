//! Random prediction/truth sets and an independent accuracy recount.

#![allow(dead_code)]

use std::collections::BTreeMap;

use pbf_rag_core::dataset::OneHotVector;
use pbf_rag_core::evaluation::Vectors;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub struct Set {
    pub anomalies: usize,
    pub truth: Vec<Vec<u8>>,
    pub pred: Vec<Vec<u8>>,
}

pub fn random_sets(count: usize, seed: u64) -> Vec<Set> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| {
            let anomalies = rng.random_range(1..=13);
            let samples = rng.random_range(1..=200);
            // Skewed rates so some anomalies are rare or absent.
            let p_truth: f64 = rng.random();
            let p_pred: f64 = rng.random();
            let mut draw = |p: f64| {
                (0..samples)
                    .map(|_| (0..anomalies).map(|_| u8::from(rng.random_bool(p))).collect())
                    .collect::<Vec<Vec<u8>>>()
            };
            let truth = draw(p_truth);
            let pred = draw(p_pred);
            Set { anomalies, truth, pred }
        })
        .collect()
}

pub fn vectors(rows: &[Vec<u8>]) -> Vectors {
    rows.iter()
        .enumerate()
        .map(|(i, bits)| (format!("s{i:04}"), OneHotVector::from_bits("rand", bits.clone()).unwrap()))
        .collect::<BTreeMap<_, _>>()
}

/// Matches over total, by direct comparison, as a reduced fraction.
pub fn recount(truth: &[Vec<u8>], pred: &[Vec<u8>], j: usize) -> (i128, i128) {
    let hits = truth.iter().zip(pred).filter(|(t, p)| t[j] == p[j]).count() as i128;
    let n = truth.len() as i128;
    let g = gcd(hits, n);
    (hits / g, n / g)
}

pub fn prevalence(truth: &[Vec<u8>], j: usize) -> (i128, i128) {
    let ones = truth.iter().filter(|t| t[j] == 1).count() as i128;
    let n = truth.len() as i128;
    let g = gcd(ones, n);
    (ones / g, n / g)
}

fn gcd(a: i128, b: i128) -> i128 {
    if b == 0 { a.max(1) } else { gcd(b, a % b) }
}
