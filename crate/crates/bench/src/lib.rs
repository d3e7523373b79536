//! Input generators shared by the benchmarks.

use sqlagents_core::model::{Row, Scalar};

/// `n` rows of `(id, name, score)` in a fixed pseudo-random order.
pub fn rows(n: usize, seed: u64) -> Vec<Row> {
    let mut x = seed | 1;
    (0..n)
        .map(|i| {
            x ^= x << 13;
            x ^= x >> 7;
            x ^= x << 17;
            vec![
                Scalar::Integer(i as i64),
                Scalar::Text(format!("name{}", x % 997)),
                Scalar::Real((x % 10_000) as f64 / 7.0),
            ]
        })
        .collect()
}

/// A value column of `n` short place-like strings.
pub fn values(n: usize) -> Vec<String> {
    const WORDS: [&str; 8] = [
        "north", "river", "lake", "saint", "port", "new", "hill", "bay",
    ];
    (0..n)
        .map(|i| format!("{} {} {}", WORDS[i % 8], WORDS[(i / 8) % 8], i))
        .collect()
}
