use std::collections::BTreeMap;

/// Frozen fine-grid references from `examples/reference_values.rs`.
pub fn golden(key: &str) -> f64 {
    let text = include_str!("../data/golden.txt");
    let values: BTreeMap<&str, f64> = text
        .lines()
        .filter(|l| !l.starts_with('#') && !l.trim().is_empty())
        .map(|l| {
            let (k, v) = l.split_once(' ').expect("key value");
            (k, v.trim().parse().expect("number"))
        })
        .collect();
    *values.get(key).unwrap_or_else(|| panic!("no reference {key}"))
}

pub fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs()
}
