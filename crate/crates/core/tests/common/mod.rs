//! Reference menus shared by the integration tests. Choice probabilities
//! encode the highlighted choice only: 0.9 for lottery 1, 0.1 for lottery 0.
#![allow(dead_code)]

use anomgen::{Example, ExampleCollection, Lottery, Menu, Provenance};

pub fn lot(z: &[f64], p: &[f64]) -> Lottery {
    Lottery::new(z.to_vec(), p.to_vec()).unwrap()
}

fn example(l0: Lottery, l1: Lottery, choice: u8) -> Example {
    Example::new(Menu::new(l0, l1).unwrap(), if choice == 1 { 0.9 } else { 0.1 })
}

fn collection(a: Example, b: Example) -> ExampleCollection {
    ExampleCollection::new(vec![a, b], Provenance::default()).unwrap()
}

/// Payoffs in millions, padded to three payoffs per lottery.
pub fn allais() -> ExampleCollection {
    collection(
        example(lot(&[1.0, 0.0, 5.0], &[1.0, 0.0, 0.0]), lot(&[1.0, 0.0, 5.0], &[0.89, 0.01, 0.10]), 0),
        example(lot(&[0.0, 1.0, 5.0], &[0.89, 0.11, 0.0]), lot(&[0.0, 5.0, 1.0], &[0.90, 0.10, 0.0]), 1),
    )
}

pub fn certainty_effect() -> ExampleCollection {
    collection(
        example(lot(&[4000.0, 0.0], &[0.8, 0.2]), lot(&[3000.0, 0.0], &[1.0, 0.0]), 1),
        example(lot(&[4000.0, 0.0], &[0.2, 0.8]), lot(&[3000.0, 0.0], &[0.25, 0.75]), 0),
    )
}

pub fn dominated_consequence() -> ExampleCollection {
    collection(
        example(lot(&[6.44, 6.71], &[0.0, 1.0]), lot(&[5.72, 8.64], &[0.13, 0.87]), 0),
        example(lot(&[6.44, 6.71], &[0.11, 0.89]), lot(&[5.72, 8.64], &[0.34, 0.66]), 1),
    )
}

pub fn reverse_dominated_consequence() -> ExampleCollection {
    collection(
        example(lot(&[2.59, 8.87], &[0.88, 0.12]), lot(&[3.51, 8.65], &[0.99, 0.01]), 0),
        example(lot(&[2.59, 8.87], &[0.49, 0.51]), lot(&[3.51, 8.65], &[0.65, 0.35]), 1),
    )
}

pub fn strict_dominance() -> ExampleCollection {
    collection(
        example(lot(&[6.71, 8.98], &[0.22, 0.78]), lot(&[7.17, 8.04], &[1.0, 0.0]), 1),
        example(lot(&[6.71, 8.98], &[0.49, 0.51]), lot(&[7.17, 8.04], &[0.45, 0.55]), 0),
    )
}

/// The certain lottery is listed over the same three payoffs as its partner.
pub fn three_payoff() -> ExampleCollection {
    collection(
        example(lot(&[4.30, 6.17, 8.51], &[0.15, 0.61, 0.24]), lot(&[4.63, 5.04, 5.81], &[1.0, 0.0, 0.0]), 1),
        example(lot(&[4.30, 6.17, 8.51], &[0.36, 0.36, 0.28]), lot(&[4.63, 5.04, 5.81], &[0.30, 0.67, 0.03]), 0),
    )
}
