// Closed-form ratings for one, two and three gradients, checked against
// Monte Carlo on the same sets.

use gdr::geometry::{self, GradientSet};

pub fn run_example() -> gdr::Result<()> {
    let cases: Vec<(&str, Vec<Vec<f64>>)> = vec![
        ("single", vec![vec![1.0, 2.0, -1.0]]),
        ("identical pair", vec![vec![1.0, 0.0, 0.0], vec![2.0, 0.0, 0.0]]),
        ("orthogonal pair", vec![vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0]]),
        ("opposite pair", vec![vec![1.0, 0.0, 0.0], vec![-1.0, 0.0, 0.0]]),
        (
            "orthogonal triple",
            vec![vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0], vec![0.0, 0.0, 1.0]],
        ),
        (
            "coplanar 120 deg triple",
            vec![vec![1.0, 0.0, 0.0], vec![-0.5, 0.75f64.sqrt(), 0.0], vec![-0.5, -(0.75f64.sqrt()), 0.0]],
        ),
    ];
    println!("{:<24} {:>8} {:>8} {:>8}", "set", "exact", "mc", "se");
    for (name, grads) in cases {
        let g = GradientSet::new(grads)?;
        let exact = match g.k() {
            1 => geometry::r_single(&g)?,
            2 => geometry::r_pair(&g)?,
            _ => geometry::r_triple(&g)?,
        };
        let mc = geometry::r_monte_carlo(&g, 200_000, 7)?;
        println!("{name:<24} {:>8.5} {:>8.5} {:>8.5}", exact.value, mc.value, mc.std_error);
        assert!((exact.value - mc.value).abs() < 5.0 * mc.std_error + 1e-9);
    }
    Ok(())
}

#[allow(dead_code)]
fn main() -> gdr::Result<()> {
    run_example()
}
