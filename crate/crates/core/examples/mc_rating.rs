// Monte Carlo convergence, and four-member sets, which have no closed form.

use gdr::geometry::{self, GradientSet, RatingPolicy};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn run_example() -> gdr::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut random = |k: usize, n: usize| -> gdr::Result<GradientSet> {
        GradientSet::new((0..k).map(|_| (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).collect())
    };

    let pair = random(2, 50)?;
    let exact = geometry::r_pair(&pair)?.value;
    println!("pair in 50 dims, exact {exact:.5}");
    for samples in [1_000, 10_000, 100_000] {
        let mc = geometry::r_monte_carlo(&pair, samples, 1)?;
        let ambient = geometry::r_monte_carlo_ambient(&pair, samples, 1)?;
        println!(
            "  {samples:>7} samples: projected {:.5} (se {:.5}), ambient {:.5}",
            mc.value, mc.std_error, ambient.value
        );
    }

    // Four random members land near 1/16; appending a member never raises R.
    let quad = random(4, 20)?;
    let r4 = geometry::rating(&quad, RatingPolicy::default(), 5)?;
    let r3 = geometry::rating(&GradientSet::new(quad.grads()[..3].to_vec())?, RatingPolicy::MonteCarlo { samples: r4.sample_count }, 5)?;
    println!("three members {:.4}, plus a fourth {:.4} ({:?})", r3.value, r4.value, r4.method);
    assert!(r4.value <= r3.value);
    Ok(())
}

#[allow(dead_code)]
fn main() -> gdr::Result<()> {
    run_example()
}
