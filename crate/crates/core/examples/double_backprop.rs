// Input gradients as graph values, differentiated again with respect to the
// weights, then checked against central differences.

use gdr::autodiff::Graph;
use gdr::trainer::{self, GradLossKind};
use gdr::{Ensemble, MlpModel};
use ndarray::{array, Array2};

pub fn run_example() -> gdr::Result<()> {
    // d/dx (x^3) = 3x^2, and the derivative of that is 6x.
    let mut g = Graph::new();
    let x = g.scalar(2.0)?;
    let x2 = g.mul(x, x)?;
    let x3 = g.mul(x2, x)?;
    let d1 = g.gradient(x3, &[x], true)?;
    let d2 = g.gradient(d1[0], &[x], false)?;
    println!("x^3 at 2: first {}, second {}", g.scalar_value(d1[0]), g.scalar_value(d2[0]));

    // The same machinery through a network: the weight gradient of a loss on
    // input gradients.
    let model = MlpModel::init(&[4, 5, 3], 1)?;
    let mut g = Graph::new();
    let bound = model.bind(&mut g)?;
    let xs = g.constant(array![[0.2, 0.4, 0.6, 0.8]])?;
    let grads = bound.input_gradients(&mut g, xs, &[1], true)?;
    let sq = g.mul(grads, grads)?;
    let penalty = g.sum(sq)?;
    let dw = g.gradient(penalty, &bound.params(), false)?;
    println!("|d penalty / d W0| = {:.4}", g.value(dw[0]).mapv(|v| v * v).sum().sqrt());

    let members = (0..3).map(|i| MlpModel::init(&[6, 5, 3], 10 + i)).collect::<gdr::Result<Vec<_>>>()?;
    let e = Ensemble::from_models(members)?;
    let x = Array2::from_shape_fn((4, 6), |(i, j)| ((i * 6 + j) as f64 * 0.37).sin().abs());
    for kind in [GradLossKind::CosineMaxPairwise, GradLossKind::AngleSum] {
        let err = trainer::finite_difference_error(&e, x.view(), &[0, 1, 2, 1], kind, 0.5, trainer::DEFAULT_TAU, 1e-4)?;
        println!("{}: relative error vs finite differences {err:.2e}", kind.as_str());
        assert!(err < 1e-4);
    }
    Ok(())
}

#[allow(dead_code)]
fn main() -> gdr::Result<()> {
    run_example()
}
