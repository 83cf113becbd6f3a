// Train a diversity-regularized ensemble and a plain one on the same data
// and compare their GDR.

use gdr::data_io::{self, SyntheticSpec};
use gdr::{gdr as rate, train_ensemble, GdrOptions, TrainConfig};

pub fn run_example() -> gdr::Result<()> {
    let data = data_io::synthetic(&SyntheticSpec {
        n: 64,
        classes: 4,
        per_class: 200,
        spread: 0.5,
        contrast: 1.0,
        background: 0,
        sibling_flip: 0.15,
        seed: 1,
    })?;
    let (train, test) = data.split_at(600)?;

    let mut grad = TrainConfig::desk().with_hidden(vec![32]).with_seed(7);
    grad.learning_rate = 0.1;
    grad.beta = 0.2;
    let mut base = TrainConfig::baseline(grad.epochs_total()).with_hidden(vec![32]).with_seed(8);
    base.learning_rate = grad.learning_rate;

    for (name, cfg) in [("diverse", grad), ("baseline", base)] {
        let (e, log) = train_ensemble(&cfg, &train)?;
        let last = log.last().expect("at least one epoch");
        let r = rate(&e, &test, &GdrOptions::default())?;
        println!(
            "{name:<9} epochs {} image loss {:.3} accuracy {:.3} GDR {:.4}",
            log.epochs.len(),
            last.image_loss,
            gdr::metrics::consensus_accuracy(&e, &test)?,
            r.gdr
        );
    }
    Ok(())
}

#[allow(dead_code)]
fn main() -> gdr::Result<()> {
    run_example()
}
