// FGSM, PGD and MI at a few budgets against one trained ensemble, with
// per-member success and the collaboration rating.

use gdr::attacks::{AttackConfig, AttackKind};
use gdr::data_io;
use gdr::metrics;
use gdr::{train_ensemble, TrainConfig};

pub fn run_example() -> gdr::Result<()> {
    let data = data_io::synthetic_blobs(32, 4, 100, 0.4, 2)?;
    let (train, test) = data.split_at(300)?;
    let mut cfg = TrainConfig::baseline(10).with_hidden(vec![24]).with_seed(4);
    cfg.learning_rate = 0.1;
    let (e, _) = train_ensemble(&cfg, &train)?;

    println!("{:<9} {:>5} {:>8} {:>8} {:>24}", "attack", "eps", "A(E)", "CR", "A(f) per member");
    for kind in [AttackKind::Fgsm, AttackKind::PgdLinf, AttackKind::Mi] {
        for eps in [0.05, 0.15, 0.3] {
            let attack = AttackConfig::for_kind(kind, eps).with_seed(9);
            let r = metrics::evaluate(&e, &test, &attack, f64::NAN)?;
            let per: Vec<String> = e.names().iter().map(|n| format!("{:.2}", r.per_model_success[n])).collect();
            let cr = r.collaboration_rating.map_or("null".to_string(), |c| format!("{c:.3}"));
            println!("{:<9} {eps:>5} {:>8.3} {cr:>8} {:>24}", kind.as_str(), r.ensemble_success, per.join(" "));
        }
    }
    Ok(())
}

#[allow(dead_code)]
fn main() -> gdr::Result<()> {
    run_example()
}
