// Swap members between two ensembles, both in memory and on disk through a
// manifest that points into the original directories.

use gdr::network::{write_manifest, ManifestMember};
use gdr::{gdr as rate, Ensemble, GdrOptions, MlpModel};

pub fn run_example() -> gdr::Result<()> {
    let data = gdr::data_io::synthetic_blobs(16, 3, 20, 0.3, 1)?;
    let a = Ensemble::from_models((0..3).map(|i| MlpModel::init(&[16, 8, 3], i)).collect::<gdr::Result<_>>()?)?;
    let single = MlpModel::init(&[16, 8, 3], 100)?;
    let b = Ensemble::copies(&single, 3)?;

    let opts = GdrOptions::default();
    println!("independent members: {:.4}", rate(&a, &data, &opts)?.gdr);
    println!("three copies:        {:.4}", rate(&b, &data, &opts)?.gdr);
    let mixed = Ensemble::recombine(&[(&a, 0), (&a, 1), (&b, 0)])?;
    println!("two plus one copy:   {:.4}", rate(&mixed, &data, &opts)?.gdr);

    let root = std::env::temp_dir().join(format!("gdr-recombine-example-{}", std::process::id()));
    a.save_dir(&root.join("a"))?;
    b.save_dir(&root.join("b"))?;
    let manifest: Vec<ManifestMember> = [("a", 0), ("a", 1), ("b", 2)]
        .iter()
        .map(|(dir, m)| ManifestMember {
            name: format!("{dir}.m{m}"),
            file: format!("../{dir}/m{m}.gden"),
        })
        .collect();
    std::fs::create_dir_all(root.join("mixed")).map_err(|e| gdr::Error::file(&root, e))?;
    write_manifest(&root.join("mixed"), &manifest)?;
    let loaded = Ensemble::load(&root.join("mixed"))?;
    println!("from manifest {:?}: {:.4}", loaded.names(), rate(&loaded, &data, &opts)?.gdr);
    let _ = std::fs::remove_dir_all(&root);
    Ok(())
}

#[allow(dead_code)]
fn main() -> gdr::Result<()> {
    run_example()
}
