// Write a dataset as IDX files, read it back, and bound the pixel error.
// With `GDR_MNIST_DIR` set, also loads real MNIST from that directory.

use std::path::PathBuf;

use gdr::data_io;

pub fn run_example() -> gdr::Result<()> {
    let data = data_io::synthetic_blobs(28 * 28, 10, 3, 0.3, 5)?;
    let dir = std::env::temp_dir().join(format!("gdr-idx-example-{}", std::process::id()));
    std::fs::create_dir_all(&dir).map_err(|e| gdr::Error::file(&dir, e))?;
    let (images, labels) = (dir.join("images-idx3-ubyte"), dir.join("labels-idx1-ubyte"));
    data_io::write_idx(&data, &images, &labels)?;
    let back = data_io::load_idx(&images, &labels)?;
    let worst = data
        .examples()
        .iter()
        .zip(back.examples())
        .flat_map(|(a, b)| a.pixels.iter().zip(&b.pixels).map(|(p, q)| (p - q).abs()))
        .fold(0.0f64, f64::max);
    println!("{} examples round-tripped, max pixel error {worst:.5} (bound {:.5})", back.len(), 1.0 / 510.0);
    let _ = std::fs::remove_dir_all(&dir);

    if let Some(mnist) = std::env::var_os("GDR_MNIST_DIR").map(PathBuf::from) {
        let test = data_io::load_idx(&mnist.join("t10k-images-idx3-ubyte"), &mnist.join("t10k-labels-idx1-ubyte"))?;
        println!("MNIST test set: {} images, class counts {:?}", test.len(), test.class_counts());
    }
    Ok(())
}

#[allow(dead_code)]
fn main() -> gdr::Result<()> {
    run_example()
}
