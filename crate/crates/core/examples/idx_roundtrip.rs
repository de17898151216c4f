//! Writing and reading IDX image/label files, plain and gzip-compressed.
//!
//! ```text
//! cargo run --example idx_roundtrip
//! ```

use std::io::Write;

use flate2::write::GzEncoder;
use flate2::Compression;
use sgd_initlab::data::{
    encode_idx_images, encode_idx_labels, load_idx_dataset, load_idx_images, parse_idx_images,
};
use sgd_initlab::tensor::Matrix;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let dir = std::env::temp_dir().join(format!("idx-roundtrip-{}", std::process::id()));
    std::fs::create_dir_all(&dir)?;

    // three 2x3 images with pixel values k / 255
    let pixels: Vec<f64> = (0..18).map(|k| (k * 15) as f64 / 255.0).collect();
    let images = Matrix::new(3, 6, pixels)?;
    let img_bytes = encode_idx_images(&images, 2, 3)?;
    let lbl_bytes = encode_idx_labels(&[4, 0, 9])?;

    let mut gz = GzEncoder::new(Vec::new(), Compression::default());
    gz.write_all(&img_bytes)?;
    std::fs::write(dir.join("images.idx3-ubyte.gz"), gz.finish()?)?;
    std::fs::write(dir.join("images.idx3-ubyte"), &img_bytes)?;
    std::fs::write(dir.join("labels.idx1-ubyte"), &lbl_bytes)?;

    let plain = load_idx_images(dir.join("images.idx3-ubyte"))?;
    let packed = load_idx_images(dir.join("images.idx3-ubyte.gz"))?;
    println!("plain == gzip: {}", plain == packed);
    println!("round trip exact: {}", plain == images);

    let ds = load_idx_dataset(dir.join("images.idx3-ubyte.gz"), dir.join("labels.idx1-ubyte"), 10, "toy")?;
    println!("dataset {:?}: {} examples, d = {}, labels {:?}", ds.name(), ds.len(), ds.input_dim(), ds.labels());

    let mut bad = img_bytes.clone();
    bad[3] = 1;
    println!("wrong magic: {}", parse_idx_images(bad).unwrap_err());
    println!("truncated:   {}", parse_idx_images(img_bytes[..20].to_vec()).unwrap_err());

    std::fs::remove_dir_all(&dir)?;
    Ok(())
}
