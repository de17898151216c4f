//! Seeded, forkable random streams.
//!
//! Prints the first draws of stream `(42, 7)` (the values frozen in
//! `tests/data/rng_42_7.txt`) and shows that streams forked from one seed
//! are distinct but individually reproducible.
//!
//! ```text
//! cargo run --example rng_streams
//! ```

use sgd_initlab::tensor::{gaussian_matrix, rng_fork};

fn main() -> sgd_initlab::Result<()> {
    let mut rng = rng_fork(42, 7);
    println!("stream (42, 7):");
    println!("  next_u64        {}", rng.next_u64());
    let u = rng.uniform();
    let z = rng.standard_normal();
    println!("  uniform         {u:.17e}  (bits {:#018x})", u.to_bits());
    println!("  standard_normal {z:.17e}  (bits {:#018x})", z.to_bits());

    let head = |stream| {
        let mut r = rng_fork(42, stream);
        (0..4).map(|_| r.uniform()).collect::<Vec<_>>()
    };
    println!("\nfirst uniforms of (42, 0): {:?}", head(0));
    println!("first uniforms of (42, 0): {:?}  (same again)", head(0));
    println!("first uniforms of (42, 1): {:?}", head(1));

    let mut rng = rng_fork(42, 0);
    let g = gaussian_matrix(1000, 1000, 0.0, 1.0, &mut rng)?;
    let n = g.len() as f64;
    let mean = g.as_slice().iter().sum::<f64>() / n;
    let var = g.as_slice().iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    println!("\n10^6 Box-Muller draws: mean {mean:+.5}, variance {var:.5}");
    Ok(())
}
