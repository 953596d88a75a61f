//! Writes synthetic 28×28 stroke digits as an IDX image file.
//!
//! ```text
//! cargo run --release -p poecaps --example synth_idx -- out.idx 500 [seed]
//! ```

use poecaps::io::write_idx_images;
use poecaps::numerics::Rng;
use poecaps::synthetic::stroke_digits;

fn main() {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let (path, n) = match &args[..] {
        [p, n, ..] => (p, n.parse().expect("count must be an integer")),
        _ => {
            eprintln!("usage: synth_idx <out.idx> <count> [seed]");
            std::process::exit(2);
        }
    };
    let seed = args
        .get(2)
        .map_or(0, |s| s.parse().expect("seed must be an integer"));
    let images = stroke_digits(n, 28, &mut Rng::new(seed));
    if let Err(e) = write_idx_images(&images, path) {
        eprintln!("{e}");
        std::process::exit(2);
    }
}
