//! Generate a synthetic corpus plus evaluator fixtures into a directory:
//!
//! ```text
//! gen-corpus <dir> [n_images] [seed]
//! ```
//!
//! The directory ends up with a ready-to-run `run.toml`, so every CLI
//! subcommand can be exercised without any model in the loop.

use vlpref_testkit::{Corpus, CorpusSpec};

fn main() {
    let mut args = std::env::args().skip(1);
    let Some(dir) = args.next() else {
        eprintln!("usage: gen-corpus <dir> [n_images] [seed]");
        std::process::exit(1);
    };
    let n_images: usize = args
        .next()
        .map(|a| a.parse().expect("n_images"))
        .unwrap_or(100);
    let seed: u64 = args.next().map(|a| a.parse().expect("seed")).unwrap_or(7);
    let spec = CorpusSpec {
        n_images,
        seed,
        ..CorpusSpec::default()
    };
    let corpus = Corpus::generate(&spec);
    let paths = corpus.write(std::path::Path::new(&dir));
    println!(
        "wrote {n_images}-image corpus (seed {seed}) and evaluator fixtures to {}",
        paths.dir.display()
    );
    println!("run config: {}", paths.config.display());
}
