//! Write train/valid/test splits of a synthetic corpus for experiments.
//!
//! ```text
//! cargo run --release -p tvae --example make_corpus -- OUT_DIR \
//!     [--style topic|varied] [--lines N] [--topics K] [--seed S]
//! ```
//!
//! `topic` sentences are fixed expansions of a sampled topic word (low
//! conditional entropy, the regime where an unmitigated VAE collapses);
//! `varied` sentences draw every slot independently.

use std::path::PathBuf;

use tvae::data::synthetic::{templated_corpus, topic_corpus};

fn main() {
    let mut args = std::env::args().skip(1);
    let out_dir = PathBuf::from(args.next().unwrap_or_else(|| usage()));
    let mut style = "topic".to_string();
    let mut lines = 5000usize;
    let mut topics = 200usize;
    let mut seed = 42u64;
    while let Some(flag) = args.next() {
        let value = args.next().unwrap_or_else(|| usage());
        match flag.as_str() {
            "--style" => style = value,
            "--lines" => lines = value.parse().unwrap_or_else(|_| usage()),
            "--topics" => topics = value.parse().unwrap_or_else(|_| usage()),
            "--seed" => seed = value.parse().unwrap_or_else(|_| usage()),
            _ => usage(),
        }
    }
    let corpus = match style.as_str() {
        "topic" => topic_corpus(lines, topics, seed),
        "varied" => templated_corpus(lines, seed),
        _ => usage(),
    };
    let n = corpus.len();
    let train_end = n * 8 / 10;
    let valid_end = n * 9 / 10;
    std::fs::create_dir_all(&out_dir).expect("create output directory");
    for (name, slice) in [
        ("train.txt", &corpus[..train_end]),
        ("valid.txt", &corpus[train_end..valid_end]),
        ("test.txt", &corpus[valid_end..]),
    ] {
        let path = out_dir.join(name);
        std::fs::write(&path, slice.join("\n")).expect("write split");
        println!("wrote {} ({} lines)", path.display(), slice.len());
    }
}

fn usage() -> ! {
    eprintln!(
        "usage: make_corpus OUT_DIR [--style topic|varied] [--lines N] [--topics K] [--seed S]"
    );
    std::process::exit(2)
}
