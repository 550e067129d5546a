//! Enumerates small symbol corpora whose exact n-gram statistics reproduce
//! the counterexample values (3/4, B, 2/3, D, 1) and prints the first hits.
//!
//! cargo run --release --example search_counterexample -- [limit]

use seqrec::markov::{self, NgramCounts};

fn main() {
    let limit = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(5);
    let symbols = ["A", "B", "C", "D"];
    let found = markov::search_corpora(&symbols, 3, 4, limit);
    if found.is_empty() {
        println!("no corpus of 4 length-3 sequences matches");
        return;
    }
    for corpus in &found {
        let lines: Vec<String> = corpus.iter().map(|s| s.join(" ")).collect();
        println!("{}", lines.join(" / "));
    }
    let counts = NgramCounts::new(&found[0], markov::DEFAULT_ORDER).expect("non-empty corpus");
    print!("{}", markov::counterexample_report(&counts).expect("matching corpus").table());
}
