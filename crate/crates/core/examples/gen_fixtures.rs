//! Writes the ESConv-shaped sample dataset used by the tests and README:
//! `gen_fixtures <out_dir> [n_queries] [seed]`.

use std::fs;
use std::path::PathBuf;

use rahore_core::fixtures::{synthetic_esconv, to_jsonl};

fn main() -> std::io::Result<()> {
    let mut args = std::env::args().skip(1);
    let dir = PathBuf::from(args.next().unwrap_or_else(|| "fixtures".into()));
    let n: usize = args.next().map_or(100, |s| s.parse().expect("n_queries"));
    let seed: u64 = args.next().map_or(2024, |s| s.parse().expect("seed"));
    let (corpus, queries) = to_jsonl(&synthetic_esconv(n, seed));
    fs::create_dir_all(&dir)?;
    fs::write(dir.join("esconv_strategies.jsonl"), corpus)?;
    fs::write(dir.join("esconv_queries.jsonl"), queries)?;
    Ok(())
}
