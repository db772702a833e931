//! Print answer and label balance of a generated corpus.

use std::collections::BTreeMap;

use pointcot::datagen::{generate_corpus, CorpusConfig};
use pointcot::reasoner::{Vocab, UNK};

fn main() -> pointcot::Result<()> {
    let objects = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(512);
    let corpus = generate_corpus(&CorpusConfig { objects, ..CorpusConfig::default() })?;
    let vocab = Vocab::standard();
    let mut answers: BTreeMap<(u8, String), usize> = BTreeMap::new();
    let mut unk = 0;
    let mut max_len = 0;
    for r in &corpus.records {
        *answers.entry((r.level, r.answer.clone())).or_default() += 1;
        let q = vocab.tokenize(&r.question);
        let t = vocab.tokenize(&r.rationale);
        unk += q.iter().chain(&t).filter(|&&i| i == UNK).count();
        max_len = max_len.max(q.len() + t.len());
    }
    let families: BTreeMap<String, usize> = corpus.metas.iter().fold(BTreeMap::new(), |mut m, x| {
        *m.entry(format!("{} stable={}", x.family, x.stable)).or_default() += 1;
        m
    });
    println!("vocab {} unk {unk} max question+rationale tokens {max_len}", vocab.len());
    println!("{families:#?}");
    println!("{answers:#?}");
    Ok(())
}
