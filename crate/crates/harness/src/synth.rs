//! Synthetic translation task with a style lexicon.
//!
//! Source words `s0 … s{n−1}` map one-to-one onto neutral target words
//! `t0 … t{n−1}` under a seeded permutation. A lexicon maps some neutral
//! words onto style-marked words `y0 …`; the customization corpus applies it
//! at `style_rate`, the general corpus at `general_style_rate`.

use std::collections::HashSet;
use std::fs;
use std::path::Path;

use memplug::error::{Error, Result};
use memplug::nmt::{format_corpus, read_corpus, Pair, Vocab, RESERVED};
use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticTaskSpec {
    /// Content words per side; the target side adds `style_words` more.
    pub content_words: usize,
    /// Lexicon size: how many neutral words have a style-marked variant.
    pub style_words: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub style_rate: f64,
    pub general_style_rate: f64,
    pub general_train: usize,
    pub custom_train: usize,
    pub custom_valid: usize,
    pub custom_test: usize,
    pub seed: u64,
}

impl Default for SyntheticTaskSpec {
    fn default() -> Self {
        Self {
            content_words: 36,
            style_words: 10,
            min_len: 4,
            max_len: 9,
            style_rate: 0.9,
            general_style_rate: 0.05,
            general_train: 4000,
            custom_train: 2000,
            custom_valid: 200,
            custom_test: 200,
            seed: 7,
        }
    }
}

impl SyntheticTaskSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.content_words == 0 || self.style_words == 0 || self.style_words > self.content_words {
            return bad(format!(
                "need 1 <= style_words ({}) <= content_words ({})",
                self.style_words, self.content_words
            ));
        }
        if self.min_len == 0 || self.min_len > self.max_len {
            return bad(format!("bad length range {}..={}", self.min_len, self.max_len));
        }
        for (name, r) in [("style_rate", self.style_rate), ("general_style_rate", self.general_style_rate)] {
            if !(0.0..=1.0).contains(&r) {
                return bad(format!("{name} {r} outside [0, 1]"));
            }
        }
        if self.general_train == 0 || self.custom_train == 0 || self.custom_valid == 0 || self.custom_test == 0 {
            return bad("corpus sizes must be positive".into());
        }
        Ok(())
    }

    pub fn src_vocab_size(&self) -> usize {
        RESERVED.len() + self.content_words
    }

    pub fn tgt_vocab_size(&self) -> usize {
        RESERVED.len() + self.content_words + self.style_words
    }
}

/// Everything the pipeline reads: vocabularies, corpora, parses, lexicon.
#[derive(Clone, Debug, PartialEq)]
pub struct Corpora {
    pub src_vocab: Vocab,
    pub tgt_vocab: Vocab,
    pub general_train: Vec<Pair>,
    pub custom_train: Vec<Pair>,
    pub custom_valid: Vec<Pair>,
    pub custom_test: Vec<Pair>,
    /// Right-branching parses of the customization training targets.
    pub parses: Vec<String>,
    /// `(neutral id, style id)` in target ids.
    pub lexicon: Vec<(u32, u32)>,
}

impl Corpora {
    pub fn style_ids(&self) -> HashSet<u32> {
        self.lexicon.iter().map(|&(_, s)| s).collect()
    }

    /// Copy with the customization training set cut to its first `n` pairs.
    pub fn with_custom_size(&self, n: usize) -> Self {
        let mut c = self.clone();
        c.custom_train.truncate(n);
        c.parses.truncate(n);
        c
    }
}

pub const FILES: [&str; 8] = [
    "src.vocab",
    "tgt.vocab",
    "general.train.tsv",
    "custom.train.tsv",
    "custom.valid.tsv",
    "custom.test.tsv",
    "custom.train.parse",
    "lexicon.tsv",
];

/// Right-branching binary tree: `(S a (X b (X c d)))`.
pub fn right_branching(tokens: &[&str]) -> String {
    fn node(label: &str, toks: &[&str]) -> String {
        match toks {
            [a] => format!("({label} {a})"),
            [a, b] => format!("({label} {a} {b})"),
            [a, rest @ ..] => format!("({label} {a} {})", node("X", rest)),
            [] => unreachable!("empty sentence"),
        }
    }
    node("S", tokens)
}

struct Generator<'s> {
    spec: &'s SyntheticTaskSpec,
    rng: ChaCha8Rng,
    map: Vec<u32>,
    style_of: Vec<Option<u32>>,
}

impl Generator<'_> {
    fn sentence(&mut self, rate: f64) -> Pair {
        let n = self.rng.random_range(self.spec.min_len..=self.spec.max_len);
        let base = RESERVED.len() as u32;
        let src: Vec<u32> = (0..n)
            .map(|_| base + self.rng.random_range(0..self.spec.content_words as u32))
            .collect();
        let tgt = src
            .iter()
            .map(|&s| {
                let t = self.map[(s - base) as usize];
                match self.style_of[(t - base) as usize] {
                    Some(y) if self.rng.random_bool(rate) => y,
                    _ => t,
                }
            })
            .collect();
        Pair { src, tgt }
    }

    fn corpus(&mut self, size: usize, rate: f64) -> Vec<Pair> {
        (0..size).map(|_| self.sentence(rate)).collect()
    }
}

/// Generates all corpora deterministically from `spec.seed`.
pub fn generate(spec: &SyntheticTaskSpec) -> Result<Corpora> {
    spec.validate()?;
    let n = spec.content_words;
    let src_vocab = Vocab::new((0..n).map(|i| format!("s{i}")))?;
    let tgt_vocab = Vocab::new((0..n).map(|i| format!("t{i}")).chain((0..spec.style_words).map(|i| format!("y{i}"))))?;
    let base = RESERVED.len() as u32;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut map: Vec<u32> = (0..n as u32).map(|i| base + i).collect();
    map.shuffle(&mut rng);
    let neutral: Vec<u32> = (0..n as u32).collect();
    let chosen: Vec<u32> = neutral.choose_multiple(&mut rng, spec.style_words).copied().collect();
    let mut style_of = vec![None; n];
    let mut lexicon = Vec::with_capacity(spec.style_words);
    for (j, &k) in chosen.iter().enumerate() {
        let y = base + (n + j) as u32;
        style_of[k as usize] = Some(y);
        lexicon.push((base + k, y));
    }
    lexicon.sort_unstable();
    let mut g = Generator { spec, rng, map, style_of };
    let general_train = g.corpus(spec.general_train, spec.general_style_rate);
    let custom_train = g.corpus(spec.custom_train, spec.style_rate);
    let custom_valid = g.corpus(spec.custom_valid, spec.style_rate);
    let custom_test = g.corpus(spec.custom_test, spec.style_rate);
    let parses = custom_train
        .iter()
        .map(|p| {
            let words: Vec<&str> = p.tgt.iter().map(|&t| tgt_vocab.token(t)).collect();
            right_branching(&words)
        })
        .collect();
    Ok(Corpora {
        src_vocab,
        tgt_vocab,
        general_train,
        custom_train,
        custom_valid,
        custom_test,
        parses,
        lexicon,
    })
}

/// Writes the corpora as plain-text files named in [`FILES`].
pub fn write_corpora(c: &Corpora, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    c.src_vocab.save(&dir.join(FILES[0]))?;
    c.tgt_vocab.save(&dir.join(FILES[1]))?;
    for (name, pairs) in [
        (FILES[2], &c.general_train),
        (FILES[3], &c.custom_train),
        (FILES[4], &c.custom_valid),
        (FILES[5], &c.custom_test),
    ] {
        fs::write(dir.join(name), format_corpus(pairs, &c.src_vocab, &c.tgt_vocab))?;
    }
    let mut parses = c.parses.join("\n");
    parses.push('\n');
    fs::write(dir.join(FILES[6]), parses)?;
    let lex: String = c
        .lexicon
        .iter()
        .map(|&(n, s)| format!("{}\t{}\n", c.tgt_vocab.token(n), c.tgt_vocab.token(s)))
        .collect();
    fs::write(dir.join(FILES[7]), lex)?;
    Ok(())
}

/// Reads corpora written by [`write_corpora`].
pub fn read_corpora(dir: &Path) -> Result<Corpora> {
    let src_vocab = Vocab::load(&dir.join(FILES[0]))?;
    let tgt_vocab = Vocab::load(&dir.join(FILES[1]))?;
    let read = |name: &str| read_corpus(&dir.join(name), &src_vocab, &tgt_vocab);
    let general_train = read(FILES[2])?;
    let custom_train = read(FILES[3])?;
    let custom_valid = read(FILES[4])?;
    let custom_test = read(FILES[5])?;
    let parses = read_text(&dir.join(FILES[6]))?.lines().map(str::to_string).collect();
    let mut lexicon = Vec::new();
    for (i, line) in read_text(&dir.join(FILES[7]))?.lines().enumerate() {
        let parse_err = |message: String| Error::Parse { line: i + 1, message };
        let (a, b) = line
            .split_once('\t')
            .ok_or_else(|| parse_err("expected neutral<TAB>styled".into()))?;
        match (tgt_vocab.get(a), tgt_vocab.get(b)) {
            (Some(x), Some(y)) => lexicon.push((x, y)),
            _ => return Err(parse_err(format!("lexicon entry {line:?} not in vocabulary"))),
        }
    }
    if lexicon.is_empty() {
        return Err(Error::Config("style lexicon is empty".into()));
    }
    Ok(Corpora {
        src_vocab,
        tgt_vocab,
        general_train,
        custom_train,
        custom_valid,
        custom_test,
        parses,
        lexicon,
    })
}

pub(crate) fn read_text(path: &Path) -> Result<String> {
    if !path.exists() {
        return Err(Error::Missing(path.to_path_buf()));
    }
    Ok(fs::read_to_string(path)?)
}
