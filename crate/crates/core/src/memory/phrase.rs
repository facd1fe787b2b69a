use std::collections::HashSet;

use crate::error::{Error, Result};

/// A constituency tree over surface tokens.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Tree {
    Leaf(String),
    Node { label: String, children: Vec<Tree> },
}

impl Tree {
    pub fn leaves(&self) -> Vec<&str> {
        let mut out = Vec::new();
        self.collect_leaves(&mut out);
        out
    }

    fn collect_leaves<'t>(&'t self, out: &mut Vec<&'t str>) {
        match self {
            Tree::Leaf(t) => out.push(t),
            Tree::Node { children, .. } => children.iter().for_each(|c| c.collect_leaves(out)),
        }
    }

    /// `(start, len)` of every constituent, leaves included, in pre-order.
    pub fn spans(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        self.collect_spans(0, &mut out);
        out
    }

    fn collect_spans(&self, start: usize, out: &mut Vec<(usize, usize)>) -> usize {
        match self {
            Tree::Leaf(_) => {
                out.push((start, 1));
                1
            }
            Tree::Node { children, .. } => {
                let slot = out.len();
                out.push((start, 0));
                let mut len = 0;
                for c in children {
                    len += c.collect_spans(start + len, out);
                }
                out[slot].1 = len;
                len
            }
        }
    }
}

/// Parses one bracketed expression such as `(S (NP the cat) (VP sat))`.
/// `line` is reported in errors.
pub fn parse_tree(text: &str, line: usize) -> Result<Tree> {
    let err = |message: &str| Error::Parse {
        line,
        message: message.to_string(),
    };
    let tokens = lex(text);
    let mut pos = 0;
    let tree = parse_node(&tokens, &mut pos).map_err(|m| err(&m))?;
    if pos != tokens.len() {
        return Err(err("trailing input after the closing bracket"));
    }
    Ok(tree)
}

fn lex(text: &str) -> Vec<&str> {
    let mut out = Vec::new();
    let mut start = None;
    for (i, c) in text.char_indices() {
        if c == '(' || c == ')' || c.is_whitespace() {
            if let Some(s) = start.take() {
                out.push(&text[s..i]);
            }
            if !c.is_whitespace() {
                out.push(&text[i..i + 1]);
            }
        } else if start.is_none() {
            start = Some(i);
        }
    }
    if let Some(s) = start {
        out.push(&text[s..]);
    }
    out
}

fn parse_node(tokens: &[&str], pos: &mut usize) -> std::result::Result<Tree, String> {
    if tokens.get(*pos) != Some(&"(") {
        return Err(format!("expected '(' at token {}", *pos));
    }
    *pos += 1;
    let label = match tokens.get(*pos) {
        Some(&t) if t != "(" && t != ")" => t.to_string(),
        _ => return Err("missing constituent label".into()),
    };
    *pos += 1;
    let mut children = Vec::new();
    loop {
        match tokens.get(*pos) {
            None => return Err("unbalanced brackets".into()),
            Some(&")") => {
                *pos += 1;
                break;
            }
            Some(&"(") => children.push(parse_node(tokens, pos)?),
            Some(&t) => {
                children.push(Tree::Leaf(t.to_string()));
                *pos += 1;
            }
        }
    }
    if children.is_empty() {
        return Err(format!("constituent {label} has no children"));
    }
    Ok(Tree::Node { label, children })
}

/// Parses a file with one bracketed tree per non-empty line.
pub fn parse_trees(text: &str) -> Result<Vec<Tree>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| parse_tree(l, i + 1))
        .collect()
}

/// How phrases are read off a sentence.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExtractMode {
    /// Constituent spans of a parse tree.
    Tree,
    /// Every contiguous span.
    Ngram,
}

/// Accumulates phrases across sentences, keeping the first occurrence of each.
#[derive(Clone, Debug, Default)]
pub struct PhraseSet {
    seen: HashSet<Vec<String>>,
    phrases: Vec<Vec<String>>,
}

impl PhraseSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, phrase: Vec<String>) -> bool {
        if self.seen.contains(&phrase) {
            return false;
        }
        self.seen.insert(phrase.clone());
        self.phrases.push(phrase);
        true
    }

    pub fn len(&self) -> usize {
        self.phrases.len()
    }

    pub fn is_empty(&self) -> bool {
        self.phrases.is_empty()
    }

    pub fn phrases(&self) -> &[Vec<String>] {
        &self.phrases
    }

    pub fn into_phrases(self) -> Vec<Vec<String>> {
        self.phrases
    }

    /// Adds every constituent of `tree` with `1 ≤ len ≤ l_max`. Longer
    /// constituents are skipped but their sub-constituents still enter.
    pub fn add_tree(&mut self, tree: &Tree, l_max: usize) {
        let leaves = tree.leaves();
        for (s, n) in tree.spans() {
            if (1..=l_max).contains(&n) {
                self.insert(leaves[s..s + n].iter().map(|t| t.to_string()).collect());
            }
        }
    }

    /// Adds every contiguous span of `tokens` up to `l_max` long.
    pub fn add_ngrams(&mut self, tokens: &[&str], l_max: usize) {
        for n in 1..=l_max.min(tokens.len()) {
            for w in tokens.windows(n) {
                self.insert(w.iter().map(|t| t.to_string()).collect());
            }
        }
    }
}

/// Phrases of one sentence, given either as a bracketed tree or as plain tokens.
pub fn extract_phrases(sentence: &str, l_max: usize, mode: ExtractMode) -> Result<Vec<Vec<String>>> {
    let mut set = PhraseSet::new();
    match mode {
        ExtractMode::Tree => set.add_tree(&parse_tree(sentence, 1)?, l_max),
        ExtractMode::Ngram => set.add_ngrams(&sentence.split_whitespace().collect::<Vec<_>>(), l_max),
    }
    Ok(set.into_phrases())
}
