//! Text normalization, BPE subword models and vocabulary management.
//!
//! Merge order is the learning order; ties are broken lexicographically on
//! (left, right) so merge tables are reproducible. The end-of-word marker
//! `</w>` is attached as a suffix to the word-final symbol.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;

use unicode_normalization::UnicodeNormalization;

use crate::error::{Error, Result};
use crate::util::crc32;

pub const PAD_ID: u32 = 0;
pub const BOS_ID: u32 = 1;
pub const EOS_ID: u32 = 2;
pub const UNK_ID: u32 = 3;

pub const EOW: &str = "</w>";

const RESERVED: [&str; 4] = ["<pad>", "<bos>", "<eos>", "<unk>"];

/// Learned subword model: ordered merges plus a dense symbol vocabulary.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SubwordModel {
    pub merges: Vec<(String, String)>,
    pub vocab: BTreeMap<String, u32>,
    pub language_tag: Option<String>,
}

/// A preprocessed line, or the reason it was dropped.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Preprocessed {
    Tokens(Vec<String>),
    Rejected,
}

/// Lowercase, NFC-normalize and whitespace-tokenize one line.
/// Lines longer than `max_len` words (default 80) are rejected, as are
/// empty lines.
pub fn preprocess_line(raw: &str, max_len: usize) -> Preprocessed {
    let norm: String = raw.nfc().collect::<String>().to_lowercase();
    let tokens: Vec<String> = norm.split_whitespace().map(|s| s.to_string()).collect();
    if tokens.is_empty() || tokens.len() > max_len {
        Preprocessed::Rejected
    } else {
        Preprocessed::Tokens(tokens)
    }
}

fn word_symbols(word: &str) -> Vec<String> {
    let chars: Vec<char> = word.chars().collect();
    let n = chars.len();
    chars
        .iter()
        .enumerate()
        .map(|(i, c)| {
            if i == n - 1 {
                format!("{}{}", c, EOW)
            } else {
                c.to_string()
            }
        })
        .collect()
}

fn apply_merge(symbols: &mut Vec<String>, left: &str, right: &str) {
    let mut i = 0;
    while i + 1 < symbols.len() {
        if symbols[i] == left && symbols[i + 1] == right {
            let merged = format!("{}{}", symbols[i], symbols[i + 1]);
            symbols[i] = merged;
            symbols.remove(i + 1);
        } else {
            i += 1;
        }
    }
}

/// Learn a BPE model by greedy most-frequent adjacent pair merging over
/// within-word symbol sequences.
pub fn bpe_learn(corpus: &[Vec<String>], num_merges: usize) -> Result<SubwordModel> {
    let mut word_freq: HashMap<String, u64> = HashMap::new();
    for line in corpus {
        for w in line {
            *word_freq.entry(w.clone()).or_insert(0) += 1;
        }
    }
    if word_freq.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    // Deterministic iteration order regardless of hash state.
    let mut words: Vec<(String, u64)> = word_freq.into_iter().collect();
    words.sort();
    let mut segmented: Vec<(Vec<String>, u64)> = words
        .iter()
        .map(|(w, f)| (word_symbols(w), *f))
        .collect();

    let mut merges = Vec::with_capacity(num_merges);
    for _ in 0..num_merges {
        let mut pair_counts: BTreeMap<(String, String), u64> = BTreeMap::new();
        for (syms, freq) in &segmented {
            for pair in syms.windows(2) {
                *pair_counts
                    .entry((pair[0].clone(), pair[1].clone()))
                    .or_insert(0) += freq;
            }
        }
        // Most frequent pair; BTreeMap order gives the lexicographically
        // smallest (left, right) on ties.
        let best = pair_counts
            .iter()
            .max_by(|a, b| a.1.cmp(b.1).then_with(|| b.0.cmp(a.0)))
            .map(|(k, _)| k.clone());
        let Some((left, right)) = best else { break };
        for (syms, _) in &mut segmented {
            apply_merge(syms, &left, &right);
        }
        merges.push((left, right));
    }

    // Vocabulary: initial character symbols plus every merge product.
    let mut symbols: Vec<String> = Vec::new();
    for (w, _) in &words {
        symbols.extend(word_symbols(w));
    }
    symbols.sort();
    symbols.dedup();
    let mut vocab = BTreeMap::new();
    for (i, r) in RESERVED.iter().enumerate() {
        vocab.insert(r.to_string(), i as u32);
    }
    let mut next_id = RESERVED.len() as u32;
    for s in symbols {
        if !vocab.contains_key(&s) {
            vocab.insert(s, next_id);
            next_id += 1;
        }
    }
    for (l, r) in &merges {
        let m = format!("{}{}", l, r);
        if !vocab.contains_key(&m) {
            vocab.insert(m, next_id);
            next_id += 1;
        }
    }
    Ok(SubwordModel {
        merges,
        vocab,
        language_tag: None,
    })
}

impl SubwordModel {
    pub fn vocab_size(&self) -> usize {
        self.vocab.len()
    }

    /// Segment words into learned subwords and map to ids, wrapped bos..eos.
    /// Symbols absent from the vocabulary map to unk.
    pub fn apply(&self, words: &[String]) -> Vec<u32> {
        let mut ids = vec![BOS_ID];
        for w in words {
            let mut syms = word_symbols(w);
            for (l, r) in &self.merges {
                apply_merge(&mut syms, l, r);
            }
            for s in syms {
                ids.push(*self.vocab.get(&s).unwrap_or(&UNK_ID));
            }
        }
        ids.push(EOS_ID);
        ids
    }

    /// Inverse of [`apply`](Self::apply): strip control ids and rejoin
    /// subwords on end-of-word markers.
    pub fn decode(&self, ids: &[u32]) -> Result<String> {
        let rev: HashMap<u32, &String> = self.vocab.iter().map(|(s, &i)| (i, s)).collect();
        let mut text = String::new();
        for &id in ids {
            if id == PAD_ID || id == BOS_ID || id == EOS_ID {
                continue;
            }
            let sym = rev.get(&id).ok_or(Error::TokenOutOfRange {
                id,
                vocab: self.vocab.len(),
            })?;
            text.push_str(sym);
        }
        let words: Vec<&str> = text.split(EOW).filter(|w| !w.is_empty()).collect();
        Ok(words.join(" "))
    }

    /// Serialize to the text model format.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "BPE v1 {}", self.merges.len());
        for (l, r) in &self.merges {
            let _ = writeln!(out, "{}\t{}", l, r);
        }
        let _ = writeln!(out, "VOCAB");
        // Emit in id order for a stable file.
        let mut by_id: Vec<(&String, &u32)> = self.vocab.iter().collect();
        by_id.sort_by_key(|(_, &id)| id);
        for (s, id) in by_id {
            let _ = writeln!(out, "{}\t{}", s, id);
        }
        out
    }

    pub fn from_text(text: &str) -> Result<SubwordModel> {
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| Error::Config("empty model file".into()))?;
        let num_merges: usize = header
            .strip_prefix("BPE v1 ")
            .and_then(|n| n.parse().ok())
            .ok_or_else(|| Error::Config(format!("bad model header: {}", header)))?;
        let mut merges = Vec::with_capacity(num_merges);
        for _ in 0..num_merges {
            let line = lines
                .next()
                .ok_or_else(|| Error::Config("truncated merge list".into()))?;
            let (l, r) = line
                .split_once('\t')
                .ok_or_else(|| Error::Config(format!("bad merge line: {}", line)))?;
            merges.push((l.to_string(), r.to_string()));
        }
        match lines.next() {
            Some("VOCAB") => {}
            other => {
                return Err(Error::Config(format!(
                    "expected VOCAB sentinel, got {:?}",
                    other
                )))
            }
        }
        let mut vocab = BTreeMap::new();
        for line in lines {
            if line.is_empty() {
                continue;
            }
            let (s, id) = line
                .split_once('\t')
                .ok_or_else(|| Error::Config(format!("bad vocab line: {}", line)))?;
            let id: u32 = id
                .parse()
                .map_err(|_| Error::Config(format!("bad vocab id: {}", line)))?;
            vocab.insert(s.to_string(), id);
        }
        Ok(SubwordModel {
            merges,
            vocab,
            language_tag: None,
        })
    }

    /// Stable fingerprint of the serialized model; modules record this and
    /// the registry refuses composition on mismatch.
    pub fn fingerprint(&self) -> u32 {
        crc32(self.to_text().as_bytes())
    }
}

/// Union of vocabularies with stable re-iding: the first model's ids are
/// preserved, later models' unseen symbols get the next free ids. Merge
/// lists are concatenated in model order with duplicates dropped.
pub fn build_shared_vocab(models: &[SubwordModel]) -> Result<SubwordModel> {
    if models.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let mut vocab: BTreeMap<String, u32> = BTreeMap::new();
    for (i, r) in RESERVED.iter().enumerate() {
        vocab.insert(r.to_string(), i as u32);
    }
    let mut next_id = RESERVED.len() as u32;
    for m in models {
        let mut by_id: Vec<(&String, &u32)> = m.vocab.iter().collect();
        by_id.sort_by_key(|(_, &id)| id);
        for (s, _) in by_id {
            if !vocab.contains_key(s.as_str()) {
                vocab.insert(s.clone(), next_id);
                next_id += 1;
            }
        }
    }
    let mut merges = Vec::new();
    for m in models {
        for pair in &m.merges {
            if !merges.contains(pair) {
                merges.push(pair.clone());
            }
        }
    }
    Ok(SubwordModel {
        merges,
        vocab,
        language_tag: None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toks(line: &str) -> Vec<String> {
        line.split_whitespace().map(|s| s.to_string()).collect()
    }

    #[test]
    fn preprocess_basic() {
        assert_eq!(
            preprocess_line("Hello  world", 80),
            Preprocessed::Tokens(vec!["hello".into(), "world".into()])
        );
    }

    #[test]
    fn preprocess_rejects_long_and_empty() {
        let long = vec!["w"; 81].join(" ");
        assert_eq!(preprocess_line(&long, 80), Preprocessed::Rejected);
        let ok = vec!["w"; 80].join(" ");
        assert!(matches!(preprocess_line(&ok, 80), Preprocessed::Tokens(_)));
        assert_eq!(preprocess_line("", 80), Preprocessed::Rejected);
        assert_eq!(preprocess_line("   ", 80), Preprocessed::Rejected);
    }

    /// Brute-force pair counter over segmented words, for checking merge
    /// choices independently of the learner's bookkeeping.
    fn oracle_best_pair(segmented: &[(Vec<String>, u64)]) -> Option<(String, String)> {
        let mut counts: BTreeMap<(String, String), u64> = BTreeMap::new();
        for (syms, f) in segmented {
            for w in syms.windows(2) {
                *counts.entry((w[0].clone(), w[1].clone())).or_insert(0) += f;
            }
        }
        let max = *counts.values().max()?;
        counts
            .into_iter()
            .filter(|(_, c)| *c == max)
            .map(|(p, _)| p)
            .min()
    }

    /// Full merge-trace oracle: re-derives every merge step from scratch.
    fn oracle_trace(corpus: &[Vec<String>], num_merges: usize) -> Vec<(String, String)> {
        let mut word_freq: BTreeMap<String, u64> = BTreeMap::new();
        for line in corpus {
            for w in line {
                *word_freq.entry(w.clone()).or_insert(0) += 1;
            }
        }
        let mut segmented: Vec<(Vec<String>, u64)> = word_freq
            .iter()
            .map(|(w, f)| (word_symbols(w), *f))
            .collect();
        let mut trace = Vec::new();
        for _ in 0..num_merges {
            let Some((l, r)) = oracle_best_pair(&segmented) else { break };
            for (syms, _) in &mut segmented {
                apply_merge(syms, &l, &r);
            }
            trace.push((l, r));
        }
        trace
    }

    #[test]
    fn zero_merges_is_character_model() {
        let corpus = vec![toks("ab ba")];
        let model = bpe_learn(&corpus, 0).unwrap();
        assert!(model.merges.is_empty());
        let ids = model.apply(&toks("ab"));
        // bos, 'a', 'b</w>', eos
        assert_eq!(ids.len(), 4);
        assert_eq!(ids[0], BOS_ID);
        assert_eq!(*ids.last().unwrap(), EOS_ID);
    }

    #[test]
    fn first_merge_matches_pair_count_oracle() {
        let corpus = vec![toks("ab ab ab")];
        let model = bpe_learn(&corpus, 1).unwrap();
        assert_eq!(model.merges, oracle_trace(&corpus, 1));
        assert_eq!(model.merges[0], ("a".to_string(), format!("b{}", EOW)));
    }

    #[test]
    fn merge_trace_matches_oracle_on_micro_corpora() {
        let corpora = vec![
            vec![toks("aa aa")],
            vec![toks("low lower lowest low")],
            vec![toks("abc abd abc"), toks("bcd abc")],
        ];
        for corpus in corpora {
            let model = bpe_learn(&corpus, 5).unwrap();
            assert_eq!(model.merges, oracle_trace(&corpus, 5));
        }
    }

    #[test]
    fn second_merge_operates_on_first_output() {
        let corpus = vec![toks("aa aa")];
        let model = bpe_learn(&corpus, 2).unwrap();
        assert_eq!(model.merges, oracle_trace(&corpus, 2));
        assert_eq!(model.merges[0], ("a".to_string(), format!("a{}", EOW)));
    }

    #[test]
    fn empty_corpus_errors() {
        assert!(matches!(bpe_learn(&[], 3), Err(Error::EmptyCorpus)));
    }

    #[test]
    fn apply_known_single_symbol_word() {
        let corpus = vec![toks("a b c")];
        let model = bpe_learn(&corpus, 0).unwrap();
        let ids = model.apply(&toks("a"));
        assert_eq!(ids.len(), 3);
        assert_eq!(ids[0], BOS_ID);
        assert_ne!(ids[1], UNK_ID);
        assert_eq!(ids[2], EOS_ID);
    }

    #[test]
    fn unseen_character_maps_to_unk() {
        let corpus = vec![toks("a b")];
        let model = bpe_learn(&corpus, 0).unwrap();
        let ids = model.apply(&toks("z"));
        assert!(ids.contains(&UNK_ID));
    }

    #[test]
    fn decode_apply_round_trip() {
        let corpus = vec![toks("the cat sat"), toks("the mat sat there")];
        let model = bpe_learn(&corpus, 10).unwrap();
        for line in &corpus {
            let ids = model.apply(line);
            assert_eq!(model.decode(&ids).unwrap(), line.join(" "));
        }
    }

    #[test]
    fn decode_degenerate_cases() {
        let model = bpe_learn(&[toks("a")], 0).unwrap();
        assert_eq!(model.decode(&[]).unwrap(), "");
        assert_eq!(model.decode(&[BOS_ID, EOS_ID]).unwrap(), "");
        assert!(matches!(
            model.decode(&[999]),
            Err(Error::TokenOutOfRange { .. })
        ));
    }

    #[test]
    fn staged_merges_equal_single_pass() {
        // Applying k merges then the remaining m equals k+m in one pass.
        let corpus = vec![toks("lower lowest lowly low")];
        let full = bpe_learn(&corpus, 8).unwrap();
        let partial = bpe_learn(&corpus, 5).unwrap();
        assert_eq!(&full.merges[..5], &partial.merges[..]);
        let word = toks("lowest");
        let mut staged = word_symbols(&word[0]);
        for (l, r) in &full.merges {
            apply_merge(&mut staged, l, r);
        }
        let mut two_phase = word_symbols(&word[0]);
        for (l, r) in &partial.merges {
            apply_merge(&mut two_phase, l, r);
        }
        for (l, r) in &full.merges[5..] {
            apply_merge(&mut two_phase, l, r);
        }
        assert_eq!(staged, two_phase);
    }

    #[test]
    fn learn_is_deterministic() {
        let corpus = vec![toks("abc bcd cde abc bcd")];
        let m1 = bpe_learn(&corpus, 6).unwrap();
        let m2 = bpe_learn(&corpus, 6).unwrap();
        assert_eq!(m1, m2);
    }

    #[test]
    fn shared_vocab_union() {
        let a = bpe_learn(&[toks("ab cd")], 2).unwrap();
        let b = bpe_learn(&[toks("ef gh")], 2).unwrap();
        let shared = build_shared_vocab(&[a.clone(), b.clone()]).unwrap();
        // Disjoint payload symbols: union size = |a| + |b| - reserved.
        assert_eq!(
            shared.vocab_size(),
            a.vocab_size() + b.vocab_size() - RESERVED.len()
        );
        // First model's ids are preserved.
        for (s, &id) in &a.vocab {
            assert_eq!(shared.vocab[s], id);
        }
    }

    #[test]
    fn shared_vocab_idempotent() {
        let a = bpe_learn(&[toks("ab ba ab")], 3).unwrap();
        let u = build_shared_vocab(&[a.clone(), a.clone()]).unwrap();
        assert_eq!(u.vocab, a.vocab);
    }

    #[test]
    fn shared_vocab_overlap_keeps_one_id() {
        let a = bpe_learn(&[toks("ab")], 1).unwrap();
        let b = bpe_learn(&[toks("ab cd")], 1).unwrap();
        let shared = build_shared_vocab(&[a, b]).unwrap();
        // Set-union oracle over symbol strings.
        let mut ids: Vec<u32> = shared.vocab.values().copied().collect();
        ids.sort();
        ids.dedup();
        assert_eq!(ids.len(), shared.vocab.len(), "ids must be unique");
        assert_eq!(ids, (0..shared.vocab.len() as u32).collect::<Vec<_>>());
    }

    #[test]
    fn model_file_round_trip() {
        let model = bpe_learn(&[toks("hello world hello")], 12).unwrap();
        let text = model.to_text();
        let parsed = SubwordModel::from_text(&text).unwrap();
        assert_eq!(model, parsed);
        assert_eq!(model.fingerprint(), parsed.fingerprint());
    }
}
