//! Character and BPE vocabularies for both decoding directions.
//!
//! Left-to-right sequences tokenize the transcript as written. Right-to-left
//! sequences tokenize the character-reversed transcript, so `"the cat"`
//! becomes the token sequence of `"tac eht"`. Under a character vocabulary
//! both directions have the same length; under BPE the reversed text is
//! segmented by its own merge table and lengths usually differ.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use thiserror::Error;

/// Word-boundary marker. In a char vocabulary it is the unit standing for a
/// space; in a BPE vocabulary it is appended to the word-final unit.
pub const BOUNDARY: char = '_';
/// Rendering of the unknown unit when decoding.
pub const UNK_CHAR: char = '\u{FFFD}';

const SOS_UNIT: &str = "<sos>";
const EOS_UNIT: &str = "<eos>";
const UNK_UNIT: &str = "<unk>";

#[derive(Debug, Error)]
pub enum TokenizerError {
    #[error("cannot learn a vocabulary from an empty corpus")]
    EmptyCorpus,
    #[error("token id {id} out of range for vocabulary of size {size}")]
    IdOutOfRange { id: usize, size: usize },
    #[error("vocab file line {line}: {msg}")]
    Format { line: usize, msg: String },
    #[error("vocab io: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum VocabKind {
    Char,
    Bpe,
}

impl VocabKind {
    pub fn as_str(self) -> &'static str {
        match self {
            VocabKind::Char => "char",
            VocabKind::Bpe => "bpe",
        }
    }
}

impl std::str::FromStr for VocabKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "char" => Ok(VocabKind::Char),
            "bpe" => Ok(VocabKind::Bpe),
            other => Err(format!(
                "unknown vocab kind `{other}` (expected char or bpe)"
            )),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Direction {
    L2R,
    R2L,
}

/// How the right-to-left BPE table is obtained.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum R2lMerges {
    /// Learned from scratch on the character-reversed corpus.
    Separate,
    /// The left-to-right merge table applied to reversed text.
    Shared,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenSeq {
    pub ids: Vec<usize>,
    pub direction: Direction,
}

impl TokenSeq {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Vocab {
    kind: VocabKind,
    units: Vec<String>,
    index: HashMap<String, usize>,
    sos: usize,
    eos: usize,
    unk: usize,
    merges: Vec<(String, String)>,
    ranks: HashMap<(String, String), usize>,
}

/// Collapses whitespace runs to single spaces and trims the ends.
pub fn normalize(transcript: &str) -> String {
    transcript.split_whitespace().collect::<Vec<_>>().join(" ")
}

pub fn reverse_chars(s: &str) -> String {
    s.chars().rev().collect()
}

fn alphabet(corpus: &[String]) -> BTreeSet<char> {
    corpus
        .iter()
        .flat_map(|s| s.chars())
        .filter(|c| !c.is_whitespace() && *c != BOUNDARY)
        .collect()
}

fn word_symbols(word: &str) -> Vec<String> {
    let chars: Vec<char> = word.chars().collect();
    chars
        .iter()
        .enumerate()
        .map(|(i, c)| {
            if i + 1 == chars.len() {
                format!("{c}{BOUNDARY}")
            } else {
                c.to_string()
            }
        })
        .collect()
}

/// Greedy pair merging over word-frequency counts. Ties on frequency go to
/// the lexicographically smallest `(left, right)` pair.
fn learn_merges(corpus: &[String], merges: usize) -> Vec<(String, String)> {
    let mut words: BTreeMap<String, usize> = BTreeMap::new();
    for line in corpus {
        for w in line.split_whitespace() {
            *words.entry(w.to_string()).or_default() += 1;
        }
    }
    let mut segmented: Vec<(Vec<String>, usize)> = words
        .into_iter()
        .map(|(w, n)| (word_symbols(&w), n))
        .collect();

    let mut learned = Vec::with_capacity(merges);
    for _ in 0..merges {
        let mut counts: HashMap<(&str, &str), usize> = HashMap::new();
        for (syms, n) in &segmented {
            for pair in syms.windows(2) {
                *counts
                    .entry((pair[0].as_str(), pair[1].as_str()))
                    .or_default() += n;
            }
        }
        let best = counts
            .into_iter()
            .max_by(|(pa, ca), (pb, cb)| ca.cmp(cb).then_with(|| pb.cmp(pa)))
            .map(|((l, r), _)| (l.to_string(), r.to_string()));
        let Some((left, right)) = best else {
            break;
        };
        for (syms, _) in &mut segmented {
            *syms = apply_merge(std::mem::take(syms), &left, &right);
        }
        learned.push((left, right));
    }
    learned
}

fn apply_merge(syms: Vec<String>, left: &str, right: &str) -> Vec<String> {
    let mut out = Vec::with_capacity(syms.len());
    let mut i = 0;
    while i < syms.len() {
        if i + 1 < syms.len() && syms[i] == left && syms[i + 1] == right {
            out.push(format!("{left}{right}"));
            i += 2;
        } else {
            out.push(syms[i].clone());
            i += 1;
        }
    }
    out
}

impl Vocab {
    fn assemble(kind: VocabKind, units: Vec<String>, merges: Vec<(String, String)>) -> Self {
        let index = units
            .iter()
            .enumerate()
            .map(|(i, u)| (u.clone(), i))
            .collect();
        let ranks = merges
            .iter()
            .enumerate()
            .map(|(i, p)| (p.clone(), i))
            .collect();
        Vocab {
            kind,
            units,
            index,
            sos: 0,
            eos: 1,
            unk: 2,
            merges,
            ranks,
        }
    }

    fn specials() -> Vec<String> {
        vec![SOS_UNIT.into(), EOS_UNIT.into(), UNK_UNIT.into()]
    }

    /// Specials, the boundary unit, then every non-space character of the
    /// corpus in code-point order.
    pub fn learn_char(corpus: &[String]) -> Result<Self, TokenizerError> {
        if corpus.is_empty() {
            return Err(TokenizerError::EmptyCorpus);
        }
        let mut units = Self::specials();
        units.push(BOUNDARY.to_string());
        units.extend(alphabet(corpus).into_iter().map(|c| c.to_string()));
        Ok(Self::assemble(VocabKind::Char, units, Vec::new()))
    }

    /// BPE vocabulary: every corpus character in word-internal and
    /// word-final (`c_`) form, followed by one unit per learned merge.
    pub fn learn_bpe(corpus: &[String], merges: usize) -> Result<Self, TokenizerError> {
        if corpus.is_empty() {
            return Err(TokenizerError::EmptyCorpus);
        }
        let learned = learn_merges(corpus, merges);
        Ok(Self::bpe_from_merges(alphabet(corpus), learned))
    }

    fn bpe_from_merges(alphabet: BTreeSet<char>, merges: Vec<(String, String)>) -> Self {
        let mut units = Self::specials();
        for c in &alphabet {
            units.push(c.to_string());
            units.push(format!("{c}{BOUNDARY}"));
        }
        let mut seen: BTreeSet<String> = units.iter().cloned().collect();
        for (l, r) in &merges {
            let joined = format!("{l}{r}");
            if seen.insert(joined.clone()) {
                units.push(joined);
            }
        }
        Self::assemble(VocabKind::Bpe, units, merges)
    }

    pub fn kind(&self) -> VocabKind {
        self.kind
    }

    pub fn len(&self) -> usize {
        self.units.len()
    }

    pub fn is_empty(&self) -> bool {
        self.units.is_empty()
    }

    pub fn sos(&self) -> usize {
        self.sos
    }

    pub fn eos(&self) -> usize {
        self.eos
    }

    pub fn unk(&self) -> usize {
        self.unk
    }

    /// Id of the standalone space unit (char vocabularies only).
    pub fn boundary(&self) -> Option<usize> {
        match self.kind {
            VocabKind::Char => self
                .index
                .get(BOUNDARY.encode_utf8(&mut [0; 4]) as &str)
                .copied(),
            VocabKind::Bpe => None,
        }
    }

    pub fn units(&self) -> &[String] {
        &self.units
    }

    pub fn unit(&self, id: usize) -> Option<&str> {
        self.units.get(id).map(String::as_str)
    }

    pub fn id_of(&self, unit: &str) -> Option<usize> {
        self.index.get(unit).copied()
    }

    pub fn merges(&self) -> &[(String, String)] {
        &self.merges
    }

    fn lookup(&self, unit: &str) -> usize {
        self.index.get(unit).copied().unwrap_or(self.unk)
    }

    /// Tokenizes already-oriented text (reversed by the caller for R2L).
    fn tokenize(&self, text: &str) -> Vec<usize> {
        let mut ids = Vec::new();
        match self.kind {
            VocabKind::Char => {
                for (w, word) in text.split_whitespace().enumerate() {
                    if w > 0 {
                        ids.push(self.boundary().unwrap_or(self.unk));
                    }
                    for c in word.chars() {
                        if c == BOUNDARY {
                            ids.push(self.unk);
                        } else {
                            ids.push(self.lookup(c.encode_utf8(&mut [0; 4])));
                        }
                    }
                }
            }
            VocabKind::Bpe => {
                for word in text.split_whitespace() {
                    ids.extend(self.encode_word(word));
                }
            }
        }
        ids
    }

    fn encode_word(&self, word: &str) -> Vec<usize> {
        let mut syms = word_symbols(word);
        loop {
            let best = syms
                .windows(2)
                .filter_map(|p| self.ranks.get(&(p[0].clone(), p[1].clone())).copied())
                .min();
            let Some(rank) = best else {
                break;
            };
            let (l, r) = &self.merges[rank];
            syms = apply_merge(syms, l, r);
        }
        syms.iter().map(|s| self.lookup(s)).collect()
    }

    /// Units joined back into oriented text (R2L output stays reversed).
    fn detokenize(&self, ids: &[usize]) -> Result<String, TokenizerError> {
        let mut out = String::new();
        for &id in ids {
            let unit = self.unit(id).ok_or(TokenizerError::IdOutOfRange {
                id,
                size: self.len(),
            })?;
            if id == self.sos || id == self.eos {
                continue;
            }
            if id == self.unk {
                out.push(UNK_CHAR);
                continue;
            }
            match self.kind {
                VocabKind::Char if Some(id) == self.boundary() => out.push(' '),
                VocabKind::Char => out.push_str(unit),
                VocabKind::Bpe => match unit.strip_suffix(BOUNDARY) {
                    Some(stem) => {
                        out.push_str(stem);
                        out.push(' ');
                    }
                    None => out.push_str(unit),
                },
            }
        }
        Ok(out.trim_end().to_string())
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "kind={}", self.kind.as_str());
        let _ = writeln!(s, "specials={},{},{}", self.sos, self.eos, self.unk);
        for (i, u) in self.units.iter().enumerate() {
            let _ = writeln!(s, "{i}\t{u}");
        }
        if self.kind == VocabKind::Bpe {
            s.push_str("#MERGES\n");
            for (l, r) in &self.merges {
                let _ = writeln!(s, "{l}\t{r}");
            }
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self, TokenizerError> {
        let err = |line: usize, msg: &str| TokenizerError::Format {
            line,
            msg: msg.to_string(),
        };
        let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
        let (n, first) = lines.next().ok_or_else(|| err(1, "missing kind line"))?;
        let kind: VocabKind = first
            .strip_prefix("kind=")
            .ok_or_else(|| err(n, "expected `kind=<char|bpe>`"))?
            .parse()
            .map_err(|e: String| err(n, &e))?;
        let (n, second) = lines
            .next()
            .ok_or_else(|| err(2, "missing specials line"))?;
        let specials: Vec<usize> = second
            .strip_prefix("specials=")
            .ok_or_else(|| err(n, "expected `specials=<sos>,<eos>,<unk>`"))?
            .split(',')
            .map(|s| s.trim().parse::<usize>())
            .collect::<Result<_, _>>()
            .map_err(|_| err(n, "special ids must be integers"))?;
        if specials.len() != 3 {
            return Err(err(n, "expected exactly three special ids"));
        }

        let mut units = Vec::new();
        let mut merges = Vec::new();
        let mut in_merges = false;
        for (n, line) in lines {
            if line.is_empty() {
                continue;
            }
            if line == "#MERGES" {
                in_merges = true;
                continue;
            }
            let (a, b) = line
                .split_once('\t')
                .ok_or_else(|| err(n, "expected two tab-separated fields"))?;
            if in_merges {
                merges.push((a.to_string(), b.to_string()));
            } else {
                let id: usize = a
                    .parse()
                    .map_err(|_| err(n, "unit id must be an integer"))?;
                if id != units.len() {
                    return Err(err(n, "unit ids must be dense and ascending"));
                }
                units.push(b.to_string());
            }
        }
        if kind == VocabKind::Char && !merges.is_empty() {
            return Err(err(0, "char vocabulary cannot carry merges"));
        }
        if specials.iter().any(|&s| s >= units.len())
            || specials[0] == specials[1]
            || specials[1] == specials[2]
            || specials[0] == specials[2]
        {
            return Err(err(
                2,
                "special ids must be distinct and within the unit table",
            ));
        }
        let mut vocab = Self::assemble(kind, units, merges);
        vocab.sos = specials[0];
        vocab.eos = specials[1];
        vocab.unk = specials[2];
        Ok(vocab)
    }

    pub fn save(&self, path: &Path) -> Result<(), TokenizerError> {
        fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, TokenizerError> {
        Self::from_text(&fs::read_to_string(path)?)
    }
}

/// The left-to-right and right-to-left vocabularies, always kept together.
#[derive(Clone, Debug, PartialEq)]
pub struct VocabPair {
    pub l2r: Vocab,
    pub r2l: Vocab,
}

pub const L2R_FILE: &str = "vocab.l2r.txt";
pub const R2L_FILE: &str = "vocab.r2l.txt";

impl VocabPair {
    pub fn learn(
        corpus: &[String],
        kind: VocabKind,
        merges: usize,
        r2l_mode: R2lMerges,
    ) -> Result<Self, TokenizerError> {
        let corpus: Vec<String> = corpus.iter().map(|s| normalize(s)).collect();
        match kind {
            VocabKind::Char => {
                let v = Vocab::learn_char(&corpus)?;
                Ok(VocabPair {
                    l2r: v.clone(),
                    r2l: v,
                })
            }
            VocabKind::Bpe => {
                let l2r = Vocab::learn_bpe(&corpus, merges)?;
                let r2l = match r2l_mode {
                    R2lMerges::Separate => {
                        let reversed: Vec<String> =
                            corpus.iter().map(|s| reverse_chars(s)).collect();
                        Vocab::learn_bpe(&reversed, merges)?
                    }
                    R2lMerges::Shared => {
                        Vocab::bpe_from_merges(alphabet(&corpus), l2r.merges.clone())
                    }
                };
                Ok(VocabPair { l2r, r2l })
            }
        }
    }

    pub fn kind(&self) -> VocabKind {
        self.l2r.kind
    }

    pub fn get(&self, direction: Direction) -> &Vocab {
        match direction {
            Direction::L2R => &self.l2r,
            Direction::R2L => &self.r2l,
        }
    }

    pub fn encode(&self, transcript: &str, direction: Direction) -> TokenSeq {
        let text = normalize(transcript);
        let ids = match direction {
            Direction::L2R => self.l2r.tokenize(&text),
            Direction::R2L => self.r2l.tokenize(&reverse_chars(&text)),
        };
        TokenSeq { ids, direction }
    }

    /// Inverse of [`VocabPair::encode`]; R2L sequences come back reading forward.
    pub fn decode(&self, seq: &TokenSeq) -> Result<String, TokenizerError> {
        match seq.direction {
            Direction::L2R => self.l2r.detokenize(&seq.ids),
            Direction::R2L => Ok(reverse_chars(&self.r2l.detokenize(&seq.ids)?)),
        }
    }

    pub fn save(&self, dir: &Path) -> Result<(), TokenizerError> {
        fs::create_dir_all(dir)?;
        self.l2r.save(&dir.join(L2R_FILE))?;
        self.r2l.save(&dir.join(R2L_FILE))
    }

    pub fn load(dir: &Path) -> Result<Self, TokenizerError> {
        Ok(VocabPair {
            l2r: Vocab::load(&dir.join(L2R_FILE))?,
            r2l: Vocab::load(&dir.join(R2L_FILE))?,
        })
    }

    /// Maps both vocabularies into one index space keyed by unit string.
    pub fn union(&self) -> UnionVocab {
        let mut names: Vec<String> = Vec::new();
        let mut pos: HashMap<String, usize> = HashMap::new();
        let mut place = |u: &String| -> usize {
            *pos.entry(u.clone()).or_insert_with(|| {
                names.push(u.clone());
                names.len() - 1
            })
        };
        let l2r: Vec<usize> = self.l2r.units.iter().map(&mut place).collect();
        let r2l: Vec<usize> = self.r2l.units.iter().map(&mut place).collect();
        UnionVocab {
            size: names.len(),
            l2r,
            r2l,
        }
    }
}

/// Positions of each direction's units inside the union of both unit tables.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct UnionVocab {
    pub size: usize,
    pub l2r: Vec<usize>,
    pub r2l: Vec<usize>,
}

impl UnionVocab {
    pub fn map(&self, direction: Direction) -> &[usize] {
        match direction {
            Direction::L2R => &self.l2r,
            Direction::R2L => &self.r2l,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn corpus(lines: &[&str]) -> Vec<String> {
        lines.iter().map(|s| s.to_string()).collect()
    }

    fn pair(v: &[(&str, &str)]) -> Vec<(String, String)> {
        v.iter()
            .map(|(a, b)| (a.to_string(), b.to_string()))
            .collect()
    }

    #[test]
    fn bpe_repeated_word_merges_its_pair() {
        let v = Vocab::learn_bpe(&corpus(&["aa aa"]), 1).unwrap();
        assert_eq!(v.merges(), pair(&[("a", "a_")]).as_slice());
        assert!(v.id_of("aa_").is_some());
    }

    #[test]
    fn bpe_single_word_lexicographic_ties() {
        // Both pairs occur once; ("a", "t_") sorts before ("c", "a").
        let v = Vocab::learn_bpe(&corpus(&["cat"]), 2).unwrap();
        assert_eq!(v.merges(), pair(&[("a", "t_"), ("c", "at_")]).as_slice());
    }

    #[test]
    fn bpe_without_merges_is_chars_plus_markers() {
        let v = Vocab::learn_bpe(&corpus(&["ab ba"]), 0).unwrap();
        assert_eq!(
            v.units(),
            &["<sos>", "<eos>", "<unk>", "a", "a_", "b", "b_"]
        );
        assert!(v.merges().is_empty());
    }

    #[test]
    fn bpe_stops_when_no_pairs_remain() {
        let v = Vocab::learn_bpe(&corpus(&["ab"]), 10).unwrap();
        assert_eq!(v.merges().len(), 1);
    }

    #[test]
    fn empty_corpus_rejected() {
        assert!(matches!(
            Vocab::learn_bpe(&[], 3),
            Err(TokenizerError::EmptyCorpus)
        ));
        assert!(matches!(
            Vocab::learn_char(&[]),
            Err(TokenizerError::EmptyCorpus)
        ));
    }

    #[test]
    fn char_encoding_both_directions() {
        let vp =
            VocabPair::learn(&corpus(&["cat"]), VocabKind::Char, 0, R2lMerges::Separate).unwrap();
        let l2r = vp.encode("cat", Direction::L2R);
        let r2l = vp.encode("cat", Direction::R2L);
        let units = |s: &TokenSeq, d| -> Vec<String> {
            s.ids
                .iter()
                .map(|&i| vp.get(d).unit(i).unwrap().to_string())
                .collect()
        };
        assert_eq!(units(&l2r, Direction::L2R), ["c", "a", "t"]);
        assert_eq!(units(&r2l, Direction::R2L), ["t", "a", "c"]);
        assert_eq!(vp.decode(&l2r).unwrap(), "cat");
        assert_eq!(vp.decode(&r2l).unwrap(), "cat");
    }

    #[test]
    fn bpe_reversed_segmentation_differs() {
        // L2R learns "ca" first; the reversed corpus ("tac", "ta") learns "ta".
        let vp = VocabPair::learn(
            &corpus(&["cat", "ca", "at"]),
            VocabKind::Bpe,
            1,
            R2lMerges::Separate,
        )
        .unwrap();
        let show = |d: Direction| -> Vec<String> {
            vp.encode("cat", d)
                .ids
                .iter()
                .map(|&i| vp.get(d).unit(i).unwrap().to_string())
                .collect()
        };
        assert_eq!(vp.l2r.merges(), pair(&[("a", "t_")]).as_slice());
        assert_eq!(show(Direction::L2R), ["c", "at_"]);
        assert_eq!(vp.r2l.merges(), pair(&[("a", "c_")]).as_slice());
        assert_eq!(show(Direction::R2L), ["t", "ac_"]);
    }

    #[test]
    fn cat_segmentation_with_word_markers() {
        // Forward counts favour the word-internal ("a", "t") of "bats"/"mats",
        // which never fires inside "cat"; the reversed corpus favours ("t", "a").
        let vp = VocabPair::learn(
            &corpus(&["cat", "bats", "mats"]),
            VocabKind::Bpe,
            1,
            R2lMerges::Separate,
        )
        .unwrap();
        let l2r = vp.encode("cat", Direction::L2R);
        let r2l = vp.encode("cat", Direction::R2L);
        let show = |s: &TokenSeq, d: Direction| -> Vec<String> {
            s.ids
                .iter()
                .map(|&i| vp.get(d).unit(i).unwrap().to_string())
                .collect()
        };
        assert_eq!(show(&l2r, Direction::L2R), ["c", "a", "t_"]);
        assert_eq!(show(&r2l, Direction::R2L), ["ta", "c_"]);
        assert_eq!((l2r.len(), r2l.len()), (3, 2));
    }

    #[test]
    fn empty_transcript_is_empty_in_both_directions() {
        let vp =
            VocabPair::learn(&corpus(&["ab"]), VocabKind::Bpe, 2, R2lMerges::Separate).unwrap();
        assert!(vp.encode("", Direction::L2R).is_empty());
        assert!(vp.encode("   ", Direction::R2L).is_empty());
        assert_eq!(vp.decode(&vp.encode("", Direction::R2L)).unwrap(), "");
    }

    #[test]
    fn bpe_round_trip_the_cat() {
        let vp = VocabPair::learn(
            &corpus(&["the cat", "the hat", "a cat sat"]),
            VocabKind::Bpe,
            5,
            R2lMerges::Separate,
        )
        .unwrap();
        for d in [Direction::L2R, Direction::R2L] {
            assert_eq!(vp.decode(&vp.encode("the cat", d)).unwrap(), "the cat");
        }
    }

    #[test]
    fn unknown_characters_map_to_unk() {
        let vp =
            VocabPair::learn(&corpus(&["ab"]), VocabKind::Char, 0, R2lMerges::Separate).unwrap();
        let s = vp.encode("azb", Direction::L2R);
        assert_eq!(s.ids[1], vp.l2r.unk());
        assert_eq!(vp.decode(&s).unwrap(), format!("a{UNK_CHAR}b"));
    }

    #[test]
    fn decode_rejects_out_of_range_id() {
        let vp =
            VocabPair::learn(&corpus(&["ab"]), VocabKind::Char, 0, R2lMerges::Separate).unwrap();
        let bad = TokenSeq {
            ids: vec![99],
            direction: Direction::L2R,
        };
        assert!(matches!(
            vp.decode(&bad),
            Err(TokenizerError::IdOutOfRange { id: 99, .. })
        ));
    }

    #[test]
    fn vocab_file_round_trip() {
        let vp = VocabPair::learn(
            &corpus(&["the cat sat", "a hat"]),
            VocabKind::Bpe,
            6,
            R2lMerges::Separate,
        )
        .unwrap();
        let text = vp.r2l.to_text();
        assert!(text.starts_with("kind=bpe\nspecials=0,1,2\n0\t<sos>\n"));
        assert!(text.contains("#MERGES\n"));
        assert_eq!(Vocab::from_text(&text).unwrap(), vp.r2l);

        let dir = tempfile::tempdir().unwrap();
        vp.save(dir.path()).unwrap();
        assert_eq!(VocabPair::load(dir.path()).unwrap(), vp);
    }

    #[test]
    fn vocab_file_errors_name_the_line() {
        let err = Vocab::from_text("kind=char\nspecials=0,1,2\n0\t<sos>\nbroken\n").unwrap_err();
        assert!(
            matches!(err, TokenizerError::Format { line: 4, .. }),
            "{err}"
        );
        let err = Vocab::from_text("kind=word\n").unwrap_err();
        assert!(matches!(err, TokenizerError::Format { line: 1, .. }));
    }

    #[test]
    fn shared_mode_reuses_l2r_merges() {
        let vp = VocabPair::learn(
            &corpus(&["the cat", "that"]),
            VocabKind::Bpe,
            4,
            R2lMerges::Shared,
        )
        .unwrap();
        assert_eq!(vp.l2r.merges(), vp.r2l.merges());
        assert_eq!(
            vp.decode(&vp.encode("the cat", Direction::R2L)).unwrap(),
            "the cat"
        );
    }

    #[test]
    fn union_merges_identical_units() {
        let vp = VocabPair::learn(
            &corpus(&["cat", "ca", "at"]),
            VocabKind::Bpe,
            1,
            R2lMerges::Separate,
        )
        .unwrap();
        let u = vp.union();
        assert_eq!(u.l2r.len(), vp.l2r.len());
        assert_eq!(u.r2l.len(), vp.r2l.len());
        // Base units coincide; only the merged units are direction specific.
        assert_eq!(u.size, vp.l2r.len() + 1);
        assert_eq!(u.l2r[vp.l2r.eos()], u.r2l[vp.r2l.eos()]);
    }

    mod props {
        use proptest::prelude::*;

        use super::super::*;

        fn transcript() -> impl Strategy<Value = String> {
            proptest::collection::vec("[a-f]{1,6}", 1..5).prop_map(|w| w.join(" "))
        }

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(64))]

            #[test]
            fn round_trip_both_kinds_and_directions(
                train in proptest::collection::vec(transcript(), 1..6),
                s in transcript(),
                merges in 0usize..20,
            ) {
                // Make sure every letter of the alphabet is known to the vocab.
                let mut train = train;
                train.push("abcdef".to_string());
                for kind in [VocabKind::Char, VocabKind::Bpe] {
                    let vp = VocabPair::learn(&train, kind, merges, R2lMerges::Separate).unwrap();
                    for d in [Direction::L2R, Direction::R2L] {
                        prop_assert_eq!(vp.decode(&vp.encode(&s, d)).unwrap(), s.clone());
                    }
                }
            }

            #[test]
            fn char_lengths_match(s in transcript()) {
                let vp = VocabPair::learn(&["abcdef".to_string()], VocabKind::Char, 0, R2lMerges::Separate).unwrap();
                prop_assert_eq!(vp.encode(&s, Direction::L2R).len(), vp.encode(&s, Direction::R2L).len());
            }

            #[test]
            fn learn_bpe_is_deterministic(train in proptest::collection::vec(transcript(), 1..6), merges in 0usize..15) {
                let a = Vocab::learn_bpe(&train, merges).unwrap();
                let b = Vocab::learn_bpe(&train, merges).unwrap();
                prop_assert_eq!(a, b);
            }
        }
    }
}
