//! Interaction logs, per-user chronological sequences, leave-one-out splits,
//! padding and negative sampling.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::io::{BufRead, Read, Write};
use std::path::Path;

use rand::distributions::{Distribution, WeightedIndex};
use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{Error, Result};

/// Index 0 of every item table is reserved for padding.
pub const PAD: usize = 0;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Interaction {
    pub user: String,
    pub item: String,
    pub timestamp: u64,
}

/// Column layout of a delimited interaction log.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CsvSpec {
    pub delimiter: u8,
    pub user_col: usize,
    pub item_col: usize,
    pub timestamp_col: usize,
    pub has_header: bool,
}

impl Default for CsvSpec {
    /// `user,item,rating,timestamp` without a header line.
    fn default() -> Self {
        CsvSpec {
            delimiter: b',',
            user_col: 0,
            item_col: 1,
            timestamp_col: 3,
            has_header: false,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParseOutcome {
    pub interactions: Vec<Interaction>,
    pub malformed: usize,
    /// 1-based line numbers of the malformed records (header excluded).
    pub malformed_lines: Vec<usize>,
}

/// Reads one interaction per record. Malformed records are skipped and
/// counted; if more than half of all records are malformed the whole
/// stream is rejected.
pub fn parse_interactions<R: Read>(reader: R, spec: &CsvSpec) -> Result<ParseOutcome> {
    let mut rdr = csv::ReaderBuilder::new()
        .delimiter(spec.delimiter)
        .has_headers(spec.has_header)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let mut out = ParseOutcome::default();
    let mut total = 0usize;
    for (i, rec) in rdr.records().enumerate() {
        let line = i + 1;
        let rec = match rec {
            Ok(r) => r,
            Err(e) if e.is_io_error() => {
                return Err(match e.into_kind() {
                    csv::ErrorKind::Io(io) => Error::io("<interaction stream>", io),
                    _ => unreachable!(),
                })
            }
            Err(_) => {
                total += 1;
                out.malformed += 1;
                out.malformed_lines.push(line);
                continue;
            }
        };
        total += 1;
        let field = |c: usize| rec.get(c).filter(|s| !s.is_empty());
        let parsed = match (field(spec.user_col), field(spec.item_col), field(spec.timestamp_col)) {
            (Some(u), Some(it), Some(ts)) => ts.parse::<u64>().ok().map(|t| Interaction {
                user: u.to_string(),
                item: it.to_string(),
                timestamp: t,
            }),
            _ => None,
        };
        match parsed {
            Some(x) => out.interactions.push(x),
            None => {
                out.malformed += 1;
                out.malformed_lines.push(line);
            }
        }
    }
    if total > 0 && out.malformed * 2 > total {
        return Err(Error::Format(format!(
            "{} of {} records malformed (first at line {})",
            out.malformed, total, out.malformed_lines[0]
        )));
    }
    Ok(out)
}

/// Bijection between item strings and indices `1..=len`.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Vocab {
    items: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocab {
    pub fn from_items(items: Vec<String>) -> Result<Self> {
        let mut index = HashMap::with_capacity(items.len());
        for (i, s) in items.iter().enumerate() {
            if index.insert(s.clone(), i + 1).is_some() {
                return Err(Error::Format(format!("duplicate vocabulary entry `{s}`")));
            }
        }
        Ok(Vocab { items, index })
    }

    /// Synthetic vocabulary `1..=n` named by their own indices.
    pub fn numbered(n: usize) -> Self {
        Self::from_items((1..=n).map(|i| i.to_string()).collect()).expect("distinct")
    }

    fn intern(&mut self, s: &str) -> usize {
        if let Some(&i) = self.index.get(s) {
            return i;
        }
        self.items.push(s.to_string());
        self.index.insert(s.to_string(), self.items.len());
        self.items.len()
    }

    /// Number of real items (padding excluded).
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn index_of(&self, item: &str) -> Option<usize> {
        self.index.get(item).copied()
    }

    pub fn name(&self, index: usize) -> Option<&str> {
        index.checked_sub(1).and_then(|i| self.items.get(i)).map(String::as_str)
    }

    pub fn write_tsv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        for (i, s) in self.items.iter().enumerate() {
            writeln!(w, "{s}\t{}", i + 1)?;
        }
        Ok(())
    }

    pub fn read_tsv<R: BufRead>(r: R) -> Result<Self> {
        let mut pairs = Vec::new();
        for (n, line) in r.lines().enumerate() {
            let line = line.map_err(|e| Error::io("<vocab>", e))?;
            if line.is_empty() {
                continue;
            }
            let (name, idx) = line
                .rsplit_once('\t')
                .and_then(|(a, b)| b.parse::<usize>().ok().map(|i| (a.to_string(), i)))
                .ok_or_else(|| Error::Format(format!("vocab line {}: expected `item<TAB>index`", n + 1)))?;
            pairs.push((idx, name));
        }
        pairs.sort();
        if pairs.iter().enumerate().any(|(i, (idx, _))| *idx != i + 1) {
            return Err(Error::Format("vocab indices must be exactly 1..=N".into()));
        }
        Self::from_items(pairs.into_iter().map(|p| p.1).collect())
    }
}

/// A user's items in chronological order (indices into a [`Vocab`]).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct UserSequence {
    pub user: usize,
    pub items: Vec<usize>,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Corpus {
    pub vocab: Vocab,
    /// User id strings, indexed by `UserSequence::user`.
    pub users: Vec<String>,
    pub sequences: Vec<UserSequence>,
}

/// Groups interactions by user, orders each user's events by timestamp
/// (input order breaks ties), and drops users with fewer than `min_len`
/// events. Users and items are numbered by first appearance among the
/// retained users.
pub fn build_sequences(interactions: &[Interaction], min_len: usize) -> Corpus {
    let mut order: Vec<&str> = Vec::new();
    let mut grouped: HashMap<&str, Vec<(u64, &str)>> = HashMap::new();
    for x in interactions {
        grouped
            .entry(&x.user)
            .or_insert_with(|| {
                order.push(&x.user);
                Vec::new()
            })
            .push((x.timestamp, &x.item));
    }
    let mut corpus = Corpus::default();
    for user in order {
        let mut events = grouped.remove(user).unwrap_or_default();
        if events.len() < min_len {
            continue;
        }
        events.sort_by_key(|e| e.0);
        let items = events.iter().map(|e| corpus.vocab.intern(e.1)).collect();
        corpus.sequences.push(UserSequence {
            user: corpus.users.len(),
            items,
        });
        corpus.users.push(user.to_string());
    }
    corpus
}

impl Corpus {
    /// Builds a corpus directly from index sequences over `1..=num_items`.
    pub fn from_index_sequences(num_items: usize, seqs: Vec<Vec<usize>>) -> Result<Self> {
        for s in &seqs {
            if let Some(&bad) = s.iter().find(|&&i| i == PAD || i > num_items) {
                return Err(Error::Index {
                    index: bad,
                    vocab: num_items,
                });
            }
        }
        Ok(Corpus {
            vocab: Vocab::numbered(num_items),
            users: (0..seqs.len()).map(|u| format!("u{u}")).collect(),
            sequences: seqs
                .into_iter()
                .enumerate()
                .map(|(user, items)| UserSequence { user, items })
                .collect(),
        })
    }

    pub fn length_histogram(&self) -> BTreeMap<usize, usize> {
        let mut h = BTreeMap::new();
        for s in &self.sequences {
            *h.entry(s.items.len()).or_insert(0) += 1;
        }
        h
    }

    /// `user_index<TAB>item item …`
    pub fn write_sequences<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        for s in &self.sequences {
            write!(w, "{}\t", s.user)?;
            write_items(&mut w, &s.items)?;
            writeln!(w)?;
        }
        Ok(())
    }

    pub fn write_users<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        for (i, u) in self.users.iter().enumerate() {
            writeln!(w, "{u}\t{i}")?;
        }
        Ok(())
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        crate::io::write_atomic(&dir.join(SEQUENCES_FILE), |w| self.write_sequences(w))?;
        crate::io::write_atomic(&dir.join(VOCAB_FILE), |w| self.vocab.write_tsv(w))?;
        crate::io::write_atomic(&dir.join(USERS_FILE), |w| self.write_users(w))?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let vocab = Vocab::read_tsv(crate::io::open_required(&dir.join(VOCAB_FILE))?)?;
        let mut users = Vec::new();
        for line in crate::io::open_required(&dir.join(USERS_FILE))?.lines() {
            let line = line.map_err(|e| Error::io(dir.join(USERS_FILE), e))?;
            if let Some((u, _)) = line.rsplit_once('\t') {
                users.push(u.to_string());
            }
        }
        let mut sequences = Vec::new();
        for (n, line) in crate::io::open_required(&dir.join(SEQUENCES_FILE))?.lines().enumerate() {
            let line = line.map_err(|e| Error::io(dir.join(SEQUENCES_FILE), e))?;
            if line.is_empty() {
                continue;
            }
            let bad = || Error::Format(format!("{SEQUENCES_FILE} line {}: malformed", n + 1));
            let (u, rest) = line.split_once('\t').ok_or_else(bad)?;
            let user = u.parse().map_err(|_| bad())?;
            let items = parse_items(rest).ok_or_else(bad)?;
            if let Some(&i) = items.iter().find(|&&i| i == PAD || i > vocab.len()) {
                return Err(Error::Index {
                    index: i,
                    vocab: vocab.len(),
                });
            }
            sequences.push(UserSequence { user, items });
        }
        Ok(Corpus { vocab, users, sequences })
    }
}

pub const SEQUENCES_FILE: &str = "sequences.tsv";
pub const VOCAB_FILE: &str = "vocab.tsv";
pub const USERS_FILE: &str = "users.tsv";

pub(crate) fn write_items<W: Write>(w: &mut W, items: &[usize]) -> std::io::Result<()> {
    for (i, it) in items.iter().enumerate() {
        if i > 0 {
            write!(w, " ")?;
        }
        write!(w, "{it}")?;
    }
    Ok(())
}

pub(crate) fn parse_items(s: &str) -> Option<Vec<usize>> {
    s.split_whitespace().map(|t| t.parse().ok()).collect()
}

/// Leave-one-out split: the last item is the test target, the one before it
/// the validation target.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SplitSequence {
    pub train: Vec<usize>,
    pub valid: usize,
    pub test: usize,
}

impl SplitSequence {
    /// Model input when scoring the test target: `train ++ [valid]`.
    pub fn test_input(&self) -> Vec<usize> {
        let mut v = self.train.clone();
        v.push(self.valid);
        v
    }

    /// Model input when scoring the validation target.
    pub fn valid_input(&self) -> &[usize] {
        &self.train
    }

    pub fn full_len(&self) -> usize {
        self.train.len() + 2
    }
}

pub fn leave_one_out(items: &[usize]) -> Result<SplitSequence> {
    let n = items.len();
    if n < 3 {
        return Err(Error::Split { len: n });
    }
    Ok(SplitSequence {
        train: items[..n - 2].to_vec(),
        valid: items[n - 2],
        test: items[n - 1],
    })
}

/// Keeps the last `n` items, left-padding with [`PAD`] when shorter.
pub fn pad_truncate(items: &[usize], n: usize) -> Vec<usize> {
    if items.len() >= n {
        items[items.len() - n..].to_vec()
    } else {
        let mut out = vec![PAD; n - items.len()];
        out.extend_from_slice(items);
        out
    }
}

fn allowed_count(num_items: usize, exclude: &HashSet<usize>) -> usize {
    num_items - exclude.iter().filter(|&&i| i != PAD && i <= num_items).count()
}

/// Uniform item in `1..=num_items` outside `exclude`.
pub fn sample_negative<R: Rng>(num_items: usize, exclude: &HashSet<usize>, rng: &mut R) -> Result<usize> {
    if allowed_count(num_items, exclude) == 0 {
        return Err(Error::Sampling(format!(
            "no item outside the {} excluded of {num_items}",
            exclude.len()
        )));
    }
    loop {
        let c = rng.gen_range(1..=num_items);
        if !exclude.contains(&c) {
            return Ok(c);
        }
    }
}

/// One negative per supervised position (`targets[j] != PAD`), drawn
/// uniformly from items outside `exclude`; unsupervised positions get [`PAD`].
pub fn sample_train_negatives<R: Rng>(
    targets: &[usize],
    exclude: &HashSet<usize>,
    num_items: usize,
    rng: &mut R,
) -> Result<Vec<usize>> {
    targets
        .iter()
        .map(|&t| {
            if t == PAD {
                Ok(PAD)
            } else {
                sample_negative(num_items, exclude, rng)
            }
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum NegativeSampling {
    #[default]
    Uniform,
    Popularity,
}

impl std::str::FromStr for NegativeSampling {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "uniform" => Ok(Self::Uniform),
            "popularity" => Ok(Self::Popularity),
            _ => Err(Error::Config(format!("unknown negative sampling `{s}`"))),
        }
    }
}

impl std::fmt::Display for NegativeSampling {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Uniform => "uniform",
            Self::Popularity => "popularity",
        })
    }
}

/// How many negatives accompany the ground truth at evaluation time.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EvalNegatives {
    Sampled(usize),
    /// Every item the user never interacted with.
    AllUnseen,
}

/// Ground truth plus distinct never-interacted items, in shuffled order.
///
/// `popularity` is only read for [`NegativeSampling::Popularity`] and holds
/// one weight per item index (index 0 ignored).
pub fn sample_eval_candidates<R: Rng>(
    truth: usize,
    history: &[usize],
    num_items: usize,
    negatives: EvalNegatives,
    sampling: NegativeSampling,
    popularity: Option<&[f64]>,
    rng: &mut R,
) -> Result<Vec<usize>> {
    let mut seen: HashSet<usize> = history.iter().copied().collect();
    seen.insert(truth);
    let allowed: Vec<usize> = (1..=num_items).filter(|i| !seen.contains(i)).collect();
    let count = match negatives {
        EvalNegatives::Sampled(c) => c,
        EvalNegatives::AllUnseen => allowed.len(),
    };
    if allowed.len() < count {
        return Err(Error::Sampling(format!(
            "need {count} negatives but only {} non-interacted items exist",
            allowed.len()
        )));
    }
    let mut out = match sampling {
        NegativeSampling::Uniform => {
            let mut a = allowed;
            let (chosen, _) = a.partial_shuffle(rng, count);
            chosen.to_vec()
        }
        NegativeSampling::Popularity => {
            let pop = popularity.ok_or_else(|| Error::Sampling("popularity weights missing".into()))?;
            let mut pool = allowed;
            let mut chosen = Vec::with_capacity(count);
            while chosen.len() < count {
                let weights: Vec<f64> = pool.iter().map(|&i| pop.get(i).copied().unwrap_or(0.0) + 1e-9).collect();
                let dist = WeightedIndex::new(&weights).map_err(|e| Error::Sampling(e.to_string()))?;
                chosen.push(pool.swap_remove(dist.sample(rng)));
            }
            chosen
        }
    };
    out.push(truth);
    out.shuffle(rng);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng as SeededRng;
    use rand::SeedableRng;

    fn ix(user: &str, item: &str, t: u64) -> Interaction {
        Interaction {
            user: user.into(),
            item: item.into(),
            timestamp: t,
        }
    }

    #[test]
    fn parse_single_record() {
        let out = parse_interactions("u1,i1,5.0,100\n".as_bytes(), &CsvSpec::default()).unwrap();
        assert_eq!(out.interactions, vec![ix("u1", "i1", 100)]);
        assert_eq!(out.malformed, 0);
    }

    #[test]
    fn parse_empty_stream() {
        let out = parse_interactions("".as_bytes(), &CsvSpec::default()).unwrap();
        assert!(out.interactions.is_empty());
        assert_eq!(out.malformed, 0);
    }

    #[test]
    fn parse_counts_malformed_rows() {
        let text = "u1,a,5,1\nu1,b,5,2\nu1,c,5,x\nu2,a,4,3\nu2,b\nu2,c,3,4\nu3,a,1,5\nu3,b,1,6\nu3,c,1,7\nu4,a,1,8\n";
        let out = parse_interactions(text.as_bytes(), &CsvSpec::default()).unwrap();
        assert_eq!(out.interactions.len(), 8);
        assert_eq!(out.malformed, 2);
        assert_eq!(out.malformed_lines, vec![3, 5]);
    }

    #[test]
    fn parse_rejects_mostly_malformed() {
        let text = "a\nb\nu,i,1,2\n";
        assert!(matches!(
            parse_interactions(text.as_bytes(), &CsvSpec::default()),
            Err(Error::Format(_))
        ));
    }

    #[test]
    fn sequences_sorted_by_time() {
        let c = build_sequences(&[ix("u", "a", 3), ix("u", "b", 1), ix("u", "c", 2)], 1);
        let names: Vec<&str> = c.sequences[0].items.iter().map(|&i| c.vocab.name(i).unwrap()).collect();
        assert_eq!(names, ["b", "c", "a"]);
    }

    #[test]
    fn short_users_dropped_and_vocab_restricted() {
        let c = build_sequences(
            &[ix("u", "a", 1), ix("u", "z", 2), ix("v", "b", 1), ix("v", "c", 2), ix("v", "d", 3)],
            3,
        );
        assert_eq!(c.sequences.len(), 1);
        assert_eq!(c.users, vec!["v"]);
        assert_eq!(c.vocab.len(), 3);
        assert!(c.vocab.index_of("a").is_none());
    }

    #[test]
    fn ties_keep_input_order() {
        let c = build_sequences(&[ix("u", "x", 5), ix("u", "y", 5), ix("u", "w", 1)], 1);
        let names: Vec<&str> = c.sequences[0].items.iter().map(|&i| c.vocab.name(i).unwrap()).collect();
        assert_eq!(names, ["w", "x", "y"]);
    }

    #[test]
    fn shuffled_fixture_matches_stable_sort_oracle() {
        let mut rng = SeededRng::seed_from_u64(5);
        let mut events = Vec::new();
        for u in 0..5 {
            for k in 0..(4 + u) {
                events.push(ix(&format!("u{u}"), &format!("i{}", (u * 7 + k * 3) % 11), rng.gen_range(0..6)));
            }
        }
        events.shuffle(&mut rng);
        let c = build_sequences(&events, 1);
        for seq in &c.sequences {
            let user = &c.users[seq.user];
            // Oracle: insertion sort of the user's events, strict comparison
            // keeps equal timestamps in input order.
            let mut mine: Vec<&Interaction> = Vec::new();
            for e in events.iter().filter(|e| &e.user == user) {
                let pos = mine.iter().position(|m| m.timestamp > e.timestamp).unwrap_or(mine.len());
                mine.insert(pos, e);
            }
            let want: Vec<&str> = mine.iter().map(|e| e.item.as_str()).collect();
            let got: Vec<&str> = seq.items.iter().map(|&i| c.vocab.name(i).unwrap()).collect();
            assert_eq!(got, want);
        }
    }

    #[test]
    fn leave_one_out_examples() {
        let s = leave_one_out(&[1, 2, 3, 4, 5]).unwrap();
        assert_eq!((s.train.as_slice(), s.valid, s.test), (&[1, 2, 3][..], 4, 5));
        assert_eq!(s.test_input(), vec![1, 2, 3, 4]);
        let s = leave_one_out(&[1, 2, 3]).unwrap();
        assert_eq!((s.train.as_slice(), s.valid, s.test), (&[1][..], 2, 3));
        assert!(matches!(leave_one_out(&[1, 2]), Err(Error::Split { len: 2 })));
    }

    #[test]
    fn pad_truncate_examples() {
        assert_eq!(pad_truncate(&[7, 8], 4), vec![0, 0, 7, 8]);
        assert_eq!(pad_truncate(&[1, 2, 3, 4, 5], 3), vec![3, 4, 5]);
        assert_eq!(pad_truncate(&[9], 1), vec![9]);
    }

    #[test]
    fn forced_negative() {
        let mut rng = SeededRng::seed_from_u64(0);
        let excl: HashSet<usize> = [1].into();
        for _ in 0..50 {
            assert_eq!(sample_train_negatives(&[1], &excl, 2, &mut rng).unwrap(), vec![2]);
        }
        let all: HashSet<usize> = [1, 2].into();
        assert!(matches!(sample_negative(2, &all, &mut rng), Err(Error::Sampling(_))));
    }

    #[test]
    fn negatives_avoid_history_and_are_reproducible() {
        let seq = [3usize, 9, 4, 12, 3];
        let excl: HashSet<usize> = seq.iter().copied().collect();
        let mut rng = SeededRng::seed_from_u64(11);
        for _ in 0..2000 {
            let neg = sample_train_negatives(&[0, 3, 9, 4, 12], &excl, 15, &mut rng).unwrap();
            assert_eq!(neg[0], PAD);
            assert!(neg[1..].iter().all(|n| !excl.contains(n) && (1..=15).contains(n)));
        }
        let a = sample_train_negatives(&seq, &excl, 15, &mut SeededRng::seed_from_u64(1)).unwrap();
        let b = sample_train_negatives(&seq, &excl, 15, &mut SeededRng::seed_from_u64(1)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn eval_candidates_protocol() {
        let history: Vec<usize> = (1..=20).collect();
        let mut rng = SeededRng::seed_from_u64(2);
        let c = sample_eval_candidates(
            21,
            &history,
            500,
            EvalNegatives::Sampled(100),
            NegativeSampling::Uniform,
            None,
            &mut rng,
        )
        .unwrap();
        assert_eq!(c.len(), 101);
        assert_eq!(c.iter().filter(|&&x| x == 21).count(), 1);
        assert!(c.iter().filter(|&&x| x != 21).all(|x| !history.contains(x)));
        assert_eq!(c.iter().collect::<HashSet<_>>().len(), 101);

        let c = sample_eval_candidates(
            21,
            &history,
            500,
            EvalNegatives::Sampled(0),
            NegativeSampling::Uniform,
            None,
            &mut rng,
        )
        .unwrap();
        assert_eq!(c, vec![21]);

        assert!(sample_eval_candidates(
            1,
            &[2, 3],
            5,
            EvalNegatives::Sampled(3),
            NegativeSampling::Uniform,
            None,
            &mut rng
        )
        .is_err());
        let c = sample_eval_candidates(1, &[2, 3], 6, EvalNegatives::AllUnseen, NegativeSampling::Uniform, None, &mut rng)
            .unwrap();
        let mut sorted = c.clone();
        sorted.sort();
        assert_eq!(sorted, vec![1, 4, 5, 6]);
    }

    #[test]
    fn popularity_candidates_are_valid() {
        let pop: Vec<f64> = (0..=50).map(|i| i as f64).collect();
        let mut rng = SeededRng::seed_from_u64(4);
        let c = sample_eval_candidates(
            7,
            &[1, 2, 3],
            50,
            EvalNegatives::Sampled(20),
            NegativeSampling::Popularity,
            Some(&pop),
            &mut rng,
        )
        .unwrap();
        assert_eq!(c.iter().collect::<HashSet<_>>().len(), 21);
        assert!(c.iter().all(|x| ![1, 2, 3].contains(x)));
    }

    #[test]
    fn vocab_tsv_round_trip() {
        let v = Vocab::from_items(vec!["a b".into(), "x".into()]).unwrap();
        let mut buf = Vec::new();
        v.write_tsv(&mut buf).unwrap();
        assert_eq!(String::from_utf8(buf.clone()).unwrap(), "a b\t1\nx\t2\n");
        assert_eq!(Vocab::read_tsv(&buf[..]).unwrap(), v);
    }

    proptest::proptest! {
        #[test]
        fn split_reconstructs(items in proptest::collection::vec(1usize..50, 3..40)) {
            let s = leave_one_out(&items).unwrap();
            let mut back = s.train.clone();
            back.push(s.valid);
            back.push(s.test);
            proptest::prop_assert_eq!(back, items);
        }

        #[test]
        fn pad_truncate_keeps_suffix(items in proptest::collection::vec(1usize..50, 0..30), n in 1usize..20) {
            let out = pad_truncate(&items, n);
            proptest::prop_assert_eq!(out.len(), n);
            let real: Vec<usize> = out.iter().copied().filter(|&x| x != PAD).collect();
            let k = items.len().min(n);
            proptest::prop_assert_eq!(&real[..], &items[items.len() - k..]);
        }
    }
}
