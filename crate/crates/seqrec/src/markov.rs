//! Exact n-gram conditionals over small symbol corpora.
//!
//! Used to show, with exact fractions, that the item a reverse model would
//! prepend is not necessarily the one that best preserves the forward
//! transition the recommender has to learn.

use std::collections::{BTreeSet, HashMap};

use num_rational::Ratio;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Prob = Ratio<u64>;

pub const DEFAULT_ORDER: usize = 3;

/// Occurrence counts of every contiguous window of length `1..=order`.
/// Overlapping windows each count once per starting position.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NgramCounts {
    order: usize,
    counts: HashMap<Vec<String>, u64>,
    /// Adjacent pairs grouped by their second symbol.
    preceded: HashMap<String, u64>,
    alphabet: BTreeSet<String>,
}

impl NgramCounts {
    pub fn new<S: AsRef<str>>(sequences: &[Vec<S>], order: usize) -> Result<Self> {
        if order < 2 {
            return Err(Error::Config("n-gram order must be ≥ 2".into()));
        }
        let mut counts = HashMap::new();
        let mut preceded = HashMap::new();
        let mut alphabet = BTreeSet::new();
        for seq in sequences {
            let seq: Vec<String> = seq.iter().map(|s| s.as_ref().to_string()).collect();
            alphabet.extend(seq.iter().cloned());
            for start in 0..seq.len() {
                for len in 1..=order.min(seq.len() - start) {
                    *counts.entry(seq[start..start + len].to_vec()).or_insert(0) += 1;
                }
            }
            for w in seq.windows(2) {
                *preceded.entry(w[1].clone()).or_insert(0) += 1;
            }
        }
        Ok(NgramCounts {
            order,
            counts,
            preceded,
            alphabet,
        })
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn alphabet(&self) -> impl Iterator<Item = &str> {
        self.alphabet.iter().map(String::as_str)
    }

    pub fn count<S: AsRef<str>>(&self, window: &[S]) -> u64 {
        let key: Vec<String> = window.iter().map(|s| s.as_ref().to_string()).collect();
        self.counts.get(&key).copied().unwrap_or(0)
    }

    /// Adjacent pairs in the corpus.
    pub fn pair_total(&self) -> u64 {
        self.preceded.values().sum()
    }

    /// Occurrences of `symbol` that have a predecessor.
    pub fn preceded_count(&self, symbol: &str) -> u64 {
        self.preceded.get(symbol).copied().unwrap_or(0)
    }

    /// Occurrences of `symbol` that have a successor.
    pub fn followed_count(&self, symbol: &str) -> u64 {
        self.alphabet.iter().map(|s| self.count(&[symbol, s.as_str()])).sum()
    }
}

/// `count(context ++ [next]) / count(context)`.
pub fn forward_conditional<S: AsRef<str>>(counts: &NgramCounts, context: &[S], next: &str) -> Result<Prob> {
    if context.len() + 1 > counts.order {
        return Err(Error::Config(format!(
            "context of length {} exceeds the counted order {}",
            context.len(),
            counts.order
        )));
    }
    let denom = counts.count(context);
    if denom == 0 {
        let ctx: Vec<&str> = context.iter().map(AsRef::as_ref).collect();
        return Err(Error::UndefinedConditional(format!("context {ctx:?} never occurs")));
    }
    let mut window: Vec<&str> = context.iter().map(AsRef::as_ref).collect();
    window.push(next);
    Ok(Prob::new(counts.count(&window), denom))
}

/// `count([prev, anchor]) / #(anchor occurrences with a predecessor)`.
pub fn reverse_conditional(counts: &NgramCounts, anchor: &str, prev: &str) -> Result<Prob> {
    let denom = counts.preceded_count(anchor);
    if denom == 0 {
        return Err(Error::UndefinedConditional(format!("`{anchor}` never has a predecessor")));
    }
    Ok(Prob::new(counts.count(&[prev, anchor]), denom))
}

/// Winner of an argmax over the alphabet, lexicographically first among
/// equals.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Choice {
    pub symbol: String,
    pub prob: Prob,
    /// Other symbols that reached the same value.
    pub tied_with: Vec<String>,
}

fn argmax(scored: impl Iterator<Item = (String, Prob)>) -> Option<Choice> {
    let mut best: Option<Choice> = None;
    for (s, p) in scored {
        match &mut best {
            Some(b) if p == b.prob => b.tied_with.push(s),
            Some(b) if p < b.prob => {}
            _ => {
                best = Some(Choice {
                    symbol: s,
                    prob: p,
                    tied_with: Vec::new(),
                })
            }
        }
    }
    best
}

/// The symbol a reverse model would place before `seq[0]`.
pub fn best_reverse_augment<S: AsRef<str>>(counts: &NgramCounts, seq: &[S]) -> Result<Choice> {
    let head = seq
        .first()
        .ok_or_else(|| Error::UndefinedConditional("empty sequence has no head".into()))?
        .as_ref();
    let scored = counts
        .alphabet()
        .map(|s| Ok((s.to_string(), reverse_conditional(counts, head, s)?)))
        .collect::<Result<Vec<_>>>()?;
    argmax(scored.into_iter()).ok_or_else(|| Error::UndefinedConditional("empty alphabet".into()))
}

/// The prefix symbol `x` maximizing `P_F(target | [x] ++ seq)`; symbols for
/// which that conditional is undefined are skipped.
pub fn best_forward_augment<S: AsRef<str>>(counts: &NgramCounts, seq: &[S], target: &str) -> Result<Choice> {
    let mut scored = Vec::new();
    for x in counts.alphabet() {
        let mut ctx = vec![x];
        ctx.extend(seq.iter().map(AsRef::as_ref));
        match forward_conditional(counts, &ctx, target) {
            Ok(p) => scored.push((x.to_string(), p)),
            Err(Error::UndefinedConditional(_)) => {}
            Err(e) => return Err(e),
        }
    }
    argmax(scored.into_iter())
        .ok_or_else(|| Error::UndefinedConditional(format!("no prefix gives a defined conditional for `{target}`")))
}

/// `|P(A|B) − P(B|A)·P(A)/P(B)|` on the adjacent-pair event space, where `A`
/// is "the second symbol is `a`" and `B` is "the first symbol is `b`".
pub fn bayes_identity_check(counts: &NgramCounts, a: &str, b: &str) -> Result<Prob> {
    let n = counts.pair_total();
    let (na, nb) = (counts.preceded_count(a), counts.followed_count(b));
    if n == 0 || na == 0 || nb == 0 {
        return Err(Error::UndefinedConditional(format!("zero marginal for `{a}` or `{b}`")));
    }
    let joint = counts.count(&[b, a]);
    let p_a_given_b = Prob::new(joint, nb);
    let p_b_given_a = Prob::new(joint, na);
    let (pa, pb) = (Prob::new(na, n), Prob::new(nb, n));
    let rhs = p_b_given_a * pa / pb;
    Ok(if p_a_given_b >= rhs { p_a_given_b - rhs } else { rhs - p_a_given_b })
}

pub fn fraction(p: &Prob) -> String {
    format!("{}/{}", p.numer(), p.denom())
}

/// The counterexample quantities for prepending one item to `[C]` when the
/// next item is `A`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CounterexampleReport {
    pub p_forward: String,
    pub reverse_choice: String,
    pub p_forward_after_reverse: String,
    pub forward_choice: String,
    pub p_forward_after_forward: String,
    /// The reverse choice lowers the forward conditional.
    pub reverse_degrades_forward: bool,
    pub reverse_ties: Vec<String>,
    pub forward_ties: Vec<String>,
}

pub fn counterexample_report(counts: &NgramCounts) -> Result<CounterexampleReport> {
    counterexample_for(counts, "C", "A")
}

pub fn counterexample_for(counts: &NgramCounts, anchor: &str, target: &str) -> Result<CounterexampleReport> {
    let base = forward_conditional(counts, &[anchor], target)?;
    let rev = best_reverse_augment(counts, &[anchor])?;
    let after_rev = forward_conditional(counts, &[rev.symbol.as_str(), anchor], target)?;
    let fwd = best_forward_augment(counts, &[anchor], target)?;
    Ok(CounterexampleReport {
        p_forward: fraction(&base),
        reverse_choice: rev.symbol,
        p_forward_after_reverse: fraction(&after_rev),
        forward_choice: fwd.symbol,
        p_forward_after_forward: fraction(&fwd.prob),
        reverse_degrades_forward: after_rev < base,
        reverse_ties: rev.tied_with,
        forward_ties: fwd.tied_with,
    })
}

impl CounterexampleReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn table(&self) -> String {
        let rows = [
            ("P_F(A | C)", self.p_forward.clone()),
            ("reverse choice", self.reverse_choice.clone()),
            ("P_F(A | reverse choice, C)", self.p_forward_after_reverse.clone()),
            ("forward choice", self.forward_choice.clone()),
            ("P_F(A | forward choice, C)", self.p_forward_after_forward.clone()),
            ("reverse degrades forward", self.reverse_degrades_forward.to_string()),
        ];
        let w = rows.iter().map(|r| r.0.len()).max().unwrap_or(0);
        rows.iter().map(|(k, v)| format!("{k:<w$}  {v}\n")).collect()
    }
}

/// One sequence per non-empty line, whitespace-separated symbols.
pub fn parse_symbol_corpus(text: &str) -> Vec<Vec<String>> {
    text.lines()
        .map(|l| l.split_whitespace().map(str::to_string).collect::<Vec<_>>())
        .filter(|s| !s.is_empty())
        .collect()
}

/// Does the corpus reproduce the published quantities: `P_F(A|C) = 3/4`,
/// `P_R(B|C) = 3/4` with `B` the unique reverse argmax, `P_F(A|B C) = 2/3`
/// and `P_F(A|D C) = 1`, with `D` the forward argmax?
pub fn matches_published(counts: &NgramCounts) -> bool {
    let p = |ctx: &[&str]| forward_conditional(counts, ctx, "A").ok();
    let Ok(rev) = best_reverse_augment(counts, &["C"]) else {
        return false;
    };
    let Ok(fwd) = best_forward_augment(counts, &["C"], "A") else {
        return false;
    };
    p(&["C"]) == Some(Prob::new(3, 4))
        && reverse_conditional(counts, "C", "B").ok() == Some(Prob::new(3, 4))
        && rev.symbol == "B"
        && rev.tied_with.is_empty()
        && p(&["B", "C"]) == Some(Prob::new(2, 3))
        && p(&["D", "C"]) == Some(Prob::new(1, 1))
        && fwd.symbol == "D"
}

/// Every multiset of `size` length-`len` sequences over `symbols` whose
/// counts satisfy [`matches_published`], in lexicographic order. At most
/// `limit` results are returned.
pub fn search_corpora(symbols: &[&str], len: usize, size: usize, limit: usize) -> Vec<Vec<Vec<String>>> {
    let mut all: Vec<Vec<String>> = vec![Vec::new()];
    for _ in 0..len {
        all = all
            .into_iter()
            .flat_map(|p| {
                symbols.iter().map(move |s| {
                    let mut q = p.clone();
                    q.push(s.to_string());
                    q
                })
            })
            .collect();
    }
    let mut found = Vec::new();
    let mut pick = vec![0usize; size];
    loop {
        let corpus: Vec<Vec<String>> = pick.iter().map(|&i| all[i].clone()).collect();
        if NgramCounts::new(&corpus, DEFAULT_ORDER).is_ok_and(|c| matches_published(&c)) {
            found.push(corpus);
            if found.len() >= limit {
                return found;
            }
        }
        // next non-decreasing index tuple
        let mut i = size;
        loop {
            if i == 0 {
                return found;
            }
            i -= 1;
            if pick[i] + 1 < all.len() {
                let v = pick[i] + 1;
                for p in &mut pick[i..] {
                    *p = v;
                }
                break;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use num_traits::Zero;
    use rand::{Rng as _, SeedableRng};

    const FIXTURE: &str = include_str!("../fixtures/counterexample.txt");

    fn fixture() -> NgramCounts {
        NgramCounts::new(&parse_symbol_corpus(FIXTURE), DEFAULT_ORDER).unwrap()
    }

    fn r(n: u64, d: u64) -> Prob {
        Prob::new(n, d)
    }

    #[test]
    fn published_quantities() {
        let c = fixture();
        assert_eq!(forward_conditional(&c, &["C"], "A").unwrap(), r(3, 4));
        assert_eq!(forward_conditional(&c, &["B", "C"], "A").unwrap(), r(2, 3));
        assert_eq!(forward_conditional(&c, &["D", "C"], "A").unwrap(), r(1, 1));
        assert_eq!(reverse_conditional(&c, "C", "B").unwrap(), r(3, 4));
        assert_eq!(best_reverse_augment(&c, &["C"]).unwrap().symbol, "B");
        assert_eq!(best_forward_augment(&c, &["C"], "A").unwrap().symbol, "D");
        let rep = counterexample_report(&c).unwrap();
        assert_eq!(
            (
                rep.p_forward.as_str(),
                rep.reverse_choice.as_str(),
                rep.p_forward_after_reverse.as_str(),
                rep.forward_choice.as_str(),
                rep.p_forward_after_forward.as_str(),
                rep.reverse_degrades_forward
            ),
            ("3/4", "B", "2/3", "D", "1/1", true)
        );
    }

    #[test]
    fn fixture_is_found_by_the_search() {
        let found = search_corpora(&["A", "B", "C", "D"], 3, 4, usize::MAX);
        assert!(!found.is_empty());
        let mut fx = parse_symbol_corpus(FIXTURE);
        fx.sort();
        assert!(found.contains(&fx));
        for corpus in &found {
            assert!(matches_published(&NgramCounts::new(corpus, 3).unwrap()));
        }
    }

    #[test]
    fn counts_are_prefix_monotone() {
        let c = fixture();
        let syms: Vec<&str> = c.alphabet().collect();
        for a in &syms {
            for b in &syms {
                assert!(c.count(&[*a]) >= c.count(&[*a, *b]));
                for d in &syms {
                    assert!(c.count(&[*a, *b]) >= c.count(&[*a, *b, *d]));
                }
            }
        }
    }

    #[test]
    fn undefined_and_forced_cases() {
        let c = fixture();
        // B only ever starts a sequence
        assert!(matches!(reverse_conditional(&c, "B", "A"), Err(Error::UndefinedConditional(_))));
        assert!(matches!(forward_conditional(&c, &["Z"], "A"), Err(Error::UndefinedConditional(_))));

        let xy = NgramCounts::new(&[vec!["X", "Y"]], 3).unwrap();
        assert_eq!(best_reverse_augment(&xy, &["Y"]).unwrap().symbol, "X");
        let forced = NgramCounts::new(&[vec!["P", "Q", "T"], vec!["Q", "R"]], 3).unwrap();
        assert_eq!(best_forward_augment(&forced, &["Q"], "T").unwrap().symbol, "P");

        let empty = NgramCounts::new::<&str>(&[], 3).unwrap();
        assert!(matches!(counterexample_report(&empty), Err(Error::UndefinedConditional(_))));
    }

    #[test]
    fn reverse_conditionals_normalize() {
        let c = fixture();
        for anchor in ["A", "C", "D"] {
            let total: Prob = c.alphabet().map(|p| reverse_conditional(&c, anchor, p).unwrap()).sum();
            assert_eq!(total, r(1, 1), "{anchor}");
        }
    }

    #[test]
    fn forward_conditionals_normalize_when_every_occurrence_continues() {
        let c = fixture();
        // C never ends a sequence in the fixture
        let total: Prob = c.alphabet().map(|n| forward_conditional(&c, &["C"], n).unwrap()).sum();
        assert_eq!(total, r(1, 1));
    }

    fn random_corpus(rng: &mut crate::rng::Rng) -> Vec<Vec<String>> {
        (0..rng.gen_range(1..6))
            .map(|_| {
                (0..rng.gen_range(1..6))
                    .map(|_| ["A", "B", "C", "D"][rng.gen_range(0..4)].to_string())
                    .collect()
            })
            .collect()
    }

    #[test]
    fn argmax_matches_enumeration() {
        let mut rng = crate::rng::Rng::seed_from_u64(5);
        for _ in 0..300 {
            let corpus = random_corpus(&mut rng);
            let c = NgramCounts::new(&corpus, 3).unwrap();
            for head in ["A", "B", "C", "D"] {
                let got = best_reverse_augment(&c, &[head]);
                let mut best: Option<(String, Prob)> = None;
                let mut defined = true;
                for p in ["A", "B", "C", "D"].iter().filter(|s| c.alphabet().any(|a| a == **s)) {
                    match reverse_conditional(&c, head, p) {
                        Ok(v) => {
                            if best.as_ref().is_none_or(|b| v > b.1) {
                                best = Some((p.to_string(), v));
                            }
                        }
                        Err(_) => defined = false,
                    }
                }
                match got {
                    Ok(ch) => assert_eq!(Some((ch.symbol, ch.prob)), best),
                    Err(_) => assert!(!defined || best.is_none()),
                }
                for target in ["A", "B", "C", "D"] {
                    let got = best_forward_augment(&c, &[head], target);
                    let mut best: Option<(String, Prob)> = None;
                    for x in ["A", "B", "C", "D"].iter().filter(|s| c.alphabet().any(|a| a == **s)) {
                        let (num, den) = (c.count(&[*x, head, target]), c.count(&[*x, head]));
                        if den > 0 {
                            let v = r(num, den);
                            if best.as_ref().is_none_or(|b| v > b.1) {
                                best = Some((x.to_string(), v));
                            }
                        }
                    }
                    assert_eq!(got.ok().map(|c| (c.symbol, c.prob)), best);
                }
            }
        }
    }

    #[test]
    fn bayes_residual_is_exactly_zero() {
        let mut rng = crate::rng::Rng::seed_from_u64(8);
        for _ in 0..300 {
            let corpus = random_corpus(&mut rng);
            let c = NgramCounts::new(&corpus, 3).unwrap();
            for a in ["A", "B", "C", "D"] {
                for b in ["A", "B", "C", "D"] {
                    if let Ok(res) = bayes_identity_check(&c, a, b) {
                        assert!(res.is_zero());
                        // the same quantities in floating point only agree approximately
                        let n = c.pair_total() as f64;
                        let (na, nb, j) = (
                            c.preceded_count(a) as f64,
                            c.followed_count(b) as f64,
                            c.count(&[b, a]) as f64,
                        );
                        assert!((j / nb - (j / na) * (na / n) / (nb / n)).abs() < 1e-12);
                    }
                }
            }
        }
        let tied = NgramCounts::new(&[vec!["B", "A"], vec!["B", "A"]], 3).unwrap();
        let p_a_b = forward_conditional(&tied, &["B"], "A").unwrap();
        let p_b_a = reverse_conditional(&tied, "A", "B").unwrap();
        assert_eq!(p_a_b, p_b_a);
    }

    #[test]
    fn agreeing_choices_do_not_degrade() {
        let c = NgramCounts::new(&[vec!["B", "C", "A"], vec!["B", "C", "A"], vec!["D", "C", "E"]], 3).unwrap();
        let rep = counterexample_report(&c).unwrap();
        assert_eq!(rep.reverse_choice, rep.forward_choice);
        assert!(!rep.reverse_degrades_forward);
    }

    #[test]
    fn report_json_shape() {
        let rep = counterexample_report(&fixture()).unwrap();
        let v: serde_json::Value = serde_json::from_str(&rep.to_json()).unwrap();
        let schema: serde_json::Value =
            serde_json::from_str(include_str!("../fixtures/counterexample.schema.json")).unwrap();
        for key in schema["required"].as_array().unwrap() {
            let key = key.as_str().unwrap();
            let want = schema["properties"][key]["type"].as_str().unwrap();
            let got = &v[key];
            let ok = match want {
                "string" => got.as_str().is_some_and(|s| {
                    let pat = schema["properties"][key]["pattern"].as_str();
                    pat.is_none() || s.split_once('/').is_some_and(|(p, q)| p.parse::<u64>().is_ok() && q.parse::<u64>().is_ok())
                }),
                "boolean" => got.is_boolean(),
                "array" => got.is_array(),
                _ => false,
            };
            assert!(ok, "{key}: {got}");
        }
        assert!(rep.table().contains("reverse choice"));
    }

    #[test]
    fn chain_estimates_converge() {
        let states = ["X", "Y", "Z"];
        let p = [[0.1, 0.6, 0.3], [0.5, 0.2, 0.3], [0.25, 0.25, 0.5]];
        let mut rng = crate::rng::Rng::seed_from_u64(21);
        let mut s = 0usize;
        let mut seq = Vec::with_capacity(100_000);
        for _ in 0..100_000 {
            seq.push(states[s]);
            let u: f64 = rng.gen();
            let mut acc = 0.0;
            for (j, &pj) in p[s].iter().enumerate() {
                acc += pj;
                if u < acc {
                    s = j;
                    break;
                }
            }
        }
        let c = NgramCounts::new(&[seq], 2).unwrap();
        for (i, from) in states.iter().enumerate() {
            for (j, to) in states.iter().enumerate() {
                let est = forward_conditional(&c, &[*from], to).unwrap();
                let est = *est.numer() as f64 / *est.denom() as f64;
                assert!((est - p[i][j]).abs() < 0.02, "{from}->{to}: {est} vs {}", p[i][j]);
            }
        }
    }
}
