//! Top-1 exact-match accuracy per question category and the generative
//! metrics BLEU-4, ROUGE-L, METEOR-lite and CIDEr.
//!
//! All generative metrics take pre-tokenized sentences. Candidate and
//! reference roles are not interchangeable.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{BellaError, Result};
use crate::langdata::{normalize_answer, words};
use crate::scenesim::Category;

pub type Tokens = Vec<String>;

pub fn tokenize(s: &str) -> Tokens {
    words(&normalize_answer(s))
}

fn ngrams(tokens: &[String], n: usize) -> HashMap<&[String], usize> {
    let mut m = HashMap::new();
    if n > 0 && tokens.len() >= n {
        for w in tokens.windows(n) {
            *m.entry(w).or_insert(0) += 1;
        }
    }
    m
}

/// `(clipped matches, candidate n-gram count)` for order `n`; each candidate
/// n-gram count is clipped by its maximum count in any single reference.
pub fn clipped_precision(candidate: &[String], references: &[Tokens], n: usize) -> (usize, usize) {
    let cand = ngrams(candidate, n);
    let total = cand.values().sum();
    let mut max_ref: HashMap<&[String], usize> = HashMap::new();
    for r in references {
        for (g, c) in ngrams(r, n) {
            let e = max_ref.entry(g).or_insert(0);
            *e = (*e).max(c);
        }
    }
    let clipped = cand
        .iter()
        .map(|(g, &c)| c.min(max_ref.get(g).copied().unwrap_or(0)))
        .sum();
    (clipped, total)
}

/// Sentence BLEU-4 with brevity penalty. A zero clipped count uses the
/// precision floor `1/(2·|candidate|)`; orders longer than the candidate
/// have no n-grams and are left out of the geometric mean.
pub fn bleu4(candidate: &[String], references: &[Tokens]) -> f64 {
    let c = candidate.len();
    if c == 0 || references.is_empty() {
        return 0.0;
    }
    let mut log_sum = 0.0;
    let mut orders = 0;
    for n in 1..=4 {
        let (clipped, total) = clipped_precision(candidate, references, n);
        if total == 0 {
            continue;
        }
        let p = if clipped == 0 {
            1.0 / (2.0 * c as f64)
        } else {
            clipped as f64 / total as f64
        };
        log_sum += p.ln();
        orders += 1;
    }
    // closest reference length, shorter on ties
    let r = references
        .iter()
        .map(|r| r.len())
        .min_by_key(|&l| ((l as i64 - c as i64).abs(), l))
        .unwrap_or(0);
    let bp = if c > r { 1.0 } else { (1.0 - r as f64 / c as f64).exp() };
    bp * (log_sum / orders as f64).exp()
}

pub fn lcs_len(a: &[String], b: &[String]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { cur[j].max(prev[j + 1]) };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// LCS-based F1.
pub fn rouge_l(candidate: &[String], reference: &[String]) -> f64 {
    let l = lcs_len(candidate, reference);
    if l == 0 {
        return 0.0;
    }
    let p = l as f64 / candidate.len() as f64;
    let r = l as f64 / reference.len() as f64;
    2.0 * p * r / (p + r)
}

/// Suffix stem used by METEOR-lite: strips one of `-ing`, `-ed`, `-s`.
pub fn stem(w: &str) -> &str {
    for suf in ["ing", "ed", "s"] {
        if w.len() > suf.len() + 1 {
            if let Some(s) = w.strip_suffix(suf) {
                return s;
            }
        }
    }
    w
}

/// Unigram alignment: exact matches first, then stem matches, each pass
/// greedy left to right. Returns `(matches, chunks)`.
pub fn meteor_alignment(candidate: &[String], reference: &[String]) -> (usize, usize) {
    let mut cand_to_ref: Vec<Option<usize>> = vec![None; candidate.len()];
    let mut used = vec![false; reference.len()];
    let passes: [fn(&str, &str) -> bool; 2] = [|a, b| a == b, |a, b| stem(a) == stem(b)];
    for same in passes {
        for (i, c) in candidate.iter().enumerate() {
            if cand_to_ref[i].is_some() {
                continue;
            }
            if let Some(j) = (0..reference.len()).find(|&j| !used[j] && same(c, &reference[j])) {
                used[j] = true;
                cand_to_ref[i] = Some(j);
            }
        }
    }
    let mut matches = 0;
    let mut chunks = 0;
    let mut last: Option<(usize, usize)> = None;
    for (i, m) in cand_to_ref.iter().enumerate() {
        if let Some(j) = *m {
            matches += 1;
            match last {
                Some((pi, pj)) if pi + 1 == i && pj + 1 == j => {}
                _ => chunks += 1,
            }
            last = Some((i, j));
        }
    }
    (matches, chunks)
}

/// `F_mean·(1 − 0.5·(chunks/matches)³)` with `F_mean = 10PR/(R + 9P)`.
pub fn meteor_lite(candidate: &[String], reference: &[String]) -> f64 {
    let (m, chunks) = meteor_alignment(candidate, reference);
    if m == 0 {
        return 0.0;
    }
    let p = m as f64 / candidate.len() as f64;
    let r = m as f64 / reference.len() as f64;
    let fmean = 10.0 * p * r / (r + 9.0 * p);
    let penalty = 0.5 * (chunks as f64 / m as f64).powi(3);
    fmean * (1.0 - penalty)
}

/// Document frequencies over a reference corpus, one document per item.
#[derive(Debug, Clone)]
pub struct CiderCorpus {
    size: usize,
    df: [HashMap<Tokens, usize>; 4],
}

impl CiderCorpus {
    pub fn new(references: &[Vec<Tokens>]) -> Result<Self> {
        if references.len() < 2 {
            return Err(BellaError::CorpusTooSmall(references.len()));
        }
        let mut df: [HashMap<Tokens, usize>; 4] = Default::default();
        for refs in references {
            for (n, table) in df.iter_mut().enumerate() {
                let mut seen: Vec<&[String]> = refs.iter().flat_map(|r| ngrams(r, n + 1).into_keys()).collect();
                seen.sort();
                seen.dedup();
                for g in seen {
                    *table.entry(g.to_vec()).or_insert(0) += 1;
                }
            }
        }
        Ok(Self {
            size: references.len(),
            df,
        })
    }

    /// `max(0, ln(|corpus| / df))`; unseen n-grams count as df = 1.
    pub fn idf(&self, gram: &[String]) -> f64 {
        let n = gram.len();
        let df = self.df[n - 1].get(gram).copied().unwrap_or(0).max(1);
        (self.size as f64 / df as f64).ln().max(0.0)
    }

    fn vector(&self, tokens: &[String], n: usize) -> HashMap<Tokens, f64> {
        let grams = ngrams(tokens, n);
        let total: usize = grams.values().sum();
        grams
            .into_iter()
            .map(|(g, c)| (g.to_vec(), c as f64 / total as f64 * self.idf(g)))
            .collect()
    }

    /// `10 · mean_n cos(tfidf_n(candidate), tfidf_n(reference))`, averaged
    /// over references. All-zero vectors contribute 0.
    pub fn score(&self, candidate: &[String], references: &[Tokens]) -> f64 {
        if references.is_empty() {
            return 0.0;
        }
        let mut total = 0.0;
        for r in references {
            let mut s = 0.0;
            for n in 1..=4 {
                let vc = self.vector(candidate, n);
                let vr = self.vector(r, n);
                let dot: f64 = vc.iter().map(|(g, a)| a * vr.get(g).copied().unwrap_or(0.0)).sum();
                let nc = vc.values().map(|v| v * v).sum::<f64>().sqrt();
                let nr = vr.values().map(|v| v * v).sum::<f64>().sqrt();
                if nc > 0.0 && nr > 0.0 {
                    s += dot / (nc * nr);
                }
            }
            total += s / 4.0;
        }
        (10.0 * total / references.len() as f64).clamp(0.0, 10.0)
    }
}

/// Mean CIDEr over items; the corpus is the reference sets themselves.
pub fn cider(candidates: &[Tokens], references: &[Vec<Tokens>]) -> Result<f64> {
    if candidates.len() != references.len() {
        return Err(BellaError::LengthMismatch(candidates.len(), references.len()));
    }
    let corpus = CiderCorpus::new(references)?;
    let sum: f64 = candidates.iter().zip(references).map(|(c, r)| corpus.score(c, r)).sum();
    Ok(sum / candidates.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CategoryAccuracy {
    pub correct: usize,
    pub total: usize,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccuracyReport {
    pub per_category: BTreeMap<Category, CategoryAccuracy>,
    pub overall: f64,
    pub total: usize,
}

/// Exact match after answer normalization, in percent.
pub fn accuracy(predictions: &[String], golds: &[String], categories: &[Category]) -> Result<AccuracyReport> {
    if predictions.len() != golds.len() {
        return Err(BellaError::LengthMismatch(predictions.len(), golds.len()));
    }
    if categories.len() != golds.len() {
        return Err(BellaError::LengthMismatch(categories.len(), golds.len()));
    }
    let mut per: BTreeMap<Category, (usize, usize)> = BTreeMap::new();
    for ((p, g), &c) in predictions.iter().zip(golds).zip(categories) {
        let e = per.entry(c).or_default();
        e.1 += 1;
        if normalize_answer(p) == normalize_answer(g) {
            e.0 += 1;
        }
    }
    let (mut correct, mut total) = (0, 0);
    let per_category = per
        .into_iter()
        .map(|(c, (k, n))| {
            correct += k;
            total += n;
            (
                c,
                CategoryAccuracy {
                    correct: k,
                    total: n,
                    accuracy: 100.0 * k as f64 / n as f64,
                },
            )
        })
        .collect();
    Ok(AccuracyReport {
        per_category,
        overall: if total == 0 {
            0.0
        } else {
            100.0 * correct as f64 / total as f64
        },
        total,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GenerativeScores {
    pub bleu4: f64,
    pub meteor: f64,
    pub rouge_l: f64,
    /// `None` when fewer than two items make the idf undefined.
    pub cider: Option<f64>,
    pub count: usize,
}

pub fn generative_scores(candidates: &[Tokens], references: &[Tokens]) -> Result<GenerativeScores> {
    if candidates.len() != references.len() {
        return Err(BellaError::LengthMismatch(candidates.len(), references.len()));
    }
    let n = candidates.len();
    let mean = |f: &dyn Fn(&Tokens, &Tokens) -> f64| {
        if n == 0 {
            0.0
        } else {
            candidates.iter().zip(references).map(|(c, r)| f(c, r)).sum::<f64>() / n as f64
        }
    };
    let refsets: Vec<Vec<Tokens>> = references.iter().map(|r| vec![r.clone()]).collect();
    Ok(GenerativeScores {
        bleu4: mean(&|c, r| bleu4(c, std::slice::from_ref(r))),
        meteor: mean(&|c, r| meteor_lite(c, r)),
        rouge_l: mean(&|c, r| rouge_l(c, r)),
        cider: if n >= 2 {
            Some(cider(candidates, &refsets)?)
        } else {
            None
        },
        count: n,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub accuracy: AccuracyReport,
    /// Accuracy over the short-answer categories (behavior excluded).
    pub qa_overall: f64,
    pub generative: BTreeMap<Category, GenerativeScores>,
    pub generative_all: GenerativeScores,
}

impl EvalReport {
    pub fn build(predictions: &[String], golds: &[String], categories: &[Category]) -> Result<Self> {
        let accuracy = accuracy(predictions, golds, categories)?;
        let (mut k, mut n) = (0, 0);
        for c in Category::SHORT_ANSWER {
            if let Some(a) = accuracy.per_category.get(&c) {
                k += a.correct;
                n += a.total;
            }
        }
        let qa_overall = if n == 0 { 0.0 } else { 100.0 * k as f64 / n as f64 };
        let mut generative = BTreeMap::new();
        for c in Category::ALL {
            let idx: Vec<usize> = (0..categories.len()).filter(|&i| categories[i] == c).collect();
            if idx.is_empty() {
                continue;
            }
            let cands: Vec<Tokens> = idx.iter().map(|&i| tokenize(&predictions[i])).collect();
            let refs: Vec<Tokens> = idx.iter().map(|&i| tokenize(&golds[i])).collect();
            generative.insert(c, generative_scores(&cands, &refs)?);
        }
        let cands: Vec<Tokens> = predictions.iter().map(|p| tokenize(p)).collect();
        let refs: Vec<Tokens> = golds.iter().map(|g| tokenize(g)).collect();
        Ok(Self {
            accuracy,
            qa_overall,
            generative,
            generative_all: generative_scores(&cands, &refs)?,
        })
    }

    /// Accuracy table: one column per short-answer category plus overall.
    pub fn render_accuracy_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "{:<10} {:>7} {:>7} {:>7} {:>7} {:>10} {:>8}",
            "", "Exist", "Count", "Object", "Status", "Comparison", "Overall"
        );
        let cell = |c: Category| {
            self.accuracy
                .per_category
                .get(&c)
                .map(|a| format!("{:.1}", a.accuracy))
                .unwrap_or_else(|| "-".into())
        };
        let _ = writeln!(
            s,
            "{:<10} {:>7} {:>7} {:>7} {:>7} {:>10} {:>8.1}",
            "Accuracy",
            cell(Category::Exist),
            cell(Category::Count),
            cell(Category::Object),
            cell(Category::Status),
            cell(Category::Comparison),
            self.qa_overall
        );
        s
    }

    /// Per-category generative metrics table.
    pub fn render_generative_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "{:<12} {:>6} {:>7} {:>7} {:>8} {:>7} {:>9}",
            "Category", "N", "BLEU-4", "METEOR", "ROUGE-L", "CIDEr", "Accuracy"
        );
        let mut row = |name: &str, g: &GenerativeScores, acc: Option<f64>| {
            let _ = writeln!(
                s,
                "{:<12} {:>6} {:>7.3} {:>7.3} {:>8.3} {:>7} {:>9}",
                name,
                g.count,
                g.bleu4,
                g.meteor,
                g.rouge_l,
                g.cider.map(|c| format!("{c:.3}")).unwrap_or_else(|| "-".into()),
                acc.map(|a| format!("{a:.1}")).unwrap_or_else(|| "-".into())
            );
        };
        for (c, g) in &self.generative {
            row(c.as_str(), g, self.accuracy.per_category.get(c).map(|a| a.accuracy));
        }
        row("all", &self.generative_all, Some(self.accuracy.overall));
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(s: &str) -> Tokens {
        s.split_whitespace().map(str::to_string).collect()
    }

    #[test]
    fn bleu_identity_and_clipping() {
        let r = t("there is a car parked to the front");
        assert_eq!(bleu4(&r, std::slice::from_ref(&r)), 1.0);
        assert_eq!(bleu4(&t("yes"), &[t("yes")]), 1.0);
        assert_eq!(clipped_precision(&t("the the the the"), &[t("the cat")], 1), (1, 4));
        assert_eq!(bleu4(&[], &[r]), 0.0);
    }

    #[test]
    fn bleu_brevity_penalty() {
        let r = t("a b c d e f g h");
        let c = t("a b c d e f");
        let want = (1.0f64 - 8.0 / 6.0).exp();
        assert!((bleu4(&c, &[r]) - want).abs() < 1e-12);
    }

    #[test]
    fn rouge_examples() {
        let v = rouge_l(&t("the cat sat"), &t("the cat sat on the mat"));
        assert!((v - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(rouge_l(&t("a b"), &t("a b")), 1.0);
        assert_eq!(rouge_l(&t("a b"), &t("c d")), 0.0);
    }

    #[test]
    fn meteor_examples() {
        let s = t("a b c d");
        assert!((meteor_lite(&s, &s) - (1.0 - 0.5 / 64.0)).abs() < 1e-12);
        assert_eq!(meteor_lite(&t("x y"), &t("a b")), 0.0);
        assert_eq!(meteor_alignment(&t("cars"), &t("car")), (1, 1));
    }

    #[test]
    fn cider_identity_on_two_items() {
        let refs = vec![vec![t("a b c d")], vec![t("e f g h")]];
        let cands = vec![t("a b c d"), t("e f g h")];
        assert!((cider(&cands, &refs).unwrap() - 10.0).abs() < 1e-9);
        let corpus = CiderCorpus::new(&refs).unwrap();
        assert_eq!(corpus.score(&t("x y z"), &[t("a b c d")]), 0.0);
        assert!(matches!(
            CiderCorpus::new(&refs[..1]),
            Err(BellaError::CorpusTooSmall(1))
        ));
    }

    #[test]
    fn saturated_ngram_has_no_weight() {
        let refs = vec![vec![t("the a")], vec![t("the b")], vec![t("the c")]];
        let corpus = CiderCorpus::new(&refs).unwrap();
        assert_eq!(corpus.idf(&t("the")), 0.0);
        // sharing only the saturated token scores zero
        assert_eq!(corpus.score(&t("the x"), &[t("the a")]), 0.0);
    }

    #[test]
    fn accuracy_arithmetic() {
        let g = vec!["yes".to_string(), "2".into()];
        let cats = vec![Category::Exist, Category::Exist];
        let r = accuracy(&g, &g, &cats).unwrap();
        assert_eq!(r.overall, 100.0);
        let p = vec!["yes".to_string(), "3".into()];
        let r = accuracy(&p, &g, &cats).unwrap();
        assert_eq!(r.per_category[&Category::Exist].accuracy, 50.0);
        assert_eq!(r.overall, 50.0);
        assert!(accuracy(&p[..1], &g, &cats).is_err());
    }
}
