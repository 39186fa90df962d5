//! Retrieval metrics, zero-shot classification, VQA metrics (accuracy,
//! macro-F1, Wu-Palmer scores), and tab-separated reports.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use crate::compute::{matmul_nt, softmax_rows, Tensor};
use crate::error::{Error, Result};
use crate::loss::SimilarityMatrix;

pub const WUPS_THRESHOLD: f64 = 0.9;

/// Ranked candidates per query; the gold candidate for query `i` is `gold[i]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RetrievalResult {
    pub rankings: Vec<Vec<usize>>,
    pub gold: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RetrievalMetrics {
    pub p_at_1: f64,
    /// `(k, R@k)` in the order requested.
    pub recall: Vec<(usize, f64)>,
    pub map: f64,
    pub mean_rank: f64,
}

impl RetrievalMetrics {
    pub fn recall_at(&self, k: usize) -> Option<f64> {
        self.recall.iter().find(|(kk, _)| *kk == k).map(|(_, r)| *r)
    }
}

impl RetrievalResult {
    /// Ranks every row by descending similarity, ties toward lower index.
    /// Query `i`'s gold candidate is `i`.
    pub fn from_similarity(sim: &Tensor) -> Result<Self> {
        if sim.shape().len() != 2 || sim.rows() != sim.cols() {
            return Err(Error::Batch(format!(
                "retrieval needs a square similarity matrix, got {:?}",
                sim.shape()
            )));
        }
        let rankings = (0..sim.rows())
            .map(|i| {
                let row = sim.row(i);
                let mut idx: Vec<usize> = (0..row.len()).collect();
                // NaN ranks last; -0.0 and 0.0 tie.
                let key = |j: usize| if row[j].is_nan() { f64::NEG_INFINITY } else { row[j] };
                idx.sort_by(|&a, &b| key(b).partial_cmp(&key(a)).expect("no NaN").then(a.cmp(&b)));
                idx
            })
            .collect();
        Ok(Self {
            rankings,
            gold: (0..sim.rows()).collect(),
        })
    }

    /// 1-based rank of the gold candidate for each query.
    pub fn gold_ranks(&self) -> Vec<usize> {
        self.rankings
            .iter()
            .zip(&self.gold)
            .map(|(r, g)| r.iter().position(|c| c == g).map_or(r.len() + 1, |p| p + 1))
            .collect()
    }

    pub fn metrics(&self, ks: &[usize]) -> RetrievalMetrics {
        let ranks = self.gold_ranks();
        let n = ranks.len().max(1) as f64;
        let recall_at = |k: usize| ranks.iter().filter(|&&r| r <= k).count() as f64 / n;
        RetrievalMetrics {
            p_at_1: recall_at(1),
            recall: ks.iter().map(|&k| (k, recall_at(k))).collect(),
            map: ranks.iter().map(|&r| 1.0 / r as f64).sum::<f64>() / n,
            mean_rank: ranks.iter().sum::<usize>() as f64 / n,
        }
    }
}

pub fn retrieval_metrics(sim: &SimilarityMatrix, ks: &[usize]) -> Result<RetrievalMetrics> {
    Ok(RetrievalResult::from_similarity(&sim.values)?.metrics(ks))
}

/// Class probabilities and the predicted class for one query.
#[derive(Debug, Clone, PartialEq)]
pub struct ZeroShot {
    pub probabilities: Vec<f64>,
    pub prediction: usize,
}

/// `softmax(cos / tau)` over the class embeddings; ties go to the lower index.
/// `query` is one unit-norm `D`-vector; `classes` is `[C, D]`.
pub fn zero_shot_classify(query: &[f64], classes: &Tensor, tau: f64) -> Result<ZeroShot> {
    if classes.shape().len() != 2 || classes.rows() == 0 {
        return Err(Error::Precondition("zero-shot classification needs at least one class".into()));
    }
    if !(tau > 0.0) {
        return Err(Error::Config(format!("temperature must be positive, got {tau}")));
    }
    let q = Tensor::matrix(1, query.len(), query.to_vec())?;
    let cos = matmul_nt(&q, classes)?;
    let probabilities = softmax_rows(&cos.scale(1.0 / tau)).into_data();
    let prediction = argmax(cos.data());
    Ok(ZeroShot {
        probabilities,
        prediction,
    })
}

/// Index of the largest value, first occurrence on ties.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

/// A rooted tree of answer concepts.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TaxonomyGraph {
    index: BTreeMap<String, usize>,
    names: Vec<String>,
    parent: Vec<Option<usize>>,
    depth: Vec<usize>,
}

impl TaxonomyGraph {
    /// Parses `child<TAB>parent` lines. Blank lines and `#` comments are
    /// skipped. The one node that is never a child is the root.
    pub fn parse(text: &str) -> Result<Self> {
        let mut edges: BTreeMap<String, String> = BTreeMap::new();
        let mut order: Vec<String> = Vec::new();
        let note = |n: &str, order: &mut Vec<String>| {
            if !order.iter().any(|o| o == n) {
                order.push(n.to_string());
            }
        };
        for (no, line) in text.lines().enumerate() {
            let line = line.trim_end_matches('\r');
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let (child, parent) = line
                .split_once('\t')
                .ok_or_else(|| Error::Format(format!("taxonomy line {}: expected child<TAB>parent", no + 1)))?;
            if child.is_empty() || parent.is_empty() || parent.contains('\t') {
                return Err(Error::Format(format!("taxonomy line {}: malformed edge", no + 1)));
            }
            if let Some(prev) = edges.get(child) {
                if prev != parent {
                    return Err(Error::Format(format!(
                        "taxonomy node '{child}' has two parents ('{prev}' and '{parent}')"
                    )));
                }
            }
            edges.insert(child.to_string(), parent.to_string());
            note(child, &mut order);
            note(parent, &mut order);
        }
        Self::from_edges(&order, &edges)
    }

    fn from_edges(order: &[String], edges: &BTreeMap<String, String>) -> Result<Self> {
        let roots: Vec<&String> = order.iter().filter(|n| !edges.contains_key(*n)).collect();
        if roots.len() != 1 {
            return Err(Error::Format(format!(
                "taxonomy must have exactly one root, found {}",
                roots.len()
            )));
        }
        let index: BTreeMap<String, usize> = order.iter().enumerate().map(|(i, n)| (n.clone(), i)).collect();
        let parent: Vec<Option<usize>> = order.iter().map(|n| edges.get(n).map(|p| index[p])).collect();
        let mut depth = vec![0; order.len()];
        for start in 0..order.len() {
            let mut d = 1;
            let mut cur = start;
            while let Some(p) = parent[cur] {
                d += 1;
                if d > order.len() {
                    return Err(Error::Format(format!("taxonomy has a cycle through '{}'", order[start])));
                }
                cur = p;
            }
            depth[start] = d;
        }
        Ok(Self {
            index,
            names: order.to_vec(),
            parent,
            depth,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn contains(&self, node: &str) -> bool {
        self.index.contains_key(node)
    }

    fn id(&self, node: &str) -> Result<usize> {
        self.index
            .get(node)
            .copied()
            .ok_or_else(|| Error::Vocabulary(format!("'{node}' is not in the taxonomy")))
    }

    /// Depth of `node`, with the root at depth 1.
    pub fn depth(&self, node: &str) -> Result<usize> {
        Ok(self.depth[self.id(node)?])
    }

    fn ancestors(&self, mut n: usize) -> Vec<usize> {
        let mut out = vec![n];
        while let Some(p) = self.parent[n] {
            out.push(p);
            n = p;
        }
        out
    }

    pub fn lowest_common_ancestor(&self, a: &str, b: &str) -> Result<&str> {
        let up: BTreeSet<usize> = self.ancestors(self.id(a)?).into_iter().collect();
        let lca = self
            .ancestors(self.id(b)?)
            .into_iter()
            .find(|n| up.contains(n))
            .expect("single root is a common ancestor");
        Ok(&self.names[lca])
    }
}

/// `2 depth(lca) / (depth(a) + depth(b))`.
pub fn wup(a: &str, b: &str, tax: &TaxonomyGraph) -> Result<f64> {
    let lca = tax.lowest_common_ancestor(a, b)?;
    Ok(2.0 * tax.depth(lca)? as f64 / (tax.depth(a)? + tax.depth(b)?) as f64)
}

/// Mean thresholded Wu-Palmer score; per-pair scores below `threshold` are
/// multiplied by 0.1.
pub fn wups_score(predictions: &[String], golds: &[String], tax: &TaxonomyGraph, threshold: f64) -> Result<f64> {
    if predictions.len() != golds.len() {
        return Err(Error::Batch(format!(
            "{} predictions for {} gold answers",
            predictions.len(),
            golds.len()
        )));
    }
    if !(0.0..=1.0).contains(&threshold) {
        return Err(Error::Config(format!("WUPS threshold must lie in [0, 1], got {threshold}")));
    }
    if golds.is_empty() {
        return Err(Error::Batch("no answers to score".into()));
    }
    let mut total = 0.0;
    for (p, g) in predictions.iter().zip(golds) {
        let s = wup(p, g, tax)?;
        total += if s < threshold { s * 0.1 } else { s };
    }
    Ok(total / golds.len() as f64)
}

pub fn accuracy<T: PartialEq>(predictions: &[T], golds: &[T]) -> Result<f64> {
    if predictions.len() != golds.len() || golds.is_empty() {
        return Err(Error::Batch(format!(
            "{} predictions for {} gold labels",
            predictions.len(),
            golds.len()
        )));
    }
    let hits = predictions.iter().zip(golds).filter(|(p, g)| p == g).count();
    Ok(hits as f64 / golds.len() as f64)
}

/// Unweighted mean of per-class F1 over every class that occurs as a
/// prediction or a gold label.
pub fn macro_f1<T: Ord + Clone>(predictions: &[T], golds: &[T]) -> Result<f64> {
    accuracy(predictions, golds)?;
    let classes: BTreeSet<T> = predictions.iter().chain(golds).cloned().collect();
    let mut total = 0.0;
    for c in &classes {
        let mut tp = 0usize;
        let mut fp = 0usize;
        let mut fn_ = 0usize;
        for (p, g) in predictions.iter().zip(golds) {
            match (p == c, g == c) {
                (true, true) => tp += 1,
                (true, false) => fp += 1,
                (false, true) => fn_ += 1,
                _ => {}
            }
        }
        total += 2.0 * tp as f64 / (2 * tp + fp + fn_) as f64;
    }
    Ok(total / classes.len() as f64)
}

/// Named metric values; rendered sorted, one `metric<TAB>split<TAB>value` line each.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Report {
    entries: Vec<(String, String, f64)>,
}

impl Report {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, metric: impl Into<String>, split: impl Into<String>, value: f64) {
        self.entries.push((metric.into(), split.into(), value));
    }

    pub fn extend(&mut self, other: Report) {
        self.entries.extend(other.entries);
    }

    pub fn get(&self, metric: &str, split: &str) -> Option<f64> {
        self.entries
            .iter()
            .find(|(m, s, _)| m == metric && s == split)
            .map(|(_, _, v)| *v)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn render(&self) -> String {
        let mut sorted: Vec<&(String, String, f64)> = self.entries.iter().collect();
        sorted.sort_by(|a, b| a.0.cmp(&b.0).then(a.1.cmp(&b.1)));
        sorted
            .iter()
            .map(|(m, s, v)| format!("{m}\t{s}\t{v:.16e}\n"))
            .collect()
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut r = Report::new();
        for (no, line) in text.lines().enumerate() {
            let f: Vec<&str> = line.split('\t').collect();
            let [m, s, v] = f[..] else {
                return Err(Error::Format(format!("report line {}: expected 3 fields", no + 1)));
            };
            let v: f64 = v
                .parse()
                .map_err(|_| Error::Format(format!("report line {}: bad value '{v}'", no + 1)))?;
            r.push(m, s, v);
        }
        Ok(r)
    }
}

pub fn emit_report(report: &Report, path: &Path) -> Result<()> {
    fs::write(path, report.render()).map_err(|e| Error::io(path, e))
}

/// R@k, P@1, mAP and MnR in both directions between two aligned embedding
/// sets, named `{metric}_{a}_to_{b}`.
pub fn retrieval_report(a: &Tensor, b: &Tensor, names: (&str, &str), ks: &[usize], split: &str) -> Result<Report> {
    let sim = matmul_nt(a, b)?;
    let mut r = Report::new();
    for (s, from, to) in [(sim.clone(), names.0, names.1), (sim.transpose(), names.1, names.0)] {
        let m = RetrievalResult::from_similarity(&s)?.metrics(ks);
        let tag = format!("{from}_to_{to}");
        r.push(format!("p_at_1_{tag}"), split, m.p_at_1);
        for (k, v) in &m.recall {
            r.push(format!("r_at_{k}_{tag}"), split, *v);
        }
        r.push(format!("map_{tag}"), split, m.map);
        r.push(format!("mean_rank_{tag}"), split, m.mean_rank);
    }
    Ok(r)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::compute::RngStream;
    use proptest::prelude::*;

    fn brute_force(sim: &Tensor, ks: &[usize]) -> (f64, Vec<f64>, f64, f64) {
        let n = sim.rows();
        let mut ranks = Vec::new();
        for i in 0..n {
            // Count candidates that beat the gold under (score desc, index asc).
            let gold = sim.at(i, i);
            let mut rank = 1;
            for j in 0..n {
                let s = sim.at(i, j);
                if s > gold || (s == gold && j < i) {
                    rank += 1;
                }
            }
            ranks.push(rank);
        }
        let nf = n as f64;
        let r1 = ranks.iter().filter(|&&r| r == 1).count() as f64 / nf;
        let rk = ks
            .iter()
            .map(|&k| ranks.iter().filter(|&&r| r <= k).count() as f64 / nf)
            .collect();
        let map = ranks.iter().map(|&r| 1.0 / r as f64).sum::<f64>() / nf;
        let mnr = ranks.iter().sum::<usize>() as f64 / nf;
        (r1, rk, map, mnr)
    }

    #[test]
    fn retrieval_examples() {
        let m = RetrievalResult::from_similarity(&Tensor::eye(3)).unwrap().metrics(&[1, 5]);
        assert_eq!((m.p_at_1, m.map, m.mean_rank), (1.0, 1.0, 1.0));
        let anti = Tensor::from_rows(&[vec![0.0, 1.0], vec![1.0, 0.0]]);
        let m = RetrievalResult::from_similarity(&anti).unwrap().metrics(&[1]);
        assert_eq!((m.p_at_1, m.mean_rank, m.map), (0.0, 2.0, 0.5));
        assert!(RetrievalResult::from_similarity(&Tensor::zeros(&[2, 3])).is_err());
    }

    #[test]
    fn ties_break_toward_lower_index() {
        let flat = Tensor::full(&[3, 3], 0.5);
        let r = RetrievalResult::from_similarity(&flat).unwrap();
        assert_eq!(r.gold_ranks(), vec![1, 2, 3]);
    }

    #[test]
    fn retrieval_matches_brute_force() {
        let mut rng = RngStream::new(8);
        for case in 0..100 {
            let n = 1 + rng.below(10);
            // Coarse values so ties actually occur.
            let sim = rng.normal_tensor(&[n, n], 1.0).map(|v| (v * 2.0).round() / 2.0);
            let ks = [1, 3, 5, 10];
            let m = RetrievalResult::from_similarity(&sim).unwrap().metrics(&ks);
            let (r1, rk, map, mnr) = brute_force(&sim, &ks);
            assert_eq!(m.p_at_1, r1, "case {case}");
            assert_eq!(m.recall.iter().map(|x| x.1).collect::<Vec<_>>(), rk);
            assert_eq!(m.map, map);
            assert_eq!(m.mean_rank, mnr);
        }
    }

    proptest! {
        #[test]
        fn retrieval_bounds_and_monotonicity(n in 1usize..10, seed in 0u64..1000) {
            let sim = RngStream::new(seed).normal_tensor(&[n, n], 1.0);
            let ks: Vec<usize> = (1..=n + 1).collect();
            let m = RetrievalResult::from_similarity(&sim).unwrap().metrics(&ks);
            prop_assert!((0.0..=1.0).contains(&m.map));
            prop_assert!(m.mean_rank >= 1.0 && m.mean_rank <= n as f64);
            for w in m.recall.windows(2) {
                prop_assert!(w[0].1 <= w[1].1);
            }
            prop_assert_eq!(m.recall.last().unwrap().1, 1.0);
        }

        #[test]
        fn zero_shot_argmax_ignores_tau(seed in 0u64..1000, t1 in 0.01f64..1.0, t2 in 0.01f64..1.0) {
            let mut rng = RngStream::new(seed);
            let c = 1 + rng.below(6);
            let classes = crate::compute::l2_normalize(&rng.normal_tensor(&[c, 5], 1.0)).unwrap();
            let q = crate::compute::l2_normalize(&rng.normal_tensor(&[1, 5], 1.0)).unwrap();
            let a = zero_shot_classify(q.data(), &classes, t1).unwrap();
            let b = zero_shot_classify(q.data(), &classes, t2).unwrap();
            prop_assert_eq!(a.prediction, b.prediction);
            let total: f64 = a.probabilities.iter().sum();
            prop_assert!((total - 1.0).abs() < 1e-12);
            // Agrees with rank-1 retrieval over the same candidates.
            let sims = matmul_nt(&q, &classes).unwrap();
            let mut best = 0;
            for j in 0..c {
                if sims.at(0, j) > sims.at(0, best) {
                    best = j;
                }
            }
            prop_assert_eq!(a.prediction, best);
        }
    }

    #[test]
    fn zero_shot_examples() {
        let one = Tensor::from_rows(&[vec![1.0, 0.0]]);
        let z = zero_shot_classify(&[0.0, 1.0], &one, 0.07).unwrap();
        assert_eq!((z.probabilities.clone(), z.prediction), (vec![1.0], 0));

        let two = Tensor::eye(2);
        let z = zero_shot_classify(&[1.0, 0.0], &two, 1.0).unwrap();
        let e = std::f64::consts::E;
        assert_eq!(z.prediction, 0);
        assert!((z.probabilities[0] - e / (e + 1.0)).abs() < 1e-12);
        assert!((z.probabilities[0] - 0.7311).abs() < 1e-4);
        assert!(zero_shot_classify(&[1.0], &Tensor::zeros(&[0, 1]), 1.0).is_err());
    }

    fn animals() -> TaxonomyGraph {
        TaxonomyGraph::parse(
            "animal\tentity\nplant\tentity\ncat\tanimal\ndog\tanimal\nbird\tanimal\n\
             sparrow\tbird\ntree\tplant\noak\ttree\nflower\tplant\n",
        )
        .unwrap()
    }

    #[test]
    fn wup_examples() {
        let t = animals();
        assert_eq!(t.len(), 10);
        for n in ["entity", "cat", "oak"] {
            assert_eq!(wup(n, n, &t).unwrap(), 1.0);
        }
        assert!((wup("cat", "dog", &t).unwrap() - 2.0 / 3.0).abs() < 1e-12);
        assert!((wup("cat", "entity", &t).unwrap() - 0.5).abs() < 1e-12);
        // sparrow depth 4, cat depth 3, lca animal depth 2
        assert!((wup("sparrow", "cat", &t).unwrap() - 4.0 / 7.0).abs() < 1e-12);
        assert!((wup("oak", "cat", &t).unwrap() - 2.0 / 7.0).abs() < 1e-12);
        assert!(matches!(wup("cat", "whale", &t), Err(Error::Vocabulary(_))));
    }

    #[test]
    fn wups_examples() {
        let t = animals();
        let s = |v: &[&str]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>();
        assert_eq!(wups_score(&s(&["cat", "oak"]), &s(&["cat", "oak"]), &t, 0.9).unwrap(), 1.0);
        let v = wups_score(&s(&["cat"]), &s(&["dog"]), &t, 0.9).unwrap();
        assert!((v - 2.0 / 30.0).abs() < 1e-12);
        let raw = wups_score(&s(&["cat", "oak"]), &s(&["dog", "cat"]), &t, 0.0).unwrap();
        assert!((raw - (2.0 / 3.0 + 2.0 / 7.0) / 2.0).abs() < 1e-12);
        assert!(wups_score(&s(&["cat"]), &s(&[]), &t, 0.9).is_err());
    }

    #[test]
    fn taxonomy_validation() {
        assert!(TaxonomyGraph::parse("a\tb\nb\ta\n").is_err());
        assert!(TaxonomyGraph::parse("a\tr\nb\ts\n").is_err());
        assert!(TaxonomyGraph::parse("a\tr\na\ts\n").is_err());
        assert!(TaxonomyGraph::parse("a r\n").is_err());
        let t = TaxonomyGraph::parse("# c\nleaf\tmid\nmid\troot\n").unwrap();
        assert_eq!(t.depth("root").unwrap(), 1);
        assert_eq!(t.depth("leaf").unwrap(), 3);
    }

    #[test]
    fn classification_metrics() {
        let p = [0, 1, 1, 2];
        let g = [0, 1, 2, 2];
        assert_eq!(accuracy(&p, &g).unwrap(), 0.75);
        // F1: class0 1, class1 2/3, class2 2/3
        assert!((macro_f1(&p, &g).unwrap() - (1.0 + 4.0 / 3.0) / 3.0).abs() < 1e-12);
    }

    #[test]
    fn report_is_sorted_and_exact() {
        let mut r = Report::new();
        r.push("zeta", "validation", 0.1);
        r.push("alpha", "validation", 1.0 / 3.0);
        let text = r.render();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 2);
        assert!(lines[0].starts_with("alpha\tvalidation\t"));
        let back = Report::parse(&text).unwrap();
        assert_eq!(back.get("alpha", "validation").unwrap().to_bits(), (1.0f64 / 3.0).to_bits());
        assert_eq!(back.render(), text);
    }
}
