//! Evaluation protocols: top-1 accuracy, pair verification with score
//! distribution statistics, linear-probe identification and rank-k
//! retrieval, plus embedding export.

use std::fmt::Write as _;
use std::path::Path;

use ndarray::Axis;
use serde::{Deserialize, Serialize};

use crate::autograd::{stable_sum, Matrix, Tape};
use crate::data::{Dataset, Pair};
use crate::error::{Error, Result};
use crate::losses::cross_entropy_tape;
use crate::nn::{Linear, ParamStore, Sgd};
use crate::trainer::{epoch_batches, Model};

/// Index of the largest value; the lowest index wins ties.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

pub fn accuracy(predicted: &[usize], labels: &[usize]) -> Result<f64> {
    crate::error::ensure_dim("predictions", labels.len(), predicted.len())?;
    if labels.is_empty() {
        return Err(Error::contract("accuracy of an empty set"));
    }
    let hits = predicted.iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(hits as f64 / labels.len() as f64)
}

/// Fraction of samples whose arg-max logit is the label.
pub fn top1(model: &Model, ds: &Dataset) -> Result<f64> {
    if ds.is_empty() {
        return Err(Error::contract("top-1 on an empty dataset"));
    }
    accuracy(&model.predict(ds)?, &ds.labels())
}

pub fn cosine(a: &[f64], b: &[f64]) -> Result<f64> {
    crate::error::ensure_dim("cosine operands", a.len(), b.len())?;
    let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(Error::contract("cosine of a zero embedding"));
    }
    Ok(a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / (na * nb))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerificationReport {
    /// Accuracy of the rule `same ⇔ score > threshold`.
    pub accuracy: f64,
    pub threshold: f64,
    pub scores: Vec<f64>,
    pub same: Vec<bool>,
    /// Mean positive score minus mean negative score.
    pub margin: f64,
    pub histogram_intersection: f64,
    pub bins: usize,
}

/// Normalized histogram over `[-1, 1]`.
pub fn histogram(scores: &[f64], bins: usize) -> Vec<f64> {
    let mut h = vec![0.0; bins];
    if scores.is_empty() || bins == 0 {
        return h;
    }
    for &s in scores {
        let b = (((s.clamp(-1.0, 1.0) + 1.0) / 2.0) * bins as f64).floor() as usize;
        h[b.min(bins - 1)] += 1.0;
    }
    let n = scores.len() as f64;
    h.iter_mut().for_each(|v| *v /= n);
    h
}

/// Overlap mass `Σ min(p, q)` of two score histograms.
pub fn histogram_intersection(a: &[f64], b: &[f64], bins: usize) -> f64 {
    let (ha, hb) = (histogram(a, bins), histogram(b, bins));
    stable_sum(ha.iter().zip(&hb).map(|(x, y)| x.min(*y)))
}

/// Candidate thresholds: one below every score, the midpoints between
/// consecutive distinct sorted scores, and one above every score.
pub fn candidate_thresholds(scores: &[f64]) -> Vec<f64> {
    let mut s = scores.to_vec();
    s.sort_by(f64::total_cmp);
    s.dedup();
    let mut out = Vec::with_capacity(s.len() + 1);
    if let (Some(first), Some(last)) = (s.first(), s.last()) {
        out.push(first - 1.0);
        out.extend(s.windows(2).map(|w| 0.5 * (w[0] + w[1])));
        out.push(last + 1.0);
    }
    out
}

/// Best `(threshold, correct)` over the sweep; the lowest threshold wins
/// ties.
fn sweep(scores: &[f64], same: &[bool]) -> (f64, usize) {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let thresholds = candidate_thresholds(scores);
    // Below every score all pairs are called "same".
    let mut correct = same.iter().filter(|&&s| s).count() as i64;
    let (mut best_t, mut best) = (thresholds[0], correct);
    let mut i = 0;
    for &t in &thresholds[1..] {
        // Pairs with score < t flip to "different".
        while i < order.len() && scores[order[i]] < t {
            correct += if same[order[i]] { -1 } else { 1 };
            i += 1;
        }
        if correct > best {
            best = correct;
            best_t = t;
        }
    }
    (best_t, best as usize)
}

pub fn verify_scores(scores: &[f64], same: &[bool], bins: usize) -> Result<VerificationReport> {
    crate::error::ensure_dim("pair labels", scores.len(), same.len())?;
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::contract("verification scores must be finite"));
    }
    let pos: Vec<f64> = scores.iter().zip(same).filter(|(_, &s)| s).map(|(v, _)| *v).collect();
    let neg: Vec<f64> = scores.iter().zip(same).filter(|(_, &s)| !s).map(|(v, _)| *v).collect();
    if pos.is_empty() || neg.is_empty() {
        return Err(Error::contract("verification needs both same and different pairs"));
    }
    if bins == 0 {
        return Err(Error::contract("histogram needs at least one bin"));
    }
    let (threshold, correct) = sweep(scores, same);
    let mean = |v: &[f64]| stable_sum(v.iter().copied()) / v.len() as f64;
    Ok(VerificationReport {
        accuracy: correct as f64 / scores.len() as f64,
        threshold,
        scores: scores.to_vec(),
        same: same.to_vec(),
        margin: mean(&pos) - mean(&neg),
        histogram_intersection: histogram_intersection(&pos, &neg, bins),
        bins,
    })
}

/// Cosine scores for `pairs`, resolving ids against `ds`.
pub fn pair_scores(embeddings: &Matrix, ds: &Dataset, pairs: &[Pair]) -> Result<Vec<f64>> {
    let pos = |id: usize| ds.position(id).ok_or_else(|| Error::MissingId(format!("sample id {id} not in split `{}`", ds.split)));
    pairs
        .iter()
        .map(|p| {
            let (a, b) = (pos(p.id_a)?, pos(p.id_b)?);
            cosine(
                embeddings.row(a).as_slice().expect("contiguous"),
                embeddings.row(b).as_slice().expect("contiguous"),
            )
        })
        .collect()
}

pub fn verify_pairs(model: &Model, ds: &Dataset, pairs: &[Pair], bins: usize) -> Result<VerificationReport> {
    let emb = model.embeddings(ds)?;
    let scores = pair_scores(&emb, ds, pairs)?;
    let same: Vec<bool> = pairs.iter().map(|p| p.same).collect();
    verify_scores(&scores, &same, bins)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalReport {
    pub ks: Vec<usize>,
    pub accuracy: Vec<f64>,
}

/// Rank-k retrieval by cosine similarity; equal scores rank by gallery
/// index.
pub fn retrieve_embeddings(
    gallery: &Matrix,
    gallery_labels: &[usize],
    probes: &Matrix,
    probe_labels: &[usize],
    ks: &[usize],
) -> Result<RetrievalReport> {
    if gallery.nrows() == 0 {
        return Err(Error::contract("retrieval needs a nonempty gallery"));
    }
    if probes.nrows() == 0 {
        return Err(Error::contract("retrieval needs at least one probe"));
    }
    crate::error::ensure_dim("gallery labels", gallery.nrows(), gallery_labels.len())?;
    crate::error::ensure_dim("probe labels", probes.nrows(), probe_labels.len())?;
    crate::error::ensure_dim("embedding width", gallery.ncols(), probes.ncols())?;
    let mut hits = vec![0usize; ks.len()];
    for (p, probe) in probes.axis_iter(Axis(0)).enumerate() {
        let probe = probe.as_slice().expect("contiguous");
        let scores = gallery
            .axis_iter(Axis(0))
            .map(|g| cosine(probe, g.as_slice().expect("contiguous")))
            .collect::<Result<Vec<_>>>()?;
        let mut order: Vec<usize> = (0..scores.len()).collect();
        order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
        let first = order.iter().position(|&g| gallery_labels[g] == probe_labels[p]);
        for (h, &k) in hits.iter_mut().zip(ks) {
            if first.is_some_and(|r| r < k) {
                *h += 1;
            }
        }
    }
    let n = probes.nrows() as f64;
    Ok(RetrievalReport { ks: ks.to_vec(), accuracy: hits.into_iter().map(|h| h as f64 / n).collect() })
}

pub fn retrieve(model: &Model, gallery: &Dataset, probes: &Dataset, ks: &[usize]) -> Result<RetrievalReport> {
    retrieve_embeddings(&model.embeddings(gallery)?, &gallery.labels(), &model.embeddings(probes)?, &probes.labels(), ks)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProbeSettings {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub momentum: f64,
    pub weight_decay: f64,
    pub seed: u64,
}

impl Default for ProbeSettings {
    fn default() -> Self {
        Self { epochs: 10, lr: 0.01, batch_size: 32, momentum: 0.9, weight_decay: 5e-4, seed: 5 }
    }
}

/// Trains a fresh linear classifier on frozen features and returns its
/// test accuracy. Features are standardized with training statistics.
pub fn linear_probe_features(
    train: &Matrix,
    train_labels: &[usize],
    test: &Matrix,
    test_labels: &[usize],
    classes: usize,
    settings: &ProbeSettings,
) -> Result<f64> {
    crate::error::ensure_dim("probe feature width", train.ncols(), test.ncols())?;
    crate::error::ensure_dim("probe train labels", train.nrows(), train_labels.len())?;
    crate::error::ensure_dim("probe test labels", test.nrows(), test_labels.len())?;
    if train.nrows() == 0 || test.nrows() == 0 {
        return Err(Error::contract("linear probe needs nonempty splits"));
    }
    if let Some(&l) = train_labels.iter().chain(test_labels).find(|&&l| l >= classes) {
        return Err(Error::contract(format!("label {l} out of range for {classes} classes")));
    }
    let mean = train.mean_axis(Axis(0)).expect("rows");
    let std = train.std_axis(Axis(0), 0.0).mapv(|s| if s > 1e-12 { s } else { 1.0 });
    let scale = |m: &Matrix| (m - &mean) / &std;
    let (xtr, xte) = (scale(train), scale(test));

    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(settings.seed);
    let mut store = ParamStore::new();
    let head = Linear::new(&mut store, "probe", xtr.ncols(), classes, true, &mut rng);
    // Zero start: the first steps follow the class-mean directions.
    for id in store.ids().collect::<Vec<_>>() {
        store.get_mut(id).fill(0.0);
    }
    let mut opt = Sgd::new(&store, settings.momentum, settings.weight_decay);
    for epoch in 0..settings.epochs {
        for batch in epoch_batches(settings.seed, epoch, xtr.nrows(), settings.batch_size) {
            let labels: Vec<usize> = batch.iter().map(|&i| train_labels[i]).collect();
            let mut tape = Tape::new();
            let bound = store.bind(&mut tape);
            let x = tape.constant(xtr.select(Axis(0), &batch));
            let z = head.forward(&mut tape, &bound, x);
            let loss = cross_entropy_tape(&mut tape, z, &labels);
            let g = tape.backward(loss);
            let g = store.gradients(&bound, &g);
            opt.step(&mut store, &g, settings.lr);
        }
    }
    let mut tape = Tape::new();
    let bound = store.bind_frozen(&mut tape);
    let x = tape.constant(xte);
    let z = head.forward(&mut tape, &bound, x);
    let pred: Vec<usize> = tape.value(z).rows().into_iter().map(|r| argmax(r.as_slice().expect("contiguous"))).collect();
    accuracy(&pred, test_labels)
}

pub fn linear_probe(model: &Model, train: &Dataset, test: &Dataset, settings: &ProbeSettings) -> Result<f64> {
    if train.classes != test.classes {
        return Err(Error::contract(format!(
            "probe splits disagree on class count ({} vs {})",
            train.classes, test.classes
        )));
    }
    linear_probe_features(
        &model.embeddings(train)?,
        &train.labels(),
        &model.embeddings(test)?,
        &test.labels(),
        train.classes,
        settings,
    )
}

/// Nearest class-mean accuracy (Euclidean).
pub fn nearest_centroid(train: &Matrix, train_labels: &[usize], test: &Matrix, test_labels: &[usize], classes: usize) -> Result<f64> {
    let mut centroids = Matrix::zeros((classes, train.ncols()));
    let mut counts = vec![0usize; classes];
    for (row, &l) in train.axis_iter(Axis(0)).zip(train_labels) {
        let mut c = centroids.row_mut(l);
        c += &row;
        counts[l] += 1;
    }
    let pred = test
        .axis_iter(Axis(0))
        .map(|x| {
            let s: Vec<f64> = (0..classes)
                .map(|c| {
                    if counts[c] == 0 {
                        return f64::NEG_INFINITY;
                    }
                    let d: f64 = centroids.row(c).iter().zip(x.iter()).map(|(a, b)| (a / counts[c] as f64 - b).powi(2)).sum();
                    -d
                })
                .collect();
            argmax(&s)
        })
        .collect::<Vec<_>>();
    accuracy(&pred, test_labels)
}

/// `sample_id,label,e0,...` rows; the header alone for an empty dataset.
pub fn render_embeddings(embeddings: &Matrix, ds: &Dataset) -> Result<String> {
    crate::error::ensure_dim("embedding rows", ds.len(), embeddings.nrows())?;
    let mut s = String::from("sample_id,label");
    for i in 0..embeddings.ncols() {
        let _ = write!(s, ",e{i}");
    }
    s.push('\n');
    for (row, sample) in embeddings.axis_iter(Axis(0)).zip(&ds.samples) {
        let _ = write!(s, "{},{}", sample.sample_id, sample.label);
        for v in row {
            let _ = write!(s, ",{v}");
        }
        s.push('\n');
    }
    Ok(s)
}

pub fn export_embeddings(model: &Model, ds: &Dataset, path: &Path) -> Result<usize> {
    let emb = model.embeddings(ds)?;
    let text = render_embeddings(&emb, ds)?;
    std::fs::write(path, text).map_err(|e| Error::io(path, e))?;
    Ok(ds.len())
}

/// Parsed embedding export: `(sample_id, label, values)` per row.
pub fn parse_embeddings(text: &str, origin: &str) -> Result<Vec<(usize, usize, Vec<f64>)>> {
    let err = |line: usize, m: &str| Error::Parse { path: origin.to_string(), line, message: m.to_string() };
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| err(1, "missing header"))?;
    let width = header.split(',').count();
    if width < 2 || !header.starts_with("sample_id,label") {
        return Err(err(1, "bad header"));
    }
    lines
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            let f: Vec<&str> = l.split(',').collect();
            if f.len() != width {
                return Err(err(i + 2, "column count differs from header"));
            }
            let id = f[0].parse().map_err(|_| err(i + 2, "bad sample id"))?;
            let label = f[1].parse().map_err(|_| err(i + 2, "bad label"))?;
            let values = f[2..].iter().map(|v| v.parse().map_err(|_| err(i + 2, "bad value"))).collect::<Result<_>>()?;
            Ok((id, label, values))
        })
        .collect()
}

/// `key: value` lines.
pub fn render_report(entries: &[(&str, String)]) -> String {
    let mut s = String::new();
    for (k, v) in entries {
        let _ = writeln!(s, "{k}: {v}");
    }
    s
}

pub fn parse_report(text: &str) -> Vec<(String, String)> {
    text.lines()
        .filter_map(|l| l.split_once(':').map(|(k, v)| (k.trim().to_string(), v.trim().to_string())))
        .collect()
}

impl VerificationReport {
    pub fn to_text(&self) -> String {
        render_report(&[
            ("protocol", "verify".into()),
            ("pairs", self.scores.len().to_string()),
            ("accuracy", self.accuracy.to_string()),
            ("threshold", self.threshold.to_string()),
            ("margin", self.margin.to_string()),
            ("histogram_intersection", self.histogram_intersection.to_string()),
            ("bins", self.bins.to_string()),
        ])
    }

    /// `index,same,score` dump for external plotting.
    pub fn scores_csv(&self) -> String {
        let mut s = String::from("index,same,score\n");
        for (i, (v, same)) in self.scores.iter().zip(&self.same).enumerate() {
            let _ = writeln!(s, "{i},{},{v}", u8::from(*same));
        }
        s
    }
}

impl RetrievalReport {
    pub fn to_text(&self) -> String {
        let mut entries = vec![("protocol", "retrieve".to_string())];
        let keys: Vec<String> = self.ks.iter().map(|k| format!("rank{k}")).collect();
        for (k, a) in keys.iter().zip(&self.accuracy) {
            entries.push((k.as_str(), a.to_string()));
        }
        render_report(&entries)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn brute_best(scores: &[f64], same: &[bool]) -> (f64, usize) {
        let mut best = (f64::NAN, 0usize);
        for t in candidate_thresholds(scores) {
            let c = scores.iter().zip(same).filter(|(s, &y)| (**s > t) == y).count();
            if best.0.is_nan() || c > best.1 {
                best = (t, c);
            }
        }
        best
    }

    #[test]
    fn separable_toy_scores() {
        let r = verify_scores(&[0.9, 0.8, 0.1, 0.2], &[true, true, false, false], 100).unwrap();
        assert_eq!(r.accuracy, 1.0);
        assert!((r.margin - 0.7).abs() < 1e-12);
        assert!(r.threshold > 0.2 && r.threshold < 0.8);
        assert_eq!(r.histogram_intersection, 0.0);
    }

    #[test]
    fn identical_distributions() {
        let s = [0.1, 0.4, 0.1, 0.4];
        let r = verify_scores(&s, &[true, true, false, false], 100).unwrap();
        assert_eq!(r.accuracy, 0.5);
        assert_eq!(r.histogram_intersection, 1.0);
        // Lowest threshold among the tied optima.
        assert!(r.threshold < 0.1);
    }

    #[test]
    fn sweep_matches_brute_force() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20 {
            let scores: Vec<f64> = (0..100).map(|_| (rng.random_range(-10..10) as f64) / 10.0).collect();
            let same: Vec<bool> = scores.iter().map(|s| rng.random_bool((0.5 + s / 2.5).clamp(0.0, 1.0))).collect();
            assert_eq!(sweep(&scores, &same), brute_best(&scores, &same));
        }
    }

    #[test]
    fn histogram_edges() {
        let h = histogram(&[-1.0, 1.0, 0.0], 4);
        assert_eq!(h, vec![1.0 / 3.0, 0.0, 1.0 / 3.0, 1.0 / 3.0]);
        assert_eq!(histogram_intersection(&[-0.9], &[0.9], 100), 0.0);
    }

    #[test]
    fn retrieval_basics() {
        let g = Matrix::from_shape_vec((3, 2), vec![1.0, 0.0, 0.0, 1.0, -1.0, 0.0]).unwrap();
        let p = Matrix::from_shape_vec((1, 2), vec![0.0, 2.0]).unwrap();
        let r = retrieve_embeddings(&g, &[0, 1, 2], &p, &[1], &[1, 3]).unwrap();
        assert_eq!(r.accuracy, vec![1.0, 1.0]);
        let r = retrieve_embeddings(&g, &[0, 1, 2], &p, &[2], &[1, 2, 3]).unwrap();
        // Gallery 0 and 2 tie at cosine 0; index order puts 0 first.
        assert_eq!(r.accuracy, vec![0.0, 0.0, 1.0]);
        assert!(retrieve_embeddings(&Matrix::zeros((0, 2)), &[], &p, &[1], &[1]).is_err());
    }

    #[test]
    fn probe_on_one_hot_features() {
        let labels: Vec<usize> = (0..60).map(|i| i % 3).collect();
        let mut x = Matrix::zeros((60, 3));
        for (i, &l) in labels.iter().enumerate() {
            x[[i, l]] = 1.0;
        }
        let acc = linear_probe_features(&x, &labels, &x, &labels, 3, &ProbeSettings::default()).unwrap();
        assert_eq!(acc, 1.0);
        assert!(linear_probe_features(&x, &labels, &x, &labels, 2, &ProbeSettings::default()).is_err());
    }

    #[test]
    fn argmax_prefers_lowest_index() {
        assert_eq!(argmax(&[1.0, 3.0, 3.0]), 1);
        assert_eq!(argmax(&[0.0; 4]), 0);
    }
}
