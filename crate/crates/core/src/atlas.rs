//! Feature atlas and the exhaustive one-vs-all pair scorer.

use alloc::vec::Vec;
use core::ops::Range;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::detector::Detector;
use crate::error::{config_err, input_err, Error, Result};
use crate::format::{self, Container};
use crate::model::ModelParams;
use crate::world::ImageSample;

pub type Fingerprint = [u8; 32];

/// SHA-256 of the canonical parameter bytes.
pub fn fingerprint(params: &ModelParams) -> Fingerprint {
    Sha256::digest(format::params_body(params)).into()
}

pub fn fingerprint_hex(fp: &Fingerprint) -> alloc::string::String {
    use core::fmt::Write;
    let mut s = alloc::string::String::with_capacity(64);
    for b in fp {
        let _ = write!(s, "{b:02x}");
    }
    s
}

/// Row-major `f32` feature matrix with per-row source ids and identities,
/// bound to the model that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct Atlas {
    pub dim: usize,
    pub fingerprint: Fingerprint,
    pub ids: Vec<u64>,
    /// `-1` when the identity is unknown.
    pub identities: Vec<i64>,
    pub features: Vec<f32>,
}

impl Atlas {
    pub fn rows(&self) -> usize {
        self.ids.len()
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.features[i * self.dim..(i + 1) * self.dim]
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.rows();
        if n == 0 || self.dim == 0 {
            return Err(input_err!("atlas needs at least one row and a positive dimension"));
        }
        if self.identities.len() != n || self.features.len() != n * self.dim {
            return Err(input_err!("atlas tables disagree on the row count {n}"));
        }
        if self.features.iter().any(|v| !v.is_finite()) {
            return Err(input_err!("atlas contains non-finite features"));
        }
        Ok(())
    }

    /// A subset of rows, in the given order.
    pub fn select(&self, rows: &[usize]) -> Atlas {
        let mut out = Atlas { dim: self.dim, fingerprint: self.fingerprint, ids: Vec::new(), identities: Vec::new(), features: Vec::new() };
        for &i in rows {
            out.ids.push(self.ids[i]);
            out.identities.push(self.identities[i]);
            out.features.extend_from_slice(self.row(i));
        }
        out
    }

    pub fn encode(&self) -> Vec<u8> {
        Container {
            magic: format::ATLAS_MAGIC,
            dim: self.dim,
            fingerprint: self.fingerprint,
            ids: self.ids.clone(),
            identities: self.identities.clone(),
            payload: self.features.clone(),
        }
        .encode()
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let c = Container::decode(bytes, format::ATLAS_MAGIC)?;
        let atlas = Atlas { dim: c.dim, fingerprint: c.fingerprint, ids: c.ids, identities: c.identities, features: c.payload };
        atlas.validate()?;
        Ok(atlas)
    }
}

/// One `f32` feature row per image, from the detector's encoder.
pub fn build_atlas(detector: &Detector<'_>, images: &[ImageSample]) -> Result<Atlas> {
    if images.is_empty() {
        return Err(config_err!("cannot build an atlas from zero images"));
    }
    let feats = detector.features(images)?;
    let dim = detector.params.dims.feature;
    let mut features = Vec::with_capacity(images.len() * dim);
    for f in &feats {
        features.extend(f.0.iter().map(|&v| v as f32));
    }
    let atlas = Atlas {
        dim,
        fingerprint: fingerprint(detector.params),
        ids: images.iter().map(|x| x.id).collect(),
        identities: images.iter().map(|x| x.identity.map_or(-1, |i| i as i64)).collect(),
        features,
    };
    atlas.validate()?;
    Ok(atlas)
}

/// The difference head with `f32` weights, evaluated with `f64` accumulation
/// in a fixed order so every pair's score is independent of batching.
#[derive(Debug, Clone)]
pub struct HeadKernel {
    dim: usize,
    hidden: usize,
    /// First head layer transposed to `dim x hidden`.
    w1t: Vec<f64>,
    b1: Vec<f64>,
    w2: Vec<f64>,
    b2: f64,
    pub fingerprint: Fingerprint,
}

fn f32_round(v: f64) -> f64 {
    v as f32 as f64
}

impl HeadKernel {
    pub fn new(params: &ModelParams) -> Self {
        let [h1, h2] = &params.head;
        let (dim, hidden) = (h1.inputs, h1.outputs);
        let mut w1t = alloc::vec![0.0; dim * hidden];
        for j in 0..hidden {
            for k in 0..dim {
                w1t[k * hidden + j] = f32_round(h1.weight[j * dim + k]);
            }
        }
        HeadKernel {
            dim,
            hidden,
            w1t,
            b1: h1.bias.iter().map(|&b| f32_round(b)).collect(),
            w2: h2.weight.iter().map(|&w| f32_round(w)).collect(),
            b2: f32_round(h2.bias[0]),
            fingerprint: fingerprint(params),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// `P(same)` for one feature pair; `acc` is scratch of length `hidden`.
    #[inline]
    pub fn score(&self, q: &[f32], r: &[f32], acc: &mut [f64]) -> f32 {
        acc.copy_from_slice(&self.b1);
        for (k, (&a, &b)) in q.iter().zip(r).enumerate() {
            let d = (a - b).abs() as f64;
            let w = &self.w1t[k * self.hidden..(k + 1) * self.hidden];
            for (s, &wj) in acc.iter_mut().zip(w) {
                *s += wj * d;
            }
        }
        let mut logit = self.b2;
        for (&s, &w) in acc.iter().zip(&self.w2) {
            logit += w * s.max(0.0);
        }
        (1.0 / (1.0 + libm::exp(-logit))) as f32
    }

    /// Scores `q` against rows `rows` of `atlas`, writing into `out`.
    pub fn score_rows(&self, q: &[f32], atlas: &Atlas, rows: Range<usize>, out: &mut [f32]) {
        let mut acc = alloc::vec![0.0; self.hidden];
        for (o, i) in out.iter_mut().zip(rows) {
            *o = self.score(q, atlas.row(i), &mut acc);
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScoreOptions {
    /// Pairs with `p >= threshold` are flagged.
    pub threshold: f64,
    pub top_k: usize,
    /// Atlas rows per scoring block.
    pub block_rows: usize,
    pub histogram_bins: usize,
}

impl Default for ScoreOptions {
    fn default() -> Self {
        ScoreOptions { threshold: 0.5, top_k: 5, block_rows: 1024, histogram_bins: 50 }
    }
}

impl ScoreOptions {
    pub fn validate(&self) -> Result<()> {
        if self.block_rows == 0 || self.histogram_bins == 0 {
            return Err(config_err!("block_rows and histogram_bins must be positive"));
        }
        if self.threshold.is_nan() {
            return Err(config_err!("threshold is NaN"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TopMatch {
    pub score: f32,
    pub atlas_id: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryResult {
    pub query_id: u64,
    pub top: Vec<TopMatch>,
    pub flagged: u64,
    /// Order-sensitive hash of the bits of every score in this query's row.
    pub score_digest: u64,
}

/// Score counts over `bins` equal-width bins of `[0, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub counts: Vec<u64>,
}

impl Histogram {
    pub fn new(bins: usize) -> Self {
        Histogram { counts: alloc::vec![0; bins] }
    }

    pub fn add(&mut self, score: f32) {
        let bins = self.counts.len();
        let b = ((score as f64 * bins as f64) as usize).min(bins - 1);
        self.counts[b] += 1;
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    fn merge(&mut self, other: &Histogram) {
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
    }
}

/// Flag and score tallies for pairs whose identities are both known.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LabelTally {
    pub positives: u64,
    pub positives_flagged: u64,
    pub negatives: u64,
    pub negatives_flagged: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditReport {
    pub queries: usize,
    pub atlas_rows: usize,
    pub total_pairs: u64,
    pub flagged: u64,
    pub threshold: f64,
    pub tally: LabelTally,
    pub results: Vec<QueryResult>,
    pub positive_histogram: Histogram,
    pub negative_histogram: Histogram,
    pub unlabeled_histogram: Histogram,
    /// Flagged `(query index, atlas row)` pairs in row-major order.
    #[serde(skip)]
    pub flags: Vec<(u32, u32)>,
    pub block_rows: usize,
    pub threads: usize,
    pub wall_clock_seconds: f64,
    pub pairs_per_second: f64,
}

impl AuditReport {
    fn empty(atlas_rows: usize, options: &ScoreOptions) -> Self {
        AuditReport {
            queries: 0,
            atlas_rows,
            total_pairs: 0,
            flagged: 0,
            threshold: options.threshold,
            tally: LabelTally::default(),
            results: Vec::new(),
            positive_histogram: Histogram::new(options.histogram_bins),
            negative_histogram: Histogram::new(options.histogram_bins),
            unlabeled_histogram: Histogram::new(options.histogram_bins),
            flags: Vec::new(),
            block_rows: options.block_rows,
            threads: 1,
            wall_clock_seconds: 0.0,
            pairs_per_second: 0.0,
        }
    }

    /// Concatenates partial reports over consecutive query ranges.
    pub fn merge(parts: Vec<AuditReport>) -> Option<AuditReport> {
        let mut iter = parts.into_iter();
        let mut out = iter.next()?;
        for p in iter {
            let offset = out.queries as u32;
            out.queries += p.queries;
            out.total_pairs += p.total_pairs;
            out.flagged += p.flagged;
            out.tally.positives += p.tally.positives;
            out.tally.positives_flagged += p.tally.positives_flagged;
            out.tally.negatives += p.tally.negatives;
            out.tally.negatives_flagged += p.tally.negatives_flagged;
            out.results.extend(p.results);
            out.positive_histogram.merge(&p.positive_histogram);
            out.negative_histogram.merge(&p.negative_histogram);
            out.unlabeled_histogram.merge(&p.unlabeled_histogram);
            out.flags.extend(p.flags.into_iter().map(|(q, r)| (q + offset, r)));
        }
        Some(out)
    }

    /// Records timing; throughput is `total_pairs / seconds`.
    pub fn set_timing(&mut self, seconds: f64, threads: usize) {
        self.wall_clock_seconds = seconds;
        self.threads = threads;
        self.pairs_per_second = if seconds > 0.0 { self.total_pairs as f64 / seconds } else { f64::INFINITY };
    }
}

fn check_compatible(kernel: &HeadKernel, atlas: &Atlas, queries: &Atlas) -> Result<()> {
    if atlas.fingerprint != kernel.fingerprint || queries.fingerprint != kernel.fingerprint {
        return Err(Error::FingerprintMismatch);
    }
    if atlas.dim != kernel.dim || queries.dim != kernel.dim {
        return Err(input_err!("feature dims {} / {} do not match the head's {}", queries.dim, atlas.dim, kernel.dim));
    }
    atlas.validate()
}

const DIGEST_PRIME: u64 = 0x0000_0100_0000_01B3;

/// Scores queries `range` against the whole atlas, walking atlas rows in
/// blocks of `options.block_rows`. Flag indices are relative to `range.start`.
pub fn score_query_range(
    kernel: &HeadKernel,
    atlas: &Atlas,
    queries: &Atlas,
    range: Range<usize>,
    options: &ScoreOptions,
) -> Result<AuditReport> {
    options.validate()?;
    check_compatible(kernel, atlas, queries)?;
    if range.end > queries.rows() {
        return Err(input_err!("query range {range:?} exceeds {} queries", queries.rows()));
    }
    let n = atlas.rows();
    let mut report = AuditReport::empty(n, options);
    let mut block = alloc::vec![0.0f32; options.block_rows.min(n)];
    for (local, qi) in range.clone().enumerate() {
        let q = queries.row(qi);
        let q_identity = queries.identities[qi];
        let mut top: Vec<(f32, usize)> = Vec::with_capacity(options.top_k + 1);
        let mut digest = 0xCBF2_9CE4_8422_2325u64;
        let mut flagged = 0u64;
        let mut start = 0;
        while start < n {
            let end = (start + options.block_rows).min(n);
            let out = &mut block[..end - start];
            kernel.score_rows(q, atlas, start..end, out);
            for (off, &s) in out.iter().enumerate() {
                let row = start + off;
                digest = (digest ^ s.to_bits() as u64).wrapping_mul(DIGEST_PRIME);
                let flag = s as f64 >= options.threshold;
                if flag {
                    flagged += 1;
                    report.flags.push((local as u32, row as u32));
                }
                let a_identity = atlas.identities[row];
                if q_identity >= 0 && a_identity >= 0 {
                    if q_identity == a_identity {
                        report.tally.positives += 1;
                        report.tally.positives_flagged += flag as u64;
                        report.positive_histogram.add(s);
                    } else {
                        report.tally.negatives += 1;
                        report.tally.negatives_flagged += flag as u64;
                        report.negative_histogram.add(s);
                    }
                } else {
                    report.unlabeled_histogram.add(s);
                }
                if options.top_k > 0 && (top.len() < options.top_k || s > top[top.len() - 1].0) {
                    // Earlier rows win ties, so insert after equal scores.
                    let pos = top.partition_point(|&(t, _)| t >= s);
                    top.insert(pos, (s, row));
                    top.truncate(options.top_k);
                }
            }
            start = end;
        }
        report.flagged += flagged;
        report.results.push(QueryResult {
            query_id: queries.ids[qi],
            top: top.into_iter().map(|(score, row)| TopMatch { score, atlas_id: atlas.ids[row] }).collect(),
            flagged,
            score_digest: digest,
        });
    }
    report.queries = range.len();
    report.total_pairs = (range.len() * n) as u64;
    Ok(report)
}

/// Single-threaded one-vs-all audit of every query against every atlas row.
pub fn score_one_vs_all(kernel: &HeadKernel, atlas: &Atlas, queries: &Atlas, options: &ScoreOptions) -> Result<AuditReport> {
    score_query_range(kernel, atlas, queries, 0..queries.rows(), options)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{sigmoid, ModelDims};
    use rand::{Rng, SeedableRng};

    fn params() -> ModelParams {
        ModelParams::init(5, ModelDims { input: 8, encoder_hidden: alloc::vec![8], feature: 6, head_hidden: 4 }).unwrap()
    }

    fn random_atlas(p: &ModelParams, rows: usize, seed: u64) -> Atlas {
        let mut r = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let dim = p.dims.feature;
        Atlas {
            dim,
            fingerprint: fingerprint(p),
            ids: (0..rows as u64).collect(),
            identities: (0..rows as i64).map(|i| i % 7).collect(),
            features: (0..rows * dim).map(|_| r.gen_range(0.0..2.0)).collect(),
        }
    }

    #[test]
    fn kernel_matches_f64_head_within_f32_rounding() {
        let p = params();
        let k = HeadKernel::new(&p);
        let a = random_atlas(&p, 20, 1);
        let mut acc = alloc::vec![0.0; 4];
        for i in 0..19 {
            let (u, v) = (a.row(i), a.row(i + 1));
            let uf: Vec<f64> = u.iter().map(|&x| x as f64).collect();
            let vf: Vec<f64> = v.iter().map(|&x| x as f64).collect();
            let reference = sigmoid(p.head_logit(&uf, &vf));
            assert!((k.score(u, v, &mut acc) as f64 - reference).abs() < 1e-5);
            assert_eq!(k.score(u, v, &mut acc), k.score(v, u, &mut acc));
        }
    }

    #[test]
    fn block_size_does_not_change_results() {
        let p = params();
        let k = HeadKernel::new(&p);
        let atlas = random_atlas(&p, 300, 2);
        let queries = random_atlas(&p, 9, 3);
        let base = ScoreOptions { threshold: 0.4, ..ScoreOptions::default() };
        let a = score_one_vs_all(&k, &atlas, &queries, &ScoreOptions { block_rows: 64, ..base }).unwrap();
        let b = score_one_vs_all(&k, &atlas, &queries, &ScoreOptions { block_rows: 7, ..base }).unwrap();
        assert_eq!(a.results, b.results);
        assert_eq!(a.flags, b.flags);
        let parts = (0..9).step_by(4).map(|s| score_query_range(&k, &atlas, &queries, s..(s + 4).min(9), &base).unwrap()).collect();
        let merged = AuditReport::merge(parts).unwrap();
        assert_eq!(merged.flags, a.flags);
        assert_eq!(merged.results, a.results);
        assert_eq!(merged.tally, a.tally);
        assert_eq!(merged.total_pairs, 2700);
    }

    #[test]
    fn unreachable_threshold_flags_nothing() {
        let p = params();
        let k = HeadKernel::new(&p);
        let atlas = random_atlas(&p, 50, 4);
        let opts = ScoreOptions { threshold: 1.0 + 1e-9, ..ScoreOptions::default() };
        let r = score_one_vs_all(&k, &atlas, &atlas, &opts).unwrap();
        assert_eq!(r.flagged, 0);
        assert!(r.flags.is_empty());
        assert_eq!(r.positive_histogram.total() + r.negative_histogram.total(), 2500);
    }

    #[test]
    fn fingerprint_mismatch_blocks_scoring() {
        let p = params();
        let mut other = p.clone();
        other.encoder[0].weight[0] = f64::from_bits(other.encoder[0].weight[0].to_bits() ^ 1);
        assert_ne!(fingerprint(&p), fingerprint(&other));
        let atlas = random_atlas(&p, 10, 5);
        let k = HeadKernel::new(&other);
        assert_eq!(score_one_vs_all(&k, &atlas, &atlas, &ScoreOptions::default()), Err(Error::FingerprintMismatch));
    }

    #[test]
    fn atlas_roundtrip() {
        let p = params();
        let atlas = random_atlas(&p, 12, 6);
        let bytes = atlas.encode();
        assert_eq!(Atlas::decode(&bytes).unwrap(), atlas);
        assert_eq!(Atlas::decode(&bytes).unwrap().encode(), bytes);
    }
}
