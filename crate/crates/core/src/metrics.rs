//! Objective metrics: DTW-aligned MCD, MCD-SL, WER and cosine similarity.

use ndarray::Array2;
use rustdct::DctPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{DubError, Result};
use crate::flow::FeatureSeq;

/// `10 √2 / ln 10`.
pub const MCD_CONST: f64 = 6.141851463713754;

/// Frames × coefficients, c0 excluded.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CepstralSeq {
    pub frames: Array2<f64>,
}

impl CepstralSeq {
    pub fn new(frames: Array2<f64>) -> Result<Self> {
        if frames.nrows() == 0 || frames.ncols() == 0 {
            return Err(DubError::Shape("cepstral sequence must be at least 1 x 1".into()));
        }
        Ok(Self { frames })
    }

    pub fn len(&self) -> usize {
        self.frames.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.nrows() == 0
    }

    pub fn order(&self) -> usize {
        self.frames.ncols()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AlignmentPath {
    pub pairs: Vec<(usize, usize)>,
}

fn frame_distance(a: &CepstralSeq, i: usize, b: &CepstralSeq, j: usize) -> f64 {
    a.frames
        .row(i)
        .iter()
        .zip(b.frames.row(j).iter())
        .map(|(x, y)| (x - y).powi(2))
        .sum::<f64>()
        .sqrt()
}

fn check_orders(a: &CepstralSeq, b: &CepstralSeq) -> Result<()> {
    if a.is_empty() || b.is_empty() {
        return Err(DubError::Shape("cannot align an empty sequence".into()));
    }
    if a.order() != b.order() {
        return Err(DubError::Shape(format!("cepstral orders differ: {} vs {}", a.order(), b.order())));
    }
    Ok(())
}

/// Minimum-cost monotone alignment with steps (1,0), (0,1), (1,1).
///
/// Among equal-cost paths the shortest wins, so transposing the inputs
/// transposes the chosen path.
pub fn dtw_align(a: &CepstralSeq, b: &CepstralSeq) -> Result<(AlignmentPath, f64)> {
    check_orders(a, b)?;
    let (n, m) = (a.len(), b.len());
    // (cost, length) per cell, compared lexicographically
    let mut acc = vec![(f64::INFINITY, usize::MAX); n * m];
    let at = |i: usize, j: usize| i * m + j;
    for i in 0..n {
        for j in 0..m {
            let d = frame_distance(a, i, b, j);
            if i == 0 && j == 0 {
                acc[0] = (d, 1);
                continue;
            }
            let mut best = (f64::INFINITY, usize::MAX);
            for (pi, pj) in [(i.wrapping_sub(1), j.wrapping_sub(1)), (i.wrapping_sub(1), j), (i, j.wrapping_sub(1))] {
                if pi < n && pj < m {
                    let c = acc[at(pi, pj)];
                    if c.0 < best.0 || (c.0 == best.0 && c.1 < best.1) {
                        best = c;
                    }
                }
            }
            acc[at(i, j)] = (best.0 + d, best.1 + 1);
        }
    }
    let mut pairs = vec![(n - 1, m - 1)];
    let (mut i, mut j) = (n - 1, m - 1);
    while (i, j) != (0, 0) {
        let mut best: Option<((usize, usize), (f64, usize))> = None;
        for (pi, pj) in [(i.wrapping_sub(1), j.wrapping_sub(1)), (i.wrapping_sub(1), j), (i, j.wrapping_sub(1))] {
            if pi < n && pj < m {
                let c = acc[at(pi, pj)];
                if best.is_none_or(|(_, b)| c.0 < b.0 || (c.0 == b.0 && c.1 < b.1)) {
                    best = Some(((pi, pj), c));
                }
            }
        }
        let ((pi, pj), _) = best.expect("interior cell has a predecessor");
        pairs.push((pi, pj));
        i = pi;
        j = pj;
    }
    pairs.reverse();
    let cost = acc[at(n - 1, m - 1)].0;
    Ok((AlignmentPath { pairs }, cost))
}

/// Mel-cepstral distortion in dB over the DTW path.
pub fn mcd(a: &CepstralSeq, b: &CepstralSeq) -> Result<f64> {
    let (path, _) = dtw_align(a, b)?;
    let total: f64 = path.pairs.iter().map(|&(i, j)| frame_distance(a, i, b, j)).sum();
    Ok(MCD_CONST * total / path.pairs.len() as f64)
}

/// MCD scaled by the max/min length ratio.
pub fn mcd_sl(a: &CepstralSeq, b: &CepstralSeq) -> Result<f64> {
    let base = mcd(a, b)?;
    let (lo, hi) = if a.len() <= b.len() { (a.len(), b.len()) } else { (b.len(), a.len()) };
    Ok(base * hi as f64 / lo as f64)
}

pub fn edit_distance<T: PartialEq>(reference: &[T], hyp: &[T]) -> usize {
    let mut prev: Vec<usize> = (0..=hyp.len()).collect();
    let mut cur = vec![0; hyp.len() + 1];
    for (i, r) in reference.iter().enumerate() {
        cur[0] = i + 1;
        for (j, h) in hyp.iter().enumerate() {
            let sub = prev[j] + usize::from(r != h);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[hyp.len()]
}

/// Word error rate; can exceed 1 when the hypothesis has insertions.
pub fn wer<T: PartialEq>(reference: &[T], hyp: &[T]) -> Result<f64> {
    if reference.is_empty() {
        return Err(DubError::InvalidArgument("WER reference must be non-empty".into()));
    }
    Ok(edit_distance(reference, hyp) as f64 / reference.len() as f64)
}

/// Lower-cased whitespace tokens with punctuation removed.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split_whitespace()
        .map(|w| w.chars().filter(|c| c.is_alphanumeric()).flat_map(char::to_lowercase).collect::<String>())
        .filter(|w| !w.is_empty())
        .collect()
}

pub fn cosine_sim(u: &[f64], v: &[f64]) -> Result<f64> {
    if u.len() != v.len() || u.is_empty() {
        return Err(DubError::Shape(format!("vectors of length {} and {}", u.len(), v.len())));
    }
    let nu = u.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nv = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if nu == 0.0 || nv == 0.0 {
        return Err(DubError::InvalidArgument("cosine similarity of a zero vector".into()));
    }
    let c = u.iter().zip(v).map(|(a, b)| a * b).sum::<f64>() / (nu * nv);
    Ok(c.clamp(-1.0, 1.0))
}

/// Floor applied before log compression.
pub const LOG_FLOOR: f64 = 1e-10;

/// Log-compresses each frame then keeps orthonormal DCT-II coefficients
/// `1..=k`. When `k` equals the feature width the last kept coefficient
/// has no source and is zero.
pub fn cepstra_from_features(mel: &FeatureSeq, k: usize) -> Result<CepstralSeq> {
    let logged = mel.frames.mapv(|x| x.max(LOG_FLOOR).ln());
    cepstra_from_log_features(&logged, k)
}

/// Same as [`cepstra_from_features`] for features already in the log domain.
pub fn cepstra_from_log_features(frames: &Array2<f64>, k: usize) -> Result<CepstralSeq> {
    let d = frames.ncols();
    if k == 0 || k > d {
        return Err(DubError::InvalidArgument(format!("cepstral order {k} must be in 1..={d}")));
    }
    let dct = DctPlanner::new().plan_dct2(d);
    let s0 = (1.0 / d as f64).sqrt();
    let sk = (2.0 / d as f64).sqrt();
    let mut out = Array2::zeros((frames.nrows(), k));
    let mut buf = vec![0.0; d];
    for (f, row) in frames.rows().into_iter().enumerate() {
        buf.iter_mut().zip(row.iter()).for_each(|(b, x)| *b = *x);
        dct.process_dct2(&mut buf);
        for c in 1..=k {
            if c < d {
                out[[f, c - 1]] = buf[c] * if c == 0 { s0 } else { sk };
            }
        }
    }
    CepstralSeq::new(out)
}
