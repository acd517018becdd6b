//! Single-shot CMC evaluation, pair scoring, and saliency export.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::softmax_rows;
use crate::data::{to_input_tensor, Dataset, RawImage};
use crate::error::{Error, Result};
use crate::layers::ForwardCtx;
use crate::model::MuDeep;
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ScoreBackend {
    /// Softmax probability of the "same" class from the verification head.
    Verification,
    /// Negative euclidean distance between embeddings.
    Euclidean,
}

/// Similarity (higher = more likely the same identity) for each probe row
/// against each gallery row of precomputed embeddings.
pub fn score_matrix<S: Scalar>(
    model: &MuDeep<S>,
    probe: &Tensor<S>,
    gallery: &Tensor<S>,
    backend: ScoreBackend,
) -> Result<Vec<Vec<f64>>> {
    if probe.shape().len() != 2 || gallery.shape().len() != 2 {
        return Err(Error::Shape("embeddings must be [N, D]".into()));
    }
    let d = probe.shape()[1];
    if gallery.shape()[1] != d {
        return Err(Error::Shape(format!(
            "embedding width mismatch: probe {d} vs gallery {}",
            gallery.shape()[1]
        )));
    }
    let np = probe.shape()[0];
    let ng = gallery.shape()[0];
    let mut scores = vec![vec![0.0f64; ng]; np];
    match backend {
        ScoreBackend::Euclidean => {
            for (i, row) in scores.iter_mut().enumerate() {
                let p = &probe.data()[i * d..(i + 1) * d];
                for (j, s) in row.iter_mut().enumerate() {
                    let g = &gallery.data()[j * d..(j + 1) * d];
                    let dist2: f64 = p
                        .iter()
                        .zip(g)
                        .map(|(&a, &b)| {
                            let diff = a.to_f64() - b.to_f64();
                            diff * diff
                        })
                        .sum();
                    *s = -dist2.sqrt();
                }
            }
        }
        ScoreBackend::Verification => {
            // one probe row replicated against the whole gallery per call
            for (i, row) in scores.iter_mut().enumerate() {
                let p = &probe.data()[i * d..(i + 1) * d];
                let mut rep = Vec::with_capacity(ng * d);
                for _ in 0..ng {
                    rep.extend_from_slice(p);
                }
                let a = Tensor::from_vec(&[ng, d], rep)?;
                let logits = model.verify_from_embeddings(a, gallery.clone())?;
                let probs = softmax_rows(&logits);
                for (j, s) in row.iter_mut().enumerate() {
                    *s = probs.data()[j * 2 + crate::train::LABEL_SAME].to_f64();
                }
            }
        }
    }
    Ok(scores)
}

/// Rank of the matching gallery entry for each probe, given a score matrix
/// and the gallery identity of each column. Ties break toward the lower
/// gallery index (the scan order), so results are deterministic.
///
/// Returns per-rank cumulative match counts of length `gallery_ids` count.
pub fn cmc_from_scores(
    scores: &[Vec<f64>],
    probe_ids: &[usize],
    gallery_ids: &[usize],
) -> Result<Vec<f64>> {
    let ng = gallery_ids.len();
    if scores.len() != probe_ids.len() {
        return Err(Error::Shape("score rows != probe count".into()));
    }
    let mut hits = vec![0usize; ng];
    for (row, &pid) in scores.iter().zip(probe_ids) {
        if row.len() != ng {
            return Err(Error::Shape("score row width != gallery count".into()));
        }
        let mut order: Vec<usize> = (0..ng).collect();
        // stable descending sort; equal scores keep ascending index order
        order.sort_by(|&a, &b| row[b].partial_cmp(&row[a]).unwrap_or(std::cmp::Ordering::Equal));
        let rank = order
            .iter()
            .position(|&j| gallery_ids[j] == pid)
            .ok_or_else(|| {
                Error::Protocol(format!("identity {pid} absent from the gallery"))
            })?;
        hits[rank] += 1;
    }
    let n = probe_ids.len() as f64;
    let mut acc = 0usize;
    Ok(hits
        .iter()
        .map(|&h| {
            acc += h;
            acc as f64 / n
        })
        .collect())
}

/// Cumulative match characteristic under the single-shot protocol:
/// per trial, one random gallery image per identity is drawn from the
/// gallery camera and every probe-camera image is ranked against it.
/// Trials are averaged. The returned curve has one entry per identity.
pub struct CmcResult {
    pub curve: Vec<f64>,
    pub trials: usize,
    pub probes_per_trial: usize,
}

pub fn cmc_single_shot<S: Scalar>(
    model: &MuDeep<S>,
    data: &Dataset,
    mean: &[f64; 3],
    probe_cam: usize,
    gallery_cam: usize,
    trials: usize,
    backend: ScoreBackend,
    rng: &mut ChaCha8Rng,
) -> Result<CmcResult> {
    let ids = data.identities();
    if ids.len() < 2 {
        return Err(Error::Protocol("CMC needs at least 2 identities".into()));
    }
    // embed everything once
    let embeddings = embed_dataset(model, data, mean)?;
    let probe_idx: Vec<usize> = (0..data.records.len())
        .filter(|&i| data.records[i].camera == probe_cam)
        .collect();
    if probe_idx.is_empty() {
        return Err(Error::Protocol(format!("no probe images for camera {probe_cam}")));
    }
    for &id in &ids {
        let has_gallery = data
            .records
            .iter()
            .any(|r| r.identity == id && r.camera == gallery_cam);
        if !has_gallery {
            return Err(Error::Protocol(format!(
                "identity {id} has no image under gallery camera {gallery_cam}"
            )));
        }
    }
    let d = embeddings.shape()[1];
    let mut curve = vec![0.0f64; ids.len()];
    for _ in 0..trials {
        // one random gallery image per identity
        let mut gal_idx = Vec::with_capacity(ids.len());
        for &id in &ids {
            let candidates: Vec<usize> = (0..data.records.len())
                .filter(|&i| data.records[i].identity == id && data.records[i].camera == gallery_cam)
                .collect();
            gal_idx.push(candidates[rng.random_range(0..candidates.len())]);
        }
        let gallery = rows(&embeddings, &gal_idx, d);
        let probe = rows(&embeddings, &probe_idx, d);
        let scores = score_matrix(model, &probe, &gallery, backend)?;
        let probe_ids: Vec<usize> = probe_idx.iter().map(|&i| data.records[i].identity).collect();
        let gallery_ids: Vec<usize> = gal_idx.iter().map(|&i| data.records[i].identity).collect();
        let trial_curve = cmc_from_scores(&scores, &probe_ids, &gallery_ids)?;
        for (c, t) in curve.iter_mut().zip(&trial_curve) {
            *c += t;
        }
    }
    for c in &mut curve {
        *c /= trials as f64;
    }
    Ok(CmcResult {
        curve,
        trials,
        probes_per_trial: probe_idx.len(),
    })
}

/// Eval-mode embeddings for every dataset image, row i = record i.
pub fn embed_dataset<S: Scalar>(
    model: &MuDeep<S>,
    data: &Dataset,
    mean: &[f64; 3],
) -> Result<Tensor<S>> {
    let n = data.images.len();
    if n == 0 {
        return Err(Error::Data("dataset is empty".into()));
    }
    let mut out: Option<Tensor<S>> = None;
    // batched to bound memory; eval-mode BN means batching is free of
    // statistical coupling between rows
    const CHUNK: usize = 16;
    let mut start = 0;
    while start < n {
        let end = (start + CHUNK).min(n);
        let mut data_v = Vec::new();
        for img in &data.images[start..end] {
            data_v.extend(to_input_tensor::<S>(img, mean).into_data());
        }
        let per = data_v.len() / (end - start);
        let batch = Tensor::from_vec(
            &[end - start, 3, crate::model::INPUT_HEIGHT, crate::model::INPUT_WIDTH],
            data_v,
        )?;
        debug_assert_eq!(per, 3 * crate::model::INPUT_HEIGHT * crate::model::INPUT_WIDTH);
        let emb = model.embed_eval(batch)?;
        out = Some(match out {
            None => emb,
            Some(prev) => {
                let d = prev.shape()[1];
                let mut v = prev.into_data();
                v.extend(emb.into_data());
                Tensor::from_vec(&[end, d], v)?
            }
        });
        start = end;
    }
    Ok(out.expect("non-empty"))
}

fn rows<S: Scalar>(t: &Tensor<S>, idx: &[usize], d: usize) -> Tensor<S> {
    let mut v = Vec::with_capacity(idx.len() * d);
    for &i in idx {
        v.extend_from_slice(&t.data()[i * d..(i + 1) * d]);
    }
    Tensor::from_vec(&[idx.len(), d], v).expect("sized")
}

pub fn cmc_to_csv(curve: &[f64]) -> String {
    let mut out = String::from("rank,accuracy\n");
    for (i, v) in curve.iter().enumerate() {
        out.push_str(&format!("{},{:.6}\n", i + 1, v));
    }
    out
}

pub fn rank_at(curve: &[f64], rank: usize) -> f64 {
    curve.get(rank - 1).copied().or_else(|| curve.last().copied()).unwrap_or(0.0)
}

/// Top `m` channels per stream ranked by |alpha|.
pub const SALIENCY_TOP_CHANNELS: usize = 3;

/// Writes, for one input image: a min-max-normalized PGM per selected
/// stream channel, the same for the fused map's selected channels, and
/// `alpha.csv` holding the full fusion weight matrix.
pub fn export_saliency<S: Scalar>(
    model: &MuDeep<S>,
    img: &RawImage,
    mean: &[f64; 3],
    out_dir: &Path,
) -> Result<Vec<String>> {
    let alpha = model
        .alpha
        .as_ref()
        .ok_or_else(|| Error::Config("saliency export requires the learned fusion".into()))?;
    fs::create_dir_all(out_dir)
        .map_err(|e| Error::Data(format!("cannot create {}: {e}", out_dir.display())))?;
    let mut tape = crate::autodiff::Tape::new();
    let mut rng = crate::model::seed_rng(0);
    let mut ctx = ForwardCtx {
        train: false,
        rng: &mut rng,
    };
    let x = to_input_tensor::<S>(img, mean);
    let mut shape = vec![1usize];
    shape.extend_from_slice(x.shape());
    let x = tape.constant(x.reshaped(&shape)?);
    let feat = model.forward_features(&mut tape, x, &mut ctx)?;
    let a = alpha.borrow();
    let streams = a.value.shape()[0];
    let channels = a.value.shape()[1];
    let mut written = Vec::new();

    // alpha.csv: one row per stream
    let mut csv = String::new();
    for s in 0..streams {
        let row: Vec<String> = (0..channels)
            .map(|c| format!("{:.6}", a.value.data()[s * channels + c].to_f64()))
            .collect();
        csv.push_str(&row.join(","));
        csv.push('\n');
    }
    let alpha_path = out_dir.join("alpha.csv");
    fs::write(&alpha_path, csv)
        .map_err(|e| Error::Data(format!("cannot write alpha.csv: {e}")))?;
    written.push("alpha.csv".to_string());

    let mut dump = |name: String, map: &Tensor<S>, c: usize| -> Result<()> {
        let (h, w) = (map.shape()[2], map.shape()[3]);
        let plane = &map.data()[c * h * w..(c + 1) * h * w];
        let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
        for &v in plane {
            let v = v.to_f64();
            lo = lo.min(v);
            hi = hi.max(v);
        }
        let span = if hi > lo { hi - lo } else { 1.0 };
        let mut bytes = format!("P5\n{w} {h}\n255\n").into_bytes();
        for &v in plane {
            bytes.push((((v.to_f64() - lo) / span) * 255.0).round() as u8);
        }
        fs::write(out_dir.join(&name), bytes)
            .map_err(|e| Error::Data(format!("cannot write {name}: {e}")))?;
        written.push(name);
        Ok(())
    };

    for s in 0..streams {
        let mut order: Vec<usize> = (0..channels).collect();
        order.sort_by(|&i, &j| {
            let ai = a.value.data()[s * channels + i].to_f64().abs();
            let aj = a.value.data()[s * channels + j].to_f64().abs();
            aj.partial_cmp(&ai).unwrap_or(std::cmp::Ordering::Equal)
        });
        let map = tape.value(feat.streams[s]).clone();
        for &c in order.iter().take(SALIENCY_TOP_CHANNELS.min(channels)) {
            dump(format!("stream{}_ch{:03}.pgm", s + 1, c), &map, c)?;
        }
    }
    let fused = tape.value(feat.fused).clone();
    for c in 0..SALIENCY_TOP_CHANNELS.min(channels) {
        dump(format!("fused_ch{c:03}.pgm"), &fused, c)?;
    }
    Ok(written)
}

/// Shuffle helper shared by tests wanting a fixed permutation API.
pub fn shuffled_indices(n: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    idx
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    /// Brute-force oracle: directly counts, per probe, how many gallery
    /// scores strictly beat the match (ties broken by lower index).
    fn cmc_oracle(scores: &[Vec<f64>], probe_ids: &[usize], gallery_ids: &[usize]) -> Vec<f64> {
        let ng = gallery_ids.len();
        let mut hits = vec![0usize; ng];
        for (row, &pid) in scores.iter().zip(probe_ids) {
            let j = gallery_ids.iter().position(|&g| g == pid).unwrap();
            let mut rank = 0usize;
            for (k, &s) in row.iter().enumerate() {
                if k == j {
                    continue;
                }
                if s > row[j] || (s == row[j] && k < j) {
                    rank += 1;
                }
            }
            hits[rank] += 1;
        }
        let n = probe_ids.len() as f64;
        let mut acc = 0usize;
        hits.iter()
            .map(|&h| {
                acc += h;
                acc as f64 / n
            })
            .collect()
    }

    #[test]
    fn cmc_matches_bruteforce_on_random_matrices() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..100 {
            let n = 20usize;
            let scores: Vec<Vec<f64>> = (0..n)
                .map(|_| (0..n).map(|_| rng.random_range(-1.0..1.0)).collect())
                .collect();
            let ids: Vec<usize> = (0..n).collect();
            let got = cmc_from_scores(&scores, &ids, &ids).unwrap();
            let want = cmc_oracle(&scores, &ids, &ids);
            for (g, w) in got.iter().zip(&want) {
                assert!((g - w).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn cmc_handles_ties_deterministically() {
        // all-equal scores: rank = position of the match in scan order
        let scores = vec![vec![0.5; 4]; 2];
        let probe_ids = vec![0usize, 3];
        let gallery_ids = vec![0usize, 1, 2, 3];
        let curve = cmc_from_scores(&scores, &probe_ids, &gallery_ids).unwrap();
        // probe 0 matches gallery index 0 -> rank 1; probe 3 -> rank 4
        assert_eq!(curve, vec![0.5, 0.5, 0.5, 1.0]);
    }

    #[test]
    fn cmc_random_scores_rank1_near_uniform() {
        // 26 identities, random scores: rank-1 expectation 1/26
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let n = 26usize;
        let trials = 1000usize;
        let mut sum = 0.0f64;
        for _ in 0..trials {
            let scores: Vec<Vec<f64>> = (0..n)
                .map(|_| (0..n).map(|_| rng.random_range(0.0..1.0)).collect())
                .collect();
            let ids: Vec<usize> = (0..n).collect();
            let curve = cmc_from_scores(&scores, &ids, &ids).unwrap();
            sum += curve[0];
        }
        let mean = sum / trials as f64;
        let p = 1.0 / n as f64;
        // std of the mean of n*trials Bernoulli(p) draws
        let sigma = (p * (1.0 - p) / (n * trials) as f64).sqrt();
        assert!(
            (mean - p).abs() < 3.0 * sigma,
            "mean {mean} vs {p} (sigma {sigma})"
        );
    }

    #[test]
    fn cmc_missing_identity_is_protocol_error() {
        let scores = vec![vec![1.0, 0.0]];
        let err = cmc_from_scores(&scores, &[9], &[0, 1]).unwrap_err();
        assert!(err.to_string().contains("identity 9"));
    }

    #[test]
    fn cmc_curve_is_monotone_and_ends_at_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n = 15usize;
        let scores: Vec<Vec<f64>> = (0..n)
            .map(|_| (0..n).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect();
        let ids: Vec<usize> = (0..n).collect();
        let curve = cmc_from_scores(&scores, &ids, &ids).unwrap();
        for w in curve.windows(2) {
            assert!(w[1] >= w[0]);
        }
        assert!((curve[n - 1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn cmc_csv_format() {
        let csv = cmc_to_csv(&[0.5, 1.0]);
        assert_eq!(csv, "rank,accuracy\n1,0.500000\n2,1.000000\n");
    }
}
