//! Distance matrices and CMC/mAP retrieval evaluation.
//!
//! Per query, gallery entries sharing both its pid and its camid are
//! dropped; entries with a different pid from the same camera are kept.

use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::train::Features;

pub const CAMERA_RULE: &str = "exclude same pid and same camid";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Metric {
    Euclidean,
    /// 1 − cosine similarity.
    Cosine,
}

impl Metric {
    pub fn as_str(&self) -> &'static str {
        match self {
            Metric::Euclidean => "euclidean",
            Metric::Cosine => "cosine",
        }
    }
}

impl FromStr for Metric {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "euclidean" => Ok(Metric::Euclidean),
            "cosine" => Ok(Metric::Cosine),
            _ => Err(Error::invalid(format!("unknown metric '{}' (euclidean|cosine)", s))),
        }
    }
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Row-major (rows × cols) distances.
#[derive(Debug, Clone, PartialEq)]
pub struct DistMat {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl DistMat {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::shape(
                "distmat",
                format!("{} entries", rows * cols),
                data.len().to_string(),
            ));
        }
        Ok(DistMat { rows, cols, data })
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }
}

/// Query-to-gallery distances, computed in double precision.
pub fn distance_matrix(query: &Features, gallery: &Features, metric: Metric) -> Result<DistMat> {
    if query.dim() != gallery.dim() {
        return Err(Error::shape(
            "distance_matrix",
            format!("gallery dimension {}", query.dim()),
            gallery.dim().to_string(),
        ));
    }
    let (nq, ng) = (query.len(), gallery.len());
    let norms = |f: &Features| -> Vec<f64> {
        (0..f.len())
            .map(|i| f.row(i).iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>().sqrt())
            .collect()
    };
    let (qn, gn) = (norms(query), norms(gallery));
    let mut data = vec![0.0; nq * ng];
    data.par_chunks_mut(ng.max(1)).enumerate().for_each(|(i, row)| {
        let q = query.row(i);
        for (j, d) in row.iter_mut().enumerate() {
            let g = gallery.row(j);
            *d = match metric {
                Metric::Euclidean => q
                    .iter()
                    .zip(g)
                    .map(|(&a, &b)| {
                        let t = a as f64 - b as f64;
                        t * t
                    })
                    .sum::<f64>()
                    .sqrt(),
                Metric::Cosine => {
                    let dot: f64 = q.iter().zip(g).map(|(&a, &b)| a as f64 * b as f64).sum();
                    let denom = qn[i] * gn[j];
                    if denom > 0.0 {
                        1.0 - dot / denom
                    } else {
                        1.0
                    }
                }
            };
        }
    });
    DistMat::new(nq, ng, data)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Protocol {
    pub metric: String,
    pub camera_rule: String,
    pub num_query: usize,
    pub num_gallery: usize,
    /// Queries with at least one valid gallery match.
    pub valid_queries: usize,
    pub skipped_queries: usize,
    /// Number of evaluations averaged into this result.
    pub splits: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalResult {
    /// cmc[k] is the rank-(k+1) accuracy.
    pub cmc: Vec<f64>,
    pub map: f64,
    pub protocol: Protocol,
}

impl EvalResult {
    pub fn rank(&self, k: usize) -> f64 {
        self.cmc.get(k.saturating_sub(1)).copied().unwrap_or(f64::NAN)
    }

    pub fn summary_line(&self) -> String {
        format!("Rank-1 {:.3} mAP {:.3}", self.rank(1), self.map)
    }

    /// Human-readable header followed by `key=value` lines.
    pub fn to_report(&self) -> String {
        let p = &self.protocol;
        let mut s = format!("{}\n", self.summary_line());
        s.push_str(&format!("metric={}\n", p.metric));
        s.push_str(&format!("camera_rule={}\n", p.camera_rule));
        s.push_str(&format!("num_query={}\n", p.num_query));
        s.push_str(&format!("num_gallery={}\n", p.num_gallery));
        s.push_str(&format!("valid_queries={}\n", p.valid_queries));
        s.push_str(&format!("skipped_queries={}\n", p.skipped_queries));
        s.push_str(&format!("splits={}\n", p.splits));
        s.push_str(&format!("map={:.6}\n", self.map));
        for (k, v) in self.cmc.iter().enumerate() {
            s.push_str(&format!("cmc.{}={:.6}\n", k + 1, v));
        }
        s
    }
}

/// Identity and camera labels of one side of the evaluation.
#[derive(Debug, Clone, Copy)]
pub struct Labels<'a> {
    pub pids: &'a [usize],
    pub camids: &'a [usize],
}

impl<'a> Labels<'a> {
    pub fn of(f: &'a Features) -> Self {
        Labels {
            pids: &f.pids,
            camids: &f.camids,
        }
    }
}

/// CMC and mAP over the camera-filtered rankings. Ties rank by gallery
/// index. Queries without a valid match are skipped and counted.
pub fn evaluate(distmat: &DistMat, query: Labels<'_>, gallery: Labels<'_>, max_rank: usize) -> Result<EvalResult> {
    let (nq, ng) = (distmat.rows, distmat.cols);
    if query.pids.len() != nq || query.camids.len() != nq {
        return Err(Error::shape("evaluate", format!("{} query labels", nq), query.pids.len().to_string()));
    }
    if gallery.pids.len() != ng || gallery.camids.len() != ng {
        return Err(Error::shape("evaluate", format!("{} gallery labels", ng), gallery.pids.len().to_string()));
    }
    if max_rank == 0 {
        return Err(Error::invalid("max_rank must be at least 1"));
    }
    if let Some(i) = distmat.data.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("distmat entry ({}, {})", i / ng.max(1), i % ng.max(1))));
    }
    let mut cmc = vec![0.0f64; max_rank];
    let (mut ap_sum, mut valid) = (0.0, 0usize);
    let mut order: Vec<usize> = Vec::with_capacity(ng);
    for qi in 0..nq {
        let row = distmat.row(qi);
        order.clear();
        order.extend(0..ng);
        order.sort_by(|&a, &b| row[a].total_cmp(&row[b]));
        let (qp, qc) = (query.pids[qi], query.camids[qi]);
        let mut first: Option<usize> = None;
        let (mut hits, mut prec_sum, mut pos) = (0usize, 0.0f64, 0usize);
        for &gi in &order {
            let (gp, gc) = (gallery.pids[gi], gallery.camids[gi]);
            if gp == qp && gc == qc {
                continue;
            }
            pos += 1;
            if gp == qp {
                hits += 1;
                first.get_or_insert(pos - 1);
                prec_sum += hits as f64 / pos as f64;
            }
        }
        let Some(first) = first else { continue };
        valid += 1;
        ap_sum += prec_sum / hits as f64;
        for c in cmc.iter_mut().skip(first) {
            *c += 1.0;
        }
    }
    if valid == 0 {
        return Err(Error::invalid(
            "no query has a valid gallery match under the camera filter",
        ));
    }
    for c in &mut cmc {
        *c /= valid as f64;
    }
    Ok(EvalResult {
        cmc,
        map: ap_sum / valid as f64,
        protocol: Protocol {
            metric: "precomputed".to_string(),
            camera_rule: CAMERA_RULE.to_string(),
            num_query: nq,
            num_gallery: ng,
            valid_queries: valid,
            skipped_queries: nq - valid,
            splits: 1,
        },
    })
}

/// Distance matrix plus evaluation, with the metric recorded.
pub fn evaluate_features(query: &Features, gallery: &Features, metric: Metric, max_rank: usize) -> Result<EvalResult> {
    let d = distance_matrix(query, gallery, metric)?;
    let mut r = evaluate(&d, Labels::of(query), Labels::of(gallery), max_rank)?;
    r.protocol.metric = metric.to_string();
    Ok(r)
}

/// Mean CMC and mAP over several evaluations (e.g. random splits).
pub fn average_results(results: &[EvalResult]) -> Result<EvalResult> {
    let first = results.first().ok_or_else(|| Error::invalid("no results to average"))?;
    let len = first.cmc.len();
    if results.iter().any(|r| r.cmc.len() != len) {
        return Err(Error::invalid("results have different max_rank"));
    }
    let n = results.len() as f64;
    let mut cmc = vec![0.0; len];
    for r in results {
        for (c, v) in cmc.iter_mut().zip(&r.cmc) {
            *c += v;
        }
    }
    cmc.iter_mut().for_each(|c| *c /= n);
    let mut protocol = first.protocol.clone();
    for r in &results[1..] {
        protocol.num_query += r.protocol.num_query;
        protocol.num_gallery += r.protocol.num_gallery;
        protocol.valid_queries += r.protocol.valid_queries;
        protocol.skipped_queries += r.protocol.skipped_queries;
    }
    protocol.splits = results.iter().map(|r| r.protocol.splits).sum();
    Ok(EvalResult {
        cmc,
        map: results.iter().map(|r| r.map).sum::<f64>() / n,
        protocol,
    })
}
