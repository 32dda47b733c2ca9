//! Evaluation pipeline: closed-form IoU, greedy detection/ground-truth
//! matching, instance feature success (IFS) rate with a pluggable crop
//! verifier, average precision at IoU 0.5, and Fréchet distance between
//! feature statistics from a fixed seeded extractor. The toy detector that
//! feeds the pipeline finds connected palette-colored regions and labels them
//! with the same description template the dataset uses.

use image::RgbImage;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::{article, classify_pixel, PaletteColor, PixelClass};
use crate::layout::{BBox, LayoutSpec};
use crate::nn::param_seed;
use crate::{Error, Result};

/// IoU threshold for a successful localization.
pub const IOU_THR: f64 = 0.5;
/// Components smaller than this many pixels are treated as noise.
pub const MIN_COMPONENT_PX: usize = 9;
/// Dimension of the toy feature extractor's output.
pub const FEATURE_DIM: usize = 16;

/// Intersection over union of two boxes, by rectangle arithmetic.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    if a == b {
        return 1.0;
    }
    let ix = (a.x1().min(b.x1()) - a.x.max(b.x)).max(0.0);
    let iy = (a.y1().min(b.y1()) - a.y.max(b.y)).max(0.0);
    let inter = ix * iy;
    let union = a.area() + b.area() - inter;
    inter / union
}

/// One detector output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub bbox: BBox,
    /// Region color purity in [0, 1]; doubles as the ranking score.
    pub score: f64,
    /// Template-form description of what the region looks like.
    pub label: String,
}

/// Toy stand-in for a grounded detector: connected components of
/// palette-colored pixels become detections with tight boxes, template
/// labels, and purity scores.
pub fn detect(image: &RgbImage) -> Vec<Detection> {
    let (h, w) = (image.height() as usize, image.width() as usize);
    let fg: Vec<Option<PaletteColor>> = (0..h * w)
        .map(|at| {
            let (r, c) = (at / w, at % w);
            match classify_pixel(image.get_pixel(c as u32, r as u32).0) {
                PixelClass::Color(col) => Some(col),
                PixelClass::Bg(_) => None,
            }
        })
        .collect();
    let mut seen = vec![false; h * w];
    let mut detections = Vec::new();
    for start in 0..h * w {
        if seen[start] || fg[start].is_none() {
            continue;
        }
        // flood-fill one 4-connected component of foreground pixels
        let mut stack = vec![start];
        seen[start] = true;
        let mut component = Vec::new();
        while let Some(at) = stack.pop() {
            component.push(at);
            let (r, c) = (at / w, at % w);
            let mut push = |nr: usize, nc: usize| {
                let nat = nr * w + nc;
                if !seen[nat] && fg[nat].is_some() {
                    seen[nat] = true;
                    stack.push(nat);
                }
            };
            if r > 0 {
                push(r - 1, c);
            }
            if r + 1 < h {
                push(r + 1, c);
            }
            if c > 0 {
                push(r, c - 1);
            }
            if c + 1 < w {
                push(r, c + 1);
            }
        }
        if component.len() < MIN_COMPONENT_PX {
            continue;
        }
        if let Some(det) = analyze_component(&component, &fg, h, w) {
            detections.push(det);
        }
    }
    detections
}

/// Turn one pixel component into a labeled detection.
fn analyze_component(
    component: &[usize],
    fg: &[Option<PaletteColor>],
    h: usize,
    w: usize,
) -> Option<Detection> {
    let (mut r0, mut r1, mut c0, mut c1) = (h, 0usize, w, 0usize);
    let mut counts: Vec<(PaletteColor, usize)> = Vec::new();
    for &at in component {
        let (r, c) = (at / w, at % w);
        r0 = r0.min(r);
        r1 = r1.max(r);
        c0 = c0.min(c);
        c1 = c1.max(c);
        let col = fg[at].expect("component pixels are foreground");
        match counts.iter_mut().find(|(k, _)| *k == col) {
            Some((_, n)) => *n += 1,
            None => counts.push((col, 1)),
        }
    }
    counts.sort_by(|a, b| b.1.cmp(&a.1));
    let total = component.len() as f64;
    let (top, top_n) = counts[0];
    let second = counts.get(1).copied();

    let bbox = BBox::new(
        c0 as f64 / w as f64,
        r0 as f64 / h as f64,
        (c1 + 1 - c0) as f64 / w as f64,
        (r1 + 1 - r0) as f64 / h as f64,
    )
    .ok()?;

    // striped if a second color carries real mass and row dominance alternates
    if let Some((sec, sec_n)) = second {
        let m2 = sec_n as f64 / total;
        if m2 >= crate::data::STRIPE_MASS
            && component_alternations(component, fg, w, top, sec) >= crate::data::MIN_ALTERNATIONS
        {
            // the top band names the primary color
            let top_row_color = component
                .iter()
                .filter(|&&at| at / w == r0)
                .filter_map(|&at| fg[at])
                .find(|c| *c == top || *c == sec)
                .unwrap_or(top);
            let (primary, secondary) = if top_row_color == top { (top, sec) } else { (sec, top) };
            let score = (top_n + sec_n) as f64 / total;
            return Some(Detection {
                bbox,
                score,
                label: format!(
                    "{} {} and {} striped square",
                    article(primary.name()),
                    primary.name(),
                    secondary.name()
                ),
            });
        }
    }

    // solid: corners of the tight box separate squares from circles
    let crop_h = r1 - r0 + 1;
    let crop_w = c1 - c0 + 1;
    let side = ((0.2 * crop_h.min(crop_w) as f64).floor() as usize).max(1);
    let in_component = |r: usize, c: usize| component.contains(&(r * w + c));
    let mut corner_total = 0usize;
    let mut corner_hit = 0usize;
    for (cr, cc) in [
        (r0, c0),
        (r0, c1 + 1 - side),
        (r1 + 1 - side, c0),
        (r1 + 1 - side, c1 + 1 - side),
    ] {
        for r in cr..cr + side {
            for c in cc..cc + side {
                corner_total += 1;
                if in_component(r, c) {
                    corner_hit += 1;
                }
            }
        }
    }
    let occupancy = corner_hit as f64 / corner_total as f64;
    let shape = if occupancy >= crate::data::CORNER_THRESHOLD {
        "square"
    } else {
        "circle"
    };
    Some(Detection {
        bbox,
        score: top_n as f64 / total,
        label: format!("{} {} {shape}", article(top.name()), top.name()),
    })
}

/// Row-dominance alternations between two colors inside a component.
fn component_alternations(
    component: &[usize],
    fg: &[Option<PaletteColor>],
    w: usize,
    c1: PaletteColor,
    c2: PaletteColor,
) -> usize {
    let mut rows: Vec<(usize, usize, usize)> = Vec::new(); // (row, n1, n2)
    for &at in component {
        let r = at / w;
        let col = fg[at].expect("foreground");
        let entry = match rows.iter_mut().find(|(row, _, _)| *row == r) {
            Some(e) => e,
            None => {
                rows.push((r, 0, 0));
                rows.last_mut().unwrap()
            }
        };
        if col == c1 {
            entry.1 += 1;
        } else if col == c2 {
            entry.2 += 1;
        }
    }
    rows.sort_by_key(|(r, _, _)| *r);
    let mut last: Option<bool> = None; // true = c1 dominant
    let mut flips = 0;
    for (_, n1, n2) in rows {
        if n1 == 0 && n2 == 0 {
            continue;
        }
        let dom = n1 >= n2;
        if let Some(prev) = last {
            if prev != dom {
                flips += 1;
            }
        }
        last = Some(dom);
    }
    flips
}

/// One ground-truth instance matched (or not) to a detection.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GtMatch {
    pub det: usize,
    pub iou: f64,
}

/// Greedy one-to-one matching result.
#[derive(Debug, Clone, PartialEq)]
pub struct MatchResult {
    /// Per ground-truth instance: its matched detection, if any.
    pub per_gt: Vec<Option<GtMatch>>,
    /// Per detection: the ground-truth index it claimed, if any.
    pub det_matched_gt: Vec<Option<usize>>,
}

/// Match detections to ground truth: walk detections in descending score and
/// give each its highest-IoU unassigned GT when that IoU clears `thr`.
/// Ties break toward the lower GT index; each detection and GT is used once.
pub fn match_detections(dets: &[Detection], gts: &[BBox], thr: f64) -> MatchResult {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].score.total_cmp(&dets[a].score).then(a.cmp(&b)));
    let mut per_gt: Vec<Option<GtMatch>> = vec![None; gts.len()];
    let mut det_matched_gt: Vec<Option<usize>> = vec![None; dets.len()];
    for &di in &order {
        let mut best: Option<(usize, f64)> = None;
        for (gi, gt) in gts.iter().enumerate() {
            if per_gt[gi].is_some() {
                continue;
            }
            let o = iou(&dets[di].bbox, gt);
            if best.map_or(true, |(_, bo)| o > bo) {
                best = Some((gi, o));
            }
        }
        if let Some((gi, o)) = best {
            if o >= thr {
                per_gt[gi] = Some(GtMatch { det: di, iou: o });
                det_matched_gt[di] = Some(gi);
            }
        }
    }
    MatchResult {
        per_gt,
        det_matched_gt,
    }
}

/// Crop checker interface; implementations decide whether the content inside
/// a box matches a description.
pub trait Verifier {
    fn verify(&self, image: &RgbImage, bbox: &BBox, desc: &str) -> Result<bool>;
}

/// The shipped template verifier from the synthetic-data module.
pub struct TemplateVerifier;

impl Verifier for TemplateVerifier {
    fn verify(&self, image: &RgbImage, bbox: &BBox, desc: &str) -> Result<bool> {
        crate::data::verify(image, bbox, desc)
    }
}

/// Mock verifier with a fixed verdict.
pub struct ConstVerifier(pub bool);

impl Verifier for ConstVerifier {
    fn verify(&self, _image: &RgbImage, _bbox: &BBox, _desc: &str) -> Result<bool> {
        Ok(self.0)
    }
}

/// One image to evaluate: the generated (or reference) pixels plus the layout
/// it was asked to satisfy.
#[derive(Debug, Clone)]
pub struct EvalSample {
    pub image: RgbImage,
    pub layout: LayoutSpec,
}

/// Outcome for one ground-truth instance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceRecord {
    pub sample: usize,
    pub gt_index: usize,
    pub desc: String,
    pub matched: bool,
    pub iou: f64,
    /// Verifier verdict on the matched crop; absent when unmatched or when
    /// the verifier itself failed.
    pub verified: Option<bool>,
    pub success: bool,
    /// Diagnostic note, e.g. a verifier error message.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

fn sample_records(
    sample_index: usize,
    sample: &EvalSample,
    verifier: &dyn Verifier,
) -> (Vec<InstanceRecord>, Vec<Detection>, Vec<BBox>) {
    let dets = detect(&sample.image);
    let gt_boxes: Vec<BBox> = sample.layout.instances.iter().map(|i| i.bbox).collect();
    let matches = match_detections(&dets, &gt_boxes, IOU_THR);
    let mut records = Vec::with_capacity(gt_boxes.len());
    for (gi, inst) in sample.layout.instances.iter().enumerate() {
        let rec = match matches.per_gt[gi] {
            None => InstanceRecord {
                sample: sample_index,
                gt_index: gi,
                desc: inst.desc.clone(),
                matched: false,
                iou: 0.0,
                verified: None,
                success: false,
                note: None,
            },
            Some(m) => {
                // verify the content of the matched detection's crop
                let (verified, note) =
                    match verifier.verify(&sample.image, &dets[m.det].bbox, &inst.desc) {
                        Ok(v) => (Some(v), None),
                        Err(e) => (None, Some(format!("verifier failed: {e}"))),
                    };
                InstanceRecord {
                    sample: sample_index,
                    gt_index: gi,
                    desc: inst.desc.clone(),
                    matched: true,
                    iou: m.iou,
                    verified,
                    success: verified == Some(true),
                    note,
                }
            }
        };
        records.push(rec);
    }
    (records, dets, gt_boxes)
}

/// Fraction of ground-truth instances that are both localized (IoU >= 0.5)
/// and content-verified.
pub fn ifs_rate(samples: &[EvalSample], verifier: &dyn Verifier) -> Result<f64> {
    let mut total = 0usize;
    let mut success = 0usize;
    for (si, s) in samples.iter().enumerate() {
        let (records, _, _) = sample_records(si, s, verifier);
        total += records.len();
        success += records.iter().filter(|r| r.success).count();
    }
    if total == 0 {
        return Err(Error::Usage(
            "IFS rate undefined: no ground-truth instances".into(),
        ));
    }
    Ok(success as f64 / total as f64)
}

/// Average precision over several images' detections at one IoU threshold,
/// by all-point interpolation of the precision-recall curve.
pub fn average_precision_grouped(
    groups: &[(&[Detection], &[BBox])],
    thr: f64,
) -> Result<f64> {
    let n_gt: usize = groups.iter().map(|(_, g)| g.len()).sum();
    if n_gt == 0 {
        return Err(Error::Usage(
            "average precision undefined without ground truth".into(),
        ));
    }
    // (score, is_tp, group, det) — matching is per group
    let mut scored: Vec<(f64, bool, usize, usize)> = Vec::new();
    for (gi, (dets, gts)) in groups.iter().enumerate() {
        let m = match_detections(dets, gts, thr);
        for (di, det) in dets.iter().enumerate() {
            scored.push((det.score, m.det_matched_gt[di].is_some(), gi, di));
        }
    }
    scored.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.2.cmp(&b.2)).then(a.3.cmp(&b.3)));
    let mut precisions = Vec::with_capacity(scored.len());
    let mut recalls = Vec::with_capacity(scored.len());
    let mut tp = 0usize;
    for (k, (_, is_tp, _, _)) in scored.iter().enumerate() {
        if *is_tp {
            tp += 1;
        }
        precisions.push(tp as f64 / (k + 1) as f64);
        recalls.push(tp as f64 / n_gt as f64);
    }
    // precision envelope from the right, integrated over recall increments
    let mut envelope = precisions.clone();
    for k in (0..envelope.len().saturating_sub(1)).rev() {
        envelope[k] = envelope[k].max(envelope[k + 1]);
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for k in 0..envelope.len() {
        ap += (recalls[k] - prev_recall) * envelope[k];
        prev_recall = recalls[k];
    }
    Ok(ap)
}

/// Single-image convenience form of `average_precision_grouped`.
pub fn average_precision(dets: &[Detection], gts: &[BBox], thr: f64) -> Result<f64> {
    average_precision_grouped(&[(dets, gts)], thr)
}

/// Cyclic Jacobi eigendecomposition of a symmetric matrix (row-major `d x d`).
/// Returns eigenvalues and the orthogonal matrix of eigenvectors (columns).
fn jacobi_eigen(a: &[f64], d: usize) -> Result<(Vec<f64>, Vec<f64>)> {
    let mut m = a.to_vec();
    let mut v = vec![0.0; d * d];
    for i in 0..d {
        v[i * d + i] = 1.0;
    }
    let scale: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-300);
    for _sweep in 0..100 {
        let off: f64 = (0..d)
            .flat_map(|p| ((p + 1)..d).map(move |q| (p, q)))
            .map(|(p, q)| m[p * d + q] * m[p * d + q])
            .sum::<f64>()
            .sqrt();
        if off < 1e-14 * scale {
            let eig = (0..d).map(|i| m[i * d + i]).collect();
            return Ok((eig, v));
        }
        for p in 0..d {
            for q in (p + 1)..d {
                let apq = m[p * d + q];
                if apq.abs() < 1e-300 {
                    continue;
                }
                let theta = (m[q * d + q] - m[p * d + p]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                let (app, aqq) = (m[p * d + p], m[q * d + q]);
                m[p * d + p] = app - t * apq;
                m[q * d + q] = aqq + t * apq;
                m[p * d + q] = 0.0;
                m[q * d + p] = 0.0;
                for k in 0..d {
                    if k != p && k != q {
                        let akp = m[k * d + p];
                        let akq = m[k * d + q];
                        m[k * d + p] = c * akp - s * akq;
                        m[p * d + k] = m[k * d + p];
                        m[k * d + q] = s * akp + c * akq;
                        m[q * d + k] = m[k * d + q];
                    }
                }
                for k in 0..d {
                    let vkp = v[k * d + p];
                    let vkq = v[k * d + q];
                    v[k * d + p] = c * vkp - s * vkq;
                    v[k * d + q] = s * vkp + c * vkq;
                }
            }
        }
    }
    Err(Error::Numeric(
        "Jacobi eigendecomposition did not converge in 100 sweeps".into(),
    ))
}

fn matmul_sq(a: &[f64], b: &[f64], d: usize) -> Vec<f64> {
    let mut out = vec![0.0; d * d];
    for i in 0..d {
        for k in 0..d {
            let aik = a[i * d + k];
            if aik == 0.0 {
                continue;
            }
            for j in 0..d {
                out[i * d + j] += aik * b[k * d + j];
            }
        }
    }
    out
}

fn check_symmetric(cov: &[f64], d: usize, what: &str) -> Result<Vec<f64>> {
    if cov.len() != d * d {
        return Err(Error::Shape(format!(
            "{what}: {} entries, expected {}",
            cov.len(),
            d * d
        )));
    }
    let mut sym = cov.to_vec();
    for i in 0..d {
        for j in 0..d {
            let diff = (cov[i * d + j] - cov[j * d + i]).abs();
            if diff > 1e-9 {
                return Err(Error::Numeric(format!(
                    "{what} is asymmetric at ({i},{j}) by {diff:e}"
                )));
            }
            sym[i * d + j] = (cov[i * d + j] + cov[j * d + i]) / 2.0;
        }
    }
    Ok(sym)
}

/// Symmetric PSD square root via eigendecomposition; eigenvalues below
/// -1e-8 are a numeric error, small negatives clip to zero.
fn psd_sqrt(cov: &[f64], d: usize, what: &str) -> Result<Vec<f64>> {
    let (eig, v) = jacobi_eigen(cov, d)?;
    let mut root = vec![0.0; d * d];
    for (idx, &lam) in eig.iter().enumerate() {
        if lam < -1e-8 {
            return Err(Error::Numeric(format!(
                "{what} has negative eigenvalue {lam:e}"
            )));
        }
        let s = lam.max(0.0).sqrt();
        // accumulate s * v_col * v_col^T
        for i in 0..d {
            let vi = v[i * d + idx];
            if vi == 0.0 {
                continue;
            }
            for j in 0..d {
                root[i * d + j] += s * vi * v[j * d + idx];
            }
        }
    }
    Ok(root)
}

/// Fréchet distance between two Gaussians:
/// `||mu1 - mu2||^2 + tr(S1 + S2 - 2 (S1 S2)^(1/2))`, with the matrix square
/// root taken through `A S2 A` for `A = sqrt(S1)` so every eigenproblem stays
/// symmetric.
pub fn frechet_distance(mu1: &[f64], cov1: &[f64], mu2: &[f64], cov2: &[f64]) -> Result<f64> {
    let d = mu1.len();
    if mu2.len() != d {
        return Err(Error::Shape(format!(
            "mean dimensions differ: {d} vs {}",
            mu2.len()
        )));
    }
    let s1 = check_symmetric(cov1, d, "cov1")?;
    let s2 = check_symmetric(cov2, d, "cov2")?;
    let a = psd_sqrt(&s1, d, "cov1")?;
    // M = A S2 A is PSD with the same spectrum as (S1 S2)
    let m = matmul_sq(&matmul_sq(&a, &s2, d), &a, d);
    let m = check_symmetric(&m, d, "sqrt product")?;
    let (eig_m, _) = jacobi_eigen(&m, d)?;
    let mut tr_sqrt = 0.0;
    for lam in eig_m {
        if lam < -1e-8 {
            return Err(Error::Numeric(format!(
                "covariance product has negative eigenvalue {lam:e}"
            )));
        }
        tr_sqrt += lam.max(0.0).sqrt();
    }
    let dmu: f64 = mu1.iter().zip(mu2).map(|(a, b)| (a - b) * (a - b)).sum();
    let tr1: f64 = (0..d).map(|i| s1[i * d + i]).sum();
    let tr2: f64 = (0..d).map(|i| s2[i * d + i]).sum();
    Ok((dmu + tr1 + tr2 - 2.0 * tr_sqrt).max(0.0))
}

/// Fixed random features: 8x8 average pooling over RGB, then a seeded linear
/// projection to `FEATURE_DIM`. A stand-in for a pretrained feature network.
pub struct FeatureExtractor {
    /// `[FEATURE_DIM, 192]`
    proj: Vec<f64>,
}

impl FeatureExtractor {
    pub fn new(seed: u64) -> FeatureExtractor {
        let n_in = 8 * 8 * 3;
        let mut rng = ChaCha8Rng::seed_from_u64(param_seed(seed, "eval/feature_proj"));
        let std = 1.0 / (n_in as f64).sqrt();
        let proj = (0..FEATURE_DIM * n_in)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut rng);
                z * std
            })
            .collect();
        FeatureExtractor { proj }
    }

    /// Feature vector of one image (dimensions must divide into an 8x8 grid).
    pub fn features(&self, image: &RgbImage) -> Result<Vec<f64>> {
        let (h, w) = (image.height() as usize, image.width() as usize);
        if h % 8 != 0 || w % 8 != 0 || h == 0 || w == 0 {
            return Err(Error::Shape(format!(
                "feature extractor wants 8x8-poolable images, got {h}x{w}"
            )));
        }
        let (ph, pw) = (h / 8, w / 8);
        let mut pooled = vec![0.0; 8 * 8 * 3];
        for gr in 0..8 {
            for gc in 0..8 {
                let mut acc = [0.0f64; 3];
                for r in gr * ph..(gr + 1) * ph {
                    for c in gc * pw..(gc + 1) * pw {
                        let p = image.get_pixel(c as u32, r as u32).0;
                        for ch in 0..3 {
                            acc[ch] += p[ch] as f64 / 255.0;
                        }
                    }
                }
                for ch in 0..3 {
                    pooled[(gr * 8 + gc) * 3 + ch] = 2.0 * acc[ch] / (ph * pw) as f64 - 1.0;
                }
            }
        }
        let n_in = pooled.len();
        Ok((0..FEATURE_DIM)
            .map(|k| {
                self.proj[k * n_in..(k + 1) * n_in]
                    .iter()
                    .zip(&pooled)
                    .map(|(p, x)| p * x)
                    .sum()
            })
            .collect())
    }
}

/// Mean and sample covariance (row-major) of a feature set; needs n >= 2.
pub fn feature_stats(features: &[Vec<f64>]) -> Result<(Vec<f64>, Vec<f64>)> {
    let n = features.len();
    if n < 2 {
        return Err(Error::Usage(format!(
            "feature statistics need at least 2 samples, got {n}"
        )));
    }
    let d = features[0].len();
    if features.iter().any(|f| f.len() != d) {
        return Err(Error::Shape("feature vectors have mixed dimensions".into()));
    }
    let mut mu = vec![0.0; d];
    for f in features {
        for (m, x) in mu.iter_mut().zip(f) {
            *m += x;
        }
    }
    for m in &mut mu {
        *m /= n as f64;
    }
    let mut cov = vec![0.0; d * d];
    for f in features {
        for i in 0..d {
            let di = f[i] - mu[i];
            for j in 0..d {
                cov[i * d + j] += di * (f[j] - mu[j]);
            }
        }
    }
    for c in &mut cov {
        *c /= (n - 1) as f64;
    }
    Ok((mu, cov))
}

/// Full evaluation report, serialized as the JSON the CLI emits.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsReport {
    pub ifs_rate: f64,
    pub ap50: f64,
    pub frechet: f64,
    /// Total ground-truth instances evaluated.
    pub n: usize,
    pub per_instance: Vec<InstanceRecord>,
}

/// Run the whole pipeline: detect, match, verify, and score `samples`
/// against `reference` images for the Fréchet term.
pub fn evaluate(
    samples: &[EvalSample],
    reference: &[RgbImage],
    verifier: &dyn Verifier,
    feature_seed: u64,
) -> Result<MetricsReport> {
    let mut per_instance = Vec::new();
    let mut groups: Vec<(Vec<Detection>, Vec<BBox>)> = Vec::with_capacity(samples.len());
    for (si, s) in samples.iter().enumerate() {
        let (records, dets, gts) = sample_records(si, s, verifier);
        per_instance.extend(records);
        groups.push((dets, gts));
    }
    let n = per_instance.len();
    if n == 0 {
        return Err(Error::Usage(
            "evaluation needs at least one ground-truth instance".into(),
        ));
    }
    let ifs = per_instance.iter().filter(|r| r.success).count() as f64 / n as f64;
    let group_refs: Vec<(&[Detection], &[BBox])> = groups
        .iter()
        .map(|(d, g)| (d.as_slice(), g.as_slice()))
        .collect();
    let ap50 = average_precision_grouped(&group_refs, IOU_THR)?;
    let extractor = FeatureExtractor::new(feature_seed);
    let gen_feats: Vec<Vec<f64>> = samples
        .iter()
        .map(|s| extractor.features(&s.image))
        .collect::<Result<_>>()?;
    let ref_feats: Vec<Vec<f64>> = reference
        .iter()
        .map(|img| extractor.features(img))
        .collect::<Result<_>>()?;
    let (mu1, cov1) = feature_stats(&gen_feats)?;
    let (mu2, cov2) = feature_stats(&ref_feats)?;
    let frechet = frechet_distance(&mu1, &cov1, &mu2, &cov2)?;
    Ok(MetricsReport {
        ifs_rate: ifs,
        ap50,
        frechet,
        n,
        per_instance,
    })
}
