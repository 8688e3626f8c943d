//! Matte quality metrics and directory-level evaluation reports.
//!
//! All five scores compare a predicted matte against ground truth at equal
//! resolution. `sad`, `grad_metric`, and `conn_metric` report sums scaled by
//! 1e-3; `mse` and `mad` are per-pixel means, so for mattes in [0,1] they
//! satisfy mse <= mad <= 1.

use crate::data::{image_format, read_image};
use crate::tensor::{mirror_index, Tensor4};
use crate::{Error, Result};
use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

/// Sum-style scores divide by this instead of the pixel count.
const SUM_SCALE: f64 = 1e-3;

/// Width of the Gaussian derivative filters behind [`grad_metric`].
const GRAD_SIGMA: f64 = 1.4;

/// Connectedness slack: deviations below this read as fully connected.
const CONN_TOLERANCE: f64 = 0.15;

/// Threshold spacing used when scoring whole datasets.
pub const CONN_DEFAULT_STEP: f64 = 0.1;

fn check_matte_pair(context: &str, pred: &Tensor4, gt: &Tensor4) -> Result<(usize, usize)> {
    let (ps, gs) = (pred.shape(), gt.shape());
    if ps != gs {
        return Err(Error::ShapeMismatch {
            context: context.to_string(),
            expected: format!("{gs:?}"),
            found: format!("{ps:?}"),
        });
    }
    if ps.n != 1 || ps.c != 1 {
        return Err(Error::InvalidArgument(format!(
            "{context}: mattes must be [1,1,H,W], got {ps:?}"
        )));
    }
    for (name, t) in [("pred", pred), ("gt", gt)] {
        if t.data().iter().any(|&v| !(0.0..=1.0).contains(&v)) {
            return Err(Error::InvalidArgument(format!(
                "{context}: {name} matte has values outside [0,1]"
            )));
        }
    }
    Ok((ps.h, ps.w))
}

/// Sum of absolute differences, scaled by 1e-3.
pub fn sad(pred: &Tensor4, gt: &Tensor4) -> Result<f64> {
    check_matte_pair("sad", pred, gt)?;
    let total: f64 = pred
        .data()
        .iter()
        .zip(gt.data())
        .map(|(&p, &g)| (p - g).abs())
        .sum();
    Ok(total * SUM_SCALE)
}

/// Mean squared difference.
pub fn mse(pred: &Tensor4, gt: &Tensor4) -> Result<f64> {
    check_matte_pair("mse", pred, gt)?;
    let total: f64 = pred
        .data()
        .iter()
        .zip(gt.data())
        .map(|(&p, &g)| (p - g) * (p - g))
        .sum();
    Ok(total / pred.data().len() as f64)
}

/// Mean absolute difference.
pub fn mad(pred: &Tensor4, gt: &Tensor4) -> Result<f64> {
    check_matte_pair("mad", pred, gt)?;
    let total: f64 = pred
        .data()
        .iter()
        .zip(gt.data())
        .map(|(&p, &g)| (p - g).abs())
        .sum();
    Ok(total / pred.data().len() as f64)
}

fn gauss_tap(x: f64, sigma: f64) -> f64 {
    (-x * x / (2.0 * sigma * sigma)).exp() / (sigma * (2.0 * std::f64::consts::PI).sqrt())
}

fn dgauss_tap(x: f64, sigma: f64) -> f64 {
    -x / (sigma * sigma) * gauss_tap(x, sigma)
}

/// Sampled smoothing and derivative taps, truncated at 3 sigma and scaled to
/// unit L2 norm so their outer products have unit Frobenius norm.
fn gradient_kernels() -> (Vec<f64>, Vec<f64>) {
    let radius = (3.0 * GRAD_SIGMA).floor() as isize;
    let mut smooth = Vec::with_capacity((2 * radius + 1) as usize);
    let mut deriv = Vec::with_capacity((2 * radius + 1) as usize);
    for j in -radius..=radius {
        smooth.push(gauss_tap(j as f64, GRAD_SIGMA));
        deriv.push(dgauss_tap(j as f64, GRAD_SIGMA));
    }
    for k in [&mut smooth, &mut deriv] {
        let norm = k.iter().map(|v| v * v).sum::<f64>().sqrt();
        for v in k.iter_mut() {
            *v /= norm;
        }
    }
    (smooth, deriv)
}

/// Correlate one plane with a 1-D kernel along an axis, mirroring at borders.
fn filter_axis(plane: &[f64], h: usize, w: usize, kernel: &[f64], horizontal: bool) -> Vec<f64> {
    let radius = (kernel.len() / 2) as isize;
    let mut out = vec![0.0; plane.len()];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (t, &kv) in kernel.iter().enumerate() {
                let off = t as isize - radius;
                acc += kv
                    * if horizontal {
                        plane[y * w + mirror_index(x as isize + off, w)]
                    } else {
                        plane[mirror_index(y as isize + off, h) * w + x]
                    };
            }
            out[y * w + x] = acc;
        }
    }
    out
}

fn gradient_magnitude(plane: &[f64], h: usize, w: usize) -> Vec<f64> {
    let (smooth, deriv) = gradient_kernels();
    let gx = filter_axis(
        &filter_axis(plane, h, w, &deriv, true),
        h,
        w,
        &smooth,
        false,
    );
    let gy = filter_axis(
        &filter_axis(plane, h, w, &smooth, true),
        h,
        w,
        &deriv,
        false,
    );
    gx.iter().zip(&gy).map(|(&a, &b)| a.hypot(b)).collect()
}

/// Squared difference of Gaussian-derivative gradient magnitudes, summed over
/// pixels and scaled by 1e-3. Constant mattes score zero against each other
/// and a shared offset added to both mattes does not change the score.
pub fn grad_metric(pred: &Tensor4, gt: &Tensor4) -> Result<f64> {
    let (h, w) = check_matte_pair("grad", pred, gt)?;
    let ksize = 2 * (3.0 * GRAD_SIGMA).floor() as usize + 1;
    if h < ksize || w < ksize {
        return Err(Error::InvalidArgument(format!(
            "grad: matte must be at least {ksize}x{ksize} pixels to fit the derivative filter, got {h}x{w}"
        )));
    }
    let mp = gradient_magnitude(pred.data(), h, w);
    let mg = gradient_magnitude(gt.data(), h, w);
    let total: f64 = mp.iter().zip(&mg).map(|(&a, &b)| (a - b) * (a - b)).sum();
    Ok(total * SUM_SCALE)
}

/// Largest 4-connected component of `mask`, as a mask. Ties in size go to the
/// component whose first pixel comes earliest in row-major order.
fn largest_component(mask: &[bool], h: usize, w: usize) -> Vec<bool> {
    let mut visited = vec![false; mask.len()];
    let mut stack = Vec::new();
    let mut best_seed = None;
    let mut best_size = 0usize;
    for start in 0..mask.len() {
        if !mask[start] || visited[start] {
            continue;
        }
        let mut size = 0usize;
        visited[start] = true;
        stack.push(start);
        while let Some(i) = stack.pop() {
            size += 1;
            let (y, x) = (i / w, i % w);
            let mut push = |j: usize| {
                if mask[j] && !visited[j] {
                    visited[j] = true;
                    stack.push(j);
                }
            };
            if x > 0 {
                push(i - 1);
            }
            if x + 1 < w {
                push(i + 1);
            }
            if y > 0 {
                push(i - w);
            }
            if y + 1 < h {
                push(i + w);
            }
        }
        if size > best_size {
            best_size = size;
            best_seed = Some(start);
        }
    }
    let mut out = vec![false; mask.len()];
    let Some(seed) = best_seed else {
        return out;
    };
    out[seed] = true;
    stack.push(seed);
    while let Some(i) = stack.pop() {
        let (y, x) = (i / w, i % w);
        let mut push = |j: usize| {
            if mask[j] && !out[j] {
                out[j] = true;
                stack.push(j);
            }
        };
        if x > 0 {
            push(i - 1);
        }
        if x + 1 < w {
            push(i + 1);
        }
        if y > 0 {
            push(i - w);
        }
        if y + 1 < h {
            push(i + w);
        }
    }
    out
}

/// Connectivity error, scaled by 1e-3.
///
/// For each threshold theta in {0, step, ...} below 1, both mattes are
/// binarized at theta and the largest 4-connected component of their
/// intersection is taken as the connected region. Each pixel's connectedness
/// level l_i is the largest theta whose region contains it; a matte's
/// per-pixel connectedness is 1 - (alpha_i - l_i) when that deviation is at
/// least 0.15 and exactly 1 otherwise. The score sums the absolute difference
/// of the two connectedness fields.
pub fn conn_metric(pred: &Tensor4, gt: &Tensor4, step: f64) -> Result<f64> {
    let (h, w) = check_matte_pair("conn", pred, gt)?;
    if !(step > 0.0 && step < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "conn: threshold step must lie in (0, 1), got {step}"
        )));
    }
    let p = pred.data();
    let g = gt.data();
    let mut level = vec![0.0f64; p.len()];
    let mut mask = vec![false; p.len()];
    let mut k = 0usize;
    loop {
        let theta = k as f64 * step;
        if theta >= 1.0 - 1e-12 {
            break;
        }
        for i in 0..mask.len() {
            mask[i] = p[i] >= theta && g[i] >= theta;
        }
        let region = largest_component(&mask, h, w);
        for (l, &inside) in level.iter_mut().zip(&region) {
            if inside {
                *l = theta;
            }
        }
        k += 1;
    }
    let phi = |alpha: f64, l: f64| {
        let d = alpha - l;
        if d >= CONN_TOLERANCE {
            1.0 - d
        } else {
            1.0
        }
    };
    let total: f64 = (0..p.len())
        .map(|i| (phi(p[i], level[i]) - phi(g[i], level[i])).abs())
        .sum();
    Ok(total * SUM_SCALE)
}

/// All five scores for one matte pair. Uses [`CONN_DEFAULT_STEP`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MatteScores {
    pub sad: f64,
    pub mse: f64,
    pub mad: f64,
    pub grad: f64,
    pub conn: f64,
}

pub fn score_matte(pred: &Tensor4, gt: &Tensor4) -> Result<MatteScores> {
    Ok(MatteScores {
        sad: sad(pred, gt)?,
        mse: mse(pred, gt)?,
        mad: mad(pred, gt)?,
        grad: grad_metric(pred, gt)?,
        conn: conn_metric(pred, gt, CONN_DEFAULT_STEP)?,
    })
}

#[derive(Debug, Clone)]
pub struct EvalRecord {
    pub id: String,
    pub scores: MatteScores,
}

/// Per-image rows plus their arithmetic mean.
#[derive(Debug, Clone)]
pub struct EvalReport {
    pub rows: Vec<EvalRecord>,
    pub aggregate: MatteScores,
}

impl EvalReport {
    /// Sorts rows by id and computes the aggregate. Errors on empty input.
    pub fn new(mut rows: Vec<EvalRecord>) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::Dataset(
                "cannot aggregate an empty evaluation".into(),
            ));
        }
        rows.sort_by(|a, b| a.id.cmp(&b.id));
        let n = rows.len() as f64;
        let mut agg = MatteScores {
            sad: 0.0,
            mse: 0.0,
            mad: 0.0,
            grad: 0.0,
            conn: 0.0,
        };
        for r in &rows {
            agg.sad += r.scores.sad;
            agg.mse += r.scores.mse;
            agg.mad += r.scores.mad;
            agg.grad += r.scores.grad;
            agg.conn += r.scores.conn;
        }
        agg.sad /= n;
        agg.mse /= n;
        agg.mad /= n;
        agg.grad /= n;
        agg.conn /= n;
        Ok(Self {
            rows,
            aggregate: agg,
        })
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("id,sad,mse,mad,grad,conn\n");
        let line = |out: &mut String, id: &str, s: &MatteScores| {
            writeln!(
                out,
                "{id},{:.6},{:.6},{:.6},{:.6},{:.6}",
                s.sad, s.mse, s.mad, s.grad, s.conn
            )
            .unwrap();
        };
        for r in &self.rows {
            line(&mut out, &r.id, &r.scores);
        }
        line(&mut out, "AGGREGATE", &self.aggregate);
        out
    }

    pub fn to_table(&self) -> String {
        let idw = self
            .rows
            .iter()
            .map(|r| r.id.len())
            .chain(["AGGREGATE".len()])
            .max()
            .unwrap();
        let mut out = format!(
            "{:<idw$}  {:>10}  {:>10}  {:>10}  {:>10}  {:>10}\n",
            "id", "sad", "mse", "mad", "grad", "conn"
        );
        let line = |out: &mut String, id: &str, s: &MatteScores| {
            writeln!(
                out,
                "{id:<idw$}  {:>10.4}  {:>10.4}  {:>10.4}  {:>10.4}  {:>10.4}",
                s.sad, s.mse, s.mad, s.grad, s.conn
            )
            .unwrap();
        };
        for r in &self.rows {
            line(&mut out, &r.id, &r.scores);
        }
        line(&mut out, "AGGREGATE", &self.aggregate);
        out
    }
}

fn matte_files(dir: &Path) -> Result<BTreeMap<String, PathBuf>> {
    let mut out = BTreeMap::new();
    for entry in std::fs::read_dir(dir)? {
        let path = entry?.path();
        if !path.is_file() || image_format(&path).is_err() {
            continue;
        }
        let id = path
            .file_stem()
            .and_then(|s| s.to_str())
            .ok_or_else(|| Error::Dataset(format!("unusable file name {}", path.display())))?
            .to_string();
        if out.insert(id.clone(), path).is_some() {
            return Err(Error::Dataset(format!(
                "duplicate matte id {id:?} in {}",
                dir.display()
            )));
        }
    }
    Ok(out)
}

fn load_matte(path: &Path) -> Result<Tensor4> {
    let t = read_image(path)?;
    if t.shape().c != 1 {
        return Err(Error::Dataset(format!(
            "{} is not a grayscale matte ({} channels)",
            path.display(),
            t.shape().c
        )));
    }
    Ok(t)
}

/// Score every matte in `pred_dir` against its same-named counterpart in
/// `gt_dir`. Ids present on one side only are an error.
pub fn evaluate_dataset(pred_dir: &Path, gt_dir: &Path) -> Result<EvalReport> {
    let preds = matte_files(pred_dir)?;
    let gts = matte_files(gt_dir)?;
    let only_pred: Vec<_> = preds.keys().filter(|k| !gts.contains_key(*k)).collect();
    let only_gt: Vec<_> = gts.keys().filter(|k| !preds.contains_key(*k)).collect();
    if !only_pred.is_empty() || !only_gt.is_empty() {
        return Err(Error::Dataset(format!(
            "prediction and ground-truth ids differ; missing ground truth for {only_pred:?}, missing predictions for {only_gt:?}"
        )));
    }
    if preds.is_empty() {
        return Err(Error::Dataset(format!(
            "no mattes found in {}",
            pred_dir.display()
        )));
    }
    let mut rows = Vec::with_capacity(preds.len());
    for (id, pred_path) in &preds {
        let pred = load_matte(pred_path)?;
        let gt = load_matte(&gts[id])?;
        let scores = score_matte(&pred, &gt).map_err(|e| match e {
            Error::ShapeMismatch {
                expected, found, ..
            } => Error::Dataset(format!(
                "{id}: prediction is {found:?} but ground truth is {expected:?}"
            )),
            other => other,
        })?;
        rows.push(EvalRecord {
            id: id.clone(),
            scores,
        });
    }
    EvalReport::new(rows)
}
