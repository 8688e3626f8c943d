//! Independent reference implementations of the matte metrics, written
//! against the definitions rather than the library code: plain nested loops,
//! a dense 2-D convolution, and union-find component labeling.

use sgmnet_core::tensor::Tensor4;

/// (sad, mse, mad) by direct accumulation.
pub fn nested_loop_sums(pred: &Tensor4, gt: &Tensor4) -> (f64, f64, f64) {
    let s = pred.shape();
    let (mut abs_sum, mut sq_sum) = (0.0, 0.0);
    for y in 0..s.h {
        for x in 0..s.w {
            let d = pred.at(0, 0, y, x) - gt.at(0, 0, y, x);
            abs_sum += d.abs();
            sq_sum += d * d;
        }
    }
    let n = (s.h * s.w) as f64;
    (abs_sum / 1000.0, sq_sum / n, abs_sum / n)
}

fn mirror(i: isize, n: usize) -> usize {
    let n = n as isize;
    let mut j = i.rem_euclid(2 * n);
    if j >= n {
        j = 2 * n - 1 - j;
    }
    j as usize
}

fn gradient_field(t: &Tensor4) -> Vec<f64> {
    let (h, w) = (t.shape().h, t.shape().w);
    let sigma = 1.4f64;
    let radius = (3.0 * sigma).floor() as isize;
    let n = (2 * radius + 1) as usize;
    let gauss = |x: f64| {
        (-x * x / (2.0 * sigma * sigma)).exp() / (sigma * (2.0 * std::f64::consts::PI).sqrt())
    };
    let dgauss = |x: f64| -x / (sigma * sigma) * gauss(x);
    let mut hx = vec![vec![0.0; n]; n];
    let mut hy = vec![vec![0.0; n]; n];
    let mut frob = 0.0;
    for i in 0..n {
        for j in 0..n {
            let (u, v) = ((i as isize - radius) as f64, (j as isize - radius) as f64);
            hx[i][j] = gauss(u) * dgauss(v);
            hy[i][j] = dgauss(u) * gauss(v);
            frob += hx[i][j] * hx[i][j];
        }
    }
    let frob = frob.sqrt();
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let (mut gx, mut gy) = (0.0, 0.0);
            for i in 0..n {
                for j in 0..n {
                    let sy = mirror(y as isize + i as isize - radius, h);
                    let sx = mirror(x as isize + j as isize - radius, w);
                    gx += t.at(0, 0, sy, sx) * hx[i][j] / frob;
                    gy += t.at(0, 0, sy, sx) * hy[i][j] / frob;
                }
            }
            out[y * w + x] = (gx * gx + gy * gy).sqrt();
        }
    }
    out
}

/// Gradient error by dense direct convolution.
pub fn dense_grad_metric(pred: &Tensor4, gt: &Tensor4) -> f64 {
    let mp = gradient_field(pred);
    let mg = gradient_field(gt);
    mp.iter()
        .zip(&mg)
        .map(|(&a, &b)| (a - b) * (a - b))
        .sum::<f64>()
        / 1000.0
}

fn find(parent: &mut [usize], mut i: usize) -> usize {
    while parent[i] != i {
        parent[i] = parent[parent[i]];
        i = parent[i];
    }
    i
}

/// Connectivity error by per-threshold union-find labeling: the connected
/// region is the largest 4-connected component of the thresholded
/// intersection, ties broken toward the earliest row-major pixel.
pub fn union_find_conn(pred: &Tensor4, gt: &Tensor4, step: f64) -> f64 {
    let (h, w) = (pred.shape().h, pred.shape().w);
    let (p, g) = (pred.data(), gt.data());
    let mut level = vec![0.0f64; p.len()];
    let mut k = 0usize;
    loop {
        let theta = k as f64 * step;
        if theta >= 1.0 - 1e-12 {
            break;
        }
        let mask: Vec<bool> = (0..p.len())
            .map(|i| p[i] >= theta && g[i] >= theta)
            .collect();
        let mut parent: Vec<usize> = (0..mask.len()).collect();
        for y in 0..h {
            for x in 0..w {
                let i = y * w + x;
                if !mask[i] {
                    continue;
                }
                if x + 1 < w && mask[i + 1] {
                    let (a, b) = (find(&mut parent, i), find(&mut parent, i + 1));
                    parent[a.max(b)] = a.min(b);
                }
                if y + 1 < h && mask[i + w] {
                    let (a, b) = (find(&mut parent, i), find(&mut parent, i + w));
                    parent[a.max(b)] = a.min(b);
                }
            }
        }
        let mut sizes = vec![0usize; mask.len()];
        for i in 0..mask.len() {
            if mask[i] {
                sizes[find(&mut parent, i)] += 1;
            }
        }
        // Each root is the first pixel of its component, so among maximal
        // sizes the smallest root index is the row-major tie-break.
        let mut best: Option<usize> = None;
        for (root, &sz) in sizes.iter().enumerate() {
            if sz > 0 && best.is_none_or(|b| sz > sizes[b]) {
                best = Some(root);
            }
        }
        if let Some(broot) = best {
            for i in 0..mask.len() {
                if mask[i] && find(&mut parent, i) == broot {
                    level[i] = theta;
                }
            }
        }
        k += 1;
    }
    let phi = |alpha: f64, l: f64| {
        let d = alpha - l;
        if d >= 0.15 {
            1.0 - d
        } else {
            1.0
        }
    };
    // Same scaling constant as the library metric; dividing by 1000.0
    // instead rounds differently in the last ulp.
    (0..p.len())
        .map(|i| (phi(p[i], level[i]) - phi(g[i], level[i])).abs())
        .sum::<f64>()
        * 1e-3
}
