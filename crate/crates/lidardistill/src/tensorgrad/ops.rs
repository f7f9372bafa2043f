//! Forward/backward pairs for the operations the student and trainer use.
//!
//! Backward functions return exact analytic gradients:
//!
//! - `linear`: y = xW + b; dx = g W^T, dW = x^T g, db = sum_n g
//! - `relu`: dx = g where x > 0, else 0 (subgradient 0 at the kink)
//! - `l2_normalize`: y = x/|x|; dx = (g - y (y.g)) / |x|; near-zero vectors
//!   pass through with zero gradient
//! - `grid_scatter_mean`: per-cell mean; dx_i = g_cell(i) / count(cell(i))
//! - `grid_gather`: per-point copy; d_cell = sum of its points' gradients
//! - `distill_loss`: L = mean_i |s_i - t_i|; ds_i = (s_i - t_i)/(N |s_i - t_i|),
//!   defined as 0 at zero distance
//! - `cross_entropy`: softmax CE averaged over non-ignored rows

use crate::error::{Error, Result};
use crate::frameio::FeatureMap;

use super::{sum_f64, Scalar, Tensor};

fn expect_2d<E: Scalar>(t: &Tensor<E>, what: &str) -> Result<(usize, usize)> {
    match t.shape() {
        [r, c] => Ok((*r, *c)),
        s => Err(Error::Shape(format!("{what} must be 2D, got {s:?}"))),
    }
}

// ---------------------------------------------------------------------------
// linear
// ---------------------------------------------------------------------------

/// `y = x W + b` for `x: n x i`, `w: i x o`, `b: o`.
pub fn linear<E: Scalar>(x: &Tensor<E>, w: &Tensor<E>, b: &Tensor<E>) -> Result<Tensor<E>> {
    let (n, i) = expect_2d(x, "linear input")?;
    let (wi, o) = expect_2d(w, "linear weight")?;
    if wi != i || b.shape() != [o] {
        return Err(Error::Shape(format!(
            "linear shapes incompatible: x {:?}, w {:?}, b {:?}",
            x.shape(),
            w.shape(),
            b.shape()
        )));
    }
    let mut out = vec![E::ZERO; n * o];
    let mut acc = vec![0.0f64; o];
    for r in 0..n {
        for (a, bv) in acc.iter_mut().zip(b.data()) {
            *a = bv.to_f64();
        }
        let xrow = x.row(r);
        for (k, xv) in xrow.iter().enumerate() {
            let xv = xv.to_f64();
            let wrow = w.row(k);
            for (a, wv) in acc.iter_mut().zip(wrow) {
                *a += xv * wv.to_f64();
            }
        }
        for (dst, a) in out[r * o..(r + 1) * o].iter_mut().zip(&acc) {
            *dst = E::from_f64(*a);
        }
    }
    Tensor::from_vec(&[n, o], out)
}

pub struct LinearGrads<E: Scalar> {
    pub x: Tensor<E>,
    pub w: Tensor<E>,
    pub b: Tensor<E>,
}

pub fn linear_backward<E: Scalar>(
    x: &Tensor<E>,
    w: &Tensor<E>,
    grad_y: &Tensor<E>,
) -> Result<LinearGrads<E>> {
    let (n, i) = expect_2d(x, "linear input")?;
    let (wi, o) = expect_2d(w, "linear weight")?;
    let (gn, go) = expect_2d(grad_y, "linear output gradient")?;
    if wi != i || gn != n || go != o {
        return Err(Error::Shape(format!(
            "linear_backward shapes incompatible: x {:?}, w {:?}, gy {:?}",
            x.shape(),
            w.shape(),
            grad_y.shape()
        )));
    }
    // dx = gy W^T
    let mut gx = vec![0.0f64; n * i];
    for r in 0..n {
        let gyr = grad_y.row(r);
        for k in 0..i {
            let wrow = w.row(k);
            let mut acc = 0.0f64;
            for (g, wv) in gyr.iter().zip(wrow) {
                acc += g.to_f64() * wv.to_f64();
            }
            gx[r * i + k] = acc;
        }
    }
    // dW = x^T gy, accumulated over rows in order
    let mut gw = vec![0.0f64; i * o];
    for r in 0..n {
        let xrow = x.row(r);
        let gyr = grad_y.row(r);
        for (k, xv) in xrow.iter().enumerate() {
            let xv = xv.to_f64();
            for (dst, g) in gw[k * o..(k + 1) * o].iter_mut().zip(gyr) {
                *dst += xv * g.to_f64();
            }
        }
    }
    // db = sum over rows
    let mut gb = vec![0.0f64; o];
    for r in 0..n {
        for (dst, g) in gb.iter_mut().zip(grad_y.row(r)) {
            *dst += g.to_f64();
        }
    }
    Ok(LinearGrads {
        x: Tensor::from_f64s(&[n, i], &gx)?,
        w: Tensor::from_f64s(&[i, o], &gw)?,
        b: Tensor::from_f64s(&[o], &gb)?,
    })
}

// ---------------------------------------------------------------------------
// relu
// ---------------------------------------------------------------------------

pub fn relu<E: Scalar>(x: &Tensor<E>) -> Tensor<E> {
    let data = x.data().iter().map(|&v| if v.to_f64() > 0.0 { v } else { E::ZERO }).collect();
    Tensor { shape: x.shape().to_vec(), data }
}

pub fn relu_backward<E: Scalar>(x: &Tensor<E>, grad_y: &Tensor<E>) -> Result<Tensor<E>> {
    if x.shape() != grad_y.shape() {
        return Err(Error::Shape(format!(
            "relu_backward shapes differ: {:?} vs {:?}",
            x.shape(),
            grad_y.shape()
        )));
    }
    let data = x
        .data()
        .iter()
        .zip(grad_y.data())
        .map(|(&xv, &g)| if xv.to_f64() > 0.0 { g } else { E::ZERO })
        .collect();
    Ok(Tensor { shape: x.shape().to_vec(), data })
}

// ---------------------------------------------------------------------------
// l2_normalize
// ---------------------------------------------------------------------------

const NORM_EPS: f64 = 1e-12;

fn vector_views<E: Scalar>(t: &Tensor<E>, axis: usize) -> Result<(usize, usize, usize, usize)> {
    // Returns (n_vectors, vector_len, outer_stride, inner_stride).
    let (r, c) = expect_2d(t, "l2_normalize input")?;
    match axis {
        1 => Ok((r, c, c, 1)),
        0 => Ok((c, r, 1, c)),
        a => Err(Error::Shape(format!("l2_normalize axis must be 0 or 1, got {a}"))),
    }
}

/// Normalizes each vector along `axis` to unit length; vectors with norm
/// below 1e-12 pass through unchanged.
pub fn l2_normalize<E: Scalar>(x: &Tensor<E>, axis: usize) -> Result<Tensor<E>> {
    let (nv, vl, os, is) = vector_views(x, axis)?;
    let mut data = x.data().to_vec();
    for v in 0..nv {
        let base = v * os;
        let norm = sum_f64((0..vl).map(|j| {
            let t = x.data()[base + j * is].to_f64();
            t * t
        }))
        .sqrt();
        if norm >= NORM_EPS {
            for j in 0..vl {
                let idx = base + j * is;
                data[idx] = E::from_f64(x.data()[idx].to_f64() / norm);
            }
        }
    }
    Ok(Tensor { shape: x.shape().to_vec(), data })
}

pub fn l2_normalize_backward<E: Scalar>(
    x: &Tensor<E>,
    grad_y: &Tensor<E>,
    axis: usize,
) -> Result<Tensor<E>> {
    if x.shape() != grad_y.shape() {
        return Err(Error::Shape(format!(
            "l2_normalize_backward shapes differ: {:?} vs {:?}",
            x.shape(),
            grad_y.shape()
        )));
    }
    let (nv, vl, os, is) = vector_views(x, axis)?;
    let mut out = vec![E::ZERO; x.len()];
    for v in 0..nv {
        let base = v * os;
        let norm = sum_f64((0..vl).map(|j| {
            let t = x.data()[base + j * is].to_f64();
            t * t
        }))
        .sqrt();
        if norm < NORM_EPS {
            continue; // pass-through forward has zero gradient by definition
        }
        let dot = sum_f64((0..vl).map(|j| {
            let idx = base + j * is;
            (x.data()[idx].to_f64() / norm) * grad_y.data()[idx].to_f64()
        }));
        for j in 0..vl {
            let idx = base + j * is;
            let y = x.data()[idx].to_f64() / norm;
            out[idx] = E::from_f64((grad_y.data()[idx].to_f64() - y * dot) / norm);
        }
    }
    Ok(Tensor { shape: x.shape().to_vec(), data: out })
}

// ---------------------------------------------------------------------------
// bilinear resize (teacher maps are frozen; no gradient)
// ---------------------------------------------------------------------------

/// Channel-wise bilinear resize with the align-corners=false convention
/// (pixel centers at index + 0.5); sampling coordinates clamp to the edges.
pub fn bilinear_resize(fm: &FeatureMap, out_h: usize, out_w: usize) -> FeatureMap {
    assert!(out_h >= 1 && out_w >= 1, "target size must be >= 1");
    if out_h == fm.height && out_w == fm.width {
        return fm.clone();
    }
    let c = fm.channels;
    let mut out = FeatureMap::zeros(out_h, out_w, c);
    let scale_y = fm.height as f64 / out_h as f64;
    let scale_x = fm.width as f64 / out_w as f64;
    for oy in 0..out_h {
        let sy = ((oy as f64 + 0.5) * scale_y - 0.5).clamp(0.0, (fm.height - 1) as f64);
        let y0 = sy.floor() as usize;
        let y1 = (y0 + 1).min(fm.height - 1);
        let wy = sy - y0 as f64;
        for ox in 0..out_w {
            let sx = ((ox as f64 + 0.5) * scale_x - 0.5).clamp(0.0, (fm.width - 1) as f64);
            let x0 = sx.floor() as usize;
            let x1 = (x0 + 1).min(fm.width - 1);
            let wx = sx - x0 as f64;
            let p00 = fm.pixel(x0, y0);
            let p01 = fm.pixel(x1, y0);
            let p10 = fm.pixel(x0, y1);
            let p11 = fm.pixel(x1, y1);
            let dst = out.pixel_mut(ox, oy);
            for ch in 0..c {
                let top = (1.0 - wx) * p00[ch] as f64 + wx * p01[ch] as f64;
                let bot = (1.0 - wx) * p10[ch] as f64 + wx * p11[ch] as f64;
                dst[ch] = ((1.0 - wy) * top + wy * bot) as f32;
            }
        }
    }
    out
}

// ---------------------------------------------------------------------------
// grid scatter / gather
// ---------------------------------------------------------------------------

/// Result of [`grid_scatter_mean`]: per-cell means plus contributor counts
/// (needed by the backward pass).
pub struct ScatterMean<E: Scalar> {
    pub cells: Tensor<E>,
    pub counts: Vec<u32>,
}

fn check_cell_ids(cell_ids: &[usize], n_cells: usize) -> Result<()> {
    if let Some(&bad) = cell_ids.iter().find(|&&id| id >= n_cells) {
        return Err(Error::Validation(format!("cell id {bad} out of range for {n_cells} cells")));
    }
    Ok(())
}

/// Per-cell mean of contributing point rows; empty cells are zero.
///
/// Contributions are summed in a canonical (bit-pattern sorted) order, so
/// the result is exactly invariant under permutation of the input points.
pub fn grid_scatter_mean<E: Scalar>(
    points: &Tensor<E>,
    cell_ids: &[usize],
    n_cells: usize,
) -> Result<ScatterMean<E>> {
    let (n, c) = expect_2d(points, "scatter input")?;
    if cell_ids.len() != n {
        return Err(Error::Shape(format!("{} cell ids for {n} points", cell_ids.len())));
    }
    check_cell_ids(cell_ids, n_cells)?;
    // counting sort: contributors of cell k live at members[offsets[k]..offsets[k+1]]
    let mut counts = vec![0u32; n_cells];
    for &id in cell_ids {
        counts[id] += 1;
    }
    let mut offsets = vec![0usize; n_cells + 1];
    for k in 0..n_cells {
        offsets[k + 1] = offsets[k] + counts[k] as usize;
    }
    let mut cursor = offsets.clone();
    let mut members = vec![0u32; n];
    for (i, &id) in cell_ids.iter().enumerate() {
        members[cursor[id]] = i as u32;
        cursor[id] += 1;
    }
    let mut cells = vec![E::ZERO; n_cells * c];
    let mut scratch: Vec<E> = Vec::new();
    for k in 0..n_cells {
        let group = &members[offsets[k]..offsets[k + 1]];
        if group.is_empty() {
            continue;
        }
        let inv = 1.0 / group.len() as f64;
        for ch in 0..c {
            scratch.clear();
            scratch.extend(group.iter().map(|&i| points.data()[i as usize * c + ch]));
            scratch.sort_unstable_by_key(|v| v.canonical_bits());
            let s = sum_f64(scratch.iter().map(|v| v.to_f64()));
            cells[k * c + ch] = E::from_f64(s * inv);
        }
    }
    Ok(ScatterMean { cells: Tensor::from_vec(&[n_cells, c], cells)?, counts })
}

/// Backward of the mean scatter: each contributor receives its cell's
/// gradient divided by the cell count.
pub fn grid_scatter_mean_backward<E: Scalar>(
    grad_cells: &Tensor<E>,
    cell_ids: &[usize],
    counts: &[u32],
) -> Result<Tensor<E>> {
    let (m, c) = expect_2d(grad_cells, "scatter gradient")?;
    if counts.len() != m {
        return Err(Error::Shape(format!("{} counts for {m} cells", counts.len())));
    }
    check_cell_ids(cell_ids, m)?;
    let n = cell_ids.len();
    let mut out = vec![E::ZERO; n * c];
    for (i, &id) in cell_ids.iter().enumerate() {
        let inv = 1.0 / counts[id] as f64;
        let src = grad_cells.row(id);
        for (dst, g) in out[i * c..(i + 1) * c].iter_mut().zip(src) {
            *dst = E::from_f64(g.to_f64() * inv);
        }
    }
    Tensor::from_vec(&[n, c], out)
}

/// Copies each point's cell row: `out[i] = cells[cell_ids[i]]`.
pub fn grid_gather<E: Scalar>(cells: &Tensor<E>, cell_ids: &[usize]) -> Result<Tensor<E>> {
    let (m, c) = expect_2d(cells, "gather input")?;
    check_cell_ids(cell_ids, m)?;
    let n = cell_ids.len();
    let mut out = vec![E::ZERO; n * c];
    for (i, &id) in cell_ids.iter().enumerate() {
        out[i * c..(i + 1) * c].copy_from_slice(cells.row(id));
    }
    Tensor::from_vec(&[n, c], out)
}

/// Backward of gather: per-cell sum of its points' gradients, accumulated
/// in ascending point order.
pub fn grid_gather_backward<E: Scalar>(
    grad_points: &Tensor<E>,
    cell_ids: &[usize],
    n_cells: usize,
) -> Result<Tensor<E>> {
    let (n, c) = expect_2d(grad_points, "gather gradient")?;
    if cell_ids.len() != n {
        return Err(Error::Shape(format!("{} cell ids for {n} points", cell_ids.len())));
    }
    check_cell_ids(cell_ids, n_cells)?;
    let mut acc = vec![0.0f64; n_cells * c];
    for (i, &id) in cell_ids.iter().enumerate() {
        for (dst, g) in acc[id * c..(id + 1) * c].iter_mut().zip(grad_points.row(i)) {
            *dst += g.to_f64();
        }
    }
    Tensor::from_f64s(&[n_cells, c], &acc)
}

// ---------------------------------------------------------------------------
// losses
// ---------------------------------------------------------------------------

const UNIT_NORM_TOL: f64 = 1e-4;

fn check_row_normalized<E: Scalar>(t: &Tensor<E>, what: &str) -> Result<()> {
    let (n, c) = expect_2d(t, what)?;
    for r in 0..n {
        let norm = sum_f64((0..c).map(|j| {
            let v = t.at2(r, j).to_f64();
            v * v
        }))
        .sqrt();
        if (norm - 1.0).abs() > UNIT_NORM_TOL {
            return Err(Error::Validation(format!(
                "{what} row {r} has norm {norm}, expected unit within {UNIT_NORM_TOL}"
            )));
        }
    }
    Ok(())
}

/// Mean per-row Euclidean distance between normalized descriptor sets,
/// with the gradient with respect to the student rows.
pub fn distill_loss<E: Scalar>(
    student: &Tensor<E>,
    teacher: &Tensor<E>,
) -> Result<(f64, Tensor<E>)> {
    let (n, c) = expect_2d(student, "student features")?;
    if teacher.shape() != student.shape() {
        return Err(Error::Shape(format!(
            "student {:?} vs teacher {:?}",
            student.shape(),
            teacher.shape()
        )));
    }
    if n == 0 {
        return Err(Error::Validation("distill_loss needs at least one row".into()));
    }
    check_row_normalized(student, "student features")?;
    check_row_normalized(teacher, "teacher features")?;
    let mut grad = vec![E::ZERO; n * c];
    let mut total = 0.0f64;
    let inv_n = 1.0 / n as f64;
    let mut diff = vec![0.0f64; c];
    for r in 0..n {
        let srow = student.row(r);
        let trow = teacher.row(r);
        for ((d, s), t) in diff.iter_mut().zip(srow).zip(trow) {
            *d = s.to_f64() - t.to_f64();
        }
        let dist = sum_f64(diff.iter().map(|d| d * d)).sqrt();
        total += dist;
        if dist > 0.0 {
            let scale = inv_n / dist;
            for (dst, d) in grad[r * c..(r + 1) * c].iter_mut().zip(&diff) {
                *dst = E::from_f64(d * scale);
            }
        } // zero-distance rows keep gradient 0 by definition
    }
    Ok((total * inv_n, Tensor::from_vec(&[n, c], grad)?))
}

/// Softmax cross-entropy averaged over non-ignored rows; an all-ignored
/// batch yields loss 0 and a zero gradient.
pub fn cross_entropy<E: Scalar>(
    logits: &Tensor<E>,
    labels: &[u16],
    ignore_id: u16,
) -> Result<(f64, Tensor<E>)> {
    let (n, k) = expect_2d(logits, "logits")?;
    if labels.len() != n {
        return Err(Error::Shape(format!("{} labels for {n} rows", labels.len())));
    }
    for (i, &l) in labels.iter().enumerate() {
        if l != ignore_id && (l as usize) >= k {
            return Err(Error::Validation(format!("label {l} at row {i} out of range for {k} classes")));
        }
    }
    let scored = labels.iter().filter(|&&l| l != ignore_id).count();
    let mut grad = vec![E::ZERO; n * k];
    if scored == 0 {
        return Ok((0.0, Tensor::from_vec(&[n, k], grad)?));
    }
    let inv_m = 1.0 / scored as f64;
    let mut total = 0.0f64;
    let mut probs = vec![0.0f64; k];
    for (r, &label) in labels.iter().enumerate() {
        if label == ignore_id {
            continue;
        }
        let row = logits.row(r);
        let max = row.iter().map(|v| v.to_f64()).fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0f64;
        for (p, v) in probs.iter_mut().zip(row) {
            *p = (v.to_f64() - max).exp();
            z += *p;
        }
        total += z.ln() + max - row[label as usize].to_f64();
        for (j, (dst, p)) in grad[r * k..(r + 1) * k].iter_mut().zip(&probs).enumerate() {
            let onehot = if j == label as usize { 1.0 } else { 0.0 };
            *dst = E::from_f64((p / z - onehot) * inv_m);
        }
    }
    Ok((total * inv_m, Tensor::from_vec(&[n, k], grad)?))
}
