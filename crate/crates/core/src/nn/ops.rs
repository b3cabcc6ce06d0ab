//! Batched forward and backward kernels for the layer zoo.
//!
//! All image tensors are NHWC, all dense activations `[n, d]`.

pub(crate) fn dense_forward(
    x: &[f32],
    n: usize,
    inputs: usize,
    outputs: usize,
    w: &[f32],
    b: &[f32],
) -> Vec<f32> {
    let mut y = vec![0.0f32; n * outputs];
    for s in 0..n {
        let xs = &x[s * inputs..(s + 1) * inputs];
        let ys = &mut y[s * outputs..(s + 1) * outputs];
        for (o, yo) in ys.iter_mut().enumerate() {
            let wr = &w[o * inputs..(o + 1) * inputs];
            let mut acc = b[o];
            for (a, c) in wr.iter().zip(xs) {
                acc += a * c;
            }
            *yo = acc;
        }
    }
    y
}

/// Returns `(dx, dW, db)`; the parameter gradients are skipped unless requested.
pub(crate) fn dense_backward(
    x: &[f32],
    dy: &[f32],
    n: usize,
    inputs: usize,
    outputs: usize,
    w: &[f32],
    want_params: bool,
) -> (Vec<f32>, Option<(Vec<f32>, Vec<f32>)>) {
    let mut dx = vec![0.0f32; n * inputs];
    for s in 0..n {
        let dys = &dy[s * outputs..(s + 1) * outputs];
        let dxs = &mut dx[s * inputs..(s + 1) * inputs];
        for (o, &g) in dys.iter().enumerate() {
            if g == 0.0 {
                continue;
            }
            let wr = &w[o * inputs..(o + 1) * inputs];
            for (d, a) in dxs.iter_mut().zip(wr) {
                *d += g * a;
            }
        }
    }
    let params = want_params.then(|| {
        let mut dw = vec![0.0f32; outputs * inputs];
        let mut db = vec![0.0f32; outputs];
        for s in 0..n {
            let xs = &x[s * inputs..(s + 1) * inputs];
            let dys = &dy[s * outputs..(s + 1) * outputs];
            for (o, &g) in dys.iter().enumerate() {
                db[o] += g;
                if g == 0.0 {
                    continue;
                }
                let row = &mut dw[o * inputs..(o + 1) * inputs];
                for (d, a) in row.iter_mut().zip(xs) {
                    *d += g * a;
                }
            }
        }
        (dw, db)
    });
    (dx, params)
}

#[derive(Clone, Copy)]
pub(crate) struct ConvDims {
    pub n: usize,
    pub h: usize,
    pub w: usize,
    pub cin: usize,
    pub cout: usize,
}

pub(crate) fn conv_forward(x: &[f32], d: ConvDims, w: &[f32], b: &[f32]) -> Vec<f32> {
    let ConvDims {
        n,
        h,
        w: width,
        cin,
        cout,
    } = d;
    let mut y = vec![0.0f32; n * h * width * cout];
    for s in 0..n {
        for i in 0..h {
            for j in 0..width {
                let out = &mut y[((s * h + i) * width + j) * cout..][..cout];
                out.copy_from_slice(b);
                for kh in 0..3 {
                    let ii = i as isize + kh as isize - 1;
                    if ii < 0 || ii >= h as isize {
                        continue;
                    }
                    for kw in 0..3 {
                        let jj = j as isize + kw as isize - 1;
                        if jj < 0 || jj >= width as isize {
                            continue;
                        }
                        let xp = &x[((s * h + ii as usize) * width + jj as usize) * cin..][..cin];
                        for (o, acc) in out.iter_mut().enumerate() {
                            let wp = &w[((o * 3 + kh) * 3 + kw) * cin..][..cin];
                            let mut sum = 0.0f32;
                            for (a, c) in wp.iter().zip(xp) {
                                sum += a * c;
                            }
                            *acc += sum;
                        }
                    }
                }
            }
        }
    }
    y
}

pub(crate) fn conv_backward(
    x: &[f32],
    dy: &[f32],
    d: ConvDims,
    w: &[f32],
    want_params: bool,
) -> (Vec<f32>, Option<(Vec<f32>, Vec<f32>)>) {
    let ConvDims {
        n,
        h,
        w: width,
        cin,
        cout,
    } = d;
    let mut dx = vec![0.0f32; n * h * width * cin];
    let mut dw = if want_params {
        vec![0.0f32; cout * 9 * cin]
    } else {
        Vec::new()
    };
    let mut db = if want_params {
        vec![0.0f32; cout]
    } else {
        Vec::new()
    };
    for s in 0..n {
        for i in 0..h {
            for j in 0..width {
                let g = &dy[((s * h + i) * width + j) * cout..][..cout];
                if want_params {
                    for (acc, v) in db.iter_mut().zip(g) {
                        *acc += v;
                    }
                }
                for kh in 0..3 {
                    let ii = i as isize + kh as isize - 1;
                    if ii < 0 || ii >= h as isize {
                        continue;
                    }
                    for kw in 0..3 {
                        let jj = j as isize + kw as isize - 1;
                        if jj < 0 || jj >= width as isize {
                            continue;
                        }
                        let base = ((s * h + ii as usize) * width + jj as usize) * cin;
                        for (o, &go) in g.iter().enumerate() {
                            if go == 0.0 {
                                continue;
                            }
                            let off = ((o * 3 + kh) * 3 + kw) * cin;
                            let wp = &w[off..off + cin];
                            let dxp = &mut dx[base..base + cin];
                            for (dv, wv) in dxp.iter_mut().zip(wp) {
                                *dv += go * wv;
                            }
                            if want_params {
                                let xp = &x[base..base + cin];
                                let dwp = &mut dw[off..off + cin];
                                for (dv, xv) in dwp.iter_mut().zip(xp) {
                                    *dv += go * xv;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    (dx, want_params.then_some((dw, db)))
}

/// 2x2/2 max pooling. Returns the pooled values and, per output entry, the
/// flat input index that produced it (first maximum wins).
pub(crate) fn maxpool_forward(
    x: &[f32],
    n: usize,
    h: usize,
    w: usize,
    c: usize,
) -> (Vec<f32>, Vec<u32>) {
    let (oh, ow) = (h / 2, w / 2);
    let mut y = vec![0.0f32; n * oh * ow * c];
    let mut arg = vec![0u32; n * oh * ow * c];
    for s in 0..n {
        for i in 0..oh {
            for j in 0..ow {
                for ch in 0..c {
                    let mut best = f32::NEG_INFINITY;
                    let mut best_idx = 0usize;
                    for di in 0..2 {
                        for dj in 0..2 {
                            let idx = ((s * h + 2 * i + di) * w + 2 * j + dj) * c + ch;
                            if x[idx] > best {
                                best = x[idx];
                                best_idx = idx;
                            }
                        }
                    }
                    let o = ((s * oh + i) * ow + j) * c + ch;
                    y[o] = best;
                    arg[o] = best_idx as u32;
                }
            }
        }
    }
    (y, arg)
}

pub(crate) fn maxpool_backward(dy: &[f32], arg: &[u32], input_len: usize) -> Vec<f32> {
    let mut dx = vec![0.0f32; input_len];
    for (g, &a) in dy.iter().zip(arg) {
        dx[a as usize] += g;
    }
    dx
}
