//! LSTM and GRU cells unrolled over the full sequence, with backpropagation
//! through time.
//!
//! LSTM gate blocks are ordered `i, f, g, o`; GRU blocks are `z, r, n` with the
//! reset gate applied to the previous state before the candidate projection.

use super::tensor::{gemm, sigmoid, Tensor, View, ViewMut};
use super::NnError;

pub(crate) struct LstmCache {
    batch: usize,
    steps: usize,
    channels: usize,
    units: usize,
    reverse: bool,
    return_sequences: bool,
    input: Tensor,
    /// Activated gates, `[step][batch][4H]`.
    gates: Vec<f64>,
    /// Cell states, `[step + 1][batch][H]`; entry 0 is the zero state.
    cells: Vec<f64>,
    hidden: Vec<f64>,
    tanh_cells: Vec<f64>,
}

fn seq_dims(x: &Tensor) -> Result<(usize, usize, usize), NnError> {
    match x.shape() {
        &[b, t, c] => Ok((b, t, c)),
        s => Err(NnError::ShapeMismatch(format!("recurrent input must be [batch, steps, channels], got {s:?}"))),
    }
}

fn time_index(k: usize, steps: usize, reverse: bool) -> usize {
    if reverse {
        steps - 1 - k
    } else {
        k
    }
}

fn project_inputs(x: &Tensor, wx: &Tensor, width: usize) -> Vec<f64> {
    let (b, t, c) = (x.dim(0), x.dim(1), x.dim(2));
    let mut xw = vec![0.0; b * t * width];
    gemm(
        b * t,
        c,
        width,
        View::row_major(x.data(), c),
        View::row_major(wx.data(), width),
        0.0,
        ViewMut::row_major(&mut xw, width),
    );
    xw
}

fn gather_output(
    hidden: &[f64],
    batch: usize,
    steps: usize,
    units: usize,
    reverse: bool,
    return_sequences: bool,
) -> Result<Tensor, NnError> {
    let bh = batch * units;
    if !return_sequences {
        return Tensor::new(vec![batch, units], hidden[steps * bh..(steps + 1) * bh].to_vec());
    }
    let mut out = vec![0.0; batch * steps * units];
    for k in 0..steps {
        let t = time_index(k, steps, reverse);
        let state = &hidden[(k + 1) * bh..(k + 2) * bh];
        for b in 0..batch {
            out[(b * steps + t) * units..(b * steps + t + 1) * units]
                .copy_from_slice(&state[b * units..(b + 1) * units]);
        }
    }
    Tensor::new(vec![batch, steps, units], out)
}

/// Adds the upstream gradient that reaches step `k` to `dh`.
fn add_output_grad(
    dh: &mut [f64],
    grad: &Tensor,
    k: usize,
    t: usize,
    steps: usize,
    units: usize,
    return_sequences: bool,
) {
    let g = grad.data();
    let batch = dh.len() / units;
    if return_sequences {
        for b in 0..batch {
            let src = &g[(b * steps + t) * units..(b * steps + t + 1) * units];
            for (d, s) in dh[b * units..(b + 1) * units].iter_mut().zip(src) {
                *d += s;
            }
        }
    } else if k + 1 == steps {
        for (d, s) in dh.iter_mut().zip(g) {
            *d += s;
        }
    }
}

fn column_sums(g: &[f64], cols: usize) -> Tensor {
    let mut s = vec![0.0; cols];
    for row in g.chunks_exact(cols) {
        for (a, b) in s.iter_mut().zip(row) {
            *a += b;
        }
    }
    Tensor::new(vec![cols], s).expect("vector shape")
}

fn input_grads(x: &Tensor, wx: &Tensor, dgates: &[f64], width: usize) -> Result<(Tensor, Tensor), NnError> {
    let (b, t, c) = (x.dim(0), x.dim(1), x.dim(2));
    let mut dwx = vec![0.0; c * width];
    gemm(
        c,
        b * t,
        width,
        View::transposed(x.data(), c),
        View::row_major(dgates, width),
        0.0,
        ViewMut::row_major(&mut dwx, width),
    );
    let mut dx = vec![0.0; b * t * c];
    gemm(
        b * t,
        width,
        c,
        View::row_major(dgates, width),
        View::transposed(wx.data(), width),
        0.0,
        ViewMut::row_major(&mut dx, c),
    );
    Ok((Tensor::new(vec![b, t, c], dx)?, Tensor::new(vec![c, width], dwx)?))
}

/// `params` is `[wx (C,4H), wh (H,4H), b (4H)]`.
pub(crate) fn lstm_forward(
    x: &Tensor,
    params: &[Tensor],
    units: usize,
    return_sequences: bool,
    reverse: bool,
) -> Result<(Tensor, LstmCache), NnError> {
    let (batch, steps, channels) = seq_dims(x)?;
    let (h, g4) = (units, 4 * units);
    let bh = batch * h;
    let (wx, wh, bias) = (&params[0], &params[1], params[2].data());
    let xw = project_inputs(x, wx, g4);

    let mut gates = vec![0.0; steps * batch * g4];
    let mut cells = vec![0.0; (steps + 1) * bh];
    let mut hidden = vec![0.0; (steps + 1) * bh];
    let mut tanh_cells = vec![0.0; steps * bh];
    let mut z = vec![0.0; batch * g4];

    for k in 0..steps {
        let t = time_index(k, steps, reverse);
        for b in 0..batch {
            let src = &xw[(b * steps + t) * g4..(b * steps + t + 1) * g4];
            for ((d, s), bb) in z[b * g4..(b + 1) * g4].iter_mut().zip(src).zip(bias) {
                *d = s + bb;
            }
        }
        gemm(
            batch,
            h,
            g4,
            View::row_major(&hidden, h).at(k * bh),
            View::row_major(wh.data(), g4),
            1.0,
            ViewMut::row_major(&mut z, g4),
        );
        let gk = &mut gates[k * batch * g4..(k + 1) * batch * g4];
        for b in 0..batch {
            let zr = &z[b * g4..(b + 1) * g4];
            let gr = &mut gk[b * g4..(b + 1) * g4];
            for j in 0..h {
                let i_g = sigmoid(zr[j]);
                let f_g = sigmoid(zr[h + j]);
                let c_g = zr[2 * h + j].tanh();
                let o_g = sigmoid(zr[3 * h + j]);
                gr[j] = i_g;
                gr[h + j] = f_g;
                gr[2 * h + j] = c_g;
                gr[3 * h + j] = o_g;
                let idx = b * h + j;
                let c = f_g * cells[k * bh + idx] + i_g * c_g;
                let tc = c.tanh();
                cells[(k + 1) * bh + idx] = c;
                tanh_cells[k * bh + idx] = tc;
                hidden[(k + 1) * bh + idx] = o_g * tc;
            }
        }
    }

    let out = gather_output(&hidden, batch, steps, h, reverse, return_sequences)?;
    Ok((
        out,
        LstmCache {
            batch,
            steps,
            channels,
            units,
            reverse,
            return_sequences,
            input: x.clone(),
            gates,
            cells,
            hidden,
            tanh_cells,
        },
    ))
}

pub(crate) fn lstm_backward(
    cache: &LstmCache,
    grad: &Tensor,
    params: &[Tensor],
) -> Result<(Tensor, Vec<Tensor>), NnError> {
    let LstmCache {
        batch,
        steps,
        channels,
        units: h,
        reverse,
        return_sequences,
        ..
    } = *cache;
    let g4 = 4 * h;
    let bh = batch * h;
    let (wx, wh) = (&params[0], &params[1]);

    let mut dgates = vec![0.0; batch * steps * g4];
    let mut dh_next = vec![0.0; bh];
    let mut dc_next = vec![0.0; bh];
    let mut dh = vec![0.0; bh];
    let mut dwh = vec![0.0; h * g4];

    for k in (0..steps).rev() {
        let t = time_index(k, steps, reverse);
        dh.copy_from_slice(&dh_next);
        add_output_grad(&mut dh, grad, k, t, steps, h, return_sequences);
        let gk = &cache.gates[k * batch * g4..(k + 1) * batch * g4];
        for b in 0..batch {
            let gr = &gk[b * g4..(b + 1) * g4];
            let row = (b * steps + t) * g4;
            for j in 0..h {
                let idx = b * h + j;
                let (i_g, f_g, c_g, o_g) = (gr[j], gr[h + j], gr[2 * h + j], gr[3 * h + j]);
                let tc = cache.tanh_cells[k * bh + idx];
                let c_prev = cache.cells[k * bh + idx];
                let d_o = dh[idx] * tc;
                let dc = dc_next[idx] + dh[idx] * o_g * (1.0 - tc * tc);
                dgates[row + j] = dc * c_g * i_g * (1.0 - i_g);
                dgates[row + h + j] = dc * c_prev * f_g * (1.0 - f_g);
                dgates[row + 2 * h + j] = dc * i_g * (1.0 - c_g * c_g);
                dgates[row + 3 * h + j] = d_o * o_g * (1.0 - o_g);
                dc_next[idx] = dc * f_g;
            }
        }
        let dz = View {
            data: &dgates,
            offset: t * g4,
            rs: steps * g4,
            cs: 1,
        };
        gemm(
            batch,
            g4,
            h,
            dz,
            View::transposed(wh.data(), g4),
            0.0,
            ViewMut::row_major(&mut dh_next, h),
        );
        gemm(
            h,
            batch,
            g4,
            View::transposed(&cache.hidden, h).at(k * bh),
            dz,
            1.0,
            ViewMut::row_major(&mut dwh, g4),
        );
    }

    let (dx, dwx) = input_grads(&cache.input, wx, &dgates, g4)?;
    debug_assert_eq!(dx.dim(2), channels);
    Ok((
        dx,
        vec![dwx, Tensor::new(vec![h, g4], dwh)?, column_sums(&dgates, g4)],
    ))
}

pub(crate) struct GruCache {
    batch: usize,
    steps: usize,
    units: usize,
    return_sequences: bool,
    input: Tensor,
    /// Activated `z, r, n`, `[step][batch][3H]`.
    gates: Vec<f64>,
    /// `r ⊙ h_prev`, `[step][batch][H]`.
    reset_hidden: Vec<f64>,
    hidden: Vec<f64>,
}

/// `params` is `[wx (C,3H), wh (H,3H), b (3H)]`.
pub(crate) fn gru_forward(
    x: &Tensor,
    params: &[Tensor],
    units: usize,
    return_sequences: bool,
) -> Result<(Tensor, GruCache), NnError> {
    let (batch, steps, _) = seq_dims(x)?;
    let (h, g3) = (units, 3 * units);
    let bh = batch * h;
    let (wx, wh, bias) = (&params[0], params[1].data(), params[2].data());
    let xw = project_inputs(x, wx, g3);

    let mut gates = vec![0.0; steps * batch * g3];
    let mut reset_hidden = vec![0.0; steps * bh];
    let mut hidden = vec![0.0; (steps + 1) * bh];
    let mut a = vec![0.0; batch * g3];

    for k in 0..steps {
        for b in 0..batch {
            let src = &xw[(b * steps + k) * g3..(b * steps + k + 1) * g3];
            for ((d, s), bb) in a[b * g3..(b + 1) * g3].iter_mut().zip(src).zip(bias) {
                *d = s + bb;
            }
        }
        gemm(
            batch,
            h,
            2 * h,
            View::row_major(&hidden, h).at(k * bh),
            View::row_major(wh, g3),
            1.0,
            ViewMut::row_major(&mut a, g3),
        );
        let gk = &mut gates[k * batch * g3..(k + 1) * batch * g3];
        let rk = &mut reset_hidden[k * bh..(k + 1) * bh];
        for b in 0..batch {
            for j in 0..h {
                let z = sigmoid(a[b * g3 + j]);
                let r = sigmoid(a[b * g3 + h + j]);
                gk[b * g3 + j] = z;
                gk[b * g3 + h + j] = r;
                rk[b * h + j] = r * hidden[k * bh + b * h + j];
            }
        }
        gemm(
            batch,
            h,
            h,
            View::row_major(rk, h),
            View::row_major(wh, g3).at(2 * h),
            1.0,
            ViewMut::row_major(&mut a, g3).at(2 * h),
        );
        for b in 0..batch {
            for j in 0..h {
                let n = a[b * g3 + 2 * h + j].tanh();
                let z = gk[b * g3 + j];
                gk[b * g3 + 2 * h + j] = n;
                let idx = b * h + j;
                hidden[(k + 1) * bh + idx] = (1.0 - z) * n + z * hidden[k * bh + idx];
            }
        }
    }

    let out = gather_output(&hidden, batch, steps, h, false, return_sequences)?;
    Ok((
        out,
        GruCache {
            batch,
            steps,
            units,
            return_sequences,
            input: x.clone(),
            gates,
            reset_hidden,
            hidden,
        },
    ))
}

pub(crate) fn gru_backward(
    cache: &GruCache,
    grad: &Tensor,
    params: &[Tensor],
) -> Result<(Tensor, Vec<Tensor>), NnError> {
    let GruCache {
        batch,
        steps,
        units: h,
        return_sequences,
        ..
    } = *cache;
    let g3 = 3 * h;
    let bh = batch * h;
    let (wx, wh) = (&params[0], params[1].data());

    let mut dgates = vec![0.0; batch * steps * g3];
    let mut dh_next = vec![0.0; bh];
    let mut dh = vec![0.0; bh];
    let mut d_rh = vec![0.0; bh];
    let mut dwh = vec![0.0; h * g3];

    for k in (0..steps).rev() {
        dh.copy_from_slice(&dh_next);
        add_output_grad(&mut dh, grad, k, k, steps, h, return_sequences);
        let gk = &cache.gates[k * batch * g3..(k + 1) * batch * g3];
        let h_prev = &cache.hidden[k * bh..(k + 1) * bh];
        for b in 0..batch {
            let row = (b * steps + k) * g3;
            for j in 0..h {
                let idx = b * h + j;
                let (z, n) = (gk[b * g3 + j], gk[b * g3 + 2 * h + j]);
                let dn = dh[idx] * (1.0 - z);
                let dz = dh[idx] * (h_prev[idx] - n);
                dgates[row + j] = dz * z * (1.0 - z);
                dgates[row + 2 * h + j] = dn * (1.0 - n * n);
                dh_next[idx] = dh[idx] * z;
            }
        }
        let d_cand = View {
            data: &dgates,
            offset: k * g3 + 2 * h,
            rs: steps * g3,
            cs: 1,
        };
        gemm(
            batch,
            h,
            h,
            d_cand,
            View {
                data: wh,
                offset: 2 * h,
                rs: 1,
                cs: g3,
            },
            0.0,
            ViewMut::row_major(&mut d_rh, h),
        );
        gemm(
            h,
            batch,
            h,
            View::transposed(&cache.reset_hidden, h).at(k * bh),
            d_cand,
            1.0,
            ViewMut::row_major(&mut dwh, g3).at(2 * h),
        );
        for b in 0..batch {
            let row = (b * steps + k) * g3;
            for j in 0..h {
                let idx = b * h + j;
                let r = gk[b * g3 + h + j];
                dgates[row + h + j] = d_rh[idx] * h_prev[idx] * r * (1.0 - r);
                dh_next[idx] += d_rh[idx] * r;
            }
        }
        let d_zr = View {
            data: &dgates,
            offset: k * g3,
            rs: steps * g3,
            cs: 1,
        };
        gemm(
            batch,
            2 * h,
            h,
            d_zr,
            View {
                data: wh,
                offset: 0,
                rs: 1,
                cs: g3,
            },
            1.0,
            ViewMut::row_major(&mut dh_next, h),
        );
        gemm(
            h,
            batch,
            2 * h,
            View::transposed(&cache.hidden, h).at(k * bh),
            d_zr,
            1.0,
            ViewMut::row_major(&mut dwh, g3),
        );
    }

    let (dx, dwx) = input_grads(&cache.input, wx, &dgates, g3)?;
    Ok((
        dx,
        vec![dwx, Tensor::new(vec![h, g3], dwh)?, column_sums(&dgates, g3)],
    ))
}
