//! Raw numeric kernels behind the graph ops.
//!
//! All kernels write into caller-provided zeroed buffers. Parallel variants
//! split over disjoint output slices only, so results are bit-identical to
//! the sequential path regardless of thread count.

use rayon::prelude::*;

/// Below this many multiply-adds the rayon dispatch overhead dominates.
const PAR_THRESHOLD: usize = 1 << 16;

/// C[lead,m,n] += A[lead,m,k] · B[lead,k,n]
pub fn matmul_nn(a: &[f64], b: &[f64], out: &mut [f64], lead: usize, m: usize, k: usize, n: usize) {
    let row = |out_row: &mut [f64], r: usize| {
        let l = r / m;
        let i = r % m;
        let a_row = &a[(l * m + i) * k..(l * m + i) * k + k];
        let b_block = &b[l * k * n..(l + 1) * k * n];
        for (p, &av) in a_row.iter().enumerate() {
            let b_row = &b_block[p * n..p * n + n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    };
    if lead * m * k * n >= PAR_THRESHOLD {
        out.par_chunks_mut(n)
            .enumerate()
            .for_each(|(r, out_row)| row(out_row, r));
    } else {
        for (r, out_row) in out.chunks_mut(n).enumerate() {
            row(out_row, r);
        }
    }
}

/// C[lead,m,n] += A[lead,m,k] · B[lead,n,k]ᵀ  (rows of B dotted with rows of A)
pub fn matmul_nt(a: &[f64], b: &[f64], out: &mut [f64], lead: usize, m: usize, k: usize, n: usize) {
    let row = |out_row: &mut [f64], r: usize| {
        let l = r / m;
        let i = r % m;
        let a_row = &a[(l * m + i) * k..(l * m + i) * k + k];
        let b_block = &b[l * n * k..(l + 1) * n * k];
        for (j, o) in out_row.iter_mut().enumerate() {
            let b_row = &b_block[j * k..j * k + k];
            let mut s = 0.0;
            for (&av, &bv) in a_row.iter().zip(b_row) {
                s += av * bv;
            }
            *o += s;
        }
    };
    if lead * m * k * n >= PAR_THRESHOLD {
        out.par_chunks_mut(n)
            .enumerate()
            .for_each(|(r, out_row)| row(out_row, r));
    } else {
        for (r, out_row) in out.chunks_mut(n).enumerate() {
            row(out_row, r);
        }
    }
}

/// C[lead,k,n] += A[lead,m,k]ᵀ · B[lead,m,n]
pub fn matmul_tn(a: &[f64], b: &[f64], out: &mut [f64], lead: usize, m: usize, k: usize, n: usize) {
    // Sequential over m keeps the accumulation order fixed; parallel over lead.
    let block = |out_block: &mut [f64], l: usize| {
        let a_block = &a[l * m * k..(l + 1) * m * k];
        let b_block = &b[l * m * n..(l + 1) * m * n];
        for i in 0..m {
            let a_row = &a_block[i * k..i * k + k];
            let b_row = &b_block[i * n..i * n + n];
            for (p, &av) in a_row.iter().enumerate() {
                let out_row = &mut out_block[p * n..p * n + n];
                for (o, &bv) in out_row.iter_mut().zip(b_row) {
                    *o += av * bv;
                }
            }
        }
    };
    if lead > 1 && lead * m * k * n >= PAR_THRESHOLD {
        out.par_chunks_mut(k * n)
            .enumerate()
            .for_each(|(l, out_block)| block(out_block, l));
    } else {
        for (l, out_block) in out.chunks_mut(k * n).enumerate() {
            block(out_block, l);
        }
    }
}

/// Valid output extent of a correlation: floor((len + 2·pad − k)/stride) + 1.
pub fn conv_out_len(len: usize, k: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = len + 2 * pad;
    if k > padded || stride == 0 {
        return None;
    }
    Some((padded - k) / stride + 1)
}

/// Cross-correlation out[b,co,ot] = Σ_{ci,j} w[co,ci,j]·x[b,ci,ot·s−p+j].
#[allow(clippy::too_many_arguments)]
pub fn conv1d_forward(
    x: &[f64],
    w: &[f64],
    out: &mut [f64],
    batch: usize,
    c_in: usize,
    t_in: usize,
    c_out: usize,
    k: usize,
    stride: usize,
    pad: usize,
    t_out: usize,
) {
    let one = |out_bc: &mut [f64], idx: usize| {
        let b = idx / c_out;
        let co = idx % c_out;
        for ci in 0..c_in {
            let x_bc = &x[(b * c_in + ci) * t_in..(b * c_in + ci + 1) * t_in];
            let w_cc = &w[(co * c_in + ci) * k..(co * c_in + ci + 1) * k];
            for (j, &wv) in w_cc.iter().enumerate() {
                // ot·s − p + j in [0, t_in)
                let lo = pad.saturating_sub(j).div_ceil(stride);
                let hi = if t_in + pad > j {
                    (((t_in + pad - j - 1) / stride) + 1).min(t_out)
                } else {
                    0
                };
                for ot in lo..hi {
                    out_bc[ot] += wv * x_bc[ot * stride + j - pad];
                }
            }
        }
    };
    let work = batch * c_out * c_in * k * t_out;
    if work >= PAR_THRESHOLD && batch * c_out > 1 {
        out.par_chunks_mut(t_out)
            .enumerate()
            .for_each(|(idx, out_bc)| one(out_bc, idx));
    } else {
        for (idx, out_bc) in out.chunks_mut(t_out).enumerate() {
            one(out_bc, idx);
        }
    }
}

/// Gradients of conv1d w.r.t. input and weight.
#[allow(clippy::too_many_arguments)]
pub fn conv1d_backward(
    x: &[f64],
    w: &[f64],
    dy: &[f64],
    dx: Option<&mut [f64]>,
    dw: Option<&mut [f64]>,
    batch: usize,
    c_in: usize,
    t_in: usize,
    c_out: usize,
    k: usize,
    stride: usize,
    pad: usize,
    t_out: usize,
) {
    if let Some(dx) = dx {
        let one = |dx_bc: &mut [f64], idx: usize| {
            let b = idx / c_in;
            let ci = idx % c_in;
            for co in 0..c_out {
                let dy_bc = &dy[(b * c_out + co) * t_out..(b * c_out + co + 1) * t_out];
                let w_cc = &w[(co * c_in + ci) * k..(co * c_in + ci + 1) * k];
                for (j, &wv) in w_cc.iter().enumerate() {
                    let lo = pad.saturating_sub(j).div_ceil(stride);
                    let hi = if t_in + pad > j {
                        (((t_in + pad - j - 1) / stride) + 1).min(t_out)
                    } else {
                        0
                    };
                    for ot in lo..hi {
                        dx_bc[ot * stride + j - pad] += wv * dy_bc[ot];
                    }
                }
            }
        };
        let work = batch * c_out * c_in * k * t_out;
        if work >= PAR_THRESHOLD && batch * c_in > 1 {
            dx.par_chunks_mut(t_in)
                .enumerate()
                .for_each(|(idx, dx_bc)| one(dx_bc, idx));
        } else {
            for (idx, dx_bc) in dx.chunks_mut(t_in).enumerate() {
                one(dx_bc, idx);
            }
        }
    }
    if let Some(dw) = dw {
        let one = |dw_c: &mut [f64], co: usize| {
            for b in 0..batch {
                let dy_bc = &dy[(b * c_out + co) * t_out..(b * c_out + co + 1) * t_out];
                for ci in 0..c_in {
                    let x_bc = &x[(b * c_in + ci) * t_in..(b * c_in + ci + 1) * t_in];
                    for j in 0..k {
                        let lo = pad.saturating_sub(j).div_ceil(stride);
                        let hi = if t_in + pad > j {
                            (((t_in + pad - j - 1) / stride) + 1).min(t_out)
                        } else {
                            0
                        };
                        let mut s = 0.0;
                        for ot in lo..hi {
                            s += dy_bc[ot] * x_bc[ot * stride + j - pad];
                        }
                        dw_c[ci * k + j] += s;
                    }
                }
            }
        };
        let work = batch * c_out * c_in * k * t_out;
        if work >= PAR_THRESHOLD && c_out > 1 {
            dw.par_chunks_mut(c_in * k)
                .enumerate()
                .for_each(|(co, dw_c)| one(dw_c, co));
        } else {
            for (co, dw_c) in dw.chunks_mut(c_in * k).enumerate() {
                one(dw_c, co);
            }
        }
    }
}

/// Cross-correlation over (freq, time): out[b,co,of,ot].
#[allow(clippy::too_many_arguments)]
pub fn conv2d_forward(
    x: &[f64],
    w: &[f64],
    out: &mut [f64],
    batch: usize,
    c_in: usize,
    f_in: usize,
    t_in: usize,
    c_out: usize,
    kf: usize,
    kt: usize,
    stride: (usize, usize),
    pad: (usize, usize),
    f_out: usize,
    t_out: usize,
) {
    let (sf, st) = stride;
    let (pf, pt) = pad;
    let one = |out_bc: &mut [f64], idx: usize| {
        let b = idx / c_out;
        let co = idx % c_out;
        for ci in 0..c_in {
            let x_bc = &x[(b * c_in + ci) * f_in * t_in..(b * c_in + ci + 1) * f_in * t_in];
            let w_cc = &w[(co * c_in + ci) * kf * kt..(co * c_in + ci + 1) * kf * kt];
            for of in 0..f_out {
                let out_row = &mut out_bc[of * t_out..(of + 1) * t_out];
                for (jf, w_row) in w_cc.chunks(kt).enumerate() {
                    let xf = of * sf + jf;
                    if xf < pf || xf - pf >= f_in {
                        continue;
                    }
                    let x_row = &x_bc[(xf - pf) * t_in..(xf - pf + 1) * t_in];
                    for (jt, &wv) in w_row.iter().enumerate() {
                        let lo = pt.saturating_sub(jt).div_ceil(st);
                        let hi = if t_in + pt > jt {
                            (((t_in + pt - jt - 1) / st) + 1).min(t_out)
                        } else {
                            0
                        };
                        for ot in lo..hi {
                            out_row[ot] += wv * x_row[ot * st + jt - pt];
                        }
                    }
                }
            }
        }
    };
    let work = batch * c_out * c_in * kf * kt * f_out * t_out;
    if work >= PAR_THRESHOLD && batch * c_out > 1 {
        out.par_chunks_mut(f_out * t_out)
            .enumerate()
            .for_each(|(idx, out_bc)| one(out_bc, idx));
    } else {
        for (idx, out_bc) in out.chunks_mut(f_out * t_out).enumerate() {
            one(out_bc, idx);
        }
    }
}

/// Gradients of conv2d w.r.t. input and weight.
#[allow(clippy::too_many_arguments)]
pub fn conv2d_backward(
    x: &[f64],
    w: &[f64],
    dy: &[f64],
    dx: Option<&mut [f64]>,
    dw: Option<&mut [f64]>,
    batch: usize,
    c_in: usize,
    f_in: usize,
    t_in: usize,
    c_out: usize,
    kf: usize,
    kt: usize,
    stride: (usize, usize),
    pad: (usize, usize),
    f_out: usize,
    t_out: usize,
) {
    let (sf, st) = stride;
    let (pf, pt) = pad;
    if let Some(dx) = dx {
        let one = |dx_bc: &mut [f64], idx: usize| {
            let b = idx / c_in;
            let ci = idx % c_in;
            for co in 0..c_out {
                let dy_bc = &dy[(b * c_out + co) * f_out * t_out..(b * c_out + co + 1) * f_out * t_out];
                let w_cc = &w[(co * c_in + ci) * kf * kt..(co * c_in + ci + 1) * kf * kt];
                for of in 0..f_out {
                    let dy_row = &dy_bc[of * t_out..(of + 1) * t_out];
                    for (jf, w_row) in w_cc.chunks(kt).enumerate() {
                        let xf = of * sf + jf;
                        if xf < pf || xf - pf >= f_in {
                            continue;
                        }
                        let dx_row = &mut dx_bc[(xf - pf) * t_in..(xf - pf + 1) * t_in];
                        for (jt, &wv) in w_row.iter().enumerate() {
                            let lo = pt.saturating_sub(jt).div_ceil(st);
                            let hi = if t_in + pt > jt {
                                (((t_in + pt - jt - 1) / st) + 1).min(t_out)
                            } else {
                                0
                            };
                            for ot in lo..hi {
                                dx_row[ot * st + jt - pt] += wv * dy_row[ot];
                            }
                        }
                    }
                }
            }
        };
        let work = batch * c_out * c_in * kf * kt * f_out * t_out;
        if work >= PAR_THRESHOLD && batch * c_in > 1 {
            dx.par_chunks_mut(f_in * t_in)
                .enumerate()
                .for_each(|(idx, dx_bc)| one(dx_bc, idx));
        } else {
            for (idx, dx_bc) in dx.chunks_mut(f_in * t_in).enumerate() {
                one(dx_bc, idx);
            }
        }
    }
    if let Some(dw) = dw {
        let one = |dw_c: &mut [f64], co: usize| {
            for b in 0..batch {
                let dy_bc = &dy[(b * c_out + co) * f_out * t_out..(b * c_out + co + 1) * f_out * t_out];
                for ci in 0..c_in {
                    let x_bc =
                        &x[(b * c_in + ci) * f_in * t_in..(b * c_in + ci + 1) * f_in * t_in];
                    for of in 0..f_out {
                        let dy_row = &dy_bc[of * t_out..(of + 1) * t_out];
                        for jf in 0..kf {
                            let xf = of * sf + jf;
                            if xf < pf || xf - pf >= f_in {
                                continue;
                            }
                            let x_row = &x_bc[(xf - pf) * t_in..(xf - pf + 1) * t_in];
                            for jt in 0..kt {
                                let lo = pt.saturating_sub(jt).div_ceil(st);
                                let hi = if t_in + pt > jt {
                                    (((t_in + pt - jt - 1) / st) + 1).min(t_out)
                                } else {
                                    0
                                };
                                let mut s = 0.0;
                                for ot in lo..hi {
                                    s += dy_row[ot] * x_row[ot * st + jt - pt];
                                }
                                dw_c[ci * kf * kt + jf * kt + jt] += s;
                            }
                        }
                    }
                }
            }
        };
        let work = batch * c_out * c_in * kf * kt * f_out * t_out;
        if work >= PAR_THRESHOLD && c_out > 1 {
            dw.par_chunks_mut(c_in * kf * kt)
                .enumerate()
                .for_each(|(co, dw_c)| one(dw_c, co));
        } else {
            for (co, dw_c) in dw.chunks_mut(c_in * kf * kt).enumerate() {
                one(dw_c, co);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_nn_small() {
        // [[1,2],[3,4]] · [[5,6],[7,8]] = [[19,22],[43,50]]
        let a = [1.0, 2.0, 3.0, 4.0];
        let b = [5.0, 6.0, 7.0, 8.0];
        let mut c = [0.0; 4];
        matmul_nn(&a, &b, &mut c, 1, 2, 2, 2);
        assert_eq!(c, [19.0, 22.0, 43.0, 50.0]);
    }

    #[test]
    fn matmul_transposed_variants_agree_with_naive() {
        let a: Vec<f64> = (0..6).map(|i| i as f64 * 0.5 - 1.0).collect(); // 2x3
        let b: Vec<f64> = (0..6).map(|i| (i as f64).sin()).collect(); // 2x3

        // nt: A[2,3] · B[2,3]ᵀ = [2,2]
        let mut c = vec![0.0; 4];
        matmul_nt(&a, &b, &mut c, 1, 2, 3, 2);
        for i in 0..2 {
            for j in 0..2 {
                let mut s = 0.0;
                for p in 0..3 {
                    s += a[i * 3 + p] * b[j * 3 + p];
                }
                assert!((c[i * 2 + j] - s).abs() < 1e-12);
            }
        }

        // tn: A[2,3]ᵀ · B[2,3] = [3,3]
        let mut c = vec![0.0; 9];
        matmul_tn(&a, &b, &mut c, 1, 2, 3, 3);
        for p in 0..3 {
            for j in 0..3 {
                let mut s = 0.0;
                for i in 0..2 {
                    s += a[i * 3 + p] * b[i * 3 + j];
                }
                assert!((c[p * 3 + j] - s).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn conv_out_len_formula() {
        assert_eq!(conv_out_len(30, 3, 3, 0), Some(10));
        assert_eq!(conv_out_len(5, 1, 1, 0), Some(5));
        assert_eq!(conv_out_len(4, 3, 1, 0), Some(2));
        assert_eq!(conv_out_len(2, 5, 1, 0), None);
        assert_eq!(conv_out_len(2, 5, 1, 2), Some(2));
    }
}
