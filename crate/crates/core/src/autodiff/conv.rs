// 3x3 / stride 1 / zero-pad convolution via im2col + GEMM, one sample per task.

use super::gemm;
use crate::par;

#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvDims {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub o: usize,
}

impl ConvDims {
    fn hw(&self) -> usize {
        self.h * self.w
    }
    fn k(&self) -> usize {
        self.c * 9
    }
}

fn im2col(d: &ConvDims, x: &[f64], cols: &mut [f64]) {
    let (h, w, hw) = (d.h, d.w, d.hw());
    for ci in 0..d.c {
        let plane = &x[ci * hw..(ci + 1) * hw];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &mut cols[(ci * 9 + ky * 3 + kx) * hw..][..hw];
                for y in 0..h {
                    let sy = y as isize + ky as isize - 1;
                    let dst = &mut row[y * w..(y + 1) * w];
                    if sy < 0 || sy >= h as isize {
                        dst.fill(0.0);
                        continue;
                    }
                    let src = &plane[sy as usize * w..(sy as usize + 1) * w];
                    for (xo, v) in dst.iter_mut().enumerate() {
                        let sx = xo as isize + kx as isize - 1;
                        *v = if sx < 0 || sx >= w as isize { 0.0 } else { src[sx as usize] };
                    }
                }
            }
        }
    }
}

fn col2im_add(d: &ConvDims, cols: &[f64], x: &mut [f64]) {
    let (h, w, hw) = (d.h, d.w, d.hw());
    for ci in 0..d.c {
        let plane = &mut x[ci * hw..(ci + 1) * hw];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &cols[(ci * 9 + ky * 3 + kx) * hw..][..hw];
                for y in 0..h {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let base = sy as usize * w;
                    for xo in 0..w {
                        let sx = xo as isize + kx as isize - 1;
                        if sx >= 0 && sx < w as isize {
                            plane[base + sx as usize] += row[y * w + xo];
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn forward(d: &ConvDims, input: &[f64], weight: &[f64]) -> Vec<f64> {
    let (hw, k, o) = (d.hw(), d.k(), d.o);
    let mut out = vec![0.0; d.n * o * hw];
    par::for_each_chunk(&mut out, o * hw, |i, dst| {
        let mut cols = vec![0.0; k * hw];
        im2col(d, &input[i * d.c * hw..(i + 1) * d.c * hw], &mut cols);
        gemm(o, k, hw, weight, false, &cols, false, dst, 0.0);
    });
    out
}

pub(crate) fn backward_input(d: &ConvDims, weight: &[f64], grad_out: &[f64], grad_in: &mut [f64]) {
    let (hw, k, o) = (d.hw(), d.k(), d.o);
    par::for_each_chunk(grad_in, d.c * hw, |i, dst| {
        let mut cols = vec![0.0; k * hw];
        gemm(k, o, hw, weight, true, &grad_out[i * o * hw..(i + 1) * o * hw], false, &mut cols, 0.0);
        col2im_add(d, &cols, dst);
    });
}

pub(crate) fn backward_weight(d: &ConvDims, input: &[f64], grad_out: &[f64], grad_w: &mut [f64]) {
    let (hw, k, o) = (d.hw(), d.k(), d.o);
    let partials = par::map_range(d.n, |i| {
        let mut cols = vec![0.0; k * hw];
        im2col(d, &input[i * d.c * hw..(i + 1) * d.c * hw], &mut cols);
        let mut dw = vec![0.0; o * k];
        gemm(o, hw, k, &grad_out[i * o * hw..(i + 1) * o * hw], false, &cols, true, &mut dw, 0.0);
        dw
    });
    // Summed in sample order so the result does not depend on scheduling.
    for dw in partials {
        grad_w.iter_mut().zip(&dw).for_each(|(g, v)| *g += v);
    }
}
