//! Frozen convolution blocks.
//!
//! The audio feature stack only ever runs forward (weights frozen, inputs are
//! data). The visual-speech surrogate is also frozen but sits inside the
//! perceptual loss, so its 2D and temporal convolutions expose
//! `backward_input` to propagate gradients to pixels.

use ndarray::{Array1, Array2, Array3};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Valid (no padding) strided 1D convolution over (channels, length).
#[derive(Debug, Clone, PartialEq)]
pub struct Conv1dValid {
    /// (c_out, c_in, k)
    pub weight: Array3<f64>,
    pub bias: Array1<f64>,
    pub stride: usize,
}

impl Conv1dValid {
    pub fn new(rng: &mut ChaCha8Rng, c_in: usize, c_out: usize, k: usize, stride: usize) -> Self {
        let std = (2.0 / (c_in * k) as f64).sqrt();
        Self {
            weight: Array3::from_shape_fn((c_out, c_in, k), |_| {
                rng.random_range(-1.0f64..1.0) * std
            }),
            bias: Array1::from_shape_fn(c_out, |_| rng.random_range(-0.05f64..0.05)),
            stride: stride.max(1),
        }
    }

    pub fn out_len(&self, len: usize) -> usize {
        let k = self.weight.shape()[2];
        if len < k {
            0
        } else {
            (len - k) / self.stride + 1
        }
    }

    pub fn forward(&self, x: &Array2<f64>) -> Array2<f64> {
        let (c_out, c_in, k) = (
            self.weight.shape()[0],
            self.weight.shape()[1],
            self.weight.shape()[2],
        );
        assert_eq!(x.shape()[0], c_in);
        let len = x.shape()[1];
        let out_len = self.out_len(len);
        let mut y = Array2::zeros((c_out, out_len));
        for t in 0..out_len {
            let base = t * self.stride;
            for co in 0..c_out {
                let mut acc = self.bias[co];
                for ci in 0..c_in {
                    for dk in 0..k {
                        acc += self.weight[[co, ci, dk]] * x[[ci, base + dk]];
                    }
                }
                y[[co, t]] = acc;
            }
        }
        y
    }
}

/// Valid strided 2D convolution over (channels, height, width), with input
/// gradients for the perceptual-loss path.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv2dValid {
    /// (c_out, c_in, k, k)
    pub weight: ndarray::Array4<f64>,
    pub bias: Array1<f64>,
    pub stride: usize,
}

impl Conv2dValid {
    pub fn new(rng: &mut ChaCha8Rng, c_in: usize, c_out: usize, k: usize, stride: usize) -> Self {
        let std = (2.0 / (c_in * k * k) as f64).sqrt();
        Self {
            weight: ndarray::Array4::from_shape_fn((c_out, c_in, k, k), |_| {
                rng.random_range(-1.0f64..1.0) * std
            }),
            bias: Array1::from_shape_fn(c_out, |_| rng.random_range(-0.05f64..0.05)),
            stride: stride.max(1),
        }
    }

    pub fn out_hw(&self, h: usize, w: usize) -> (usize, usize) {
        let k = self.weight.shape()[2];
        ((h - k) / self.stride + 1, (w - k) / self.stride + 1)
    }

    pub fn forward(&self, x: &Array3<f64>) -> Array3<f64> {
        let (c_out, c_in, k) = (
            self.weight.shape()[0],
            self.weight.shape()[1],
            self.weight.shape()[2],
        );
        assert_eq!(x.shape()[0], c_in);
        let (h, w) = (x.shape()[1], x.shape()[2]);
        let (oh, ow) = self.out_hw(h, w);
        let mut y = Array3::zeros((c_out, oh, ow));
        for co in 0..c_out {
            for i in 0..oh {
                for j in 0..ow {
                    let (bi, bj) = (i * self.stride, j * self.stride);
                    let mut acc = self.bias[co];
                    for ci in 0..c_in {
                        for di in 0..k {
                            for dj in 0..k {
                                acc += self.weight[[co, ci, di, dj]] * x[[ci, bi + di, bj + dj]];
                            }
                        }
                    }
                    y[[co, i, j]] = acc;
                }
            }
        }
        y
    }

    /// dL/dx given dL/dy (weights are frozen, no weight gradients).
    pub fn backward_input(&self, d_y: &Array3<f64>, in_shape: (usize, usize, usize)) -> Array3<f64> {
        let (c_out, c_in, k) = (
            self.weight.shape()[0],
            self.weight.shape()[1],
            self.weight.shape()[2],
        );
        let mut d_x = Array3::zeros(in_shape);
        let (oh, ow) = (d_y.shape()[1], d_y.shape()[2]);
        for co in 0..c_out {
            for i in 0..oh {
                for j in 0..ow {
                    let g = d_y[[co, i, j]];
                    if g == 0.0 {
                        continue;
                    }
                    let (bi, bj) = (i * self.stride, j * self.stride);
                    for ci in 0..c_in {
                        for di in 0..k {
                            for dj in 0..k {
                                d_x[[ci, bi + di, bj + dj]] += self.weight[[co, ci, di, dj]] * g;
                            }
                        }
                    }
                }
            }
        }
        d_x
    }
}

/// 1D temporal convolution over (frames, channels) with replicate padding,
/// so constant inputs stay constant at the sequence edges.
#[derive(Debug, Clone, PartialEq)]
pub struct TemporalConvSame {
    /// (c_out, c_in, k), k odd.
    pub weight: Array3<f64>,
    pub bias: Array1<f64>,
}

impl TemporalConvSame {
    pub fn new(rng: &mut ChaCha8Rng, c_in: usize, c_out: usize, k: usize) -> Self {
        assert!(k % 2 == 1, "temporal kernel must be odd");
        let std = (2.0 / (c_in * k) as f64).sqrt();
        Self {
            weight: Array3::from_shape_fn((c_out, c_in, k), |_| {
                rng.random_range(-1.0f64..1.0) * std
            }),
            bias: Array1::from_shape_fn(c_out, |_| rng.random_range(-0.05f64..0.05)),
        }
    }

    pub fn forward(&self, x: &Array2<f64>) -> Array2<f64> {
        let (c_out, c_in, k) = (
            self.weight.shape()[0],
            self.weight.shape()[1],
            self.weight.shape()[2],
        );
        assert_eq!(x.shape()[1], c_in);
        let t_len = x.shape()[0];
        let half = (k / 2) as i64;
        let mut y = Array2::zeros((t_len, c_out));
        for t in 0..t_len {
            for co in 0..c_out {
                let mut acc = self.bias[co];
                for dk in 0..k {
                    let src = (t as i64 + dk as i64 - half).clamp(0, t_len as i64 - 1) as usize;
                    for ci in 0..c_in {
                        acc += self.weight[[co, ci, dk]] * x[[src, ci]];
                    }
                }
                y[[t, co]] = acc;
            }
        }
        y
    }

    pub fn backward_input(&self, d_y: &Array2<f64>, t_len: usize) -> Array2<f64> {
        let (c_out, c_in, k) = (
            self.weight.shape()[0],
            self.weight.shape()[1],
            self.weight.shape()[2],
        );
        let half = (k / 2) as i64;
        let mut d_x = Array2::zeros((t_len, c_in));
        for t in 0..t_len {
            for co in 0..c_out {
                let g = d_y[[t, co]];
                if g == 0.0 {
                    continue;
                }
                for dk in 0..k {
                    let src = (t as i64 + dk as i64 - half).clamp(0, t_len as i64 - 1) as usize;
                    for ci in 0..c_in {
                        d_x[[src, ci]] += self.weight[[co, ci, dk]] * g;
                    }
                }
            }
        }
        d_x
    }
}
