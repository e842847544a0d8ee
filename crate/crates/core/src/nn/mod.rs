//! A small convolutional network executor with manual backpropagation.
//! Parameters live in one flat vector; layers refer to it by offset.

mod gemm;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use gemm::{gemm, Mat};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Shape {
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape {
    pub fn len(&self) -> usize {
        self.c * self.h * self.w
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Layer {
    Conv {
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        w_off: usize,
        b_off: usize,
    },
    Relu,
    MaxPool2,
    AvgPool2,
    GlobalAvgPool,
    Linear {
        nin: usize,
        nout: usize,
        w_off: usize,
        b_off: usize,
    },
    /// Copies a single channel into n identical channels.
    Replicate(usize),
}

impl Layer {
    pub fn param_count(&self) -> usize {
        match *self {
            Layer::Conv {
                cin, cout, kernel, ..
            } => cout * cin * kernel * kernel + cout,
            Layer::Linear { nin, nout, .. } => nin * nout + nout,
            _ => 0,
        }
    }

    fn output_shape(&self, s: Shape) -> Shape {
        match *self {
            Layer::Conv {
                cout,
                kernel,
                stride,
                pad,
                ..
            } => Shape {
                c: cout,
                h: (s.h + 2 * pad - kernel) / stride + 1,
                w: (s.w + 2 * pad - kernel) / stride + 1,
            },
            Layer::Relu => s,
            Layer::MaxPool2 | Layer::AvgPool2 => Shape {
                c: s.c,
                h: s.h / 2,
                w: s.w / 2,
            },
            Layer::GlobalAvgPool => Shape { c: s.c, h: 1, w: 1 },
            Layer::Linear { nout, .. } => Shape { c: nout, h: 1, w: 1 },
            Layer::Replicate(n) => Shape { c: n, ..s },
        }
    }
}

/// Layer description used to assemble a network.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerSpec {
    Conv {
        cout: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
    },
    Relu,
    MaxPool2,
    AvgPool2,
    GlobalAvgPool,
    Linear { nout: usize },
    Replicate(usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    layers: Vec<Layer>,
    shapes: Vec<Shape>,
    n_params: usize,
}

/// Intermediate values of one forward pass, consumed by `backward`.
pub struct Tape {
    inputs: Vec<Vec<f64>>,
    argmax: Vec<Vec<u32>>,
}

impl Network {
    pub fn new(input: Shape, specs: &[LayerSpec]) -> Self {
        let mut layers = Vec::with_capacity(specs.len());
        let mut shapes = vec![input];
        let mut off = 0;
        let mut s = input;
        for spec in specs {
            let layer = match *spec {
                LayerSpec::Conv {
                    cout,
                    kernel,
                    stride,
                    pad,
                } => {
                    let w = cout * s.c * kernel * kernel;
                    let l = Layer::Conv {
                        cin: s.c,
                        cout,
                        kernel,
                        stride,
                        pad,
                        w_off: off,
                        b_off: off + w,
                    };
                    off += w + cout;
                    l
                }
                LayerSpec::Linear { nout } => {
                    let nin = s.len();
                    let l = Layer::Linear {
                        nin,
                        nout,
                        w_off: off,
                        b_off: off + nin * nout,
                    };
                    off += nin * nout + nout;
                    l
                }
                LayerSpec::Relu => Layer::Relu,
                LayerSpec::MaxPool2 => Layer::MaxPool2,
                LayerSpec::AvgPool2 => Layer::AvgPool2,
                LayerSpec::GlobalAvgPool => Layer::GlobalAvgPool,
                LayerSpec::Replicate(n) => {
                    assert_eq!(s.c, 1, "replication expects a single channel");
                    Layer::Replicate(n)
                }
            };
            s = layer.output_shape(s);
            assert!(!s.is_empty(), "layer {layer:?} produced an empty tensor");
            layers.push(layer);
            shapes.push(s);
        }
        Network {
            layers,
            shapes,
            n_params: off,
        }
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn input_shape(&self) -> Shape {
        self.shapes[0]
    }

    pub fn output_shape(&self) -> Shape {
        *self.shapes.last().expect("input shape present")
    }

    pub fn param_count(&self) -> usize {
        self.n_params
    }

    /// He-normal weights, zero biases.
    pub fn init_params<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        let mut p = vec![0.0; self.n_params];
        for layer in &self.layers {
            let (off, n, fan_in) = match *layer {
                Layer::Conv {
                    cin,
                    cout,
                    kernel,
                    w_off,
                    ..
                } => (w_off, cout * cin * kernel * kernel, cin * kernel * kernel),
                Layer::Linear { nin, nout, w_off, .. } => (w_off, nin * nout, nin),
                _ => continue,
            };
            let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("finite std");
            for v in &mut p[off..off + n] {
                *v = normal.sample(rng);
            }
        }
        p
    }

    pub fn forward(&self, params: &[f64], x: &[f64]) -> Vec<f64> {
        self.run(params, x, None)
    }

    pub fn forward_train(&self, params: &[f64], x: &[f64]) -> (Vec<f64>, Tape) {
        let mut tape = Tape {
            inputs: Vec::with_capacity(self.layers.len()),
            argmax: Vec::new(),
        };
        let out = self.run(params, x, Some(&mut tape));
        (out, tape)
    }

    fn run(&self, params: &[f64], x: &[f64], mut tape: Option<&mut Tape>) -> Vec<f64> {
        assert_eq!(x.len(), self.input_shape().len(), "input size");
        let mut cur = x.to_vec();
        for (li, layer) in self.layers.iter().enumerate() {
            let s = self.shapes[li];
            let o = self.shapes[li + 1];
            let next = match *layer {
                Layer::Conv {
                    cin,
                    cout,
                    kernel,
                    stride,
                    pad,
                    w_off,
                    b_off,
                } => {
                    let kk = cin * kernel * kernel;
                    let p = o.h * o.w;
                    let mut y = vec![0.0; cout * p];
                    for (co, row) in y.chunks_mut(p).enumerate() {
                        row.fill(params[b_off + co]);
                    }
                    let w = Mat::new(&params[w_off..w_off + cout * kk], cout, kk);
                    if is_pointwise(kernel, stride, pad) {
                        gemm(w, Mat::new(&cur, kk, p), 1.0, &mut y);
                    } else {
                        let cols = im2col(&cur, s, kernel, stride, pad, o);
                        gemm(w, Mat::new(&cols, kk, p), 1.0, &mut y);
                    }
                    y
                }
                Layer::Relu => cur.iter().map(|&v| v.max(0.0)).collect(),
                Layer::MaxPool2 => {
                    let (y, idx) = max_pool(&cur, s, o);
                    if let Some(t) = tape.as_deref_mut() {
                        t.argmax.push(idx);
                    }
                    y
                }
                Layer::AvgPool2 => avg_pool(&cur, s, o),
                Layer::GlobalAvgPool => cur
                    .chunks(s.h * s.w)
                    .map(|c| c.iter().sum::<f64>() / c.len() as f64)
                    .collect(),
                Layer::Linear {
                    nin,
                    nout,
                    w_off,
                    b_off,
                } => {
                    let mut y = params[b_off..b_off + nout].to_vec();
                    gemm(
                        Mat::new(&params[w_off..w_off + nin * nout], nout, nin),
                        Mat::new(&cur, nin, 1),
                        1.0,
                        &mut y,
                    );
                    y
                }
                Layer::Replicate(n) => cur.repeat(n),
            };
            if let Some(t) = tape.as_deref_mut() {
                t.inputs.push(std::mem::replace(&mut cur, next));
            } else {
                cur = next;
            }
        }
        cur
    }

    /// Accumulates dL/dθ into `grad` given dL/d(output).
    pub fn backward(&self, params: &[f64], tape: &Tape, dout: &[f64], grad: &mut [f64]) {
        assert_eq!(grad.len(), self.n_params);
        let mut g = dout.to_vec();
        let mut pool_idx = tape.argmax.len();
        for li in (0..self.layers.len()).rev() {
            let s = self.shapes[li];
            let o = self.shapes[li + 1];
            let x = &tape.inputs[li];
            g = match self.layers[li] {
                Layer::Conv {
                    cin,
                    cout,
                    kernel,
                    stride,
                    pad,
                    w_off,
                    b_off,
                } => {
                    let kk = cin * kernel * kernel;
                    let p = o.h * o.w;
                    for (co, row) in g.chunks(p).enumerate() {
                        grad[b_off + co] += row.iter().sum::<f64>();
                    }
                    let dy = Mat::new(&g, cout, p);
                    let pointwise = is_pointwise(kernel, stride, pad);
                    let cols_owned;
                    let cols = if pointwise {
                        x.as_slice()
                    } else {
                        cols_owned = im2col(x, s, kernel, stride, pad, o);
                        cols_owned.as_slice()
                    };
                    gemm(dy, Mat::new(cols, kk, p).t(), 1.0, &mut grad[w_off..w_off + cout * kk]);
                    if li == 0 {
                        break;
                    }
                    let mut dcols = vec![0.0; kk * p];
                    gemm(Mat::new(&params[w_off..w_off + cout * kk], cout, kk).t(), dy, 0.0, &mut dcols);
                    if pointwise {
                        dcols
                    } else {
                        col2im(&dcols, s, kernel, stride, pad, o)
                    }
                }
                Layer::Relu => g
                    .iter()
                    .zip(x)
                    .map(|(&d, &v)| if v > 0.0 { d } else { 0.0 })
                    .collect(),
                Layer::MaxPool2 => {
                    pool_idx -= 1;
                    let mut dx = vec![0.0; s.len()];
                    for (d, &i) in g.iter().zip(&tape.argmax[pool_idx]) {
                        dx[i as usize] += d;
                    }
                    dx
                }
                Layer::AvgPool2 => {
                    let mut dx = vec![0.0; s.len()];
                    for c in 0..s.c {
                        for y in 0..o.h {
                            for xo in 0..o.w {
                                let d = 0.25 * g[(c * o.h + y) * o.w + xo];
                                for (dy_, dx_) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                                    dx[(c * s.h + 2 * y + dy_) * s.w + 2 * xo + dx_] += d;
                                }
                            }
                        }
                    }
                    dx
                }
                Layer::GlobalAvgPool => {
                    let hw = s.h * s.w;
                    let mut dx = vec![0.0; s.len()];
                    for (c, chunk) in dx.chunks_mut(hw).enumerate() {
                        chunk.fill(g[c] / hw as f64);
                    }
                    dx
                }
                Layer::Linear {
                    nin,
                    nout,
                    w_off,
                    b_off,
                } => {
                    for (b, d) in grad[b_off..b_off + nout].iter_mut().zip(&g) {
                        *b += d;
                    }
                    gemm(Mat::new(&g, nout, 1), Mat::new(x, nin, 1).t(), 1.0, &mut grad[w_off..w_off + nin * nout]);
                    let mut dx = vec![0.0; nin];
                    gemm(Mat::new(&params[w_off..w_off + nin * nout], nout, nin).t(), Mat::new(&g, nout, 1), 0.0, &mut dx);
                    dx
                }
                Layer::Replicate(n) => {
                    let hw = s.h * s.w;
                    let mut dx = vec![0.0; hw];
                    for c in 0..n {
                        for (a, b) in dx.iter_mut().zip(&g[c * hw..(c + 1) * hw]) {
                            *a += b;
                        }
                    }
                    dx
                }
            };
        }
    }
}

fn is_pointwise(kernel: usize, stride: usize, pad: usize) -> bool {
    kernel == 1 && stride == 1 && pad == 0
}

fn im2col(x: &[f64], s: Shape, k: usize, stride: usize, pad: usize, o: Shape) -> Vec<f64> {
    let p = o.h * o.w;
    let mut cols = vec![0.0; s.c * k * k * p];
    for c in 0..s.c {
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let dst = &mut cols[row * p..(row + 1) * p];
                for oy in 0..o.h {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= s.h as isize {
                        continue;
                    }
                    let src = &x[(c * s.h + iy as usize) * s.w..][..s.w];
                    for ox in 0..o.w {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix >= 0 && ix < s.w as isize {
                            dst[oy * o.w + ox] = src[ix as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im(cols: &[f64], s: Shape, k: usize, stride: usize, pad: usize, o: Shape) -> Vec<f64> {
    let p = o.h * o.w;
    let mut x = vec![0.0; s.len()];
    for c in 0..s.c {
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let src = &cols[row * p..(row + 1) * p];
                for oy in 0..o.h {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= s.h as isize {
                        continue;
                    }
                    let base = (c * s.h + iy as usize) * s.w;
                    for ox in 0..o.w {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix >= 0 && ix < s.w as isize {
                            x[base + ix as usize] += src[oy * o.w + ox];
                        }
                    }
                }
            }
        }
    }
    x
}

fn max_pool(x: &[f64], s: Shape, o: Shape) -> (Vec<f64>, Vec<u32>) {
    let mut y = Vec::with_capacity(o.len());
    let mut idx = Vec::with_capacity(o.len());
    for c in 0..s.c {
        for oy in 0..o.h {
            for ox in 0..o.w {
                let mut best = usize::MAX;
                let mut bv = f64::NEG_INFINITY;
                for (dy, dx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                    let i = (c * s.h + 2 * oy + dy) * s.w + 2 * ox + dx;
                    if best == usize::MAX || x[i] > bv {
                        best = i;
                        bv = x[i];
                    }
                }
                y.push(bv);
                idx.push(best as u32);
            }
        }
    }
    (y, idx)
}

fn avg_pool(x: &[f64], s: Shape, o: Shape) -> Vec<f64> {
    let mut y = Vec::with_capacity(o.len());
    for c in 0..s.c {
        for oy in 0..o.h {
            let r0 = &x[(c * s.h + 2 * oy) * s.w..][..s.w];
            let r1 = &x[(c * s.h + 2 * oy + 1) * s.w..][..s.w];
            for ox in 0..o.w {
                y.push(0.25 * (r0[2 * ox] + r0[2 * ox + 1] + r1[2 * ox] + r1[2 * ox + 1]));
            }
        }
    }
    y
}
