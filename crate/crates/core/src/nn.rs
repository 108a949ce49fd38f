//! Minimal reverse-mode machinery for the translator network: a CHW `f32`
//! tensor, a flat parameter store, and a tape of the handful of ops the
//! encoder–decoder needs. Convolutions go through im2col + GEMM.

use ndarray::linalg::general_mat_mul;
use ndarray::{ArrayView2, ArrayViewMut2};

/// Dense `C×H×W` activation. Vectors are stored as `C×1×1`.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<f32>,
}

impl Tensor {
    pub fn zeros(c: usize, h: usize, w: usize) -> Self {
        Tensor {
            c,
            h,
            w,
            data: vec![0.0; c * h * w],
        }
    }

    pub fn from_vec(c: usize, h: usize, w: usize, data: Vec<f32>) -> Self {
        assert_eq!(data.len(), c * h * w, "tensor data length");
        Tensor { c, h, w, data }
    }

    pub fn vector(data: Vec<f32>) -> Self {
        let c = data.len();
        Tensor { c, h: 1, w: 1, data }
    }

    pub fn plane(&self) -> usize {
        self.h * self.w
    }

    pub fn same_shape(&self, other: &Tensor) -> bool {
        self.c == other.c && self.h == other.h && self.w == other.w
    }

    fn add_assign(&mut self, other: &Tensor) {
        debug_assert!(self.same_shape(other));
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }
}

/// Location of one named parameter tensor inside the flat store.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamSlot {
    pub name: String,
    pub offset: usize,
    pub len: usize,
}

#[derive(Clone, Debug, Default)]
pub struct ParamLayout {
    pub slots: Vec<ParamSlot>,
    pub total: usize,
}

impl ParamLayout {
    pub fn push(&mut self, name: impl Into<String>, len: usize) -> usize {
        let id = self.slots.len();
        self.slots.push(ParamSlot {
            name: name.into(),
            offset: self.total,
            len,
        });
        self.total += len;
        id
    }

    pub fn range(&self, id: usize) -> std::ops::Range<usize> {
        let s = &self.slots[id];
        s.offset..s.offset + s.len
    }
}

#[derive(Clone, Copy, Debug)]
pub struct ConvSpec {
    pub weight: usize,
    pub bias: usize,
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
}

impl ConvSpec {
    fn pad(&self) -> usize {
        self.k / 2
    }

    pub fn out_hw(&self, h: usize, w: usize) -> (usize, usize) {
        let p = self.pad();
        (
            (h + 2 * p - self.k) / self.stride + 1,
            (w + 2 * p - self.k) / self.stride + 1,
        )
    }

    pub fn fan_in(&self) -> usize {
        self.cin * self.k * self.k
    }
}

#[derive(Clone, Copy, Debug)]
pub struct LinearSpec {
    pub weight: usize,
    pub bias: usize,
    pub din: usize,
    pub dout: usize,
}

fn im2col(x: &Tensor, spec: &ConvSpec, oh: usize, ow: usize) -> Vec<f32> {
    let (k, s, p) = (spec.k, spec.stride, spec.pad() as isize);
    let n = oh * ow;
    let mut cols = vec![0.0f32; spec.fan_in() * n];
    for c in 0..x.c {
        let plane = &x.data[c * x.plane()..(c + 1) * x.plane()];
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let dst = &mut cols[row * n..(row + 1) * n];
                for oy in 0..oh {
                    let iy = (oy * s) as isize + ky as isize - p;
                    if iy < 0 || iy >= x.h as isize {
                        continue;
                    }
                    let src = &plane[iy as usize * x.w..(iy as usize + 1) * x.w];
                    let drow = &mut dst[oy * ow..(oy + 1) * ow];
                    for (ox, d) in drow.iter_mut().enumerate() {
                        let ix = (ox * s) as isize + kx as isize - p;
                        if ix >= 0 && ix < x.w as isize {
                            *d = src[ix as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im(cols: &[f32], spec: &ConvSpec, h: usize, w: usize, oh: usize, ow: usize) -> Tensor {
    let (k, s, p) = (spec.k, spec.stride, spec.pad() as isize);
    let n = oh * ow;
    let mut out = Tensor::zeros(spec.cin, h, w);
    for c in 0..spec.cin {
        let plane = &mut out.data[c * h * w..(c + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let src = &cols[row * n..(row + 1) * n];
                for oy in 0..oh {
                    let iy = (oy * s) as isize + ky as isize - p;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for ox in 0..ow {
                        let ix = (ox * s) as isize + kx as isize - p;
                        if ix >= 0 && ix < w as isize {
                            plane[iy as usize * w + ix as usize] += src[oy * ow + ox];
                        }
                    }
                }
            }
        }
    }
    out
}

fn conv_forward(params: &[f32], layout: &ParamLayout, spec: &ConvSpec, x: &Tensor) -> Tensor {
    debug_assert_eq!(x.c, spec.cin);
    let (oh, ow) = spec.out_hw(x.h, x.w);
    let n = oh * ow;
    let cols = im2col(x, spec, oh, ow);
    let wgt = &params[layout.range(spec.weight)];
    let bias = &params[layout.range(spec.bias)];
    let mut out = Tensor::zeros(spec.cout, oh, ow);
    for (o, b) in bias.iter().enumerate() {
        out.data[o * n..(o + 1) * n].fill(*b);
    }
    let a = ArrayView2::from_shape((spec.cout, spec.fan_in()), wgt).expect("weight shape");
    let b = ArrayView2::from_shape((spec.fan_in(), n), &cols).expect("cols shape");
    let mut c = ArrayViewMut2::from_shape((spec.cout, n), &mut out.data).expect("out shape");
    general_mat_mul(1.0, &a, &b, 1.0, &mut c);
    out
}

/// Returns `dL/dx` when `need_input` is set; accumulates parameter gradients
/// when `grads` is given.
fn conv_backward(
    params: &[f32],
    layout: &ParamLayout,
    spec: &ConvSpec,
    x: &Tensor,
    dy: &Tensor,
    grads: Option<&mut [f32]>,
    need_input: bool,
) -> Option<Tensor> {
    let (oh, ow) = (dy.h, dy.w);
    let n = oh * ow;
    let dyv = ArrayView2::from_shape((spec.cout, n), &dy.data).expect("dy shape");
    if let Some(g) = grads {
        let cols = im2col(x, spec, oh, ow);
        let colv = ArrayView2::from_shape((spec.fan_in(), n), &cols).expect("cols shape");
        {
            let gw = &mut g[layout.range(spec.weight)];
            let mut gwv = ArrayViewMut2::from_shape((spec.cout, spec.fan_in()), gw).expect("gw shape");
            general_mat_mul(1.0, &dyv, &colv.t(), 1.0, &mut gwv);
        }
        let gb = &mut g[layout.range(spec.bias)];
        for (o, b) in gb.iter_mut().enumerate() {
            *b += dy.data[o * n..(o + 1) * n].iter().sum::<f32>();
        }
    }
    if !need_input {
        return None;
    }
    let wgt = &params[layout.range(spec.weight)];
    let wv = ArrayView2::from_shape((spec.cout, spec.fan_in()), wgt).expect("weight shape");
    let mut dcols = vec![0.0f32; spec.fan_in() * n];
    {
        let mut dv = ArrayViewMut2::from_shape((spec.fan_in(), n), &mut dcols).expect("dcols shape");
        general_mat_mul(1.0, &wv.t(), &dyv, 0.0, &mut dv);
    }
    Some(col2im(&dcols, spec, x.h, x.w, oh, ow))
}

fn linear_forward(params: &[f32], layout: &ParamLayout, spec: &LinearSpec, x: &Tensor) -> Tensor {
    let wgt = &params[layout.range(spec.weight)];
    let bias = &params[layout.range(spec.bias)];
    let out = (0..spec.dout)
        .map(|o| {
            let row = &wgt[o * spec.din..(o + 1) * spec.din];
            bias[o] + row.iter().zip(&x.data).map(|(a, b)| a * b).sum::<f32>()
        })
        .collect();
    Tensor::vector(out)
}

fn linear_backward(
    params: &[f32],
    layout: &ParamLayout,
    spec: &LinearSpec,
    x: &Tensor,
    dy: &Tensor,
    grads: Option<&mut [f32]>,
) -> Tensor {
    if let Some(g) = grads {
        let wr = layout.range(spec.weight);
        let gw = &mut g[wr];
        for o in 0..spec.dout {
            for i in 0..spec.din {
                gw[o * spec.din + i] += dy.data[o] * x.data[i];
            }
        }
        let gb = &mut g[layout.range(spec.bias)];
        for o in 0..spec.dout {
            gb[o] += dy.data[o];
        }
    }
    let wgt = &params[layout.range(spec.weight)];
    let mut dx = vec![0.0f32; spec.din];
    for o in 0..spec.dout {
        for i in 0..spec.din {
            dx[i] += wgt[o * spec.din + i] * dy.data[o];
        }
    }
    Tensor::vector(dx)
}

fn silu(v: f32) -> f32 {
    v / (1.0 + (-v).exp())
}

fn silu_grad(v: f32) -> f32 {
    let s = 1.0 / (1.0 + (-v).exp());
    s * (1.0 + v * (1.0 - s))
}

#[derive(Clone, Copy, Debug)]
pub enum Op {
    Leaf,
    Conv { input: usize, spec: ConvSpec },
    Linear { input: usize, spec: LinearSpec },
    /// `y[c] = x[c]·(1 + m[c]) + m[C + c]`.
    Modulate { input: usize, modulation: usize },
    Silu { input: usize },
    /// `y = tanh(z + atanh(clamp(x)))`, the residual output head.
    ResidualTanh { input: usize, skip: usize },
    Upsample2 { input: usize },
    Concat { first: usize, second: usize },
}

pub const RESIDUAL_CLAMP: f32 = 0.99;

#[derive(Clone, Debug)]
pub struct Node {
    pub value: Tensor,
    pub op: Op,
}

/// Recorded forward pass. Node ids are indices into `nodes`.
#[derive(Clone, Debug, Default)]
pub struct Tape {
    pub nodes: Vec<Node>,
}

impl Tape {
    pub fn value(&self, id: usize) -> &Tensor {
        &self.nodes[id].value
    }

    fn push(&mut self, value: Tensor, op: Op) -> usize {
        self.nodes.push(Node { value, op });
        self.nodes.len() - 1
    }

    pub fn leaf(&mut self, value: Tensor) -> usize {
        self.push(value, Op::Leaf)
    }

    pub fn conv(&mut self, params: &[f32], layout: &ParamLayout, spec: ConvSpec, input: usize) -> usize {
        let v = conv_forward(params, layout, &spec, self.value(input));
        self.push(v, Op::Conv { input, spec })
    }

    pub fn linear(&mut self, params: &[f32], layout: &ParamLayout, spec: LinearSpec, input: usize) -> usize {
        let v = linear_forward(params, layout, &spec, self.value(input));
        self.push(v, Op::Linear { input, spec })
    }

    pub fn modulate(&mut self, input: usize, modulation: usize) -> usize {
        let x = self.value(input);
        let m = &self.value(modulation).data;
        debug_assert_eq!(m.len(), 2 * x.c);
        let mut y = x.clone();
        let plane = x.plane();
        for c in 0..x.c {
            let (scale, shift) = (1.0 + m[c], m[x.c + c]);
            for v in &mut y.data[c * plane..(c + 1) * plane] {
                *v = *v * scale + shift;
            }
        }
        self.push(y, Op::Modulate { input, modulation })
    }

    pub fn silu(&mut self, input: usize) -> usize {
        let mut y = self.value(input).clone();
        y.data.iter_mut().for_each(|v| *v = silu(*v));
        self.push(y, Op::Silu { input })
    }

    pub fn residual_tanh(&mut self, input: usize, skip: usize) -> usize {
        let z = self.value(input);
        let s = self.value(skip);
        debug_assert!(z.same_shape(s));
        let data = z
            .data
            .iter()
            .zip(&s.data)
            .map(|(a, b)| (a + b.clamp(-RESIDUAL_CLAMP, RESIDUAL_CLAMP).atanh()).tanh())
            .collect();
        let y = Tensor::from_vec(z.c, z.h, z.w, data);
        self.push(y, Op::ResidualTanh { input, skip })
    }

    pub fn upsample2(&mut self, input: usize) -> usize {
        let x = self.value(input);
        let (h, w) = (x.h * 2, x.w * 2);
        let mut y = Tensor::zeros(x.c, h, w);
        for c in 0..x.c {
            for yy in 0..h {
                for xx in 0..w {
                    y.data[(c * h + yy) * w + xx] = x.data[(c * x.h + yy / 2) * x.w + xx / 2];
                }
            }
        }
        self.push(y, Op::Upsample2 { input })
    }

    pub fn concat(&mut self, first: usize, second: usize) -> usize {
        let a = self.value(first);
        let b = self.value(second);
        debug_assert_eq!((a.h, a.w), (b.h, b.w));
        let mut data = a.data.clone();
        data.extend_from_slice(&b.data);
        let y = Tensor::from_vec(a.c + b.c, a.h, a.w, data);
        self.push(y, Op::Concat { first, second })
    }

    /// Reverse sweep from `seeds`. Parameter gradients are accumulated into
    /// `grads` when given; the returned vector holds `dL/d(leaf)` for every
    /// leaf that received gradient.
    pub fn backward(
        &self,
        params: &[f32],
        layout: &ParamLayout,
        seeds: &[(usize, Tensor)],
        mut grads: Option<&mut [f32]>,
        want_leaf_grads: bool,
    ) -> Vec<Option<Tensor>> {
        let mut adj: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        let accumulate = |adj: &mut Vec<Option<Tensor>>, id: usize, g: Tensor| match &mut adj[id] {
            Some(existing) => existing.add_assign(&g),
            slot => *slot = Some(g),
        };
        for (id, g) in seeds {
            accumulate(&mut adj, *id, g.clone());
        }
        let mut out: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        for id in (0..self.nodes.len()).rev() {
            let Some(dy) = adj[id].take() else {
                continue;
            };
            let node = &self.nodes[id];
            match node.op {
                Op::Leaf => out[id] = Some(dy),
                Op::Conv { input, spec } => {
                    let need_input = want_leaf_grads || !matches!(self.nodes[input].op, Op::Leaf);
                    if let Some(dx) = conv_backward(
                        params,
                        layout,
                        &spec,
                        self.value(input),
                        &dy,
                        grads.as_deref_mut(),
                        need_input,
                    ) {
                        accumulate(&mut adj, input, dx);
                    }
                }
                Op::Linear { input, spec } => {
                    let dx = linear_backward(params, layout, &spec, self.value(input), &dy, grads.as_deref_mut());
                    accumulate(&mut adj, input, dx);
                }
                Op::Modulate { input, modulation } => {
                    let x = self.value(input);
                    let m = &self.value(modulation).data;
                    let plane = x.plane();
                    let mut dx = dy.clone();
                    let mut dm = vec![0.0f32; 2 * x.c];
                    for c in 0..x.c {
                        let scale = 1.0 + m[c];
                        let xs = &x.data[c * plane..(c + 1) * plane];
                        let ds = &dy.data[c * plane..(c + 1) * plane];
                        dm[c] = xs.iter().zip(ds).map(|(a, b)| a * b).sum();
                        dm[x.c + c] = ds.iter().sum();
                        for v in &mut dx.data[c * plane..(c + 1) * plane] {
                            *v *= scale;
                        }
                    }
                    accumulate(&mut adj, input, dx);
                    accumulate(&mut adj, modulation, Tensor::vector(dm));
                }
                Op::Silu { input } => {
                    let x = self.value(input);
                    let mut dx = dy;
                    for (d, &v) in dx.data.iter_mut().zip(&x.data) {
                        *d *= silu_grad(v);
                    }
                    accumulate(&mut adj, input, dx);
                }
                Op::ResidualTanh { input, .. } => {
                    let y = &node.value;
                    let mut dz = dy;
                    for (d, &v) in dz.data.iter_mut().zip(&y.data) {
                        *d *= 1.0 - v * v;
                    }
                    // The skip branch carries the network input; no gradient.
                    accumulate(&mut adj, input, dz);
                }
                Op::Upsample2 { input } => {
                    let x = self.value(input);
                    let mut dx = Tensor::zeros(x.c, x.h, x.w);
                    let (h, w) = (dy.h, dy.w);
                    for c in 0..x.c {
                        for yy in 0..h {
                            for xx in 0..w {
                                dx.data[(c * x.h + yy / 2) * x.w + xx / 2] += dy.data[(c * h + yy) * w + xx];
                            }
                        }
                    }
                    accumulate(&mut adj, input, dx);
                }
                Op::Concat { first, second } => {
                    let a = self.value(first);
                    let b = self.value(second);
                    let split = a.data.len();
                    let da = Tensor::from_vec(a.c, a.h, a.w, dy.data[..split].to_vec());
                    let db = Tensor::from_vec(b.c, b.h, b.w, dy.data[split..].to_vec());
                    accumulate(&mut adj, first, da);
                    accumulate(&mut adj, second, db);
                }
            }
        }
        out
    }
}
