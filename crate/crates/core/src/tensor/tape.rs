use std::collections::HashMap;

use super::kernels::{self, ConvGeom, Rect, POOL_BINS};
use super::{ParamId, ParamStore, Tensor};
use crate::error::{bail, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    None,
    Relu,
    Tanh,
}

impl Activation {
    fn apply(self, v: &mut [f64]) {
        match self {
            Activation::None => {}
            Activation::Relu => v.iter_mut().for_each(|x| *x = x.max(0.0)),
            Activation::Tanh => v.iter_mut().for_each(|x| *x = x.tanh()),
        }
    }

    /// Turns an upstream gradient into a pre-activation gradient given the
    /// activation's output.
    fn backprop(self, out: &[f64], g: &mut [f64]) {
        match self {
            Activation::None => {}
            Activation::Relu => {
                for (gi, &o) in g.iter_mut().zip(out) {
                    if o <= 0.0 {
                        *gi = 0.0;
                    }
                }
            }
            Activation::Tanh => {
                for (gi, &o) in g.iter_mut().zip(out) {
                    *gi *= 1.0 - o * o;
                }
            }
        }
    }
}

/// User-defined operation with a hand-written backward rule.
pub trait CustomOp {
    fn name(&self) -> &str;
    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor>;
    /// Returns one gradient per input, each the length of that input.
    fn backward(&self, inputs: &[&Tensor], output: &Tensor, grad_out: &[f64]) -> Vec<Vec<f64>>;
}

enum Op {
    Constant,
    Param(ParamId),
    Conv2d { input: Var, kernel: Var, bias: Var, geom: ConvGeom, act: Activation, patches: Vec<f64> },
    Dense { input: Var, weight: Var, bias: Var, rows: usize, inner: usize, outer: usize, act: Activation },
    RoiPool { input: Var, argmax: Vec<u32>, per_sample_in: usize, per_sample_out: usize },
    Softmax { input: Var, width: usize },
    WeightedSum { alpha: Var, feats: Var, regions: usize, width: usize },
    Reshape { input: Var },
    GatherRows { input: Var, rows: Vec<usize>, row_len: usize },
    ConcatRows { inputs: Vec<Var> },
    Mse { pred: Var, target: Vec<f64> },
    Custom { op: Box<dyn CustomOp>, inputs: Vec<Var> },
}

struct Node {
    op: Op,
    value: Option<Tensor>,
    needs_grad: bool,
}

/// Records a forward computation so it can be differentiated in reverse.
///
/// Nodes are appended in execution order, so the node list is always a
/// topological order of the graph.
pub struct Tape<'p> {
    params: &'p ParamStore,
    nodes: Vec<Node>,
    param_vars: HashMap<ParamId, Var>,
    no_grad: bool,
}

/// Parameter gradients from one backward pass. `None` means the parameter
/// was not reachable from the loss.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn empty(params: &ParamStore) -> Self {
        Gradients { grads: vec![None; params.len()] }
    }

    pub fn get(&self, id: ParamId) -> Option<&[f64]> {
        self.grads.get(id.0).and_then(|g| g.as_deref())
    }

    /// Gradient of a parameter, exact zeros when it was unreachable.
    pub fn dense(&self, id: ParamId, len: usize) -> Vec<f64> {
        self.get(id).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; len])
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn is_reached(&self, id: ParamId) -> bool {
        self.get(id).is_some()
    }

    pub fn all_finite(&self) -> bool {
        self.grads.iter().flatten().all(|g| g.iter().all(|v| v.is_finite()))
    }

    /// Adds `other` into `self`, slot by slot in a fixed order.
    pub fn accumulate(&mut self, other: &Gradients) {
        for (dst, src) in self.grads.iter_mut().zip(&other.grads) {
            match (dst.as_mut(), src) {
                (Some(d), Some(s)) => d.iter_mut().zip(s).for_each(|(a, b)| *a += b),
                (None, Some(s)) => *dst = Some(s.clone()),
                _ => {}
            }
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for g in self.grads.iter_mut().flatten() {
            g.iter_mut().for_each(|v| *v *= factor);
        }
    }

    /// Global L2 norm over all reached gradients.
    pub fn norm(&self) -> f64 {
        self.grads.iter().flatten().flat_map(|g| g.iter()).map(|v| v * v).sum::<f64>().sqrt()
    }
}

impl<'p> Tape<'p> {
    pub fn new(params: &'p ParamStore) -> Self {
        Tape { params, nodes: Vec::new(), param_vars: HashMap::new(), no_grad: false }
    }

    /// Tape for inference: parameters are treated as constants, so no
    /// backward bookkeeping is kept.
    pub fn no_grad(params: &'p ParamStore) -> Self {
        Tape { params, nodes: Vec::new(), param_vars: HashMap::new(), no_grad: true }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        let node = &self.nodes[v.0];
        match node.op {
            Op::Param(id) => self.params.get(id),
            _ => node.value.as_ref().expect("non-parameter node always holds a value"),
        }
    }

    fn check(&self, v: Var) -> Result<()> {
        if v.0 >= self.nodes.len() {
            bail!(Contract, "variable {} is not on this tape", v.0);
        }
        Ok(())
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, op: Op, value: Tensor, needs_grad: bool) -> Var {
        self.nodes.push(Node { op, value: Some(value), needs_grad });
        Var(self.nodes.len() - 1)
    }

    /// Records an input that is never differentiated.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(Op::Constant, t, false)
    }

    /// Leaf referencing a stored parameter; repeated calls share one node.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.param_vars.get(&id) {
            return v;
        }
        let needs_grad = self.params.get(id).requires_grad && !self.no_grad;
        self.nodes.push(Node { op: Op::Param(id), value: None, needs_grad });
        let v = Var(self.nodes.len() - 1);
        self.param_vars.insert(id, v);
        v
    }

    /// Valid (unpadded) convolution of `[N, H, W, Cin]` with `[K, K, Cin, Cout]`.
    pub fn conv2d(&mut self, input: Var, kernel: Var, bias: Var, stride: usize, act: Activation) -> Result<Var> {
        for v in [input, kernel, bias] {
            self.check(v)?;
        }
        if stride == 0 {
            bail!(Config, "conv2d stride must be positive");
        }
        let (x, w, b) = (self.value(input), self.value(kernel), self.value(bias));
        if x.rank() != 4 || w.rank() != 4 {
            bail!(Geometry, "conv2d expects [N,H,W,C] input and [K,K,Cin,Cout] kernel, got {:?} and {:?}", x.dims(), w.dims());
        }
        let (n, h, wd, cin) = (x.dims()[0], x.dims()[1], x.dims()[2], x.dims()[3]);
        let (k, k2, kc, cout) = (w.dims()[0], w.dims()[1], w.dims()[2], w.dims()[3]);
        if k != k2 || kc != cin {
            bail!(Geometry, "kernel {:?} incompatible with input channels {}", w.dims(), cin);
        }
        if b.len() != cout {
            bail!(Geometry, "bias length {} != output channels {}", b.len(), cout);
        }
        let (Some(ho), Some(wo)) = (kernels::conv_out_extent(h, k, stride), kernels::conv_out_extent(wd, k, stride)) else {
            bail!(Geometry, "kernel {}x{} larger than input {}x{}", k, k, wd, h);
        };
        let geom = ConvGeom { n, h, w: wd, cin, k, stride, ho, wo, cout };
        let patches = kernels::im2col(x.data(), &geom);
        let mut out = vec![0.0; geom.rows() * cout];
        for row in out.chunks_exact_mut(cout) {
            row.copy_from_slice(b.data());
        }
        kernels::gemm(geom.rows(), geom.patch_len(), cout, &patches, false, w.data(), false, &mut out, 1.0);
        act.apply(&mut out);
        let needs_grad = self.needs(input) || self.needs(kernel) || self.needs(bias);
        let patches = if self.needs(kernel) { patches } else { Vec::new() };
        let value = Tensor::new(vec![n, ho, wo, cout], out)?;
        Ok(self.push(Op::Conv2d { input, kernel, bias, geom, act, patches }, value, needs_grad))
    }

    /// `input · weight + bias` for `[N, in]` (or a single `[in]` vector).
    pub fn dense(&mut self, input: Var, weight: Var, bias: Var, act: Activation) -> Result<Var> {
        for v in [input, weight, bias] {
            self.check(v)?;
        }
        let (x, w, b) = (self.value(input), self.value(weight), self.value(bias));
        if w.rank() != 2 {
            bail!(Geometry, "dense weight must be rank 2, got {:?}", w.dims());
        }
        let (inner, outer) = (w.dims()[0], w.dims()[1]);
        let (rows, vector) = match x.dims() {
            [d] if *d == inner => (1, true),
            [r, d] if *d == inner => (*r, false),
            other => bail!(Geometry, "dense input {:?} does not match weight {:?}", other, w.dims()),
        };
        if b.len() != outer {
            bail!(Geometry, "bias length {} != {}", b.len(), outer);
        }
        let mut out = vec![0.0; rows * outer];
        for row in out.chunks_exact_mut(outer) {
            row.copy_from_slice(b.data());
        }
        kernels::gemm(rows, inner, outer, x.data(), false, w.data(), false, &mut out, 1.0);
        act.apply(&mut out);
        let dims = if vector { vec![outer] } else { vec![rows, outer] };
        let needs_grad = self.needs(input) || self.needs(weight) || self.needs(bias);
        let value = Tensor::new(dims, out)?;
        Ok(self.push(Op::Dense { input, weight, bias, rows, inner, outer, act }, value, needs_grad))
    }

    /// Max-pools every rectangle of every `[H, W, C]` map in the batch into
    /// `4×4×C` bins. Output is `[N, R·16·C]`, region-major then bin then channel.
    pub fn roi_pool(&mut self, input: Var, rects: &[Rect]) -> Result<Var> {
        self.check(input)?;
        let x = self.value(input);
        if x.rank() != 4 {
            bail!(Geometry, "roi_pool expects [N,H,W,C], got {:?}", x.dims());
        }
        if rects.is_empty() {
            bail!(Geometry, "roi_pool needs at least one region");
        }
        let (n, h, w, c) = (x.dims()[0], x.dims()[1], x.dims()[2], x.dims()[3]);
        for r in rects {
            if r.x0 >= r.x1 || r.y0 >= r.y1 || r.x1 > w || r.y1 > h {
                bail!(Geometry, "rect {:?} invalid for {}x{} map", r, w, h);
            }
        }
        let desc = POOL_BINS * POOL_BINS * c;
        let per_sample_out = rects.len() * desc;
        let per_sample_in = h * w * c;
        let mut out = vec![0.0; n * per_sample_out];
        let mut argmax = vec![0u32; n * per_sample_out];
        for s in 0..n {
            let map = &x.data()[s * per_sample_in..(s + 1) * per_sample_in];
            for (ri, rect) in rects.iter().enumerate() {
                let off = s * per_sample_out + ri * desc;
                kernels::roi_pool_map(map, w, c, *rect, &mut out[off..off + desc], Some(&mut argmax[off..off + desc]));
            }
        }
        let needs_grad = self.needs(input);
        let value = Tensor::new(vec![n, per_sample_out], out)?;
        Ok(self.push(Op::RoiPool { input, argmax, per_sample_in, per_sample_out }, value, needs_grad))
    }

    /// Softmax over the last dimension.
    pub fn softmax(&mut self, input: Var) -> Result<Var> {
        self.check(input)?;
        let x = self.value(input);
        let width = *x.dims().last().expect("tensor rank >= 1");
        if x.is_empty() {
            bail!(Geometry, "softmax of empty input");
        }
        let out = kernels::softmax_rows(x.data(), width);
        let value = Tensor::new(x.dims().to_vec(), out)?;
        let needs_grad = self.needs(input);
        Ok(self.push(Op::Softmax { input, width }, value, needs_grad))
    }

    /// `out[n, d] = Σ_i alpha[n, i] · feats[n, i·D + d]` with `alpha: [N, R]`
    /// and `feats: [N, R·D]`.
    pub fn weighted_sum(&mut self, alpha: Var, feats: Var) -> Result<Var> {
        self.check(alpha)?;
        self.check(feats)?;
        let (a, f) = (self.value(alpha), self.value(feats));
        let (n, r) = match a.dims() {
            [r] => (1, *r),
            [n, r] => (*n, *r),
            d => bail!(Geometry, "alpha must be [N,R], got {:?}", d),
        };
        if f.len() % (n * r) != 0 || f.dims()[0] != n && a.rank() == 2 {
            bail!(Geometry, "features {:?} incompatible with alpha {:?}", f.dims(), a.dims());
        }
        let width = f.len() / (n * r);
        let mut out = vec![0.0; n * width];
        for s in 0..n {
            let o = &mut out[s * width..(s + 1) * width];
            for i in 0..r {
                let w = a.data()[s * r + i];
                let fi = &f.data()[(s * r + i) * width..(s * r + i + 1) * width];
                for (od, &fd) in o.iter_mut().zip(fi) {
                    *od += w * fd;
                }
            }
        }
        let dims = if a.rank() == 1 { vec![width] } else { vec![n, width] };
        let needs_grad = self.needs(alpha) || self.needs(feats);
        let value = Tensor::new(dims, out)?;
        Ok(self.push(Op::WeightedSum { alpha, feats, regions: r, width }, value, needs_grad))
    }

    pub fn reshape(&mut self, input: Var, dims: Vec<usize>) -> Result<Var> {
        self.check(input)?;
        let value = self.value(input).clone().reshaped(dims)?;
        let needs_grad = self.needs(input);
        Ok(self.push(Op::Reshape { input }, value, needs_grad))
    }

    /// Selects rows (first-dimension slices) in the given order.
    pub fn gather_rows(&mut self, input: Var, rows: &[usize]) -> Result<Var> {
        self.check(input)?;
        let x = self.value(input);
        let n = x.dims()[0];
        if rows.is_empty() || rows.iter().any(|&r| r >= n) {
            bail!(Contract, "row selection {:?} invalid for {} rows", rows, n);
        }
        let row_len = x.len() / n;
        let mut out = Vec::with_capacity(rows.len() * row_len);
        for &r in rows {
            out.extend_from_slice(&x.data()[r * row_len..(r + 1) * row_len]);
        }
        let mut dims = x.dims().to_vec();
        dims[0] = rows.len();
        let needs_grad = self.needs(input);
        let value = Tensor::new(dims, out)?;
        Ok(self.push(Op::GatherRows { input, rows: rows.to_vec(), row_len }, value, needs_grad))
    }

    /// Concatenates along the first dimension.
    pub fn concat_rows(&mut self, inputs: &[Var]) -> Result<Var> {
        if inputs.is_empty() {
            bail!(Contract, "concat of nothing");
        }
        for &v in inputs {
            self.check(v)?;
        }
        let tail = self.value(inputs[0]).dims()[1..].to_vec();
        let mut rows = 0;
        let mut out = Vec::new();
        for &v in inputs {
            let t = self.value(v);
            if t.dims()[1..] != tail[..] {
                bail!(Geometry, "concat shape mismatch {:?} vs tail {:?}", t.dims(), tail);
            }
            rows += t.dims()[0];
            out.extend_from_slice(t.data());
        }
        let mut dims = vec![rows];
        dims.extend(tail);
        let needs_grad = inputs.iter().any(|&v| self.needs(v));
        let value = Tensor::new(dims, out)?;
        Ok(self.push(Op::ConcatRows { inputs: inputs.to_vec() }, value, needs_grad))
    }

    /// Mean squared error against a constant target of the same length.
    pub fn mse_loss(&mut self, pred: Var, target: &Tensor) -> Result<Var> {
        self.check(pred)?;
        let p = self.value(pred);
        if p.len() != target.len() {
            bail!(Geometry, "prediction length {} != target length {}", p.len(), target.len());
        }
        let loss = p.data().iter().zip(target.data()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / p.len() as f64;
        let needs_grad = self.needs(pred);
        Ok(self.push(Op::Mse { pred, target: target.data().to_vec() }, Tensor::scalar(loss), needs_grad))
    }

    pub fn custom(&mut self, op: Box<dyn CustomOp>, inputs: &[Var]) -> Result<Var> {
        for &v in inputs {
            self.check(v)?;
        }
        let value = {
            let vals: Vec<&Tensor> = inputs.iter().map(|&v| self.value(v)).collect();
            op.forward(&vals)?
        };
        let needs_grad = inputs.iter().any(|&v| self.needs(v));
        Ok(self.push(Op::Custom { op, inputs: inputs.to_vec() }, value, needs_grad))
    }

    /// Reverse sweep from a scalar loss. Each node is visited once, in
    /// reverse recording order; only nodes on a path to a parameter are
    /// differentiated.
    pub fn backward(self, loss: Var) -> Result<Gradients> {
        self.check(loss)?;
        if self.value(loss).len() != 1 {
            bail!(Contract, "backward needs a scalar loss, got dims {:?}", self.value(loss).dims());
        }
        let mut grads: Vec<Option<Vec<f64>>> = Vec::with_capacity(self.nodes.len());
        grads.resize_with(self.nodes.len(), || None);
        grads[loss.0] = Some(vec![1.0]);
        let mut out = Gradients::empty(self.params);

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            match &node.op {
                Op::Constant => {}
                Op::Param(id) => out.grads[id.0] = Some(g),
                Op::Conv2d { input, kernel, bias, geom, act, patches } => {
                    let mut g = g;
                    act.backprop(self.value(Var(idx)).data(), &mut g);
                    let cout = geom.cout;
                    if self.needs(*bias) {
                        let mut db = vec![0.0; cout];
                        for row in g.chunks_exact(cout) {
                            db.iter_mut().zip(row).for_each(|(a, b)| *a += b);
                        }
                        accumulate(&mut grads, *bias, db);
                    }
                    if self.needs(*kernel) {
                        let mut dk = vec![0.0; geom.patch_len() * cout];
                        kernels::gemm(geom.patch_len(), geom.rows(), cout, patches, true, &g, false, &mut dk, 0.0);
                        accumulate(&mut grads, *kernel, dk);
                    }
                    if self.needs(*input) {
                        let mut dcols = vec![0.0; geom.rows() * geom.patch_len()];
                        let w = self.value(*kernel).data();
                        kernels::gemm(geom.rows(), cout, geom.patch_len(), &g, false, w, true, &mut dcols, 0.0);
                        let mut dx = vec![0.0; geom.n * geom.h * geom.w * geom.cin];
                        kernels::col2im_add(&dcols, geom, &mut dx);
                        accumulate(&mut grads, *input, dx);
                    }
                }
                Op::Dense { input, weight, bias, rows, inner, outer, act } => {
                    let mut g = g;
                    act.backprop(self.value(Var(idx)).data(), &mut g);
                    if self.needs(*bias) {
                        let mut db = vec![0.0; *outer];
                        for row in g.chunks_exact(*outer) {
                            db.iter_mut().zip(row).for_each(|(a, b)| *a += b);
                        }
                        accumulate(&mut grads, *bias, db);
                    }
                    if self.needs(*weight) {
                        let mut dw = vec![0.0; inner * outer];
                        kernels::gemm(*inner, *rows, *outer, self.value(*input).data(), true, &g, false, &mut dw, 0.0);
                        accumulate(&mut grads, *weight, dw);
                    }
                    if self.needs(*input) {
                        let mut dx = vec![0.0; rows * inner];
                        kernels::gemm(*rows, *outer, *inner, &g, false, self.value(*weight).data(), true, &mut dx, 0.0);
                        accumulate(&mut grads, *input, dx);
                    }
                }
                Op::RoiPool { input, argmax, per_sample_in, per_sample_out } => {
                    let n = self.value(*input).dims()[0];
                    let mut dx = vec![0.0; n * per_sample_in];
                    for s in 0..n {
                        let gs = &g[s * per_sample_out..(s + 1) * per_sample_out];
                        let am = &argmax[s * per_sample_out..(s + 1) * per_sample_out];
                        let dxs = &mut dx[s * per_sample_in..(s + 1) * per_sample_in];
                        for (&gi, &ai) in gs.iter().zip(am) {
                            dxs[ai as usize] += gi;
                        }
                    }
                    accumulate(&mut grads, *input, dx);
                }
                Op::Softmax { input, width } => {
                    let y = self.value(Var(idx)).data();
                    let mut dx = vec![0.0; y.len()];
                    for ((yr, gr), dr) in y.chunks_exact(*width).zip(g.chunks_exact(*width)).zip(dx.chunks_exact_mut(*width)) {
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for ((d, &yi), &gi) in dr.iter_mut().zip(yr).zip(gr) {
                            *d = yi * (gi - dot);
                        }
                    }
                    accumulate(&mut grads, *input, dx);
                }
                Op::WeightedSum { alpha, feats, regions, width } => {
                    let (a, f) = (self.value(*alpha).data(), self.value(*feats).data());
                    let n = a.len() / regions;
                    if self.needs(*alpha) {
                        let mut da = vec![0.0; a.len()];
                        for s in 0..n {
                            let gs = &g[s * width..(s + 1) * width];
                            for i in 0..*regions {
                                let fi = &f[(s * regions + i) * width..(s * regions + i + 1) * width];
                                da[s * regions + i] = fi.iter().zip(gs).map(|(x, y)| x * y).sum();
                            }
                        }
                        accumulate(&mut grads, *alpha, da);
                    }
                    if self.needs(*feats) {
                        let mut df = vec![0.0; f.len()];
                        for s in 0..n {
                            let gs = &g[s * width..(s + 1) * width];
                            for i in 0..*regions {
                                let w = a[s * regions + i];
                                let dfi = &mut df[(s * regions + i) * width..(s * regions + i + 1) * width];
                                dfi.iter_mut().zip(gs).for_each(|(d, &gv)| *d = w * gv);
                            }
                        }
                        accumulate(&mut grads, *feats, df);
                    }
                }
                Op::Reshape { input } => accumulate(&mut grads, *input, g),
                Op::GatherRows { input, rows, row_len } => {
                    let mut dx = vec![0.0; self.value(*input).len()];
                    for (k, &r) in rows.iter().enumerate() {
                        let src = &g[k * row_len..(k + 1) * row_len];
                        dx[r * row_len..(r + 1) * row_len].iter_mut().zip(src).for_each(|(d, s)| *d += s);
                    }
                    accumulate(&mut grads, *input, dx);
                }
                Op::ConcatRows { inputs } => {
                    let mut off = 0;
                    for &v in inputs {
                        let len = self.value(v).len();
                        if self.needs(v) {
                            accumulate(&mut grads, v, g[off..off + len].to_vec());
                        }
                        off += len;
                    }
                }
                Op::Mse { pred, target } => {
                    let p = self.value(*pred).data();
                    let scale = 2.0 * g[0] / p.len() as f64;
                    let dp = p.iter().zip(target).map(|(a, b)| scale * (a - b)).collect();
                    accumulate(&mut grads, *pred, dp);
                }
                Op::Custom { op, inputs } => {
                    let vals: Vec<&Tensor> = inputs.iter().map(|&v| self.value(v)).collect();
                    let dins = op.backward(&vals, self.value(Var(idx)), &g);
                    if dins.len() != inputs.len() {
                        bail!(Contract, "custom op {} returned {} gradients for {} inputs", op.name(), dins.len(), inputs.len());
                    }
                    for (&v, d) in inputs.iter().zip(dins) {
                        if d.len() != self.value(v).len() {
                            bail!(Contract, "custom op {} gradient length mismatch", op.name());
                        }
                        if self.needs(v) {
                            accumulate(&mut grads, v, d);
                        }
                    }
                }
            }
        }
        Ok(out)
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], v: Var, g: Vec<f64>) {
    match &mut grads[v.0] {
        Some(existing) => existing.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
        slot @ None => *slot = Some(g),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::ParamStore;

    #[test]
    fn square_has_derivative_six_at_three() {
        let mut ps = ParamStore::new();
        let x = ps.add("x", Tensor::scalar(3.0));
        let mut tape = Tape::new(&ps);
        let xv = tape.param(x);
        let loss = tape.mse_loss(xv, &Tensor::scalar(0.0)).unwrap();
        assert_eq!(tape.value(loss).data(), &[9.0]);
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(x).unwrap(), &[6.0]);
    }

    #[test]
    fn unreachable_parameter_gets_exact_zero() {
        let mut ps = ParamStore::new();
        let x = ps.add("x", Tensor::scalar(3.0));
        let y = ps.add("y", Tensor::scalar(-1.0));
        let mut tape = Tape::new(&ps);
        let xv = tape.param(x);
        let _yv = tape.param(y);
        let loss = tape.mse_loss(xv, &Tensor::scalar(1.0)).unwrap();
        let g = tape.backward(loss).unwrap();
        assert!(g.get(y).is_none());
        assert_eq!(g.dense(y, 1), vec![0.0]);
        ps.store_grads(&g);
        assert_eq!(ps.get(y).grad.as_deref(), Some(&[0.0][..]));
        assert_eq!(ps.get(x).grad.as_deref(), Some(&[4.0][..]));
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut ps = ParamStore::new();
        let x = ps.add("x", Tensor::vector(vec![1.0, 2.0]));
        let mut tape = Tape::new(&ps);
        let xv = tape.param(x);
        let sm = tape.softmax(xv).unwrap();
        let err = tape.backward(sm).unwrap_err();
        assert_eq!(err.kind(), crate::ErrorKind::Contract);
    }

    #[test]
    fn dense_identity_and_relu() {
        let ps = ParamStore::new();
        let mut tape = Tape::new(&ps);
        let x = tape.constant(Tensor::vector(vec![1.0, 2.0]));
        let w = tape.constant(Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap());
        let b = tape.constant(Tensor::vector(vec![-3.0, 0.0]));
        let zero_b = tape.constant(Tensor::vector(vec![0.0, 0.0]));
        let id = tape.dense(x, w, zero_b, Activation::None).unwrap();
        assert_eq!(tape.value(id).data(), &[1.0, 2.0]);
        let r = tape.dense(x, w, b, Activation::Relu).unwrap();
        assert_eq!(tape.value(r).data(), &[0.0, 2.0]);
    }

    #[test]
    fn dense_dimension_mismatch_is_geometry_error() {
        let ps = ParamStore::new();
        let mut tape = Tape::new(&ps);
        let x = tape.constant(Tensor::vector(vec![1.0, 2.0, 3.0]));
        let w = tape.constant(Tensor::zeros(&[2, 2]));
        let b = tape.constant(Tensor::zeros(&[2]));
        assert_eq!(tape.dense(x, w, b, Activation::None).unwrap_err().kind(), crate::ErrorKind::Geometry);
    }

    #[test]
    fn conv_errors() {
        let ps = ParamStore::new();
        let mut tape = Tape::new(&ps);
        let x = tape.constant(Tensor::zeros(&[1, 3, 3, 1]));
        let k = tape.constant(Tensor::zeros(&[5, 5, 1, 2]));
        let b = tape.constant(Tensor::zeros(&[2]));
        assert_eq!(tape.conv2d(x, k, b, 1, Activation::Relu).unwrap_err().kind(), crate::ErrorKind::Geometry);
        let k3 = tape.constant(Tensor::zeros(&[3, 3, 1, 2]));
        assert_eq!(tape.conv2d(x, k3, b, 0, Activation::Relu).unwrap_err().kind(), crate::ErrorKind::Config);
    }

    #[test]
    fn conv_zero_input_zero_bias_is_zero() {
        let ps = ParamStore::new();
        let mut tape = Tape::new(&ps);
        let x = tape.constant(Tensor::zeros(&[1, 9, 11, 3]));
        let k = tape.constant(Tensor::filled(&[3, 3, 3, 4], 0.7));
        let b = tape.constant(Tensor::zeros(&[4]));
        let y = tape.conv2d(x, k, b, 2, Activation::None).unwrap();
        assert_eq!(tape.value(y).dims(), &[1, 4, 5, 4]);
        assert!(tape.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn softmax_uniform_and_ln3_gap() {
        let ps = ParamStore::new();
        let mut tape = Tape::new(&ps);
        let x = tape.constant(Tensor::vector(vec![0.0; 4]));
        let y = tape.softmax(x).unwrap();
        assert_eq!(tape.value(y).data(), &[0.25; 4]);
        for c in [-7.5, 0.0, 3.25, 100.0] {
            let x = tape.constant(Tensor::vector(vec![c, c + 3f64.ln()]));
            let y = tape.softmax(x).unwrap();
            let d = tape.value(y).data();
            assert!((d[0] - 0.25).abs() < 1e-12 && (d[1] - 0.75).abs() < 1e-12, "{d:?}");
        }
    }

    #[test]
    fn mse_values() {
        let ps = ParamStore::new();
        let mut tape = Tape::new(&ps);
        let p = tape.constant(Tensor::scalar(0.3));
        let l = tape.mse_loss(p, &Tensor::scalar(0.3)).unwrap();
        assert_eq!(tape.value(l).data(), &[0.0]);
        let p = tape.constant(Tensor::scalar(0.0));
        let l = tape.mse_loss(p, &Tensor::scalar(0.5)).unwrap();
        assert_eq!(tape.value(l).data(), &[0.25]);
        assert!(tape.mse_loss(p, &Tensor::vector(vec![1.0, 2.0])).is_err());
    }

    #[test]
    fn foreign_variable_is_rejected() {
        let ps = ParamStore::new();
        let mut tape = Tape::new(&ps);
        let mut other = Tape::new(&ps);
        let a = other.constant(Tensor::scalar(1.0));
        let _ = other.constant(Tensor::scalar(2.0));
        assert!(tape.softmax(Var(a.0 + 1)).is_err());
    }
}
