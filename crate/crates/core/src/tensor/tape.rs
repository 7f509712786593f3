use super::conv::{self, ConvGeom};
use super::sample::{SamplingGrid, Taps};
use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug)]
enum BinKind {
    Add,
    Sub,
    Mul,
    Div,
}

enum Op {
    Leaf,
    Conv {
        x: Var,
        k: Var,
        b: Var,
        geom: ConvGeom,
    },
    Relu(Var),
    MaxPool {
        x: Var,
        argmax: Vec<usize>,
    },
    Bilinear {
        x: Var,
        taps: Vec<Option<Taps>>,
        planes: usize,
        src_plane: usize,
    },
    StackMax {
        xs: Vec<Var>,
        which: Vec<u32>,
    },
    MaskedMin {
        xs: Vec<Var>,
        which: Vec<Option<u32>>,
    },
    Binary {
        kind: BinKind,
        a: Var,
        b: Var,
    },
    Exp(Var),
    Square(Var),
    Reshape(Var),
    Scale {
        x: Var,
        c: f64,
    },
    Sum(Var),
    GlobalAvg(Var),
    GradReverse {
        x: Var,
        lambda: f64,
    },
    BceLogits {
        x: Var,
        target: f64,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Ordered record of executed differentiable ops.
///
/// Values are appended in execution order, so every op's inputs have
/// smaller indices than the op itself and a single reverse sweep is a valid
/// topological order for backpropagation.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Trainable leaf; receives a gradient on [`Tape::backward`].
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// Gradient populated by the last [`Tape::backward`] call.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn conv2d(&mut self, x: Var, k: Var, b: Var, padding: usize, stride: usize) -> Result<Var> {
        let (xv, kv, bv) = (self.value(x), self.value(k), self.value(b));
        let geom = ConvGeom::new(xv, kv, bv, padding, stride)?;
        xv.ensure_finite("conv2d input")?;
        let out = conv::forward(&geom, xv, kv, bv);
        let rg = self.rg(x) || self.rg(k) || self.rg(b);
        Ok(self.push(out, Op::Conv { x, k, b, geom }, rg))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v.max(0.0));
        let rg = self.rg(x);
        self.push(out, Op::Relu(x), rg)
    }

    /// Windowed max over the last two dims; ties resolve to the first index
    /// in row-major window order.
    pub fn max_pool2d(&mut self, x: Var, k: usize, s: usize) -> Result<Var> {
        if k == 0 || s == 0 {
            return Err(Error::invalid("max_pool2d window and stride must be >= 1"));
        }
        let xv = self.value(x);
        if xv.ndim() != 4 {
            return Err(Error::shape(format!(
                "max_pool2d expects rank 4, got {:?}",
                xv.shape()
            )));
        }
        let (h, w) = xv.hw();
        if k > h || k > w {
            return Err(Error::shape(format!(
                "max_pool2d window {k} exceeds input {h}x{w}"
            )));
        }
        let (ho, wo) = ((h - k) / s + 1, (w - k) / s + 1);
        let planes = xv.shape()[0] * xv.shape()[1];
        let mut out = Vec::with_capacity(planes * ho * wo);
        let mut argmax = Vec::with_capacity(planes * ho * wo);
        let d = xv.data();
        for p in 0..planes {
            let base = p * h * w;
            for oi in 0..ho {
                for oj in 0..wo {
                    let mut best = base + oi * s * w + oj * s;
                    for di in 0..k {
                        for dj in 0..k {
                            let idx = base + (oi * s + di) * w + oj * s + dj;
                            if d[idx] > d[best] {
                                best = idx;
                            }
                        }
                    }
                    out.push(d[best]);
                    argmax.push(best);
                }
            }
        }
        let shape = [xv.shape()[0], xv.shape()[1], ho, wo];
        let rg = self.rg(x);
        let out = Tensor::new(&shape, out)?;
        Ok(self.push(out, Op::MaxPool { x, argmax }, rg))
    }

    /// Bilinear read of `x` (rank 4 or rank 3, last two dims spatial) at the
    /// grid's source coordinates. Returns the sampled map and a `[Hs, Ws]`
    /// validity mask; invalid cells are zero. Differentiable in `x` only.
    pub fn bilinear_sample(&mut self, x: Var, grid: &SamplingGrid) -> Result<(Var, Tensor)> {
        let xv = self.value(x);
        if xv.ndim() < 2 {
            return Err(Error::shape(format!(
                "bilinear_sample needs a spatial input, got {:?}",
                xv.shape()
            )));
        }
        let (h, w) = xv.hw();
        if h == 0 || w == 0 {
            return Err(Error::shape("bilinear_sample on empty image"));
        }
        let (hs, ws) = (grid.height(), grid.width());
        let taps = grid.taps(h, w);
        let planes = xv.len() / (h * w);
        let mut out = vec![0.0; planes * hs * ws];
        let d = xv.data();
        for p in 0..planes {
            let src = &d[p * h * w..(p + 1) * h * w];
            let dst = &mut out[p * hs * ws..(p + 1) * hs * ws];
            for (o, t) in dst.iter_mut().zip(&taps) {
                if let Some(t) = t {
                    *o = t.wt[0] * src[t.idx[0]]
                        + t.wt[1] * src[t.idx[1]]
                        + t.wt[2] * src[t.idx[2]]
                        + t.wt[3] * src[t.idx[3]];
                }
            }
        }
        let mask = Tensor::new(
            &[hs, ws],
            taps.iter()
                .map(|t| if t.is_some() { 1.0 } else { 0.0 })
                .collect(),
        )?;
        let mut shape = xv.shape().to_vec();
        let n = shape.len();
        shape[n - 2] = hs;
        shape[n - 1] = ws;
        let rg = self.rg(x);
        let out = Tensor::new(&shape, out)?;
        let v = self.push(
            out,
            Op::Bilinear {
                x,
                taps,
                planes,
                src_plane: h * w,
            },
            rg,
        );
        Ok((v, mask))
    }

    /// Elementwise max across same-shaped inputs; the gradient goes to the
    /// first input attaining the max.
    pub fn stack_max(&mut self, xs: &[Var]) -> Result<Var> {
        let first = *xs
            .first()
            .ok_or_else(|| Error::invalid("stack_max of an empty list"))?;
        let shape = self.value(first).shape().to_vec();
        for &v in xs {
            if self.value(v).shape() != shape.as_slice() {
                return Err(Error::shape(format!(
                    "stack_max inputs {:?} vs {:?}",
                    shape,
                    self.value(v).shape()
                )));
            }
        }
        let mut out = self.value(first).data().to_vec();
        let mut which = vec![0u32; out.len()];
        for (k, &v) in xs.iter().enumerate().skip(1) {
            for ((o, w), &x) in out
                .iter_mut()
                .zip(which.iter_mut())
                .zip(self.value(v).data())
            {
                if x > *o {
                    *o = x;
                    *w = k as u32;
                }
            }
        }
        let rg = xs.iter().any(|&v| self.rg(v));
        let out = Tensor::new(&shape, out)?;
        Ok(self.push(
            out,
            Op::StackMax {
                xs: xs.to_vec(),
                which,
            },
            rg,
        ))
    }

    /// Elementwise min over the inputs that are valid (`mask > 0`) at each
    /// position; positions valid in no input are 0. Returns the min map and
    /// the coverage mask.
    pub fn masked_min(&mut self, xs: &[Var], masks: &[Tensor]) -> Result<(Var, Tensor)> {
        let first = *xs
            .first()
            .ok_or_else(|| Error::invalid("masked_min of an empty list"))?;
        if masks.len() != xs.len() {
            return Err(Error::shape(format!(
                "masked_min got {} maps and {} masks",
                xs.len(),
                masks.len()
            )));
        }
        let shape = self.value(first).shape().to_vec();
        let n = self.value(first).len();
        for (&v, m) in xs.iter().zip(masks) {
            if self.value(v).shape() != shape.as_slice() || m.len() != n {
                return Err(Error::shape(format!(
                    "masked_min inputs must share shape {shape:?}"
                )));
            }
        }
        let mut out = vec![0.0; n];
        let mut which: Vec<Option<u32>> = vec![None; n];
        for (k, (&v, m)) in xs.iter().zip(masks).enumerate() {
            let d = self.value(v).data();
            for i in 0..n {
                if m.data()[i] > 0.0 && which[i].is_none_or(|_| d[i] < out[i]) {
                    out[i] = d[i];
                    which[i] = Some(k as u32);
                }
            }
        }
        let covered = Tensor::new(
            &shape,
            which
                .iter()
                .map(|w| if w.is_some() { 1.0 } else { 0.0 })
                .collect(),
        )?;
        let rg = xs.iter().any(|&v| self.rg(v));
        let out = Tensor::new(&shape, out)?;
        let v = self.push(
            out,
            Op::MaskedMin {
                xs: xs.to_vec(),
                which,
            },
            rg,
        );
        Ok((v, covered))
    }

    fn binary(&mut self, kind: BinKind, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let shape = broadcast_shape(av.shape(), bv.shape())?;
        let ia = broadcast_index(&shape, av.shape());
        let ib = broadcast_index(&shape, bv.shape());
        let n: usize = shape.iter().product();
        let (ad, bd) = (av.data(), bv.data());
        let out: Vec<f64> = (0..n)
            .map(|e| {
                let (x, y) = (ad[ia.get(e)], bd[ib.get(e)]);
                match kind {
                    BinKind::Add => x + y,
                    BinKind::Sub => x - y,
                    BinKind::Mul => x * y,
                    BinKind::Div => {
                        if y == 0.0 {
                            0.0
                        } else {
                            x / y
                        }
                    }
                }
            })
            .collect();
        let rg = self.rg(a) || self.rg(b);
        let out = Tensor::new(&shape, out)?;
        Ok(self.push(out, Op::Binary { kind, a, b }, rg))
    }

    /// Broadcasting sum (numpy rules on trailing dims).
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinKind::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinKind::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinKind::Mul, a, b)
    }

    /// Broadcasting quotient with `x / 0 := 0` (and zero gradient there).
    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinKind::Div, a, b)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let out = self.value(x).map(f64::exp);
        let rg = self.rg(x);
        self.push(out, Op::Exp(x), rg)
    }

    pub fn square(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v * v);
        let rg = self.rg(x);
        self.push(out, Op::Square(x), rg)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let out = self.value(x).map(|v| c * v);
        let rg = self.rg(x);
        self.push(out, Op::Scale { x, c }, rg)
    }

    /// Scalar sum of all elements.
    pub fn sum(&mut self, x: Var) -> Var {
        let out = Tensor::scalar(self.value(x).sum());
        let rg = self.rg(x);
        self.push(out, Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).len().max(1) as f64;
        let s = self.sum(x);
        self.scale(s, 1.0 / n)
    }

    /// Spatial mean of a rank-4 map, giving `[N, C, 1, 1]`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        if xv.ndim() != 4 {
            return Err(Error::shape(format!(
                "global_avg_pool expects rank 4, got {:?}",
                xv.shape()
            )));
        }
        let (h, w) = xv.hw();
        let hw = h * w;
        let out: Vec<f64> = xv
            .data()
            .chunks(hw)
            .map(|p| p.iter().sum::<f64>() / hw as f64)
            .collect();
        let shape = [xv.shape()[0], xv.shape()[1], 1, 1];
        let rg = self.rg(x);
        let out = Tensor::new(&shape, out)?;
        Ok(self.push(out, Op::GlobalAvg(x), rg))
    }

    /// Same data under a new shape with equal element count.
    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape)?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::Reshape(x), rg))
    }

    /// Identity forward; multiplies the incoming gradient by `-lambda`.
    pub fn grad_reverse(&mut self, x: Var, lambda: f64) -> Var {
        let out = self.value(x).clone();
        let rg = self.rg(x);
        self.push(out, Op::GradReverse { x, lambda }, rg)
    }

    /// Binary cross-entropy of a single logit against a `{0, 1}` target,
    /// computed in the numerically stable form.
    pub fn bce_with_logits(&mut self, x: Var, target: f64) -> Result<Var> {
        let xv = self.value(x);
        if xv.len() != 1 {
            return Err(Error::shape(format!(
                "bce_with_logits expects one logit, got {:?}",
                xv.shape()
            )));
        }
        let z = xv.item();
        let loss = z.max(0.0) - z * target + (-z.abs()).exp().ln_1p();
        let rg = self.rg(x);
        Ok(self.push(Tensor::scalar(loss), Op::BceLogits { x, target }, rg))
    }

    /// Reverse sweep from a one-element `loss`, populating [`Tape::grad`]
    /// for every node that requires a gradient and is reachable.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(Error::shape(format!(
                "backward needs a one-element loss, got {:?}",
                lv.shape()
            )));
        }
        lv.ensure_finite("loss")?;
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(lv.shape(), 1.0));
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        self.grads = grads;
        Ok(())
    }

    fn backprop_node(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[i];
        let mut acc = |v: Var, t: Tensor| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(e) => e.axpy(1.0, &t),
                slot @ None => *slot = Some(t),
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::Conv { x, k, b, geom } => {
                let need = [self.rg(*x), self.rg(*k), self.rg(*b)];
                let r = conv::backward(geom, self.value(*x), self.value(*k), g, need);
                if let Some(d) = r.dx {
                    acc(*x, d);
                }
                if let Some(d) = r.dk {
                    acc(*k, d);
                }
                if let Some(d) = r.db {
                    acc(*b, d);
                }
            }
            Op::Relu(x) => {
                let xv = self.value(*x);
                let d = xv
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(&v, &gv)| if v > 0.0 { gv } else { 0.0 })
                    .collect();
                acc(*x, Tensor::new(xv.shape(), d).unwrap());
            }
            Op::MaxPool { x, argmax } => {
                let xv = self.value(*x);
                let mut d = vec![0.0; xv.len()];
                for (&a, &gv) in argmax.iter().zip(g.data()) {
                    d[a] += gv;
                }
                acc(*x, Tensor::new(xv.shape(), d).unwrap());
            }
            Op::Bilinear {
                x,
                taps,
                planes,
                src_plane,
            } => {
                let xv = self.value(*x);
                let cells = taps.len();
                let mut d = vec![0.0; xv.len()];
                for p in 0..*planes {
                    let dst = &mut d[p * src_plane..(p + 1) * src_plane];
                    let gp = &g.data()[p * cells..(p + 1) * cells];
                    for (t, &gv) in taps.iter().zip(gp) {
                        if let Some(t) = t {
                            for q in 0..4 {
                                dst[t.idx[q]] += t.wt[q] * gv;
                            }
                        }
                    }
                }
                acc(*x, Tensor::new(xv.shape(), d).unwrap());
            }
            Op::StackMax { xs, which } => {
                for (k, &v) in xs.iter().enumerate() {
                    if !self.rg(v) {
                        continue;
                    }
                    let d = which
                        .iter()
                        .zip(g.data())
                        .map(|(&w, &gv)| if w as usize == k { gv } else { 0.0 })
                        .collect();
                    acc(v, Tensor::new(g.shape(), d).unwrap());
                }
            }
            Op::MaskedMin { xs, which } => {
                for (k, &v) in xs.iter().enumerate() {
                    if !self.rg(v) {
                        continue;
                    }
                    let d = which
                        .iter()
                        .zip(g.data())
                        .map(|(&w, &gv)| if w == Some(k as u32) { gv } else { 0.0 })
                        .collect();
                    acc(v, Tensor::new(g.shape(), d).unwrap());
                }
            }
            Op::Binary { kind, a, b } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let ia = broadcast_index(g.shape(), av.shape());
                let ib = broadcast_index(g.shape(), bv.shape());
                let (ad, bd) = (av.data(), bv.data());
                let mut da = self.rg(*a).then(|| vec![0.0; av.len()]);
                let mut db = self.rg(*b).then(|| vec![0.0; bv.len()]);
                for (e, &gv) in g.data().iter().enumerate() {
                    let (pa, pb) = (ia.get(e), ib.get(e));
                    let (x, y) = (ad[pa], bd[pb]);
                    let (ga, gb) = match kind {
                        BinKind::Add => (gv, gv),
                        BinKind::Sub => (gv, -gv),
                        BinKind::Mul => (gv * y, gv * x),
                        BinKind::Div => {
                            if y == 0.0 {
                                (0.0, 0.0)
                            } else {
                                (gv / y, -gv * x / (y * y))
                            }
                        }
                    };
                    if let Some(da) = da.as_mut() {
                        da[pa] += ga;
                    }
                    if let Some(db) = db.as_mut() {
                        db[pb] += gb;
                    }
                }
                if let Some(d) = da {
                    acc(*a, Tensor::new(av.shape(), d).unwrap());
                }
                if let Some(d) = db {
                    acc(*b, Tensor::new(bv.shape(), d).unwrap());
                }
            }
            Op::Reshape(x) => {
                let shape = self.value(*x).shape().to_vec();
                acc(*x, g.clone().reshape(&shape).unwrap());
            }
            Op::Exp(x) => {
                let d = node
                    .value
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(&y, &gv)| y * gv)
                    .collect();
                acc(*x, Tensor::new(g.shape(), d).unwrap());
            }
            Op::Square(x) => {
                let d = self
                    .value(*x)
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(&v, &gv)| 2.0 * v * gv)
                    .collect();
                acc(*x, Tensor::new(g.shape(), d).unwrap());
            }
            Op::Scale { x, c } => acc(*x, g.map(|gv| c * gv)),
            Op::Sum(x) => {
                let xv = self.value(*x);
                acc(*x, Tensor::full(xv.shape(), g.item()));
            }
            Op::GlobalAvg(x) => {
                let xv = self.value(*x);
                let (h, w) = xv.hw();
                let hw = h * w;
                let d = g
                    .data()
                    .iter()
                    .flat_map(|&gv| std::iter::repeat_n(gv / hw as f64, hw))
                    .collect();
                acc(*x, Tensor::new(xv.shape(), d).unwrap());
            }
            Op::GradReverse { x, lambda } => acc(*x, g.map(|gv| -lambda * gv)),
            Op::BceLogits { x, target } => {
                let z = self.value(*x).item();
                let s = 1.0 / (1.0 + (-z).exp());
                let xv = self.value(*x);
                acc(*x, Tensor::full(xv.shape(), (s - target) * g.item()));
            }
        }
    }
}

fn broadcast_shape(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let n = a.len().max(b.len());
    let mut out = vec![0; n];
    for i in 0..n {
        let da = if i + a.len() >= n {
            a[i + a.len() - n]
        } else {
            1
        };
        let db = if i + b.len() >= n {
            b[i + b.len() - n]
        } else {
            1
        };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return Err(Error::shape(format!("cannot broadcast {a:?} with {b:?}"))),
        };
    }
    Ok(out)
}

/// Maps flat output positions to flat positions of a broadcast input.
enum BIndex {
    Same,
    Scalar,
    Map(Vec<usize>),
}

impl BIndex {
    fn get(&self, e: usize) -> usize {
        match self {
            BIndex::Same => e,
            BIndex::Scalar => 0,
            BIndex::Map(m) => m[e],
        }
    }
}

fn broadcast_index(out: &[usize], inp: &[usize]) -> BIndex {
    let n_in: usize = inp.iter().product();
    if out == inp {
        return BIndex::Same;
    }
    if n_in == 1 {
        return BIndex::Scalar;
    }
    let n = out.len();
    let mut strides = vec![0; n];
    let mut s = 1;
    for d in (0..n).rev() {
        let k = d + inp.len();
        if k >= n {
            let dim = inp[k - n];
            strides[d] = if dim == 1 { 0 } else { s };
            s *= dim;
        }
    }
    // odometer over the output shape
    let total: usize = out.iter().product();
    let mut map = Vec::with_capacity(total);
    let mut pos = vec![0; n];
    let mut idx = 0;
    for _ in 0..total {
        map.push(idx);
        for d in (0..n).rev() {
            pos[d] += 1;
            idx += strides[d];
            if pos[d] < out[d] {
                break;
            }
            idx -= strides[d] * pos[d];
            pos[d] = 0;
        }
    }
    BIndex::Map(map)
}
