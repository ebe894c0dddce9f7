//! Reverse-mode differentiation over whole tensors.
//!
//! A [`Tape`] records one forward pass. Nodes are appended after their
//! inputs, so index order is a topological order and the backward sweep is a
//! plain reverse scan. Complex values carry their gradient as `gRe + i gIm`,
//! the gradient with respect to the real and imaginary parts.

use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};

use crate::anscombe;
use crate::conv::{conv_plane_direct, embed_into, gather_from, kernel_grad_plane, ConvMode};
use crate::error::{invalid, Error, Result};
use crate::fft;
use crate::tensor::{ComplexField, ImageTensor};

/// Handle to a node on a tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
pub enum Value {
    Real(ImageTensor),
    Complex(ComplexField),
}

impl Value {
    pub fn shape(&self) -> (usize, usize, usize) {
        match self {
            Value::Real(t) => t.shape(),
            Value::Complex(c) => c.shape(),
        }
    }

    fn is_finite(&self) -> bool {
        match self {
            Value::Real(t) => t.is_finite(),
            Value::Complex(c) => c.is_finite(),
        }
    }

    fn zeros_like(&self) -> Value {
        let (h, w, c) = self.shape();
        match self {
            Value::Real(_) => Value::Real(ImageTensor::zeros(h, w, c)),
            Value::Complex(_) => Value::Complex(ComplexField::zeros(h, w, c)),
        }
    }

    fn accumulate(&mut self, other: &Value) {
        match (self, other) {
            (Value::Real(a), Value::Real(b)) => {
                for (x, y) in a.data_mut().iter_mut().zip(b.data()) {
                    *x += y;
                }
            }
            (Value::Complex(a), Value::Complex(b)) => {
                for (x, y) in a.re.iter_mut().zip(&b.re) {
                    *x += y;
                }
                for (x, y) in a.im.iter_mut().zip(&b.im) {
                    *x += y;
                }
            }
            _ => unreachable!("gradient kind mismatch"),
        }
    }

    fn scale(&mut self, s: f64) {
        match self {
            Value::Real(a) => a.data_mut().iter_mut().for_each(|v| *v *= s),
            Value::Complex(a) => {
                a.re.iter_mut().for_each(|v| *v *= s);
                a.im.iter_mut().for_each(|v| *v *= s);
            }
        }
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Fft2(Var),
    Ifft2Re(Var),
    Embed { kernel: Var },
    CMul { a: Var, b: Var, conj_a: bool },
    GroupSum { a: Var, group: usize },
    Abs2(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Scale { a: Var, s: Var },
    AddConst(Var),
    Exp(Var),
    CDivReal { num: Var, den: Var },
    ConvBank { x: Var, filters: Var, merged: bool },
    PixelAffine { x: Var, w: Var, b: Var },
    Relu(Var),
    Gat { a: Var, alpha: f64, sigma: f64 },
    GatInv { a: Var, alpha: f64 },
    Conv2d { x: Var, w: Var, b: Var, k: usize },
    MaxPool2 { a: Var, argmax: Vec<usize> },
    Dense { x: Var, w: Var, b: Var },
    Mse { a: Var, target: Var },
    SoftmaxCe { logits: Var, label: usize },
    Sum(Var),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Fft2(_) => "fft2",
            Op::Ifft2Re(_) => "ifft2",
            Op::Embed { .. } => "embed",
            Op::CMul { .. } => "cmul",
            Op::GroupSum { .. } => "group_sum",
            Op::Abs2(_) => "abs2",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Scale { .. } => "scale",
            Op::AddConst(_) => "add_const",
            Op::Exp(_) => "exp",
            Op::CDivReal { .. } => "cdiv",
            Op::ConvBank { .. } => "conv_bank",
            Op::PixelAffine { .. } => "pixel_affine",
            Op::Relu(_) => "relu",
            Op::Gat { .. } => "gat",
            Op::GatInv { .. } => "gat_inv",
            Op::Conv2d { .. } => "conv2d",
            Op::MaxPool2 { .. } => "maxpool2",
            Op::Dense { .. } => "dense",
            Op::Mse { .. } => "mse",
            Op::SoftmaxCe { .. } => "softmax_ce",
            Op::Sum(_) => "sum",
        }
    }
}

struct Node {
    value: Value,
    op: Op,
    needs_grad: bool,
}

/// Record of one forward pass.
pub struct Tape {
    nodes: Vec<Node>,
    consumed: bool,
    kinks: DefaultHasher,
    fault: Option<(&'static str, f64)>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients of a scalar with respect to every node that needed one.
pub struct Gradients {
    grads: Vec<Option<Value>>,
}

impl Gradients {
    /// Gradient of a real node; `None` when it did not influence the loss.
    pub fn real(&self, v: Var) -> Option<&ImageTensor> {
        match self.grads.get(v.0)? {
            Some(Value::Real(t)) => Some(t),
            _ => None,
        }
    }

    pub fn complex(&self, v: Var) -> Option<&ComplexField> {
        match self.grads.get(v.0)? {
            Some(Value::Complex(c)) => Some(c),
            _ => None,
        }
    }
}

fn real_of(v: &Value) -> &ImageTensor {
    match v {
        Value::Real(t) => t,
        Value::Complex(_) => unreachable!("expected a real node"),
    }
}

fn complex_of(v: &Value) -> &ComplexField {
    match v {
        Value::Complex(c) => c,
        Value::Real(_) => unreachable!("expected a complex node"),
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            consumed: false,
            kinks: DefaultHasher::new(),
            fault: None,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Hash of every piecewise-branch decision taken during the forward pass
    /// (ReLU masks, max-pool winners, transform clamps). Two evaluations with
    /// equal signatures lie on the same smooth piece.
    pub fn kink_signature(&self) -> u64 {
        self.kinks.finish()
    }

    /// Test hook: multiplies the input gradients produced by every node of
    /// kind `op` by `factor`.
    #[doc(hidden)]
    pub fn inject_adjoint_fault(&mut self, op: &'static str, factor: f64) {
        self.fault = Some((op, factor));
    }

    fn push(&mut self, value: Value, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    pub fn value(&self, v: Var) -> &Value {
        &self.nodes[v.0].value
    }

    pub fn real(&self, v: Var) -> &ImageTensor {
        real_of(&self.nodes[v.0].value)
    }

    pub fn complex(&self, v: Var) -> &ComplexField {
        complex_of(&self.nodes[v.0].value)
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.real(v).data()[0]
    }

    fn expect_real(&self, v: Var, what: &str) -> Result<&ImageTensor> {
        match &self.nodes[v.0].value {
            Value::Real(t) => Ok(t),
            Value::Complex(_) => invalid(format!("{what}: expected a real input")),
        }
    }

    fn expect_complex(&self, v: Var, what: &str) -> Result<&ComplexField> {
        match &self.nodes[v.0].value {
            Value::Complex(c) => Ok(c),
            Value::Real(_) => invalid(format!("{what}: expected a complex input")),
        }
    }

    /// Trainable leaf.
    pub fn param(&mut self, t: ImageTensor) -> Var {
        self.push(Value::Real(t), Op::Leaf, true)
    }

    /// Leaf that receives no gradient.
    pub fn constant(&mut self, t: ImageTensor) -> Var {
        self.push(Value::Real(t), Op::Leaf, false)
    }

    pub fn leaf(&mut self, t: ImageTensor, requires_grad: bool) -> Var {
        self.push(Value::Real(t), Op::Leaf, requires_grad)
    }

    pub fn complex_leaf(&mut self, c: ComplexField, requires_grad: bool) -> Var {
        self.push(Value::Complex(c), Op::Leaf, requires_grad)
    }

    pub fn fft2(&mut self, a: Var) -> Result<Var> {
        let v = fft::fft2(self.expect_real(a, "fft2")?)?;
        let n = self.needs(&[a]);
        Ok(self.push(Value::Complex(v), Op::Fft2(a), n))
    }

    /// Real part of the normalized inverse DFT.
    pub fn ifft2_real(&mut self, a: Var) -> Result<Var> {
        let v = fft::ifft2_real(self.expect_complex(a, "ifft2")?)?;
        let n = self.needs(&[a]);
        Ok(self.push(Value::Real(v), Op::Ifft2Re(a), n))
    }

    /// Circularly embeds each `kh x kw` channel of `kernel` into an `h x w` plane.
    pub fn embed(&mut self, kernel: Var, h: usize, w: usize) -> Result<Var> {
        let k = self.expect_real(kernel, "embed")?;
        let (kh, kw, m) = k.shape();
        if kh > h || kw > w {
            return invalid("embed: kernel larger than target plane");
        }
        let mut out = ImageTensor::zeros(h, w, m);
        for c in 0..m {
            embed_into(k.plane(c), kh, kw, h, w, out.plane_mut(c));
        }
        let n = self.needs(&[kernel]);
        Ok(self.push(Value::Real(out), Op::Embed { kernel }, n))
    }

    /// Elementwise complex product; `a`'s channels repeat cyclically over `b`'s.
    pub fn cmul(&mut self, a: Var, b: Var, conj_a: bool) -> Result<Var> {
        let av = self.expect_complex(a, "cmul")?;
        let bv = self.expect_complex(b, "cmul")?;
        let (h, w, ca) = av.shape();
        let (hb, wb, cb) = bv.shape();
        if (h, w) != (hb, wb) || ca == 0 || cb % ca != 0 {
            return invalid(format!(
                "cmul: incompatible shapes {:?} and {:?}",
                av.shape(),
                bv.shape()
            ));
        }
        let n = h * w;
        let sgn = if conj_a { -1.0 } else { 1.0 };
        let mut out = ComplexField::zeros(h, w, cb);
        for j in 0..cb {
            let ja = (j % ca) * n;
            for idx in 0..n {
                let (ar, ai) = (av.re[ja + idx], sgn * av.im[ja + idx]);
                let (br, bi) = (bv.re[j * n + idx], bv.im[j * n + idx]);
                out.re[j * n + idx] = ar * br - ai * bi;
                out.im[j * n + idx] = ar * bi + ai * br;
            }
        }
        let nd = self.needs(&[a, b]);
        Ok(self.push(Value::Complex(out), Op::CMul { a, b, conj_a }, nd))
    }

    /// Sums consecutive runs of `group` channels.
    pub fn group_sum(&mut self, a: Var, group: usize) -> Result<Var> {
        let av = self.value(a).clone();
        let (h, w, c) = av.shape();
        if group == 0 || c % group != 0 {
            return invalid(format!("group_sum: {c} channels not divisible by {group}"));
        }
        let n = h * w;
        let groups = c / group;
        let sum_planes = |src: &[f64]| {
            let mut out = vec![0.0; groups * n];
            for g in 0..groups {
                for i in 0..group {
                    let s = &src[(g * group + i) * n..(g * group + i + 1) * n];
                    for (o, v) in out[g * n..(g + 1) * n].iter_mut().zip(s) {
                        *o += v;
                    }
                }
            }
            out
        };
        let out = match &av {
            Value::Real(t) => Value::Real(ImageTensor::new(h, w, groups, sum_planes(t.data()))?),
            Value::Complex(cf) => Value::Complex(ComplexField {
                height: h,
                width: w,
                channels: groups,
                re: sum_planes(&cf.re),
                im: sum_planes(&cf.im),
            }),
        };
        let nd = self.needs(&[a]);
        Ok(self.push(out, Op::GroupSum { a, group }, nd))
    }

    /// Squared magnitude of a complex node.
    pub fn abs2(&mut self, a: Var) -> Result<Var> {
        let av = self.expect_complex(a, "abs2")?;
        let (h, w, c) = av.shape();
        let data = av.re.iter().zip(&av.im).map(|(r, i)| r * r + i * i).collect();
        let out = ImageTensor::new(h, w, c, data)?;
        let nd = self.needs(&[a]);
        Ok(self.push(Value::Real(out), Op::Abs2(a), nd))
    }

    fn broadcast_ok(a: (usize, usize, usize), b: (usize, usize, usize)) -> bool {
        a == b || b == (1, 1, 1) || (b.2 == 1 && (a.0, a.1) == (b.0, b.1))
    }

    fn binary(&mut self, a: Var, b: Var, sign: f64, sub: bool) -> Result<Var> {
        let av = self.value(a);
        let bv = self.value(b);
        let (sa, sb) = (av.shape(), bv.shape());
        if !Self::broadcast_ok(sa, sb) {
            return invalid(format!("add/sub: cannot broadcast {sb:?} onto {sa:?}"));
        }
        let bidx = broadcast_index(sa, sb);
        let out = match (av, bv) {
            (Value::Real(x), Value::Real(y)) => {
                let mut o = x.clone();
                for (i, v) in o.data_mut().iter_mut().enumerate() {
                    *v += sign * y.data()[bidx(i)];
                }
                Value::Real(o)
            }
            (Value::Complex(x), Value::Complex(y)) => {
                let mut o = x.clone();
                for i in 0..o.len() {
                    o.re[i] += sign * y.re[bidx(i)];
                    o.im[i] += sign * y.im[bidx(i)];
                }
                Value::Complex(o)
            }
            _ => return invalid("add/sub: mixed real and complex operands"),
        };
        let op = if sub { Op::Sub(a, b) } else { Op::Add(a, b) };
        let nd = self.needs(&[a, b]);
        Ok(self.push(out, op, nd))
    }

    /// `a + b`, where `b` may broadcast as a single channel or a single element.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, 1.0, false)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, -1.0, true)
    }

    /// Multiplies a real or complex node by a real scalar node.
    pub fn scale(&mut self, a: Var, s: Var) -> Result<Var> {
        let sv = self.expect_real(s, "scale")?;
        if sv.len() != 1 {
            return invalid("scale: factor must be a scalar node");
        }
        let f = sv.data()[0];
        let mut out = self.value(a).clone();
        out.scale(f);
        let nd = self.needs(&[a, s]);
        Ok(self.push(out, Op::Scale { a, s }, nd))
    }

    pub fn add_const(&mut self, a: Var, c: f64) -> Result<Var> {
        let out = self.expect_real(a, "add_const")?.map(|v| v + c);
        let nd = self.needs(&[a]);
        Ok(self.push(Value::Real(out), Op::AddConst(a), nd))
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        let out = self.expect_real(a, "exp")?.map(f64::exp);
        let nd = self.needs(&[a]);
        Ok(self.push(Value::Real(out), Op::Exp(a), nd))
    }

    /// Complex numerator over a real single-channel denominator (broadcast over channels).
    pub fn cdiv_real(&mut self, num: Var, den: Var) -> Result<Var> {
        let nv = self.expect_complex(num, "cdiv")?;
        let dv = self.expect_real(den, "cdiv")?;
        let (h, w, c) = nv.shape();
        if dv.shape() != (h, w, 1) {
            return invalid("cdiv: denominator must be a single plane of the same size");
        }
        if dv.data().iter().any(|&d| d <= 0.0 || !d.is_finite()) {
            return Err(Error::Numerical(
                "Fourier denominator has a non-positive bin".into(),
            ));
        }
        let n = h * w;
        let mut out = nv.clone();
        for k in 0..c {
            for idx in 0..n {
                let d = dv.data()[idx];
                out.re[k * n + idx] /= d;
                out.im[k * n + idx] /= d;
            }
        }
        let nd = self.needs(&[num, den]);
        Ok(self.push(Value::Complex(out), Op::CDivReal { num, den }, nd))
    }

    /// Circular convolution of every image channel with every filter.
    ///
    /// `x` is `H x W x C`, `filters` is `kh x kw x m`. Unmerged output has
    /// channel `color * m + i`; merged output sums over colors and has `m`
    /// channels.
    pub fn conv_bank(&mut self, x: Var, filters: Var, merged: bool) -> Result<Var> {
        let xv = self.expect_real(x, "conv_bank")?;
        let fv = self.expect_real(filters, "conv_bank")?;
        let out = conv_bank_forward(xv, fv, merged)?;
        let nd = self.needs(&[x, filters]);
        Ok(self.push(
            Value::Real(out),
            Op::ConvBank {
                x,
                filters,
                merged,
            },
            nd,
        ))
    }

    /// Per-pixel affine map: `w` is `out x in x 1`, `b` is `out x 1 x 1`.
    /// An input with `g * in` channels is treated as `g` independent groups
    /// sharing the same map.
    pub fn pixel_affine(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let xv = self.expect_real(x, "pixel_affine")?;
        let wv = self.expect_real(w, "pixel_affine")?;
        let bv = self.expect_real(b, "pixel_affine")?;
        let out = pixel_affine_forward(xv, wv, bv)?;
        let nd = self.needs(&[x, w, b]);
        Ok(self.push(Value::Real(out), Op::PixelAffine { x, w, b }, nd))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let av = self.expect_real(a, "relu")?;
        let out = av.map(|v| v.max(0.0));
        let mask: Vec<bool> = av.data().iter().map(|v| *v > 0.0).collect();
        mask.hash(&mut self.kinks);
        let nd = self.needs(&[a]);
        Ok(self.push(Value::Real(out), Op::Relu(a), nd))
    }

    /// Generalized Anscombe forward transform with fixed noise parameters.
    pub fn gat(&mut self, a: Var, alpha: f64, sigma: f64) -> Result<Var> {
        if alpha <= 0.0 {
            return invalid("gat: alpha must be positive");
        }
        let av = self.expect_real(a, "gat")?;
        let mask: Vec<bool> = av
            .data()
            .iter()
            .map(|&v| anscombe::forward_derivative(v, alpha, sigma) > 0.0)
            .collect();
        let out = av.map(|v| anscombe::forward_scalar(v, alpha, sigma));
        mask.hash(&mut self.kinks);
        let nd = self.needs(&[a]);
        Ok(self.push(Value::Real(out), Op::Gat { a, alpha, sigma }, nd))
    }

    /// Algebraic inverse Anscombe transform of `max(z, 0)`.
    pub fn gat_inverse(&mut self, a: Var, alpha: f64, sigma: f64) -> Result<Var> {
        if alpha <= 0.0 {
            return invalid("gat_inverse: alpha must be positive");
        }
        let av = self.expect_real(a, "gat_inverse")?;
        let mask: Vec<bool> = av.data().iter().map(|&v| v > 0.0).collect();
        let out = av.map(|v| anscombe::inverse_scalar(v.max(0.0), alpha, sigma));
        mask.hash(&mut self.kinks);
        let nd = self.needs(&[a]);
        Ok(self.push(Value::Real(out), Op::GatInv { a, alpha }, nd))
    }

    /// Zero-padded "same" cross-correlation with bias.
    ///
    /// `x` is `H x W x in`; `w` is `k x k x (out * in)` with kernel
    /// `(o, c)` in channel `o * in + c`; `b` is `out x 1 x 1`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let xv = self.expect_real(x, "conv2d")?;
        let wv = self.expect_real(w, "conv2d")?;
        let bv = self.expect_real(b, "conv2d")?;
        let k = wv.height();
        let cin = xv.channels();
        let cout = bv.len();
        if wv.width() != k || k % 2 == 0 || wv.channels() != cout * cin {
            return invalid(format!(
                "conv2d: weight shape {:?} incompatible with {} inputs / {} outputs",
                wv.shape(),
                cin,
                cout
            ));
        }
        let out = conv2d_forward(xv, wv, bv, k);
        let nd = self.needs(&[x, w, b]);
        Ok(self.push(Value::Real(out), Op::Conv2d { x, w, b, k }, nd))
    }

    /// 2x2 max pooling with stride 2 (odd trailing rows/columns are dropped).
    pub fn maxpool2(&mut self, a: Var) -> Result<Var> {
        let av = self.expect_real(a, "maxpool2")?;
        let (h, w, c) = av.shape();
        let (oh, ow) = (h / 2, w / 2);
        if oh == 0 || ow == 0 {
            return invalid("maxpool2: input too small");
        }
        let mut out = ImageTensor::zeros(oh, ow, c);
        let mut argmax = Vec::with_capacity(oh * ow * c);
        for k in 0..c {
            for i in 0..oh {
                for j in 0..ow {
                    let mut best = av.index(2 * i, 2 * j, k);
                    for (di, dj) in [(0, 1), (1, 0), (1, 1)] {
                        let idx = av.index(2 * i + di, 2 * j + dj, k);
                        if av.data()[idx] > av.data()[best] {
                            best = idx;
                        }
                    }
                    out.set(i, j, k, av.data()[best]);
                    argmax.push(best);
                }
            }
        }
        argmax.hash(&mut self.kinks);
        let nd = self.needs(&[a]);
        Ok(self.push(Value::Real(out), Op::MaxPool2 { a, argmax }, nd))
    }

    /// Fully connected layer over the flattened input: `w` is `K x n x 1`, `b` is `K x 1 x 1`.
    pub fn dense(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let xv = self.expect_real(x, "dense")?;
        let wv = self.expect_real(w, "dense")?;
        let bv = self.expect_real(b, "dense")?;
        let n = xv.len();
        let kout = bv.len();
        if wv.shape() != (kout, n, 1) {
            return invalid(format!(
                "dense: weight shape {:?}, expected ({kout}, {n}, 1)",
                wv.shape()
            ));
        }
        let data = (0..kout)
            .map(|o| {
                let row = &wv.data()[o * n..(o + 1) * n];
                bv.data()[o] + row.iter().zip(xv.data()).map(|(a, b)| a * b).sum::<f64>()
            })
            .collect();
        let out = ImageTensor::new(kout, 1, 1, data)?;
        let nd = self.needs(&[x, w, b]);
        Ok(self.push(Value::Real(out), Op::Dense { x, w, b }, nd))
    }

    /// Mean squared error, a scalar node.
    pub fn mse(&mut self, a: Var, target: Var) -> Result<Var> {
        let av = self.expect_real(a, "mse")?;
        let tv = self.expect_real(target, "mse")?;
        av.check_same_shape(tv, "mse")?;
        let n = av.len().max(1) as f64;
        let v = av
            .data()
            .iter()
            .zip(tv.data())
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
            / n;
        let nd = self.needs(&[a, target]);
        Ok(self.push(Value::Real(ImageTensor::scalar(v)), Op::Mse { a, target }, nd))
    }

    /// Softmax cross-entropy with max-subtracted log-sum-exp.
    pub fn softmax_ce(&mut self, logits: Var, label: usize) -> Result<Var> {
        let lv = self.expect_real(logits, "softmax_ce")?;
        if label >= lv.len() {
            return invalid(format!("label {label} out of range for {} classes", lv.len()));
        }
        let v = crate::loss::cross_entropy_value(lv.data(), label);
        let nd = self.needs(&[logits]);
        Ok(self.push(
            Value::Real(ImageTensor::scalar(v)),
            Op::SoftmaxCe { logits, label },
            nd,
        ))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let v = self.expect_real(a, "sum")?.sum();
        let nd = self.needs(&[a]);
        Ok(self.push(Value::Real(ImageTensor::scalar(v)), Op::Sum(a), nd))
    }

    /// Runs the reverse sweep from a scalar node. A tape can be swept once.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        if self.consumed {
            return Err(Error::State("backward already ran on this tape".into()));
        }
        match &self.nodes[loss.0].value {
            Value::Real(t) if t.len() == 1 => {}
            _ => return invalid("backward needs a real scalar loss node"),
        }
        self.backward_with_seed(loss, Value::Real(ImageTensor::scalar(1.0)))
    }

    /// Vector-Jacobian product: propagates `seed` (shaped like `out`) back
    /// through the tape. Also consumes the tape.
    pub fn backward_with_seed(&mut self, out: Var, seed: Value) -> Result<Gradients> {
        if self.consumed {
            return Err(Error::State("backward already ran on this tape".into()));
        }
        if seed.shape() != self.nodes[out.0].value.shape()
            || matches!(seed, Value::Real(_)) != matches!(self.nodes[out.0].value, Value::Real(_))
        {
            return invalid("backward seed does not match the output node");
        }
        self.consumed = true;
        let mut grads: Vec<Option<Value>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[out.0] = Some(seed);
        for idx in (0..=out.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.needs_grad {
                grads[idx] = Some(g);
                continue;
            }
            let mut contribs = self.adjoint(node, &g)?;
            if let Some((name, factor)) = self.fault {
                if name == node.op.name() {
                    for (_, c) in contribs.iter_mut() {
                        c.scale(factor);
                    }
                }
            }
            for (input, c) in contribs {
                if !c.is_finite() {
                    return Err(Error::Numerical(format!(
                        "non-finite gradient produced by node {idx} ({})",
                        node.op.name()
                    )));
                }
                if !self.nodes[input.0].needs_grad {
                    continue;
                }
                match &mut grads[input.0] {
                    Some(acc) => acc.accumulate(&c),
                    slot @ None => *slot = Some(c),
                }
            }
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn val(&self, v: Var) -> &Value {
        &self.nodes[v.0].value
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Input-gradient contributions of one node given its output gradient.
    fn adjoint(&self, node: &Node, g: &Value) -> Result<Vec<(Var, Value)>> {
        let mut out = Vec::new();
        match &node.op {
            Op::Leaf => {}
            Op::Fft2(a) => {
                // Re(F^H g) with F^H the unscaled inverse DFT
                let back = fft::ifft2_unscaled(complex_of(g));
                let (h, w, c) = back.shape();
                out.push((*a, Value::Real(ImageTensor::new(h, w, c, back.re)?)));
            }
            Op::Ifft2Re(a) => {
                let gr = real_of(g);
                let mut spec = fft::fft2(gr)?;
                let s = 1.0 / gr.plane_len() as f64;
                spec.re.iter_mut().for_each(|v| *v *= s);
                spec.im.iter_mut().for_each(|v| *v *= s);
                out.push((*a, Value::Complex(spec)));
            }
            Op::Embed { kernel } => {
                let k = real_of(self.val(*kernel));
                let (kh, kw, m) = k.shape();
                let gr = real_of(g);
                let (h, w, _) = gr.shape();
                let mut gk = ImageTensor::zeros(kh, kw, m);
                for c in 0..m {
                    gather_from(gr.plane(c), h, w, kh, kw, gk.plane_mut(c));
                }
                out.push((*kernel, Value::Real(gk)));
            }
            Op::CMul { a, b, conj_a } => {
                let av = complex_of(self.val(*a));
                let bv = complex_of(self.val(*b));
                let gc = complex_of(g);
                let (h, w, ca) = av.shape();
                let cb = bv.channels;
                let n = h * w;
                if self.wants(*a) {
                    let mut ga = ComplexField::zeros(h, w, ca);
                    for j in 0..cb {
                        let ja = (j % ca) * n;
                        for idx in 0..n {
                            let (gr, gi) = (gc.re[j * n + idx], gc.im[j * n + idx]);
                            let (br, bi) = (bv.re[j * n + idx], bv.im[j * n + idx]);
                            if *conj_a {
                                // conj(g) * b
                                ga.re[ja + idx] += gr * br + gi * bi;
                                ga.im[ja + idx] += gr * bi - gi * br;
                            } else {
                                // g * conj(b)
                                ga.re[ja + idx] += gr * br + gi * bi;
                                ga.im[ja + idx] += gi * br - gr * bi;
                            }
                        }
                    }
                    out.push((*a, Value::Complex(ga)));
                }
                if self.wants(*b) {
                    let mut gb = ComplexField::zeros(h, w, cb);
                    for j in 0..cb {
                        let ja = (j % ca) * n;
                        for idx in 0..n {
                            let (gr, gi) = (gc.re[j * n + idx], gc.im[j * n + idx]);
                            let ar = av.re[ja + idx];
                            let ai = av.im[ja + idx];
                            // g * a when b was multiplied by conj(a), else g * conj(a)
                            let ai = if *conj_a { ai } else { -ai };
                            gb.re[j * n + idx] = gr * ar - gi * ai;
                            gb.im[j * n + idx] = gr * ai + gi * ar;
                        }
                    }
                    out.push((*b, Value::Complex(gb)));
                }
            }
            Op::GroupSum { a, group } => {
                let (h, w, c) = self.val(*a).shape();
                let n = h * w;
                let spread = |src: &[f64]| {
                    let mut o = vec![0.0; c * n];
                    for ch in 0..c {
                        let g0 = ch / group;
                        o[ch * n..(ch + 1) * n].copy_from_slice(&src[g0 * n..(g0 + 1) * n]);
                    }
                    o
                };
                let v = match g {
                    Value::Real(t) => Value::Real(ImageTensor::new(h, w, c, spread(t.data()))?),
                    Value::Complex(cf) => Value::Complex(ComplexField {
                        height: h,
                        width: w,
                        channels: c,
                        re: spread(&cf.re),
                        im: spread(&cf.im),
                    }),
                };
                out.push((*a, v));
            }
            Op::Abs2(a) => {
                let av = complex_of(self.val(*a));
                let gr = real_of(g);
                let mut ga = av.clone();
                for i in 0..ga.len() {
                    ga.re[i] *= 2.0 * gr.data()[i];
                    ga.im[i] *= 2.0 * gr.data()[i];
                }
                out.push((*a, Value::Complex(ga)));
            }
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                if self.wants(*a) {
                    out.push((*a, g.clone()));
                }
                if self.wants(*b) {
                    let sa = self.val(*a).shape();
                    let sb = self.val(*b).shape();
                    let bidx = broadcast_index(sa, sb);
                    let mut gb = self.val(*b).zeros_like();
                    match (&mut gb, g) {
                        (Value::Real(o), Value::Real(gt)) => {
                            for (i, v) in gt.data().iter().enumerate() {
                                o.data_mut()[bidx(i)] += sign * v;
                            }
                        }
                        (Value::Complex(o), Value::Complex(gc)) => {
                            for i in 0..gc.len() {
                                o.re[bidx(i)] += sign * gc.re[i];
                                o.im[bidx(i)] += sign * gc.im[i];
                            }
                        }
                        _ => unreachable!(),
                    }
                    out.push((*b, gb));
                }
            }
            Op::Scale { a, s } => {
                let f = real_of(self.val(*s)).data()[0];
                if self.wants(*a) {
                    let mut ga = g.clone();
                    ga.scale(f);
                    out.push((*a, ga));
                }
                if self.wants(*s) {
                    let gs = match (self.val(*a), g) {
                        (Value::Real(x), Value::Real(gt)) => x.dot(gt),
                        (Value::Complex(x), Value::Complex(gc)) => {
                            let re: f64 = x.re.iter().zip(&gc.re).map(|(p, q)| p * q).sum();
                            let im: f64 = x.im.iter().zip(&gc.im).map(|(p, q)| p * q).sum();
                            re + im
                        }
                        _ => unreachable!(),
                    };
                    out.push((*s, Value::Real(ImageTensor::scalar(gs))));
                }
            }
            Op::AddConst(a) => out.push((*a, g.clone())),
            Op::Exp(a) => {
                let y = real_of(&node.value);
                let gr = real_of(g);
                let mut ga = gr.clone();
                for (v, e) in ga.data_mut().iter_mut().zip(y.data()) {
                    *v *= e;
                }
                out.push((*a, Value::Real(ga)));
            }
            Op::CDivReal { num, den } => {
                let nv = complex_of(self.val(*num));
                let dv = real_of(self.val(*den));
                let gc = complex_of(g);
                let (h, w, c) = nv.shape();
                let n = h * w;
                if self.wants(*num) {
                    let mut gn = gc.clone();
                    for k in 0..c {
                        for idx in 0..n {
                            let d = dv.data()[idx];
                            gn.re[k * n + idx] /= d;
                            gn.im[k * n + idx] /= d;
                        }
                    }
                    out.push((*num, Value::Complex(gn)));
                }
                if self.wants(*den) {
                    let mut gd = ImageTensor::zeros(h, w, 1);
                    for k in 0..c {
                        for idx in 0..n {
                            let d = dv.data()[idx];
                            let i = k * n + idx;
                            gd.data_mut()[idx] -=
                                (gc.re[i] * nv.re[i] + gc.im[i] * nv.im[i]) / (d * d);
                        }
                    }
                    out.push((*den, Value::Real(gd)));
                }
            }
            Op::ConvBank {
                x,
                filters,
                merged,
            } => {
                let xv = real_of(self.val(*x));
                let fv = real_of(self.val(*filters));
                let gr = real_of(g);
                let (h, w, colors) = xv.shape();
                let (kh, kw, m) = fv.shape();
                let gchan = |color: usize, i: usize| {
                    if *merged {
                        gr.plane(i)
                    } else {
                        gr.plane(color * m + i)
                    }
                };
                if self.wants(*x) {
                    let mut gx = ImageTensor::zeros(h, w, colors);
                    for color in 0..colors {
                        for i in 0..m {
                            conv_plane_direct(
                                gchan(color, i),
                                h,
                                w,
                                fv.plane(i),
                                kh,
                                kw,
                                ConvMode::Adjoint,
                                gx.plane_mut(color),
                            );
                        }
                    }
                    out.push((*x, Value::Real(gx)));
                }
                if self.wants(*filters) {
                    let mut gf = ImageTensor::zeros(kh, kw, m);
                    for color in 0..colors {
                        for i in 0..m {
                            kernel_grad_plane(
                                xv.plane(color),
                                gchan(color, i),
                                h,
                                w,
                                kh,
                                kw,
                                gf.plane_mut(i),
                            );
                        }
                    }
                    out.push((*filters, Value::Real(gf)));
                }
            }
            Op::PixelAffine { x, w, b } => {
                let xv = real_of(self.val(*x));
                let wv = real_of(self.val(*w));
                let gr = real_of(g);
                let (cout, cin, _) = wv.shape();
                let groups = xv.channels() / cin;
                if self.wants(*x) {
                    let mut gx = ImageTensor::zeros(xv.height(), xv.width(), xv.channels());
                    for grp in 0..groups {
                        for o in 0..cout {
                            let go = gr.plane(grp * cout + o);
                            for k in 0..cin {
                                let wk = wv.data()[o * cin + k];
                                for (d, s) in gx.plane_mut(grp * cin + k).iter_mut().zip(go) {
                                    *d += wk * s;
                                }
                            }
                        }
                    }
                    out.push((*x, Value::Real(gx)));
                }
                if self.wants(*w) {
                    let mut gw = ImageTensor::zeros(cout, cin, 1);
                    for grp in 0..groups {
                        for o in 0..cout {
                            let go = gr.plane(grp * cout + o);
                            for k in 0..cin {
                                gw.data_mut()[o * cin + k] += go
                                    .iter()
                                    .zip(xv.plane(grp * cin + k))
                                    .map(|(p, q)| p * q)
                                    .sum::<f64>();
                            }
                        }
                    }
                    out.push((*w, Value::Real(gw)));
                }
                if self.wants(*b) {
                    let mut gb = vec![0.0; cout];
                    for grp in 0..groups {
                        for (o, v) in gb.iter_mut().enumerate() {
                            *v += gr.plane(grp * cout + o).iter().sum::<f64>();
                        }
                    }
                    out.push((*b, Value::Real(ImageTensor::new(cout, 1, 1, gb)?)));
                }
            }
            Op::Relu(a) => {
                let av = real_of(self.val(*a));
                let mut ga = real_of(g).clone();
                for (v, x) in ga.data_mut().iter_mut().zip(av.data()) {
                    if *x <= 0.0 {
                        *v = 0.0;
                    }
                }
                out.push((*a, Value::Real(ga)));
            }
            Op::Gat { a, alpha, sigma } => {
                let av = real_of(self.val(*a));
                let mut ga = real_of(g).clone();
                for (v, y) in ga.data_mut().iter_mut().zip(av.data()) {
                    *v *= anscombe::forward_derivative(*y, *alpha, *sigma);
                }
                out.push((*a, Value::Real(ga)));
            }
            Op::GatInv { a, alpha } => {
                let av = real_of(self.val(*a));
                let mut ga = real_of(g).clone();
                for (v, z) in ga.data_mut().iter_mut().zip(av.data()) {
                    *v *= if *z > 0.0 {
                        anscombe::inverse_derivative(*z, *alpha)
                    } else {
                        0.0
                    };
                }
                out.push((*a, Value::Real(ga)));
            }
            Op::Conv2d { x, w, b, k } => {
                let xv = real_of(self.val(*x));
                let wv = real_of(self.val(*w));
                let gr = real_of(g);
                let (gx, gw, gb) = conv2d_backward(
                    xv,
                    wv,
                    gr,
                    *k,
                    self.wants(*x),
                    self.wants(*w),
                );
                if let Some(gx) = gx {
                    out.push((*x, Value::Real(gx)));
                }
                if let Some(gw) = gw {
                    out.push((*w, Value::Real(gw)));
                }
                if self.wants(*b) {
                    out.push((*b, Value::Real(gb)));
                }
            }
            Op::MaxPool2 { a, argmax } => {
                let av = real_of(self.val(*a));
                let gr = real_of(g);
                let mut ga = ImageTensor::zeros(av.height(), av.width(), av.channels());
                for (o, &src) in argmax.iter().enumerate() {
                    ga.data_mut()[src] += gr.data()[o];
                }
                out.push((*a, Value::Real(ga)));
            }
            Op::Dense { x, w, b } => {
                let xv = real_of(self.val(*x));
                let wv = real_of(self.val(*w));
                let gr = real_of(g);
                let n = xv.len();
                let kout = gr.len();
                if self.wants(*x) {
                    let mut gx = ImageTensor::zeros(xv.height(), xv.width(), xv.channels());
                    for o in 0..kout {
                        let go = gr.data()[o];
                        let row = &wv.data()[o * n..(o + 1) * n];
                        for (d, wv) in gx.data_mut().iter_mut().zip(row) {
                            *d += go * wv;
                        }
                    }
                    out.push((*x, Value::Real(gx)));
                }
                if self.wants(*w) {
                    let mut gw = ImageTensor::zeros(kout, n, 1);
                    for o in 0..kout {
                        let go = gr.data()[o];
                        for (d, xv) in gw.data_mut()[o * n..(o + 1) * n].iter_mut().zip(xv.data()) {
                            *d = go * xv;
                        }
                    }
                    out.push((*w, Value::Real(gw)));
                }
                if self.wants(*b) {
                    out.push((*b, Value::Real(gr.clone())));
                }
            }
            Op::Mse { a, target } => {
                let av = real_of(self.val(*a));
                let tv = real_of(self.val(*target));
                let s = 2.0 * real_of(g).data()[0] / av.len().max(1) as f64;
                let diff = av.sub(tv).scaled(s);
                if self.wants(*target) {
                    out.push((*target, Value::Real(diff.scaled(-1.0))));
                }
                if self.wants(*a) {
                    out.push((*a, Value::Real(diff)));
                }
            }
            Op::SoftmaxCe { logits, label } => {
                let lv = real_of(self.val(*logits));
                let s = real_of(g).data()[0];
                let p = crate::loss::softmax(lv.data());
                let data = p
                    .iter()
                    .enumerate()
                    .map(|(i, pi)| s * (pi - if i == *label { 1.0 } else { 0.0 }))
                    .collect();
                let (h, w, c) = lv.shape();
                out.push((*logits, Value::Real(ImageTensor::new(h, w, c, data)?)));
            }
            Op::Sum(a) => {
                let (h, w, c) = self.val(*a).shape();
                let s = real_of(g).data()[0];
                out.push((*a, Value::Real(ImageTensor::filled(h, w, c, s))));
            }
        }
        Ok(out)
    }
}

/// Maps a flat index of a tensor of shape `a` to the broadcast element of `b`.
fn broadcast_index(
    a: (usize, usize, usize),
    b: (usize, usize, usize),
) -> impl Fn(usize) -> usize {
    let plane = a.0 * a.1;
    let mode = if a == b {
        0
    } else if b == (1, 1, 1) {
        1
    } else {
        2
    };
    move |i| match mode {
        0 => i,
        1 => 0,
        _ => i % plane,
    }
}

pub(crate) fn conv_bank_forward(x: &ImageTensor, filters: &ImageTensor, merged: bool) -> Result<ImageTensor> {
    let (h, w, colors) = x.shape();
    let (kh, kw, m) = filters.shape();
    if kh > h || kw > w {
        return invalid("conv_bank: filter larger than image");
    }
    let out_ch = if merged { m } else { m * colors };
    let mut out = ImageTensor::zeros(h, w, out_ch);
    for color in 0..colors {
        for i in 0..m {
            let oc = if merged { i } else { color * m + i };
            conv_plane_direct(
                x.plane(color),
                h,
                w,
                filters.plane(i),
                kh,
                kw,
                ConvMode::Forward,
                out.plane_mut(oc),
            );
        }
    }
    Ok(out)
}

pub(crate) fn pixel_affine_forward(x: &ImageTensor, w: &ImageTensor, b: &ImageTensor) -> Result<ImageTensor> {
    let (cout, cin, one) = w.shape();
    if one != 1 || cin == 0 || x.channels() % cin != 0 || b.len() != cout {
        return invalid(format!(
            "pixel_affine: weight {:?} / bias {} incompatible with {} input channels",
            w.shape(),
            b.len(),
            x.channels()
        ));
    }
    let groups = x.channels() / cin;
    let mut out = ImageTensor::zeros(x.height(), x.width(), cout * groups);
    for g in 0..groups {
        for o in 0..cout {
            let bias = b.data()[o];
            let dst = out.plane_mut(g * cout + o);
            dst.iter_mut().for_each(|v| *v = bias);
            for k in 0..cin {
                let wk = w.data()[o * cin + k];
                if wk == 0.0 {
                    continue;
                }
                for (d, s) in dst.iter_mut().zip(x.plane(g * cin + k)) {
                    *d += wk * s;
                }
            }
        }
    }
    Ok(out)
}

/// Accumulates `dst[i, j] += wv * src[i + di, j + dj]` over the valid region.
#[inline]
fn shifted_axpy(dst: &mut [f64], src: &[f64], h: usize, w: usize, di: isize, dj: isize, wv: f64) {
    let i0 = (-di).max(0) as usize;
    let i1 = (h as isize - di.max(0)) as usize;
    let j0 = (-dj).max(0) as usize;
    let j1 = (w as isize - dj.max(0)) as usize;
    if i0 >= i1 || j0 >= j1 {
        return;
    }
    for i in i0..i1 {
        let si = (i as isize + di) as usize;
        let s = &src[si * w + (j0 as isize + dj) as usize..si * w + (j1 as isize + dj) as usize];
        let d = &mut dst[i * w + j0..i * w + j1];
        for (a, b) in d.iter_mut().zip(s) {
            *a += wv * b;
        }
    }
}

#[inline]
fn shifted_dot(a: &[f64], src: &[f64], h: usize, w: usize, di: isize, dj: isize) -> f64 {
    let i0 = (-di).max(0) as usize;
    let i1 = (h as isize - di.max(0)) as usize;
    let j0 = (-dj).max(0) as usize;
    let j1 = (w as isize - dj.max(0)) as usize;
    let mut acc = 0.0;
    if i0 >= i1 || j0 >= j1 {
        return acc;
    }
    for i in i0..i1 {
        let si = (i as isize + di) as usize;
        let s = &src[si * w + (j0 as isize + dj) as usize..si * w + (j1 as isize + dj) as usize];
        let d = &a[i * w + j0..i * w + j1];
        acc += d.iter().zip(s).map(|(p, q)| p * q).sum::<f64>();
    }
    acc
}

fn conv2d_forward(x: &ImageTensor, w: &ImageTensor, b: &ImageTensor, k: usize) -> ImageTensor {
    let (h, wd, cin) = x.shape();
    let cout = b.len();
    let r = (k / 2) as isize;
    let mut out = ImageTensor::zeros(h, wd, cout);
    for o in 0..cout {
        let dst = out.plane_mut(o);
        dst.iter_mut().for_each(|v| *v = b.data()[o]);
        for c in 0..cin {
            let ker = w.plane(o * cin + c);
            for p in 0..k {
                for q in 0..k {
                    let wv = ker[p * k + q];
                    shifted_axpy(dst, x.plane(c), h, wd, p as isize - r, q as isize - r, wv);
                }
            }
        }
    }
    out
}

type Conv2dGrads = (Option<ImageTensor>, Option<ImageTensor>, ImageTensor);

fn conv2d_backward(
    x: &ImageTensor,
    w: &ImageTensor,
    g: &ImageTensor,
    k: usize,
    want_x: bool,
    want_w: bool,
) -> Conv2dGrads {
    let (h, wd, cin) = x.shape();
    let cout = g.channels();
    let r = (k / 2) as isize;
    let gx = want_x.then(|| {
        let mut gx = ImageTensor::zeros(h, wd, cin);
        for o in 0..cout {
            for c in 0..cin {
                let ker = w.plane(o * cin + c);
                for p in 0..k {
                    for q in 0..k {
                        // out[i] uses x[i + d]; so x[i'] receives g[i' - d]
                        let (di, dj) = (p as isize - r, q as isize - r);
                        shifted_axpy(gx.plane_mut(c), g.plane(o), h, wd, -di, -dj, ker[p * k + q]);
                    }
                }
            }
        }
        gx
    });
    let gw = want_w.then(|| {
        let mut gw = ImageTensor::zeros(k, k, cout * cin);
        for o in 0..cout {
            for c in 0..cin {
                for p in 0..k {
                    for q in 0..k {
                        let v = shifted_dot(g.plane(o), x.plane(c), h, wd, p as isize - r, q as isize - r);
                        gw.plane_mut(o * cin + c)[p * k + q] = v;
                    }
                }
            }
        }
        gw
    });
    let n = h * wd;
    let gb = ImageTensor::new(
        cout,
        1,
        1,
        (0..cout).map(|o| g.data()[o * n..(o + 1) * n].iter().sum()).collect(),
    )
    .expect("bias gradient shape");
    (gx, gw, gb)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imaging::Rng;

    fn rand_real(h: usize, w: usize, c: usize, rng: &mut Rng) -> Value {
        Value::Real(ImageTensor::from_fn(h, w, c, |_, _, _| rng.uniform_range(-1.0, 1.0)))
    }

    fn rand_complex(h: usize, w: usize, c: usize, rng: &mut Rng) -> Value {
        let mut f = ComplexField::zeros(h, w, c);
        f.re.iter_mut().for_each(|v| *v = rng.uniform_range(-1.0, 1.0));
        f.im.iter_mut().for_each(|v| *v = rng.uniform_range(-1.0, 1.0));
        Value::Complex(f)
    }

    fn like(v: &Value, rng: &mut Rng) -> Value {
        let (h, w, c) = v.shape();
        match v {
            Value::Real(_) => rand_real(h, w, c, rng),
            Value::Complex(_) => rand_complex(h, w, c, rng),
        }
    }

    fn inner(a: &Value, b: &Value) -> f64 {
        match (a, b) {
            (Value::Real(x), Value::Real(y)) => x.dot(y),
            (Value::Complex(x), Value::Complex(y)) => {
                x.re.iter().zip(&y.re).map(|(p, q)| p * q).sum::<f64>()
                    + x.im.iter().zip(&y.im).map(|(p, q)| p * q).sum::<f64>()
            }
            _ => panic!("kind mismatch"),
        }
    }

    fn axpy(x: &Value, t: f64, v: &Value) -> Value {
        let mut out = v.clone();
        out.scale(t);
        out.accumulate(x);
        out
    }

    fn eval<F>(build: &F, inputs: &[Value]) -> Value
    where
        F: Fn(&mut Tape, &[Var]) -> Result<Var>,
    {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|v| tape.push(v.clone(), Op::Leaf, true)).collect();
        let out = build(&mut tape, &vars).unwrap();
        tape.value(out).clone()
    }

    /// Checks `<J v, w> = <v, J^T w>`, with `J v` from a fourth-order central difference.
    fn check_adjoint<F>(name: &str, inputs: Vec<Value>, step: f64, build: F)
    where
        F: Fn(&mut Tape, &[Var]) -> Result<Var>,
    {
        let mut rng = Rng::new(name.len() as u64 * 7919);
        let dirs: Vec<Value> = inputs.iter().map(|v| like(v, &mut rng)).collect();
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|v| tape.push(v.clone(), Op::Leaf, true)).collect();
        let out = build(&mut tape, &vars).unwrap();
        let w = like(tape.value(out), &mut rng);
        let grads = tape.backward_with_seed(out, w.clone()).unwrap();
        let vjp: f64 = vars
            .iter()
            .zip(&dirs)
            .map(|(v, d)| grads.grads[v.0].as_ref().map_or(0.0, |g| inner(g, d)))
            .sum();
        let at = |t: f64| {
            let shifted: Vec<Value> = inputs.iter().zip(&dirs).map(|(x, d)| axpy(x, t, d)).collect();
            inner(&eval(&build, &shifted), &w)
        };
        let jvp = (8.0 * (at(step) - at(-step)) - (at(2.0 * step) - at(-2.0 * step))) / (12.0 * step);
        let rel = (jvp - vjp).abs() / jvp.abs().max(vjp.abs()).max(1e-12);
        assert!(rel <= 1e-9, "{name}: <Jv,w>={jvp} <v,J^T w>={vjp} rel={rel}");
    }

    #[test]
    fn fourier_ops_adjoint() {
        let mut rng = Rng::new(1);
        check_adjoint("fft2", vec![rand_real(5, 6, 2, &mut rng)], 1e-2, |t, v| t.fft2(v[0]));
        check_adjoint("ifft2", vec![rand_complex(5, 6, 2, &mut rng)], 1e-2, |t, v| t.ifft2_real(v[0]));
        check_adjoint("embed", vec![rand_real(3, 3, 2, &mut rng)], 1e-2, |t, v| t.embed(v[0], 7, 5));
    }

    #[test]
    fn complex_algebra_adjoint() {
        let mut rng = Rng::new(2);
        for conj in [false, true] {
            check_adjoint(
                if conj { "cmul-conj" } else { "cmul" },
                vec![rand_complex(4, 4, 2, &mut rng), rand_complex(4, 4, 6, &mut rng)],
                1e-3,
                move |t, v| t.cmul(v[0], v[1], conj),
            );
        }
        check_adjoint("group_sum-c", vec![rand_complex(4, 3, 6, &mut rng)], 1e-2, |t, v| t.group_sum(v[0], 3));
        check_adjoint("group_sum-r", vec![rand_real(4, 3, 6, &mut rng)], 1e-2, |t, v| t.group_sum(v[0], 2));
        check_adjoint("abs2", vec![rand_complex(4, 4, 2, &mut rng)], 1e-3, |t, v| t.abs2(v[0]));
        let den = Value::Real(ImageTensor::from_fn(4, 4, 1, |_, _, _| rng.uniform_range(1.0, 2.0)));
        check_adjoint("cdiv", vec![rand_complex(4, 4, 3, &mut rng), den], 1e-3, |t, v| t.cdiv_real(v[0], v[1]));
    }

    #[test]
    fn arithmetic_adjoint() {
        let mut rng = Rng::new(3);
        check_adjoint("add", vec![rand_real(3, 4, 2, &mut rng), rand_real(3, 4, 2, &mut rng)], 1e-2, |t, v| t.add(v[0], v[1]));
        check_adjoint("add-plane", vec![rand_real(3, 4, 3, &mut rng), rand_real(3, 4, 1, &mut rng)], 1e-2, |t, v| t.add(v[0], v[1]));
        check_adjoint("sub-scalar", vec![rand_real(3, 4, 2, &mut rng), rand_real(1, 1, 1, &mut rng)], 1e-2, |t, v| t.sub(v[0], v[1]));
        check_adjoint("add-complex-plane", vec![rand_complex(3, 4, 2, &mut rng), rand_complex(3, 4, 1, &mut rng)], 1e-2, |t, v| t.add(v[0], v[1]));
        check_adjoint("scale", vec![rand_real(3, 4, 2, &mut rng), rand_real(1, 1, 1, &mut rng)], 1e-3, |t, v| t.scale(v[0], v[1]));
        check_adjoint("scale-complex", vec![rand_complex(3, 4, 2, &mut rng), rand_real(1, 1, 1, &mut rng)], 1e-3, |t, v| t.scale(v[0], v[1]));
        check_adjoint("add_const", vec![rand_real(3, 4, 2, &mut rng)], 1e-2, |t, v| t.add_const(v[0], 0.3));
        check_adjoint("exp", vec![rand_real(3, 4, 2, &mut rng)], 1e-3, |t, v| t.exp(v[0]));
        check_adjoint("sum", vec![rand_real(3, 4, 2, &mut rng)], 1e-2, |t, v| t.sum(v[0]));
        check_adjoint("mse", vec![rand_real(3, 4, 2, &mut rng), rand_real(3, 4, 2, &mut rng)], 1e-3, |t, v| t.mse(v[0], v[1]));
        check_adjoint("softmax_ce", vec![rand_real(6, 1, 1, &mut rng)], 1e-3, |t, v| t.softmax_ce(v[0], 4));
    }

    /// Values bounded away from zero so small perturbations never cross a kink.
    fn away_from_zero(h: usize, w: usize, c: usize, rng: &mut Rng) -> Value {
        Value::Real(ImageTensor::from_fn(h, w, c, |_, _, _| {
            let m = rng.uniform_range(0.2, 1.0);
            if rng.uniform() < 0.5 {
                -m
            } else {
                m
            }
        }))
    }

    #[test]
    fn image_ops_adjoint() {
        let mut rng = Rng::new(4);
        for merged in [false, true] {
            check_adjoint(
                "conv_bank",
                vec![rand_real(7, 6, 3, &mut rng), rand_real(5, 5, 4, &mut rng)],
                1e-3,
                move |t, v| t.conv_bank(v[0], v[1], merged),
            );
        }
        check_adjoint(
            "pixel_affine",
            vec![rand_real(4, 5, 6, &mut rng), rand_real(2, 3, 1, &mut rng), rand_real(2, 1, 1, &mut rng)],
            1e-3,
            |t, v| t.pixel_affine(v[0], v[1], v[2]),
        );
        check_adjoint("relu", vec![away_from_zero(4, 5, 2, &mut rng)], 1e-3, |t, v| t.relu(v[0]));
        let y = Value::Real(ImageTensor::from_fn(4, 5, 2, |_, _, _| rng.uniform_range(0.1, 1.0)));
        check_adjoint("gat", vec![y], 1e-4, |t, v| t.gat(v[0], 0.02, 0.01));
        let z = Value::Real(ImageTensor::from_fn(4, 5, 2, |_, _, _| rng.uniform_range(1.0, 10.0)));
        check_adjoint("gat_inverse", vec![z], 1e-2, |t, v| t.gat_inverse(v[0], 0.02, 0.01));
    }

    #[test]
    fn classifier_ops_adjoint() {
        let mut rng = Rng::new(5);
        check_adjoint(
            "conv2d",
            vec![rand_real(6, 7, 2, &mut rng), rand_real(3, 3, 6, &mut rng), rand_real(3, 1, 1, &mut rng)],
            1e-3,
            |t, v| t.conv2d(v[0], v[1], v[2]),
        );
        // Distinct, well-separated values keep every pooling window's winner fixed.
        let mut vals: Vec<f64> = (0..6 * 8 * 2).map(|i| i as f64 * 0.1).collect();
        rng.shuffle(&mut vals);
        let pooled = Value::Real(ImageTensor::new(6, 8, 2, vals).unwrap());
        check_adjoint("maxpool2", vec![pooled], 1e-3, |t, v| t.maxpool2(v[0]));
        check_adjoint(
            "dense",
            vec![rand_real(3, 4, 2, &mut rng), rand_real(5, 24, 1, &mut rng), rand_real(5, 1, 1, &mut rng)],
            1e-3,
            |t, v| t.dense(v[0], v[1], v[2]),
        );
    }

    #[test]
    fn quadratic_loss_gradient_is_input() {
        let mut rng = Rng::new(6);
        let x = ImageTensor::from_fn(4, 4, 2, |_, _, _| rng.normal());
        let mut tape = Tape::new();
        let xv = tape.param(x.clone());
        let zero = tape.constant(ImageTensor::zeros(4, 4, 2));
        let m = tape.mse(xv, zero).unwrap();
        let n = tape.constant(ImageTensor::scalar(0.5 * x.len() as f64));
        let loss = tape.scale(m, n).unwrap();
        let g = tape.backward(loss).unwrap();
        assert!(g.real(xv).unwrap().max_abs_diff(&x) <= 1e-15);
    }

    #[test]
    fn second_backward_is_an_error() {
        let mut tape = Tape::new();
        let x = tape.param(ImageTensor::filled(2, 2, 1, 1.0));
        let s = tape.sum(x).unwrap();
        tape.backward(s).unwrap();
        assert!(matches!(tape.backward(s), Err(Error::State(_))));
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut tape = Tape::new();
        let x = tape.param(ImageTensor::filled(2, 2, 1, 1.0));
        assert!(matches!(tape.backward(x), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut tape = Tape::new();
        let x = tape.param(ImageTensor::filled(2, 2, 1, 1.0));
        let c = tape.constant(ImageTensor::filled(2, 2, 1, 3.0));
        let y = tape.add(x, c).unwrap();
        let s = tape.sum(y).unwrap();
        let g = tape.backward(s).unwrap();
        assert!(g.real(c).is_none());
        assert_eq!(g.real(x).unwrap().data(), &[1.0; 4]);
    }

    #[test]
    fn kink_signature_tracks_relu_mask() {
        let sig = |v: f64| {
            let mut tape = Tape::new();
            let x = tape.param(ImageTensor::filled(1, 2, 1, v));
            tape.relu(x).unwrap();
            tape.kink_signature()
        };
        assert_eq!(sig(0.3), sig(0.7));
        assert_ne!(sig(0.3), sig(-0.3));
    }

    #[test]
    fn injected_fault_changes_gradient() {
        let build = |fault: bool| {
            let mut tape = Tape::new();
            if fault {
                tape.inject_adjoint_fault("exp", 2.0);
            }
            let x = tape.param(ImageTensor::filled(1, 1, 1, 0.5));
            let e = tape.exp(x).unwrap();
            let g = tape.backward(e).unwrap();
            g.real(x).unwrap().data()[0]
        };
        assert!((build(true) - 2.0 * build(false)).abs() < 1e-15);
    }
}
