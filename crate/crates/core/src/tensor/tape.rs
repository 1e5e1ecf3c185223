use super::kernels::{self, DwGeom, NormCache};
use super::{Real, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Gelu(Var),
    Sum(Var),
    DwConv {
        x: Var,
        kernel: Var,
        geom: DwGeom,
    },
    Pointwise {
        x: Var,
        weight: Var,
        bias: Var,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        cache: NormCache<T>,
    },
    /// Pure rearrangement: `out[k] = x[map[k]]`.
    Gather {
        x: Var,
        map: Vec<usize>,
    },
    Resize {
        x: Var,
        from: (usize, usize),
        to: (usize, usize),
    },
    Concat(Vec<Var>),
    WeightedAbsMean {
        pred: Var,
        target: Var,
        rows: Vec<T>,
    },
    WeightedSqMean {
        pred: Var,
        target: Var,
        rows: Vec<T>,
    },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Ordered record of primitive ops. Inputs always precede the ops that use
/// them, so a single reverse sweep visits each op once in reverse
/// topological order.
#[derive(Debug, Default)]
pub struct Tape<T = f32> {
    nodes: Vec<Node<T>>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug, Clone)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

fn check_same(a: &[usize], b: &[usize], what: &str) -> Result<()> {
    if a != b {
        return Err(Error::shape(format!("{what}: shape {a:?} vs {b:?}")));
    }
    Ok(())
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Register an input. Leaves are the only values gradients are reported for.
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    fn push(&mut self, name: &str, data: Vec<T>, shape: Vec<usize>, op: Op<T>, inputs: &[Var]) -> Result<Var> {
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::numeric(
                name,
                format!("non-finite output {} at flat index {i}", data[i]),
            ));
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value: Tensor::new(shape, data)?,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn dims3(&self, v: Var, what: &str) -> Result<(usize, usize, usize)> {
        self.value(v)
            .dims3()
            .map_err(|e| Error::shape(format!("{what}: {e}")))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        check_same(va.shape(), vb.shape(), "add")?;
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| x + y).collect();
        let shape = va.shape().to_vec();
        self.push("add", data, shape, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        check_same(va.shape(), vb.shape(), "sub")?;
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| x - y).collect();
        let shape = va.shape().to_vec();
        self.push("sub", data, shape, Op::Sub(a, b), &[a, b])
    }

    /// Elementwise (Hadamard) product.
    pub fn hadamard(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        check_same(va.shape(), vb.shape(), "hadamard")?;
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| x * y).collect();
        let shape = va.shape().to_vec();
        self.push("hadamard", data, shape, Op::Mul(a, b), &[a, b])
    }

    pub fn scale(&mut self, a: Var, s: T) -> Result<Var> {
        let va = self.value(a);
        let data = va.data().iter().map(|&x| x * s).collect();
        let shape = va.shape().to_vec();
        self.push("scale", data, shape, Op::Scale(a, s), &[a])
    }

    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        let va = self.value(a);
        let data = va.data().iter().map(|&x| kernels::gelu(x)).collect();
        let shape = va.shape().to_vec();
        self.push("gelu", data, shape, Op::Gelu(a), &[a])
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).sum();
        self.push("sum", vec![s], vec![1], Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).len();
        let s = self.sum(a)?;
        self.scale(s, T::one() / T::lit(n as f64))
    }

    /// Depthwise cross-correlation of `x: [C,H,W]` with `kernel: [C,k,k]`.
    /// Rows replicate at the edges, columns wrap around.
    pub fn conv2d_depthwise(&mut self, x: Var, kernel: Var, dilation: usize) -> Result<Var> {
        let (c, h, w) = self.dims3(x, "conv2d_depthwise input")?;
        let (kc, k, k2) = self.dims3(kernel, "conv2d_depthwise kernel")?;
        if k != k2 || k % 2 == 0 {
            return Err(Error::config(format!(
                "depthwise kernel must be square with odd size, got {k}x{k2}"
            )));
        }
        if dilation == 0 {
            return Err(Error::config("dilation must be at least 1"));
        }
        if kc != c {
            return Err(Error::shape(format!("kernel has {kc} channels, input {c}")));
        }
        let geom = DwGeom { c, h, w, k, dilation };
        let data = kernels::dwconv_forward(self.value(x).data(), self.value(kernel).data(), geom);
        self.push(
            "conv2d_depthwise",
            data,
            vec![c, h, w],
            Op::DwConv { x, kernel, geom },
            &[x, kernel],
        )
    }

    /// Per-pixel affine map across channels: `weight: [Cout,Cin]`, `bias: [Cout]`.
    pub fn conv2d_pointwise(&mut self, x: Var, weight: Var, bias: Var) -> Result<Var> {
        let (cin, h, w) = self.dims3(x, "conv2d_pointwise input")?;
        let ws = self.value(weight).shape();
        let (cout, win) = match *ws {
            [o, i] => (o, i),
            _ => return Err(Error::shape(format!("pointwise weight must be 2-D, got {ws:?}"))),
        };
        if win != cin {
            return Err(Error::shape(format!(
                "pointwise weight expects {win} input channels, got {cin}"
            )));
        }
        if self.value(bias).shape() != [cout] {
            return Err(Error::shape(format!(
                "pointwise bias shape {:?}, expected [{cout}]",
                self.value(bias).shape()
            )));
        }
        let data = kernels::pointwise_forward(
            self.value(x).data(),
            self.value(weight).data(),
            self.value(bias).data(),
            cin,
            cout,
            h * w,
        );
        self.push(
            "conv2d_pointwise",
            data,
            vec![cout, h, w],
            Op::Pointwise { x, weight, bias },
            &[x, weight, bias],
        )
    }

    /// Normalize over channels at every pixel, then scale and shift per channel.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: T) -> Result<Var> {
        if eps <= T::zero() {
            return Err(Error::config("layer_norm eps must be positive"));
        }
        let (c, h, w) = self.dims3(x, "layer_norm input")?;
        if self.value(gamma).shape() != [c] || self.value(beta).shape() != [c] {
            return Err(Error::shape(format!("layer_norm gain/bias must be [{c}]")));
        }
        let (data, cache) = kernels::layer_norm_forward(
            self.value(x).data(),
            self.value(gamma).data(),
            self.value(beta).data(),
            c,
            h * w,
            eps,
        );
        self.push(
            "layer_norm",
            data,
            vec![c, h, w],
            Op::LayerNorm { x, gamma, beta, cache },
            &[x, gamma, beta],
        )
    }

    /// `[C·r², H, W] -> [C, H·r, W·r]`.
    pub fn pixel_shuffle(&mut self, x: Var, r: usize) -> Result<Var> {
        let (cr, h, w) = self.dims3(x, "pixel_shuffle input")?;
        if r == 0 || cr % (r * r) != 0 {
            return Err(Error::shape(format!(
                "pixel_shuffle: {cr} channels not divisible by {r}²"
            )));
        }
        let c = cr / (r * r);
        let map = kernels::pixel_shuffle_map(c, h, w, r);
        let data = kernels::gather(self.value(x).data(), &map);
        self.push("pixel_shuffle", data, vec![c, h * r, w * r], Op::Gather { x, map }, &[x])
    }

    /// `[C, H·r, W·r] -> [C·r², H, W]`, the inverse of [`Tape::pixel_shuffle`].
    pub fn pixel_unshuffle(&mut self, x: Var, r: usize) -> Result<Var> {
        let (c, hr, wr) = self.dims3(x, "pixel_unshuffle input")?;
        if r == 0 || hr % r != 0 || wr % r != 0 {
            return Err(Error::shape(format!(
                "pixel_unshuffle: spatial dims {hr}x{wr} not divisible by {r}"
            )));
        }
        let (h, w) = (hr / r, wr / r);
        let forward = kernels::pixel_shuffle_map(c, h, w, r);
        let mut map = vec![0; forward.len()];
        for (dst, &src) in forward.iter().enumerate() {
            map[src] = dst;
        }
        let data = kernels::gather(self.value(x).data(), &map);
        self.push("pixel_unshuffle", data, vec![c * r * r, h, w], Op::Gather { x, map }, &[x])
    }

    /// Keep the first `rows` latitude rows of a `[C,H,W]` tensor.
    pub fn crop_rows(&mut self, x: Var, rows: usize) -> Result<Var> {
        let (c, h, w) = self.dims3(x, "crop_rows input")?;
        if rows == 0 || rows > h {
            return Err(Error::shape(format!("cannot keep {rows} of {h} rows")));
        }
        if rows == h {
            return Ok(x);
        }
        let map: Vec<usize> = (0..c)
            .flat_map(|ch| (0..rows * w).map(move |p| ch * h * w + p))
            .collect();
        let data = kernels::gather(self.value(x).data(), &map);
        self.push("crop_rows", data, vec![c, rows, w], Op::Gather { x, map }, &[x])
    }

    /// Align-corners bilinear resize to `(h2, w2)`. Same size is the identity.
    pub fn resize_bilinear(&mut self, x: Var, h2: usize, w2: usize) -> Result<Var> {
        let (c, h, w) = self.dims3(x, "resize_bilinear input")?;
        if h2 == 0 || w2 == 0 {
            return Err(Error::shape("resize target must be at least 1x1"));
        }
        if (h, w) == (h2, w2) {
            return Ok(x);
        }
        let data = kernels::resize_forward(self.value(x).data(), c, (h, w), (h2, w2));
        self.push(
            "resize_bilinear",
            data,
            vec![c, h2, w2],
            Op::Resize {
                x,
                from: (h, w),
                to: (h2, w2),
            },
            &[x],
        )
    }

    /// Stack `[Ci,H,W]` inputs along channels in argument order.
    pub fn concat_channels(&mut self, xs: &[Var]) -> Result<Var> {
        let Some(&first) = xs.first() else {
            return Err(Error::shape("concat_channels needs at least one input"));
        };
        let (_, h, w) = self.dims3(first, "concat_channels input")?;
        let mut total = 0;
        for &v in xs {
            let (c, hv, wv) = self.dims3(v, "concat_channels input")?;
            if (hv, wv) != (h, w) {
                return Err(Error::shape(format!(
                    "concat_channels: spatial {hv}x{wv} vs {h}x{w}"
                )));
            }
            total += c;
        }
        if xs.len() == 1 {
            return Ok(first);
        }
        let mut data = Vec::with_capacity(total * h * w);
        for &v in xs {
            data.extend_from_slice(self.value(v).data());
        }
        self.push(
            "concat_channels",
            data,
            vec![total, h, w],
            Op::Concat(xs.to_vec()),
            xs,
        )
    }

    fn loss_rows(&self, pred: Var, target: Var, rows: &[T], what: &str) -> Result<usize> {
        let (vp, vt) = (self.value(pred), self.value(target));
        check_same(vp.shape(), vt.shape(), what)?;
        let (_, h, w) = vp.dims3()?;
        if rows.len() != h {
            return Err(Error::shape(format!(
                "{what}: {} latitude weights for {h} rows",
                rows.len()
            )));
        }
        Ok(w)
    }

    /// Latitude-weighted mean absolute error; `rows` holds one weight per latitude.
    pub fn weighted_abs_mean(&mut self, pred: Var, target: Var, rows: &[T]) -> Result<Var> {
        let w = self.loss_rows(pred, target, rows, "weighted_abs_mean")?;
        let v = kernels::weighted_abs_mean(self.value(pred).data(), self.value(target).data(), rows, w);
        let op = Op::WeightedAbsMean {
            pred,
            target,
            rows: rows.to_vec(),
        };
        self.push("weighted_abs_mean", vec![v], vec![1], op, &[pred, target])
    }

    /// Latitude-weighted mean squared error.
    pub fn weighted_sq_mean(&mut self, pred: Var, target: Var, rows: &[T]) -> Result<Var> {
        let w = self.loss_rows(pred, target, rows, "weighted_sq_mean")?;
        let v = kernels::weighted_sq_mean(self.value(pred).data(), self.value(target).data(), rows, w);
        let op = Op::WeightedSqMean {
            pred,
            target,
            rows: rows.to_vec(),
        };
        self.push("weighted_sq_mean", vec![v], vec![1], op, &[pred, target])
    }

    /// Reverse sweep from a scalar `loss`. Gradients are accumulated in a
    /// fixed order, so repeated calls return bitwise-identical results.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).len() != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = Vec::with_capacity(loss.0 + 1);
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(vec![T::one()]);

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(&node.op, &node.value, &g, &mut grads);
        }

        let grads = grads
            .into_iter()
            .enumerate()
            .map(|(i, g)| match (&self.nodes[i].op, g) {
                (Op::Leaf, Some(g)) if self.nodes[i].requires_grad => {
                    Some(Tensor::new(self.nodes[i].value.shape().to_vec(), g).expect("grad shape"))
                }
                _ => None,
            })
            .collect();
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Vec<T>>], v: Var, g: Vec<T>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, &b)| *a += b),
            slot @ None => *slot = Some(g),
        }
    }

    fn propagate(&self, op: &Op<T>, out: &Tensor<T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
        match op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.to_vec());
                self.accumulate(grads, *b, g.to_vec());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.to_vec());
                self.accumulate(grads, *b, g.iter().map(|&v| -v).collect());
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                if self.requires_grad(*a) {
                    self.accumulate(grads, *a, g.iter().zip(vb).map(|(&g, &y)| g * y).collect());
                }
                if self.requires_grad(*b) {
                    self.accumulate(grads, *b, g.iter().zip(va).map(|(&g, &x)| g * x).collect());
                }
            }
            Op::Scale(a, s) => {
                self.accumulate(grads, *a, g.iter().map(|&v| v * *s).collect());
            }
            Op::Gelu(a) => {
                let va = self.value(*a).data();
                let gx = g
                    .iter()
                    .zip(va)
                    .map(|(&g, &x)| g * kernels::gelu_grad(x))
                    .collect();
                self.accumulate(grads, *a, gx);
            }
            Op::Sum(a) => {
                let n = self.value(*a).len();
                self.accumulate(grads, *a, vec![g[0]; n]);
            }
            Op::DwConv { x, kernel, geom } => {
                let (gx, gk) = kernels::dwconv_backward(
                    self.value(*x).data(),
                    self.value(*kernel).data(),
                    g,
                    *geom,
                );
                self.accumulate(grads, *x, gx);
                self.accumulate(grads, *kernel, gk);
            }
            Op::Pointwise { x, weight, bias } => {
                let (cin, h, w) = self.value(*x).dims3().expect("checked in forward");
                let cout = out.shape()[0];
                let (gx, gw, gb) = kernels::pointwise_backward(
                    self.value(*x).data(),
                    self.value(*weight).data(),
                    g,
                    cin,
                    cout,
                    h * w,
                );
                self.accumulate(grads, *x, gx);
                self.accumulate(grads, *weight, gw);
                self.accumulate(grads, *bias, gb);
            }
            Op::LayerNorm { x, gamma, beta, cache } => {
                let (c, h, w) = out.dims3().expect("checked in forward");
                let (gx, gg, gb) =
                    kernels::layer_norm_backward(cache, self.value(*gamma).data(), g, c, h * w);
                self.accumulate(grads, *x, gx);
                self.accumulate(grads, *gamma, gg);
                self.accumulate(grads, *beta, gb);
            }
            Op::Gather { x, map } => {
                let n = self.value(*x).len();
                self.accumulate(grads, *x, kernels::scatter(g, map, n));
            }
            Op::Resize { x, from, to } => {
                let c = out.shape()[0];
                self.accumulate(grads, *x, kernels::resize_backward(g, c, *from, *to));
            }
            Op::Concat(xs) => {
                let mut offset = 0;
                for &v in xs {
                    let n = self.value(v).len();
                    self.accumulate(grads, v, g[offset..offset + n].to_vec());
                    offset += n;
                }
            }
            Op::WeightedAbsMean { pred, target, rows } => {
                let scale = g[0] / T::lit(out_len(self.value(*pred)) as f64);
                let gp = weighted_grad(self.value(*pred), self.value(*target), rows, |d| {
                    if d > T::zero() {
                        T::one()
                    } else if d < T::zero() {
                        -T::one()
                    } else {
                        T::zero()
                    }
                }, scale);
                self.accumulate_pair(grads, *pred, *target, gp);
            }
            Op::WeightedSqMean { pred, target, rows } => {
                let scale = g[0] / T::lit(out_len(self.value(*pred)) as f64);
                let two = T::lit(2.0);
                let gp = weighted_grad(self.value(*pred), self.value(*target), rows, |d| two * d, scale);
                self.accumulate_pair(grads, *pred, *target, gp);
            }
        }
    }

    fn accumulate_pair(&self, grads: &mut [Option<Vec<T>>], pred: Var, target: Var, gp: Vec<T>) {
        if self.requires_grad(target) {
            self.accumulate(grads, target, gp.iter().map(|&v| -v).collect());
        }
        self.accumulate(grads, pred, gp);
    }
}

fn out_len<T: Real>(t: &Tensor<T>) -> usize {
    t.len()
}

fn weighted_grad<T: Real>(
    pred: &Tensor<T>,
    target: &Tensor<T>,
    rows: &[T],
    dfn: impl Fn(T) -> T,
    scale: T,
) -> Vec<T> {
    let w = *pred.shape().last().expect("3-D");
    let h = rows.len();
    let mut out = Vec::with_capacity(pred.len());
    for (r, (p, t)) in pred
        .data()
        .chunks_exact(w)
        .zip(target.data().chunks_exact(w))
        .enumerate()
    {
        let a = rows[r % h] * scale;
        out.extend(p.iter().zip(t).map(|(&p, &t)| a * dfn(p - t)));
    }
    out
}
