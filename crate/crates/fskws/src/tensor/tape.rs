use super::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var {
    id: usize,
}

type BackFn<T> = Box<dyn Fn(&Tensor<T>, &mut GradStore<T>)>;

struct Node<T> {
    value: Tensor<T>,
    requires_grad: bool,
    op: &'static str,
    back: Option<BackFn<T>>,
}

/// Gradient accumulator used during the reverse pass. Contributions to
/// nodes with `requires_grad == false` are dropped, so such nodes never
/// receive a gradient.
pub struct GradStore<T> {
    grads: Vec<Option<Tensor<T>>>,
    rg: Vec<bool>,
}

impl<T: Scalar> GradStore<T> {
    fn add(&mut self, id: usize, shape: &[usize], f: impl FnOnce(&mut [T])) {
        if !self.rg[id] {
            return;
        }
        let slot = &mut self.grads[id];
        if slot.is_none() {
            *slot = Some(Tensor::zeros(shape.to_vec()));
        }
        f(slot.as_mut().unwrap().data_mut());
    }
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients<T>(Vec<Option<Tensor<T>>>);

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, var: Var) -> Option<&Tensor<T>> {
        self.0.get(var.id).and_then(|g| g.as_ref())
    }
}

/// Append-only record of one forward computation. Nodes form a DAG in
/// append order; `backward` replays them exactly once in reverse.
pub struct Tape<T: Scalar = f32> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.id].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.id].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.id].requires_grad
    }

    /// Op tags in append order, for contract tests and diagnostics.
    pub fn ops(&self) -> Vec<&'static str> {
        self.nodes.iter().map(|n| n.op).collect()
    }

    fn push(&mut self, value: Tensor<T>, op: &'static str, rg: bool, back: Option<BackFn<T>>) -> Var {
        debug_assert!(rg || back.is_none());
        self.nodes.push(Node {
            value,
            requires_grad: rg,
            op,
            back,
        });
        Var {
            id: self.nodes.len() - 1,
        }
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(value, "leaf", requires_grad, None)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    /// Identity node; exists so composites can leave a named marker on the tape.
    pub fn tag(&mut self, x: Var, name: &'static str) -> Var {
        let value = self.value(x).clone();
        let shape = value.shape().to_vec();
        let rg = self.requires_grad(x);
        let back: Option<BackFn<T>> = if rg {
            Some(Box::new(move |g, store| {
                let gd: Vec<T> = g.data().to_vec();
                store.add(x.id, &shape, |dx| {
                    for (d, v) in dx.iter_mut().zip(&gd) {
                        *d = *d + *v;
                    }
                });
            }))
        } else {
            None
        };
        self.push(value, name, rg, back)
    }

    /// Reverse pass from a scalar loss node. Every `requires_grad` leaf gets
    /// a gradient of its own shape (zero when it did not participate).
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if !self.value(loss).is_scalar() {
            return Err(Error::InvalidInput(format!(
                "backward: loss node must be scalar, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut store = GradStore {
            grads: (0..self.nodes.len()).map(|_| None).collect(),
            rg: self.nodes.iter().map(|n| n.requires_grad).collect(),
        };
        if store.rg[loss.id] {
            store.grads[loss.id] = Some(Tensor::full(self.shape(loss).to_vec(), T::one()));
        }
        for id in (0..=loss.id).rev() {
            if let (Some(g), Some(back)) = (store.grads[id].clone(), self.nodes[id].back.as_ref()) {
                back(&g, &mut store);
            }
        }
        // non-participating requires_grad leaves report zeros
        for (id, node) in self.nodes.iter().enumerate() {
            if node.requires_grad && node.back.is_none() && store.grads[id].is_none() {
                store.grads[id] = Some(Tensor::zeros(node.value.shape().to_vec()));
            }
        }
        Ok(Gradients(store.grads))
    }

    // ---- elementwise ----

    fn binary_same_shape(
        &mut self,
        op: &'static str,
        a: Var,
        b: Var,
        fwd: impl Fn(T, T) -> T,
        // coefficients of g in da and db as functions of (a, b)
        da: impl Fn(T, T) -> T + 'static,
        db: impl Fn(T, T) -> T + 'static,
    ) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(Error::shape(
                op,
                format!("{:?} vs {:?}", av.shape(), bv.shape()),
            ));
        }
        let shape = av.shape().to_vec();
        let data: Vec<T> = av
            .data()
            .iter()
            .zip(bv.data())
            .map(|(&x, &y)| fwd(x, y))
            .collect();
        let out = Tensor::new(shape.clone(), data)?;
        let rg = self.requires_grad(a) || self.requires_grad(b);
        let back: Option<BackFn<T>> = if rg {
            let ad = av.data().to_vec();
            let bd = bv.data().to_vec();
            let sh = shape;
            Some(Box::new(move |g, store| {
                store.add(a.id, &sh, |dx| {
                    for i in 0..dx.len() {
                        dx[i] = dx[i] + g.data()[i] * da(ad[i], bd[i]);
                    }
                });
                store.add(b.id, &sh, |dx| {
                    for i in 0..dx.len() {
                        dx[i] = dx[i] + g.data()[i] * db(ad[i], bd[i]);
                    }
                });
            }))
        } else {
            None
        };
        Ok(self.push(out, op, rg, back))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape("add", a, b, |x, y| x + y, |_, _| T::one(), |_, _| T::one())
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape(
            "sub",
            a,
            b,
            |x, y| x - y,
            |_, _| T::one(),
            |_, _| -T::one(),
        )
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape("mul", a, b, |x, y| x * y, |_, y| y, |x, _| x)
    }

    fn unary(
        &mut self,
        op: &'static str,
        x: Var,
        fwd: impl Fn(T) -> T,
        dfdx: impl Fn(T) -> T + 'static,
    ) -> Var {
        let xv = self.value(x);
        let shape = xv.shape().to_vec();
        let data: Vec<T> = xv.data().iter().map(|&v| fwd(v)).collect();
        let out = Tensor::new(shape.clone(), data).expect("unary preserves shape");
        let rg = self.requires_grad(x);
        let back: Option<BackFn<T>> = if rg {
            let xd = xv.data().to_vec();
            Some(Box::new(move |g, store| {
                store.add(x.id, &shape, |dx| {
                    for i in 0..dx.len() {
                        dx[i] = dx[i] + g.data()[i] * dfdx(xd[i]);
                    }
                });
            }))
        } else {
            None
        };
        self.push(out, op, rg, back)
    }

    pub fn scale(&mut self, x: Var, c: T) -> Var {
        self.unary("scale", x, |v| v * c, move |_| c)
    }

    pub fn add_scalar(&mut self, x: Var, c: T) -> Var {
        self.unary("add_scalar", x, |v| v + c, |_| T::one())
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(
            "relu",
            x,
            |v| if v > T::zero() { v } else { T::zero() },
            |v| if v > T::zero() { T::one() } else { T::zero() },
        )
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary("exp", x, |v| v.exp(), |v| v.exp())
    }

    /// Natural log. Inputs must be positive; clamp first when they may not be.
    pub fn log(&mut self, x: Var) -> Result<Var> {
        if self.value(x).data().iter().any(|&v| v <= T::zero()) {
            return Err(Error::InvalidInput(
                "log: non-positive input; clamp before taking the log".into(),
            ));
        }
        Ok(self.unary("log", x, |v| v.ln(), |v| T::one() / v))
    }

    /// Clamp to [lo, hi]; subgradient is zero outside the interval.
    pub fn clamp(&mut self, x: Var, lo: T, hi: T) -> Var {
        self.unary(
            "clamp",
            x,
            move |v| v.max(lo).min(hi),
            move |v| {
                if v >= lo && v <= hi {
                    T::one()
                } else {
                    T::zero()
                }
            },
        )
    }

    /// PReLU over a T×D matrix with one learned slope per column (channel).
    pub fn prelu(&mut self, x: Var, slopes: Var) -> Result<Var> {
        let (rows, cols) = self.value(x).dims2()?;
        if self.value(slopes).shape() != [cols] {
            return Err(Error::shape(
                "prelu",
                format!(
                    "input {:?} needs {} slopes, got {:?}",
                    self.value(x).shape(),
                    cols,
                    self.value(slopes).shape()
                ),
            ));
        }
        let xd = self.value(x).data().to_vec();
        let sd = self.value(slopes).data().to_vec();
        let mut out = vec![T::zero(); rows * cols];
        for i in 0..rows {
            for j in 0..cols {
                let v = xd[i * cols + j];
                out[i * cols + j] = if v > T::zero() { v } else { sd[j] * v };
            }
        }
        let value = Tensor::new(vec![rows, cols], out)?;
        let rg = self.requires_grad(x) || self.requires_grad(slopes);
        let back: Option<BackFn<T>> = if rg {
            Some(Box::new(move |g, store| {
                store.add(x.id, &[rows, cols], |dx| {
                    for i in 0..rows {
                        for j in 0..cols {
                            let k = i * cols + j;
                            let coef = if xd[k] > T::zero() { T::one() } else { sd[j] };
                            dx[k] = dx[k] + g.data()[k] * coef;
                        }
                    }
                });
                store.add(slopes.id, &[cols], |ds| {
                    for i in 0..rows {
                        for j in 0..cols {
                            let k = i * cols + j;
                            if xd[k] <= T::zero() {
                                ds[j] = ds[j] + g.data()[k] * xd[k];
                            }
                        }
                    }
                });
            }))
        } else {
            None
        };
        Ok(self.push(value, "prelu", rg, back))
    }

    // ---- shape ----

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let value = self.value(x).clone().reshaped(shape.clone())?;
        let old = self.value(x).shape().to_vec();
        let rg = self.requires_grad(x);
        let back: Option<BackFn<T>> = if rg {
            Some(Box::new(move |g, store| {
                store.add(x.id, &old, |dx| {
                    for (d, v) in dx.iter_mut().zip(g.data()) {
                        *d = *d + *v;
                    }
                });
            }))
        } else {
            None
        };
        Ok(self.push(value, "reshape", rg, back))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let (rows, cols) = self.value(x).dims2()?;
        let xd = self.value(x).data();
        let mut out = vec![T::zero(); rows * cols];
        for i in 0..rows {
            for j in 0..cols {
                out[j * rows + i] = xd[i * cols + j];
            }
        }
        let value = Tensor::new(vec![cols, rows], out)?;
        let rg = self.requires_grad(x);
        let back: Option<BackFn<T>> = if rg {
            Some(Box::new(move |g, store| {
                store.add(x.id, &[rows, cols], |dx| {
                    for i in 0..rows {
                        for j in 0..cols {
                            dx[i * cols + j] = dx[i * cols + j] + g.data()[j * rows + i];
                        }
                    }
                });
            }))
        } else {
            None
        };
        Ok(self.push(value, "transpose", rg, back))
    }

    /// Concatenate rank-1 vectors (or 1×N rows) of equal width into an M×N matrix.
    pub fn stack_rows(&mut self, rows: &[Var]) -> Result<Var> {
        if rows.is_empty() {
            return Err(Error::InvalidInput("stack_rows: empty input".into()));
        }
        let width = self.value(rows[0]).numel();
        let mut data = Vec::with_capacity(rows.len() * width);
        for &r in rows {
            let v = self.value(r);
            if v.numel() != width || v.shape().len() > 2 {
                return Err(Error::shape(
                    "stack_rows",
                    format!("row shape {:?} vs width {}", v.shape(), width),
                ));
            }
            data.extend_from_slice(v.data());
        }
        let value = Tensor::new(vec![rows.len(), width], data)?;
        let rg = rows.iter().any(|&r| self.requires_grad(r));
        let back: Option<BackFn<T>> = if rg {
            let parents: Vec<(usize, Vec<usize>)> = rows
                .iter()
                .map(|&r| (r.id, self.value(r).shape().to_vec()))
                .collect();
            Some(Box::new(move |g, store| {
                for (i, (pid, shape)) in parents.iter().enumerate() {
                    store.add(*pid, shape, |dx| {
                        for j in 0..dx.len() {
                            dx[j] = dx[j] + g.data()[i * dx.len() + j];
                        }
                    });
                }
            }))
        } else {
            None
        };
        Ok(self.push(value, "stack_rows", rg, back))
    }

    // ---- linear algebra ----

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, ka) = self.value(a).dims2()?;
        let (kb, n) = self.value(b).dims2()?;
        if ka != kb {
            return Err(Error::shape(
                "matmul",
                format!("{:?} x {:?}", self.value(a).shape(), self.value(b).shape()),
            ));
        }
        let ad = self.value(a).data().to_vec();
        let bd = self.value(b).data().to_vec();
        let mut out = vec![T::zero(); m * n];
        for i in 0..m {
            for k in 0..ka {
                let aik = ad[i * ka + k];
                let brow = &bd[k * n..(k + 1) * n];
                let orow = &mut out[i * n..(i + 1) * n];
                for j in 0..n {
                    orow[j] = orow[j] + aik * brow[j];
                }
            }
        }
        let value = Tensor::new(vec![m, n], out)?;
        let rg = self.requires_grad(a) || self.requires_grad(b);
        let back: Option<BackFn<T>> = if rg {
            Some(Box::new(move |g, store| {
                store.add(a.id, &[m, ka], |da| {
                    for i in 0..m {
                        for j in 0..n {
                            let gij = g.data()[i * n + j];
                            for k in 0..ka {
                                da[i * ka + k] = da[i * ka + k] + gij * bd[k * n + j];
                            }
                        }
                    }
                });
                store.add(b.id, &[ka, n], |db| {
                    for i in 0..m {
                        for k in 0..ka {
                            let aik = ad[i * ka + k];
                            for j in 0..n {
                                db[k * n + j] = db[k * n + j] + aik * g.data()[i * n + j];
                            }
                        }
                    }
                });
            }))
        } else {
            None
        };
        Ok(self.push(value, "matmul", rg, back))
    }

    /// Add a length-N bias vector to every row of an M×N matrix.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (m, n) = self.value(x).dims2()?;
        if self.value(bias).shape() != [n] {
            return Err(Error::shape(
                "add_bias",
                format!("{:?} + {:?}", self.value(x).shape(), self.value(bias).shape()),
            ));
        }
        let xd = self.value(x).data();
        let bd = self.value(bias).data();
        let data: Vec<T> = (0..m * n).map(|k| xd[k] + bd[k % n]).collect();
        let value = Tensor::new(vec![m, n], data)?;
        let rg = self.requires_grad(x) || self.requires_grad(bias);
        let back: Option<BackFn<T>> = if rg {
            Some(Box::new(move |g, store| {
                store.add(x.id, &[m, n], |dx| {
                    for k in 0..dx.len() {
                        dx[k] = dx[k] + g.data()[k];
                    }
                });
                store.add(bias.id, &[n], |db| {
                    for i in 0..m {
                        for j in 0..n {
                            db[j] = db[j] + g.data()[i * n + j];
                        }
                    }
                });
            }))
        } else {
            None
        };
        Ok(self.push(value, "add_bias", rg, back))
    }

    // ---- reductions ----

    pub fn sum_all(&mut self, x: Var) -> Var {
        let total: T = self.value(x).data().iter().copied().sum();
        let shape = self.value(x).shape().to_vec();
        let rg = self.requires_grad(x);
        let back: Option<BackFn<T>> = if rg {
            Some(Box::new(move |g, store| {
                let gv = g.item();
                store.add(x.id, &shape, |dx| {
                    for d in dx.iter_mut() {
                        *d = *d + gv;
                    }
                });
            }))
        } else {
            None
        };
        self.push(Tensor::scalar(total), "sum_all", rg, back)
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let n = T::from_usize(self.value(x).numel());
        let s = self.sum_all(x);
        self.scale(s, T::one() / n)
    }

    /// Mean over rows of an M×N matrix: output is a length-N vector.
    pub fn mean_axis0(&mut self, x: Var) -> Result<Var> {
        let (m, n) = self.value(x).dims2()?;
        let xd = self.value(x).data();
        let inv = T::one() / T::from_usize(m);
        let mut out = vec![T::zero(); n];
        for i in 0..m {
            for j in 0..n {
                out[j] = out[j] + xd[i * n + j];
            }
        }
        for v in out.iter_mut() {
            *v = *v * inv;
        }
        let rg = self.requires_grad(x);
        let back: Option<BackFn<T>> = if rg {
            Some(Box::new(move |g, store| {
                store.add(x.id, &[m, n], |dx| {
                    for i in 0..m {
                        for j in 0..n {
                            dx[i * n + j] = dx[i * n + j] + g.data()[j] * inv;
                        }
                    }
                });
            }))
        } else {
            None
        };
        Ok(self.push(Tensor::vector(out), "mean_axis0", rg, back))
    }

    /// Row sums of an M×N matrix: output is a length-M vector.
    pub fn sum_axis1(&mut self, x: Var) -> Result<Var> {
        let (m, n) = self.value(x).dims2()?;
        let xd = self.value(x).data();
        let out: Vec<T> = (0..m)
            .map(|i| xd[i * n..(i + 1) * n].iter().copied().sum())
            .collect();
        let rg = self.requires_grad(x);
        let back: Option<BackFn<T>> = if rg {
            Some(Box::new(move |g, store| {
                store.add(x.id, &[m, n], |dx| {
                    for i in 0..m {
                        for j in 0..n {
                            dx[i * n + j] = dx[i * n + j] + g.data()[i];
                        }
                    }
                });
            }))
        } else {
            None
        };
        Ok(self.push(Tensor::vector(out), "sum_axis1", rg, back))
    }

    /// Mean over both spatial dims of a C×H×W feature volume: length-C vector.
    pub fn mean_spatial(&mut self, x: Var) -> Result<Var> {
        let shape = self.value(x).shape().to_vec();
        if shape.len() != 3 {
            return Err(Error::shape(
                "mean_spatial",
                format!("expected rank 3, got {:?}", shape),
            ));
        }
        let (c, h, w) = (shape[0], shape[1], shape[2]);
        let hw = h * w;
        let inv = T::one() / T::from_usize(hw);
        let xd = self.value(x).data();
        let out: Vec<T> = (0..c)
            .map(|ch| xd[ch * hw..(ch + 1) * hw].iter().copied().sum::<T>() * inv)
            .collect();
        let rg = self.requires_grad(x);
        let back: Option<BackFn<T>> = if rg {
            Some(Box::new(move |g, store| {
                store.add(x.id, &[c, h, w], |dx| {
                    for ch in 0..c {
                        let gv = g.data()[ch] * inv;
                        for k in 0..hw {
                            dx[ch * hw + k] = dx[ch * hw + k] + gv;
                        }
                    }
                });
            }))
        } else {
            None
        };
        Ok(self.push(Tensor::vector(out), "mean_spatial", rg, back))
    }

    // ---- normalization / softmax ----

    /// Row-wise softmax of an M×N matrix.
    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let (m, n) = self.value(x).dims2()?;
        if n == 0 {
            return Err(Error::InvalidInput("softmax over empty axis".into()));
        }
        let xd = self.value(x).data();
        let mut out = vec![T::zero(); m * n];
        for i in 0..m {
            let row = &xd[i * n..(i + 1) * n];
            let mx = row.iter().copied().fold(row[0], T::max);
            let mut denom = T::zero();
            for j in 0..n {
                let e = (row[j] - mx).exp();
                out[i * n + j] = e;
                denom = denom + e;
            }
            for j in 0..n {
                out[i * n + j] = out[i * n + j] / denom;
            }
        }
        let value = Tensor::new(vec![m, n], out.clone())?;
        let rg = self.requires_grad(x);
        let back: Option<BackFn<T>> = if rg {
            Some(Box::new(move |g, store| {
                store.add(x.id, &[m, n], |dx| {
                    for i in 0..m {
                        let mut dot = T::zero();
                        for j in 0..n {
                            dot = dot + g.data()[i * n + j] * out[i * n + j];
                        }
                        for j in 0..n {
                            let k = i * n + j;
                            dx[k] = dx[k] + out[k] * (g.data()[k] - dot);
                        }
                    }
                });
            }))
        } else {
            None
        };
        Ok(self.push(value, "softmax_rows", rg, back))
    }

    /// L2-normalize each row of an M×N matrix. Zero rows are rejected.
    pub fn l2_normalize_rows(&mut self, x: Var) -> Result<Var> {
        let (m, n) = self.value(x).dims2()?;
        let xd = self.value(x).data().to_vec();
        let mut out = vec![T::zero(); m * n];
        let mut norms = vec![T::zero(); m];
        let tiny = T::from_f32(1e-20);
        for i in 0..m {
            let row = &xd[i * n..(i + 1) * n];
            let norm = row.iter().map(|&v| v * v).sum::<T>().sqrt();
            if norm <= tiny {
                return Err(Error::InvalidInput("zero-norm embedding".into()));
            }
            norms[i] = norm;
            for j in 0..n {
                out[i * n + j] = row[j] / norm;
            }
        }
        let value = Tensor::new(vec![m, n], out.clone())?;
        let rg = self.requires_grad(x);
        let back: Option<BackFn<T>> = if rg {
            Some(Box::new(move |g, store| {
                store.add(x.id, &[m, n], |dx| {
                    for i in 0..m {
                        let mut dot = T::zero();
                        for j in 0..n {
                            dot = dot + g.data()[i * n + j] * out[i * n + j];
                        }
                        for j in 0..n {
                            let k = i * n + j;
                            dx[k] = dx[k] + (g.data()[k] - out[k] * dot) / norms[i];
                        }
                    }
                });
            }))
        } else {
            None
        };
        Ok(self.push(value, "l2_normalize_rows", rg, back))
    }

    // ---- convolution ----

    /// 2-D convolution, stride 1: input Cin×H×W, weight Cout×Cin×kh×kw,
    /// optional bias of length Cout, symmetric zero padding, dilation ≥ 1.
    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        bias: Option<Var>,
        pad: usize,
        dilation: usize,
    ) -> Result<Var> {
        let xs = self.value(x).shape().to_vec();
        let ws = self.value(w).shape().to_vec();
        if xs.len() != 3 || ws.len() != 4 {
            return Err(Error::shape(
                "conv2d",
                format!("input {:?} weight {:?}", xs, ws),
            ));
        }
        let (cin, h, wd) = (xs[0], xs[1], xs[2]);
        let (cout, wcin, kh, kw) = (ws[0], ws[1], ws[2], ws[3]);
        if wcin != cin {
            return Err(Error::shape(
                "conv2d",
                format!("input channels {} vs weight channels {}", cin, wcin),
            ));
        }
        if dilation == 0 {
            return Err(Error::InvalidInput("conv2d: dilation must be >= 1".into()));
        }
        let eff_kh = dilation * (kh - 1) + 1;
        let eff_kw = dilation * (kw - 1) + 1;
        if h + 2 * pad < eff_kh || wd + 2 * pad < eff_kw {
            return Err(Error::shape(
                "conv2d",
                format!(
                    "effective kernel {}x{} exceeds padded input {}x{}",
                    eff_kh,
                    eff_kw,
                    h + 2 * pad,
                    wd + 2 * pad
                ),
            ));
        }
        let ho = h + 2 * pad - eff_kh + 1;
        let wo = wd + 2 * pad - eff_kw + 1;
        if let Some(b) = bias {
            if self.value(b).shape() != [cout] {
                return Err(Error::shape(
                    "conv2d",
                    format!("bias {:?} vs {} output channels", self.value(b).shape(), cout),
                ));
            }
        }
        let xd = self.value(x).data().to_vec();
        let wv = self.value(w).data().to_vec();
        let bd: Option<Vec<T>> = bias.map(|b| self.value(b).data().to_vec());
        let mut out = vec![T::zero(); cout * ho * wo];
        for oc in 0..cout {
            for oi in 0..ho {
                for oj in 0..wo {
                    let mut acc = bd.as_ref().map_or(T::zero(), |b| b[oc]);
                    for ic in 0..cin {
                        for u in 0..kh {
                            let ii = oi + u * dilation;
                            if ii < pad || ii - pad >= h {
                                continue;
                            }
                            for v in 0..kw {
                                let jj = oj + v * dilation;
                                if jj < pad || jj - pad >= wd {
                                    continue;
                                }
                                acc = acc
                                    + xd[ic * h * wd + (ii - pad) * wd + (jj - pad)]
                                        * wv[((oc * cin + ic) * kh + u) * kw + v];
                            }
                        }
                    }
                    out[(oc * ho + oi) * wo + oj] = acc;
                }
            }
        }
        let value = Tensor::new(vec![cout, ho, wo], out)?;
        let rg = self.requires_grad(x)
            || self.requires_grad(w)
            || bias.is_some_and(|b| self.requires_grad(b));
        let back: Option<BackFn<T>> = if rg {
            Some(Box::new(move |g, store| {
                store.add(x.id, &[cin, h, wd], |dx| {
                    for oc in 0..cout {
                        for oi in 0..ho {
                            for oj in 0..wo {
                                let gv = g.data()[(oc * ho + oi) * wo + oj];
                                for ic in 0..cin {
                                    for u in 0..kh {
                                        let ii = oi + u * dilation;
                                        if ii < pad || ii - pad >= h {
                                            continue;
                                        }
                                        for v in 0..kw {
                                            let jj = oj + v * dilation;
                                            if jj < pad || jj - pad >= wd {
                                                continue;
                                            }
                                            let xi = ic * h * wd + (ii - pad) * wd + (jj - pad);
                                            dx[xi] = dx[xi]
                                                + gv * wv[((oc * cin + ic) * kh + u) * kw + v];
                                        }
                                    }
                                }
                            }
                        }
                    }
                });
                store.add(w.id, &[cout, cin, kh, kw], |dw| {
                    for oc in 0..cout {
                        for oi in 0..ho {
                            for oj in 0..wo {
                                let gv = g.data()[(oc * ho + oi) * wo + oj];
                                for ic in 0..cin {
                                    for u in 0..kh {
                                        let ii = oi + u * dilation;
                                        if ii < pad || ii - pad >= h {
                                            continue;
                                        }
                                        for v in 0..kw {
                                            let jj = oj + v * dilation;
                                            if jj < pad || jj - pad >= wd {
                                                continue;
                                            }
                                            let wi = ((oc * cin + ic) * kh + u) * kw + v;
                                            dw[wi] = dw[wi]
                                                + gv * xd
                                                    [ic * h * wd + (ii - pad) * wd + (jj - pad)];
                                        }
                                    }
                                }
                            }
                        }
                    }
                });
                if let Some(b) = bias {
                    store.add(b.id, &[cout], |db| {
                        for oc in 0..cout {
                            for k in 0..ho * wo {
                                db[oc] = db[oc] + g.data()[oc * ho * wo + k];
                            }
                        }
                    });
                }
            }))
        } else {
            None
        };
        Ok(self.push(value, "conv2d", rg, back))
    }

    // ---- loss primitives ----

    /// Group max over contiguous blocks of `k` columns: N×(C·k) → N×C.
    /// Ties resolve to the lowest column index; the gradient routes to the
    /// selected column only.
    pub fn group_max(&mut self, x: Var, k: usize) -> Result<Var> {
        let (m, n) = self.value(x).dims2()?;
        if k == 0 || n % k != 0 {
            return Err(Error::shape(
                "group_max",
                format!("{} columns not divisible by group size {}", n, k),
            ));
        }
        let c = n / k;
        let xd = self.value(x).data();
        let mut out = vec![T::zero(); m * c];
        let mut arg = vec![0usize; m * c];
        for i in 0..m {
            for j in 0..c {
                let mut best = xd[i * n + j * k];
                let mut bi = 0usize;
                for t in 1..k {
                    let v = xd[i * n + j * k + t];
                    if v > best {
                        best = v;
                        bi = t;
                    }
                }
                out[i * c + j] = best;
                arg[i * c + j] = bi;
            }
        }
        let value = Tensor::new(vec![m, c], out)?;
        let rg = self.requires_grad(x);
        let back: Option<BackFn<T>> = if rg {
            Some(Box::new(move |g, store| {
                store.add(x.id, &[m, n], |dx| {
                    for i in 0..m {
                        for j in 0..c {
                            let t = arg[i * c + j];
                            dx[i * n + j * k + t] = dx[i * n + j * k + t] + g.data()[i * c + j];
                        }
                    }
                });
            }))
        } else {
            None
        };
        Ok(self.push(value, "group_max", rg, back))
    }

    /// Additive angular margin over cosine logits: for the true class,
    /// cos θ becomes cos(θ + m); everything is then scaled by s. When
    /// θ + m would exceed π the monotone fallback cos θ − m·sin m is used.
    pub fn angular_margin(&mut self, cos: Var, labels: &[usize], m: T, s: T) -> Result<Var> {
        let (rows, cls) = self.value(cos).dims2()?;
        if labels.len() != rows {
            return Err(Error::shape(
                "angular_margin",
                format!("{} rows vs {} labels", rows, labels.len()),
            ));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= cls) {
            return Err(Error::InvalidInput(format!(
                "angular_margin: label {} out of range 0..{}",
                bad, cls
            )));
        }
        let eps = T::from_f32(1e-7);
        let (cos_m, sin_m) = (m.cos(), m.sin());
        // boundary where theta + m crosses pi
        let threshold = (T::from_f32(std::f32::consts::PI) - m).cos();
        let xd = self.value(cos).data().to_vec();
        let labels = labels.to_vec();
        let mut out = xd.clone();
        for i in 0..rows {
            let k = i * cls + labels[i];
            let c = xd[k].max(-T::one() + eps).min(T::one() - eps);
            out[k] = if c > threshold {
                c * cos_m - (T::one() - c * c).sqrt() * sin_m
            } else {
                c - m * sin_m
            };
        }
        for v in out.iter_mut() {
            *v = *v * s;
        }
        let value = Tensor::new(vec![rows, cls], out)?;
        let rg = self.requires_grad(cos);
        let back: Option<BackFn<T>> = if rg {
            Some(Box::new(move |g, store| {
                store.add(cos.id, &[rows, cls], |dx| {
                    for i in 0..rows {
                        for j in 0..cls {
                            let k = i * cls + j;
                            let coef = if j == labels[i] {
                                let raw = xd[k];
                                if raw < -T::one() + eps || raw > T::one() - eps {
                                    // clamp region: subgradient zero
                                    T::zero()
                                } else if raw > threshold {
                                    cos_m + sin_m * raw / (T::one() - raw * raw).sqrt()
                                } else {
                                    T::one()
                                }
                            } else {
                                T::one()
                            };
                            dx[k] = dx[k] + g.data()[k] * s * coef;
                        }
                    }
                });
            }))
        } else {
            None
        };
        Ok(self.push(value, "angular_margin", rg, back))
    }

    /// Mean softmax cross-entropy of N×C logits against integer labels.
    pub fn cross_entropy_logits(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (rows, cls) = self.value(logits).dims2()?;
        if labels.len() != rows {
            return Err(Error::shape(
                "cross_entropy_logits",
                format!("{} rows vs {} labels", rows, labels.len()),
            ));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= cls) {
            return Err(Error::InvalidInput(format!(
                "cross_entropy_logits: label {} out of range 0..{}",
                bad, cls
            )));
        }
        let xd = self.value(logits).data().to_vec();
        let labels = labels.to_vec();
        let mut probs = vec![T::zero(); rows * cls];
        let mut total = T::zero();
        for i in 0..rows {
            let row = &xd[i * cls..(i + 1) * cls];
            let mx = row.iter().copied().fold(row[0], T::max);
            let mut denom = T::zero();
            for j in 0..cls {
                let e = (row[j] - mx).exp();
                probs[i * cls + j] = e;
                denom = denom + e;
            }
            for j in 0..cls {
                probs[i * cls + j] = probs[i * cls + j] / denom;
            }
            total = total + denom.ln() + mx - row[labels[i]];
        }
        let inv_n = T::one() / T::from_usize(rows);
        let value = Tensor::scalar(total * inv_n);
        let rg = self.requires_grad(logits);
        let back: Option<BackFn<T>> = if rg {
            Some(Box::new(move |g, store| {
                let gv = g.item() * inv_n;
                store.add(logits.id, &[rows, cls], |dx| {
                    for i in 0..rows {
                        for j in 0..cls {
                            let k = i * cls + j;
                            let onehot = if j == labels[i] { T::one() } else { T::zero() };
                            dx[k] = dx[k] + gv * (probs[k] - onehot);
                        }
                    }
                });
            }))
        } else {
            None
        };
        Ok(self.push(value, "cross_entropy_logits", rg, back))
    }
}
