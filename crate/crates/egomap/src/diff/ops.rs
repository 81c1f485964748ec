//! Operator set: eager forward constructors plus the reverse-sweep rules.
//!
//! Convolution runs as im2col + GEMM with the inner loops shaped so the
//! compiler can vectorize them; patches are rebuilt during the backward
//! pass instead of being cached, trading flops for memory.

use super::{DiffError, Result, Tape, Var};
use crate::real::Real;
use op_enum::Op::*;

pub(crate) use op_enum::Op;

mod op_enum {
    use super::ConvGeom;
    use crate::diff::Var;

    pub(crate) enum Op<T> {
        Leaf,
        MatVec { w: Var, x: Var },
        Add { a: Var, b: Var },
        Sub { a: Var, b: Var },
        Mul { a: Var, b: Var },
        Affine { x: Var, mul: T },
        MulScalar { x: Var, s: Var },
        Relu { x: Var },
        Tanh { x: Var },
        Sigmoid { x: Var },
        Oneplus { x: Var },
        Exp { x: Var },
        Softmax { x: Var },
        LogSoftmax { x: Var },
        Gather { x: Var, index: usize },
        Sum { x: Var },
        Dot { a: Var, b: Var },
        Concat { parts: Vec<Var> },
        Slice { x: Var, offset: usize },
        Conv2d { x: Var, w: Var, b: Var, geom: ConvGeom },
        BilinearSample { map: Var, grid: Vec<[f64; 2]> },
        ScatterMean { x: Var, cells: Vec<Option<usize>>, counts: Vec<u32> },
        BlendLerp { old: Var, new: Var, eta: Vec<T> },
        CosineScan { map: Var, q: Var },
        L1Scan { map: Var, q: Var },
    }
}

#[derive(Debug, Clone, Copy)]
pub struct ConvGeom {
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    pub fn patch_len(&self) -> usize {
        self.cin * self.kh * self.kw
    }

    pub fn out_positions(&self) -> usize {
        self.oh * self.ow
    }
}

fn shape_err(op: &'static str, detail: String) -> DiffError {
    DiffError::Shape { op, detail }
}

impl<T: Real> Tape<T> {
    fn check_same_len(&self, op: &'static str, a: Var, b: Var) -> Result<usize> {
        let (la, lb) = (self.len_of(a), self.len_of(b));
        if la != lb {
            return Err(shape_err(op, format!("{la} vs {lb} elements")));
        }
        Ok(la)
    }

    fn rg2(&self, a: Var, b: Var) -> bool {
        self.requires_grad(a) || self.requires_grad(b)
    }

    /// `w` is `[m, n]` row-major, `x` is `[n]`; yields `[m]`.
    pub fn matvec(&mut self, w: Var, x: Var) -> Result<Var> {
        let ws = self.shape(w);
        if ws.len() != 2 {
            return Err(shape_err("matvec", format!("weight rank {} != 2", ws.len())));
        }
        let (m, n) = (ws[0], ws[1]);
        if self.len_of(x) != n {
            return Err(shape_err(
                "matvec",
                format!("weight [{m}, {n}] vs input [{}]", self.len_of(x)),
            ));
        }
        let wv = &self.nodes[w.0].values;
        let xv = &self.nodes[x.0].values;
        let mut out = vec![T::zero(); m];
        for i in 0..m {
            out[i] = dot_blocked(&wv[i * n..(i + 1) * n], xv);
        }
        let rg = self.rg2(w, x);
        Ok(self.push(out, vec![m], MatVec { w, x }, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let n = self.check_same_len("add", a, b)?;
        let mut out = vec![T::zero(); n];
        for i in 0..n {
            out[i] = self.nodes[a.0].values[i] + self.nodes[b.0].values[i];
        }
        let shape = self.shape(a).to_vec();
        let rg = self.rg2(a, b);
        Ok(self.push(out, shape, Add { a, b }, rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let n = self.check_same_len("sub", a, b)?;
        let mut out = vec![T::zero(); n];
        for i in 0..n {
            out[i] = self.nodes[a.0].values[i] - self.nodes[b.0].values[i];
        }
        let shape = self.shape(a).to_vec();
        let rg = self.rg2(a, b);
        Ok(self.push(out, shape, Sub { a, b }, rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let n = self.check_same_len("mul", a, b)?;
        let mut out = vec![T::zero(); n];
        for i in 0..n {
            out[i] = self.nodes[a.0].values[i] * self.nodes[b.0].values[i];
        }
        let shape = self.shape(a).to_vec();
        let rg = self.rg2(a, b);
        Ok(self.push(out, shape, Mul { a, b }, rg))
    }

    /// Elementwise `mul * x + add` with compile-time constants.
    pub fn affine(&mut self, x: Var, mul: f64, add: f64) -> Result<Var> {
        let (m, a) = (T::from_f64(mul), T::from_f64(add));
        let out: Vec<T> = self.nodes[x.0].values.iter().map(|&v| m * v + a).collect();
        let shape = self.shape(x).to_vec();
        let rg = self.requires_grad(x);
        Ok(self.push(out, shape, Affine { x, mul: m }, rg))
    }

    /// Scale a vector by a single-element variable.
    pub fn mul_scalar(&mut self, x: Var, s: Var) -> Result<Var> {
        if self.len_of(s) != 1 {
            return Err(shape_err(
                "mul_scalar",
                format!("scale has {} elements", self.len_of(s)),
            ));
        }
        let sv = self.nodes[s.0].values[0];
        let out: Vec<T> = self.nodes[x.0].values.iter().map(|&v| sv * v).collect();
        let shape = self.shape(x).to_vec();
        let rg = self.rg2(x, s);
        Ok(self.push(out, shape, MulScalar { x, s }, rg))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let out: Vec<T> = self.nodes[x.0]
            .values
            .iter()
            .map(|&v| if v > T::zero() { v } else { T::zero() })
            .collect();
        let shape = self.shape(x).to_vec();
        let rg = self.requires_grad(x);
        Ok(self.push(out, shape, Relu { x }, rg))
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        let out: Vec<T> = self.nodes[x.0].values.iter().map(|v| v.tanh()).collect();
        let shape = self.shape(x).to_vec();
        let rg = self.requires_grad(x);
        Ok(self.push(out, shape, Tanh { x }, rg))
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let out: Vec<T> = self.nodes[x.0].values.iter().map(|&v| sigmoid(v)).collect();
        let shape = self.shape(x).to_vec();
        let rg = self.requires_grad(x);
        Ok(self.push(out, shape, Sigmoid { x }, rg))
    }

    /// `1 + ln(1 + e^x)`, mapping the reals onto `(1, inf)`.
    pub fn oneplus(&mut self, x: Var) -> Result<Var> {
        let out: Vec<T> = self.nodes[x.0]
            .values
            .iter()
            .map(|&v| T::one() + softplus(v))
            .collect();
        let shape = self.shape(x).to_vec();
        let rg = self.requires_grad(x);
        Ok(self.push(out, shape, Oneplus { x }, rg))
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        let out: Vec<T> = self.nodes[x.0].values.iter().map(|v| v.exp()).collect();
        let shape = self.shape(x).to_vec();
        let rg = self.requires_grad(x);
        Ok(self.push(out, shape, Exp { x }, rg))
    }

    /// Numerically stable softmax over a flat vector.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let xv = &self.nodes[x.0].values;
        if xv.is_empty() {
            return Err(shape_err("softmax", "empty input".into()));
        }
        let max = xv.iter().cloned().fold(xv[0], T::max);
        let mut out: Vec<T> = xv.iter().map(|&v| (v - max).exp()).collect();
        let z: T = out.iter().cloned().sum();
        for o in out.iter_mut() {
            *o = *o / z;
        }
        let shape = self.shape(x).to_vec();
        let rg = self.requires_grad(x);
        Ok(self.push(out, shape, Softmax { x }, rg))
    }

    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        let xv = &self.nodes[x.0].values;
        if xv.is_empty() {
            return Err(shape_err("log_softmax", "empty input".into()));
        }
        let max = xv.iter().cloned().fold(xv[0], T::max);
        let z: T = xv.iter().map(|&v| (v - max).exp()).sum();
        let lz = z.ln() + max;
        let out: Vec<T> = xv.iter().map(|&v| v - lz).collect();
        let shape = self.shape(x).to_vec();
        let rg = self.requires_grad(x);
        Ok(self.push(out, shape, LogSoftmax { x }, rg))
    }

    pub fn gather(&mut self, x: Var, index: usize) -> Result<Var> {
        if index >= self.len_of(x) {
            return Err(shape_err(
                "gather",
                format!("index {index} out of {} elements", self.len_of(x)),
            ));
        }
        let v = self.nodes[x.0].values[index];
        let rg = self.requires_grad(x);
        Ok(self.push(vec![v], vec![1], Gather { x, index }, rg))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s: T = self.nodes[x.0].values.iter().cloned().sum();
        let rg = self.requires_grad(x);
        Ok(self.push(vec![s], vec![1], Sum { x }, rg))
    }

    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same_len("dot", a, b)?;
        let s = dot_blocked(&self.nodes[a.0].values, &self.nodes[b.0].values);
        let rg = self.rg2(a, b);
        Ok(self.push(vec![s], vec![1], Dot { a, b }, rg))
    }

    /// Concatenate flat vectors in order.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(shape_err("concat", "no parts".into()));
        }
        let total: usize = parts.iter().map(|&p| self.len_of(p)).sum();
        let mut out = Vec::with_capacity(total);
        for &p in parts {
            out.extend_from_slice(&self.nodes[p.0].values);
        }
        let rg = parts.iter().any(|&p| self.requires_grad(p));
        Ok(self.push(
            out,
            vec![total],
            Concat {
                parts: parts.to_vec(),
            },
            rg,
        ))
    }

    /// Contiguous sub-vector `[offset, offset + len)` of a flat vector.
    pub fn slice(&mut self, x: Var, offset: usize, len: usize) -> Result<Var> {
        if offset + len > self.len_of(x) {
            return Err(shape_err(
                "slice",
                format!(
                    "range {offset}..{} out of {} elements",
                    offset + len,
                    self.len_of(x)
                ),
            ));
        }
        let out = self.nodes[x.0].values[offset..offset + len].to_vec();
        let rg = self.requires_grad(x);
        Ok(self.push(out, vec![len], Slice { x, offset }, rg))
    }

    /// 2-d convolution: `x` is `[cin, h, w]`, `w` is `[cout, cin, kh, kw]`,
    /// `b` is `[cout]`. Output spatial size floors.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if xs.len() != 3 || ws.len() != 4 {
            return Err(shape_err(
                "conv2d",
                format!("input rank {} (want 3), kernel rank {} (want 4)", xs.len(), ws.len()),
            ));
        }
        if xs[0] != ws[1] {
            return Err(shape_err(
                "conv2d",
                format!("input channels {} vs kernel channels {}", xs[0], ws[1]),
            ));
        }
        if self.len_of(b) != ws[0] {
            return Err(shape_err(
                "conv2d",
                format!("bias [{}] vs {} output channels", self.len_of(b), ws[0]),
            ));
        }
        let (cin, h, wd) = (xs[0], xs[1], xs[2]);
        let (cout, kh, kw) = (ws[0], ws[2], ws[3]);
        if h + 2 * pad < kh || wd + 2 * pad < kw || stride == 0 {
            return Err(shape_err(
                "conv2d",
                format!("kernel {kh}x{kw} stride {stride} too large for {h}x{wd} pad {pad}"),
            ));
        }
        let oh = (h + 2 * pad - kh) / stride + 1;
        let ow = (wd + 2 * pad - kw) / stride + 1;
        let geom = ConvGeom {
            cin,
            h,
            w: wd,
            cout,
            kh,
            kw,
            stride,
            pad,
            oh,
            ow,
        };
        let patches = im2col(&self.nodes[x.0].values, &geom);
        let n = geom.out_positions();
        let k = geom.patch_len();
        let mut out = vec![T::zero(); cout * n];
        gemm_acc(&self.nodes[w.0].values, &patches, &mut out, cout, k, n);
        for (o, row) in out.chunks_mut(n).enumerate() {
            let bias = self.nodes[b.0].values[o];
            for v in row.iter_mut() {
                *v = *v + bias;
            }
        }
        let rg = self.rg2(x, w) || self.requires_grad(b);
        Ok(self.push(out, vec![cout, oh, ow], Conv2d { x, w, b, geom }, rg))
    }

    /// Resample `map` (`[c, h, w]`) at `out_h * out_w` grid points. Each grid
    /// entry is a normalized `[row, col]` source coordinate where -1 and +1
    /// land on the centers of the first and last cells; taps outside the map
    /// read as zero. Source positions within 1e-6 of a cell center snap to
    /// it, so an identity grid reproduces the map exactly.
    pub fn bilinear_sample(
        &mut self,
        map: Var,
        grid: Vec<[f64; 2]>,
        out_h: usize,
        out_w: usize,
    ) -> Result<Var> {
        let ms = self.shape(map).to_vec();
        if ms.len() != 3 {
            return Err(shape_err(
                "bilinear_sample",
                format!("map rank {} != 3", ms.len()),
            ));
        }
        if grid.len() != out_h * out_w {
            return Err(shape_err(
                "bilinear_sample",
                format!("grid has {} entries for {out_h}x{out_w} output", grid.len()),
            ));
        }
        let (c, h, w) = (ms[0], ms[1], ms[2]);
        let mut out = vec![T::zero(); c * grid.len()];
        let mv = &self.nodes[map.0].values;
        for (j, g) in grid.iter().enumerate() {
            for (tr, tc, wt) in taps(*g, h, w) {
                let wt = T::from_f64(wt);
                let src = tr * w + tc;
                for ch in 0..c {
                    out[ch * grid.len() + j] =
                        out[ch * grid.len() + j] + wt * mv[ch * h * w + src];
                }
            }
        }
        let rg = self.requires_grad(map);
        Ok(self.push(out, vec![c, out_h, out_w], BilinearSample { map, grid }, rg))
    }

    /// Average feature columns (`x` is `[c, k]`) that land in the same grid
    /// cell; columns with no cell are dropped. Returns the dense `[c, h, w]`
    /// grid and the per-cell contributor counts.
    pub fn scatter_mean(
        &mut self,
        x: Var,
        cells: Vec<Option<usize>>,
        h: usize,
        w: usize,
    ) -> Result<(Var, Vec<u32>)> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 2 {
            return Err(shape_err("scatter_mean", format!("rank {} != 2", xs.len())));
        }
        let (c, k) = (xs[0], xs[1]);
        if cells.len() != k {
            return Err(shape_err(
                "scatter_mean",
                format!("{} cell assignments for {k} columns", cells.len()),
            ));
        }
        let mut counts = vec![0u32; h * w];
        for cell in cells.iter().flatten() {
            if *cell >= h * w {
                return Err(shape_err(
                    "scatter_mean",
                    format!("cell {cell} out of {}x{} grid", h, w),
                ));
            }
            counts[*cell] += 1;
        }
        let mut out = vec![T::zero(); c * h * w];
        let xv = &self.nodes[x.0].values;
        for (col, cell) in cells.iter().enumerate() {
            if let Some(j) = cell {
                for ch in 0..c {
                    out[ch * h * w + j] = out[ch * h * w + j] + xv[ch * k + col];
                }
            }
        }
        for (j, &n) in counts.iter().enumerate() {
            if n > 1 {
                let inv = T::one() / T::from_usize(n as usize);
                for ch in 0..c {
                    out[ch * h * w + j] = out[ch * h * w + j] * inv;
                }
            }
        }
        let rg = self.requires_grad(x);
        let var = self.push(
            out,
            vec![c, h, w],
            ScatterMean {
                x,
                cells,
                counts: counts.clone(),
            },
            rg,
        );
        Ok((var, counts))
    }

    /// Per-cell convex mix `eta * old + (1 - eta) * new`, with one mixing
    /// weight per spatial cell broadcast over channels. Gradient flows to
    /// both maps; the weights are data.
    pub fn blend_lerp(&mut self, old: Var, new: Var, eta: Vec<T>) -> Result<Var> {
        let os = self.shape(old).to_vec();
        self.check_same_len("blend_lerp", old, new)?;
        if os.len() != 3 || eta.len() != os[1] * os[2] {
            return Err(shape_err(
                "blend_lerp",
                format!("{} weights for shape {os:?}", eta.len()),
            ));
        }
        let (c, hw) = (os[0], os[1] * os[2]);
        let mut out = vec![T::zero(); c * hw];
        let ov = &self.nodes[old.0].values;
        let nv = &self.nodes[new.0].values;
        for ch in 0..c {
            for j in 0..hw {
                let e = eta[j];
                out[ch * hw + j] =
                    e * ov[ch * hw + j] + (T::one() - e) * nv[ch * hw + j];
            }
        }
        let rg = self.rg2(old, new);
        Ok(self.push(out, os, BlendLerp { old, new, eta }, rg))
    }

    /// Cosine similarity between a query `[c]` and every spatial column of
    /// `map` (`[c, h, w]`), flattened to `[h * w]`. The denominator is
    /// clamped to 1e-8 so all-zero columns score zero.
    pub fn cosine_scan(&mut self, map: Var, q: Var) -> Result<Var> {
        let ms = self.shape(map).to_vec();
        if ms.len() != 3 || ms[0] != self.len_of(q) {
            return Err(shape_err(
                "cosine_scan",
                format!("map {ms:?} vs query [{}]", self.len_of(q)),
            ));
        }
        let (c, hw) = (ms[0], ms[1] * ms[2]);
        let mv = &self.nodes[map.0].values;
        let qv = &self.nodes[q.0].values;
        let nq = l2(qv);
        let eps = T::from_f64(1e-8);
        let mut out = vec![T::zero(); hw];
        for j in 0..hw {
            let mut d = T::zero();
            let mut nm = T::zero();
            for ch in 0..c {
                let m = mv[ch * hw + j];
                d = d + m * qv[ch];
                nm = nm + m * m;
            }
            out[j] = d / (nm.sqrt() * nq).max(eps);
        }
        let rg = self.rg2(map, q);
        Ok(self.push(out, vec![hw], CosineScan { map, q }, rg))
    }

    /// Negative L1 distance between a query `[c]` and every spatial column
    /// of `map` (`[c, h, w]`), flattened to `[h * w]`.
    pub fn l1_scan(&mut self, map: Var, q: Var) -> Result<Var> {
        let ms = self.shape(map).to_vec();
        if ms.len() != 3 || ms[0] != self.len_of(q) {
            return Err(shape_err(
                "l1_scan",
                format!("map {ms:?} vs query [{}]", self.len_of(q)),
            ));
        }
        let (c, hw) = (ms[0], ms[1] * ms[2]);
        let mv = &self.nodes[map.0].values;
        let qv = &self.nodes[q.0].values;
        let mut out = vec![T::zero(); hw];
        for j in 0..hw {
            let mut s = T::zero();
            for ch in 0..c {
                s = s + (mv[ch * hw + j] - qv[ch]).abs();
            }
            out[j] = -s;
        }
        let rg = self.rg2(map, q);
        Ok(self.push(out, vec![hw], L1Scan { map, q }, rg))
    }

    pub(crate) fn backward_node(&mut self, id: usize) {
        let g = match self.nodes[id].grad.take() {
            Some(g) => g,
            None => return,
        };
        let mut pending: Vec<(Var, Vec<T>)> = Vec::new();
        {
            let out_vals = &self.nodes[id].values;
            match &self.nodes[id].op {
                Leaf => {}
                MatVec { w, x } => {
                    let n = self.nodes[x.0].values.len();
                    let m = g.len();
                    if self.nodes[w.0].requires_grad {
                        let xv = &self.nodes[x.0].values;
                        let mut dw = vec![T::zero(); m * n];
                        for i in 0..m {
                            axpy(&mut dw[i * n..(i + 1) * n], g[i], xv);
                        }
                        pending.push((*w, dw));
                    }
                    if self.nodes[x.0].requires_grad {
                        let wv = &self.nodes[w.0].values;
                        let mut dx = vec![T::zero(); n];
                        for i in 0..m {
                            axpy(&mut dx, g[i], &wv[i * n..(i + 1) * n]);
                        }
                        pending.push((*x, dx));
                    }
                }
                Add { a, b } => {
                    pending.push((*a, g.clone()));
                    pending.push((*b, g.clone()));
                }
                Sub { a, b } => {
                    pending.push((*a, g.clone()));
                    pending.push((*b, g.iter().map(|&v| -v).collect()));
                }
                Mul { a, b } => {
                    let av = &self.nodes[a.0].values;
                    let bv = &self.nodes[b.0].values;
                    pending.push((*a, g.iter().zip(bv).map(|(&gi, &bi)| gi * bi).collect()));
                    pending.push((*b, g.iter().zip(av).map(|(&gi, &ai)| gi * ai).collect()));
                }
                Affine { x, mul } => {
                    let m = *mul;
                    pending.push((*x, g.iter().map(|&gi| m * gi).collect()));
                }
                MulScalar { x, s } => {
                    let sv = self.nodes[s.0].values[0];
                    let xv = &self.nodes[x.0].values;
                    pending.push((*x, g.iter().map(|&gi| sv * gi).collect()));
                    let ds: T = g.iter().zip(xv).map(|(&gi, &xi)| gi * xi).sum();
                    pending.push((*s, vec![ds]));
                }
                Relu { x } => {
                    pending.push((
                        *x,
                        g.iter()
                            .zip(out_vals)
                            .map(|(&gi, &o)| if o > T::zero() { gi } else { T::zero() })
                            .collect(),
                    ));
                }
                Tanh { x } => {
                    pending.push((
                        *x,
                        g.iter()
                            .zip(out_vals)
                            .map(|(&gi, &o)| gi * (T::one() - o * o))
                            .collect(),
                    ));
                }
                Sigmoid { x } => {
                    pending.push((
                        *x,
                        g.iter()
                            .zip(out_vals)
                            .map(|(&gi, &o)| gi * o * (T::one() - o))
                            .collect(),
                    ));
                }
                Oneplus { x } => {
                    let xv = &self.nodes[x.0].values;
                    pending.push((
                        *x,
                        g.iter()
                            .zip(xv)
                            .map(|(&gi, &xi)| gi * sigmoid(xi))
                            .collect(),
                    ));
                }
                Exp { x } => {
                    pending.push((
                        *x,
                        g.iter().zip(out_vals).map(|(&gi, &o)| gi * o).collect(),
                    ));
                }
                Softmax { x } => {
                    let gs: T = g.iter().zip(out_vals).map(|(&gi, &o)| gi * o).sum();
                    pending.push((
                        *x,
                        g.iter()
                            .zip(out_vals)
                            .map(|(&gi, &o)| o * (gi - gs))
                            .collect(),
                    ));
                }
                LogSoftmax { x } => {
                    let gsum: T = g.iter().cloned().sum();
                    pending.push((
                        *x,
                        g.iter()
                            .zip(out_vals)
                            .map(|(&gi, &o)| gi - o.exp() * gsum)
                            .collect(),
                    ));
                }
                Gather { x, index } => {
                    let mut dx = vec![T::zero(); self.nodes[x.0].values.len()];
                    dx[*index] = g[0];
                    pending.push((*x, dx));
                }
                Sum { x } => {
                    pending.push((*x, vec![g[0]; self.nodes[x.0].values.len()]));
                }
                Dot { a, b } => {
                    let av = &self.nodes[a.0].values;
                    let bv = &self.nodes[b.0].values;
                    pending.push((*a, bv.iter().map(|&bi| g[0] * bi).collect()));
                    pending.push((*b, av.iter().map(|&ai| g[0] * ai).collect()));
                }
                Concat { parts } => {
                    let mut offset = 0;
                    for &p in parts {
                        let len = self.nodes[p.0].values.len();
                        pending.push((p, g[offset..offset + len].to_vec()));
                        offset += len;
                    }
                }
                Slice { x, offset } => {
                    let mut dx = vec![T::zero(); self.nodes[x.0].values.len()];
                    dx[*offset..*offset + g.len()].copy_from_slice(&g);
                    pending.push((*x, dx));
                }
                Conv2d { x, w, b, geom } => {
                    let geom = *geom;
                    let n = geom.out_positions();
                    let k = geom.patch_len();
                    if self.nodes[b.0].requires_grad {
                        let db: Vec<T> =
                            g.chunks(n).map(|row| row.iter().cloned().sum()).collect();
                        pending.push((*b, db));
                    }
                    let need_w = self.nodes[w.0].requires_grad;
                    let need_x = self.nodes[x.0].requires_grad;
                    if need_w {
                        let patches = im2col(&self.nodes[x.0].values, &geom);
                        let mut dw = vec![T::zero(); geom.cout * k];
                        for o in 0..geom.cout {
                            let grow = &g[o * n..(o + 1) * n];
                            for p in 0..k {
                                dw[o * k + p] =
                                    dw[o * k + p] + dot_blocked(grow, &patches[p * n..(p + 1) * n]);
                            }
                        }
                        pending.push((*w, dw));
                    }
                    if need_x {
                        let wv = &self.nodes[w.0].values;
                        let mut wt = vec![T::zero(); k * geom.cout];
                        for o in 0..geom.cout {
                            for p in 0..k {
                                wt[p * geom.cout + o] = wv[o * k + p];
                            }
                        }
                        let mut dpatches = vec![T::zero(); k * n];
                        gemm_acc(&wt, &g, &mut dpatches, k, geom.cout, n);
                        pending.push((*x, col2im(&dpatches, &geom)));
                    }
                }
                BilinearSample { map, grid } => {
                    let ms = &self.nodes[map.0].shape;
                    let (c, h, w) = (ms[0], ms[1], ms[2]);
                    let mut dm = vec![T::zero(); c * h * w];
                    for (j, ge) in grid.iter().enumerate() {
                        for (tr, tc, wt) in taps(*ge, h, w) {
                            let wt = T::from_f64(wt);
                            let src = tr * w + tc;
                            for ch in 0..c {
                                dm[ch * h * w + src] =
                                    dm[ch * h * w + src] + wt * g[ch * grid.len() + j];
                            }
                        }
                    }
                    pending.push((*map, dm));
                }
                ScatterMean { x, cells, counts } => {
                    let k = cells.len();
                    let c = self.nodes[x.0].shape[0];
                    let hw = counts.len();
                    let mut dx = vec![T::zero(); c * k];
                    for (col, cell) in cells.iter().enumerate() {
                        if let Some(j) = cell {
                            let inv = T::one() / T::from_usize(counts[*j] as usize);
                            for ch in 0..c {
                                dx[ch * k + col] = inv * g[ch * hw + j];
                            }
                        }
                    }
                    pending.push((*x, dx));
                }
                BlendLerp { old, new, eta } => {
                    let c = self.nodes[old.0].shape[0];
                    let hw = eta.len();
                    let mut dold = vec![T::zero(); c * hw];
                    let mut dnew = vec![T::zero(); c * hw];
                    for ch in 0..c {
                        for j in 0..hw {
                            let gi = g[ch * hw + j];
                            dold[ch * hw + j] = eta[j] * gi;
                            dnew[ch * hw + j] = (T::one() - eta[j]) * gi;
                        }
                    }
                    pending.push((*old, dold));
                    pending.push((*new, dnew));
                }
                CosineScan { map, q } => {
                    let ms = &self.nodes[map.0].shape;
                    let (c, hw) = (ms[0], ms[1] * ms[2]);
                    let mv = &self.nodes[map.0].values;
                    let qv = &self.nodes[q.0].values;
                    let nq = l2(qv);
                    let eps = T::from_f64(1e-8);
                    let mut dm = vec![T::zero(); c * hw];
                    let mut dq = vec![T::zero(); c];
                    for j in 0..hw {
                        let gi = g[j];
                        if gi == T::zero() {
                            continue;
                        }
                        let mut d = T::zero();
                        let mut nm2 = T::zero();
                        for ch in 0..c {
                            let m = mv[ch * hw + j];
                            d = d + m * qv[ch];
                            nm2 = nm2 + m * m;
                        }
                        let nm = nm2.sqrt();
                        let den = (nm * nq).max(eps);
                        if nm * nq > eps {
                            let s = d / den;
                            for ch in 0..c {
                                let m = mv[ch * hw + j];
                                dm[ch * hw + j] =
                                    dm[ch * hw + j] + gi * (qv[ch] / den - s * m / nm2);
                                dq[ch] = dq[ch] + gi * (m / den - s * qv[ch] / (nq * nq));
                            }
                        } else {
                            for ch in 0..c {
                                dm[ch * hw + j] = dm[ch * hw + j] + gi * qv[ch] / eps;
                                dq[ch] = dq[ch] + gi * mv[ch * hw + j] / eps;
                            }
                        }
                    }
                    pending.push((*map, dm));
                    pending.push((*q, dq));
                }
                L1Scan { map, q } => {
                    let ms = &self.nodes[map.0].shape;
                    let (c, hw) = (ms[0], ms[1] * ms[2]);
                    let mv = &self.nodes[map.0].values;
                    let qv = &self.nodes[q.0].values;
                    let mut dm = vec![T::zero(); c * hw];
                    let mut dq = vec![T::zero(); c];
                    for j in 0..hw {
                        let gi = g[j];
                        if gi == T::zero() {
                            continue;
                        }
                        for ch in 0..c {
                            let diff = mv[ch * hw + j] - qv[ch];
                            let sgn = if diff > T::zero() {
                                T::one()
                            } else if diff < T::zero() {
                                -T::one()
                            } else {
                                T::zero()
                            };
                            dm[ch * hw + j] = dm[ch * hw + j] - gi * sgn;
                            dq[ch] = dq[ch] + gi * sgn;
                        }
                    }
                    pending.push((*map, dm));
                    pending.push((*q, dq));
                }
            }
        }
        for (v, delta) in pending {
            self.accumulate(v, &delta);
        }
        self.nodes[id].grad = Some(g);
    }
}

fn sigmoid<T: Real>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

fn softplus<T: Real>(v: T) -> T {
    if v > T::zero() {
        v + (-v).exp().ln_1p()
    } else {
        v.exp().ln_1p()
    }
}

fn l2<T: Real>(v: &[T]) -> T {
    v.iter().map(|&x| x * x).sum::<T>().sqrt()
}

/// `c[m, n] += a[m, k] * b[k, n]`, all row-major. The innermost loop walks
/// contiguous rows of `b` and `c` so it vectorizes.
pub(crate) fn gemm_acc<T: Real>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let crow = &mut c[i * n..(i + 1) * n];
        for (p, &ap) in arow.iter().enumerate() {
            let brow = &b[p * n..(p + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv = *cv + ap * bv;
            }
        }
    }
}

/// Dot product with eight independent accumulators so the reduction
/// vectorizes without reassociating a single serial chain.
pub(crate) fn dot_blocked<T: Real>(a: &[T], b: &[T]) -> T {
    const LANES: usize = 8;
    let n = a.len();
    debug_assert_eq!(n, b.len());
    let mut acc = [T::zero(); LANES];
    let chunks = n / LANES;
    for ci in 0..chunks {
        let base = ci * LANES;
        for l in 0..LANES {
            acc[l] = acc[l] + a[base + l] * b[base + l];
        }
    }
    let mut s = T::zero();
    for l in 0..LANES {
        s = s + acc[l];
    }
    for i in chunks * LANES..n {
        s = s + a[i] * b[i];
    }
    s
}

fn axpy<T: Real>(y: &mut [T], a: T, x: &[T]) {
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi = *yi + a * xi;
    }
}

/// Unroll conv patches into a `[cin * kh * kw, oh * ow]` matrix; padded
/// positions read as zero.
fn im2col<T: Real>(x: &[T], geom: &ConvGeom) -> Vec<T> {
    let n = geom.out_positions();
    let mut patches = vec![T::zero(); geom.patch_len() * n];
    for ci in 0..geom.cin {
        for ky in 0..geom.kh {
            for kx in 0..geom.kw {
                let prow = ((ci * geom.kh + ky) * geom.kw + kx) * n;
                for oy in 0..geom.oh {
                    let iy = (oy * geom.stride + ky) as isize - geom.pad as isize;
                    if iy < 0 || iy >= geom.h as isize {
                        continue;
                    }
                    let irow = (ci * geom.h + iy as usize) * geom.w;
                    for ox in 0..geom.ow {
                        let ix = (ox * geom.stride + kx) as isize - geom.pad as isize;
                        if ix < 0 || ix >= geom.w as isize {
                            continue;
                        }
                        patches[prow + oy * geom.ow + ox] = x[irow + ix as usize];
                    }
                }
            }
        }
    }
    patches
}

/// Adjoint of `im2col`: fold patch gradients back onto the input layout.
fn col2im<T: Real>(dpatches: &[T], geom: &ConvGeom) -> Vec<T> {
    let n = geom.out_positions();
    let mut dx = vec![T::zero(); geom.cin * geom.h * geom.w];
    for ci in 0..geom.cin {
        for ky in 0..geom.kh {
            for kx in 0..geom.kw {
                let prow = ((ci * geom.kh + ky) * geom.kw + kx) * n;
                for oy in 0..geom.oh {
                    let iy = (oy * geom.stride + ky) as isize - geom.pad as isize;
                    if iy < 0 || iy >= geom.h as isize {
                        continue;
                    }
                    let irow = (ci * geom.h + iy as usize) * geom.w;
                    for ox in 0..geom.ow {
                        let ix = (ox * geom.stride + kx) as isize - geom.pad as isize;
                        if ix < 0 || ix >= geom.w as isize {
                            continue;
                        }
                        dx[irow + ix as usize] =
                            dx[irow + ix as usize] + dpatches[prow + oy * geom.ow + ox];
                    }
                }
            }
        }
    }
    dx
}

/// Bilinear taps for one normalized `[row, col]` grid entry: up to four
/// `(row, col, weight)` triples, skipping out-of-bounds and zero-weight taps.
fn taps(g: [f64; 2], h: usize, w: usize) -> impl Iterator<Item = (usize, usize, f64)> {
    let sr = snap((g[0] + 1.0) * (h as f64 - 1.0) / 2.0);
    let sc = snap((g[1] + 1.0) * (w as f64 - 1.0) / 2.0);
    let r0 = sr.floor();
    let c0 = sc.floor();
    let fr = sr - r0;
    let fc = sc - c0;
    let cands = [
        (r0, c0, (1.0 - fr) * (1.0 - fc)),
        (r0, c0 + 1.0, (1.0 - fr) * fc),
        (r0 + 1.0, c0, fr * (1.0 - fc)),
        (r0 + 1.0, c0 + 1.0, fr * fc),
    ];
    cands.into_iter().filter_map(move |(r, c, wt)| {
        if wt == 0.0 || r < 0.0 || c < 0.0 || r >= h as f64 || c >= w as f64 {
            None
        } else {
            Some((r as usize, c as usize, wt))
        }
    })
}

fn snap(v: f64) -> f64 {
    let r = v.round();
    if (v - r).abs() < 1e-6 {
        r
    } else {
        v
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Direct nested-loop convolution, kept independent of the im2col path.
    fn conv2d_direct(
        x: &[f64],
        w: &[f64],
        b: &[f64],
        g: &ConvGeom,
    ) -> Vec<f64> {
        let mut out = vec![0.0; g.cout * g.oh * g.ow];
        for o in 0..g.cout {
            for oy in 0..g.oh {
                for ox in 0..g.ow {
                    let mut acc = b[o];
                    for ci in 0..g.cin {
                        for ky in 0..g.kh {
                            for kx in 0..g.kw {
                                let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                                let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                                if iy < 0 || ix < 0 || iy >= g.h as isize || ix >= g.w as isize {
                                    continue;
                                }
                                acc += x[(ci * g.h + iy as usize) * g.w + ix as usize]
                                    * w[((o * g.cin + ci) * g.kh + ky) * g.kw + kx];
                            }
                        }
                    }
                    out[(o * g.oh + oy) * g.ow + ox] = acc;
                }
            }
        }
        out
    }

    #[test]
    fn conv2d_matches_direct_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for &(cin, h, w, cout, kh, kw, stride, pad) in &[
            (2usize, 6usize, 7usize, 3usize, 3usize, 3usize, 2usize, 1usize),
            (1, 8, 8, 2, 4, 4, 4, 0),
            (3, 5, 9, 4, 3, 2, 1, 0),
        ] {
            let oh = (h + 2 * pad - kh) / stride + 1;
            let ow = (w + 2 * pad - kw) / stride + 1;
            let geom = ConvGeom { cin, h, w, cout, kh, kw, stride, pad, oh, ow };
            let xv: Vec<f64> = (0..cin * h * w).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let wv: Vec<f64> = (0..cout * cin * kh * kw).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let bv: Vec<f64> = (0..cout).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let expect = conv2d_direct(&xv, &wv, &bv, &geom);

            let mut tape: Tape<f64> = Tape::new();
            let x = tape.input(&Tensor::new(vec![cin, h, w], xv));
            let wk = tape.input(&Tensor::new(vec![cout, cin, kh, kw], wv));
            let b = tape.input(&Tensor::new(vec![cout], bv));
            let y = tape.conv2d(x, wk, b, stride, pad).unwrap();
            assert_eq!(tape.shape(y), &[cout, oh, ow]);
            for (got, want) in tape.values(y).iter().zip(&expect) {
                assert!((got - want).abs() < 1e-10, "{got} vs {want}");
            }
        }
    }

    #[test]
    fn perception_conv_stack_shapes() {
        // The frame encoder: 4x64x112 through three valid convolutions.
        let mut tape: Tape<f32> = Tape::new();
        let x = tape.input(&Tensor::zeros(vec![4, 64, 112]));
        let w1 = tape.input(&Tensor::zeros(vec![16, 4, 8, 8]));
        let b1 = tape.input(&Tensor::zeros(vec![16]));
        let c1 = tape.conv2d(x, w1, b1, 4, 0).unwrap();
        assert_eq!(tape.shape(c1), &[16, 15, 27]);
        let w2 = tape.input(&Tensor::zeros(vec![32, 16, 4, 4]));
        let b2 = tape.input(&Tensor::zeros(vec![32]));
        let c2 = tape.conv2d(c1, w2, b2, 2, 0).unwrap();
        assert_eq!(tape.shape(c2), &[32, 6, 12]);
        let w3 = tape.input(&Tensor::zeros(vec![16, 32, 3, 3]));
        let b3 = tape.input(&Tensor::zeros(vec![16]));
        let c3 = tape.conv2d(c2, w3, b3, 1, 0).unwrap();
        assert_eq!(tape.shape(c3), &[16, 4, 10]);
        assert_eq!(tape.len_of(c3), 640);
    }

    #[test]
    fn map_read_conv_stack_shapes() {
        // The map reader: 18x24x24 through k3s1, k4s2, k4s2.
        let mut tape: Tape<f32> = Tape::new();
        let x = tape.input(&Tensor::zeros(vec![18, 24, 24]));
        let w1 = tape.input(&Tensor::zeros(vec![16, 18, 3, 3]));
        let b1 = tape.input(&Tensor::zeros(vec![16]));
        let c1 = tape.conv2d(x, w1, b1, 1, 0).unwrap();
        assert_eq!(tape.shape(c1), &[16, 22, 22]);
        let w2 = tape.input(&Tensor::zeros(vec![16, 16, 4, 4]));
        let b2 = tape.input(&Tensor::zeros(vec![16]));
        let c2 = tape.conv2d(c1, w2, b2, 2, 0).unwrap();
        assert_eq!(tape.shape(c2), &[16, 10, 10]);
        let w3 = tape.input(&Tensor::zeros(vec![16, 16, 4, 4]));
        let b3 = tape.input(&Tensor::zeros(vec![16]));
        let c3 = tape.conv2d(c2, w3, b3, 2, 0).unwrap();
        assert_eq!(tape.shape(c3), &[16, 4, 4]);
        assert_eq!(tape.len_of(c3), 256);
    }

    #[test]
    fn bilinear_identity_grid_is_bit_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (c, h, w) = (3, 24, 24);
        let data: Vec<f64> = (0..c * h * w).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let mut tape: Tape<f64> = Tape::new();
        let map = tape.input(&Tensor::new(vec![c, h, w], data.clone()));
        let grid: Vec<[f64; 2]> = (0..h)
            .flat_map(|r| {
                (0..w).map(move |cc| {
                    [
                        2.0 * r as f64 / (h as f64 - 1.0) - 1.0,
                        2.0 * cc as f64 / (w as f64 - 1.0) - 1.0,
                    ]
                })
            })
            .collect();
        let out = tape.bilinear_sample(map, grid, h, w).unwrap();
        assert_eq!(tape.values(out), data.as_slice());
    }

    #[test]
    fn bilinear_center_sample_averages_four_cells() {
        let mut tape: Tape<f64> = Tape::new();
        let map = tape.input(&Tensor::new(vec![1, 2, 2], vec![0.0, 1.0, 2.0, 3.0]));
        let out = tape.bilinear_sample(map, vec![[0.0, 0.0]], 1, 1).unwrap();
        assert!((tape.scalar_value(out) - 1.5).abs() < 1e-12);
    }

    #[test]
    fn bilinear_out_of_bounds_reads_zero() {
        let mut tape: Tape<f64> = Tape::new();
        let map = tape.input(&Tensor::new(vec![1, 2, 2], vec![5.0; 4]));
        let out = tape
            .bilinear_sample(map, vec![[-3.0, 0.0], [0.0, 9.0]], 1, 2)
            .unwrap();
        assert_eq!(tape.values(out), &[0.0, 0.0]);
    }

    #[test]
    fn bilinear_halfway_out_tap_scales_contribution() {
        // Sampling half a cell above the top row keeps only the lower tap.
        let mut tape: Tape<f64> = Tape::new();
        let map = tape.input(&Tensor::new(vec![1, 2, 1], vec![4.0, 8.0]));
        // Normalized row -2 maps to source row -0.5.
        let out = tape.bilinear_sample(map, vec![[-2.0, 0.0]], 1, 1).unwrap();
        assert!((tape.scalar_value(out) - 2.0).abs() < 1e-12);
    }

    #[test]
    fn scatter_mean_averages_colliding_columns() {
        let mut tape: Tape<f64> = Tape::new();
        // Two feature columns land in cell 0: means are 2 and 3 per channel.
        let x = tape.input(&Tensor::new(vec![2, 2], vec![1.0, 3.0, 2.0, 4.0]));
        let (out, counts) = tape
            .scatter_mean(x, vec![Some(0), Some(0)], 2, 2)
            .unwrap();
        assert_eq!(counts, vec![2, 0, 0, 0]);
        let v = tape.values(out);
        assert_eq!(v[0], 2.0);
        assert_eq!(v[4], 3.0);
    }

    #[test]
    fn scatter_mean_drops_unassigned_columns() {
        let mut tape: Tape<f64> = Tape::new();
        let x = tape.input(&Tensor::new(vec![1, 3], vec![10.0, 20.0, 30.0]));
        let (out, counts) = tape
            .scatter_mean(x, vec![None, Some(1), None], 1, 2)
            .unwrap();
        assert_eq!(counts, vec![0, 1]);
        assert_eq!(tape.values(out), &[0.0, 20.0]);
    }

    #[test]
    fn blend_mixes_with_per_cell_weight()  {
        let mut tape: Tape<f64> = Tape::new();
        let old = tape.input(&Tensor::new(vec![1, 1, 2], vec![1.0, 1.0]));
        let new = tape.input(&Tensor::new(vec![1, 1, 2], vec![0.5, 0.5]));
        let out = tape.blend_lerp(old, new, vec![0.9, 0.0]).unwrap();
        let v = tape.values(out);
        assert!((v[0] - 0.95).abs() < 1e-12);
        assert!((v[1] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn cosine_scan_known_values() {
        let mut tape: Tape<f64> = Tape::new();
        // Columns: parallel to q, orthogonal, anti-parallel, zero.
        let map = tape.input(&Tensor::new(
            vec![2, 1, 4],
            vec![2.0, 0.0, -1.0, 0.0, 0.0, 3.0, 0.0, 0.0],
        ));
        let q = tape.input(&Tensor::from_vec(vec![1.0, 0.0]));
        let s = tape.cosine_scan(map, q).unwrap();
        let v = tape.values(s);
        assert!((v[0] - 1.0).abs() < 1e-12);
        assert!(v[1].abs() < 1e-12);
        assert!((v[2] + 1.0).abs() < 1e-12);
        assert_eq!(v[3], 0.0);
    }

    #[test]
    fn l1_scan_known_values() {
        let mut tape: Tape<f64> = Tape::new();
        let map = tape.input(&Tensor::new(vec![2, 1, 2], vec![1.0, 0.0, 2.0, 0.0]));
        let q = tape.input(&Tensor::from_vec(vec![1.0, 2.0]));
        let s = tape.l1_scan(map, q).unwrap();
        assert_eq!(tape.values(s), &[0.0, -3.0]);
    }

    #[test]
    fn softmax_values_sum_to_one() {
        let mut tape: Tape<f64> = Tape::new();
        let x = tape.input(&Tensor::from_vec(vec![1e3, 1e3 + 1.0, -1e3]));
        let s = tape.softmax(x).unwrap();
        let total: f64 = tape.values(s).iter().sum();
        assert!((total - 1.0).abs() < 1e-12);
        assert!(tape.values(s).iter().all(|v| v.is_finite()));
    }

    #[test]
    fn shape_errors_are_reported() {
        let mut tape: Tape<f64> = Tape::new();
        let a = tape.input(&Tensor::from_vec(vec![1.0, 2.0]));
        let b = tape.input(&Tensor::from_vec(vec![1.0, 2.0, 3.0]));
        let err = tape.add(a, b).unwrap_err();
        assert!(err.to_string().contains("add"));
        let w = tape.input(&Tensor::new(vec![2, 2], vec![0.0; 4]));
        assert!(tape.matvec(w, b).is_err());
    }
}
