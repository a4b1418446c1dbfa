//! Differentiable ops recorded on a [`Tape`].

use super::kernels::{self, gemm_nn, gemm_nt, gemm_tn, split_at_axis};
use super::tape::{BackwardArgs, Tape, Var};
use super::tensor::Tensor;
use crate::error::{config_err, shape_err, Error, Result};
use crate::rng::Rng;

fn same_shape(a: &Tensor, b: &Tensor, op: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(shape_err!("{op}: {:?} vs {:?}", a.shape(), b.shape()));
    }
    Ok(())
}

fn suffix_check(x: &[usize], y: &[usize], op: &str) -> Result<()> {
    if y.len() > x.len() || x[x.len() - y.len()..] != *y {
        return Err(shape_err!("{op}: {:?} does not broadcast onto {:?}", y, x));
    }
    Ok(())
}

/// One cross-entropy term: logits row, target row, weight.
#[derive(Clone, Copy, Debug)]
pub struct CrossEntropyTerm {
    pub logit_row: usize,
    pub target_row: usize,
    pub weight: f64,
}

impl Tape {
    // ---- linear algebra ----

    /// `a[m,k] · b[k,n]`
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(shape_err!("matmul: {:?} · {:?}", sa, sb));
        }
        let a3 = self.reshape(a, &[1, sa[0], sa[1]])?;
        let b3 = self.reshape(b, &[1, sb[0], sb[1]])?;
        let c = self.bmm(a3, b3, false)?;
        self.reshape(c, &[sa[0], sb[1]])
    }

    /// Batched product `a[t,m,k] · b[t,k,n]`, or `a · bᵀ` with `b[t,n,k]` when `transpose_b`.
    pub fn bmm(&mut self, a: Var, b: Var, transpose_b: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] {
            return Err(shape_err!("bmm: {:?} · {:?}", sa, sb));
        }
        let (t, m, k) = (sa[0], sa[1], sa[2]);
        let (kb, n) = if transpose_b {
            (sb[2], sb[1])
        } else {
            (sb[1], sb[2])
        };
        if kb != k {
            return Err(shape_err!(
                "bmm inner dims: {:?} · {:?} (transpose_b={transpose_b})",
                sa,
                sb
            ));
        }
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        let mut out = vec![0.0f32; t * m * n];
        for i in 0..t {
            let ai = &av[i * m * k..(i + 1) * m * k];
            let bi = &bv[i * k * n..(i + 1) * k * n];
            let oi = &mut out[i * m * n..(i + 1) * m * n];
            if transpose_b {
                gemm_nt(ai, bi, oi, m, k, n);
            } else {
                gemm_nn(ai, bi, oi, m, k, n);
            }
        }
        let value = Tensor::new(vec![t, m, n], out)?;
        Ok(self.push_op(
            value,
            &[a, b],
            Box::new(move |args: &BackwardArgs| {
                let g = args.grad_out;
                let (av, bv) = (args.inputs[0].data(), args.inputs[1].data());
                let mut ga = args.needs[0].then(|| vec![0.0f32; t * m * k]);
                let mut gb = args.needs[1].then(|| vec![0.0f32; t * k * n]);
                for i in 0..t {
                    let gi = &g[i * m * n..(i + 1) * m * n];
                    let ai = &av[i * m * k..(i + 1) * m * k];
                    let bi = &bv[i * k * n..(i + 1) * k * n];
                    if let Some(ga) = ga.as_mut() {
                        let o = &mut ga[i * m * k..(i + 1) * m * k];
                        if transpose_b {
                            gemm_nn(gi, bi, o, m, n, k);
                        } else {
                            gemm_nt(gi, bi, o, m, n, k);
                        }
                    }
                    if let Some(gb) = gb.as_mut() {
                        let o = &mut gb[i * k * n..(i + 1) * k * n];
                        if transpose_b {
                            gemm_tn(gi, ai, o, m, n, k);
                        } else {
                            gemm_tn(ai, gi, o, m, k, n);
                        }
                    }
                }
                vec![ga, gb]
            }),
        ))
    }

    /// `x[..., in] · w[in, out] + b[out]`
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let sw = self.shape(w).to_vec();
        if sw.len() != 2 || sx.last() != Some(&sw[0]) {
            return Err(shape_err!("linear: input {:?}, weight {:?}", sx, sw));
        }
        let rows: usize = sx[..sx.len() - 1].iter().product();
        let x2 = self.reshape(x, &[rows, sw[0]])?;
        let mut y = self.matmul(x2, w)?;
        if let Some(b) = b {
            y = self.add_bcast(y, b)?;
        }
        let mut out_shape = sx;
        *out_shape.last_mut().unwrap() = sw[1];
        self.reshape(y, &out_shape)
    }

    // ---- elementwise ----

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape(self.value(a), self.value(b), "add")?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x + y)
            .collect();
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        Ok(self.push_op(
            value,
            &[a, b],
            Box::new(|args| {
                let g = args.grad_out.to_vec();
                vec![args.needs[0].then(|| g.clone()), args.needs[1].then_some(g)]
            }),
        ))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let nb = self.scale(b, -1.0);
        self.add(a, nb)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape(self.value(a), self.value(b), "mul")?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .collect();
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        Ok(self.push_op(
            value,
            &[a, b],
            Box::new(|args| {
                let g = args.grad_out;
                let (a, b) = (args.inputs[0].data(), args.inputs[1].data());
                vec![
                    args.needs[0].then(|| g.iter().zip(b).map(|(g, b)| g * b).collect()),
                    args.needs[1].then(|| g.iter().zip(a).map(|(g, a)| g * a).collect()),
                ]
            }),
        ))
    }

    /// `x + y` with `y` broadcast over the leading axes of `x`.
    pub fn add_bcast(&mut self, x: Var, y: Var) -> Result<Var> {
        suffix_check(self.shape(x), self.shape(y), "add_bcast")?;
        let inner = self.value(y).numel();
        let yv = self.value(y).data();
        let data = self
            .value(x)
            .data()
            .chunks(inner)
            .flat_map(|c| c.iter().zip(yv).map(|(a, b)| a + b))
            .collect();
        let value = Tensor::new(self.shape(x).to_vec(), data)?;
        Ok(self.push_op(
            value,
            &[x, y],
            Box::new(move |args| {
                let g = args.grad_out;
                let gy = args.needs[1].then(|| {
                    let mut acc = vec![0.0f32; inner];
                    for c in g.chunks(inner) {
                        acc.iter_mut().zip(c).for_each(|(a, b)| *a += b);
                    }
                    acc
                });
                vec![args.needs[0].then(|| g.to_vec()), gy]
            }),
        ))
    }

    /// `x * y` with `y` broadcast over the leading axes of `x`.
    pub fn mul_bcast(&mut self, x: Var, y: Var) -> Result<Var> {
        suffix_check(self.shape(x), self.shape(y), "mul_bcast")?;
        let inner = self.value(y).numel();
        let yv = self.value(y).data();
        let data = self
            .value(x)
            .data()
            .chunks(inner)
            .flat_map(|c| c.iter().zip(yv).map(|(a, b)| a * b))
            .collect();
        let value = Tensor::new(self.shape(x).to_vec(), data)?;
        Ok(self.push_op(
            value,
            &[x, y],
            Box::new(move |args| {
                let g = args.grad_out;
                let (xv, yv) = (args.inputs[0].data(), args.inputs[1].data());
                let gx = args.needs[0].then(|| {
                    g.chunks(inner)
                        .flat_map(|c| c.iter().zip(yv).map(|(a, b)| a * b))
                        .collect()
                });
                let gy = args.needs[1].then(|| {
                    let mut acc = vec![0.0f32; inner];
                    for (gc, xc) in g.chunks(inner).zip(xv.chunks(inner)) {
                        for ((a, gv), xv) in acc.iter_mut().zip(gc).zip(xc) {
                            *a += gv * xv;
                        }
                    }
                    acc
                });
                vec![gx, gy]
            }),
        ))
    }

    pub fn scale(&mut self, x: Var, c: f32) -> Var {
        let v = self.value(x);
        let value =
            Tensor::new(v.shape().to_vec(), v.data().iter().map(|a| a * c).collect()).unwrap();
        self.push_op(
            value,
            &[x],
            Box::new(move |args| vec![Some(args.grad_out.iter().map(|g| g * c).collect())]),
        )
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let value = Tensor::new(
            v.shape().to_vec(),
            v.data().iter().map(|&a| kernels::gelu(a)).collect(),
        )
        .unwrap();
        self.push_op(
            value,
            &[x],
            Box::new(|args| {
                let xv = args.inputs[0].data();
                vec![Some(
                    args.grad_out
                        .iter()
                        .zip(xv)
                        .map(|(g, &x)| g * kernels::gelu_grad(x))
                        .collect(),
                )]
            }),
        )
    }

    /// Inverted dropout. Identity (same node) when not training or `p == 0`.
    pub fn dropout(&mut self, x: Var, p: f32, training: bool, rng: &mut Rng) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(config_err!("dropout probability {p} outside [0, 1)"));
        }
        if !training || p == 0.0 {
            return Ok(x);
        }
        let keep_scale = 1.0 / (1.0 - p);
        let mask: Vec<f32> = (0..self.value(x).numel())
            .map(|_| {
                if rand::Rng::random::<f32>(rng) < p {
                    0.0
                } else {
                    keep_scale
                }
            })
            .collect();
        let v = self.value(x);
        let value = Tensor::new(
            v.shape().to_vec(),
            v.data().iter().zip(&mask).map(|(a, m)| a * m).collect(),
        )?;
        Ok(self.push_op(
            value,
            &[x],
            Box::new(move |args| {
                vec![Some(
                    args.grad_out
                        .iter()
                        .zip(&mask)
                        .map(|(g, m)| g * m)
                        .collect(),
                )]
            }),
        ))
    }

    // ---- shape ----

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshaped(shape.to_vec())?;
        Ok(self.push_op(
            value,
            &[x],
            Box::new(|args| vec![Some(args.grad_out.to_vec())]),
        ))
    }

    pub fn permute(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let mut seen = vec![false; shape.len()];
        if axes.len() != shape.len()
            || axes
                .iter()
                .any(|&a| a >= shape.len() || std::mem::replace(&mut seen[a], true))
        {
            return Err(shape_err!(
                "permute: axes {:?} invalid for {:?}",
                axes,
                shape
            ));
        }
        let map = kernels::permute_index_map(&shape, axes);
        let xv = self.value(x).data();
        let data = map.iter().map(|&i| xv[i]).collect();
        let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
        let value = Tensor::new(out_shape, data)?;
        Ok(self.push_op(
            value,
            &[x],
            Box::new(move |args| {
                let mut gx = vec![0.0f32; map.len()];
                for (o, &i) in map.iter().enumerate() {
                    gx[i] = args.grad_out[o];
                }
                vec![Some(gx)]
            }),
        ))
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = self
            .shape(*xs.first().ok_or_else(|| shape_err!("concat of nothing"))?)
            .to_vec();
        if axis >= first.len() {
            return Err(shape_err!("concat axis {axis} for rank {}", first.len()));
        }
        let mut widths = Vec::with_capacity(xs.len());
        for &x in xs {
            let s = self.shape(x);
            if s.len() != first.len()
                || s.iter()
                    .enumerate()
                    .any(|(d, &n)| d != axis && n != first[d])
            {
                return Err(shape_err!("concat: {:?} vs {:?} on axis {axis}", s, first));
            }
            widths.push(s[axis]);
        }
        let (outer, _, inner) = split_at_axis(&first, axis);
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (&x, &w) in xs.iter().zip(&widths) {
                let xv = self.value(x).data();
                data.extend_from_slice(&xv[o * w * inner..(o + 1) * w * inner]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        let value = Tensor::new(shape, data)?;
        Ok(self.push_op(
            value,
            xs,
            Box::new(move |args| {
                let mut grads: Vec<Vec<f32>> = widths
                    .iter()
                    .map(|&w| Vec::with_capacity(outer * w * inner))
                    .collect();
                let mut pos = 0;
                for _ in 0..outer {
                    for (g, &w) in grads.iter_mut().zip(&widths) {
                        g.extend_from_slice(&args.grad_out[pos..pos + w * inner]);
                        pos += w * inner;
                    }
                }
                grads
                    .into_iter()
                    .zip(&args.needs)
                    .map(|(g, &n)| n.then_some(g))
                    .collect()
            }),
        ))
    }

    /// Slice `[start, start+len)` along `axis`.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || start + len > shape[axis] {
            return Err(shape_err!(
                "narrow {start}+{len} on axis {axis} of {:?}",
                shape
            ));
        }
        let (outer, width, inner) = split_at_axis(&shape, axis);
        let xv = self.value(x).data();
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * width + start) * inner;
            data.extend_from_slice(&xv[base..base + len * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        let value = Tensor::new(out_shape, data)?;
        Ok(self.push_op(
            value,
            &[x],
            Box::new(move |args| {
                let mut gx = vec![0.0f32; outer * width * inner];
                for o in 0..outer {
                    let base = (o * width + start) * inner;
                    gx[base..base + len * inner]
                        .copy_from_slice(&args.grad_out[o * len * inner..(o + 1) * len * inner]);
                }
                vec![Some(gx)]
            }),
        ))
    }

    /// Gathers rows of `x` viewed as `[rows, last_dim]`.
    pub fn index_select(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let v = self.value(x);
        let d = v.last_dim();
        let n = v.numel() / d.max(1);
        if let Some(&bad) = rows.iter().find(|&&r| r >= n) {
            return Err(shape_err!("index_select row {bad} out of {n}"));
        }
        let mut data = Vec::with_capacity(rows.len() * d);
        for &r in rows {
            data.extend_from_slice(v.row(r));
        }
        let value = Tensor::new(vec![rows.len(), d], data)?;
        let rows = rows.to_vec();
        Ok(self.push_op(
            value,
            &[x],
            Box::new(move |args| {
                let mut gx = vec![0.0f32; n * d];
                for (i, &r) in rows.iter().enumerate() {
                    for (a, b) in gx[r * d..(r + 1) * d]
                        .iter_mut()
                        .zip(&args.grad_out[i * d..(i + 1) * d])
                    {
                        *a += b;
                    }
                }
                vec![Some(gx)]
            }),
        ))
    }

    /// Replaces the rows of `x[..., d]` flagged in `mask` with `token[d]`.
    pub fn mask_replace(&mut self, x: Var, mask: &[bool], token: Var) -> Result<Var> {
        let v = self.value(x);
        let d = v.last_dim();
        let rows = v.numel() / d.max(1);
        if mask.len() != rows || self.shape(token) != [d] {
            return Err(shape_err!(
                "mask_replace: {} mask entries for {} rows, token {:?} for width {d}",
                mask.len(),
                rows,
                self.shape(token)
            ));
        }
        let tv = self.value(token).data();
        let mut data = v.data().to_vec();
        for (r, &m) in mask.iter().enumerate() {
            if m {
                data[r * d..(r + 1) * d].copy_from_slice(tv);
            }
        }
        let value = Tensor::new(v.shape().to_vec(), data)?;
        let mask = mask.to_vec();
        Ok(self.push_op(
            value,
            &[x, token],
            Box::new(move |args| {
                let g = args.grad_out;
                let mut gx = g.to_vec();
                let mut gt = vec![0.0f32; d];
                for (r, &m) in mask.iter().enumerate() {
                    if m {
                        for (a, b) in gt.iter_mut().zip(&g[r * d..(r + 1) * d]) {
                            *a += b;
                        }
                        gx[r * d..(r + 1) * d].fill(0.0);
                    }
                }
                vec![args.needs[0].then_some(gx), args.needs[1].then_some(gt)]
            }),
        ))
    }

    // ---- reductions ----

    pub fn sum(&mut self, x: Var) -> Var {
        let n = self.value(x).numel();
        let s: f64 = self.value(x).data().iter().map(|&v| f64::from(v)).sum();
        self.push_op(
            Tensor::scalar(s as f32),
            &[x],
            Box::new(move |args| vec![Some(vec![args.grad_out[0]; n])]),
        )
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).numel().max(1);
        let s = self.sum(x);
        self.scale(s, 1.0 / n as f32)
    }

    /// Mean over `axis`, which is removed from the shape.
    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(shape_err!("mean_axis {axis} for {:?}", shape));
        }
        let (outer, width, inner) = split_at_axis(&shape, axis);
        let xv = self.value(x).data();
        let mut data = vec![0.0f32; outer * inner];
        for o in 0..outer {
            for i in 0..inner {
                let mut s = 0.0f64;
                for w in 0..width {
                    s += f64::from(xv[(o * width + w) * inner + i]);
                }
                data[o * inner + i] = (s / width as f64) as f32;
            }
        }
        let mut out_shape = shape;
        out_shape.remove(axis);
        let value = Tensor::new(out_shape, data)?;
        Ok(self.push_op(
            value,
            &[x],
            Box::new(move |args| {
                let inv = 1.0 / width as f32;
                let mut gx = vec![0.0f32; outer * width * inner];
                for o in 0..outer {
                    for w in 0..width {
                        for i in 0..inner {
                            gx[(o * width + w) * inner + i] = args.grad_out[o * inner + i] * inv;
                        }
                    }
                }
                vec![Some(gx)]
            }),
        ))
    }

    /// Population standard deviation over the last axis, `sqrt(var + eps)`.
    pub fn std_last(&mut self, x: Var, eps: f32) -> Result<Var> {
        let v = self.value(x);
        let n = v.last_dim();
        if n == 0 {
            return Err(shape_err!("std over empty axis"));
        }
        let mut means = Vec::new();
        let mut stds = Vec::new();
        for row in v.data().chunks(n) {
            let (m, var) = mean_var(row);
            means.push(m as f32);
            stds.push((var + f64::from(eps)).sqrt() as f32);
        }
        let mut shape = v.shape().to_vec();
        shape.pop();
        let value = Tensor::new(shape, stds.clone())?;
        Ok(self.push_op(
            value,
            &[x],
            Box::new(move |args| {
                let xv = args.inputs[0].data();
                let mut gx = vec![0.0f32; xv.len()];
                for (r, (row, g)) in xv.chunks(n).zip(gx.chunks_mut(n)).enumerate() {
                    let c = args.grad_out[r] / (n as f32 * stds[r]);
                    for (gi, &xi) in g.iter_mut().zip(row) {
                        *gi = c * (xi - means[r]);
                    }
                }
                vec![Some(gx)]
            }),
        ))
    }

    // ---- normalization ----

    /// `(x - mean) / sqrt(var + eps)` over the last axis.
    pub fn normalize_last(&mut self, x: Var, eps: f32) -> Result<Var> {
        if eps <= 0.0 {
            return Err(config_err!("normalization eps must be positive, got {eps}"));
        }
        let v = self.value(x);
        let n = v.last_dim();
        let mut inv_std = Vec::with_capacity(v.numel() / n.max(1));
        let mut data = Vec::with_capacity(v.numel());
        for row in v.data().chunks(n) {
            let (m, var) = mean_var(row);
            let is = 1.0 / (var + f64::from(eps)).sqrt();
            inv_std.push(is as f32);
            data.extend(row.iter().map(|&a| ((f64::from(a) - m) * is) as f32));
        }
        let value = Tensor::new(v.shape().to_vec(), data)?;
        Ok(self.push_op(
            value,
            &[x],
            Box::new(move |args| {
                let y = args.output.data();
                let g = args.grad_out;
                let mut gx = vec![0.0f32; y.len()];
                for (r, ((yr, gr), out)) in y
                    .chunks(n)
                    .zip(g.chunks(n))
                    .zip(gx.chunks_mut(n))
                    .enumerate()
                {
                    let mg: f64 = gr.iter().map(|&a| f64::from(a)).sum::<f64>() / n as f64;
                    let mgy: f64 = gr
                        .iter()
                        .zip(yr)
                        .map(|(&a, &b)| f64::from(a) * f64::from(b))
                        .sum::<f64>()
                        / n as f64;
                    for ((o, &gi), &yi) in out.iter_mut().zip(gr).zip(yr) {
                        *o = (f64::from(inv_std[r]) * (f64::from(gi) - mg - f64::from(yi) * mgy))
                            as f32;
                    }
                }
                vec![Some(gx)]
            }),
        ))
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f32) -> Result<Var> {
        let d = self.value(x).last_dim();
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(shape_err!("layer_norm affine params must be [{d}]"));
        }
        let n = self.normalize_last(x, eps)?;
        let s = self.mul_bcast(n, gamma)?;
        self.add_bcast(s, beta)
    }

    /// `x / max(||x||, eps)` over the last axis.
    pub fn l2_normalize(&mut self, x: Var, eps: f32) -> Result<Var> {
        let v = self.value(x);
        let d = v.last_dim();
        let mut norms = Vec::new();
        let mut data = Vec::with_capacity(v.numel());
        for row in v.data().chunks(d) {
            let nrm = row
                .iter()
                .map(|&a| f64::from(a) * f64::from(a))
                .sum::<f64>()
                .sqrt();
            let denom = nrm.max(f64::from(eps));
            norms.push(nrm as f32);
            data.extend(row.iter().map(|&a| (f64::from(a) / denom) as f32));
        }
        let value = Tensor::new(v.shape().to_vec(), data)?;
        Ok(self.push_op(
            value,
            &[x],
            Box::new(move |args| {
                let y = args.output.data();
                let mut gx = vec![0.0f32; y.len()];
                for (r, ((yr, gr), out)) in y
                    .chunks(d)
                    .zip(args.grad_out.chunks(d))
                    .zip(gx.chunks_mut(d))
                    .enumerate()
                {
                    if norms[r] > eps {
                        let gy: f32 = kernels::dot(gr, yr);
                        for ((o, &gi), &yi) in out.iter_mut().zip(gr).zip(yr) {
                            *o = (gi - yi * gy) / norms[r];
                        }
                    } else {
                        for (o, &gi) in out.iter_mut().zip(gr) {
                            *o = gi / eps;
                        }
                    }
                }
                vec![Some(gx)]
            }),
        ))
    }

    /// Weight-normalized matrix: column `j` of `v[in, out]` rescaled to length `g[j]`.
    pub fn weight_norm(&mut self, v: Var, g: Var) -> Result<Var> {
        let sv = self.shape(v).to_vec();
        if sv.len() != 2 || self.shape(g) != [sv[1]] {
            return Err(shape_err!("weight_norm: v {:?}, g {:?}", sv, self.shape(g)));
        }
        let (rows, cols) = (sv[0], sv[1]);
        let vv = self.value(v).data();
        let mut norms = vec![0.0f64; cols];
        for r in 0..rows {
            for (c, n) in norms.iter_mut().enumerate() {
                let a = f64::from(vv[r * cols + c]);
                *n += a * a;
            }
        }
        let norms: Vec<f32> = norms
            .into_iter()
            .map(|n| (n.sqrt() as f32).max(1e-12))
            .collect();
        let gv = self.value(g).data();
        let data = (0..rows * cols)
            .map(|i| gv[i % cols] * vv[i] / norms[i % cols])
            .collect();
        let value = Tensor::new(sv, data)?;
        Ok(self.push_op(
            value,
            &[v, g],
            Box::new(move |args| {
                let (vv, gv) = (args.inputs[0].data(), args.inputs[1].data());
                let gw = args.grad_out;
                // projections u_j · G_j
                let mut proj = vec![0.0f64; cols];
                for i in 0..rows * cols {
                    let c = i % cols;
                    proj[c] += f64::from(vv[i] / norms[c]) * f64::from(gw[i]);
                }
                let dv = args.needs[0].then(|| {
                    (0..rows * cols)
                        .map(|i| {
                            let c = i % cols;
                            let u = vv[i] / norms[c];
                            gv[c] / norms[c] * (gw[i] - u * proj[c] as f32)
                        })
                        .collect()
                });
                let dg = args.needs[1].then(|| proj.iter().map(|&p| p as f32).collect());
                vec![dv, dg]
            }),
        ))
    }

    // ---- softmax family ----

    /// `softmax(x / temperature)` over the last axis.
    pub fn softmax(&mut self, x: Var, temperature: f32) -> Result<Var> {
        check_temperature(temperature)?;
        let v = self.value(x);
        let n = v.last_dim();
        let mut data = Vec::with_capacity(v.numel());
        for row in v.data().chunks(n) {
            data.extend(softmax_row(row, temperature).into_iter().map(|p| p as f32));
        }
        let value = Tensor::new(v.shape().to_vec(), data)?;
        Ok(self.push_op(
            value,
            &[x],
            Box::new(move |args| {
                let y = args.output.data();
                let mut gx = vec![0.0f32; y.len()];
                for ((yr, gr), out) in y
                    .chunks(n)
                    .zip(args.grad_out.chunks(n))
                    .zip(gx.chunks_mut(n))
                {
                    let s: f64 = gr
                        .iter()
                        .zip(yr)
                        .map(|(&a, &b)| f64::from(a) * f64::from(b))
                        .sum();
                    for ((o, &gi), &yi) in out.iter_mut().zip(gr).zip(yr) {
                        *o = ((f64::from(gi) - s) * f64::from(yi)) as f32 / temperature;
                    }
                }
                vec![Some(gx)]
            }),
        ))
    }

    /// `log_softmax(x / temperature)` over the last axis.
    pub fn log_softmax(&mut self, x: Var, temperature: f32) -> Result<Var> {
        check_temperature(temperature)?;
        let v = self.value(x);
        let n = v.last_dim();
        let mut data = Vec::with_capacity(v.numel());
        for row in v.data().chunks(n) {
            data.extend(
                log_softmax_row(row, temperature)
                    .into_iter()
                    .map(|p| p as f32),
            );
        }
        let value = Tensor::new(v.shape().to_vec(), data)?;
        Ok(self.push_op(
            value,
            &[x],
            Box::new(move |args| {
                let y = args.output.data();
                let mut gx = vec![0.0f32; y.len()];
                for ((yr, gr), out) in y
                    .chunks(n)
                    .zip(args.grad_out.chunks(n))
                    .zip(gx.chunks_mut(n))
                {
                    let s: f64 = gr.iter().map(|&a| f64::from(a)).sum();
                    for ((o, &gi), &yi) in out.iter_mut().zip(gr).zip(yr) {
                        *o = ((f64::from(gi) - s * f64::from(yi).exp()) / f64::from(temperature))
                            as f32;
                    }
                }
                vec![Some(gx)]
            }),
        ))
    }

    /// `Σ_terms weight · (-Σ_k target_k · log_softmax(logits / temperature)_k)`.
    ///
    /// `targets` is a constant; no gradient flows into it.
    pub fn soft_cross_entropy(
        &mut self,
        logits: Var,
        targets: &Tensor,
        terms: &[CrossEntropyTerm],
        temperature: f32,
    ) -> Result<Var> {
        check_temperature(temperature)?;
        let lv = self.value(logits);
        let k = lv.last_dim();
        let n_rows = lv.numel() / k.max(1);
        if targets.last_dim() != k {
            return Err(shape_err!(
                "cross-entropy: logits width {k}, targets width {}",
                targets.last_dim()
            ));
        }
        let n_targets = targets.numel() / k.max(1);
        for t in terms {
            if t.logit_row >= n_rows || t.target_row >= n_targets {
                return Err(shape_err!(
                    "cross-entropy term ({}, {}) outside {n_rows} logits / {n_targets} targets",
                    t.logit_row,
                    t.target_row
                ));
            }
        }
        let mut used = vec![false; n_rows];
        terms.iter().for_each(|t| used[t.logit_row] = true);
        let log_probs: Vec<Option<Vec<f64>>> = (0..n_rows)
            .map(|r| used[r].then(|| log_softmax_row(lv.row(r), temperature)))
            .collect();
        let mut loss = 0.0f64;
        for t in terms {
            let lp = log_probs[t.logit_row].as_ref().unwrap();
            let ce: f64 = -targets
                .row(t.target_row)
                .iter()
                .zip(lp)
                .map(|(&p, &l)| f64::from(p) * l)
                .sum::<f64>();
            loss += t.weight * ce;
        }
        let targets = targets.clone();
        let terms = terms.to_vec();
        Ok(self.push_op(
            Tensor::scalar(loss as f32),
            &[logits],
            Box::new(move |args| {
                let g0 = f64::from(args.grad_out[0]);
                let mut gx = vec![0.0f64; n_rows * k];
                for t in &terms {
                    let lp = log_probs[t.logit_row].as_ref().unwrap();
                    let p = targets.row(t.target_row);
                    let mass: f64 = p.iter().map(|&a| f64::from(a)).sum();
                    let c = g0 * t.weight / f64::from(temperature);
                    let row = &mut gx[t.logit_row * k..(t.logit_row + 1) * k];
                    for ((o, &l), &pk) in row.iter_mut().zip(lp).zip(p) {
                        *o += c * (mass * l.exp() - f64::from(pk));
                    }
                }
                vec![Some(gx.into_iter().map(|v| v as f32).collect())]
            }),
        ))
    }

    /// `-(1/N) Σ_i log(min_{j≠i} ||x_i - x_j|| + eps)` over rows of `x[N, d]`.
    pub fn nearest_neighbor_log_distance(&mut self, x: Var, eps: f32) -> Result<Var> {
        let v = self.value(x);
        let d = v.last_dim();
        let n = v.numel() / d.max(1);
        if n < 2 || v.rank() != 2 {
            return Err(config_err!(
                "nearest-neighbour loss needs a [N>=2, d] input, got {:?}",
                v.shape()
            ));
        }
        let mut nn = vec![(0usize, f64::INFINITY); n];
        for i in 0..n {
            for j in 0..n {
                if i == j {
                    continue;
                }
                let dist = v
                    .row(i)
                    .iter()
                    .zip(v.row(j))
                    .map(|(&a, &b)| (f64::from(a) - f64::from(b)).powi(2))
                    .sum::<f64>()
                    .sqrt();
                if dist < nn[i].1 {
                    nn[i] = (j, dist);
                }
            }
        }
        let loss = -nn
            .iter()
            .map(|&(_, dist)| (dist + f64::from(eps)).ln())
            .sum::<f64>()
            / n as f64;
        Ok(self.push_op(
            Tensor::scalar(loss as f32),
            &[x],
            Box::new(move |args| {
                let xv = args.inputs[0].data();
                let g0 = f64::from(args.grad_out[0]);
                let mut gx = vec![0.0f64; n * d];
                for (i, &(j, dist)) in nn.iter().enumerate() {
                    if dist <= 0.0 {
                        continue;
                    }
                    let c = -g0 / (n as f64 * (dist + f64::from(eps)) * dist);
                    for q in 0..d {
                        let diff = f64::from(xv[i * d + q]) - f64::from(xv[j * d + q]);
                        gx[i * d + q] += c * diff;
                        gx[j * d + q] -= c * diff;
                    }
                }
                vec![Some(gx.into_iter().map(|v| v as f32).collect())]
            }),
        ))
    }

    // ---- signal ops ----

    /// Same-length 1-D cross-correlation, `x[B, C_in, T]`, `w[C_out, C_in, k]`, `b[C_out]`, k odd.
    pub fn conv1d_same(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if sx.len() != 3 || sw.len() != 3 || sw[1] != sx[1] || self.shape(b) != [sw[0]] {
            return Err(shape_err!(
                "conv1d: x {:?}, w {:?}, b {:?}",
                sx,
                sw,
                self.shape(b)
            ));
        }
        let (batch, cin, t) = (sx[0], sx[1], sx[2]);
        let (cout, k) = (sw[0], sw[2]);
        if k % 2 == 0 {
            return Err(config_err!("conv1d_same needs an odd kernel, got {k}"));
        }
        let pad = k / 2;
        let (xv, wv, bv) = (
            self.value(x).data(),
            self.value(w).data(),
            self.value(b).data(),
        );
        let mut out = vec![0.0f32; batch * cout * t];
        for bi in 0..batch {
            for o in 0..cout {
                let orow = &mut out[(bi * cout + o) * t..(bi * cout + o + 1) * t];
                orow.fill(bv[o]);
                for c in 0..cin {
                    let xrow = &xv[(bi * cin + c) * t..(bi * cin + c + 1) * t];
                    for q in 0..k {
                        let wq = wv[(o * cin + c) * k + q];
                        // output index s reads input s + q - pad
                        let lo = pad.saturating_sub(q);
                        let hi = (t + pad).saturating_sub(q).min(t);
                        for s in lo..hi {
                            orow[s] += wq * xrow[s + q - pad];
                        }
                    }
                }
            }
        }
        let value = Tensor::new(vec![batch, cout, t], out)?;
        Ok(self.push_op(
            value,
            &[x, w, b],
            Box::new(move |args| {
                let (xv, wv) = (args.inputs[0].data(), args.inputs[1].data());
                let g = args.grad_out;
                let mut gx = args.needs[0].then(|| vec![0.0f32; batch * cin * t]);
                let mut gw = args.needs[1].then(|| vec![0.0f32; cout * cin * k]);
                let gb = args.needs[2].then(|| {
                    let mut gb = vec![0.0f32; cout];
                    for bi in 0..batch {
                        for (o, acc) in gb.iter_mut().enumerate() {
                            *acc += g[(bi * cout + o) * t..(bi * cout + o + 1) * t]
                                .iter()
                                .sum::<f32>();
                        }
                    }
                    gb
                });
                for bi in 0..batch {
                    for o in 0..cout {
                        let grow = &g[(bi * cout + o) * t..(bi * cout + o + 1) * t];
                        for c in 0..cin {
                            let xoff = (bi * cin + c) * t;
                            for q in 0..k {
                                let lo = pad.saturating_sub(q);
                                let hi = (t + pad).saturating_sub(q).min(t);
                                let widx = (o * cin + c) * k + q;
                                if let Some(gw) = gw.as_mut() {
                                    let xrow = &xv[xoff..xoff + t];
                                    let mut acc = 0.0f32;
                                    for s in lo..hi {
                                        acc += grow[s] * xrow[s + q - pad];
                                    }
                                    gw[widx] += acc;
                                }
                                if let Some(gx) = gx.as_mut() {
                                    let wq = wv[widx];
                                    let gxrow = &mut gx[xoff..xoff + t];
                                    for s in lo..hi {
                                        gxrow[s + q - pad] += wq * grow[s];
                                    }
                                }
                            }
                        }
                    }
                }
                vec![gx, gw, gb]
            }),
        ))
    }

    /// Linear interpolation of each row of `x[..., T]` onto `new_len` points,
    /// first and last samples aligned.
    pub fn linear_resize(&mut self, x: Var, new_len: usize) -> Result<Var> {
        if new_len < 2 {
            return Err(config_err!(
                "resize target length must be >= 2, got {new_len}"
            ));
        }
        let v = self.value(x);
        let t = v.last_dim();
        if t == 0 {
            return Err(shape_err!("cannot resize an empty series"));
        }
        let plan = resize_plan(t, new_len);
        let mut data = Vec::with_capacity(v.numel() / t * new_len);
        for row in v.data().chunks(t) {
            data.extend(plan.iter().map(|&(i, f)| interp(row, i, f)));
        }
        let mut shape = v.shape().to_vec();
        *shape.last_mut().unwrap() = new_len;
        let value = Tensor::new(shape, data)?;
        Ok(self.push_op(
            value,
            &[x],
            Box::new(move |args| {
                let rows = args.grad_out.len() / new_len;
                let mut gx = vec![0.0f32; rows * t];
                for (gr, out) in args.grad_out.chunks(new_len).zip(gx.chunks_mut(t)) {
                    for (&g, &(i, f)) in gr.iter().zip(&plan) {
                        out[i] += g * (1.0 - f);
                        if f != 0.0 {
                            out[i + 1] += g * f;
                        }
                    }
                }
                vec![Some(gx)]
            }),
        ))
    }

    /// First difference along the last axis, front-padded with a zero.
    pub fn diff_front_pad(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let t = v.last_dim();
        let mut data = Vec::with_capacity(v.numel());
        for row in v.data().chunks(t) {
            data.push(0.0);
            data.extend(row.windows(2).map(|w| w[1] - w[0]));
        }
        let value = Tensor::new(v.shape().to_vec(), data).unwrap();
        self.push_op(
            value,
            &[x],
            Box::new(move |args| {
                let mut gx = vec![0.0f32; args.grad_out.len()];
                for (gr, out) in args.grad_out.chunks(t).zip(gx.chunks_mut(t)) {
                    for s in 1..t {
                        out[s] += gr[s];
                        out[s - 1] -= gr[s];
                    }
                }
                vec![Some(gx)]
            }),
        )
    }

    /// Multi-scale scalar embedding of every element of `values`.
    ///
    /// For each value `v` the smallest scale `s_i` with `|v| <= tolerance * s_i`
    /// is selected (largest scale when none qualifies) and the output row is
    /// `embed[i] * (v / s_i) + bias[i]`. Output shape is `values.shape + [dim]`.
    pub fn scalar_encode(
        &mut self,
        values: Var,
        embed: Var,
        bias: Var,
        scales: &[f32],
        tolerance: f32,
    ) -> Result<Var> {
        let se = self.shape(embed).to_vec();
        if se.len() != 2 || se[0] != scales.len() || self.shape(bias) != se.as_slice() {
            return Err(shape_err!(
                "scalar_encode: embed {:?}, bias {:?}, {} scales",
                se,
                self.shape(bias),
                scales.len()
            ));
        }
        let dim = se[1];
        let vv = self.value(values).data();
        if let Some(bad) = vv.iter().find(|v| !v.is_finite()) {
            return Err(Error::Input(format!(
                "scalar encoder got non-finite value {bad}"
            )));
        }
        let picks: Vec<(usize, f32)> = vv
            .iter()
            .map(|&v| {
                let i = select_scale(v, scales, tolerance);
                (i, v / scales[i])
            })
            .collect();
        let (ev, bv) = (self.value(embed).data(), self.value(bias).data());
        let mut data = Vec::with_capacity(picks.len() * dim);
        for &(i, u) in &picks {
            data.extend((0..dim).map(|q| ev[i * dim + q] * u + bv[i * dim + q]));
        }
        let mut shape = self.shape(values).to_vec();
        shape.push(dim);
        let value = Tensor::new(shape, data)?;
        let scales = scales.to_vec();
        let n_scales = scales.len();
        Ok(self.push_op(
            value,
            &[values, embed, bias],
            Box::new(move |args| {
                let ev = args.inputs[1].data();
                let g = args.grad_out;
                let mut gv = vec![0.0f32; picks.len()];
                let mut ge = vec![0.0f32; n_scales * dim];
                let mut gb = vec![0.0f32; n_scales * dim];
                for (n, &(i, u)) in picks.iter().enumerate() {
                    let gr = &g[n * dim..(n + 1) * dim];
                    let er = &ev[i * dim..(i + 1) * dim];
                    gv[n] = kernels::dot(gr, er) / scales[i];
                    for q in 0..dim {
                        ge[i * dim + q] += gr[q] * u;
                        gb[i * dim + q] += gr[q];
                    }
                }
                vec![
                    args.needs[0].then_some(gv),
                    args.needs[1].then_some(ge),
                    args.needs[2].then_some(gb),
                ]
            }),
        ))
    }
}

/// Index of the smallest scale that covers `|v|` within the tolerance.
pub fn select_scale(v: f32, scales: &[f32], tolerance: f32) -> usize {
    let a = v.abs();
    scales
        .iter()
        .position(|&s| a <= tolerance * s)
        .unwrap_or(scales.len() - 1)
}

fn check_temperature(t: f32) -> Result<()> {
    if t > 0.0 && t.is_finite() {
        Ok(())
    } else {
        Err(config_err!("temperature must be positive, got {t}"))
    }
}

pub(crate) fn mean_var(row: &[f32]) -> (f64, f64) {
    let n = row.len() as f64;
    let m = row.iter().map(|&a| f64::from(a)).sum::<f64>() / n;
    let var = row.iter().map(|&a| (f64::from(a) - m).powi(2)).sum::<f64>() / n;
    (m, var)
}

pub(crate) fn log_softmax_row(row: &[f32], temperature: f32) -> Vec<f64> {
    let t = f64::from(temperature);
    let mx = row
        .iter()
        .fold(f64::NEG_INFINITY, |m, &v| m.max(f64::from(v) / t));
    let lse = row
        .iter()
        .map(|&v| (f64::from(v) / t - mx).exp())
        .sum::<f64>()
        .ln()
        + mx;
    row.iter().map(|&v| f64::from(v) / t - lse).collect()
}

pub(crate) fn softmax_row(row: &[f32], temperature: f32) -> Vec<f64> {
    log_softmax_row(row, temperature)
        .into_iter()
        .map(f64::exp)
        .collect()
}

/// Per output sample: (left source index, right-neighbour weight).
pub(crate) fn resize_plan(t: usize, new_len: usize) -> Vec<(usize, f32)> {
    (0..new_len)
        .map(|j| {
            if t == 1 {
                return (0, 0.0);
            }
            let pos = (j * (t - 1)) as f64 / (new_len - 1) as f64;
            let i = (pos.floor() as usize).min(t - 1);
            let f = if i == t - 1 {
                0.0
            } else {
                (pos - i as f64) as f32
            };
            (i, f)
        })
        .collect()
}

fn interp(row: &[f32], i: usize, f: f32) -> f32 {
    if f == 0.0 {
        row[i]
    } else {
        row[i] + (row[i + 1] - row[i]) * f
    }
}

/// Value-only linear resize of a single series.
pub fn resize_series(x: &[f32], new_len: usize) -> Vec<f32> {
    resize_plan(x.len(), new_len)
        .into_iter()
        .map(|(i, f)| interp(x, i, f))
        .collect()
}
