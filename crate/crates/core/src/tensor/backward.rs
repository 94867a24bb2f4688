//! Reverse pass: walks the tape from the loss node down, accumulating
//! adjoints into every `requires_grad` node it reaches.

use super::{lerp_table, Op, Tape, TensorId};
use crate::error::{Error, Result};

/// Per-sweep adjoint buffers, separate from the persistent `grad` fields so
/// repeated `backward` calls accumulate instead of compounding.
struct Adjoints(Vec<Option<Vec<f64>>>);

impl Adjoints {
    fn add(&mut self, tape: &Tape, id: TensorId, f: impl FnOnce(&mut [f64])) {
        if !tape.nodes[id].requires_grad {
            return;
        }
        let buf = self.0[id].get_or_insert_with(|| vec![0.0; tape.nodes[id].data.len()]);
        f(buf);
    }
}

impl Tape {
    /// Backpropagate from a scalar loss node.
    ///
    /// Every reachable `requires_grad` node ends up holding dLoss/dNode in
    /// its `grad` field. Repeated calls without resetting accumulate.
    pub fn backward(&mut self, loss: TensorId) -> Result<()> {
        if self.nodes[loss].data.len() != 1 {
            return Err(Error::Contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.nodes[loss].shape
            )));
        }
        if !self.nodes[loss].requires_grad {
            // Nothing differentiable upstream.
            return Ok(());
        }
        let mut adj = Adjoints(vec![None; loss + 1]);
        adj.0[loss] = Some(vec![1.0]);
        for id in (0..=loss).rev() {
            let Some(g) = adj.0[id].take() else { continue };
            let op = self.nodes[id].op.clone();
            self.propagate(id, &g, &op, &mut adj);
            let node = &mut self.nodes[id];
            let acc = node.grad.get_or_insert_with(|| vec![0.0; g.len()]);
            for (a, gv) in acc.iter_mut().zip(&g) {
                *a += gv;
            }
        }
        Ok(())
    }

    fn propagate(&self, out: TensorId, g: &[f64], op: &Op, adj: &mut Adjoints) {
        match *op {
            Op::Leaf => {}

            Op::Matmul { a, b } => {
                let (m, k) = (self.nodes[a].shape[0], self.nodes[a].shape[1]);
                let n = self.nodes[b].shape[1];
                adj.add(self, a, |ga| {
                    let db = &self.nodes[b].data;
                    for i in 0..m {
                        for j in 0..n {
                            let gv = g[i * n + j];
                            if gv == 0.0 {
                                continue;
                            }
                            for p in 0..k {
                                ga[i * k + p] += gv * db[p * n + j];
                            }
                        }
                    }
                });
                adj.add(self, b, |gb| {
                    let da = &self.nodes[a].data;
                    for i in 0..m {
                        for p in 0..k {
                            let av = da[i * k + p];
                            if av == 0.0 {
                                continue;
                            }
                            for j in 0..n {
                                gb[p * n + j] += av * g[i * n + j];
                            }
                        }
                    }
                });
            }

            Op::MatVec { m, v } => {
                let (r, c) = (self.nodes[m].shape[0], self.nodes[m].shape[1]);
                adj.add(self, m, |gm| {
                    let dv = &self.nodes[v].data;
                    for i in 0..r {
                        for j in 0..c {
                            gm[i * c + j] += g[i] * dv[j];
                        }
                    }
                });
                adj.add(self, v, |gv| {
                    let dm = &self.nodes[m].data;
                    for i in 0..r {
                        for j in 0..c {
                            gv[j] += dm[i * c + j] * g[i];
                        }
                    }
                });
            }

            Op::Conv2d { input, kernel, bias, stride, padding } => {
                let (ci, h, w) = {
                    let s = &self.nodes[input].shape;
                    (s[0], s[1], s[2])
                };
                let (co, k) = {
                    let s = &self.nodes[kernel].shape;
                    (s[0], s[2])
                };
                let (oh, ow) = {
                    let s = &self.nodes[out].shape;
                    (s[1], s[2])
                };
                adj.add(self, bias, |gb| {
                    for oc in 0..co {
                        gb[oc] += g[oc * oh * ow..(oc + 1) * oh * ow].iter().sum::<f64>();
                    }
                });
                adj.add(self, kernel, |gk| {
                    let dx = &self.nodes[input].data;
                    for oc in 0..co {
                        for oy in 0..oh {
                            for ox in 0..ow {
                                let gv = g[(oc * oh + oy) * ow + ox];
                                if gv == 0.0 {
                                    continue;
                                }
                                for ic in 0..ci {
                                    for ky in 0..k {
                                        let iy = (oy * stride + ky) as isize - padding as isize;
                                        if iy < 0 || iy >= h as isize {
                                            continue;
                                        }
                                        let xrow = (ic * h + iy as usize) * w;
                                        let krow = ((oc * ci + ic) * k + ky) * k;
                                        for kx in 0..k {
                                            let ix = (ox * stride + kx) as isize - padding as isize;
                                            if ix < 0 || ix >= w as isize {
                                                continue;
                                            }
                                            gk[krow + kx] += gv * dx[xrow + ix as usize];
                                        }
                                    }
                                }
                            }
                        }
                    }
                });
                adj.add(self, input, |gx| {
                    let dk = &self.nodes[kernel].data;
                    for oc in 0..co {
                        for oy in 0..oh {
                            for ox in 0..ow {
                                let gv = g[(oc * oh + oy) * ow + ox];
                                if gv == 0.0 {
                                    continue;
                                }
                                for ic in 0..ci {
                                    for ky in 0..k {
                                        let iy = (oy * stride + ky) as isize - padding as isize;
                                        if iy < 0 || iy >= h as isize {
                                            continue;
                                        }
                                        let xrow = (ic * h + iy as usize) * w;
                                        let krow = ((oc * ci + ic) * k + ky) * k;
                                        for kx in 0..k {
                                            let ix = (ox * stride + kx) as isize - padding as isize;
                                            if ix < 0 || ix >= w as isize {
                                                continue;
                                            }
                                            gx[xrow + ix as usize] += gv * dk[krow + kx];
                                        }
                                    }
                                }
                            }
                        }
                    }
                });
            }

            Op::AvgPool2 { input } => {
                let (c, h, w) = {
                    let s = &self.nodes[input].shape;
                    (s[0], s[1], s[2])
                };
                let (oh, ow) = (h / 2, w / 2);
                adj.add(self, input, |gx| {
                    for ch in 0..c {
                        for oy in 0..oh {
                            for ox in 0..ow {
                                let gv = 0.25 * g[(ch * oh + oy) * ow + ox];
                                let base = (ch * h + 2 * oy) * w + 2 * ox;
                                gx[base] += gv;
                                gx[base + 1] += gv;
                                gx[base + w] += gv;
                                gx[base + w + 1] += gv;
                            }
                        }
                    }
                });
            }

            Op::GlobalAvgPool { input } => {
                let (c, h, w) = {
                    let s = &self.nodes[input].shape;
                    (s[0], s[1], s[2])
                };
                let inv = 1.0 / (h * w) as f64;
                adj.add(self, input, |gx| {
                    for ch in 0..c {
                        let gv = g[ch] * inv;
                        for p in gx[ch * h * w..(ch + 1) * h * w].iter_mut() {
                            *p += gv;
                        }
                    }
                });
            }

            Op::BilinearUpsample { input, factor } => {
                let (c, h, w) = {
                    let s = &self.nodes[input].shape;
                    (s[0], s[1], s[2])
                };
                let (oh, ow) = (h * factor, w * factor);
                let ty = lerp_table(h, oh);
                let tx = lerp_table(w, ow);
                adj.add(self, input, |gx| {
                    for ch in 0..c {
                        let base = ch * h * w;
                        for (oy, &(y0, y1, wy)) in ty.iter().enumerate() {
                            for (ox, &(x0, x1, wx)) in tx.iter().enumerate() {
                                let gv = g[(ch * oh + oy) * ow + ox];
                                if gv == 0.0 {
                                    continue;
                                }
                                gx[base + y0 * w + x0] += gv * (1.0 - wy) * (1.0 - wx);
                                gx[base + y0 * w + x1] += gv * (1.0 - wy) * wx;
                                gx[base + y1 * w + x0] += gv * wy * (1.0 - wx);
                                gx[base + y1 * w + x1] += gv * wy * wx;
                            }
                        }
                    }
                });
            }

            Op::Relu { input } => {
                adj.add(self, input, |gx| {
                    let dx = &self.nodes[input].data;
                    for (i, gv) in g.iter().enumerate() {
                        if dx[i] > 0.0 {
                            gx[i] += gv;
                        }
                    }
                });
            }

            Op::Tanh { input } => {
                adj.add(self, input, |gx| {
                    let dy = &self.nodes[out].data;
                    for (i, gv) in g.iter().enumerate() {
                        gx[i] += gv * (1.0 - dy[i] * dy[i]);
                    }
                });
            }

            Op::Add { a, b } => {
                adj.add(self, a, |ga| {
                    for (x, gv) in ga.iter_mut().zip(g) {
                        *x += gv;
                    }
                });
                adj.add(self, b, |gb| {
                    for (x, gv) in gb.iter_mut().zip(g) {
                        *x += gv;
                    }
                });
            }

            Op::Hadamard { a, b } => {
                adj.add(self, a, |ga| {
                    let db = &self.nodes[b].data;
                    for i in 0..g.len() {
                        ga[i] += g[i] * db[i];
                    }
                });
                adj.add(self, b, |gb| {
                    let da = &self.nodes[a].data;
                    for i in 0..g.len() {
                        gb[i] += g[i] * da[i];
                    }
                });
            }

            Op::Scale { input, factor } => {
                adj.add(self, input, |gx| {
                    for (x, gv) in gx.iter_mut().zip(g) {
                        *x += gv * factor;
                    }
                });
            }

            Op::ScaleByScalar { input, scalar } => {
                let s = self.nodes[scalar].data[0];
                adj.add(self, input, |gx| {
                    for (x, gv) in gx.iter_mut().zip(g) {
                        *x += gv * s;
                    }
                });
                adj.add(self, scalar, |gs| {
                    let dx = &self.nodes[input].data;
                    gs[0] += g.iter().zip(dx).map(|(gv, x)| gv * x).sum::<f64>();
                });
            }

            Op::AddRowBroadcast { m, v } => {
                let (r, c) = (self.nodes[m].shape[0], self.nodes[m].shape[1]);
                adj.add(self, m, |gm| {
                    for (x, gv) in gm.iter_mut().zip(g) {
                        *x += gv;
                    }
                });
                adj.add(self, v, |gv| {
                    for i in 0..r {
                        for j in 0..c {
                            gv[j] += g[i * c + j];
                        }
                    }
                });
            }

            Op::Softmax { input } => {
                let s = &self.nodes[out].shape;
                let (rows, cols) = if s.len() == 1 { (1, s[0]) } else { (s[0], s[1]) };
                adj.add(self, input, |gx| {
                    let y = &self.nodes[out].data;
                    for r in 0..rows {
                        let off = r * cols;
                        let dot: f64 = (0..cols).map(|j| g[off + j] * y[off + j]).sum();
                        for j in 0..cols {
                            gx[off + j] += y[off + j] * (g[off + j] - dot);
                        }
                    }
                });
            }

            Op::Sum { input } => {
                adj.add(self, input, |gx| {
                    for x in gx.iter_mut() {
                        *x += g[0];
                    }
                });
            }

            Op::Reshape { input } => {
                adj.add(self, input, |gx| {
                    for (x, gv) in gx.iter_mut().zip(g) {
                        *x += gv;
                    }
                });
            }

            Op::Transpose { input } => {
                let (r, c) = (self.nodes[input].shape[0], self.nodes[input].shape[1]);
                adj.add(self, input, |gx| {
                    for i in 0..r {
                        for j in 0..c {
                            gx[i * c + j] += g[j * r + i];
                        }
                    }
                });
            }

            Op::ConcatChannels { ref inputs } => {
                let (h, w) = {
                    let s = &self.nodes[out].shape;
                    (s[1], s[2])
                };
                let mut offset = 0;
                for &id in inputs {
                    let len = self.nodes[id].shape[0] * h * w;
                    let slice = &g[offset..offset + len];
                    adj.add(self, id, |gx| {
                        for (x, gv) in gx.iter_mut().zip(slice) {
                            *x += gv;
                        }
                    });
                    offset += len;
                }
            }

            Op::FieldToTokens { input } => {
                let (d, h, w) = {
                    let s = &self.nodes[input].shape;
                    (s[0], s[1], s[2])
                };
                let hw = h * w;
                adj.add(self, input, |gx| {
                    for ch in 0..d {
                        for t in 0..hw {
                            gx[ch * hw + t] += g[t * d + ch];
                        }
                    }
                });
            }

            Op::TokensToField { input } => {
                let (d, h, w) = {
                    let s = &self.nodes[out].shape;
                    (s[0], s[1], s[2])
                };
                let hw = h * w;
                adj.add(self, input, |gx| {
                    for t in 0..hw {
                        for ch in 0..d {
                            gx[t * d + ch] += g[ch * hw + t];
                        }
                    }
                });
            }

            Op::ConcatRows { a, b } => {
                let na = self.nodes[a].data.len();
                adj.add(self, a, |ga| {
                    for (x, gv) in ga.iter_mut().zip(&g[..na]) {
                        *x += gv;
                    }
                });
                adj.add(self, b, |gb| {
                    for (x, gv) in gb.iter_mut().zip(&g[na..]) {
                        *x += gv;
                    }
                });
            }

            Op::StackRows { ref inputs } => {
                let d = self.nodes[out].shape[1];
                for (row, &id) in inputs.iter().enumerate() {
                    let slice = &g[row * d..(row + 1) * d];
                    adj.add(self, id, |gv| {
                        for (x, gs) in gv.iter_mut().zip(slice) {
                            *x += gs;
                        }
                    });
                }
            }

            Op::SliceRows { input, start } => {
                let d = self.nodes[out].shape[1];
                adj.add(self, input, |gx| {
                    for (i, gv) in g.iter().enumerate() {
                        gx[start * d + i] += gv;
                    }
                });
            }

            Op::RowToVec { input, row } => {
                let d = self.nodes[out].shape[0];
                adj.add(self, input, |gx| {
                    for (j, gv) in g.iter().enumerate() {
                        gx[row * d + j] += gv;
                    }
                });
            }

            Op::TileSpatial { v } => {
                let (d, h, w) = {
                    let s = &self.nodes[out].shape;
                    (s[0], s[1], s[2])
                };
                let hw = h * w;
                adj.add(self, v, |gv| {
                    for ch in 0..d {
                        gv[ch] += g[ch * hw..(ch + 1) * hw].iter().sum::<f64>();
                    }
                });
            }

            Op::SnrLoss { input, ref pos, ref neg } => {
                adj.add(self, input, |gx| {
                    let dx = &self.nodes[input].data;
                    let m = pos
                        .iter()
                        .chain(neg)
                        .map(|&i| dx[i])
                        .fold(f64::NEG_INFINITY, f64::max);
                    let p: f64 = pos.iter().map(|&i| (dx[i] - m).exp()).sum();
                    let q: f64 = neg.iter().map(|&i| (dx[i] - m).exp()).sum();
                    let gv = g[0];
                    for &i in pos {
                        let e = (dx[i] - m).exp();
                        gx[i] += gv * (e / (p + q) - e / p);
                    }
                    for &j in neg {
                        let e = (dx[j] - m).exp();
                        gx[j] += gv * e / (p + q);
                    }
                });
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use crate::tensor::Tape;

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let mut t = Tape::new();
        let x = t.leaf(vec![2], vec![1.0, 2.0], true).unwrap();
        assert!(t.backward(x).is_err());
    }

    #[test]
    fn backward_accumulates_on_repeat() {
        let mut t = Tape::new();
        let x = t.leaf(vec![2], vec![3.0, 4.0], true).unwrap();
        let l = t.sum(x);
        t.backward(l).unwrap();
        t.backward(l).unwrap();
        assert_eq!(t.grad(x).unwrap(), &[2.0, 2.0]);
    }

    #[test]
    fn gradient_linearity_of_summed_losses() {
        // grads of (L1 + L2) match grads of L1 plus grads of L2
        let xv = vec![0.7, -1.3, 2.1, 0.4];
        let wv = vec![1.5, -0.2, 0.3, 0.9];

        let mut t = Tape::new();
        let x = t.leaf(vec![4], xv.clone(), true).unwrap();
        let w = t.constant(vec![4], wv.clone()).unwrap();
        let l1 = {
            let h = t.hadamard(x, w).unwrap();
            t.sum(h)
        };
        let l2 = {
            let h = t.hadamard(x, x).unwrap();
            t.sum(h)
        };
        let total = t.add(l1, l2).unwrap();
        t.backward(total).unwrap();
        let g_total = t.grad(x).unwrap().to_vec();

        let mut ta = Tape::new();
        let xa = ta.leaf(vec![4], xv.clone(), true).unwrap();
        let wa = ta.constant(vec![4], wv.clone()).unwrap();
        let h = ta.hadamard(xa, wa).unwrap();
        let l = ta.sum(h);
        ta.backward(l).unwrap();
        let g1 = ta.grad(xa).unwrap().to_vec();

        let mut tb = Tape::new();
        let xb = tb.leaf(vec![4], xv, true).unwrap();
        let h = tb.hadamard(xb, xb).unwrap();
        let l = tb.sum(h);
        tb.backward(l).unwrap();
        let g2 = tb.grad(xb).unwrap().to_vec();

        for i in 0..4 {
            assert!((g_total[i] - (g1[i] + g2[i])).abs() < 1e-12);
        }
    }

    #[test]
    fn detached_leaf_receives_no_grad() {
        let mut t = Tape::new();
        let x = t.leaf(vec![2], vec![1.0, 2.0], true).unwrap();
        let c = t.constant(vec![2], vec![5.0, 6.0]).unwrap();
        let h = t.hadamard(x, c).unwrap();
        let l = t.sum(h);
        t.backward(l).unwrap();
        assert!(t.grad(c).is_none());
        assert_eq!(t.grad(x).unwrap(), &[5.0, 6.0]);
    }
}
