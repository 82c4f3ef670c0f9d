use std::sync::Arc;

use super::kernels::{self, ConvShape};
use super::{Graph, Var};
use crate::frequency::{box_filter_raw, fft2c_raw, haar_forward, haar_inverse, ifft2c_raw};
use crate::tensor::{reflect, Real, Tensor};

fn t<T: Real>(shape: &[usize], data: Vec<T>) -> Tensor<T> {
    Tensor::from_vec(shape, data).expect("op produced inconsistent shape")
}

impl<'g, T: Real> Var<'g, T> {
    fn unary(
        self,
        value: Tensor<T>,
        back: impl Fn(&Tensor<T>) -> Tensor<T> + 'static,
    ) -> Var<'g, T> {
        self.graph.push(value, &[self], move |g, _| vec![Some(back(g))])
    }

    pub fn add(self, other: Var<'g, T>) -> Var<'g, T> {
        let (a, b) = (self.value(), other.value());
        assert_eq!(a.shape(), b.shape(), "add shape mismatch");
        let v = a.zip_map(&b, |x, y| x + y);
        self.graph
            .push(v, &[self, other], |g, _| vec![Some(g.clone()), Some(g.clone())])
    }

    pub fn sub(self, other: Var<'g, T>) -> Var<'g, T> {
        let (a, b) = (self.value(), other.value());
        assert_eq!(a.shape(), b.shape(), "sub shape mismatch");
        let v = a.zip_map(&b, |x, y| x - y);
        self.graph
            .push(v, &[self, other], |g, _| vec![Some(g.clone()), Some(g.map(|x| -x))])
    }

    pub fn mul(self, other: Var<'g, T>) -> Var<'g, T> {
        let (a, b) = (self.value(), other.value());
        assert_eq!(a.shape(), b.shape(), "mul shape mismatch");
        let v = a.zip_map(&b, |x, y| x * y);
        self.graph.push(v, &[self, other], move |g, need| {
            vec![
                need[0].then(|| g.zip_map(&b, |x, y| x * y)),
                need[1].then(|| g.zip_map(&a, |x, y| x * y)),
            ]
        })
    }

    pub fn scale(self, s: T) -> Var<'g, T> {
        let v = self.value().scale(s);
        self.unary(v, move |g| g.scale(s))
    }

    pub fn relu(self) -> Var<'g, T> {
        let x = self.value();
        let v = x.map(|v| v.max(T::zero()));
        self.unary(v, move |g| g.zip_map(&x, |g, x| if x > T::zero() { g } else { T::zero() }))
    }

    pub fn sigmoid(self) -> Var<'g, T> {
        let y = Arc::new(self.value().map(|v| T::one() / (T::one() + (-v).exp())));
        let yb = y.clone();
        self.unary((*y).clone(), move |g| g.zip_map(&yb, |g, y| g * y * (T::one() - y)))
    }

    /// Parametric ReLU with a single learned slope `a` (shape `[1]`).
    pub fn prelu(self, slope: Var<'g, T>) -> Var<'g, T> {
        let x = self.value();
        let a = slope.value().item();
        let v = x.map(|v| if v > T::zero() { v } else { a * v });
        self.graph.push(v, &[self, slope], move |g, need| {
            vec![
                need[0].then(|| g.zip_map(&x, |g, x| if x > T::zero() { g } else { a * g })),
                need[1].then(|| {
                    let s = g
                        .data()
                        .iter()
                        .zip(x.data())
                        .filter(|(_, &x)| x <= T::zero())
                        .map(|(&g, &x)| g * x)
                        .sum();
                    Tensor::from_vec(&[1], vec![s]).unwrap()
                }),
            ]
        })
    }

    /// Elementwise product with a fixed `[h,w]` plane broadcast over channels.
    pub fn mul_plane(self, plane: Arc<Tensor<T>>) -> Var<'g, T> {
        let (c, h, w) = self.chw();
        assert_eq!(plane.shape(), &[h, w], "mul_plane shape mismatch");
        let apply = move |x: &Tensor<T>, p: &Tensor<T>| {
            let mut out = x.clone();
            for k in 0..c {
                for (o, &m) in out.data_mut()[k * h * w..(k + 1) * h * w].iter_mut().zip(p.data()) {
                    *o *= m;
                }
            }
            out
        };
        let v = apply(&self.value(), &plane);
        self.unary(v, move |g| apply(g, &plane))
    }

    pub fn sum(self) -> Var<'g, T> {
        let x = self.value();
        let shape = x.shape().to_vec();
        self.unary(Tensor::scalar(x.sum()), move |g| Tensor::full(&shape, g.item()))
    }

    pub fn mean(self) -> Var<'g, T> {
        let n = T::from_usize(self.value().len()).unwrap();
        self.sum().scale(T::one() / n)
    }

    pub fn concat(parts: &[Var<'g, T>]) -> Var<'g, T> {
        let graph = parts[0].graph;
        let values: Vec<_> = parts.iter().map(|p| p.value()).collect();
        let refs: Vec<&Tensor<T>> = values.iter().map(|v| v.as_ref()).collect();
        let v = Tensor::concat_channels(&refs);
        let splits: Vec<usize> = values.iter().map(|v| v.chw().0).collect();
        graph.push(v, parts, move |g, need| {
            let mut start = 0;
            splits
                .iter()
                .zip(need)
                .map(|(&len, &n)| {
                    let s = start;
                    start += len;
                    n.then(|| g.channels(s, len))
                })
                .collect()
        })
    }

    pub fn channels(self, start: usize, len: usize) -> Var<'g, T> {
        let x = self.value();
        let (c, h, w) = x.chw();
        let v = x.channels(start, len);
        self.unary(v, move |g| {
            let mut full = Tensor::zeros(&[c, h, w]);
            full.data_mut()[start * h * w..(start + len) * h * w].copy_from_slice(g.data());
            full
        })
    }

    /// `[c,h,w] -> [c,1,1]` spatial mean.
    pub fn global_avg_pool(self) -> Var<'g, T> {
        let x = self.value();
        let (c, h, w) = x.chw();
        let inv = T::one() / T::from_usize(h * w).unwrap();
        let v = Tensor::from_fn(&[c, 1, 1], |k| x.data()[k * h * w..(k + 1) * h * w].iter().copied().sum::<T>() * inv);
        self.unary(v, move |g| Tensor::from_fn(&[c, h, w], |i| g.data()[i / (h * w)] * inv))
    }

    /// Scales every channel of `self` (`[c,h,w]`) by `gate` (`[c,1,1]`).
    pub fn mul_channels(self, gate: Var<'g, T>) -> Var<'g, T> {
        let x = self.value();
        let gv = gate.value();
        let (c, h, w) = x.chw();
        assert_eq!(gv.shape(), &[c, 1, 1], "channel gate shape");
        let hw = h * w;
        let v = Tensor::from_fn(&[c, h, w], |i| x.data()[i] * gv.data()[i / hw]);
        self.graph.push(v, &[self, gate], move |g, need| {
            vec![
                need[0].then(|| Tensor::from_fn(&[c, h, w], |i| g.data()[i] * gv.data()[i / hw])),
                need[1].then(|| {
                    Tensor::from_fn(&[c, 1, 1], |k| {
                        g.data()[k * hw..(k + 1) * hw]
                            .iter()
                            .zip(&x.data()[k * hw..(k + 1) * hw])
                            .map(|(&a, &b)| a * b)
                            .sum()
                    })
                }),
            ]
        })
    }

    /// Same-size convolution with reflect padding. `weight` is `[cout, cin, kh, kw]`.
    pub fn conv2d(self, weight: Var<'g, T>, bias: Option<Var<'g, T>>) -> Var<'g, T> {
        let x = self.value();
        let wv = weight.value();
        let (cin, h, w) = x.chw();
        let ws = wv.shape();
        assert_eq!(ws.len(), 4, "conv weight must be [cout,cin,kh,kw]");
        assert_eq!(ws[1], cin, "conv input channels {} vs weight {:?}", cin, ws);
        let shape = ConvShape {
            cin,
            cout: ws[0],
            h,
            w,
            kh: ws[2],
            kw: ws[3],
        };
        let bv = bias.map(|b| b.value());
        let out = kernels::conv2d_forward(x.data(), wv.data(), bv.as_ref().map(|b| b.data()), &shape);
        let v = t(&[shape.cout, h, w], out);
        let wshape = ws.to_vec();
        let cout = shape.cout;
        let mut parents = vec![self, weight];
        parents.extend(bias);
        let has_bias = bias.is_some();
        self.graph.push(v, &parents, move |g, need| {
            let (dx, dw, db) = kernels::conv2d_backward(
                g.data(),
                x.data(),
                wv.data(),
                &shape,
                need[0],
                need[1],
                has_bias && need[2],
            );
            let mut out = vec![dx.map(|d| t(&[cin, h, w], d)), dw.map(|d| t(&wshape, d))];
            if has_bias {
                out.push(db.map(|d| t(&[cout], d)));
            }
            out
        })
    }

    /// Centered orthonormal FFT: `[c,h,w] -> [2c,h,w]` (real block, imaginary block).
    pub fn fft2c(self) -> Var<'g, T> {
        let x = self.value();
        let (c, h, w) = x.chw();
        let v = t(&[2 * c, h, w], fft2c_raw(x.data(), c, h, w));
        self.unary(v, move |g| {
            let (re, _) = ifft2c_raw(g.data(), c, h, w);
            t(&[c, h, w], re)
        })
    }

    /// Real part of the centered orthonormal inverse FFT: `[2c,h,w] -> [c,h,w]`.
    pub fn ifft2c_real(self) -> Var<'g, T> {
        let x = self.value();
        let (c2, h, w) = x.chw();
        assert!(c2 % 2 == 0, "ifft2c_real needs an even channel count");
        let c = c2 / 2;
        let (re, _) = ifft2c_raw(x.data(), c, h, w);
        self.unary(t(&[c, h, w], re), move |g| t(&[2 * c, h, w], fft2c_raw(g.data(), c, h, w)))
    }

    pub fn box_filter(self, size: usize) -> Var<'g, T> {
        let x = self.value();
        let (c, h, w) = x.chw();
        let v = t(&[c, h, w], box_filter_raw(x.data(), c, h, w, size));
        self.unary(v, move |g| t(&[c, h, w], kernels::box_filter_adjoint(g.data(), c, h, w, size)))
    }

    /// Bilinear backward warp by a `[2,h,w]` offset field (x displacement first).
    pub fn warp(self, offset: Var<'g, T>) -> Var<'g, T> {
        let x = self.value();
        let off = offset.value();
        let (c, h, w) = x.chw();
        assert_eq!(off.shape(), &[2, h, w], "offset must be [2,h,w]");
        let v = t(&[c, h, w], kernels::warp_forward(x.data(), off.data(), c, h, w));
        self.graph.push(v, &[self, offset], move |g, need| {
            let (dx, doff) = kernels::warp_backward(g.data(), x.data(), off.data(), c, h, w, need[0], need[1]);
            vec![dx.map(|d| t(&[c, h, w], d)), doff.map(|d| t(&[2, h, w], d))]
        })
    }

    /// Spatially-adaptive separable filtering with `[c*k,h,w]` vertical and horizontal kernels.
    pub fn sepconv(self, kv: Var<'g, T>, kh: Var<'g, T>, k: usize) -> Var<'g, T> {
        let x = self.value();
        let (kvv, khv) = (kv.value(), kh.value());
        let (c, h, w) = x.chw();
        assert_eq!(kvv.shape(), &[c * k, h, w], "vertical kernel shape");
        assert_eq!(khv.shape(), &[c * k, h, w], "horizontal kernel shape");
        let v = t(&[c, h, w], kernels::sepconv_forward(x.data(), kvv.data(), khv.data(), c, h, w, k));
        self.graph.push(v, &[self, kv, kh], move |g, need| {
            let [dx, dkv, dkh] = kernels::sepconv_backward(
                g.data(),
                x.data(),
                kvv.data(),
                khv.data(),
                c,
                h,
                w,
                k,
                [need[0], need[1], need[2]],
            );
            vec![
                dx.map(|d| t(&[c, h, w], d)),
                dkv.map(|d| t(&[c * k, h, w], d)),
                dkh.map(|d| t(&[c * k, h, w], d)),
            ]
        })
    }

    pub fn pixel_shuffle(self, s: usize) -> Var<'g, T> {
        let x = self.value();
        let (cs, h, w) = x.chw();
        assert!(cs % (s * s) == 0, "pixel shuffle channel count");
        let c = cs / (s * s);
        let v = t(&[c, h * s, w * s], kernels::pixel_shuffle(x.data(), c, h, w, s));
        self.unary(v, move |g| t(&[cs, h, w], kernels::pixel_unshuffle(g.data(), c, h * s, w * s, s)))
    }

    pub fn resize(self, oh: usize, ow: usize) -> Var<'g, T> {
        let x = self.value();
        let (c, h, w) = x.chw();
        let v = t(&[c, oh, ow], kernels::resize_forward(x.data(), c, h, w, oh, ow));
        self.unary(v, move |g| t(&[c, h, w], kernels::resize_backward(g.data(), c, h, w, oh, ow)))
    }

    /// Bottom/right reflection padding to even height and width.
    pub fn pad_to_even(self) -> Var<'g, T> {
        let x = self.value();
        let (c, h, w) = x.chw();
        if h % 2 == 0 && w % 2 == 0 {
            return self;
        }
        let (nh, nw) = (h + h % 2, w + w % 2);
        let src: Vec<usize> = (0..c * nh * nw)
            .map(|i| {
                let k = i / (nh * nw);
                let y = reflect(((i / nw) % nh) as isize, h);
                let xx = reflect((i % nw) as isize, w);
                (k * h + y) * w + xx
            })
            .collect();
        let v = t(&[c, nh, nw], src.iter().map(|&j| x.data()[j]).collect());
        self.unary(v, move |g| {
            let mut dx = vec![T::zero(); c * h * w];
            for (&j, &gv) in src.iter().zip(g.data()) {
                dx[j] += gv;
            }
            t(&[c, h, w], dx)
        })
    }

    /// Orthonormal Haar analysis of an even-sized `[c,h,w]` input into
    /// `[4c,h/2,w/2]` ordered LL, LH, HL, HH.
    pub fn haar(self) -> Var<'g, T> {
        let x = self.value();
        let (c, h, w) = x.chw();
        assert!(h % 2 == 0 && w % 2 == 0, "haar needs even sizes");
        let v = t(&[4 * c, h / 2, w / 2], haar_forward(x.data(), c, h, w));
        self.unary(v, move |g| t(&[c, h, w], haar_inverse(g.data(), c, h, w)))
    }

    /// Mean Charbonnier penalty `mean(sqrt((a-b)^2 + eps^2))`.
    pub fn charbonnier(self, target: Var<'g, T>, eps: T) -> Var<'g, T> {
        let (a, b) = (self.value(), target.value());
        assert_eq!(a.shape(), b.shape(), "charbonnier shape mismatch");
        let n = T::from_usize(a.len()).unwrap();
        let e2 = eps * eps;
        // offset by eps so that identical inputs give exactly eps
        let v = eps
            + a.data()
                .iter()
                .zip(b.data())
                .map(|(&x, &y)| ((x - y) * (x - y) + e2).sqrt() - eps)
                .sum::<T>()
                / n;
        self.graph.push(Tensor::scalar(v), &[self, target], move |g, need| {
            let gs = g.item() / n;
            let da = a.zip_map(&b, |x, y| {
                let d = x - y;
                gs * d / (d * d + e2).sqrt()
            });
            let db = need[1].then(|| da.map(|v| -v));
            vec![need[0].then_some(da), db]
        })
    }

    /// Similarity `-mean|a - b|`; the subgradient of `|.|` at 0 is taken as 0.
    pub fn neg_l1_similarity(self, other: Var<'g, T>) -> Var<'g, T> {
        let (a, b) = (self.value(), other.value());
        assert_eq!(a.shape(), b.shape(), "similarity shape mismatch");
        let n = T::from_usize(a.len()).unwrap();
        let v = -a.data().iter().zip(b.data()).map(|(&x, &y)| (x - y).abs()).sum::<T>() / n;
        self.graph.push(Tensor::scalar(v), &[self, other], move |g, need| {
            let gs = g.item() / n;
            let da = a.zip_map(&b, |x, y| {
                let d = x - y;
                if d > T::zero() {
                    -gs
                } else if d < T::zero() {
                    gs
                } else {
                    T::zero()
                }
            });
            let db = need[1].then(|| da.map(|v| -v));
            vec![need[0].then_some(da), db]
        })
    }

    /// `-log( exp(pos/tau) / (exp(pos/tau) + sum_k exp(neg_k/tau)) )` over scalar similarities.
    pub fn info_nce(pos: Var<'g, T>, negs: &[Var<'g, T>], tau: T) -> Var<'g, T> {
        let mut logits = vec![pos.item() / tau];
        logits.extend(negs.iter().map(|n| n.item() / tau));
        let m = logits.iter().copied().fold(T::neg_infinity(), T::max);
        let z: T = logits.iter().map(|&l| (l - m).exp()).sum();
        let lse = m + z.ln();
        let v = lse - logits[0];
        let probs: Vec<T> = logits.iter().map(|&l| (l - lse).exp()).collect();
        let mut parents = vec![pos];
        parents.extend_from_slice(negs);
        pos.graph.push(Tensor::scalar(v), &parents, move |g, _| {
            let gs = g.item() / tau;
            probs
                .iter()
                .enumerate()
                .map(|(i, &p)| {
                    let d = if i == 0 { p - T::one() } else { p };
                    Some(Tensor::scalar(gs * d))
                })
                .collect()
        })
    }

    pub fn add_all(parts: &[Var<'g, T>]) -> Var<'g, T> {
        let graph: &Graph<T> = parts[0].graph;
        let mut acc = (*parts[0].value()).clone();
        for p in &parts[1..] {
            acc.add_assign(&p.value());
        }
        let n = parts.len();
        graph.push(acc, parts, move |g, need| (0..n).map(|i| need[i].then(|| g.clone())).collect())
    }
}

impl<'g, T: Real> std::ops::Add for Var<'g, T> {
    type Output = Var<'g, T>;
    fn add(self, rhs: Self) -> Self {
        Var::add(self, rhs)
    }
}

impl<'g, T: Real> std::ops::Sub for Var<'g, T> {
    type Output = Var<'g, T>;
    fn sub(self, rhs: Self) -> Self {
        Var::sub(self, rhs)
    }
}

impl<'g, T: Real> std::ops::Mul for Var<'g, T> {
    type Output = Var<'g, T>;
    fn mul(self, rhs: Self) -> Self {
        Var::mul(self, rhs)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::Graph;
    use crate::testing::{check_gradients, random_tensor};

    #[test]
    fn pad_to_even_gradients() {
        let x = random_tensor(&[2, 5, 3], 40);
        check_gradients(&[x], |g, v| {
            let y = v[0].pad_to_even();
            assert_eq!(y.shape(), vec![2, 6, 4]);
            y.mul(g.constant(random_tensor(&[2, 6, 4], 41))).sum()
        });
    }

    #[test]
    fn conv2d_gradients() {
        let x = random_tensor(&[2, 5, 6], 1);
        let w = random_tensor(&[3, 2, 3, 3], 2);
        let b = random_tensor(&[3], 3);
        check_gradients(&[x, w, b], |g, v| {
            let y = v[0].conv2d(v[1], Some(v[2]));
            y.mul(g.constant(random_tensor(&[3, 5, 6], 4))).sum()
        });
    }

    #[test]
    fn pointwise_conv_gradients() {
        let x = random_tensor(&[3, 4, 4], 5);
        let w = random_tensor(&[2, 3, 1, 1], 6);
        check_gradients(&[x, w], |g, v| {
            let y = v[0].conv2d(v[1], None);
            y.mul(g.constant(random_tensor(&[2, 4, 4], 7))).sum()
        });
    }

    #[test]
    fn fft_pair_gradients() {
        let x = random_tensor(&[2, 4, 6], 8);
        let s = random_tensor(&[4, 5, 4], 9);
        check_gradients(&[x, s], |g, v| {
            let a = v[0].fft2c().mul(g.constant(random_tensor(&[4, 4, 6], 10))).sum();
            let b = v[1].ifft2c_real().mul(g.constant(random_tensor(&[2, 5, 4], 11))).sum();
            a + b
        });
    }

    #[test]
    fn warp_gradients() {
        let x = random_tensor(&[2, 5, 5], 12);
        // keep sample positions away from integer grid lines and the clamp boundary
        let off = Tensor::from_fn(&[2, 5, 5], |i| 0.3 + 0.2 * ((i * 7 % 5) as f64) / 5.0 - 0.45 * ((i % 2) as f64));
        check_gradients(&[x, off], |g, v| v[0].warp(v[1]).mul(g.constant(random_tensor(&[2, 5, 5], 13))).sum());
    }

    #[test]
    fn sepconv_gradients() {
        let x = random_tensor(&[2, 5, 4], 14);
        let kv = random_tensor(&[6, 5, 4], 15);
        let kh = random_tensor(&[6, 5, 4], 16);
        check_gradients(&[x, kv, kh], |g, v| {
            v[0].sepconv(v[1], v[2], 3).mul(g.constant(random_tensor(&[2, 5, 4], 17))).sum()
        });
    }

    #[test]
    fn misc_gradients() {
        let x = random_tensor(&[4, 4, 6], 18);
        let a = Tensor::from_vec(&[1], vec![0.25]).unwrap();
        let gate = random_tensor(&[2, 1, 1], 19);
        check_gradients(&[x, a, gate], |g, v| {
            let p = v[0].prelu(v[1]).sigmoid();
            let s = p.pixel_shuffle(2).resize(5, 7).box_filter(3);
            let h = v[0].haar().channels(3, 2).mul_channels(v[2]);
            let q = v[0].channels(0, 2).global_avg_pool().mul(v[2]);
            let cat = Var::concat(&[h, h.relu()]);
            s.mul(g.constant(random_tensor(&[1, 5, 7], 20))).sum()
                + cat.mul(g.constant(random_tensor(&[4, 2, 3], 21))).sum()
                + q.sum().scale(0.5)
        });
    }

    #[test]
    fn loss_op_gradients() {
        let a = random_tensor(&[1, 4, 4], 22);
        let b = random_tensor(&[1, 4, 4], 23);
        let c = random_tensor(&[1, 4, 4], 24);
        check_gradients(&[a, b, c], |_, v| {
            let ch = v[0].charbonnier(v[1], 1e-2);
            let p = v[0].neg_l1_similarity(v[1]);
            let n1 = v[0].neg_l1_similarity(v[2]);
            let n2 = v[1].neg_l1_similarity(v[2]);
            ch + Var::info_nce(p, &[n1, n2], 0.7)
        });
    }

    #[test]
    fn inference_graph_records_nothing() {
        let g = Graph::<f64>::inference();
        let x = g.leaf(random_tensor(&[1, 3, 3], 1));
        let y = x.relu().sum();
        assert!(y.item().is_finite());
        assert!(g.nodes.borrow().iter().all(|n| n.backward.is_none()));
    }
}
