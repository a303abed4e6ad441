//! 2-D convolution via im2col, with optional broadcast language channels.
//!
//! A convolution that consumes `[Z; h]` (a feature map with the same vector
//! `h` appended at every spatial location) is evaluated without materializing
//! the appended channels: every kernel tap contributes `W_tap · h`, so each
//! output position receives the sum of those projections over the taps that
//! land inside the image. Zero padding is honored exactly; the result equals
//! a plain convolution over the concatenated map.

use rand::Rng;

use super::{gemm, Batch, Float, MatMut, MatRef, Param, ParamVisitor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub kernel: usize,
    pub stride: usize,
    pub dilation: usize,
    pub padding: usize,
}

impl ConvGeometry {
    /// "Same" padding for odd kernels.
    pub fn same(kernel: usize, stride: usize, dilation: usize) -> Self {
        ConvGeometry { kernel, stride, dilation, padding: dilation * (kernel - 1) / 2 }
    }

    pub fn output_len(&self, input: usize) -> usize {
        let span = self.dilation * (self.kernel - 1) + 1;
        (input + 2 * self.padding).saturating_sub(span) / self.stride + 1
    }

    fn taps(&self) -> usize {
        self.kernel * self.kernel
    }

    /// Input coordinate read by output coordinate `o` at kernel offset `k`, if inside.
    #[inline]
    fn source(&self, o: usize, k: usize, len: usize) -> Option<usize> {
        let pos = (o * self.stride + k * self.dilation) as isize - self.padding as isize;
        (pos >= 0 && (pos as usize) < len).then_some(pos as usize)
    }

    /// Output range `[lo, hi)` whose source for kernel offset `k` is inside `[0, len)`.
    fn valid_range(&self, k: usize, len: usize, out_len: usize) -> (usize, usize) {
        let shift = k * self.dilation;
        let lo = if self.padding > shift { (self.padding - shift).div_ceil(self.stride) } else { 0 };
        let limit = len + self.padding;
        let hi = if limit > shift { ((limit - shift - 1) / self.stride + 1).min(out_len) } else { 0 };
        (lo.min(hi), hi)
    }
}

#[derive(Clone, Debug)]
pub struct Conv2d<T> {
    pub in_channels: usize,
    /// Broadcast language channels appended after the feature channels.
    pub lang_channels: usize,
    pub out_channels: usize,
    pub geometry: ConvGeometry,
    /// `[out, in + lang, k, k]`.
    pub weight: Param<T>,
    pub bias: Option<Param<T>>,
}

impl<T: Float> Conv2d<T> {
    pub fn new<R: Rng>(
        in_channels: usize,
        lang_channels: usize,
        out_channels: usize,
        geometry: ConvGeometry,
        with_bias: bool,
        rng: &mut R,
    ) -> Self {
        let k = geometry.kernel;
        let fan_in = (in_channels + lang_channels) * k * k;
        let shape = [out_channels, in_channels + lang_channels, k, k];
        let (weight, bias) = if with_bias {
            // Prediction head: plain 1/sqrt(fan_in) so initial logits stay small.
            let bound = 1.0 / (fan_in as f64).sqrt();
            (Param::uniform(&shape, bound, rng), Some(Param::uniform(&[out_channels], bound, rng)))
        } else {
            (Param::uniform(&shape, (6.0 / fan_in as f64).sqrt(), rng), None)
        };
        Conv2d { in_channels, lang_channels, out_channels, geometry, weight, bias }
    }

    fn row_stride(&self) -> usize {
        (self.in_channels + self.lang_channels) * self.geometry.taps()
    }

    fn feature_weight(&self) -> MatRef<'_, T> {
        MatRef {
            data: &self.weight.value,
            offset: 0,
            rows: self.out_channels,
            cols: self.in_channels * self.geometry.taps(),
            rs: self.row_stride(),
            cs: 1,
        }
    }

    /// `[out, lang]` slice of the weight for kernel tap `tap`.
    fn lang_weight<'a>(data: &'a [T], conv: &Conv2d<T>, tap: usize) -> MatRef<'a, T> {
        let kk = conv.geometry.taps();
        MatRef {
            data,
            offset: conv.in_channels * kk + tap,
            rows: conv.out_channels,
            cols: conv.lang_channels,
            rs: conv.row_stride(),
            cs: kk,
        }
    }

    pub fn output_shape(&self, height: usize, width: usize) -> (usize, usize) {
        (self.geometry.output_len(height), self.geometry.output_len(width))
    }

    fn is_pointwise(&self) -> bool {
        self.geometry.kernel == 1 && self.geometry.stride == 1 && self.geometry.padding == 0
    }

    /// `lang` is row-major `[batch, lang_channels]` and required iff `lang_channels > 0`.
    pub fn forward(&self, x: &Batch<T>, lang: Option<&[T]>) -> Batch<T> {
        assert_eq!(x.channels, self.in_channels, "conv input channels");
        let (ho, wo) = self.output_shape(x.height, x.width);
        let p = x.batch * ho * wo;
        let mut out = Batch::zeros(self.out_channels, x.batch, ho, wo);
        let ckk = self.in_channels * self.geometry.taps();

        let owned;
        let cols: &[T] = if self.is_pointwise() {
            &x.data
        } else {
            owned = im2col(x, self.geometry, ho, wo);
            &owned
        };
        gemm(
            T::one(),
            self.feature_weight(),
            MatRef::row_major(cols, ckk, p),
            T::zero(),
            MatMut::row_major(&mut out.data, self.out_channels, p),
        );

        if self.lang_channels > 0 {
            let lang = lang.expect("language code required by a concatenating conv");
            assert_eq!(lang.len(), x.batch * self.lang_channels, "language code size");
            let proj = self.project_language(lang, x.batch);
            self.add_language(&proj, &mut out, x.height, x.width);
        }
        if let Some(bias) = &self.bias {
            for (o, &b) in bias.value.iter().enumerate() {
                out.data[o * p..(o + 1) * p].iter_mut().for_each(|v| *v += b);
            }
        }
        out
    }

    /// Per-tap projections `V[tap][o][n] = Σ_l W[o, l, tap] · h[n, l]`.
    fn project_language(&self, lang: &[T], batch: usize) -> Vec<T> {
        let kk = self.geometry.taps();
        let block = self.out_channels * batch;
        let mut proj = vec![T::zero(); kk * block];
        let h_t = MatRef::row_major(lang, batch, self.lang_channels).t();
        for tap in 0..kk {
            gemm(
                T::one(),
                Self::lang_weight(&self.weight.value, self, tap),
                h_t,
                T::zero(),
                MatMut { data: &mut proj, offset: tap * block, rows: self.out_channels, cols: batch, rs: batch, cs: 1 },
            );
        }
        proj
    }

    fn add_language(&self, proj: &[T], out: &mut Batch<T>, in_h: usize, in_w: usize) {
        let g = self.geometry;
        let (ho, wo, batch) = (out.height, out.width, out.batch);
        let block = self.out_channels * batch;
        for o in 0..self.out_channels {
            for n in 0..batch {
                for ky in 0..g.kernel {
                    let (y0, y1) = g.valid_range(ky, in_h, ho);
                    for kx in 0..g.kernel {
                        let (x0, x1) = g.valid_range(kx, in_w, wo);
                        let v = proj[(ky * g.kernel + kx) * block + o * batch + n];
                        for oy in y0..y1 {
                            let base = out.index(o, n, oy, 0);
                            out.data[base + x0..base + x1].iter_mut().for_each(|d| *d += v);
                        }
                    }
                }
            }
        }
    }

    /// Accumulates parameter gradients and returns `(dx, dlang)`.
    pub fn backward(&mut self, x: &Batch<T>, lang: Option<&[T]>, dy: &Batch<T>) -> (Batch<T>, Option<Vec<T>>) {
        let (ho, wo) = (dy.height, dy.width);
        let p = x.batch * ho * wo;
        let kk = self.geometry.taps();
        let ckk = self.in_channels * kk;
        let rs = self.row_stride();

        if let Some(bias) = &mut self.bias {
            for (o, g) in bias.grad.iter_mut().enumerate() {
                *g += dy.data[o * p..(o + 1) * p].iter().copied().sum::<T>();
            }
        }

        let owned;
        let cols: &[T] = if self.is_pointwise() {
            &x.data
        } else {
            owned = im2col(x, self.geometry, ho, wo);
            &owned
        };
        let dy_mat = MatRef::row_major(&dy.data, self.out_channels, p);
        gemm(
            T::one(),
            dy_mat,
            MatRef::row_major(cols, ckk, p).t(),
            T::one(),
            MatMut { data: &mut self.weight.grad, offset: 0, rows: self.out_channels, cols: ckk, rs, cs: 1 },
        );

        let mut dcols = vec![T::zero(); ckk * p];
        gemm(T::one(), self.feature_weight().t(), dy_mat, T::zero(), MatMut::row_major(&mut dcols, ckk, p));
        let dx = if self.is_pointwise() {
            Batch { channels: x.channels, batch: x.batch, height: x.height, width: x.width, data: dcols }
        } else {
            col2im(&dcols, x, self.geometry, ho, wo)
        };

        let dlang = (self.lang_channels > 0).then(|| {
            let lang = lang.expect("language code required by a concatenating conv");
            self.language_backward(lang, dy, x.height, x.width)
        });
        (dx, dlang)
    }

    fn language_backward(&mut self, lang: &[T], dy: &Batch<T>, in_h: usize, in_w: usize) -> Vec<T> {
        let g = self.geometry;
        let (ho, wo, batch) = (dy.height, dy.width, dy.batch);
        let lc = self.lang_channels;
        let block = self.out_channels * batch;
        let kk = g.taps();
        let rs = self.row_stride();

        // dV[tap][o][n]: sum of dy over the output positions where the tap is inside the image.
        let mut dv = vec![T::zero(); kk * block];
        for o in 0..self.out_channels {
            for n in 0..batch {
                for ky in 0..g.kernel {
                    let (y0, y1) = g.valid_range(ky, in_h, ho);
                    for kx in 0..g.kernel {
                        let (x0, x1) = g.valid_range(kx, in_w, wo);
                        let mut acc = T::zero();
                        for oy in y0..y1 {
                            let base = dy.index(o, n, oy, 0);
                            acc += dy.data[base + x0..base + x1].iter().copied().sum::<T>();
                        }
                        dv[(ky * g.kernel + kx) * block + o * batch + n] = acc;
                    }
                }
            }
        }

        let mut dlang = vec![T::zero(); batch * lc];
        let h = MatRef::row_major(lang, batch, lc);
        for tap in 0..kk {
            let dv_tap = MatRef { data: &dv, offset: tap * block, rows: self.out_channels, cols: batch, rs: batch, cs: 1 };
            gemm(
                T::one(),
                dv_tap,
                h,
                T::one(),
                MatMut { data: &mut self.weight.grad, offset: self.in_channels * kk + tap, rows: self.out_channels, cols: lc, rs, cs: kk },
            );
            gemm(
                T::one(),
                dv_tap.t(),
                Self::lang_weight(&self.weight.value, self, tap),
                T::one(),
                MatMut::row_major(&mut dlang, batch, lc),
            );
        }
        dlang
    }

    pub fn visit<V: ParamVisitor<T>>(&mut self, prefix: &str, v: &mut V) {
        v.param(&format!("{prefix}.weight"), &mut self.weight);
        if let Some(b) = &mut self.bias {
            v.param(&format!("{prefix}.bias"), b);
        }
    }

    pub fn parameter_count(&self) -> usize {
        self.weight.len() + self.bias.as_ref().map_or(0, Param::len)
    }
}

/// Unfolds `x` into a `[C·k·k, N·Ho·Wo]` row-major matrix.
pub fn im2col<T: Float>(x: &Batch<T>, g: ConvGeometry, ho: usize, wo: usize) -> Vec<T> {
    let p = x.batch * ho * wo;
    let mut cols = vec![T::zero(); x.channels * g.taps() * p];
    let mut row = 0;
    for c in 0..x.channels {
        for ky in 0..g.kernel {
            for kx in 0..g.kernel {
                let dst_row = &mut cols[row * p..(row + 1) * p];
                let (x0, x1) = g.valid_range(kx, x.width, wo);
                for n in 0..x.batch {
                    for oy in 0..ho {
                        let Some(iy) = g.source(oy, ky, x.height) else { continue };
                        let src = x.index(c, n, iy, 0);
                        let dst = (n * ho + oy) * wo;
                        for ox in x0..x1 {
                            let ix = ox * g.stride + kx * g.dilation - g.padding;
                            dst_row[dst + ox] = x.data[src + ix];
                        }
                    }
                }
                row += 1;
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatters column gradients back onto the input grid.
pub fn col2im<T: Float>(dcols: &[T], x: &Batch<T>, g: ConvGeometry, ho: usize, wo: usize) -> Batch<T> {
    let p = x.batch * ho * wo;
    let mut dx = Batch::zeros(x.channels, x.batch, x.height, x.width);
    let mut row = 0;
    for c in 0..x.channels {
        for ky in 0..g.kernel {
            for kx in 0..g.kernel {
                let src_row = &dcols[row * p..(row + 1) * p];
                let (x0, x1) = g.valid_range(kx, x.width, wo);
                for n in 0..x.batch {
                    for oy in 0..ho {
                        let Some(iy) = g.source(oy, ky, x.height) else { continue };
                        let dst = dx.index(c, n, iy, 0);
                        let src = (n * ho + oy) * wo;
                        for ox in x0..x1 {
                            let ix = ox * g.stride + kx * g.dilation - g.padding;
                            dx.data[dst + ix] += src_row[src + ox];
                        }
                    }
                }
                row += 1;
            }
        }
    }
    dx
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Direct seven-loop convolution, used as the reference.
    fn naive_conv(x: &Batch<f64>, w: &[f64], cout: usize, g: ConvGeometry) -> Batch<f64> {
        let ho = g.output_len(x.height);
        let wo = g.output_len(x.width);
        let mut out = Batch::zeros(cout, x.batch, ho, wo);
        let k = g.kernel;
        for o in 0..cout {
            for n in 0..x.batch {
                for oy in 0..ho {
                    for ox in 0..wo {
                        let mut acc = 0.0;
                        for c in 0..x.channels {
                            for ky in 0..k {
                                for kx in 0..k {
                                    let iy = (oy * g.stride + ky * g.dilation) as isize - g.padding as isize;
                                    let ix = (ox * g.stride + kx * g.dilation) as isize - g.padding as isize;
                                    if iy < 0 || ix < 0 || iy >= x.height as isize || ix >= x.width as isize {
                                        continue;
                                    }
                                    acc += w[((o * x.channels + c) * k + ky) * k + kx]
                                        * x.data[x.index(c, n, iy as usize, ix as usize)];
                                }
                            }
                        }
                        let idx = out.index(o, n, oy, ox);
                        out.data[idx] = acc;
                    }
                }
            }
        }
        out
    }

    fn random_batch(c: usize, n: usize, h: usize, w: usize, rng: &mut ChaCha8Rng) -> Batch<f64> {
        let mut b = Batch::zeros(c, n, h, w);
        b.data.iter_mut().for_each(|v| *v = rng.gen_range(-1.0..1.0));
        b
    }

    #[test]
    fn output_length_arithmetic() {
        assert_eq!(ConvGeometry::same(3, 1, 1).output_len(64), 64);
        assert_eq!(ConvGeometry::same(3, 2, 1).output_len(64), 32);
        assert_eq!(ConvGeometry::same(3, 1, 2).output_len(16), 16);
        assert_eq!(ConvGeometry::same(3, 2, 1).output_len(7), 4);
    }

    #[test]
    fn matches_naive_convolution_across_geometries() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for &(k, s, d) in &[(3, 1, 1), (3, 2, 1), (3, 1, 2), (1, 1, 1), (3, 2, 2)] {
            let g = ConvGeometry::same(k, s, d);
            let x = random_batch(3, 2, 7, 6, &mut rng);
            let conv = Conv2d::<f64>::new(3, 0, 4, g, false, &mut rng);
            let got = conv.forward(&x, None);
            let want = naive_conv(&x, &conv.weight.value, 4, g);
            assert_eq!((got.height, got.width), (want.height, want.width));
            for (a, b) in got.data.iter().zip(&want.data) {
                assert!((a - b).abs() < 1e-12, "k={k} s={s} d={d}");
            }
        }
    }

    #[test]
    fn language_channels_equal_materialized_concatenation() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let (c, l, n, h, w) = (2, 3, 2, 5, 4);
        for &(k, s, d) in &[(3, 1, 1), (3, 2, 1), (3, 1, 2), (1, 1, 1)] {
            let g = ConvGeometry::same(k, s, d);
            let x = random_batch(c, n, h, w, &mut rng);
            let lang: Vec<f64> = (0..n * l).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let conv = Conv2d::<f64>::new(c, l, 4, g, false, &mut rng);

            let mut cat = Batch::zeros(c + l, n, h, w);
            for ch in 0..c + l {
                for s_ in 0..n {
                    for y in 0..h {
                        for xx in 0..w {
                            let idx = cat.index(ch, s_, y, xx);
                            cat.data[idx] = if ch < c { x.data[x.index(ch, s_, y, xx)] } else { lang[s_ * l + ch - c] };
                        }
                    }
                }
            }
            let want = naive_conv(&cat, &conv.weight.value, 4, g);
            let got = conv.forward(&x, Some(&lang));
            for (a, b) in got.data.iter().zip(&want.data) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        // <im2col(x), y> == <x, col2im(y)>
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let g = ConvGeometry::same(3, 2, 2);
        let x = random_batch(2, 2, 6, 5, &mut rng);
        let (ho, wo) = (g.output_len(6), g.output_len(5));
        let cols = im2col(&x, g, ho, wo);
        let y: Vec<f64> = (0..cols.len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let lhs: f64 = cols.iter().zip(&y).map(|(a, b)| a * b).sum();
        let back = col2im(&y, &x, g, ho, wo);
        let rhs: f64 = x.data.iter().zip(&back.data).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10);
    }
}
