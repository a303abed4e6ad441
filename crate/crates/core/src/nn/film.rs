//! Language fusion: concatenation and feature-wise affine modulation.
//!
//! The single-map functions ([`concat_fuse`], [`film_project`], [`film_fuse`])
//! operate on one [`FeatureMap`]; [`Film`] is the batched trainable layer
//! the network uses.

use super::{gemm, Batch, Float, MatMut, MatRef, Param, ParamVisitor};
use crate::error::{Error, Result};

/// One image's activations, stored channel-major (`values[(c·h + y)·w + x]`).
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap<T> {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub values: Vec<T>,
}

impl<T: Float> FeatureMap<T> {
    pub fn new(height: usize, width: usize, channels: usize, values: Vec<T>) -> Result<Self> {
        if values.len() != height * width * channels {
            return Err(Error::Shape(format!(
                "feature map {height}x{width}x{channels} needs {} values, got {}",
                height * width * channels,
                values.len()
            )));
        }
        Ok(FeatureMap { height, width, channels, values })
    }

    pub fn filled(height: usize, width: usize, channels: usize, v: T) -> Self {
        FeatureMap { height, width, channels, values: vec![v; height * width * channels] }
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> T {
        self.values[(c * self.height + y) * self.width + x]
    }

    /// Extracts sample `n` of a batch.
    pub fn from_batch(batch: &Batch<T>, n: usize) -> Self {
        let plane = batch.plane();
        let mut values = Vec::with_capacity(plane * batch.channels);
        for c in 0..batch.channels {
            let start = batch.index(c, n, 0, 0);
            values.extend_from_slice(&batch.data[start..start + plane]);
        }
        FeatureMap { height: batch.height, width: batch.width, channels: batch.channels, values }
    }

    /// The channel vector at one spatial position.
    pub fn at(&self, y: usize, x: usize) -> Vec<T> {
        (0..self.channels).map(|c| self.get(y, x, c)).collect()
    }
}

/// `[Z; h]` at every spatial location.
pub fn concat_fuse<T: Float>(z: &FeatureMap<T>, h: &[T]) -> FeatureMap<T> {
    let plane = z.height * z.width;
    let mut values = Vec::with_capacity(plane * (z.channels + h.len()));
    values.extend_from_slice(&z.values);
    for &v in h {
        values.extend(std::iter::repeat_n(v, plane));
    }
    FeatureMap { height: z.height, width: z.width, channels: z.channels + h.len(), values }
}

/// `γ = W_γ h`, `β = W_β h`; both matrices are row-major `[channels, |h|]`.
pub fn film_project<T: Float>(h: &[T], w_gamma: &[T], w_beta: &[T], channels: usize) -> Result<(Vec<T>, Vec<T>)> {
    let expected = channels * h.len();
    if w_gamma.len() != expected || w_beta.len() != expected {
        return Err(Error::Shape(format!(
            "projection matrices must be {channels}x{} ({expected} values), got {} and {}",
            h.len(),
            w_gamma.len(),
            w_beta.len()
        )));
    }
    let project = |w: &[T]| -> Vec<T> {
        w.chunks_exact(h.len().max(1))
            .take(channels)
            .map(|row| row.iter().zip(h).map(|(&a, &b)| a * b).sum())
            .collect()
    };
    if h.is_empty() {
        return Ok((vec![T::zero(); channels], vec![T::zero(); channels]));
    }
    Ok((project(w_gamma), project(w_beta)))
}

/// `Z' = (1 + γ) ∘ Z + β`, identically at every spatial location.
pub fn film_fuse<T: Float>(z: &FeatureMap<T>, gamma: &[T], beta: &[T]) -> Result<FeatureMap<T>> {
    if gamma.len() != z.channels || beta.len() != z.channels {
        return Err(Error::Shape(format!(
            "gamma/beta length {}/{} does not match {} channels",
            gamma.len(),
            beta.len(),
            z.channels
        )));
    }
    let plane = z.height * z.width;
    let mut out = z.clone();
    for c in 0..z.channels {
        let scale = T::one() + gamma[c];
        out.values[c * plane..(c + 1) * plane].iter_mut().for_each(|v| *v = scale * *v + beta[c]);
    }
    Ok(out)
}

/// Batched FiLM layer for one block.
#[derive(Clone, Debug)]
pub struct Film<T> {
    pub channels: usize,
    pub lang_dim: usize,
    /// `[channels, lang_dim]`, zero-initialized so the layer starts as identity.
    pub w_gamma: Param<T>,
    pub w_beta: Param<T>,
}

/// Per-sample modulation coefficients, row-major `[batch, channels]`.
pub struct FilmCoefficients<T> {
    pub gamma: Vec<T>,
    pub beta: Vec<T>,
}

impl<T: Float> Film<T> {
    pub fn new(channels: usize, lang_dim: usize) -> Self {
        Film {
            channels,
            lang_dim,
            w_gamma: Param::zeros(&[channels, lang_dim]),
            w_beta: Param::zeros(&[channels, lang_dim]),
        }
    }

    pub fn coefficients(&self, lang: &[T], batch: usize) -> FilmCoefficients<T> {
        let (c, l) = (self.channels, self.lang_dim);
        let h = MatRef::row_major(lang, batch, l);
        let mut gamma = vec![T::zero(); batch * c];
        let mut beta = vec![T::zero(); batch * c];
        gemm(T::one(), h, MatRef::row_major(&self.w_gamma.value, c, l).t(), T::zero(), MatMut::row_major(&mut gamma, batch, c));
        gemm(T::one(), h, MatRef::row_major(&self.w_beta.value, c, l).t(), T::zero(), MatMut::row_major(&mut beta, batch, c));
        FilmCoefficients { gamma, beta }
    }

    pub fn forward(&self, z: &Batch<T>, lang: &[T]) -> (Batch<T>, FilmCoefficients<T>) {
        assert_eq!(z.channels, self.channels);
        let coeff = self.coefficients(lang, z.batch);
        let plane = z.plane();
        let mut out = z.clone();
        for c in 0..z.channels {
            for n in 0..z.batch {
                let scale = T::one() + coeff.gamma[n * self.channels + c];
                let shift = coeff.beta[n * self.channels + c];
                let start = z.index(c, n, 0, 0);
                out.data[start..start + plane].iter_mut().for_each(|v| *v = scale * *v + shift);
            }
        }
        (out, coeff)
    }

    /// Accumulates projection gradients; returns `(dz, dlang)`.
    pub fn backward(&mut self, z: &Batch<T>, lang: &[T], coeff: &FilmCoefficients<T>, dy: &Batch<T>) -> (Batch<T>, Vec<T>) {
        let (c_n, l) = (self.channels, self.lang_dim);
        let batch = z.batch;
        let plane = z.plane();
        let mut dz = dy.clone();
        let mut dgamma = vec![T::zero(); batch * c_n];
        let mut dbeta = vec![T::zero(); batch * c_n];
        for c in 0..c_n {
            for n in 0..batch {
                let start = z.index(c, n, 0, 0);
                let dyr = &dy.data[start..start + plane];
                let zr = &z.data[start..start + plane];
                dgamma[n * c_n + c] = dyr.iter().zip(zr).map(|(&d, &v)| d * v).sum();
                dbeta[n * c_n + c] = dyr.iter().copied().sum();
                let scale = T::one() + coeff.gamma[n * c_n + c];
                dz.data[start..start + plane].iter_mut().for_each(|v| *v *= scale);
            }
        }
        let h = MatRef::row_major(lang, batch, l);
        let dg = MatRef::row_major(&dgamma, batch, c_n);
        let db = MatRef::row_major(&dbeta, batch, c_n);
        gemm(T::one(), dg.t(), h, T::one(), MatMut::row_major(&mut self.w_gamma.grad, c_n, l));
        gemm(T::one(), db.t(), h, T::one(), MatMut::row_major(&mut self.w_beta.grad, c_n, l));
        let mut dlang = vec![T::zero(); batch * l];
        gemm(T::one(), dg, MatRef::row_major(&self.w_gamma.value, c_n, l), T::zero(), MatMut::row_major(&mut dlang, batch, l));
        gemm(T::one(), db, MatRef::row_major(&self.w_beta.value, c_n, l), T::one(), MatMut::row_major(&mut dlang, batch, l));
        (dz, dlang)
    }

    pub fn visit<V: ParamVisitor<T>>(&mut self, prefix: &str, v: &mut V) {
        v.param(&format!("{prefix}.w_gamma"), &mut self.w_gamma);
        v.param(&format!("{prefix}.w_beta"), &mut self.w_beta);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn concat_appends_language_at_every_position() {
        let z = FeatureMap::new(4, 4, 8, (0..128).map(|v| v as f32).collect()).unwrap();
        let h: Vec<f32> = (0..16).map(|v| v as f32 * 0.5 - 3.0).collect();
        let out = concat_fuse(&z, &h);
        assert_eq!(out.channels, 24);
        for y in 0..4 {
            for x in 0..4 {
                let v = out.at(y, x);
                assert_eq!(&v[..8], &z.at(y, x)[..]);
                assert_eq!(&v[8..], &h[..]);
            }
        }
        assert_eq!(out.at(0, 0)[8..], out.at(3, 2)[8..]);
    }

    #[test]
    fn concat_zero_code_leaves_features_untouched() {
        let z = FeatureMap::new(2, 3, 2, (0..12).map(|v| v as f64).collect()).unwrap();
        let out = concat_fuse(&z, &[0.0; 5]);
        assert_eq!(&out.values[..12], &z.values[..]);
        assert!(out.values[12..].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn projection_is_linear_without_bias() {
        let w: Vec<f64> = (0..12).map(|v| v as f64).collect();
        let (g, b) = film_project(&[0.0; 4], &w, &w, 3).unwrap();
        assert!(g.iter().chain(&b).all(|&v| v == 0.0));

        let mut eye = vec![0.0; 16];
        for i in 0..4 {
            eye[i * 4 + i] = 1.0;
        }
        let (g, _) = film_project(&[0.0, 0.0, 1.0, 0.0], &eye, &eye, 4).unwrap();
        assert_eq!(g, vec![0.0, 0.0, 1.0, 0.0]);

        assert!(matches!(film_project(&[1.0; 3], &w, &w, 3), Err(Error::Shape(_))));
    }

    #[test]
    fn projection_matches_triple_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (c, l) = (7, 5);
        let h: Vec<f64> = (0..l).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let wg: Vec<f64> = (0..c * l).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let wb: Vec<f64> = (0..c * l).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let (g, b) = film_project(&h, &wg, &wb, c).unwrap();
        for i in 0..c {
            let (mut eg, mut eb) = (0.0, 0.0);
            for j in 0..l {
                eg += wg[i * l + j] * h[j];
                eb += wb[i * l + j] * h[j];
            }
            assert!((g[i] - eg).abs() < 1e-6 && (b[i] - eb).abs() < 1e-6);
        }
    }

    #[test]
    fn fuse_identity_and_constant_cases() {
        let z = FeatureMap::new(3, 3, 2, (0..18).map(|v| v as f32 - 4.0).collect()).unwrap();
        let out = film_fuse(&z, &[0.0, 0.0], &[0.0, 0.0]).unwrap();
        assert_eq!(out, z);

        let ones = FeatureMap::filled(2, 2, 3, 1.0f32);
        let out = film_fuse(&ones, &[1.0; 3], &[2.0; 3]).unwrap();
        assert!(out.values.iter().all(|&v| v == 4.0));

        assert!(film_fuse(&ones, &[1.0; 2], &[2.0; 3]).is_err());
    }

    #[test]
    fn fuse_matches_elementwise_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let (h, w, c) = (3, 4, 5);
        let z = FeatureMap::new(h, w, c, (0..h * w * c).map(|_| rng.gen_range(-2.0..2.0)).collect()).unwrap();
        let g: Vec<f64> = (0..c).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let b: Vec<f64> = (0..c).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let out = film_fuse(&z, &g, &b).unwrap();
        for y in 0..h {
            for x in 0..w {
                for ch in 0..c {
                    let want = (1.0 + g[ch]) * z.get(y, x, ch) + b[ch];
                    assert!((out.get(y, x, ch) - want).abs() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn batched_layer_agrees_with_single_map_functions() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let (c, l, n) = (3, 4, 2);
        let mut film = Film::<f64>::new(c, l);
        film.w_gamma.value.iter_mut().for_each(|v| *v = rng.gen_range(-1.0..1.0));
        film.w_beta.value.iter_mut().for_each(|v| *v = rng.gen_range(-1.0..1.0));
        let mut z = Batch::zeros(c, n, 2, 3);
        z.data.iter_mut().for_each(|v| *v = rng.gen_range(-1.0..1.0));
        let lang: Vec<f64> = (0..n * l).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let (out, _) = film.forward(&z, &lang);
        for s in 0..n {
            let h = &lang[s * l..(s + 1) * l];
            let (g, b) = film_project(h, &film.w_gamma.value, &film.w_beta.value, c).unwrap();
            let want = film_fuse(&FeatureMap::from_batch(&z, s), &g, &b).unwrap();
            let got = FeatureMap::from_batch(&out, s);
            for (a, e) in got.values.iter().zip(&want.values) {
                assert!((a - e).abs() < 1e-12);
            }
        }
    }
}
