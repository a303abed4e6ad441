use super::{Batch, Float, Param, ParamVisitor};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Clone, Debug)]
pub struct BatchNorm<T> {
    pub channels: usize,
    pub gamma: Param<T>,
    pub beta: Param<T>,
    pub running_mean: Vec<T>,
    pub running_var: Vec<T>,
}

/// Batch statistics from a training-mode pass, folded into the running averages afterwards.
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    pub unbiased_var: Vec<T>,
}

/// What the backward pass needs from a forward pass.
pub enum BnCache<T> {
    Train { xhat: Vec<T>, inv_std: Vec<T> },
    Eval { inv_std: Vec<T> },
}

impl<T: Float> BatchNorm<T> {
    pub fn new(channels: usize) -> Self {
        BatchNorm {
            channels,
            gamma: Param::filled(&[channels], T::one()),
            beta: Param::zeros(&[channels]),
            running_mean: vec![T::zero(); channels],
            running_var: vec![T::one(); channels],
        }
    }

    /// Normalizes with batch statistics; see [`BatchNorm::update_running`].
    pub fn forward_train(&self, x: &Batch<T>) -> (Batch<T>, BnCache<T>, BatchStats<T>) {
        assert_eq!(x.channels, self.channels);
        let m = x.row_len();
        let mf = T::of(m as f64);
        let mut stats = BatchStats { mean: vec![T::zero(); self.channels], unbiased_var: vec![T::zero(); self.channels] };
        let mut y = x.clone();
        let mut xhat = vec![T::zero(); x.data.len()];
        let mut inv_std = vec![T::zero(); self.channels];
        for c in 0..self.channels {
            let row = x.channel_row(c);
            let mean = row.iter().copied().sum::<T>() / mf;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / mf;
            let istd = T::one() / (var + T::of(BN_EPS)).sqrt();
            inv_std[c] = istd;
            let (g, b) = (self.gamma.value[c], self.beta.value[c]);
            let range = c * m..(c + 1) * m;
            for ((yv, xh), &xv) in y.data[range.clone()].iter_mut().zip(&mut xhat[range.clone()]).zip(&x.data[range]) {
                *xh = (xv - mean) * istd;
                *yv = g * *xh + b;
            }
            stats.mean[c] = mean;
            stats.unbiased_var[c] = if m > 1 { var * mf / T::of((m - 1) as f64) } else { var };
        }
        (y, BnCache::Train { xhat, inv_std }, stats)
    }

    pub fn update_running(&mut self, stats: &BatchStats<T>) {
        let momentum = T::of(BN_MOMENTUM);
        for c in 0..self.channels {
            self.running_mean[c] = (T::one() - momentum) * self.running_mean[c] + momentum * stats.mean[c];
            self.running_var[c] = (T::one() - momentum) * self.running_var[c] + momentum * stats.unbiased_var[c];
        }
    }

    pub fn forward_eval(&self, x: &Batch<T>) -> (Batch<T>, BnCache<T>) {
        assert_eq!(x.channels, self.channels);
        let m = x.row_len();
        let mut y = x.clone();
        let mut inv_std = vec![T::zero(); self.channels];
        for c in 0..self.channels {
            let istd = T::one() / (self.running_var[c] + T::of(BN_EPS)).sqrt();
            inv_std[c] = istd;
            let scale = self.gamma.value[c] * istd;
            let shift = self.beta.value[c] - self.running_mean[c] * scale;
            y.data[c * m..(c + 1) * m].iter_mut().for_each(|v| *v = *v * scale + shift);
        }
        (y, BnCache::Eval { inv_std })
    }

    pub fn backward(&mut self, x: &Batch<T>, cache: &BnCache<T>, dy: &Batch<T>) -> Batch<T> {
        let m = dy.row_len();
        let mf = T::of(m as f64);
        let mut dx = dy.clone();
        for c in 0..self.channels {
            let range = c * m..(c + 1) * m;
            let dyr = &dy.data[range.clone()];
            let g = self.gamma.value[c];
            match cache {
                BnCache::Train { xhat, inv_std } => {
                    let xh = &xhat[range.clone()];
                    let sum_dy = dyr.iter().copied().sum::<T>();
                    let sum_dy_xh = dyr.iter().zip(xh).map(|(&d, &h)| d * h).sum::<T>();
                    self.beta.grad[c] += sum_dy;
                    self.gamma.grad[c] += sum_dy_xh;
                    let k = g * inv_std[c] / mf;
                    for ((d, &dyv), &h) in dx.data[range].iter_mut().zip(dyr).zip(xh) {
                        *d = k * (mf * dyv - sum_dy - h * sum_dy_xh);
                    }
                }
                BnCache::Eval { inv_std } => {
                    let xr = &x.data[range.clone()];
                    let mean = self.running_mean[c];
                    self.beta.grad[c] += dyr.iter().copied().sum::<T>();
                    self.gamma.grad[c] += dyr.iter().zip(xr).map(|(&d, &v)| d * (v - mean) * inv_std[c]).sum::<T>();
                    let k = g * inv_std[c];
                    dx.data[range].iter_mut().for_each(|d| *d *= k);
                }
            }
        }
        dx
    }

    pub fn visit<V: ParamVisitor<T>>(&mut self, prefix: &str, v: &mut V) {
        v.param(&format!("{prefix}.gamma"), &mut self.gamma);
        v.param(&format!("{prefix}.beta"), &mut self.beta);
        let shape = [self.channels];
        v.buffer(&format!("{prefix}.running_mean"), &shape, &mut self.running_mean);
        v.buffer(&format!("{prefix}.running_var"), &shape, &mut self.running_var);
    }
}
