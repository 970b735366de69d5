//! Small numerical helpers shared across modules.

pub const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// `log(sum(exp(xs)))`, `-inf` for an empty or all `-inf` input.
pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    if max == f64::INFINITY {
        return f64::INFINITY;
    }
    max + xs.iter().map(|&x| (x - max).exp()).sum::<f64>().ln()
}

/// Streaming log-sum-exp accumulator.
#[derive(Debug, Clone, Copy)]
pub struct LogSumExp {
    max: f64,
    sum: f64,
}

impl Default for LogSumExp {
    fn default() -> Self {
        Self { max: f64::NEG_INFINITY, sum: 0.0 }
    }
}

impl LogSumExp {
    pub fn push(&mut self, x: f64) {
        if x == f64::NEG_INFINITY {
            return;
        }
        if x <= self.max {
            self.sum += (x - self.max).exp();
        } else {
            self.sum = self.sum * (self.max - x).exp() + 1.0;
            self.max = x;
        }
    }

    pub fn value(&self) -> f64 {
        if self.max == f64::NEG_INFINITY {
            f64::NEG_INFINITY
        } else {
            self.max + self.sum.ln()
        }
    }
}

#[inline]
pub fn gaussian_log_density(y: f64, mean: f64, var: f64) -> f64 {
    let r = y - mean;
    -0.5 * (LN_2PI + var.ln()) - r * r / (2.0 * var)
}

/// Natural log of the gamma function.
#[inline]
pub fn ln_gamma(x: f64) -> f64 {
    statrs::function::gamma::ln_gamma(x)
}

/// Visits every path in `{0..m}^n` in lexicographic order.
pub fn for_each_path(m: usize, n: usize, mut f: impl FnMut(&[usize])) {
    let mut path = vec![0usize; n];
    loop {
        f(&path);
        let mut k = n;
        loop {
            if k == 0 {
                return;
            }
            k -= 1;
            path[k] += 1;
            if path[k] < m {
                break;
            }
            path[k] = 0;
        }
    }
}

/// `m^n` if it does not exceed `limit`.
pub fn path_count(m: usize, n: usize, limit: u64) -> Option<u64> {
    let c = (m as u64).checked_pow(u32::try_from(n).ok()?)?;
    (c <= limit).then_some(c)
}
