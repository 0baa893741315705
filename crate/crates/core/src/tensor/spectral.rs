use rand::Rng;
use rand_distr::StandardNormal;

/// Lower clamp for the singular value estimate of a (near-)zero matrix.
pub const SIGMA_EPS: f32 = 1e-12;

/// Persistent left singular vector estimate for one weight.
#[derive(Clone, Debug, PartialEq)]
pub struct SpectralState {
    pub u: Vec<f32>,
    pub iterations: usize,
}

impl SpectralState {
    pub fn new<R: Rng + ?Sized>(rows: usize, rng: &mut R) -> Self {
        let mut u: Vec<f64> = (0..rows).map(|_| rng.sample(StandardNormal)).collect();
        normalize(&mut u);
        Self {
            u: u.into_iter().map(|x| x as f32).collect(),
            iterations: 1,
        }
    }

    pub fn from_u(u: Vec<f32>) -> Self {
        Self { u, iterations: 1 }
    }
}

fn normalize(v: &mut [f64]) -> f64 {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let denom = norm.max(1e-12);
    v.iter_mut().for_each(|x| *x /= denom);
    norm
}

/// Runs `iterations` power-iteration steps on the row-major `rows×cols`
/// matrix `w`, updating `u` in place, and returns `(σ̂, v)` with
/// `σ̂ = uᵀ W v`. With zero iterations `v` is derived from the stored `u`
/// and `u` is left untouched.
pub fn power_iteration_sigma(
    w: &[f32],
    rows: usize,
    cols: usize,
    u: &mut [f32],
    iterations: usize,
) -> (f32, Vec<f32>) {
    assert_eq!(w.len(), rows * cols);
    assert_eq!(u.len(), rows);
    let mut uu: Vec<f64> = u.iter().map(|&x| x as f64).collect();
    let mut v = vec![0.0f64; cols];
    let wt_u = |uu: &[f64], v: &mut [f64]| {
        v.iter_mut().for_each(|x| *x = 0.0);
        for (r, &ur) in uu.iter().enumerate() {
            let row = &w[r * cols..(r + 1) * cols];
            for (vc, &wrc) in v.iter_mut().zip(row) {
                *vc += wrc as f64 * ur;
            }
        }
    };
    let w_v = |v: &[f64]| -> Vec<f64> {
        (0..rows)
            .map(|r| {
                w[r * cols..(r + 1) * cols]
                    .iter()
                    .zip(v)
                    .map(|(&a, &b)| a as f64 * b)
                    .sum()
            })
            .collect()
    };
    if iterations == 0 {
        wt_u(&uu, &mut v);
        normalize(&mut v);
    }
    for _ in 0..iterations {
        wt_u(&uu, &mut v);
        normalize(&mut v);
        uu = w_v(&v);
        normalize(&mut uu);
    }
    let wv = w_v(&v);
    let sigma: f64 = uu.iter().zip(&wv).map(|(a, b)| a * b).sum();
    if iterations > 0 {
        for (dst, src) in u.iter_mut().zip(&uu) {
            *dst = *src as f32;
        }
    }
    (sigma as f32, v.into_iter().map(|x| x as f32).collect())
}
