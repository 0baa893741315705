//! Per-class texture signatures.

use rand::Rng;

use crate::models::ClassLabel;

pub(crate) type Rgb = [f64; 3];

pub(crate) const BACKGROUND: Rgb = [236.0, 233.0, 238.0];
const CYTO_TUMOR: Rgb = [190.0, 150.0, 150.0];
const CYTO_LYMPH: Rgb = [192.0, 160.0, 172.0];
const CYTO_MAC: Rgb = [186.0, 146.0, 136.0];
const NUC_BLUE: Rgb = [104.0, 100.0, 165.0];
const NUC_DARK: Rgb = [80.0, 74.0, 140.0];
const BROWN: Rgb = [146.0, 96.0, 60.0];
const NECRO: Rgb = [156.0, 146.0, 150.0];
const FIBER: Rgb = [182.0, 108.0, 148.0];
const GAP: Rgb = [196.0, 152.0, 172.0];

/// Smoothly interpolated lattice noise in [0, 1].
pub(crate) struct ValueNoise {
    spacing: f64,
    nx: usize,
    vals: Vec<f64>,
}

impl ValueNoise {
    pub fn new<R: Rng>(rng: &mut R, width: usize, height: usize, spacing: f64) -> Self {
        let nx = (width as f64 / spacing).ceil() as usize + 2;
        let ny = (height as f64 / spacing).ceil() as usize + 2;
        Self {
            spacing,
            nx,
            vals: (0..nx * ny).map(|_| rng.gen::<f64>()).collect(),
        }
    }

    pub fn sample(&self, x: f64, y: f64) -> f64 {
        let (gx, gy) = (x / self.spacing, y / self.spacing);
        let (ix, iy) = (gx.floor() as usize, gy.floor() as usize);
        let s = |t: f64| t * t * (3.0 - 2.0 * t);
        let (tx, ty) = (s(gx - ix as f64), s(gy - iy as f64));
        let ny = self.vals.len() / self.nx;
        let v = |i: usize, j: usize| self.vals[(j % ny) * self.nx + i % self.nx];
        let top = v(ix, iy) * (1.0 - tx) + v(ix + 1, iy) * tx;
        let bot = v(ix, iy + 1) * (1.0 - tx) + v(ix + 1, iy + 1) * tx;
        top * (1.0 - ty) + bot * ty
    }
}

/// Jittered lattice of cell centres.
pub(crate) struct Lattice {
    d: f64,
    nx: usize,
    ny: usize,
    centres: Vec<[f64; 2]>,
}

impl Lattice {
    pub fn new<R: Rng>(rng: &mut R, width: usize, height: usize, d: f64) -> Self {
        let nx = (width as f64 / d).ceil() as usize + 1;
        let ny = (height as f64 / d).ceil() as usize + 1;
        let centres = (0..nx * ny)
            .map(|k| {
                let (i, j) = ((k % nx) as f64, (k / nx) as f64);
                [(i + rng.gen_range(0.15..0.85)) * d, (j + rng.gen_range(0.15..0.85)) * d]
            })
            .collect();
        Self { d, nx, ny, centres }
    }

    /// Offset from the nearest centre to `(x, y)`.
    pub fn nearest(&self, x: f64, y: f64) -> [f64; 2] {
        let (ci, cj) = ((x / self.d) as isize, (y / self.d) as isize);
        let mut best = [f64::INFINITY; 2];
        let mut best_d = f64::INFINITY;
        for j in cj - 1..=cj + 1 {
            for i in ci - 1..=ci + 1 {
                if i < 0 || j < 0 || i as usize >= self.nx || j as usize >= self.ny {
                    continue;
                }
                let c = self.centres[j as usize * self.nx + i as usize];
                let off = [x - c[0], y - c[1]];
                let d = off[0] * off[0] + off[1] * off[1];
                if d < best_d {
                    best_d = d;
                    best = off;
                }
            }
        }
        best
    }
}

/// Everything needed to shade one slide's tissue.
pub(crate) struct Textures {
    scale: f64,
    tumor: Lattice,
    lymph: Lattice,
    mac: Lattice,
    fine: ValueNoise,
    mottle: ValueNoise,
}

impl Textures {
    pub fn new<R: Rng>(rng: &mut R, width: usize, height: usize, scale: f64) -> Self {
        Self {
            scale,
            tumor: Lattice::new(rng, width, height, 11.0 * scale),
            lymph: Lattice::new(rng, width, height, 6.0 * scale),
            mac: Lattice::new(rng, width, height, 15.0 * scale),
            fine: ValueNoise::new(rng, width, height, 2.0 * scale),
            mottle: ValueNoise::new(rng, width, height, 7.0 * scale),
        }
    }

    /// Colour of a tissue pixel of `class`; `angle` orients stroma fibres.
    pub fn shade(&self, class: ClassLabel, x: f64, y: f64, angle: f64) -> Rgb {
        let s = self.scale;
        let r = |o: [f64; 2]| (o[0] * o[0] + o[1] * o[1]).sqrt() / s;
        match class {
            ClassLabel::TcPos | ClassLabel::TcNeg => {
                let d = r(self.tumor.nearest(x, y));
                if d < 3.2 {
                    NUC_BLUE
                } else if class == ClassLabel::TcPos && (4.0..5.4).contains(&d) {
                    BROWN
                } else {
                    CYTO_TUMOR
                }
            }
            ClassLabel::LymphPos | ClassLabel::LymphNeg => {
                let d = r(self.lymph.nearest(x, y));
                if d < 2.0 {
                    NUC_DARK
                } else if class == ClassLabel::LymphPos && d < 2.9 {
                    BROWN
                } else {
                    CYTO_LYMPH
                }
            }
            ClassLabel::Macrophage => {
                let o = self.mac.nearest(x, y);
                let nuc = r([o[0] - 2.0 * s, o[1] - 1.0 * s]);
                let d = r(o);
                if nuc < 2.6 {
                    NUC_BLUE
                } else if d < 6.5 && self.fine.sample(x, y) > 0.6 {
                    BROWN
                } else if d < 7.0 {
                    CYTO_MAC
                } else {
                    GAP
                }
            }
            ClassLabel::Necrosis => {
                let m = self.mottle.sample(x, y) - 0.5;
                if self.fine.sample(x + 17.0, y + 5.0) > 0.82 {
                    lerp(NECRO, NUC_DARK, 0.6)
                } else {
                    NECRO.map(|c| c + 55.0 * m)
                }
            }
            ClassLabel::Stroma => {
                let along = (x * angle.cos() + y * angle.sin()) / (5.0 * s);
                let wave = (std::f64::consts::TAU * along + 2.0 * self.mottle.sample(x, y)).sin();
                lerp(GAP, FIBER, 0.5 + 0.5 * wave)
            }
            ClassLabel::NonTissue => BACKGROUND,
        }
    }
}

fn lerp(a: Rgb, b: Rgb, t: f64) -> Rgb {
    [a[0] + (b[0] - a[0]) * t, a[1] + (b[1] - a[1]) * t, a[2] + (b[2] - a[2]) * t]
}
