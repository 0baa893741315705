//! Voronoi partition and convex-polygon clipping.

/// Half-plane `n·p ≤ c`.
#[derive(Clone, Copy, Debug)]
pub(crate) struct HalfPlane {
    pub n: [f64; 2],
    pub c: f64,
}

impl HalfPlane {
    /// Move the boundary outward by `r` (inward for negative `r`).
    pub fn offset(self, r: f64) -> Self {
        let len = (self.n[0] * self.n[0] + self.n[1] * self.n[1]).sqrt();
        Self { n: self.n, c: self.c + r * len }
    }

    fn eval(&self, p: [f64; 2]) -> f64 {
        self.n[0] * p[0] + self.n[1] * p[1] - self.c
    }
}

/// Bisector half-planes of site `i` against every other site.
pub(crate) fn voronoi_cell(sites: &[[f64; 2]], i: usize) -> Vec<HalfPlane> {
    let s = sites[i];
    sites
        .iter()
        .enumerate()
        .filter(|&(j, _)| j != i)
        .map(|(_, &t)| HalfPlane {
            n: [t[0] - s[0], t[1] - s[1]],
            c: (t[0] * t[0] + t[1] * t[1] - s[0] * s[0] - s[1] * s[1]) / 2.0,
        })
        .collect()
}

/// Index of the nearest site, ties to the lowest index.
pub(crate) fn nearest_site(sites: &[[f64; 2]], p: [f64; 2]) -> usize {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (i, s) in sites.iter().enumerate() {
        let d = (s[0] - p[0]).powi(2) + (s[1] - p[1]).powi(2);
        if d < best_d {
            best = i;
            best_d = d;
        }
    }
    best
}

/// Sutherland–Hodgman clip of a convex polygon.
fn clip(poly: &[[f64; 2]], h: &HalfPlane) -> Vec<[f64; 2]> {
    let mut out = Vec::with_capacity(poly.len() + 1);
    for k in 0..poly.len() {
        let a = poly[k];
        let b = poly[(k + 1) % poly.len()];
        let (ea, eb) = (h.eval(a), h.eval(b));
        if ea <= 0.0 {
            out.push(a);
        }
        if (ea < 0.0 && eb > 0.0) || (ea > 0.0 && eb < 0.0) {
            let t = ea / (ea - eb);
            out.push([a[0] + t * (b[0] - a[0]), a[1] + t * (b[1] - a[1])]);
        }
    }
    out
}

/// Intersection of a rectangle with half-planes, cleaned of repeated and
/// collinear vertices. `None` when fewer than three vertices remain.
pub(crate) fn convex_polygon(rect: [f64; 4], planes: &[HalfPlane]) -> Option<Vec<[f64; 2]>> {
    let [x0, y0, x1, y1] = rect;
    let mut poly = vec![[x0, y0], [x1, y0], [x1, y1], [x0, y1]];
    for h in planes {
        poly = clip(&poly, h);
        if poly.len() < 3 {
            return None;
        }
    }
    let mut clean: Vec<[f64; 2]> = Vec::with_capacity(poly.len());
    for p in poly {
        if clean.last().map_or(true, |q| (q[0] - p[0]).abs() + (q[1] - p[1]).abs() > 1e-6) {
            clean.push(p);
        }
    }
    while clean.len() > 1 {
        let (f, l) = (clean[0], clean[clean.len() - 1]);
        if (f[0] - l[0]).abs() + (f[1] - l[1]).abs() > 1e-6 {
            break;
        }
        clean.pop();
    }
    let mut k = 0;
    while clean.len() >= 3 && k < clean.len() {
        let n = clean.len();
        let (a, b, c) = (clean[(k + n - 1) % n], clean[k], clean[(k + 1) % n]);
        let cross = (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0]);
        if cross.abs() < 1e-9 {
            clean.remove(k);
        } else {
            k += 1;
        }
    }
    (clean.len() >= 3).then_some(clean)
}
