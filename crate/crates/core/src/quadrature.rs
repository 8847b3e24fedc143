//! Quadrature on coordinate spheres and balls, and deterministic probe grids.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Volume of the unit `(n-1)`-sphere, `2 π^{n/2} / Γ(n/2)`.
pub fn omega(n: usize) -> f64 {
    2.0 * PI.powf(n as f64 / 2.0) / gamma_half_integer(n)
}

/// `Γ(n/2)` for a positive integer `n`.
fn gamma_half_integer(n: usize) -> f64 {
    if n.is_multiple_of(2) {
        (1..n / 2).map(|k| k as f64).product()
    } else {
        // Γ(k + 1/2) = (2k)! √π / (4^k k!)
        let mut g = PI.sqrt();
        let mut x = 0.5;
        while x < n as f64 / 2.0 - 0.25 {
            g *= x;
            x += 1.0;
        }
        g
    }
}

/// Gauss–Legendre nodes and weights on `[-1, 1]`.
pub fn gauss_legendre(q: usize) -> (Vec<f64>, Vec<f64>) {
    let mut nodes = vec![0.0; q];
    let mut weights = vec![0.0; q];
    for i in 0..q.div_ceil(2) {
        let mut t = (PI * (i as f64 + 0.75) / (q as f64 + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            let (mut p0, mut p1) = (1.0, t);
            for k in 2..=q {
                let kf = k as f64;
                let p2 = ((2.0 * kf - 1.0) * t * p1 - (kf - 1.0) * p0) / kf;
                p0 = p1;
                p1 = p2;
            }
            let p = if q == 0 { 1.0 } else { p1 };
            let pm1 = if q == 1 { 1.0 } else { p0 };
            dp = q as f64 * (t * p - pm1) / (t * t - 1.0);
            let dt = p / dp;
            t -= dt;
            if dt.abs() < 1e-16 {
                break;
            }
        }
        let w = 2.0 / ((1.0 - t * t) * dp * dp);
        nodes[i] = -t;
        nodes[q - 1 - i] = t;
        weights[i] = w;
        weights[q - 1 - i] = w;
    }
    (nodes, weights)
}

/// Nodes/weights on `[-1, 1]` for the weight `(1 - t²)^{k/2}`, exact for
/// polynomials of degree `2q - 1`.
fn polar_rule(q: usize, k: usize) -> (Vec<f64>, Vec<f64>) {
    if k.is_multiple_of(2) {
        let extra = k / 2;
        let (t, w) = gauss_legendre(q + extra);
        let w = t
            .iter()
            .zip(&w)
            .map(|(t, w)| w * (1.0 - t * t).powi(extra as i32))
            .collect();
        (t, w)
    } else {
        // Gauss–Chebyshev of the second kind absorbs (1 - t²)^{1/2}
        let extra = (k - 1) / 2;
        let m = q + extra;
        let mut t = Vec::with_capacity(m);
        let mut w = Vec::with_capacity(m);
        for j in 1..=m {
            let th = j as f64 * PI / (m as f64 + 1.0);
            let tj = th.cos();
            t.push(tj);
            w.push(PI / (m as f64 + 1.0) * th.sin().powi(2) * (1.0 - tj * tj).powi(extra as i32));
        }
        (t, w)
    }
}

/// Product rule on the unit sphere `S^{n-1} ⊂ R^n`: points and weights.
pub fn unit_sphere_rule(n: usize, q: usize) -> (Vec<Vec<f64>>, Vec<f64>) {
    assert!(n >= 2, "sphere rule needs n >= 2");
    let m = 2 * q;
    let mut pts: Vec<Vec<f64>> = (0..m)
        .map(|j| {
            let phi = 2.0 * PI * (j as f64 + 0.5) / m as f64;
            vec![phi.cos(), phi.sin()]
        })
        .collect();
    let mut wts = vec![2.0 * PI / m as f64; m];
    for d in 2..n {
        // lift S^{d-1} ⊂ R^d to S^d ⊂ R^{d+1}
        let (t, w) = polar_rule(q, d - 2);
        let mut new_pts = Vec::with_capacity(pts.len() * t.len());
        let mut new_wts = Vec::with_capacity(pts.len() * t.len());
        for (ti, wi) in t.iter().zip(&w) {
            let s = (1.0 - ti * ti).sqrt();
            for (p, wp) in pts.iter().zip(&wts) {
                let mut x: Vec<f64> = p.iter().map(|v| v * s).collect();
                x.push(*ti);
                new_pts.push(x);
                new_wts.push(wp * wi);
            }
        }
        pts = new_pts;
        wts = new_wts;
    }
    (pts, wts)
}

/// Default polar order: 24 in dimension 3, 10 above (node count grows like `q^{n-1}`).
pub fn default_order(n: usize) -> usize {
    if n <= 3 {
        24
    } else {
        10
    }
}

/// Coordinate sphere `S_ρ` centred at the origin with its quadrature.
#[derive(Clone, Debug)]
pub struct SphereShell {
    pub n: usize,
    pub rho: f64,
    pub nodes: Vec<Vec<f64>>,
    pub weights: Vec<f64>,
    /// Outward Euclidean unit normal `x / ρ` at each node.
    pub normals: Vec<Vec<f64>>,
    /// `ω_{n-1}`.
    pub omega: f64,
}

impl SphereShell {
    pub fn new(n: usize, rho: f64, q: usize) -> Self {
        let (dirs, w) = unit_sphere_rule(n, q);
        let scale = rho.powi(n as i32 - 1);
        Self {
            n,
            rho,
            nodes: dirs
                .iter()
                .map(|d| d.iter().map(|v| v * rho).collect())
                .collect(),
            weights: w.iter().map(|w| w * scale).collect(),
            normals: dirs,
            omega: omega(n),
        }
    }

    pub fn area(&self) -> f64 {
        self.omega * self.rho.powi(self.n as i32 - 1)
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// `Σ w_k F(x_k, ν_k)`, evaluated in parallel and summed in node order.
    pub fn integrate<F>(&self, f: F) -> Result<f64>
    where
        F: Fn(&[f64], &[f64]) -> Result<f64> + Sync,
    {
        use rayon::prelude::*;
        let vals: Vec<f64> = self
            .nodes
            .par_iter()
            .zip(self.normals.par_iter())
            .map(|(x, nu)| f(x, nu))
            .collect::<Result<_>>()?;
        Ok(vals.iter().zip(&self.weights).map(|(v, w)| v * w).sum())
    }

    /// Vector-valued version of [`integrate`](Self::integrate).
    pub fn integrate_vec<F>(&self, dim: usize, f: F) -> Result<Vec<f64>>
    where
        F: Fn(&[f64], &[f64]) -> Result<Vec<f64>> + Sync,
    {
        use rayon::prelude::*;
        let vals: Vec<Vec<f64>> = self
            .nodes
            .par_iter()
            .zip(self.normals.par_iter())
            .map(|(x, nu)| f(x, nu))
            .collect::<Result<_>>()?;
        let mut acc = vec![0.0; dim];
        for (v, w) in vals.iter().zip(&self.weights) {
            for (a, b) in acc.iter_mut().zip(v) {
                *a += b * w;
            }
        }
        Ok(acc)
    }
}

/// Ball `B_R(c)` rule: Gauss–Legendre in the radius (weight `s^{n-1}`)
/// times the sphere rule.
#[derive(Clone, Debug)]
pub struct BallRule {
    pub nodes: Vec<Vec<f64>>,
    pub weights: Vec<f64>,
}

impl BallRule {
    pub fn new(center: &[f64], radius: f64, q_radial: usize, q_angular: usize) -> Self {
        let n = center.len();
        let (dirs, wd) = unit_sphere_rule(n, q_angular);
        let (t, wt) = gauss_legendre(q_radial);
        let mut nodes = Vec::with_capacity(dirs.len() * t.len());
        let mut weights = Vec::with_capacity(dirs.len() * t.len());
        for (ti, wi) in t.iter().zip(&wt) {
            let s = 0.5 * radius * (ti + 1.0);
            let ws = 0.5 * radius * wi * s.powi(n as i32 - 1);
            for (d, w) in dirs.iter().zip(&wd) {
                nodes.push(center.iter().zip(d).map(|(c, v)| c + s * v).collect());
                weights.push(ws * w);
            }
        }
        Self { nodes, weights }
    }

    pub fn integrate<F>(&self, f: F) -> Result<f64>
    where
        F: Fn(&[f64]) -> Result<f64> + Sync,
    {
        use rayon::prelude::*;
        let vals: Vec<f64> = self.nodes.par_iter().map(|x| f(x)).collect::<Result<_>>()?;
        Ok(vals.iter().zip(&self.weights).map(|(v, w)| v * w).sum())
    }
}

const PRIMES: [u64; 12] = [2, 3, 5, 7, 11, 13, 17, 19, 23, 29, 31, 37];

/// Van der Corput radical inverse of `i` in `base`.
pub fn radical_inverse(mut i: u64, base: u64) -> f64 {
    let mut inv = 1.0 / base as f64;
    let mut f = inv;
    let mut r = 0.0;
    while i > 0 {
        r += f * (i % base) as f64;
        i /= base;
        f *= inv;
    }
    inv = r;
    inv
}

fn halton_point(index: u64, dims: usize) -> Vec<f64> {
    (0..dims).map(|d| radical_inverse(index, PRIMES[d])).collect()
}

/// Deterministic quasi-uniform unit directions in `R^n` (Halton points of the
/// cube, kept inside the unit ball and normalised). `skip` offsets the sequence.
pub fn halton_directions(n: usize, count: usize, skip: u64) -> Vec<Vec<f64>> {
    let mut out = Vec::with_capacity(count);
    let mut i = skip + 1;
    while out.len() < count {
        let h = halton_point(i, n);
        i += 1;
        let v: Vec<f64> = h.iter().map(|u| 2.0 * u - 1.0).collect();
        let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        if norm > 0.05 && norm <= 1.0 {
            out.push(v.iter().map(|a| a / norm).collect());
        }
    }
    out
}

/// Probe grid on the annulus `r_min <= |x| <= r_max`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeGrid {
    pub r_min: f64,
    pub r_max: f64,
    pub count: usize,
    #[serde(default)]
    pub seed: u64,
}

impl ProbeGrid {
    pub fn annulus(r_min: f64, r_max: f64, count: usize) -> Self {
        Self {
            r_min,
            r_max,
            count,
            seed: 0,
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    /// Parses `annulus:rmin:rmax:count`.
    pub fn parse(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.split(':').collect();
        let bad = || Error::Config(format!("grid `{s}` is not annulus:rmin:rmax:count"));
        if parts.len() != 4 || parts[0] != "annulus" {
            return Err(bad());
        }
        let r_min: f64 = parts[1].parse().map_err(|_| bad())?;
        let r_max: f64 = parts[2].parse().map_err(|_| bad())?;
        let count: usize = parts[3].parse().map_err(|_| bad())?;
        if !(r_min > 0.0 && r_max >= r_min && count > 0) {
            return Err(bad());
        }
        Ok(Self::annulus(r_min, r_max, count))
    }

    pub fn points(&self, n: usize) -> Vec<Vec<f64>> {
        let skip = self.seed.wrapping_mul(7919);
        let dirs = halton_directions(n, self.count, skip);
        dirs.into_iter()
            .enumerate()
            .map(|(i, d)| {
                let u = radical_inverse(i as u64 + 1 + skip, PRIMES[n.min(PRIMES.len() - 1)]);
                let r = self.r_min + (self.r_max - self.r_min) * u;
                d.into_iter().map(|v| v * r).collect()
            })
            .collect()
    }
}
