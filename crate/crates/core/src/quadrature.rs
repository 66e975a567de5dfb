//! Quadrature rules: Gauss–Hermite for Gaussian expectations, adaptive
//! Gauss–Kronrod for the exact-posterior oracle, and fixed composite grids.

use std::cell::RefCell;
use std::collections::BinaryHeap;

use nalgebra::{DMatrix, SymmetricEigen};

use crate::error::{Error, Result};

/// Gauss–Hermite rule for the standard normal weight: `E[f(Z)] ≈ Σ w_i f(x_i)`.
///
/// Nodes come from the Golub–Welsch eigenproblem, are polished by Newton
/// iteration on the probabilists' Hermite polynomial, and the weights are then
/// recomputed from the closed form `n! / (n He_{n-1}(x))^2`.
pub fn gauss_hermite(n: usize) -> (Vec<f64>, Vec<f64>) {
    assert!(n >= 1, "Gauss-Hermite rule needs at least one node");
    if n == 1 {
        return (vec![0.0], vec![1.0]);
    }
    let mut jacobi = DMatrix::<f64>::zeros(n, n);
    for k in 1..n {
        let b = (k as f64).sqrt();
        jacobi[(k - 1, k)] = b;
        jacobi[(k, k - 1)] = b;
    }
    let eig = SymmetricEigen::new(jacobi);
    let mut nodes: Vec<f64> = eig.eigenvalues.iter().copied().collect();
    nodes.sort_by(|a, b| a.partial_cmp(b).unwrap());

    // He_n and He_{n-1} by the three-term recurrence.
    let hermite = |x: f64| -> (f64, f64) {
        let mut prev = 1.0;
        let mut cur = x;
        for k in 1..n {
            let next = x * cur - k as f64 * prev;
            prev = cur;
            cur = next;
        }
        (cur, prev)
    };
    for x in nodes.iter_mut() {
        for _ in 0..3 {
            let (hn, hn1) = hermite(*x);
            // He_n' = n He_{n-1}
            let step = hn / (n as f64 * hn1);
            *x -= step;
            if step.abs() < 1e-16 * x.abs().max(1.0) {
                break;
            }
        }
    }
    let log_fact: f64 = (1..=n).map(|k| (k as f64).ln()).sum();
    let mut weights: Vec<f64> = nodes
        .iter()
        .map(|&x| {
            let (_, hn1) = hermite(x);
            (log_fact - 2.0 * (n as f64).ln() - 2.0 * hn1.abs().ln()).exp()
        })
        .collect();
    let total: f64 = weights.iter().sum();
    for w in weights.iter_mut() {
        *w /= total;
    }
    (nodes, weights)
}

/// Tensor-product Gauss–Hermite rule in `dim` dimensions, flattened row-major.
pub fn gauss_hermite_tensor(dim: usize, n: usize) -> (Vec<Vec<f64>>, Vec<f64>) {
    let (x, w) = gauss_hermite(n);
    let mut nodes = vec![Vec::with_capacity(dim)];
    let mut weights = vec![1.0];
    for _ in 0..dim {
        let mut next_nodes = Vec::with_capacity(nodes.len() * n);
        let mut next_weights = Vec::with_capacity(nodes.len() * n);
        for (node, weight) in nodes.iter().zip(&weights) {
            for (xi, wi) in x.iter().zip(&w) {
                let mut p = node.clone();
                p.push(*xi);
                next_nodes.push(p);
                next_weights.push(weight * wi);
            }
        }
        nodes = next_nodes;
        weights = next_weights;
    }
    (nodes, weights)
}

// QUADPACK qk15 abscissae and weights.
#[allow(clippy::excessive_precision)]
const XGK: [f64; 8] = [
    0.991_455_371_120_812_639_206_854_697_526_329,
    0.949_107_912_342_758_524_526_189_684_047_851,
    0.864_864_423_359_769_072_789_712_788_640_926,
    0.741_531_185_599_394_439_863_864_773_280_788,
    0.586_087_235_467_691_130_294_144_845_693_013,
    0.405_845_151_377_397_166_906_606_412_076_961,
    0.207_784_955_007_898_467_600_689_403_773_245,
    0.000_000_000_000_000_000_000_000_000_000_000,
];
#[allow(clippy::excessive_precision)]
const WGK: [f64; 8] = [
    0.022_935_322_010_529_224_963_732_008_058_970,
    0.063_092_092_629_978_553_290_700_663_189_204,
    0.104_790_010_322_250_183_839_876_322_541_518,
    0.140_653_259_715_525_918_745_189_590_510_238,
    0.169_004_726_639_267_902_826_583_426_598_550,
    0.190_350_578_064_785_409_913_256_402_421_014,
    0.204_432_940_075_298_892_414_161_999_234_649,
    0.209_482_141_084_727_828_012_999_174_891_714,
];
#[allow(clippy::excessive_precision)]
const WG: [f64; 4] = [
    0.129_484_966_168_869_693_270_611_432_679_082,
    0.279_705_391_489_276_667_901_467_771_423_780,
    0.381_830_050_505_118_944_950_369_775_488_975,
    0.417_959_183_673_469_387_755_102_040_816_327,
];

/// One 15-point Kronrod panel: (kronrod estimate, |kronrod − gauss|).
fn gk15<F: FnMut(f64) -> f64>(f: &mut F, a: f64, b: f64) -> (f64, f64) {
    let center = 0.5 * (a + b);
    let half = 0.5 * (b - a);
    let fc = f(center);
    let mut resk = fc * WGK[7];
    let mut resg = fc * WG[3];
    for j in 0..7 {
        let dx = half * XGK[j];
        let f1 = f(center - dx);
        let f2 = f(center + dx);
        resk += WGK[j] * (f1 + f2);
        if j % 2 == 1 {
            resg += WG[j / 2] * (f1 + f2);
        }
    }
    (resk * half, ((resk - resg) * half).abs())
}

#[derive(Debug, Clone, Copy)]
pub struct AdaptiveOptions {
    pub abs_tol: f64,
    pub rel_tol: f64,
    pub max_panels: usize,
    /// Number of equal panels the interval is split into before adapting.
    pub initial_panels: usize,
}

impl Default for AdaptiveOptions {
    fn default() -> Self {
        Self { abs_tol: 1e-14, rel_tol: 1e-13, max_panels: 4000, initial_panels: 8 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Integral {
    pub value: f64,
    pub error: f64,
    pub panels: usize,
}

struct Panel {
    a: f64,
    b: f64,
    value: f64,
    error: f64,
}

impl PartialEq for Panel {
    fn eq(&self, other: &Self) -> bool {
        self.error == other.error
    }
}
impl Eq for Panel {}
impl PartialOrd for Panel {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Panel {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        self.error.total_cmp(&other.error)
    }
}

/// Adaptive Gauss–Kronrod (G7/K15) integration of `f` over `[a, b]`,
/// bisecting the panel with the largest error estimate first.
pub fn adaptive_gk<F: FnMut(f64) -> f64>(mut f: F, a: f64, b: f64, opts: &AdaptiveOptions) -> Result<Integral> {
    if !(a.is_finite() && b.is_finite()) || b < a {
        return Err(Error::Validation(format!("bad integration interval [{a}, {b}]")));
    }
    if a == b {
        return Ok(Integral { value: 0.0, error: 0.0, panels: 0 });
    }
    let n0 = opts.initial_panels.max(1);
    let width = (b - a) / n0 as f64;
    let mut heap = BinaryHeap::with_capacity(opts.max_panels + n0);
    let mut total = 0.0;
    let mut total_err = 0.0;
    for i in 0..n0 {
        let lo = a + width * i as f64;
        let hi = if i + 1 == n0 { b } else { lo + width };
        let (value, error) = gk15(&mut f, lo, hi);
        total += value;
        total_err += error;
        heap.push(Panel { a: lo, b: hi, value, error });
    }
    while total_err > opts.abs_tol.max(opts.rel_tol * total.abs()) {
        if !total.is_finite() {
            return Err(Error::Numerical(format!("non-finite integrand on [{a}, {b}]")));
        }
        if heap.len() >= opts.max_panels {
            return Err(Error::Accuracy(format!(
                "{} panels on [{a}, {b}] left error {total_err:e} (value {total:e})",
                heap.len()
            )));
        }
        let worst = heap.pop().expect("heap is never empty");
        let mid = 0.5 * (worst.a + worst.b);
        if mid <= worst.a || mid >= worst.b {
            // Panel can no longer be split in floating point.
            heap.push(worst);
            break;
        }
        let (v1, e1) = gk15(&mut f, worst.a, mid);
        let (v2, e2) = gk15(&mut f, mid, worst.b);
        total += v1 + v2 - worst.value;
        total_err += e1 + e2 - worst.error;
        heap.push(Panel { a: worst.a, b: mid, value: v1, error: e1 });
        heap.push(Panel { a: mid, b: worst.b, value: v2, error: e2 });
    }
    // Re-sum from panels to drop the running-sum rounding drift.
    let panels: Vec<Panel> = heap.into_vec();
    let value = panels.iter().map(|p| p.value).sum::<f64>();
    let error = panels.iter().map(|p| p.error).sum::<f64>();
    if !value.is_finite() {
        return Err(Error::Numerical(format!("non-finite integral on [{a}, {b}]")));
    }
    Ok(Integral { value, error, panels: panels.len() })
}

/// Result of integrating over the real line by growing a finite window.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LineIntegral {
    pub value: f64,
    pub lower: f64,
    pub upper: f64,
    /// Magnitude of the last tail chunk on either side, an upper bound on the
    /// neglected mass when the integrand is monotone in the tails.
    pub tail_bound: f64,
}

/// Integrate `f` over R: start on `center ± half_width`, then append chunks of
/// the same width on either side until each new chunk contributes less than
/// `tail_tol`.
pub fn integrate_line<F: FnMut(f64) -> f64>(
    mut f: F,
    center: f64,
    half_width: f64,
    tail_tol: f64,
    opts: &AdaptiveOptions,
) -> Result<LineIntegral> {
    const MAX_EXTENSIONS: usize = 60;
    let mut lower = center - half_width;
    let mut upper = center + half_width;
    let mut value = adaptive_gk(&mut f, lower, upper, opts)?.value;
    // Tail chunks are small and smooth; let adaptivity add panels only where needed.
    let tail_opts = AdaptiveOptions { initial_panels: 1, ..*opts };
    let mut left_tail = f64::INFINITY;
    let mut right_tail = f64::INFINITY;
    for _ in 0..MAX_EXTENSIONS {
        if left_tail >= tail_tol {
            let chunk = adaptive_gk(&mut f, lower - half_width, lower, &tail_opts)?.value;
            value += chunk;
            lower -= half_width;
            left_tail = chunk.abs();
        }
        if right_tail >= tail_tol {
            let chunk = adaptive_gk(&mut f, upper, upper + half_width, &tail_opts)?.value;
            value += chunk;
            upper += half_width;
            right_tail = chunk.abs();
        }
        if left_tail < tail_tol && right_tail < tail_tol {
            return Ok(LineIntegral { value, lower, upper, tail_bound: left_tail.max(right_tail) });
        }
    }
    Err(Error::Accuracy(format!("tail contribution above {tail_tol:e} after expanding to [{lower}, {upper}]")))
}

/// Iterated adaptive integration over a rectangle.
pub fn adaptive_gk_2d<F: FnMut(f64, f64) -> f64>(
    f: F,
    x: (f64, f64),
    y: (f64, f64),
    opts: &AdaptiveOptions,
) -> Result<Integral> {
    let f = RefCell::new(f);
    let inner_err: RefCell<Option<Error>> = RefCell::new(None);
    let outer = adaptive_gk(
        |xv| {
            if inner_err.borrow().is_some() {
                return 0.0;
            }
            match adaptive_gk(|yv| (f.borrow_mut())(xv, yv), y.0, y.1, opts) {
                Ok(r) => r.value,
                Err(e) => {
                    *inner_err.borrow_mut() = Some(e);
                    0.0
                }
            }
        },
        x.0,
        x.1,
        opts,
    );
    if let Some(e) = inner_err.into_inner() {
        return Err(e);
    }
    outer
}

/// A fixed set of quadrature nodes and weights over an interval or rectangle.
#[derive(Debug, Clone, PartialEq)]
pub struct QuadratureGrid {
    pub nodes: Vec<Vec<f64>>,
    pub weights: Vec<f64>,
    /// Per-dimension `(lower, upper)` bounds.
    pub domain: Vec<(f64, f64)>,
    pub tail_mass_bound: f64,
}

impl QuadratureGrid {
    /// Composite 15-point Kronrod rule on `panels` equal panels of `[a, b]`.
    pub fn composite_kronrod(a: f64, b: f64, panels: usize) -> Result<Self> {
        if panels == 0 || !(b > a) {
            return Err(Error::Validation("composite grid needs b > a and panels > 0".into()));
        }
        let width = (b - a) / panels as f64;
        let mut nodes = Vec::with_capacity(15 * panels);
        let mut weights = Vec::with_capacity(15 * panels);
        for p in 0..panels {
            let lo = a + width * p as f64;
            let center = lo + 0.5 * width;
            let half = 0.5 * width;
            for j in 0..7 {
                nodes.push(vec![center - half * XGK[j]]);
                weights.push(WGK[j] * half);
                nodes.push(vec![center + half * XGK[j]]);
                weights.push(WGK[j] * half);
            }
            nodes.push(vec![center]);
            weights.push(WGK[7] * half);
        }
        Ok(Self { nodes, weights, domain: vec![(a, b)], tail_mass_bound: 0.0 })
    }

    /// Tensor product of two 1D grids.
    pub fn tensor(x: &QuadratureGrid, y: &QuadratureGrid) -> Result<Self> {
        if x.domain.len() != 1 || y.domain.len() != 1 {
            return Err(Error::Validation("tensor product expects two 1D grids".into()));
        }
        let mut nodes = Vec::with_capacity(x.nodes.len() * y.nodes.len());
        let mut weights = Vec::with_capacity(nodes.capacity());
        for (xn, xw) in x.nodes.iter().zip(&x.weights) {
            for (yn, yw) in y.nodes.iter().zip(&y.weights) {
                nodes.push(vec![xn[0], yn[0]]);
                weights.push(xw * yw);
            }
        }
        Ok(Self {
            nodes,
            weights,
            domain: vec![x.domain[0], y.domain[0]],
            tail_mass_bound: x.tail_mass_bound + y.tail_mass_bound,
        })
    }

    pub fn dim(&self) -> usize {
        self.domain.len()
    }

    pub fn measure(&self) -> f64 {
        self.domain.iter().map(|(a, b)| b - a).product()
    }

    pub fn integrate<F: FnMut(&[f64]) -> f64>(&self, mut f: F) -> f64 {
        self.nodes.iter().zip(&self.weights).map(|(x, w)| w * f(x)).sum()
    }
}
