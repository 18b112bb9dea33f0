//! Exact desk-scale oracle over tiny discrete image spaces.
//!
//! Images here are `rows x cols` grids over a small alphabet, fully
//! enumerated (at most a few tens of thousands of states). On such spaces
//! the patch-marginal machinery can be checked exactly: extracting window
//! marginals, fitting the maximum-entropy distribution matching them by
//! iterative proportional scaling, and comparing its support against the
//! set of images whose every window is normal.
//!
//! Windows are `w x w` squares clipped to the image extent, so a `1 x N`
//! space with `w = 2` uses `1 x 2` windows and `w = rows = cols` makes the
//! whole image a single window.

use std::fmt::Write as _;
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Geometry of a fully enumerable image space.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DiscreteSpace {
    pub rows: usize,
    pub cols: usize,
    pub alphabet: usize,
}

impl DiscreteSpace {
    pub fn new(rows: usize, cols: usize, alphabet: usize) -> Result<Self> {
        if rows == 0 || cols == 0 || alphabet < 2 {
            return Err(Error::invalid("space needs positive dims and alphabet >= 2"));
        }
        let states = (alphabet as f64).powi((rows * cols) as i32);
        if states > 200_000.0 {
            return Err(Error::invalid(format!(
                "space of {states} states is beyond the enumeration oracle"
            )));
        }
        Ok(Self { rows, cols, alphabet })
    }

    pub fn n_pixels(&self) -> usize {
        self.rows * self.cols
    }

    pub fn n_states(&self) -> usize {
        self.alphabet.pow(self.n_pixels() as u32)
    }

    /// Pixel values of a state, row-major. The first pixel is the most
    /// significant digit.
    pub fn decode(&self, mut state: usize) -> Vec<usize> {
        let n = self.n_pixels();
        let mut px = vec![0usize; n];
        for i in (0..n).rev() {
            px[i] = state % self.alphabet;
            state /= self.alphabet;
        }
        px
    }

    pub fn encode(&self, pixels: &[usize]) -> usize {
        pixels.iter().fold(0, |acc, &p| acc * self.alphabet + p)
    }

    /// Stride-1 `w x w` windows clipped to the image extent; each window is
    /// the row-major list of its flat pixel indices.
    pub fn windows(&self, w: usize) -> Result<Vec<Vec<usize>>> {
        if w == 0 || (w > self.rows && w > self.cols) {
            return Err(Error::invalid(format!("window side {w} out of range")));
        }
        let wh = w.min(self.rows);
        let ww = w.min(self.cols);
        let mut out = Vec::new();
        for top in 0..=(self.rows - wh) {
            for left in 0..=(self.cols - ww) {
                let mut cells = Vec::with_capacity(wh * ww);
                for i in 0..wh {
                    for j in 0..ww {
                        cells.push((top + i) * self.cols + (left + j));
                    }
                }
                out.push(cells);
            }
        }
        Ok(out)
    }
}

/// An explicit probability table over every image in a [`DiscreteSpace`].
#[derive(Debug, Clone, PartialEq)]
pub struct DiscreteImageDistribution {
    pub space: DiscreteSpace,
    pub probs: Vec<f64>,
}

const SUM_TOL: f64 = 1e-12;
/// Probability threshold below which a fitted state counts as unsupported.
pub const SUPPORT_EPS: f64 = 1e-9;

impl DiscreteImageDistribution {
    pub fn new(space: DiscreteSpace, probs: Vec<f64>) -> Result<Self> {
        if probs.len() != space.n_states() {
            return Err(Error::invalid(format!(
                "expected {} probabilities, got {}",
                space.n_states(),
                probs.len()
            )));
        }
        if probs.iter().any(|&p| p < 0.0 || !p.is_finite()) {
            return Err(Error::invalid("probabilities must be finite and non-negative"));
        }
        let sum: f64 = probs.iter().sum();
        if (sum - 1.0).abs() > SUM_TOL {
            return Err(Error::invalid(format!("probabilities sum to {sum}, not 1")));
        }
        Ok(Self { space, probs })
    }

    /// Uniform distribution over the space.
    pub fn uniform(space: DiscreteSpace) -> Self {
        let n = space.n_states();
        Self { space, probs: vec![1.0 / n as f64; n] }
    }

    /// Shannon entropy in nats.
    pub fn entropy(&self) -> f64 {
        -self
            .probs
            .iter()
            .filter(|&&p| p > 0.0)
            .map(|&p| p * p.ln())
            .sum::<f64>()
    }

    pub fn entropy_bits(&self) -> f64 {
        self.entropy() / std::f64::consts::LN_2
    }

    /// States with probability above [`SUPPORT_EPS`].
    pub fn support(&self) -> Vec<usize> {
        self.probs
            .iter()
            .enumerate()
            .filter(|(_, &p)| p > SUPPORT_EPS)
            .map(|(i, _)| i)
            .collect()
    }

    /// One line per state: pixel digits then the probability.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "# rows={} cols={} alphabet={}",
            self.space.rows, self.space.cols, self.space.alphabet
        );
        for (s, &p) in self.probs.iter().enumerate() {
            let digits: String = self
                .space
                .decode(s)
                .iter()
                .map(|d| char::from_digit(*d as u32, 10).unwrap())
                .collect();
            let _ = writeln!(out, "{digits} {p}");
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header = lines
            .next()
            .ok_or_else(|| Error::Format("empty distribution table".into()))?;
        let mut rows = 0;
        let mut cols = 0;
        let mut alphabet = 0;
        for tok in header.trim_start_matches('#').split_whitespace() {
            let (k, v) = tok
                .split_once('=')
                .ok_or_else(|| Error::Format(format!("bad header token {tok}")))?;
            let v: usize = v
                .parse()
                .map_err(|_| Error::Format(format!("bad header value {tok}")))?;
            match k {
                "rows" => rows = v,
                "cols" => cols = v,
                "alphabet" => alphabet = v,
                _ => return Err(Error::Format(format!("unknown header key {k}"))),
            }
        }
        let space = DiscreteSpace::new(rows, cols, alphabet)?;
        let mut probs = vec![0.0; space.n_states()];
        for line in lines {
            let (digits, p) = line
                .trim()
                .split_once(' ')
                .ok_or_else(|| Error::Format(format!("bad line: {line}")))?;
            let pixels: Vec<usize> = digits
                .chars()
                .map(|c| {
                    c.to_digit(10)
                        .map(|d| d as usize)
                        .ok_or_else(|| Error::Format(format!("bad digit in {digits}")))
                })
                .collect::<Result<_>>()?;
            if pixels.len() != space.n_pixels() {
                return Err(Error::Format(format!("state {digits} has wrong pixel count")));
            }
            let p: f64 = p
                .parse()
                .map_err(|_| Error::Format(format!("bad probability in line: {line}")))?;
            probs[space.encode(&pixels)] = p;
        }
        Self::new(space, probs)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_text(&std::fs::read_to_string(path)?)
    }
}

/// Per-window marginal tables extracted from a distribution.
#[derive(Debug, Clone)]
pub struct PatchMarginals {
    pub space: DiscreteSpace,
    pub window_side: usize,
    pub windows: Vec<Vec<usize>>,
    /// One table per window, indexed by the window-content code.
    pub tables: Vec<Vec<f64>>,
}

impl PatchMarginals {
    /// Content code of window `w_idx` in `pixels`.
    pub fn content_code(&self, w_idx: usize, pixels: &[usize]) -> usize {
        self.windows[w_idx]
            .iter()
            .fold(0, |acc, &cell| acc * self.space.alphabet + pixels[cell])
    }

    /// Reject tables that are not probability tables (the fit presumes
    /// marginals extracted from a real distribution).
    pub fn validate(&self) -> Result<()> {
        for (i, t) in self.tables.iter().enumerate() {
            if t.iter().any(|&p| p < 0.0 || !p.is_finite()) {
                return Err(Error::invalid(format!("window {i} marginal has bad entries")));
            }
            let sum: f64 = t.iter().sum();
            if (sum - 1.0).abs() > 1e-9 {
                return Err(Error::invalid(format!(
                    "window {i} marginal sums to {sum}; degenerate or inconsistent"
                )));
            }
        }
        Ok(())
    }
}

/// Marginal table of every `w x w` window of `p`.
pub fn extract_patch_marginals(p: &DiscreteImageDistribution, w: usize) -> Result<PatchMarginals> {
    let windows = p.space.windows(w)?;
    let table_size = p.space.alphabet.pow(windows[0].len() as u32);
    let mut tables = vec![vec![0.0; table_size]; windows.len()];
    for (state, &prob) in p.probs.iter().enumerate() {
        if prob == 0.0 {
            continue;
        }
        let pixels = p.space.decode(state);
        for (wi, cells) in windows.iter().enumerate() {
            let code = cells
                .iter()
                .fold(0, |acc, &cell| acc * p.space.alphabet + pixels[cell]);
            tables[wi][code] += prob;
        }
    }
    Ok(PatchMarginals { space: p.space, window_side: w, windows, tables })
}

/// Images whose every `w x w` window content has positive marginal under `p`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SupportSet {
    pub members: Vec<usize>,
}

pub fn support_set(p: &DiscreteImageDistribution, w: usize) -> Result<SupportSet> {
    let marginals = extract_patch_marginals(p, w)?;
    let mut members = Vec::new();
    'state: for state in 0..p.space.n_states() {
        let pixels = p.space.decode(state);
        for wi in 0..marginals.windows.len() {
            let code = marginals.content_code(wi, &pixels);
            if marginals.tables[wi][code] <= 0.0 {
                continue 'state;
            }
        }
        members.push(state);
    }
    Ok(SupportSet { members })
}

/// Convergence target for the iterative proportional fit: max deviation of
/// any marginal entry.
pub const FIT_TOL: f64 = 1e-10;
const FIT_MAX_SWEEPS: usize = 10_000;

/// Fit the maximum-entropy distribution matching all window marginals by
/// iterative proportional scaling, starting from uniform.
pub fn fit_max_entropy(marginals: &PatchMarginals) -> Result<DiscreteImageDistribution> {
    marginals.validate()?;
    let space = marginals.space;
    let n = space.n_states();
    let n_windows = marginals.windows.len();

    // Precompute each state's content code per window.
    let codes: Vec<Vec<u32>> = (0..n)
        .map(|s| {
            let pixels = space.decode(s);
            (0..n_windows)
                .map(|wi| marginals.content_code(wi, &pixels) as u32)
                .collect()
        })
        .collect();

    let mut q = vec![1.0 / n as f64; n];
    // States containing a zero-marginal window content have probability zero
    // in every feasible distribution.
    for (s, qc) in q.iter_mut().enumerate() {
        for wi in 0..n_windows {
            if marginals.tables[wi][codes[s][wi] as usize] == 0.0 {
                *qc = 0.0;
                break;
            }
        }
    }
    let z: f64 = q.iter().sum();
    if z == 0.0 {
        return Err(Error::invalid("marginals admit no feasible distribution"));
    }
    q.iter_mut().for_each(|v| *v /= z);

    let mut residual = f64::INFINITY;
    for _sweep in 0..FIT_MAX_SWEEPS {
        for wi in 0..n_windows {
            let table = &marginals.tables[wi];
            let mut cur = vec![0.0; table.len()];
            for (s, &qs) in q.iter().enumerate() {
                cur[codes[s][wi] as usize] += qs;
            }
            let ratio: Vec<f64> = table
                .iter()
                .zip(cur.iter())
                .map(|(&p, &c)| if c > 0.0 { p / c } else { 0.0 })
                .collect();
            for (s, qs) in q.iter_mut().enumerate() {
                *qs *= ratio[codes[s][wi] as usize];
            }
        }
        // measure the worst marginal deviation
        residual = 0.0;
        for wi in 0..n_windows {
            let table = &marginals.tables[wi];
            let mut cur = vec![0.0; table.len()];
            for (s, &qs) in q.iter().enumerate() {
                cur[codes[s][wi] as usize] += qs;
            }
            for (a, b) in table.iter().zip(cur.iter()) {
                residual = residual.max((a - b).abs());
            }
        }
        if residual < FIT_TOL {
            return DiscreteImageDistribution::new(space, q);
        }
    }
    Err(Error::Convergence { sweeps: FIT_MAX_SWEEPS, residual })
}

/// Max total-variation distance between the marginals of `q` and the target
/// tables, over all windows.
pub fn marginal_tv_residual(q: &DiscreteImageDistribution, marginals: &PatchMarginals) -> f64 {
    let fitted = extract_patch_marginals(q, marginals.window_side).unwrap();
    let mut worst: f64 = 0.0;
    for (t, f) in marginals.tables.iter().zip(fitted.tables.iter()) {
        let tv = 0.5 * t.iter().zip(f.iter()).map(|(a, b)| (a - b).abs()).sum::<f64>();
        worst = worst.max(tv);
    }
    worst
}

/// For a window decomposition that partitions the pixels, a factored
/// distribution satisfies the swap identity
/// `q(x) q(y) = q(x <- y on c) q(y <- x on c)` for every window `c` and state
/// pair. Returns the worst absolute violation, or `None` when the windows
/// overlap (the identity does not apply).
pub fn factorization_swap_residual(q: &DiscreteImageDistribution, w: usize) -> Result<Option<f64>> {
    let windows = q.space.windows(w)?;
    let mut seen = vec![false; q.space.n_pixels()];
    for cells in &windows {
        for &c in cells {
            if seen[c] {
                return Ok(None); // overlapping decomposition
            }
            seen[c] = true;
        }
    }
    if seen.iter().any(|&s| !s) {
        return Ok(None); // windows do not cover every pixel
    }
    let n = q.space.n_states();
    let mut worst: f64 = 0.0;
    for x in 0..n {
        let px = q.space.decode(x);
        for y in 0..n {
            let py = q.space.decode(y);
            for cells in &windows {
                let mut xy = px.clone();
                let mut yx = py.clone();
                for &cell in cells {
                    xy[cell] = py[cell];
                    yx[cell] = px[cell];
                }
                let lhs = q.probs[x] * q.probs[y];
                let rhs = q.probs[q.space.encode(&xy)] * q.probs[q.space.encode(&yx)];
                worst = worst.max((lhs - rhs).abs());
            }
        }
    }
    Ok(Some(worst))
}

/// Random feasible perturbations of a fitted distribution: directions in the
/// null space of the marginal constraints, restricted to the support.
pub struct FeasiblePerturber {
    support: Vec<usize>,
    /// Orthonormal basis of the constraint row space over support states.
    basis: Vec<Vec<f64>>,
}

impl FeasiblePerturber {
    pub fn new(q: &DiscreteImageDistribution, marginals: &PatchMarginals) -> Self {
        let support = q.support();
        let n_sup = support.len();
        let mut rows: Vec<Vec<f64>> = Vec::new();
        for (wi, cells) in marginals.windows.iter().enumerate() {
            let _ = cells;
            let table_len = marginals.tables[wi].len();
            let mut by_code: Vec<Vec<usize>> = vec![Vec::new(); table_len];
            for (si, &state) in support.iter().enumerate() {
                let pixels = q.space.decode(state);
                by_code[marginals.content_code(wi, &pixels)].push(si);
            }
            for members in by_code.iter().filter(|m| !m.is_empty()) {
                let mut row = vec![0.0; n_sup];
                for &si in members {
                    row[si] = 1.0;
                }
                rows.push(row);
            }
        }
        // modified Gram-Schmidt, dropping dependent rows
        let mut basis: Vec<Vec<f64>> = Vec::new();
        for mut row in rows {
            for b in &basis {
                let dot: f64 = row.iter().zip(b.iter()).map(|(a, c)| a * c).sum();
                for (r, c) in row.iter_mut().zip(b.iter()) {
                    *r -= dot * c;
                }
            }
            let norm: f64 = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm > 1e-10 {
                row.iter_mut().for_each(|v| *v /= norm);
                basis.push(row);
            }
        }
        Self { support, basis }
    }

    /// Dimension of the feasible directions at the fitted point.
    pub fn null_dim(&self) -> usize {
        self.support.len().saturating_sub(self.basis.len())
    }

    /// A random feasible distribution `q + t d`, or `None` when the feasible
    /// set is a single point.
    pub fn perturb(
        &self,
        q: &DiscreteImageDistribution,
        rng: &mut ChaCha8Rng,
    ) -> Option<DiscreteImageDistribution> {
        if self.null_dim() == 0 {
            return None;
        }
        let n_sup = self.support.len();
        for _attempt in 0..16 {
            let mut d: Vec<f64> = (0..n_sup).map(|_| rng.random_range(-1.0..1.0)).collect();
            // project onto the null space (two passes for numerical hygiene)
            for _ in 0..2 {
                for b in &self.basis {
                    let dot: f64 = d.iter().zip(b.iter()).map(|(a, c)| a * c).sum();
                    for (x, c) in d.iter_mut().zip(b.iter()) {
                        *x -= dot * c;
                    }
                }
            }
            let norm: f64 = d.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm < 1e-9 {
                continue;
            }
            d.iter_mut().for_each(|v| *v /= norm);
            // largest step keeping every support probability non-negative
            let mut t_max = f64::INFINITY;
            for (si, &state) in self.support.iter().enumerate() {
                if d[si] < 0.0 {
                    t_max = t_max.min(-q.probs[state] / d[si]);
                }
            }
            if !t_max.is_finite() || t_max <= 0.0 {
                continue;
            }
            let t = t_max * rng.random_range(0.1..0.9);
            let mut probs = q.probs.clone();
            for (si, &state) in self.support.iter().enumerate() {
                probs[state] = (probs[state] + t * d[si]).max(0.0);
            }
            let z: f64 = probs.iter().sum();
            probs.iter_mut().for_each(|v| *v /= z);
            return Some(DiscreteImageDistribution { space: q.space, probs });
        }
        None
    }
}

/// A random distribution over `space` with roughly `support_fraction` of the
/// states supported (at least two), probabilities bounded away from zero.
pub fn random_distribution(
    space: DiscreteSpace,
    support_fraction: f64,
    rng: &mut ChaCha8Rng,
) -> DiscreteImageDistribution {
    let n = space.n_states();
    let k = ((n as f64 * support_fraction).round() as usize).clamp(2, n);
    let chosen = rand::seq::index::sample(rng, n, k);
    let mut probs = vec![0.0; n];
    let mut sum = 0.0;
    for idx in chosen.iter() {
        let v = rng.random_range(0.05..1.0);
        probs[idx] = v;
        sum += v;
    }
    probs.iter_mut().for_each(|v| *v /= sum);
    DiscreteImageDistribution { space, probs }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::RandomSource;

    fn binary_1x2() -> DiscreteSpace {
        DiscreteSpace::new(1, 2, 2).unwrap()
    }

    /// p supported on {(0,1), (1,0)} with equal mass.
    fn anti_diagonal() -> DiscreteImageDistribution {
        let space = binary_1x2();
        let mut probs = vec![0.0; 4];
        probs[space.encode(&[0, 1])] = 0.5;
        probs[space.encode(&[1, 0])] = 0.5;
        DiscreteImageDistribution::new(space, probs).unwrap()
    }

    #[test]
    fn marginals_of_anti_diagonal_are_half_half() {
        let p = anti_diagonal();
        let m = extract_patch_marginals(&p, 1).unwrap();
        assert_eq!(m.windows.len(), 2);
        for t in &m.tables {
            assert!((t[0] - 0.5).abs() < 1e-15);
            assert!((t[1] - 0.5).abs() < 1e-15);
        }
    }

    #[test]
    fn marginals_of_point_mass_are_point_masses() {
        let space = DiscreteSpace::new(2, 2, 2).unwrap();
        let mut probs = vec![0.0; 16];
        probs[space.encode(&[1, 0, 0, 1])] = 1.0;
        let p = DiscreteImageDistribution::new(space, probs).unwrap();
        let m = extract_patch_marginals(&p, 1).unwrap();
        for t in &m.tables {
            let ones = t.iter().filter(|&&v| v == 1.0).count();
            let zeros = t.iter().filter(|&&v| v == 0.0).count();
            assert_eq!((ones, zeros), (1, t.len() - 1));
        }
    }

    #[test]
    fn marginals_of_uniform_are_uniform() {
        let space = DiscreteSpace::new(1, 3, 3).unwrap();
        let p = DiscreteImageDistribution::uniform(space);
        let m = extract_patch_marginals(&p, 2).unwrap();
        for t in &m.tables {
            for &v in t {
                assert!((v - 1.0 / t.len() as f64).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn fit_independent_pixels_gives_uniform() {
        let p = anti_diagonal();
        let m = extract_patch_marginals(&p, 1).unwrap();
        let q = fit_max_entropy(&m).unwrap();
        for &v in &q.probs {
            assert!((v - 0.25).abs() < 1e-9);
        }
        assert!((q.entropy_bits() - 2.0).abs() < 1e-8);
    }

    #[test]
    fn fit_point_mass_marginals_gives_point_mass() {
        let space = DiscreteSpace::new(2, 2, 2).unwrap();
        let mut probs = vec![0.0; 16];
        let target = space.encode(&[1, 1, 0, 1]);
        probs[target] = 1.0;
        let p = DiscreteImageDistribution::new(space, probs).unwrap();
        let m = extract_patch_marginals(&p, 1).unwrap();
        let q = fit_max_entropy(&m).unwrap();
        assert!((q.probs[target] - 1.0).abs() < 1e-12);
        assert!(q.entropy().abs() < 1e-12);
    }

    #[test]
    fn fit_whole_image_window_returns_p() {
        let src = RandomSource::new(5);
        let mut rng = src.stream(0);
        let space = DiscreteSpace::new(2, 2, 2).unwrap();
        let p = random_distribution(space, 0.6, &mut rng);
        let m = extract_patch_marginals(&p, 2).unwrap();
        assert_eq!(m.windows.len(), 1);
        let q = fit_max_entropy(&m).unwrap();
        for (a, b) in p.probs.iter().zip(q.probs.iter()) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn support_of_anti_diagonal_at_level_1_is_everything() {
        let p = anti_diagonal();
        let s = support_set(&p, 1).unwrap();
        assert_eq!(s.members, vec![0, 1, 2, 3]);
    }

    #[test]
    fn support_at_whole_image_window_is_supp_p() {
        let p = anti_diagonal();
        let s = support_set(&p, 2).unwrap();
        let space = binary_1x2();
        assert_eq!(
            s.members,
            vec![space.encode(&[0, 1]), space.encode(&[1, 0])]
        );
    }

    #[test]
    fn support_of_uniform_is_whole_space() {
        let space = DiscreteSpace::new(1, 3, 2).unwrap();
        let p = DiscreteImageDistribution::uniform(space);
        let s = support_set(&p, 1).unwrap();
        assert_eq!(s.members.len(), 8);
    }

    #[test]
    fn theorem_support_equality_on_random_instances() {
        let src = RandomSource::new(42);
        let mut rng = src.stream(0);
        for case in 0..10 {
            let space = match case % 3 {
                0 => DiscreteSpace::new(1, 2, 2).unwrap(),
                1 => DiscreteSpace::new(1, 3, 3).unwrap(),
                _ => DiscreteSpace::new(2, 2, 2).unwrap(),
            };
            let p = random_distribution(space, 0.5, &mut rng);
            for w in [1, 2] {
                let m = extract_patch_marginals(&p, w).unwrap();
                let q = fit_max_entropy(&m).unwrap();
                let s = support_set(&p, w).unwrap();
                assert_eq!(q.support(), s.members, "case {case} w {w}");
            }
        }
    }

    #[test]
    fn fitted_beats_random_feasible_perturbations() {
        let src = RandomSource::new(43);
        let mut rng = src.stream(0);
        let space = DiscreteSpace::new(1, 3, 2).unwrap();
        let p = random_distribution(space, 0.8, &mut rng);
        let m = extract_patch_marginals(&p, 2).unwrap(); // overlapping 1x2 windows
        let q = fit_max_entropy(&m).unwrap();
        let h = q.entropy();
        let perturber = FeasiblePerturber::new(&q, &m);
        let mut tested = 0;
        for _ in 0..200 {
            if let Some(qp) = perturber.perturb(&q, &mut rng) {
                assert!(marginal_tv_residual(&qp, &m) < 1e-8, "perturbation left the polytope");
                assert!(h > qp.entropy() - 1e-10, "perturbation beat the fit");
                tested += 1;
            }
        }
        assert!(tested > 0, "no usable perturbations generated");
    }

    #[test]
    fn swap_identity_on_partition_decompositions() {
        let src = RandomSource::new(44);
        let mut rng = src.stream(0);
        let space = DiscreteSpace::new(2, 2, 2).unwrap();
        let p = random_distribution(space, 0.7, &mut rng);
        let m = extract_patch_marginals(&p, 1).unwrap();
        let q = fit_max_entropy(&m).unwrap();
        let worst = factorization_swap_residual(&q, 1).unwrap().unwrap();
        assert!(worst < 1e-8, "swap residual {worst}");
        // overlapping windows: identity not applicable
        let space2 = DiscreteSpace::new(1, 3, 2).unwrap();
        let p2 = random_distribution(space2, 0.9, &mut rng);
        let q2 = fit_max_entropy(&extract_patch_marginals(&p2, 2).unwrap()).unwrap();
        assert!(factorization_swap_residual(&q2, 2).unwrap().is_none());
    }

    #[test]
    fn text_round_trip() {
        let p = anti_diagonal();
        let text = p.to_text();
        let p2 = DiscreteImageDistribution::from_text(&text).unwrap();
        assert_eq!(p.space, p2.space);
        for (a, b) in p.probs.iter().zip(p2.probs.iter()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn degenerate_marginals_rejected() {
        let p = anti_diagonal();
        let mut m = extract_patch_marginals(&p, 1).unwrap();
        m.tables[0] = vec![0.0, 0.0];
        assert!(fit_max_entropy(&m).is_err());
    }
}
