//! Scaling-law fitting and the inference FLOPs model.

use serde::{Deserialize, Serialize};

use crate::concept::{count_params, ConceptModelConfig, HeadKind};
use crate::error::{Error, Result};

/// `L(N) = a·N^(−α) + b` fitted by least squares.
#[derive(Clone, Debug, PartialEq)]
pub struct ScalingFit {
    pub a: f64,
    pub alpha: f64,
    pub b: f64,
    /// `1 − SS_res / SS_tot`; 1 for degenerate data.
    pub r2: f64,
    /// `SS_res / SS_tot`, or 0 for degenerate data.
    pub relative_residual: f64,
    /// Set when every loss is identical and the exponent is unidentifiable.
    pub degenerate: bool,
    pub points: Vec<(f64, f64)>,
}

impl ScalingFit {
    pub fn predict(&self, n: f64) -> f64 {
        self.a * n.powf(-self.alpha) + self.b
    }

    pub fn to_csv(&self) -> String {
        format!(
            "a,alpha,b,r2,degenerate\n{},{},{},{},{}\n",
            self.a, self.alpha, self.b, self.r2, self.degenerate
        )
    }
}

const ALPHA_MIN: f64 = 0.05;
const ALPHA_MAX: f64 = 2.0;
const ALPHA_STEP: f64 = 0.005;
const ALPHA_TOL: f64 = 1e-6;

/// Best `(a, b, SS_res)` for a fixed exponent.
fn linear_fit(points: &[(f64, f64)], alpha: f64) -> (f64, f64, f64) {
    let n = points.len() as f64;
    let xs: Vec<f64> = points.iter().map(|&(x, _)| x.powf(-alpha)).collect();
    let mx = xs.iter().sum::<f64>() / n;
    let my = points.iter().map(|p| p.1).sum::<f64>() / n;
    let (mut sxy, mut sxx) = (0.0, 0.0);
    for (x, &(_, y)) in xs.iter().zip(points) {
        sxy += (x - mx) * (y - my);
        sxx += (x - mx) * (x - mx);
    }
    let a = if sxx > 0.0 { sxy / sxx } else { 0.0 };
    let b = my - a * mx;
    let ss = xs.iter().zip(points).map(|(x, &(_, y))| (y - a * x - b).powi(2)).sum();
    (a, b, ss)
}

/// Grid search over α, closed-form `(a, b)` at each α, then golden-section
/// refinement around the best grid point.
pub fn fit_scaling_law(points: &[(f64, f64)]) -> Result<ScalingFit> {
    if points.len() < 4 {
        return Err(Error::contract(format!(
            "scaling fit needs at least 4 points, got {}",
            points.len()
        )));
    }
    for (i, &(n, l)) in points.iter().enumerate() {
        if !(n > 0.0 && n.is_finite() && l > 0.0 && l.is_finite()) {
            return Err(Error::contract(format!(
                "point {i} ({n}, {l}) must have N > 0 and L > 0"
            )));
        }
        if points[..i].iter().any(|p| p.0 == n) {
            return Err(Error::contract(format!("duplicate N = {n}")));
        }
    }
    let mean = points.iter().map(|p| p.1).sum::<f64>() / points.len() as f64;
    let ss_tot: f64 = points.iter().map(|p| (p.1 - mean).powi(2)).sum();
    if ss_tot == 0.0 {
        return Ok(ScalingFit {
            a: 0.0,
            alpha: ALPHA_MIN,
            b: mean,
            r2: 1.0,
            relative_residual: 0.0,
            degenerate: true,
            points: points.to_vec(),
        });
    }

    let steps = ((ALPHA_MAX - ALPHA_MIN) / ALPHA_STEP).round() as usize;
    let sse = |alpha: f64| linear_fit(points, alpha).2;
    let (mut best_alpha, mut best_sse) = (ALPHA_MIN, f64::INFINITY);
    for i in 0..=steps {
        let alpha = ALPHA_MIN + i as f64 * ALPHA_STEP;
        let s = sse(alpha);
        if s < best_sse {
            best_alpha = alpha;
            best_sse = s;
        }
    }

    let inv_phi = (5f64.sqrt() - 1.0) / 2.0;
    let mut lo = (best_alpha - ALPHA_STEP).max(ALPHA_MIN);
    let mut hi = (best_alpha + ALPHA_STEP).min(ALPHA_MAX);
    let mut c = hi - inv_phi * (hi - lo);
    let mut d = lo + inv_phi * (hi - lo);
    let (mut fc, mut fd) = (sse(c), sse(d));
    while hi - lo > ALPHA_TOL {
        if fc < fd {
            hi = d;
            d = c;
            fd = fc;
            c = hi - inv_phi * (hi - lo);
            fc = sse(c);
        } else {
            lo = c;
            c = d;
            fc = fd;
            d = lo + inv_phi * (hi - lo);
            fd = sse(d);
        }
    }
    let refined = 0.5 * (lo + hi);
    let alpha = if sse(refined) <= best_sse { refined } else { best_alpha };
    let (a, b, ss_res) = linear_fit(points, alpha);
    Ok(ScalingFit {
        a,
        alpha,
        b,
        r2: 1.0 - ss_res / ss_tot,
        relative_residual: ss_res / ss_tot,
        degenerate: false,
        points: points.to_vec(),
    })
}

/// Reads `N,L` rows; a non-numeric first line is taken as a header and
/// blank lines are ignored.
pub fn parse_points_csv(text: &str) -> Result<Vec<(f64, f64)>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        let parsed = match fields.as_slice() {
            [n, l] => n.parse::<f64>().ok().zip(l.parse::<f64>().ok()),
            _ => None,
        };
        match parsed {
            Some(p) => out.push(p),
            None if i == 0 => continue,
            None => return Err(Error::Format(format!("line {}: expected `N,L`, got `{line}`", i + 1))),
        }
    }
    Ok(out)
}

/// Dimensions of one transformer for cost accounting.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArchShape {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub ffn_mult: usize,
    pub vocab_size: usize,
    pub d_embed: usize,
    pub head: HeadKind,
}

impl ArchShape {
    pub fn config(&self) -> ConceptModelConfig {
        ConceptModelConfig {
            d_model: self.d_model,
            n_layers: self.n_layers,
            n_heads: self.n_heads,
            ffn_mult: self.ffn_mult,
            d_embed: self.d_embed,
            vocab_size: self.vocab_size,
            ..ConceptModelConfig::default()
        }
    }

    /// Non-embedding parameter count.
    pub fn params(&self) -> u128 {
        count_params(&self.config(), self.head, false) as u128
    }

    fn attn_width(&self) -> u128 {
        self.n_layers as u128 * self.d_model as u128
    }
}

/// Sentence-level pipeline: concept core plus the codec's encoder and
/// decoder, with sentences of `lambda` tokens.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlopsModel {
    pub token: ArchShape,
    pub concept: ArchShape,
    pub encoder: ArchShape,
    pub decoder: ArchShape,
    pub lambda: u64,
}

impl FlopsModel {
    pub fn validate(&self) -> Result<()> {
        if self.lambda == 0 {
            return Err(Error::config("average sentence length must be at least 1"));
        }
        Ok(())
    }
}

/// Cached token-by-token generation of `t` tokens.
pub fn flops_token_llm(shape: &ArchShape, t: u64) -> u128 {
    let t = t as u128;
    2 * shape.params() * t + 2 * shape.attn_width() * t * (t + 1)
}

/// One parallel encoder pass over a `lambda`-token sentence.
pub fn flops_encoder(shape: &ArchShape, lambda: u64) -> u128 {
    let l = lambda as u128;
    2 * shape.params() * l + 2 * shape.attn_width() * l * l
}

/// `lambda` cached decoder steps.
pub fn flops_decoder(shape: &ArchShape, lambda: u64) -> u128 {
    flops_token_llm(shape, lambda)
}

/// Number of sentence steps covering `t` tokens.
pub fn sentence_steps(model: &FlopsModel, t: u64) -> u64 {
    t.div_ceil(model.lambda)
}

pub fn flops_sonar_llm(model: &FlopsModel, t: u64) -> u128 {
    let s = sentence_steps(model, t);
    let per_sentence = flops_encoder(&model.encoder, model.lambda) + flops_decoder(&model.decoder, model.lambda);
    flops_token_llm(&model.concept, s) + s as u128 * per_sentence
}

/// Coefficients of `T²` in both cost curves, from second differences at `t`
/// (token: step 1; sentence-level: step λ, `t` rounded up to a multiple of λ).
pub fn quadratic_coefficients(model: &FlopsModel, t: u64) -> (f64, f64) {
    let f = |x: u64| flops_token_llm(&model.token, x) as f64;
    let token = (f(t + 2) - 2.0 * f(t + 1) + f(t)) / 2.0;
    let lam = model.lambda;
    let base = t.div_ceil(lam) * lam;
    let g = |x: u64| flops_sonar_llm(model, x) as i128;
    let second = g(base + 2 * lam) - 2 * g(base + lam) + g(base);
    let sonar = second as f64 / (2.0 * (lam * lam) as f64);
    (token, sonar)
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Crossover {
    /// Smallest `T` at which the sentence-level pipeline is cheaper.
    pub t_star: Option<u64>,
    /// Set when the block-level cost difference was not single-crossing and
    /// a linear scan was used instead.
    pub linear_scan: bool,
}

fn cheaper(model: &FlopsModel, t: u64) -> bool {
    flops_sonar_llm(model, t) < flops_token_llm(&model.token, t)
}

/// Linear scan for the first `T ≤ t_max` where the sentence-level cost is
/// strictly lower.
pub fn crossover_linear(model: &FlopsModel, t_max: u64) -> Option<u64> {
    (1..=t_max).find(|&t| cheaper(model, t))
}

/// Smallest `T ≤ t_max_search` with `flops_sonar_llm(T) < flops_token_llm(T)`.
///
/// Within one sentence block the sentence-level cost is flat while the token
/// cost grows, so the first crossing lies in the first block whose last token
/// is already cheaper. Blocks are binary searched after a doubling grid
/// confirms a single switch, then the block itself is binary searched.
pub fn crossover_length(model: &FlopsModel, t_max_search: u64) -> Result<Crossover> {
    model.validate()?;
    if t_max_search < 2 {
        return Err(Error::contract("crossover search needs t_max_search ≥ 2"));
    }
    let lam = model.lambda;
    let n_blocks = t_max_search.div_ceil(lam);
    let block_end = |k: u64| (k * lam).min(t_max_search);
    let at_block = |k: u64| cheaper(model, block_end(k));

    let mut grid = Vec::new();
    let mut k = 1;
    while k < n_blocks {
        grid.push(k);
        k *= 2;
    }
    grid.push(n_blocks);
    let flags: Vec<bool> = grid.iter().map(|&k| at_block(k)).collect();
    let switches = flags.windows(2).filter(|w| w[0] != w[1]).count();
    if switches > 1 || (switches == 1 && flags[0]) {
        log::warn!("cost difference is not single-crossing; falling back to a linear scan");
        return Ok(Crossover {
            t_star: crossover_linear(model, t_max_search),
            linear_scan: true,
        });
    }
    if !flags[flags.len() - 1] {
        return Ok(Crossover {
            t_star: None,
            linear_scan: false,
        });
    }
    let first_block = if flags[0] {
        1
    } else {
        let i = flags.iter().position(|&f| f).expect("a true flag");
        let (mut lo, mut hi) = (grid[i - 1], grid[i]);
        while hi - lo > 1 {
            let mid = lo + (hi - lo) / 2;
            if at_block(mid) {
                hi = mid;
            } else {
                lo = mid;
            }
        }
        hi
    };
    let (mut lo, mut hi) = ((first_block - 1) * lam, block_end(first_block));
    while hi - lo > 1 {
        let mid = lo + (hi - lo) / 2;
        if cheaper(model, mid) {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    Ok(Crossover {
        t_star: Some(hi),
        linear_scan: false,
    })
}

/// Powers of two from 1 up to `t_max`, plus `t_max` itself.
pub fn log_grid(t_max: u64) -> Vec<u64> {
    let mut out = Vec::new();
    let mut t = 1u64;
    while t < t_max {
        out.push(t);
        t = t.saturating_mul(2);
    }
    if t_max >= 1 {
        out.push(t_max);
    }
    out
}

pub fn flops_csv(model: &FlopsModel, ts: &[u64]) -> String {
    let mut out = String::from("T,flops_llm,flops_sonar\n");
    for &t in ts {
        out.push_str(&format!(
            "{t},{},{}\n",
            flops_token_llm(&model.token, t),
            flops_sonar_llm(model, t)
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn shape(n_layers: usize, d_model: usize, head: HeadKind) -> ArchShape {
        ArchShape {
            n_layers,
            d_model,
            n_heads: 4,
            ffn_mult: 4,
            vocab_size: 1000,
            d_embed: d_model,
            head,
        }
    }

    fn small_model(lambda: u64) -> FlopsModel {
        FlopsModel {
            token: shape(4, 64, HeadKind::Token),
            concept: shape(4, 64, HeadKind::Concept),
            encoder: shape(1, 32, HeadKind::Token),
            decoder: shape(1, 32, HeadKind::Token),
            lambda,
        }
    }

    fn brute_token(s: &ArchShape, t: u64) -> u128 {
        (1..=t as u128)
            .map(|i| 2 * s.params() + 4 * (s.n_layers * s.d_model) as u128 * i)
            .sum()
    }

    #[test]
    fn token_flops_closed_form_and_brute_force() {
        let s = shape(2, 16, HeadKind::Token);
        assert_eq!(flops_token_llm(&s, 1), 2 * s.params() + 4 * 2 * 16);
        for t in [1, 2, 7, 60, 61, 1000, 4097] {
            assert_eq!(flops_token_llm(&s, t), brute_token(&s, t));
        }
    }

    #[test]
    fn sonar_flops_brute_force() {
        let m = small_model(60);
        let enc = |s: &ArchShape, l: u128| 2 * s.params() * l + 2 * (s.n_layers * s.d_model) as u128 * l * l;
        for t in [1u64, 59, 60, 61, 119, 120, 5000, 65536] {
            let steps = t.div_ceil(60);
            let mut total = 0u128;
            for s in 1..=steps as u128 {
                total += 2 * m.concept.params() + 4 * (m.concept.n_layers * m.concept.d_model) as u128 * s;
                total += enc(&m.encoder, 60) + brute_token(&m.decoder, 60);
            }
            assert_eq!(flops_sonar_llm(&m, t), total, "T={t}");
        }
        assert_eq!(sentence_steps(&m, 60), 1);
    }

    #[test]
    fn quadratic_ratio_is_inverse_lambda_squared() {
        for lambda in [1, 7, 60] {
            let m = small_model(lambda);
            let (tok, son) = quadratic_coefficients(&m, 1 << 20);
            let want = 1.0 / (lambda * lambda) as f64;
            assert!((son / tok - want).abs() < 1e-9 * want.max(1e-300), "λ={lambda}");
        }
    }

    #[test]
    fn doubling_ratio_approaches_four() {
        let s = shape(4, 64, HeadKind::Token);
        let r = flops_token_llm(&s, 1 << 20) as f64 / flops_token_llm(&s, 1 << 19) as f64;
        assert!((r - 4.0).abs() < 0.2, "{r}");
    }

    #[test]
    fn cost_ratio_reaches_its_asymptote() {
        let m = FlopsModel {
            encoder: shape(1, 16, HeadKind::Token),
            decoder: shape(1, 16, HeadKind::Token),
            ..small_model(8)
        };
        let t = 1u64 << 20;
        let r = flops_sonar_llm(&m, t) as f64 / flops_token_llm(&m.token, t) as f64;
        let want = 1.0 / 64.0;
        assert!((r / want - 1.0).abs() < 0.01, "{r} vs {want}");
        // with lambda = 60 the codec's linear cost still dominates at this length
        let slow = small_model(60);
        let r = flops_sonar_llm(&slow, t) as f64 / flops_token_llm(&slow.token, t) as f64;
        assert!(r / (1.0 / 3600.0) > 1.1);
    }

    #[test]
    fn crossover_matches_linear_scan() {
        for lambda in [3, 20, 60] {
            let m = small_model(lambda);
            let fast = crossover_length(&m, 100_000).unwrap();
            assert!(!fast.linear_scan);
            assert_eq!(fast.t_star, crossover_linear(&m, 100_000), "λ={lambda}");
        }
    }

    #[test]
    fn lambda_one_never_crosses() {
        let mut m = small_model(1);
        m.concept = ArchShape {
            head: HeadKind::Token,
            ..m.token.clone()
        };
        assert_eq!(crossover_length(&m, 1 << 20).unwrap().t_star, None);
    }

    #[test]
    fn exact_power_law_is_recovered() {
        let ns: [f64; 5] = [1e6, 3e6, 1e7, 5e7, 2e8];
        let pts: Vec<(f64, f64)> = ns.iter().map(|&n| (n, 50.0 * n.powf(-0.3) + 0.7)).collect();
        let fit = fit_scaling_law(&pts).unwrap();
        assert!((fit.alpha - 0.3).abs() < 1e-4, "{}", fit.alpha);
        assert!((fit.b - 0.7).abs() < 1e-3);
        assert!(fit.r2 > 0.99999);
        assert!(!fit.degenerate);
    }

    #[test]
    fn constant_losses_are_degenerate() {
        let pts = [(1.0, 2.5), (2.0, 2.5), (3.0, 2.5), (4.0, 2.5)];
        let fit = fit_scaling_law(&pts).unwrap();
        assert!(fit.degenerate);
        assert_eq!((fit.a, fit.b, fit.r2), (0.0, 2.5, 1.0));
    }

    #[test]
    fn fit_preconditions() {
        assert!(fit_scaling_law(&[(1.0, 1.0), (2.0, 0.5), (3.0, 0.4)]).is_err());
        assert!(fit_scaling_law(&[(1.0, 1.0), (1.0, 0.5), (3.0, 0.4), (4.0, 0.3)]).is_err());
        assert!(fit_scaling_law(&[(1.0, 1.0), (2.0, -0.5), (3.0, 0.4), (4.0, 0.3)]).is_err());
    }

    #[test]
    fn points_csv_parsing() {
        let pts = parse_points_csv("N,L\n1e6,2.5\n\n2e6, 2.25\n").unwrap();
        assert_eq!(pts, vec![(1e6, 2.5), (2e6, 2.25)]);
        assert!(parse_points_csv("1,2\nx,y\n").is_err());
    }

    #[test]
    fn grid_and_csv() {
        assert_eq!(log_grid(10), vec![1, 2, 4, 8, 10]);
        assert_eq!(log_grid(8), vec![1, 2, 4, 8]);
        let csv = flops_csv(&small_model(60), &[1, 2]);
        assert!(csv.starts_with("T,flops_llm,flops_sonar\n1,"));
        assert_eq!(csv.lines().count(), 3);
    }
}
