//! Discrete structural causal models over `Z → X → T → Y` with a latent
//! confounder `Z → Y`, enumerated exactly.
//!
//! These serve as a ground-truth oracle: the interventional distribution
//! `P(Y | do(X))` is computed from the structural tables, and the
//! front-door estimate from the observational joint alone.

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use thiserror::Error;

const ROW_TOLERANCE: f64 = 1e-12;
/// Share of a peaked row placed on its peak label.
const PEAK: f64 = 0.85;

#[derive(Debug, Error, PartialEq)]
pub enum ScmError {
    #[error("every cardinality must be at least 2, got {0:?}")]
    Cardinality(Cards),
    #[error("table {table} has shape mismatch")]
    Shape { table: &'static str },
    #[error("table {table} row {row} is not a distribution")]
    NotDistribution { table: &'static str, row: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct Cards {
    pub z: usize,
    pub x: usize,
    pub t: usize,
    pub y: usize,
}

impl Cards {
    pub fn new(z: usize, x: usize, t: usize, y: usize) -> Self {
        Self { z, x, t, y }
    }

    pub fn binary() -> Self {
        Self::new(2, 2, 2, 2)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DiscreteScm {
    pub cards: Cards,
    pub p_z: Vec<f64>,
    /// Indexed `[z][x]`.
    pub p_x_given_z: Vec<Vec<f64>>,
    /// Indexed `[x][t]`.
    pub p_t_given_x: Vec<Vec<f64>>,
    /// Indexed `[t][z][y]`.
    pub p_y_given_tz: Vec<Vec<Vec<f64>>>,
    pub seed: Option<u64>,
}

fn check_row(row: &[f64], len: usize, table: &'static str, index: usize) -> Result<(), ScmError> {
    if row.len() != len {
        return Err(ScmError::Shape { table });
    }
    let sum: f64 = row.iter().sum();
    if row.iter().any(|p| !p.is_finite() || *p < 0.0) || (sum - 1.0).abs() > ROW_TOLERANCE {
        return Err(ScmError::NotDistribution { table, row: index });
    }
    Ok(())
}

impl DiscreteScm {
    /// Builds an SCM from explicit tables, checking every row.
    pub fn from_tables(
        p_z: Vec<f64>,
        p_x_given_z: Vec<Vec<f64>>,
        p_t_given_x: Vec<Vec<f64>>,
        p_y_given_tz: Vec<Vec<Vec<f64>>>,
    ) -> Result<Self, ScmError> {
        let cards = Cards {
            z: p_z.len(),
            x: p_x_given_z.first().map_or(0, Vec::len),
            t: p_t_given_x.first().map_or(0, Vec::len),
            y: p_y_given_tz.first().and_then(|r| r.first()).map_or(0, Vec::len),
        };
        if [cards.z, cards.x, cards.t, cards.y].iter().any(|&c| c < 2) {
            return Err(ScmError::Cardinality(cards));
        }
        check_row(&p_z, cards.z, "p_z", 0)?;
        if p_x_given_z.len() != cards.z {
            return Err(ScmError::Shape { table: "p_x_given_z" });
        }
        for (z, row) in p_x_given_z.iter().enumerate() {
            check_row(row, cards.x, "p_x_given_z", z)?;
        }
        if p_t_given_x.len() != cards.x {
            return Err(ScmError::Shape { table: "p_t_given_x" });
        }
        for (x, row) in p_t_given_x.iter().enumerate() {
            check_row(row, cards.t, "p_t_given_x", x)?;
        }
        if p_y_given_tz.len() != cards.t || p_y_given_tz.iter().any(|r| r.len() != cards.z) {
            return Err(ScmError::Shape { table: "p_y_given_tz" });
        }
        for (t, rows) in p_y_given_tz.iter().enumerate() {
            for (z, row) in rows.iter().enumerate() {
                check_row(row, cards.y, "p_y_given_tz", t * cards.z + z)?;
            }
        }
        Ok(Self {
            cards,
            p_z,
            p_x_given_z,
            p_t_given_x,
            p_y_given_tz,
            seed: None,
        })
    }

    /// Observational joint `P(z, x, t, y)`, indexed `[z][x][t][y]`.
    pub fn joint(&self) -> Vec<Vec<Vec<Vec<f64>>>> {
        let c = self.cards;
        (0..c.z)
            .map(|z| {
                (0..c.x)
                    .map(|x| {
                        (0..c.t)
                            .map(|t| {
                                (0..c.y)
                                    .map(|y| {
                                        self.p_z[z]
                                            * self.p_x_given_z[z][x]
                                            * self.p_t_given_x[x][t]
                                            * self.p_y_given_tz[t][z][y]
                                    })
                                    .collect()
                            })
                            .collect()
                    })
                    .collect()
            })
            .collect()
    }

    /// Marginals over the observed variables `(X, T, Y)` only.
    pub fn observational(&self) -> Observational {
        let c = self.cards;
        let joint = self.joint();
        let mut p_xty = vec![vec![vec![0.0; c.y]; c.t]; c.x];
        for zs in &joint {
            for (x, ts) in zs.iter().enumerate() {
                for (t, ys) in ts.iter().enumerate() {
                    for (y, p) in ys.iter().enumerate() {
                        p_xty[x][t][y] += p;
                    }
                }
            }
        }
        Observational { p_xty }
    }
}

/// Observational joint `P(x, t, y)` with `Z` summed out.
#[derive(Debug, Clone)]
pub struct Observational {
    /// Indexed `[x][t][y]`.
    pub p_xty: Vec<Vec<Vec<f64>>>,
}

impl Observational {
    pub fn p_x(&self) -> Vec<f64> {
        self.p_xty.iter().map(|ts| ts.iter().flatten().sum()).collect()
    }

    pub fn p_t_given_x(&self, x: usize) -> Vec<f64> {
        let row: Vec<f64> = self.p_xty[x].iter().map(|ys| ys.iter().sum()).collect();
        normalize(row)
    }

    pub fn p_y_given_xt(&self, x: usize, t: usize) -> Vec<f64> {
        normalize(self.p_xty[x][t].clone())
    }
}

fn normalize(mut row: Vec<f64>) -> Vec<f64> {
    let sum: f64 = row.iter().sum();
    row.iter_mut().for_each(|p| *p /= sum);
    row
}

fn random_row(rng: &mut impl Rng, len: usize) -> Vec<f64> {
    normalize((0..len).map(|_| rng.random_range(0.05..1.0)).collect())
}

fn peaked_row(len: usize, peak: usize) -> Vec<f64> {
    let rest = (1.0 - PEAK) / (len - 1) as f64;
    (0..len).map(|i| if i == peak { PEAK } else { rest }).collect()
}

fn mix(base: &[f64], peaked: &[f64], strength: f64) -> Vec<f64> {
    let row = base
        .iter()
        .zip(peaked)
        .map(|(b, p)| (1.0 - strength) * b + strength * p)
        .collect();
    normalize(row)
}

/// Random SCM whose confounding grows with `strength`: both `P(X | z)` and
/// `P(Y | t, z)` move from `Z`-independent rows toward rows peaked at a
/// `z`-dependent label.
pub fn generate_scm(cards: Cards, confounding_strength: f64, seed: u64) -> Result<DiscreteScm, ScmError> {
    if [cards.z, cards.x, cards.t, cards.y].iter().any(|&c| c < 2) {
        return Err(ScmError::Cardinality(cards));
    }
    let s = confounding_strength.clamp(0.0, 1.0);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let p_z = random_row(&mut rng, cards.z);
    let x_base = random_row(&mut rng, cards.x);
    let p_x_given_z = (0..cards.z)
        .map(|z| mix(&x_base, &peaked_row(cards.x, z % cards.x), s))
        .collect();
    let p_t_given_x = (0..cards.x).map(|_| random_row(&mut rng, cards.t)).collect();
    let p_y_given_tz = (0..cards.t)
        .map(|t| {
            let base = random_row(&mut rng, cards.y);
            (0..cards.z)
                .map(|z| mix(&base, &peaked_row(cards.y, (z + t) % cards.y), s))
                .collect()
        })
        .collect();
    let mut scm = DiscreteScm::from_tables(p_z, p_x_given_z, p_t_given_x, p_y_given_tz)?;
    scm.seed = Some(seed);
    Ok(scm)
}

/// `P(Y | do(X = x)) = Σ_z P(z) Σ_t P(t | x) P(Y | t, z)`.
pub fn true_interventional(scm: &DiscreteScm, x: usize) -> Vec<f64> {
    let c = scm.cards;
    (0..c.y)
        .map(|y| {
            (0..c.z)
                .map(|z| {
                    scm.p_z[z]
                        * (0..c.t)
                            .map(|t| scm.p_t_given_x[x][t] * scm.p_y_given_tz[t][z][y])
                            .sum::<f64>()
                })
                .sum()
        })
        .collect()
}

/// Front-door adjustment from observational quantities only:
/// `Σ_t P(t | x) Σ_x' P(x') P(Y | x', t)`.
pub fn frontdoor_estimate(scm: &DiscreteScm, x: usize) -> Vec<f64> {
    frontdoor_from(&scm.observational(), x)
}

pub fn frontdoor_from(obs: &Observational, x: usize) -> Vec<f64> {
    let p_x = obs.p_x();
    let p_t = obs.p_t_given_x(x);
    let n_y = obs.p_xty[0][0].len();
    let mut out = vec![0.0; n_y];
    for (t, pt) in p_t.iter().enumerate() {
        for (xp, pxp) in p_x.iter().enumerate() {
            for (y, py) in obs.p_y_given_xt(xp, t).iter().enumerate() {
                out[y] += pt * pxp * py;
            }
        }
    }
    out
}

/// Observational `P(Y | X = x)`.
pub fn naive_conditional(scm: &DiscreteScm, x: usize) -> Vec<f64> {
    let obs = scm.observational();
    let row: Vec<f64> = (0..scm.cards.y)
        .map(|y| obs.p_xty[x].iter().map(|ys| ys[y]).sum())
        .collect();
    normalize(row)
}

/// `P(Y | do(T = t)) = Σ_z P(z) P(Y | t, z)`, from the structural tables.
pub fn interventional_on_t(scm: &DiscreteScm, t: usize) -> Vec<f64> {
    (0..scm.cards.y)
        .map(|y| {
            (0..scm.cards.z)
                .map(|z| scm.p_z[z] * scm.p_y_given_tz[t][z][y])
                .sum()
        })
        .collect()
}

/// Back-door adjustment of `T → Y` through `X`: `Σ_x P(Y | t, x) P(x)`.
pub fn backdoor_on_t(scm: &DiscreteScm, t: usize) -> Vec<f64> {
    let obs = scm.observational();
    let p_x = obs.p_x();
    let mut out = vec![0.0; scm.cards.y];
    for (x, px) in p_x.iter().enumerate() {
        for (y, py) in obs.p_y_given_xt(x, t).iter().enumerate() {
            out[y] += px * py;
        }
    }
    out
}

/// Monte-Carlo version of the pipeline estimator: draw `a_samples` values
/// of `T | x`; for each distinct `t`, draw `n_samples` pairs `x' ~ P(X)`,
/// `y ~ P(Y | x', t)`; weight each `t`'s label frequencies by its share of
/// the `a_samples` draws.
pub fn finite_sample_frontdoor(
    scm: &DiscreteScm,
    x: usize,
    a_samples: usize,
    n_samples: usize,
    seed: u64,
) -> Vec<f64> {
    assert!(a_samples >= 1 && n_samples >= 1, "sample sizes must be positive");
    let c = scm.cards;
    let obs = scm.observational();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let t_dist = WeightedIndex::new(obs.p_t_given_x(x)).expect("valid T row");
    let x_dist = WeightedIndex::new(obs.p_x()).expect("valid X marginal");
    let y_dists: Vec<Vec<WeightedIndex<f64>>> = (0..c.x)
        .map(|xp| {
            (0..c.t)
                .map(|t| WeightedIndex::new(obs.p_y_given_xt(xp, t)).expect("valid Y row"))
                .collect()
        })
        .collect();

    let mut t_counts = vec![0usize; c.t];
    for _ in 0..a_samples {
        t_counts[t_dist.sample(&mut rng)] += 1;
    }
    let mut out = vec![0.0; c.y];
    for (t, &count) in t_counts.iter().enumerate() {
        if count == 0 {
            continue;
        }
        let mass = count as f64 / a_samples as f64;
        let mut y_counts = vec![0usize; c.y];
        for _ in 0..n_samples {
            let xp = x_dist.sample(&mut rng);
            y_counts[y_dists[xp][t].sample(&mut rng)] += 1;
        }
        for (y, &k) in y_counts.iter().enumerate() {
            out[y] += mass * k as f64 / n_samples as f64;
        }
    }
    out
}

/// Half the L1 distance.
pub fn total_variation(p: &[f64], q: &[f64]) -> f64 {
    0.5 * p.iter().zip(q).map(|(a, b)| (a - b).abs()).sum::<f64>()
}

pub fn max_abs_diff(p: &[f64], q: &[f64]) -> f64 {
    p.iter().zip(q).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
}

/// One CSV row of an oracle sweep. TV gaps are maxima over `x`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub seed: u64,
    pub strength: f64,
    pub tv_naive: f64,
    pub tv_frontdoor: f64,
    pub a: usize,
    pub n: usize,
}

#[derive(Debug, Clone)]
pub struct SweepParams {
    pub cards: Cards,
    pub seeds: u64,
    pub strengths: Vec<f64>,
    pub a: usize,
    pub n: usize,
}

impl Default for SweepParams {
    fn default() -> Self {
        Self {
            cards: Cards::new(3, 3, 3, 3),
            seeds: 20,
            strengths: vec![0.0, 0.5, 0.8, 1.0],
            a: 20,
            n: 5,
        }
    }
}

/// Rows ordered by strength, then seed. `tv_frontdoor` compares the
/// finite-sample estimator at `(a, n)` against the truth.
pub fn sweep(params: &SweepParams) -> Result<Vec<SweepRow>, ScmError> {
    let mut rows = Vec::new();
    for &strength in &params.strengths {
        for seed in 0..params.seeds {
            let scm = generate_scm(params.cards, strength, seed)?;
            let mut tv_naive: f64 = 0.0;
            let mut tv_frontdoor: f64 = 0.0;
            for x in 0..scm.cards.x {
                let truth = true_interventional(&scm, x);
                tv_naive = tv_naive.max(total_variation(&naive_conditional(&scm, x), &truth));
                let sampled = finite_sample_frontdoor(&scm, x, params.a, params.n, seed ^ ((x as u64) << 32));
                tv_frontdoor = tv_frontdoor.max(total_variation(&sampled, &truth));
            }
            rows.push(SweepRow {
                seed,
                strength,
                tv_naive,
                tv_frontdoor,
                a: params.a,
                n: params.n,
            });
        }
    }
    Ok(rows)
}

/// The binary SCM used as a hand-checked fixture.
pub fn tiny_fixture() -> DiscreteScm {
    DiscreteScm::from_tables(
        vec![0.6, 0.4],
        vec![vec![0.8, 0.2], vec![0.3, 0.7]],
        vec![vec![0.9, 0.1], vec![0.25, 0.75]],
        vec![
            vec![vec![0.7, 0.3], vec![0.2, 0.8]],
            vec![vec![0.4, 0.6], vec![0.1, 0.9]],
        ],
    )
    .expect("fixture tables are distributions")
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
        max_abs_diff(a, b) <= tol
    }

    // Exact fractions: do(x=0) = (239, 261)/500, do(x=1) = (67, 133)/200,
    // P(Y|x=0) = (287, 213)/500, P(Y|x=1) = (23, 77)/100.
    #[test]
    fn tiny_fixture_matches_hand_enumeration() {
        let scm = tiny_fixture();
        assert!(close(&true_interventional(&scm, 0), &[0.478, 0.522], 1e-12));
        assert!(close(&true_interventional(&scm, 1), &[0.335, 0.665], 1e-12));
        assert!(close(&frontdoor_estimate(&scm, 0), &[0.478, 0.522], 1e-12));
        assert!(close(&frontdoor_estimate(&scm, 1), &[0.335, 0.665], 1e-12));
        assert!(close(&naive_conditional(&scm, 0), &[0.574, 0.426], 1e-12));
        assert!(close(&naive_conditional(&scm, 1), &[0.23, 0.77], 1e-12));
    }

    #[test]
    fn rejects_bad_tables() {
        let err = DiscreteScm::from_tables(
            vec![0.5, 0.6],
            vec![vec![0.5, 0.5]; 2],
            vec![vec![0.5, 0.5]; 2],
            vec![vec![vec![0.5, 0.5]; 2]; 2],
        );
        assert_eq!(err, Err(ScmError::NotDistribution { table: "p_z", row: 0 }));
        assert!(matches!(generate_scm(Cards::new(1, 2, 2, 2), 0.5, 0), Err(ScmError::Cardinality(_))));
    }

    #[test]
    fn zero_strength_removes_confounding() {
        let scm = generate_scm(Cards::new(3, 2, 3, 4), 0.0, 9).unwrap();
        for t in 0..3 {
            assert!(scm.p_y_given_tz[t].windows(2).all(|w| close(&w[0], &w[1], 1e-15)));
        }
        for x in 0..2 {
            assert!(close(&naive_conditional(&scm, x), &true_interventional(&scm, x), 1e-12));
        }
    }

    #[test]
    fn full_strength_separates_binary_z() {
        for seed in 0..20 {
            let scm = generate_scm(Cards::new(2, 3, 3, 3), 1.0, seed).unwrap();
            for t in 0..3 {
                assert!(total_variation(&scm.p_y_given_tz[t][0], &scm.p_y_given_tz[t][1]) >= 0.3);
            }
        }
    }

    #[test]
    fn generation_and_sampling_are_seeded() {
        let c = Cards::new(3, 3, 2, 4);
        assert_eq!(generate_scm(c, 0.7, 4).unwrap(), generate_scm(c, 0.7, 4).unwrap());
        assert_ne!(generate_scm(c, 0.7, 4).unwrap(), generate_scm(c, 0.7, 5).unwrap());
        let scm = tiny_fixture();
        assert_eq!(finite_sample_frontdoor(&scm, 0, 50, 20, 1), finite_sample_frontdoor(&scm, 0, 50, 20, 1));
    }

    #[test]
    fn single_draw_is_point_mass() {
        let p = finite_sample_frontdoor(&tiny_fixture(), 1, 1, 1, 3);
        assert_eq!(p.iter().filter(|&&v| v == 1.0).count(), 1);
        assert_eq!(p.iter().sum::<f64>(), 1.0);
    }

    #[test]
    fn large_sample_converges_on_fixture() {
        let scm = tiny_fixture();
        let p = finite_sample_frontdoor(&scm, 0, 10_000, 10_000, 17);
        assert!(total_variation(&p, &frontdoor_estimate(&scm, 0)) <= 0.03);
    }

    #[test]
    fn sweep_shape() {
        let params = SweepParams { seeds: 3, strengths: vec![0.0, 1.0], ..SweepParams::default() };
        let rows = sweep(&params).unwrap();
        assert_eq!(rows.len(), 6);
        assert!(rows[..3].iter().all(|r| r.tv_naive < 1e-12));
        assert_eq!(rows, sweep(&params).unwrap());
    }

    fn cards() -> impl Strategy<Value = Cards> {
        (2usize..=4, 2usize..=4, 2usize..=4, 2usize..=4).prop_map(|(z, x, t, y)| Cards::new(z, x, t, y))
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(200))]

        #[test]
        fn frontdoor_identity(c in cards(), s in 0.0f64..=1.0, seed in any::<u64>()) {
            let scm = generate_scm(c, s, seed).unwrap();
            for x in 0..c.x {
                let truth = true_interventional(&scm, x);
                prop_assert!((truth.iter().sum::<f64>() - 1.0).abs() < 1e-12);
                prop_assert!(close(&frontdoor_estimate(&scm, x), &truth, 1e-9));
                prop_assert!((naive_conditional(&scm, x).iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }

        #[test]
        fn backdoor_through_x_matches_do_t(c in cards(), s in 0.0f64..=1.0, seed in any::<u64>()) {
            let scm = generate_scm(c, s, seed).unwrap();
            for t in 0..c.t {
                prop_assert!(close(&backdoor_on_t(&scm, t), &interventional_on_t(&scm, t), 1e-9));
            }
        }
    }
}
