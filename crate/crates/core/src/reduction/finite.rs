//! Finite static teams with exact conditioning.
//!
//! A hidden state `ω` takes finitely many values, DM `i` sees one of
//! `obs_counts[i]` observation values and picks one of its action atoms. Every
//! conditional expectation is a finite sum, so payoffs, best responses and
//! variational gaps are exact.

use rand::Rng;

use crate::error::{Result, TeamsError};
use crate::linalg::Mat;
use crate::numerics::{path_stream, Estimate, StreamDomain};
use crate::pbp::{SweepRecord, TeamObjective};
use crate::policy::{Basis, Policy, PolicyProfile, RegularPolicy, RelaxedPolicy};
use crate::problem::nearest_atom;

/// Per DM, per observation value, a probability vector over atoms.
pub type Tables = Vec<Vec<Vec<f64>>>;

#[derive(Debug, Clone)]
pub struct FiniteTeam {
    pub states: usize,
    pub obs_counts: Vec<usize>,
    /// `P(ω, y¹, …, yᴺ)` indexed `ω·Πobs + mixed-radix(y)`.
    pub joint: Vec<f64>,
    pub atoms: Vec<Vec<f64>>,
    /// `c(ω, a¹, …, aᴺ)` indexed `ω·Πatoms + mixed-radix(atom indices)`.
    pub cost: Vec<f64>,
}

fn digits(mut idx: usize, radix: &[usize], out: &mut [usize]) {
    for k in (0..radix.len()).rev() {
        out[k] = idx % radix[k];
        idx /= radix[k];
    }
}

impl FiniteTeam {
    /// Observations conditionally independent given `ω`:
    /// `likelihood[i][ω][y] = P(yⁱ = y | ω)`.
    pub fn new(
        prior: &[f64],
        likelihood: &[Vec<Vec<f64>>],
        atoms: Vec<Vec<f64>>,
        cost: impl Fn(usize, &[f64]) -> f64,
    ) -> Result<Self> {
        let states = prior.len();
        let n_dm = likelihood.len();
        if states == 0 || n_dm == 0 || atoms.len() != n_dm || atoms.iter().any(|a| a.is_empty()) {
            return Err(TeamsError::InvalidArgument("finite team needs states, DMs and atoms".into()));
        }
        let obs_counts: Vec<usize> = likelihood.iter().map(|l| l.first().map_or(0, |r| r.len())).collect();
        for l in likelihood {
            if l.len() != states {
                return Err(TeamsError::InvalidArgument("one likelihood row per state".into()));
            }
            for row in l {
                if row.len() != l[0].len() || row.iter().any(|p| *p < 0.0) || (row.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
                    return Err(TeamsError::InvalidArgument("likelihood rows must be distributions".into()));
                }
            }
        }
        if prior.iter().any(|p| *p < 0.0) || (prior.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(TeamsError::InvalidArgument("prior must be a distribution".into()));
        }
        let ny: usize = obs_counts.iter().product();
        let mut y = vec![0; n_dm];
        let mut joint = vec![0.0; states * ny];
        for w in 0..states {
            for yi in 0..ny {
                digits(yi, &obs_counts, &mut y);
                joint[w * ny + yi] = prior[w] * (0..n_dm).map(|i| likelihood[i][w][y[i]]).product::<f64>();
            }
        }
        let sizes: Vec<usize> = atoms.iter().map(|a| a.len()).collect();
        let na: usize = sizes.iter().product();
        let mut a = vec![0; n_dm];
        let mut act = vec![0.0; n_dm];
        let mut table = vec![0.0; states * na];
        for w in 0..states {
            for ai in 0..na {
                digits(ai, &sizes, &mut a);
                for i in 0..n_dm {
                    act[i] = atoms[i][a[i]];
                }
                table[w * na + ai] = cost(w, &act);
            }
        }
        Ok(FiniteTeam { states, obs_counts, joint, atoms, cost: table })
    }

    pub fn dm_count(&self) -> usize {
        self.obs_counts.len()
    }

    fn sizes(&self) -> Vec<usize> {
        self.atoms.iter().map(|a| a.len()).collect()
    }

    /// Cell edges that map observation value `y` (as a feature) to cell `y`.
    pub fn edges(&self, dm: usize) -> Vec<f64> {
        (1..self.obs_counts[dm]).map(|y| y as f64 - 0.5).collect()
    }

    pub fn uniform_tables(&self) -> Tables {
        (0..self.dm_count())
            .map(|i| vec![vec![1.0 / self.atoms[i].len() as f64; self.atoms[i].len()]; self.obs_counts[i]])
            .collect()
    }

    /// Relaxed policies reading the observation index as their only feature.
    pub fn to_profile(&self, tables: &Tables) -> PolicyProfile {
        let per_dm = (0..self.dm_count())
            .map(|i| {
                let atoms = self.atoms[i].iter().map(|a| vec![*a]).collect();
                let mut p = RelaxedPolicy::uniform(self.edges(i), vec![], atoms, 1);
                p.probs[0] = tables[i].clone();
                Policy::Relaxed(p)
            })
            .collect();
        PolicyProfile { per_dm }
    }

    /// Reads any profile back as tables: relaxed policies through their cells,
    /// regular ones through their (nearest-atom) action at each observation value.
    pub fn tables(&self, profile: &PolicyProfile) -> Result<Tables> {
        if profile.per_dm.len() != self.dm_count() {
            return Err(TeamsError::InvalidArgument("profile size differs from the team".into()));
        }
        let mut out = Vec::with_capacity(self.dm_count());
        for (i, pol) in profile.per_dm.iter().enumerate() {
            let atoms: Vec<Vec<f64>> = self.atoms[i].iter().map(|a| vec![*a]).collect();
            let mut rows = Vec::with_capacity(self.obs_counts[i]);
            for y in 0..self.obs_counts[i] {
                let z = [y as f64];
                let row = match pol {
                    Policy::Relaxed(r) => {
                        if r.atoms != atoms {
                            return Err(TeamsError::InvalidArgument(format!("DM {i}: relaxed atoms differ from the team")));
                        }
                        r.probs[r.segment(0.0)][r.cell(&z)].clone()
                    }
                    Policy::Regular(r) => {
                        let mut u = [0.0];
                        let mut phi = Vec::new();
                        r.raw_action(0.0, &z, &mut phi, &mut u);
                        let mut row = vec![0.0; atoms.len()];
                        row[nearest_atom(&atoms, &u)] = 1.0;
                        row
                    }
                };
                rows.push(row);
            }
            out.push(rows);
        }
        Ok(out)
    }

    pub fn payoff(&self, q: &Tables) -> f64 {
        let n = self.dm_count();
        let ny: usize = self.obs_counts.iter().product();
        let sizes = self.sizes();
        let na: usize = sizes.iter().product();
        let mut y = vec![0; n];
        let mut a = vec![0; n];
        let mut total = 0.0;
        for w in 0..self.states {
            for yi in 0..ny {
                let pj = self.joint[w * ny + yi];
                if pj == 0.0 {
                    continue;
                }
                digits(yi, &self.obs_counts, &mut y);
                let mut inner = 0.0;
                for ai in 0..na {
                    digits(ai, &sizes, &mut a);
                    let pa: f64 = (0..n).map(|i| q[i][y[i]][a[i]]).product();
                    if pa != 0.0 {
                        inner += pa * self.cost[w * na + ai];
                    }
                }
                total += pj * inner;
            }
        }
        total
    }

    /// `cc[y][a]`: joint-weighted expected cost when DM `dm` plays atom `a` on
    /// observation `y`, all others following `q`.
    pub fn cell_costs(&self, q: &Tables, dm: usize) -> Vec<Vec<f64>> {
        let n = self.dm_count();
        let ny: usize = self.obs_counts.iter().product();
        let sizes = self.sizes();
        let na: usize = sizes.iter().product();
        let mut y = vec![0; n];
        let mut a = vec![0; n];
        let mut cc = vec![vec![0.0; sizes[dm]]; self.obs_counts[dm]];
        for w in 0..self.states {
            for yi in 0..ny {
                let pj = self.joint[w * ny + yi];
                if pj == 0.0 {
                    continue;
                }
                digits(yi, &self.obs_counts, &mut y);
                for ai in 0..na {
                    digits(ai, &sizes, &mut a);
                    let pa: f64 = (0..n).filter(|&i| i != dm).map(|i| q[i][y[i]][a[i]]).product();
                    if pa != 0.0 {
                        cc[y[dm]][a[dm]] += pj * pa * self.cost[w * na + ai];
                    }
                }
            }
        }
        cc
    }

    /// Variational gap of DM `dm`: payoff minus the best unilateral deviation.
    pub fn gap(&self, q: &Tables, dm: usize) -> f64 {
        let cc = self.cell_costs(q, dm);
        cc.iter()
            .zip(&q[dm])
            .map(|(c, row)| {
                let cur: f64 = c.iter().zip(row).map(|(v, p)| v * p).sum();
                let best = c.iter().cloned().fold(f64::INFINITY, f64::min);
                (cur - best).max(0.0)
            })
            .sum()
    }

    /// Exact best response of DM `dm`, keeping rows that are already optimal.
    pub fn best_response(&self, q: &Tables, dm: usize) -> Vec<Vec<f64>> {
        let cc = self.cell_costs(q, dm);
        cc.iter()
            .zip(&q[dm])
            .map(|(c, row)| {
                let cur: f64 = c.iter().zip(row).map(|(v, p)| v * p).sum();
                let (arg, best) = c.iter().enumerate().fold((0, f64::INFINITY), |acc, (k, v)| if *v < acc.1 { (k, *v) } else { acc });
                if cur <= best + 1e-15 * (1.0 + best.abs()) {
                    row.clone()
                } else {
                    let mut r = vec![0.0; c.len()];
                    r[arg] = 1.0;
                    r
                }
            })
            .collect()
    }

    /// Number of pure (deterministic) strategy profiles.
    pub fn pure_profile_count(&self) -> Option<usize> {
        let mut total = 1usize;
        for (i, a) in self.atoms.iter().enumerate() {
            total = total.checked_mul(a.len().checked_pow(self.obs_counts[i] as u32)?)?;
        }
        Some(total)
    }

    /// Exhaustive search over pure profiles; lowest index wins ties.
    pub fn enumerate(&self, budget: usize) -> Result<(Tables, f64)> {
        let total = self.pure_profile_count().filter(|t| *t <= budget).ok_or(TeamsError::BudgetExceeded { evaluated: budget })?;
        let n = self.dm_count();
        // Radix: one digit per (DM, observation value).
        let radix: Vec<usize> = (0..n).flat_map(|i| std::iter::repeat_n(self.atoms[i].len(), self.obs_counts[i])).collect();
        let mut dig = vec![0; radix.len()];
        let mut best = (Vec::new(), f64::INFINITY);
        for idx in 0..total {
            digits(idx, &radix, &mut dig);
            let q = self.pure_tables(&dig);
            let v = self.payoff(&q);
            if v < best.1 {
                best = (q, v);
            }
        }
        Ok(best)
    }

    fn pure_tables(&self, dig: &[usize]) -> Tables {
        let mut k = 0;
        (0..self.dm_count())
            .map(|i| {
                (0..self.obs_counts[i])
                    .map(|_| {
                        let mut r = vec![0.0; self.atoms[i].len()];
                        r[dig[k]] = 1.0;
                        k += 1;
                        r
                    })
                    .collect()
            })
            .collect()
    }

    /// Regular policy with an indicator basis that plays `choice[y]` on observation `y`.
    pub fn regular_policy(&self, dm: usize, choice: &[usize]) -> RegularPolicy {
        let basis = Basis::Indicator { edges: self.edges(dm) };
        let mut c = Mat::zeros(1, self.obs_counts[dm]);
        for (y, a) in choice.iter().enumerate() {
            c[(0, y)] = self.atoms[dm][*a];
        }
        RegularPolicy { basis, recent: 1, switch_times: vec![], coefficients: vec![c] }
    }
}

impl TeamObjective for FiniteTeam {
    fn sweep(&mut self, profile: &PolicyProfile, index: usize) -> Result<(PolicyProfile, SweepRecord)> {
        let mut q = self.tables(profile)?;
        let mut change = Vec::with_capacity(self.dm_count());
        for i in 0..self.dm_count() {
            let next = self.best_response(&q, i);
            change.push(
                next.iter().flatten().zip(q[i].iter().flatten()).map(|(a, b)| (a - b).abs()).sum::<f64>(),
            );
            q[i] = next;
        }
        let residual = (0..self.dm_count()).map(|i| self.gap(&q, i)).fold(0.0, f64::max);
        let record = SweepRecord {
            sweep: index,
            payoff: FiniteTeam::payoff(self, &q),
            stderr: 0.0,
            max_residual: residual,
            n_paths: 0,
            coef_change: change,
            line_search_failed: vec![false; self.dm_count()],
        };
        Ok((self.to_profile(&q), record))
    }

    fn payoff(&mut self, profile: &PolicyProfile) -> Result<Estimate> {
        Ok(Estimate { value: FiniteTeam::payoff(self, &self.tables(profile)?), stderr: 0.0 })
    }

    fn max_residual(&mut self, profile: &PolicyProfile, _seed: u64) -> Result<f64> {
        let q = self.tables(profile)?;
        Ok((0..self.dm_count()).map(|i| self.gap(&q, i)).fold(0.0, f64::max))
    }

    fn sufficient(&self) -> bool {
        false
    }

    fn restart(&self, index: usize, seed: u64) -> Option<PolicyProfile> {
        let mut rng = path_stream(seed, StreamDomain::Restart, index as u64);
        let q: Tables = (0..self.dm_count())
            .map(|i| {
                (0..self.obs_counts[i])
                    .map(|_| {
                        let mut r = vec![0.0; self.atoms[i].len()];
                        r[rng.random_range(0..self.atoms[i].len())] = 1.0;
                        r
                    })
                    .collect()
            })
            .collect();
        Some(self.to_profile(&q))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn coordination() -> FiniteTeam {
        // Both DMs see ω exactly and pay 1 unless they pick the same atom.
        let lik = vec![vec![vec![1.0, 0.0], vec![0.0, 1.0]]; 2];
        FiniteTeam::new(&[0.5, 0.5], &lik, vec![vec![0.0, 1.0]; 2], |_, a| if a[0] == a[1] { 0.0 } else { 1.0 }).unwrap()
    }

    #[test]
    fn uniform_mixing_pays_half() {
        let t = coordination();
        assert!((t.payoff(&t.uniform_tables()) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn enumeration_finds_coordination() {
        let t = coordination();
        let (_, v) = t.enumerate(1 << 10).unwrap();
        assert_eq!(v, 0.0);
        assert!(matches!(t.enumerate(3), Err(TeamsError::BudgetExceeded { .. })));
    }

    #[test]
    fn best_response_closes_gap() {
        let t = coordination();
        let mut q = t.uniform_tables();
        q[0] = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
        assert!(t.gap(&q, 1) > 0.4);
        q[1] = t.best_response(&q, 1);
        assert_eq!(t.gap(&q, 1), 0.0);
        assert_eq!(t.payoff(&q), 0.0);
    }

    #[test]
    fn profile_round_trip() {
        let t = coordination();
        let q = vec![vec![vec![0.25, 0.75], vec![1.0, 0.0]], vec![vec![0.5, 0.5], vec![0.0, 1.0]]];
        assert_eq!(t.tables(&t.to_profile(&q)).unwrap(), q);
        let reg = PolicyProfile {
            per_dm: vec![Policy::Regular(t.regular_policy(0, &[1, 0])), Policy::Regular(t.regular_policy(1, &[0, 1]))],
        };
        let back = t.tables(&reg).unwrap();
        assert_eq!(back[0], vec![vec![0.0, 1.0], vec![1.0, 0.0]]);
    }
}
