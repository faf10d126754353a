//! Information structures as finite sampling stencils over observation paths.

use serde::{Deserialize, Serialize};

use crate::error::{Result, TeamsError};
use crate::simulate::TimeGrid;

/// A source DM whose observation path reaches another DM after `delay`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SharedSource {
    pub dm: usize,
    pub delay: f64,
}

/// One entry of a snapshot stencil: the sample taken `lag` time units ago.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case", deny_unknown_fields)]
pub enum Sample {
    Observation { dm: usize, lag: f64 },
    /// Perfect observation of the full state vector.
    State { lag: f64 },
}

/// What a DM may condition on.
///
/// Histories are sampled on the lattice `0, every, 2·every, …` (default: every
/// grid node), so the nested kinds only ever append coordinates as time grows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum InformationStructure {
    OwnHistory {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        every: Option<f64>,
    },
    DelayedSharing {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        every: Option<f64>,
        sources: Vec<SharedSource>,
    },
    /// Fixed-size, possibly nonnested stencil. Samples that would fall before
    /// time 0 read the initial node.
    Snapshot { stencil: Vec<Sample> },
}

impl InformationStructure {
    pub fn own_history() -> Self {
        InformationStructure::OwnHistory { every: None }
    }

    pub fn current_state() -> Self {
        InformationStructure::Snapshot { stencil: vec![Sample::State { lag: 0.0 }] }
    }

    pub fn current_observation(dm: usize) -> Self {
        InformationStructure::Snapshot { stencil: vec![Sample::Observation { dm, lag: 0.0 }] }
    }

    pub fn is_nested(&self) -> bool {
        !matches!(self, InformationStructure::Snapshot { .. })
    }

    /// DM indices whose observations are read.
    pub fn observed_dms(&self, own: usize) -> Vec<usize> {
        match self {
            InformationStructure::OwnHistory { .. } => vec![own],
            InformationStructure::DelayedSharing { sources, .. } => {
                let mut v = vec![own];
                v.extend(sources.iter().map(|s| s.dm));
                v
            }
            InformationStructure::Snapshot { stencil } => stencil
                .iter()
                .filter_map(|s| match s {
                    Sample::Observation { dm, .. } => Some(*dm),
                    Sample::State { .. } => None,
                })
                .collect(),
        }
    }

    pub fn reads_state(&self) -> bool {
        match self {
            InformationStructure::Snapshot { stencil } => {
                stencil.iter().any(|s| matches!(s, Sample::State { .. }))
            }
            _ => false,
        }
    }
}

/// Access to the part of one path that has been generated so far.
pub trait PathHistory {
    fn observation(&self, dm: usize, node: usize) -> &[f64];
    fn state(&self, node: usize) -> &[f64];
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Source {
    Observation(usize),
    State,
}

/// Where one policy-feature coordinate was read from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FeatureSource {
    Padding,
    Observation { dm: usize, node: usize, coord: usize },
    State { node: usize, coord: usize },
}

#[derive(Debug, Clone)]
struct Block {
    source: Source,
    nodes: Vec<usize>,
}

/// An information structure resolved against a time grid: for every node, the
/// exact list of samples the DM may read.
#[derive(Debug, Clone)]
pub struct CompiledInformation {
    per_node: Vec<Vec<Block>>,
    obs_dims: Vec<usize>,
    state_dim: usize,
    template: Vec<Source>,
}

fn lattice_steps(value: f64, grid: &TimeGrid, what: &str) -> Result<usize> {
    let steps = value / grid.dt();
    let rounded = steps.round();
    if value < 0.0 || (steps - rounded).abs() > 1e-9 * steps.abs().max(1.0) {
        return Err(TeamsError::IncompatibleStencil(format!(
            "{what} {value} is not a nonnegative multiple of the step {}",
            grid.dt()
        )));
    }
    Ok(rounded as usize)
}

impl CompiledInformation {
    pub fn compile(
        structure: &InformationStructure,
        dm: usize,
        grid: &TimeGrid,
        obs_dims: &[usize],
        state_dim: usize,
    ) -> Result<Self> {
        let nodes = grid.nodes();
        let check_dm = |j: usize| {
            if j >= obs_dims.len() {
                Err(TeamsError::MalformedProblem(format!("DM {dm} reads unknown DM {j}")))
            } else {
                Ok(())
            }
        };
        let mut per_node = Vec::with_capacity(nodes);
        let template: Vec<Source>;
        match structure {
            InformationStructure::OwnHistory { every } | InformationStructure::DelayedSharing { every, .. } => {
                let stride = match every {
                    Some(e) => lattice_steps(*e, grid, "history interval")?.max(1),
                    None => 1,
                };
                let mut sources = vec![(dm, 0usize)];
                if let InformationStructure::DelayedSharing { sources: shared, .. } = structure {
                    for s in shared {
                        check_dm(s.dm)?;
                        if s.delay < 0.0 {
                            return Err(TeamsError::FutureAccess { dm, requested: -s.delay, now: 0.0 });
                        }
                        sources.push((s.dm, lattice_steps(s.delay, grid, "sharing delay")?));
                    }
                }
                template = sources.iter().map(|(j, _)| Source::Observation(*j)).collect();
                for j in 0..nodes {
                    let blocks = sources
                        .iter()
                        .map(|&(src, delay)| Block {
                            source: Source::Observation(src),
                            nodes: (0..=j)
                                .step_by(stride)
                                .filter(|&l| l + delay <= j)
                                .collect(),
                        })
                        .collect();
                    per_node.push(blocks);
                }
            }
            InformationStructure::Snapshot { stencil } => {
                let mut entries = Vec::with_capacity(stencil.len());
                for s in stencil {
                    let (source, lag) = match s {
                        Sample::Observation { dm: j, lag } => {
                            check_dm(*j)?;
                            (Source::Observation(*j), *lag)
                        }
                        Sample::State { lag } => (Source::State, *lag),
                    };
                    if lag < 0.0 {
                        return Err(TeamsError::FutureAccess { dm, requested: -lag, now: 0.0 });
                    }
                    entries.push((source, lattice_steps(lag, grid, "stencil lag")?));
                }
                template = entries.iter().map(|(s, _)| *s).collect();
                for j in 0..nodes {
                    per_node.push(
                        entries
                            .iter()
                            .map(|&(source, lag)| Block { source, nodes: vec![j.saturating_sub(lag)] })
                            .collect(),
                    );
                }
            }
        }
        Ok(CompiledInformation { per_node, obs_dims: obs_dims.to_vec(), state_dim, template })
    }

    fn sample_dim(&self, s: Source) -> usize {
        match s {
            Source::Observation(j) => self.obs_dims[j],
            Source::State => self.state_dim,
        }
    }

    /// Length of the full view at `node`.
    pub fn view_dim(&self, node: usize) -> usize {
        self.per_node[node].iter().map(|b| b.nodes.len() * self.sample_dim(b.source)).sum()
    }

    /// Every legal sample at `node`, grouped by source.
    pub fn view(&self, node: usize, hist: &dyn PathHistory, out: &mut Vec<f64>) {
        out.clear();
        for b in &self.per_node[node] {
            for &l in &b.nodes {
                match b.source {
                    Source::Observation(j) => out.extend_from_slice(hist.observation(j, l)),
                    Source::State => out.extend_from_slice(hist.state(l)),
                }
            }
        }
    }

    /// Fixed-length features for policies: the `recent` latest samples of each
    /// source, zero-padded when the history is shorter.
    pub fn policy_dim(&self, recent: usize) -> usize {
        let recent = recent.max(1);
        self.template.iter().map(|s| recent * self.sample_dim(*s)).sum()
    }

    pub fn policy_features(&self, node: usize, recent: usize, hist: &dyn PathHistory, out: &mut Vec<f64>) {
        let recent = recent.max(1);
        out.clear();
        for b in &self.per_node[node] {
            let dim = self.sample_dim(b.source);
            let have = b.nodes.len().min(recent);
            out.extend(std::iter::repeat_n(0.0, (recent - have) * dim));
            for &l in &b.nodes[b.nodes.len() - have..] {
                match b.source {
                    Source::Observation(j) => out.extend_from_slice(hist.observation(j, l)),
                    Source::State => out.extend_from_slice(hist.state(l)),
                }
            }
        }
    }

    /// Index of every state coordinate inside the policy features, used for the
    /// closed-loop chain rule.
    pub fn state_positions(&self, node: usize, recent: usize) -> Vec<(usize, usize)> {
        let recent = recent.max(1);
        let mut pos = Vec::new();
        let mut offset = 0;
        for b in &self.per_node[node] {
            let dim = self.sample_dim(b.source);
            if b.source == Source::State {
                let have = b.nodes.len().min(recent);
                let base = offset + (recent - have) * dim;
                for (s, &l) in b.nodes[b.nodes.len() - have..].iter().enumerate() {
                    if l == node {
                        for c in 0..dim {
                            pos.push((base + s * dim + c, c));
                        }
                    }
                }
            }
            offset += recent * dim;
        }
        pos
    }

    /// Origin of every coordinate of the policy features at `node`.
    pub fn feature_sources(&self, node: usize, recent: usize) -> Vec<FeatureSource> {
        let recent = recent.max(1);
        let mut out = Vec::new();
        for b in &self.per_node[node] {
            let dim = self.sample_dim(b.source);
            let have = b.nodes.len().min(recent);
            out.extend(std::iter::repeat_n(FeatureSource::Padding, (recent - have) * dim));
            for &l in &b.nodes[b.nodes.len() - have..] {
                for c in 0..dim {
                    out.push(match b.source {
                        Source::Observation(j) => FeatureSource::Observation { dm: j, node: l, coord: c },
                        Source::State => FeatureSource::State { node: l, coord: c },
                    });
                }
            }
        }
        out
    }

    /// Latest node read at `node` (never exceeds `node`).
    pub fn latest_read(&self, node: usize) -> Option<usize> {
        self.per_node[node].iter().filter_map(|b| b.nodes.last().copied()).max()
    }
}

/// Length of the fixed-size policy features without compiling against a grid.
pub fn policy_feature_dim(
    structure: &InformationStructure,
    dm: usize,
    obs_dims: &[usize],
    state_dim: usize,
    recent: usize,
) -> usize {
    let per_sample: usize = match structure {
        InformationStructure::OwnHistory { .. } => obs_dims[dm],
        InformationStructure::DelayedSharing { sources, .. } => {
            obs_dims[dm] + sources.iter().map(|s| obs_dims[s.dm]).sum::<usize>()
        }
        InformationStructure::Snapshot { stencil } => stencil
            .iter()
            .map(|s| match s {
                Sample::Observation { dm, .. } => obs_dims[*dm],
                Sample::State { .. } => state_dim,
            })
            .sum(),
    };
    recent.max(1) * per_sample
}

/// Features DM `dm` may use at time `t`, read from `hist`.
pub fn information_view(
    structure: &InformationStructure,
    dm: usize,
    t: f64,
    grid: &TimeGrid,
    obs_dims: &[usize],
    state_dim: usize,
    hist: &dyn PathHistory,
) -> Result<Vec<f64>> {
    let node = grid.node_of(t).ok_or_else(|| {
        TeamsError::IncompatibleStencil(format!("time {t} is not a node of the grid"))
    })?;
    let compiled = CompiledInformation::compile(structure, dm, grid, obs_dims, state_dim)?;
    let mut out = Vec::new();
    compiled.view(node, hist, &mut out);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Observation of DM j at node l is `100 j + l`; state is `-l`.
    struct Tagged {
        obs: Vec<Vec<Vec<f64>>>,
        state: Vec<Vec<f64>>,
    }

    impl Tagged {
        fn new(dms: usize, nodes: usize) -> Self {
            Tagged {
                obs: (0..dms).map(|j| (0..nodes).map(|l| vec![100.0 * j as f64 + l as f64]).collect()).collect(),
                state: (0..nodes).map(|l| vec![-(l as f64)]).collect(),
            }
        }
    }

    impl PathHistory for Tagged {
        fn observation(&self, dm: usize, node: usize) -> &[f64] {
            &self.obs[dm][node]
        }
        fn state(&self, node: usize) -> &[f64] {
            &self.state[node]
        }
    }

    #[test]
    fn own_history_at_time_zero_is_single_sample() {
        let grid = TimeGrid::new(1.0, 0.1).unwrap();
        let h = Tagged::new(2, grid.nodes());
        let v = information_view(&InformationStructure::own_history(), 1, 0.0, &grid, &[1, 1], 1, &h).unwrap();
        assert_eq!(v, vec![100.0]);
    }

    #[test]
    fn delayed_sharing_excludes_source_before_delay() {
        let grid = TimeGrid::new(1.0, 0.1).unwrap();
        let h = Tagged::new(2, grid.nodes());
        let s = InformationStructure::DelayedSharing {
            every: None,
            sources: vec![SharedSource { dm: 1, delay: 0.5 }],
        };
        let v = information_view(&s, 0, 0.3, &grid, &[1, 1], 1, &h).unwrap();
        assert_eq!(v, vec![0.0, 1.0, 2.0, 3.0]);
        assert!(v.iter().all(|x| *x < 100.0));
    }

    #[test]
    fn snapshot_reads_current_and_lagged() {
        let grid = TimeGrid::new(1.0, 0.1).unwrap();
        let h = Tagged::new(2, grid.nodes());
        let s = InformationStructure::Snapshot {
            stencil: vec![Sample::Observation { dm: 0, lag: 0.0 }, Sample::Observation { dm: 1, lag: 0.4 }],
        };
        let v = information_view(&s, 0, 1.0, &grid, &[1, 1], 1, &h).unwrap();
        assert_eq!(v, vec![10.0, 106.0]);
    }

    #[test]
    fn off_grid_lag_is_rejected() {
        let grid = TimeGrid::with_steps(0.9, 3);
        let s = InformationStructure::Snapshot { stencil: vec![Sample::Observation { dm: 0, lag: 0.4 }] };
        let err = CompiledInformation::compile(&s, 0, &grid, &[1], 1).unwrap_err();
        assert!(matches!(err, TeamsError::IncompatibleStencil(_)));
    }

    #[test]
    fn negative_lag_is_future_access() {
        let grid = TimeGrid::new(1.0, 0.1).unwrap();
        let s = InformationStructure::Snapshot { stencil: vec![Sample::Observation { dm: 0, lag: -0.1 }] };
        let err = CompiledInformation::compile(&s, 0, &grid, &[1], 1).unwrap_err();
        assert!(matches!(err, TeamsError::FutureAccess { .. }));
    }

    #[test]
    fn policy_features_pad_short_history() {
        let grid = TimeGrid::new(1.0, 0.1).unwrap();
        let h = Tagged::new(1, grid.nodes());
        let c = CompiledInformation::compile(&InformationStructure::own_history(), 0, &grid, &[1], 1).unwrap();
        let mut f = Vec::new();
        c.policy_features(1, 3, &h, &mut f);
        assert_eq!(f, vec![0.0, 0.0, 1.0]);
        c.policy_features(5, 3, &h, &mut f);
        assert_eq!(f, vec![3.0, 4.0, 5.0]);
        assert_eq!(c.policy_dim(3), 3);
    }

    #[test]
    fn state_positions_locate_current_state() {
        let grid = TimeGrid::new(1.0, 0.1).unwrap();
        let s = InformationStructure::Snapshot {
            stencil: vec![Sample::Observation { dm: 0, lag: 0.0 }, Sample::State { lag: 0.0 }],
        };
        let c = CompiledInformation::compile(&s, 0, &grid, &[1], 2).unwrap();
        assert_eq!(c.state_positions(4, 1), vec![(1, 0), (2, 1)]);
    }
}
