use crate::env::{Corridor, Env, WorldGeometry};
use crate::error::Result;

/// One episode from reset to termination.
#[derive(Debug, Clone, PartialEq)]
pub struct Rollout {
    /// `positions[0]` is the reset state; `positions[t + 1]` follows `actions[t]`.
    pub positions: Vec<[f64; 2]>,
    pub actions: Vec<[f64; 2]>,
    pub rewards: Vec<f64>,
    pub success: bool,
}

impl Rollout {
    pub fn episode_return(&self) -> f64 {
        self.rewards.iter().sum()
    }

    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    /// Corridor at the first crossing of the corridor band's mid-height.
    pub fn corridor(&self, geometry: &WorldGeometry) -> Option<Corridor> {
        crossing_corridor(&self.positions, geometry)
    }
}

pub fn crossing_corridor(positions: &[[f64; 2]], geometry: &WorldGeometry) -> Option<Corridor> {
    let mid = geometry.mid_height();
    positions
        .iter()
        .find(|p| p[1] >= mid)
        .and_then(|p| geometry.corridor_of(p[0], p[1]))
}

/// Runs one episode from `env.reset(seed)` until the environment terminates.
pub fn rollout(
    env: &mut Env,
    seed: u64,
    mut policy: impl FnMut([f64; 2]) -> Result<[f64; 2]>,
) -> Result<Rollout> {
    let mut state = env.reset(seed);
    let mut out = Rollout {
        positions: vec![state.position],
        actions: Vec::new(),
        rewards: Vec::new(),
        success: false,
    };
    loop {
        let a = policy(state.position)?;
        let res = env.step(&a);
        out.actions.push(a);
        out.rewards.push(res.reward);
        out.positions.push(res.next_state.position);
        state = res.next_state;
        if res.terminal {
            out.success = res.reached_goal;
            return Ok(out);
        }
    }
}

/// Index of the most frequent corridor; ties go to the lower index.
pub fn majority_corridor<'a>(labels: impl IntoIterator<Item = &'a Option<Corridor>>) -> Option<Corridor> {
    let mut counts = [0usize; 3];
    for c in labels.into_iter().flatten() {
        counts[c.index()] += 1;
    }
    let best = counts.iter().copied().max().unwrap_or(0);
    if best == 0 {
        return None;
    }
    Corridor::ALL.into_iter().find(|c| counts[c.index()] == best)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::EnvConfig;

    #[test]
    fn straight_up_reaches_goal_through_middle() {
        let mut env = Env::new(EnvConfig::default()).unwrap();
        let r = rollout(&mut env, 0, |p| Ok([(0.5 - p[0]).clamp(-1.0, 1.0) * 10.0, 1.0])).unwrap();
        assert!(r.success);
        assert_eq!(r.corridor(env.geometry()), Some(Corridor::Middle));
        assert!((r.episode_return() - (10.0 - 0.1 * r.len() as f64)).abs() < 1e-9);
        assert!(r.len() < 35);
    }

    #[test]
    fn majority_ties_to_lower_index() {
        let labels = [Some(Corridor::Right), Some(Corridor::Left), None];
        assert_eq!(majority_corridor(&labels), Some(Corridor::Left));
        assert_eq!(majority_corridor(&[None, None]), None);
    }
}
