//! The lattice MDP sampled by the GFlowNet.
//!
//! States carry a step counter `t`, which makes the state graph a DAG even
//! though moves go in all four directions. Terminal objects are identified
//! by position alone.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Action {
    Up,
    Down,
    Left,
    Right,
    Stop,
}

impl Action {
    pub const COUNT: usize = 5;
    pub const ALL: [Action; 5] = [Action::Up, Action::Down, Action::Left, Action::Right, Action::Stop];
    pub const MOVES: [Action; 4] = [Action::Up, Action::Down, Action::Left, Action::Right];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Action> {
        Action::ALL.get(i).copied()
    }

    /// `(dx, dy)` for moves; `None` for `Stop`.
    pub fn delta(self) -> Option<(i64, i64)> {
        match self {
            Action::Up => Some((0, 1)),
            Action::Down => Some((0, -1)),
            Action::Left => Some((-1, 0)),
            Action::Right => Some((1, 0)),
            Action::Stop => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct GridState {
    pub x: usize,
    pub y: usize,
    pub t: usize,
}

impl GridState {
    pub const ORIGIN: GridState = GridState { x: 0, y: 0, t: 0 };

    pub fn new(x: usize, y: usize, t: usize) -> Self {
        Self { x, y, t }
    }

    pub fn position(&self) -> (usize, usize) {
        (self.x, self.y)
    }

    /// Whether some path from the origin reaches this node: the Manhattan
    /// distance fits in `t` steps with matching parity.
    pub fn is_reachable(&self) -> bool {
        let d = self.x + self.y;
        d <= self.t && (self.t - d).is_multiple_of(2)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MaskConfig {
    pub min_length: usize,
    pub max_length: usize,
    pub eps_stop: f64,
    pub forbid_backtrack: bool,
    pub depth_aware_stop: bool,
}

impl MaskConfig {
    pub fn validate(&self) -> Result<()> {
        if self.min_length == 0 || self.min_length > self.max_length {
            return Err(Error::Config(format!(
                "need 0 < min_length ({}) <= max_length ({})",
                self.min_length, self.max_length
            )));
        }
        if !(0.0..=1.0).contains(&self.eps_stop) {
            return Err(Error::Config(format!("eps_stop {} not in [0, 1]", self.eps_stop)));
        }
        Ok(())
    }
}

/// Allowed-action flags indexed by [`Action::index`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct ActionMask([bool; Action::COUNT]);

impl ActionMask {
    pub fn all() -> Self {
        ActionMask([true; Action::COUNT])
    }

    pub fn from_allowed(allowed: [bool; Action::COUNT]) -> Self {
        ActionMask(allowed)
    }

    pub fn allows(&self, a: Action) -> bool {
        self.0[a.index()]
    }

    pub fn set(&mut self, a: Action, allowed: bool) {
        self.0[a.index()] = allowed;
    }

    pub fn count(&self) -> usize {
        self.0.iter().filter(|&&b| b).count()
    }

    pub fn allowed(&self) -> impl Iterator<Item = Action> + '_ {
        Action::ALL.into_iter().filter(|a| self.allows(*a))
    }

    pub fn as_array(&self) -> [bool; Action::COUNT] {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Transition {
    Moved(GridState),
    Terminal { x: usize, y: usize },
}

/// A completed rollout. `actions[i]` is taken in `states[i]`; the last
/// action is always `Stop`.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub states: Vec<GridState>,
    pub actions: Vec<Action>,
    pub forward_logprobs: Vec<f64>,
    pub terminal: (usize, usize),
}

impl Trajectory {
    /// Number of moves (excludes the final `Stop`).
    pub fn len(&self) -> usize {
        self.actions.len().saturating_sub(1)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn log_pf(&self) -> f64 {
        self.forward_logprobs.iter().sum()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridEnv {
    size: usize,
    mask: MaskConfig,
}

impl GridEnv {
    pub fn new(size: usize, mask: MaskConfig) -> Result<Self> {
        if size < 2 {
            return Err(Error::Config(format!("grid size {size} must be at least 2")));
        }
        mask.validate()?;
        Ok(Self { size, mask })
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn mask_config(&self) -> &MaskConfig {
        &self.mask
    }

    pub fn cell_count(&self) -> usize {
        self.size * self.size
    }

    pub fn contains(&self, x: i64, y: i64) -> bool {
        let n = self.size as i64;
        (0..n).contains(&x) && (0..n).contains(&y)
    }

    fn check(&self, s: &GridState) -> Result<()> {
        if s.x >= self.size || s.y >= self.size {
            return Err(Error::OutOfBounds {
                x: s.x as i64,
                y: s.y as i64,
                size: self.size,
            });
        }
        Ok(())
    }

    fn target(&self, s: &GridState, a: Action) -> Option<(usize, usize)> {
        let (dx, dy) = a.delta()?;
        let (nx, ny) = (s.x as i64 + dx, s.y as i64 + dy);
        self.contains(nx, ny).then_some((nx as usize, ny as usize))
    }

    /// Feasibility mask for `state`. Consumes exactly one uniform draw from
    /// `rng` whenever the Stop decision is stochastic.
    pub fn valid_actions<R: Rng + ?Sized>(&self, state: &GridState, prev: Option<&GridState>, rng: &mut R) -> Result<ActionMask> {
        self.check(state)?;
        let cfg = &self.mask;
        let mut mask = ActionMask::default();
        if state.t >= cfg.max_length {
            mask.set(Action::Stop, true);
            return Ok(mask);
        }
        for a in Action::MOVES {
            let Some(next) = self.target(state, a) else {
                continue;
            };
            let backtrack = cfg.forbid_backtrack && prev.is_some_and(|p| p.position() == next);
            mask.set(a, !backtrack);
        }
        let stop = if state.t < cfg.min_length {
            rng.random::<f64>() >= cfg.eps_stop
        } else if cfg.depth_aware_stop {
            let p = (state.t - cfg.min_length + 1) as f64 / (cfg.max_length - cfg.min_length + 1) as f64;
            rng.random::<f64>() < p
        } else {
            true
        };
        mask.set(Action::Stop, stop);
        if mask.count() == 0 {
            mask.set(Action::Stop, true);
        }
        Ok(mask)
    }

    pub fn step(&self, state: &GridState, action: Action) -> Result<Transition> {
        self.check(state)?;
        if action == Action::Stop {
            return Ok(Transition::Terminal { x: state.x, y: state.y });
        }
        let (x, y) = self.target(state, action).ok_or(Error::InvalidAction {
            action,
            x: state.x,
            y: state.y,
            t: state.t,
        })?;
        Ok(Transition::Moved(GridState::new(x, y, state.t + 1)))
    }

    /// Every in-bounds state at `t - 1` one unit move away, with the move
    /// that leads from it to `state`.
    pub fn parents(&self, state: &GridState) -> Result<Vec<(GridState, Action)>> {
        self.check(state)?;
        if state.t == 0 {
            return Err(Error::RootHasNoParents);
        }
        let mut out = Vec::with_capacity(4);
        for a in Action::MOVES {
            let (dx, dy) = a.delta().expect("moves have deltas");
            let (px, py) = (state.x as i64 - dx, state.y as i64 - dy);
            if self.contains(px, py) {
                out.push((GridState::new(px as usize, py as usize, state.t - 1), a));
            }
        }
        Ok(out)
    }

    /// Parents that are themselves reachable from the origin: the support of
    /// the uniform backward policy.
    pub fn dag_parents(&self, state: &GridState) -> Result<Vec<(GridState, Action)>> {
        Ok(self.parents(state)?.into_iter().filter(|(p, _)| p.is_reachable()).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::RngStream;

    fn env(forbid_backtrack: bool) -> GridEnv {
        GridEnv::new(
            30,
            MaskConfig {
                min_length: 50,
                max_length: 100,
                eps_stop: 0.5,
                forbid_backtrack,
                depth_aware_stop: true,
            },
        )
        .unwrap()
    }

    #[test]
    fn origin_masks_left_and_down() {
        let m = env(true)
            .valid_actions(&GridState::ORIGIN, None, &mut RngStream::new(0, 0))
            .unwrap();
        assert!(!m.allows(Action::Left));
        assert!(!m.allows(Action::Down));
        assert!(m.allows(Action::Up));
        assert!(m.allows(Action::Right));
    }

    #[test]
    fn only_stop_at_max_length() {
        let m = env(true)
            .valid_actions(&GridState::new(4, 9, 100), None, &mut RngStream::new(0, 0))
            .unwrap();
        assert_eq!(m.allowed().collect::<Vec<_>>(), vec![Action::Stop]);
    }

    #[test]
    fn backtrack_is_masked() {
        let s = GridState::new(5, 5, 10);
        let prev = GridState::new(5, 4, 9);
        let mut rng = RngStream::new(0, 0);
        let m = env(true).valid_actions(&s, Some(&prev), &mut rng).unwrap();
        assert!(!m.allows(Action::Down));
        let m = env(false).valid_actions(&s, Some(&prev), &mut rng).unwrap();
        assert!(m.allows(Action::Down));
    }

    #[test]
    fn out_of_bounds_state_errors() {
        let err = env(true)
            .valid_actions(&GridState::new(30, 0, 1), None, &mut RngStream::new(0, 0))
            .unwrap_err();
        assert!(matches!(err, Error::OutOfBounds { .. }));
    }

    #[test]
    fn step_examples() {
        let e = env(true);
        assert_eq!(
            e.step(&GridState::ORIGIN, Action::Up).unwrap(),
            Transition::Moved(GridState::new(0, 1, 1))
        );
        assert_eq!(
            e.step(&GridState::new(3, 7, 12), Action::Stop).unwrap(),
            Transition::Terminal { x: 3, y: 7 }
        );
        assert!(matches!(
            e.step(&GridState::new(29, 29, 58), Action::Right),
            Err(Error::InvalidAction { .. })
        ));
    }

    #[test]
    fn parents_examples() {
        let e = env(true);
        let mut p = e.parents(&GridState::new(0, 0, 4)).unwrap();
        p.sort();
        assert_eq!(
            p,
            vec![(GridState::new(0, 1, 3), Action::Down), (GridState::new(1, 0, 3), Action::Left)]
        );
        assert!(matches!(e.parents(&GridState::ORIGIN), Err(Error::RootHasNoParents)));
        assert_eq!(e.parents(&GridState::new(7, 9, 20)).unwrap().len(), 4);
    }

    #[test]
    fn dag_parents_are_reachable() {
        let e = env(false);
        // (2,0) at t = 2 is on the frontier: only (1,0,1) can precede it.
        let p = e.dag_parents(&GridState::new(2, 0, 2)).unwrap();
        assert_eq!(p, vec![(GridState::new(1, 0, 1), Action::Right)]);
    }

    #[test]
    fn stop_ramp_reaches_one_before_max() {
        let e = GridEnv::new(
            5,
            MaskConfig {
                min_length: 2,
                max_length: 4,
                eps_stop: 1.0,
                forbid_backtrack: false,
                depth_aware_stop: true,
            },
        )
        .unwrap();
        let mut rng = RngStream::new(1, 0);
        for _ in 0..200 {
            let before = e.valid_actions(&GridState::new(1, 0, 1), None, &mut rng).unwrap();
            assert!(!before.allows(Action::Stop));
            // t = 3: probability (3 - 2 + 1) / 3 < 1, but never masks everything.
            assert!(e.valid_actions(&GridState::new(2, 1, 3), None, &mut rng).unwrap().count() >= 1);
        }
    }

    #[test]
    fn mask_config_validation() {
        let mut cfg = *env(true).mask_config();
        cfg.min_length = 0;
        assert!(cfg.validate().is_err());
        cfg.min_length = 101;
        assert!(cfg.validate().is_err());
        cfg.min_length = 50;
        cfg.eps_stop = 1.5;
        assert!(cfg.validate().is_err());
    }
}
