//! Transition memory and target-network sync schedule.
//!
//! Pixel observations are not stored inside records: frames are interned
//! once in the buffer's frame store and records refer to them by id. A
//! frame is dropped when the last record referring to it is evicted.

use std::collections::{HashMap, VecDeque};

use efe_autodiff::{Module, Real};
use rand::Rng;

use crate::env::{Action, Frame, State4};
use crate::error::ReplayError;
use crate::networks::STACK_LEN;

pub const DEFAULT_CAPACITY: usize = 65_536;
pub const BATCH_SIZE: usize = 32;
pub const FREEZE_PERIOD: u64 = 25;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct FrameId(u64);

/// Frames of an observation stack, oldest first.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct StackRef(pub [FrameId; STACK_LEN]);

impl StackRef {
    /// The stack after appending `frame`.
    pub fn shifted(self, frame: FrameId) -> Self {
        let [_, a, b, c] = self.0;
        StackRef([a, b, c, frame])
    }

    /// Episode-start stack: `frame` repeated.
    pub fn padded(frame: FrameId) -> Self {
        StackRef([frame; STACK_LEN])
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Observation {
    State(State4),
    Stack(StackRef),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Kind {
    State,
    Stack,
}

impl Observation {
    fn kind(&self) -> Kind {
        match self {
            Observation::State(_) => Kind::State,
            Observation::Stack(_) => Kind::Stack,
        }
    }

    fn frames(&self) -> &[FrameId] {
        match self {
            Observation::State(_) => &[],
            Observation::Stack(s) => &s.0,
        }
    }

    pub fn as_state(&self) -> Option<State4> {
        match self {
            Observation::State(s) => Some(*s),
            Observation::Stack(_) => None,
        }
    }

    pub fn as_stack(&self) -> Option<StackRef> {
        match self {
            Observation::Stack(s) => Some(*s),
            Observation::State(_) => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TransitionRecord {
    /// Observation and action one step earlier in the same episode.
    pub prev: Option<(Observation, Action)>,
    pub obs: Observation,
    pub action: Action,
    pub reward: f64,
    pub next_obs: Observation,
    pub done: bool,
}

impl TransitionRecord {
    fn observations(&self) -> impl Iterator<Item = &Observation> {
        self.prev.iter().map(|(o, _)| o).chain([&self.obs, &self.next_obs])
    }
}

#[derive(Clone, Debug)]
pub struct ReplayBuffer {
    capacity: usize,
    records: VecDeque<TransitionRecord>,
    kind: Option<Kind>,
    frames: HashMap<FrameId, (Frame, u32)>,
    next_frame: u64,
}

impl Default for ReplayBuffer {
    fn default() -> Self {
        Self::new(DEFAULT_CAPACITY)
    }
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Self {
        assert!(capacity > 0, "replay capacity must be positive");
        ReplayBuffer { capacity, records: VecDeque::new(), kind: None, frames: HashMap::new(), next_frame: 0 }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Number of frames currently held by the frame store.
    pub fn stored_frames(&self) -> usize {
        self.frames.len()
    }

    /// Stores a frame for later reference by records.
    pub fn intern_frame(&mut self, frame: Frame) -> FrameId {
        let id = FrameId(self.next_frame);
        self.next_frame += 1;
        self.frames.insert(id, (frame, 0));
        id
    }

    pub fn frame(&self, id: FrameId) -> Result<&Frame, ReplayError> {
        self.frames.get(&id).map(|(f, _)| f).ok_or(ReplayError::MissingFrame(id.0))
    }

    pub fn stack_frames(&self, s: StackRef) -> Result<[&Frame; STACK_LEN], ReplayError> {
        let [a, b, c, d] = s.0;
        Ok([self.frame(a)?, self.frame(b)?, self.frame(c)?, self.frame(d)?])
    }

    pub fn push(&mut self, rec: TransitionRecord) -> Result<(), ReplayError> {
        if rec.reward != 1.0 {
            return Err(ReplayError::InvalidReward(rec.reward.to_string()));
        }
        let kind = self.kind.unwrap_or(rec.obs.kind());
        if rec.observations().any(|o| o.kind() != kind) {
            return Err(ReplayError::Heterogeneous);
        }
        for o in rec.observations() {
            for &id in o.frames() {
                self.frame(id)?;
            }
        }
        self.kind = Some(kind);
        for o in rec.observations() {
            for id in o.frames() {
                self.frames.get_mut(id).expect("checked above").1 += 1;
            }
        }
        self.records.push_back(rec);
        if self.records.len() > self.capacity {
            let old = self.records.pop_front().expect("nonempty");
            for o in old.observations() {
                for id in o.frames() {
                    let entry = self.frames.get_mut(id).expect("referenced frame");
                    entry.1 -= 1;
                    if entry.1 == 0 {
                        self.frames.remove(id);
                    }
                }
            }
        }
        Ok(())
    }

    /// Record `i`, oldest first.
    pub fn get(&self, i: usize) -> Option<&TransitionRecord> {
        self.records.get(i)
    }

    pub fn iter(&self) -> impl Iterator<Item = &TransitionRecord> {
        self.records.iter()
    }

    /// `n` uniform draws with replacement.
    pub fn sample<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Result<Vec<&TransitionRecord>, ReplayError> {
        if self.records.len() < n {
            return Err(ReplayError::NotReady { have: self.records.len(), need: n });
        }
        Ok((0..n).map(|_| &self.records[rng.random_range(0..self.records.len())]).collect())
    }
}

/// Counts learning steps; the target network is refreshed at every
/// multiple of the period.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TargetSync {
    period: u64,
    steps: u64,
}

impl Default for TargetSync {
    fn default() -> Self {
        Self::new(FREEZE_PERIOD)
    }
}

impl TargetSync {
    pub fn new(period: u64) -> Self {
        assert!(period > 0, "freeze period must be positive");
        TargetSync { period, steps: 0 }
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// Counts one learning step and copies `online` into `target` if the
    /// new count is a multiple of the period. Returns whether it synced.
    pub fn maybe_sync<T: Real, M: Module<T>>(&mut self, online: &M, target: &mut M) -> bool {
        self.steps += 1;
        let due = self.steps % self.period == 0;
        if due {
            target.copy_state_from(online);
        }
        due
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{render, State4};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn state_record(i: usize) -> TransitionRecord {
        let s = State4::new(i as f64, 0.0, 0.0, 0.0);
        TransitionRecord { prev: None, obs: Observation::State(s), action: Action::PushLeft, reward: 1.0, next_obs: Observation::State(s), done: false }
    }

    #[test]
    fn push_grows_then_evicts_oldest() {
        let mut buf = ReplayBuffer::new(3);
        buf.push(state_record(0)).unwrap();
        assert_eq!(buf.len(), 1);
        for i in 1..5 {
            buf.push(state_record(i)).unwrap();
        }
        assert_eq!(buf.len(), 3);
        let xs: Vec<f64> = buf.iter().map(|r| r.obs.as_state().unwrap().x).collect();
        assert_eq!(xs, vec![2.0, 3.0, 4.0]);
    }

    #[test]
    fn rejects_bad_reward_and_mixed_kinds() {
        let mut buf = ReplayBuffer::new(4);
        let mut r = state_record(0);
        r.reward = 0.5;
        assert_eq!(buf.push(r), Err(ReplayError::InvalidReward("0.5".into())));
        buf.push(state_record(0)).unwrap();
        let id = buf.intern_frame(render(&State4::default()));
        let mut mixed = state_record(1);
        mixed.next_obs = Observation::Stack(StackRef::padded(id));
        assert_eq!(buf.push(mixed), Err(ReplayError::Heterogeneous));
        let stacked = TransitionRecord { obs: Observation::Stack(StackRef::padded(id)), next_obs: Observation::Stack(StackRef::padded(id)), ..state_record(2) };
        assert_eq!(buf.push(stacked), Err(ReplayError::Heterogeneous));
    }

    #[test]
    fn frames_are_released_with_their_last_record() {
        let mut buf = ReplayBuffer::new(2);
        let ids: Vec<FrameId> = (0..8).map(|i| buf.intern_frame(render(&State4::new(i as f64 * 0.1, 0.0, 0.0, 0.0)))).collect();
        let mut stack = StackRef::padded(ids[0]);
        let mut prev = None;
        for &id in &ids[1..] {
            let next = stack.shifted(id);
            let rec = TransitionRecord {
                prev,
                obs: Observation::Stack(stack),
                action: Action::PushRight,
                reward: 1.0,
                next_obs: Observation::Stack(next),
                done: false,
            };
            buf.push(rec).unwrap();
            prev = Some((Observation::Stack(stack), Action::PushRight));
            stack = next;
        }
        // the two newest records, predecessors included, span frames 1..=7
        assert_eq!(buf.stored_frames(), 7);
        assert!(buf.frame(ids[0]).is_err());
        assert_eq!(*buf.stack_frames(stack).unwrap()[3], render(&State4::new(0.7, 0.0, 0.0, 0.0)));
    }

    #[test]
    fn sampling_readiness_and_determinism() {
        let mut buf = ReplayBuffer::new(100);
        for i in 0..31 {
            buf.push(state_record(i)).unwrap();
        }
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(buf.sample(BATCH_SIZE, &mut rng).unwrap_err(), ReplayError::NotReady { have: 31, need: 32 });
        buf.push(state_record(31)).unwrap();
        let a = buf.sample(BATCH_SIZE, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let b = buf.sample(BATCH_SIZE, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert_eq!(a.len(), 32);
        assert_eq!(a, b);
    }
}
