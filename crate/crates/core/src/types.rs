use std::fmt;

/// RNG used by every simulator and learner; seeded runs are bit-reproducible.
pub type SimRng = rand_chacha::ChaCha8Rng;

/// The decision maker's binary choice.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Action {
    /// Estimate the data from the last credible sample (`a = 0`).
    Estimate,
    /// Collect fresh data (`a = 1`).
    Collect,
}

impl Action {
    pub const ALL: [Action; 2] = [Action::Estimate, Action::Collect];

    pub fn index(self) -> usize {
        match self {
            Action::Estimate => 0,
            Action::Collect => 1,
        }
    }

    pub fn from_index(i: usize) -> Option<Action> {
        match i {
            0 => Some(Action::Estimate),
            1 => Some(Action::Collect),
            _ => None,
        }
    }

    pub fn is_collect(self) -> bool {
        self == Action::Collect
    }

    pub fn as_f64(self) -> f64 {
        self.index() as f64
    }
}

impl fmt::Display for Action {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.index())
    }
}

/// What reaches the decision maker after acting: a credible datum (an atom
/// index into `M(n)`) or nothing.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Observation {
    Blank,
    Data(usize),
}

impl Observation {
    pub fn is_blank(self) -> bool {
        matches!(self, Observation::Blank)
    }
}

/// Point `(x, y)` of the planning space: last credible data and blanks since.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct PlanningState {
    pub last: usize,
    pub elapsed: usize,
}

impl PlanningState {
    pub fn new(last: usize, elapsed: usize) -> Self {
        Self { last, elapsed }
    }

    /// Untruncated bookkeeping update: a blank adds one to the elapsed time,
    /// a credible datum resets it.
    pub fn advance(self, observation: Observation) -> Self {
        match observation {
            Observation::Blank => Self::new(self.last, self.elapsed + 1),
            Observation::Data(m) => Self::new(m, 0),
        }
    }
}

/// Independent deterministic stream `stream` of the generator seeded by `seed`.
pub fn stream_rng(seed: u64, stream: u64) -> SimRng {
    use rand::SeedableRng;
    let mut rng = SimRng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}
