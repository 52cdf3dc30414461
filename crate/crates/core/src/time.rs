//! Virtual time. One tick is one simulated millisecond.

use std::fmt;
use std::ops::{Add, Sub};

use serde::{Deserialize, Serialize};

/// A duration in ticks.
pub type Ticks = u64;

#[derive(Copy, Clone, Debug, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct VirtualTime(pub u64);

impl VirtualTime {
    pub const ZERO: VirtualTime = VirtualTime(0);

    pub fn ticks(self) -> u64 {
        self.0
    }
}

impl Add<Ticks> for VirtualTime {
    type Output = VirtualTime;

    fn add(self, rhs: Ticks) -> VirtualTime {
        VirtualTime(self.0.saturating_add(rhs))
    }
}

impl Sub for VirtualTime {
    type Output = Ticks;

    fn sub(self, rhs: VirtualTime) -> Ticks {
        self.0.saturating_sub(rhs.0)
    }
}

impl fmt::Display for VirtualTime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}ms", self.0)
    }
}
