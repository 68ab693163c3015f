//! Combinational values annotated with the depth of logic they passed through
//! since the last register. Latching a [`Wire`] records its depth, which is
//! how the simulator measures each datapath's critical path.

use std::ops::{Add, Mul, Sub};

use serde::{Deserialize, Serialize};

/// Adders and multipliers on the longest register-to-register path.
///
/// Ordered by multipliers first: one multiplier outweighs any small number of
/// adders at these widths.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct CriticalPath {
    pub adders: u32,
    pub multipliers: u32,
}

impl CriticalPath {
    fn key(self) -> (u32, u32) {
        (self.multipliers, self.adders)
    }

    pub fn max(self, other: CriticalPath) -> CriticalPath {
        if other.key() > self.key() {
            other
        } else {
            self
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct Wire {
    pub value: i64,
    path: CriticalPath,
}

impl Wire {
    /// Output of a register: no logic in front of it yet.
    pub fn reg(value: i64) -> Wire {
        Wire {
            value,
            path: CriticalPath::default(),
        }
    }

    pub fn path(self) -> CriticalPath {
        self.path
    }

    fn join(self, other: Wire, value: i64, adders: u32, multipliers: u32) -> Wire {
        let p = self.path.max(other.path);
        Wire {
            value,
            path: CriticalPath {
                adders: p.adders + adders,
                multipliers: p.multipliers + multipliers,
            },
        }
    }
}

impl Add for Wire {
    type Output = Wire;

    fn add(self, rhs: Wire) -> Wire {
        self.join(rhs, self.value + rhs.value, 1, 0)
    }
}

impl Sub for Wire {
    type Output = Wire;

    fn sub(self, rhs: Wire) -> Wire {
        self.join(rhs, self.value - rhs.value, 1, 0)
    }
}

impl Mul for Wire {
    type Output = Wire;

    fn mul(self, rhs: Wire) -> Wire {
        self.join(rhs, self.value * rhs.value, 0, 1)
    }
}
