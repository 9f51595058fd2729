//! Deliberately unsafe protocol variants used to check that the monitor bites.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

/// Each variant disables exactly one guard or threshold of the honest replica.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Mutation {
    /// Certificates need only `f + 1` votes.
    WeakQuorum,
    /// Optimistic votes skip the `lock = C_{v-1}(parent)` requirement.
    NoLockCheck,
    /// Votes of different kinds aggregate into one certificate.
    MixedQcKinds,
    /// Normal votes ignore an earlier optimistic vote for a different block.
    NoEquivocationGuard,
    /// Optimistic votes skip the `timeout_view < v - 1` requirement.
    NoTimeoutGuard,
    /// Direct commit accepts certificates on non-adjacent views.
    NonAdjacentCommit,
}

impl Mutation {
    pub const ALL: [Mutation; 6] = [
        Mutation::WeakQuorum,
        Mutation::NoLockCheck,
        Mutation::MixedQcKinds,
        Mutation::NoEquivocationGuard,
        Mutation::NoTimeoutGuard,
        Mutation::NonAdjacentCommit,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Mutation::WeakQuorum => "WeakQuorum",
            Mutation::NoLockCheck => "NoLockCheck",
            Mutation::MixedQcKinds => "MixedQcKinds",
            Mutation::NoEquivocationGuard => "NoEquivocationGuard",
            Mutation::NoTimeoutGuard => "NoTimeoutGuard",
            Mutation::NonAdjacentCommit => "NonAdjacentCommit",
        }
    }
}

impl fmt::Display for Mutation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Mutation {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Mutation::ALL
            .into_iter()
            .find(|m| m.name().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| format!("unknown mutation `{s}`"))
    }
}
