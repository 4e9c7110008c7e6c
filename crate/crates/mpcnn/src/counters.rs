//! Online round and byte accounting, attributed per protocol scope.
//!
//! A round is one maximal batch of parallel sends (one collective exchange).
//! Protocols open a named scope; every collective that fires while a scope is
//! innermost is attributed to that scope, so e.g. the rescaling that follows a
//! linear layer shows up under `trunc_pr`, not `linear`.

use std::collections::BTreeMap;
use std::fmt;

#[derive(Debug, Default, Clone, Copy, PartialEq, Eq)]
pub struct ScopeCounters {
    pub rounds: u64,
    pub bytes_sent: u64,
    pub bytes_received: u64,
}

#[derive(Debug, Default, Clone)]
pub struct Counters {
    per_scope: BTreeMap<String, ScopeCounters>,
    stack: Vec<String>,
    pub total_rounds: u64,
    pub total_bytes_sent: u64,
    pub total_bytes_received: u64,
}

impl Counters {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push_scope(&mut self, name: &str) {
        self.stack.push(name.to_string());
    }

    pub fn pop_scope(&mut self) {
        self.stack.pop();
    }

    pub fn current_scope(&self) -> Option<&str> {
        self.stack.last().map(|s| s.as_str())
    }

    fn attribution(&self, fallback: &str) -> String {
        self.stack.last().cloned().unwrap_or_else(|| fallback.to_string())
    }

    /// Record one collective round under the innermost scope (or `fallback`
    /// when no scope is open).
    pub fn record_round(&mut self, fallback: &str) {
        let key = self.attribution(fallback);
        self.per_scope.entry(key).or_default().rounds += 1;
        self.total_rounds += 1;
    }

    pub fn record_sent(&mut self, fallback: &str, bytes: u64) {
        let key = self.attribution(fallback);
        self.per_scope.entry(key).or_default().bytes_sent += bytes;
        self.total_bytes_sent += bytes;
    }

    pub fn record_received(&mut self, fallback: &str, bytes: u64) {
        let key = self.attribution(fallback);
        self.per_scope.entry(key).or_default().bytes_received += bytes;
        self.total_bytes_received += bytes;
    }

    pub fn scope(&self, name: &str) -> ScopeCounters {
        self.per_scope.get(name).copied().unwrap_or_default()
    }

    pub fn scopes(&self) -> impl Iterator<Item = (&str, &ScopeCounters)> {
        self.per_scope.iter().map(|(k, v)| (k.as_str(), v))
    }

    /// Canonical text rendering, used for transcript/metric comparison.
    pub fn render(&self) -> String {
        let mut out = String::new();
        for (name, c) in &self.per_scope {
            out.push_str(&format!(
                "{name}: rounds={} sent={} received={}\n",
                c.rounds, c.bytes_sent, c.bytes_received
            ));
        }
        out.push_str(&format!(
            "total: rounds={} sent={} received={}\n",
            self.total_rounds, self.total_bytes_sent, self.total_bytes_received
        ));
        out
    }
}

impl fmt::Display for Counters {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.render())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn attribution_follows_innermost_scope() {
        let mut c = Counters::new();
        c.record_round("mul");
        c.push_scope("gez");
        c.record_round("open");
        c.record_sent("open", 10);
        c.push_scope("inner");
        c.record_round("open");
        c.pop_scope();
        c.record_round("open");
        c.pop_scope();
        assert_eq!(c.scope("mul").rounds, 1);
        assert_eq!(c.scope("gez").rounds, 2);
        assert_eq!(c.scope("gez").bytes_sent, 10);
        assert_eq!(c.scope("inner").rounds, 1);
        assert_eq!(c.total_rounds, 4);
    }
}
