//! Per-node process tree reconstructed from fork records.
//!
//! Every fork record creates one *incarnation* of the child pid. A pid that
//! only ever appears as a parent gets an implicit incarnation with no known
//! birth. Queries at time `t` resolve a pid to its latest incarnation born at
//! or before `t`, so reused pids are told apart.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use crate::model::{ForkEvent, Seconds};

/// Index into [`ProcessGraph`]'s incarnation table.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct IncarnationId(usize);

#[derive(Debug, Clone)]
pub struct Incarnation {
    pub pid: u32,
    /// `None` for implicit roots whose fork was never observed.
    pub birth: Option<Seconds>,
    pub parent: Option<IncarnationId>,
    pub cgroupid: Option<u64>,
    pub children: Vec<IncarnationId>,
}

#[derive(Debug, Clone, Default)]
pub struct ProcessGraph {
    incarnations: Vec<Incarnation>,
    /// Incarnations of a pid, oldest first; an implicit one always comes first.
    by_pid: HashMap<u32, Vec<IncarnationId>>,
    by_cgroup: BTreeMap<u64, BTreeSet<u32>>,
}

impl ProcessGraph {
    /// Builds the graph; `forks` are sorted by time first if they are not already.
    pub fn build(forks: &[ForkEvent]) -> ProcessGraph {
        let mut sorted;
        let forks = if forks.is_sorted_by_key(|f| f.time) {
            forks
        } else {
            sorted = forks.to_vec();
            sorted.sort_by_key(|f| f.time);
            &sorted
        };

        let mut g = ProcessGraph::default();
        for fork in forks {
            let parent = match g.incarnation_at(fork.parent_pid, fork.time) {
                Some(p) => p,
                None => g.push(Incarnation {
                    pid: fork.parent_pid,
                    birth: None,
                    parent: None,
                    cgroupid: None,
                    children: Vec::new(),
                }),
            };
            let child = g.push(Incarnation {
                pid: fork.pid,
                birth: Some(fork.time),
                parent: Some(parent),
                cgroupid: Some(fork.cgroupid),
                children: Vec::new(),
            });
            g.incarnations[parent.0].children.push(child);
            g.by_cgroup.entry(fork.cgroupid).or_default().insert(fork.pid);
        }
        g
    }

    fn push(&mut self, inc: Incarnation) -> IncarnationId {
        let id = IncarnationId(self.incarnations.len());
        let list = self.by_pid.entry(inc.pid).or_default();
        if inc.birth.is_none() {
            list.insert(0, id);
        } else {
            list.push(id);
        }
        self.incarnations.push(inc);
        id
    }

    pub fn is_empty(&self) -> bool {
        self.incarnations.is_empty()
    }

    pub fn incarnation(&self, id: IncarnationId) -> &Incarnation {
        &self.incarnations[id.0]
    }

    /// Pids never seen being forked.
    pub fn implicit_roots(&self) -> BTreeSet<u32> {
        self.incarnations
            .iter()
            .filter(|i| i.birth.is_none())
            .map(|i| i.pid)
            .collect()
    }

    /// The incarnation of `pid` alive at `at`, if any.
    pub fn incarnation_at(&self, pid: u32, at: Seconds) -> Option<IncarnationId> {
        let list = self.by_pid.get(&pid)?;
        list.iter()
            .rev()
            .find(|id| match self.incarnations[id.0].birth {
                Some(b) => b <= at,
                None => true,
            })
            .copied()
    }

    /// Cgroup of the latest birth record of `pid` not later than `at`.
    pub fn cgroup_of(&self, pid: u32, at: Seconds) -> Option<u64> {
        self.incarnation_at(pid, at)
            .and_then(|id| self.incarnations[id.0].cgroupid)
    }

    /// `pid` and its transitive fork children born at or before `at`.
    pub fn descendants(&self, pid: u32, at: Seconds) -> BTreeSet<u32> {
        let mut out = BTreeSet::from([pid]);
        let Some(root) = self.incarnation_at(pid, at) else {
            return out;
        };
        let mut stack = vec![root];
        while let Some(id) = stack.pop() {
            for &child in &self.incarnations[id.0].children {
                let inc = &self.incarnations[child.0];
                if inc.birth.is_some_and(|b| b <= at) {
                    out.insert(inc.pid);
                    stack.push(child);
                }
            }
        }
        out
    }

    /// Whether `id` is `ancestor` or lies below it.
    pub fn is_within(&self, mut id: IncarnationId, ancestor: IncarnationId) -> bool {
        loop {
            if id == ancestor {
                return true;
            }
            match self.incarnations[id.0].parent {
                Some(p) => id = p,
                None => return false,
            }
        }
    }

    /// Birth of `id` and of the next incarnation of the same pid, if any.
    pub fn lifetime(&self, id: IncarnationId) -> (Option<Seconds>, Option<Seconds>) {
        let inc = &self.incarnations[id.0];
        let next = self.by_pid[&inc.pid]
            .iter()
            .skip_while(|&&i| i != id)
            .nth(1)
            .and_then(|i| self.incarnations[i.0].birth);
        (inc.birth, next)
    }

    /// Pids ever seen in `cgroupid`.
    pub fn cgroup_members(&self, cgroupid: u64) -> Option<&BTreeSet<u32>> {
        self.by_cgroup.get(&cgroupid)
    }
}
